//! Tagged parameter storage shared by the model, plugins and federation.
//!
//! Every tensor is addressed by a stable string id (`blocks.3.attn.w_q`) and
//! carries exactly one [`LayerTag`]. Strategies partition models purely in
//! terms of ids and tags, so most bookkeeping works on a [`Catalog`] (ids,
//! tags and shapes) without allocating tensor storage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerTag {
    PatchEmbedding,
    PositionEmbedding,
    Layernorm,
    Attention,
    Mlp,
    ClassificationHead,
    Plugin,
}

impl LayerTag {
    pub const ALL: [LayerTag; 7] = [
        LayerTag::PatchEmbedding,
        LayerTag::PositionEmbedding,
        LayerTag::Layernorm,
        LayerTag::Attention,
        LayerTag::Mlp,
        LayerTag::ClassificationHead,
        LayerTag::Plugin,
    ];

    /// The five layer types studied in the sensitivity protocol.
    pub const SENSITIVITY: [LayerTag; 5] = [
        LayerTag::PatchEmbedding,
        LayerTag::PositionEmbedding,
        LayerTag::Layernorm,
        LayerTag::Attention,
        LayerTag::Mlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerTag::PatchEmbedding => "patch_embedding",
            LayerTag::PositionEmbedding => "position_embedding",
            LayerTag::Layernorm => "layernorm",
            LayerTag::Attention => "attention",
            LayerTag::Mlp => "mlp",
            LayerTag::ClassificationHead => "classification_head",
            LayerTag::Plugin => "plugin",
        }
    }

    /// Wire code used by the PFXP container.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<LayerTag> {
        LayerTag::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerTag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::config("layer_tag", format!("unknown layer tag `{s}`")))
    }
}

/// Id, tag and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub id: String,
    pub tag: LayerTag,
    pub shape: Vec<usize>,
}

impl ParamInfo {
    pub fn new(id: impl Into<String>, tag: LayerTag, shape: &[usize]) -> Self {
        ParamInfo {
            id: id.into(),
            tag,
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Which parameters an operation applies to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    All,
    Tags(BTreeSet<LayerTag>),
    Ids(BTreeSet<String>),
}

impl Selector {
    pub fn tags(tags: impl IntoIterator<Item = LayerTag>) -> Self {
        Selector::Tags(tags.into_iter().collect())
    }

    pub fn ids<S: Into<String>>(ids: impl IntoIterator<Item = S>) -> Self {
        Selector::Ids(ids.into_iter().map(Into::into).collect())
    }

    pub fn matches(&self, id: &str, tag: LayerTag) -> bool {
        match self {
            Selector::All => true,
            Selector::Tags(tags) => tags.contains(&tag),
            Selector::Ids(ids) => ids.contains(id),
        }
    }
}

/// Ordered listing of parameter ids, tags and shapes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    entries: Vec<ParamInfo>,
}

impl Catalog {
    pub fn new(entries: Vec<ParamInfo>) -> Self {
        Catalog { entries }
    }

    pub fn entries(&self) -> &[ParamInfo] {
        &self.entries
    }

    pub fn extend(&mut self, other: Catalog) {
        self.entries.extend(other.entries);
    }

    pub fn get(&self, id: &str) -> Option<&ParamInfo> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn ids_with_tags(&self, tags: &BTreeSet<LayerTag>) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter(|e| tags.contains(&e.tag))
            .map(|e| e.id.clone())
            .collect()
    }

    /// Element count over the selection.
    pub fn count(&self, selector: &Selector) -> usize {
        self.entries
            .iter()
            .filter(|e| selector.matches(&e.id, e.tag))
            .map(ParamInfo::numel)
            .sum()
    }

    pub fn count_ids<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> usize {
        ids.into_iter()
            .filter_map(|id| self.get(id))
            .map(ParamInfo::numel)
            .sum()
    }

    pub fn count_tag(&self, tag: LayerTag) -> usize {
        self.count(&Selector::tags([tag]))
    }

    pub fn total(&self) -> usize {
        self.count(&Selector::All)
    }

    /// Fails with a selector error if an id-based selector names unknown ids.
    pub fn check_selector(&self, selector: &Selector) -> Result<()> {
        if let Selector::Ids(ids) = selector {
            for id in ids {
                if self.get(id).is_none() {
                    return Err(Error::Selector(id.clone()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub tag: LayerTag,
    pub value: ArrayD<f64>,
}

/// Map from parameter id to tagged tensor value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros(catalog: &Catalog) -> Self {
        let mut set = ParameterSet::new();
        for info in catalog.entries() {
            set.insert(info.id.clone(), info.tag, ArrayD::zeros(IxDyn(&info.shape)));
        }
        set
    }

    pub fn insert(&mut self, id: impl Into<String>, tag: LayerTag, value: ArrayD<f64>) {
        self.entries.insert(id.into(), Parameter { tag, value });
    }

    pub fn get(&self, id: &str) -> Option<&Parameter> {
        self.entries.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Parameter> {
        self.entries.get_mut(id)
    }

    pub fn remove(&mut self, id: &str) -> Option<Parameter> {
        self.entries.remove(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.entries.iter_mut()
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn catalog(&self) -> Catalog {
        Catalog::new(
            self.entries
                .iter()
                .map(|(id, p)| ParamInfo::new(id.clone(), p.tag, p.value.shape()))
                .collect(),
        )
    }

    /// Copy of the entries whose ids are in `ids`; ids not present are skipped.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> ParameterSet {
        let mut out = ParameterSet::new();
        for id in ids {
            if let Some(p) = self.entries.get(id) {
                out.entries.insert(id.clone(), p.clone());
            }
        }
        out
    }

    /// Overwrite existing entries with the values in `other`.
    ///
    /// Every id in `other` must already exist here with the same shape.
    pub fn overwrite(&mut self, other: &ParameterSet) -> Result<()> {
        for (id, p) in &other.entries {
            let dst = self.entries.get_mut(id).ok_or_else(|| Error::Selector(id.clone()))?;
            if dst.value.shape() != p.value.shape() {
                return Err(Error::Input(format!(
                    "shape mismatch for `{id}`: {:?} vs {:?}",
                    dst.value.shape(),
                    p.value.shape()
                )));
            }
            dst.value.assign(&p.value);
        }
        Ok(())
    }

    /// In-place `self[id] -= lr * update[id]` for every id of `update`.
    pub fn sgd_step(&mut self, update: &ParameterSet, lr: f64) -> Result<()> {
        for (id, g) in &update.entries {
            let dst = self.entries.get_mut(id).ok_or_else(|| Error::Selector(id.clone()))?;
            if dst.value.shape() != g.value.shape() {
                return Err(Error::Input(format!("gradient shape mismatch for `{id}`")));
            }
            dst.value.scaled_add(-lr, &g.value);
        }
        Ok(())
    }

    /// True when both sets have identical ids, tags and shapes.
    pub fn same_schema(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((a, pa), (b, pb))| a == b && pa.tag == pb.tag && pa.value.shape() == pb.value.shape())
    }

    pub fn matrix(&self, id: &str) -> Result<ArrayView2<'_, f64>> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::Selector(id.to_string()))?
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Input(format!("`{id}` is not a matrix")))
    }

    pub fn vector(&self, id: &str) -> Result<ArrayView1<'_, f64>> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::Selector(id.to_string()))?
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Input(format!("`{id}` is not a vector")))
    }

    pub fn matrix_mut(&mut self, id: &str) -> Result<ArrayViewMut2<'_, f64>> {
        self.entries
            .get_mut(id)
            .ok_or_else(|| Error::Selector(id.to_string()))?
            .value
            .view_mut()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Input(format!("`{id}` is not a matrix")))
    }

    pub fn vector_mut(&mut self, id: &str) -> Result<ArrayViewMut1<'_, f64>> {
        self.entries
            .get_mut(id)
            .ok_or_else(|| Error::Selector(id.to_string()))?
            .value
            .view_mut()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Input(format!("`{id}` is not a vector")))
    }

    /// Entries of both sets; ids must be disjoint.
    pub fn merged(&self, other: &ParameterSet) -> Result<ParameterSet> {
        let mut out = self.clone();
        for (id, p) in &other.entries {
            if out.entries.insert(id.clone(), p.clone()).is_some() {
                return Err(Error::Usage(format!("duplicate parameter id `{id}`")));
            }
        }
        Ok(out)
    }

    pub fn write_pfxp<W: Write>(&self, w: W) -> Result<()> {
        pfxp::write(self, w)
    }

    pub fn read_pfxp<R: Read>(r: R) -> Result<ParameterSet> {
        pfxp::read(r)
    }
}

/// The `PFXP` binary container.
///
/// Layout (all integers little-endian): magic `PFXP`, version `u32`, then
/// entries until end of input, each `id_len u32 | id utf-8 | tag u8 |
/// rank u32 | dims u32 x rank | f64 payload`.
pub mod pfxp {
    use super::*;

    pub const MAGIC: &[u8; 4] = b"PFXP";
    pub const VERSION: u32 = 1;

    pub fn write<W: Write>(set: &ParameterSet, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (id, p) in set.iter() {
            let id_bytes = id.as_bytes();
            w.write_all(&(id_bytes.len() as u32).to_le_bytes())?;
            w.write_all(id_bytes)?;
            w.write_all(&[p.tag.code()])?;
            w.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in p.value.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<ParameterSet> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut set = ParameterSet::new();
        while cur.pos < bytes.len() {
            let id_len = cur.u32()? as usize;
            let id = std::str::from_utf8(cur.take(id_len)?)
                .map_err(|_| Error::Format("id is not utf-8".into()))?
                .to_string();
            let code = cur.take(1)?[0];
            let tag = LayerTag::from_code(code).ok_or_else(|| Error::Format(format!("unknown tag code {code}")))?;
            let rank = cur.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = cur.take(numel * 8)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let value = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::Format(e.to_string()))?;
            if set.contains(&id) {
                return Err(Error::Format(format!("duplicate id `{id}`")));
            }
            set.insert(id, tag, value);
        }
        Ok(set)
    }

    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let end = self
                .pos
                .checked_add(n)
                .filter(|&e| e <= self.bytes.len())
                .ok_or_else(|| Error::Format("truncated input".into()))?;
            let out = &self.bytes[self.pos..end];
            self.pos = end;
            Ok(out)
        }

        fn u32(&mut self) -> Result<u32> {
            let b = self.take(4)?;
            Ok(u32::from_le_bytes(b.try_into().expect("4-byte slice")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> ParameterSet {
        let mut s = ParameterSet::new();
        s.insert("a.w", LayerTag::Attention, array![[1.0, 2.0], [3.0, 4.5]].into_dyn());
        s.insert("b", LayerTag::Plugin, array![-0.25].into_dyn());
        s.insert("scalar", LayerTag::Layernorm, ArrayD::from_elem(IxDyn(&[]), 7.0));
        s
    }

    #[test]
    fn pfxp_layout_is_bit_exact() {
        let mut s = ParameterSet::new();
        s.insert("x", LayerTag::Mlp, array![1.5].into_dyn());
        let mut buf = Vec::new();
        s.write_pfxp(&mut buf).unwrap();
        let mut expected = b"PFXP".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.push(b'x');
        expected.push(4);
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1.5f64.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn pfxp_round_trip() {
        let s = sample();
        let mut buf = Vec::new();
        s.write_pfxp(&mut buf).unwrap();
        assert_eq!(ParameterSet::read_pfxp(&buf[..]).unwrap(), s);
    }

    #[test]
    fn pfxp_rejects_garbage() {
        assert!(matches!(ParameterSet::read_pfxp(&b"NOPE"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        sample().write_pfxp(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(ParameterSet::read_pfxp(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn overwrite_checks_schema() {
        let mut s = sample();
        let mut other = ParameterSet::new();
        other.insert("a.w", LayerTag::Attention, array![1.0].into_dyn());
        assert!(s.overwrite(&other).is_err());
        other.insert("missing", LayerTag::Mlp, array![1.0].into_dyn());
        assert!(matches!(
            s.overwrite(&other.subset(&["missing".to_string()])),
            Err(Error::Selector(_))
        ));
    }

    #[test]
    fn catalog_counts_partition_by_tag() {
        let c = sample().catalog();
        let sum: usize = LayerTag::ALL.iter().map(|&t| c.count_tag(t)).sum();
        assert_eq!(sum, c.total());
        assert_eq!(c.total(), 6);
        assert!(c.check_selector(&Selector::ids(["nope"])).is_err());
    }

    #[test]
    fn tag_strings_round_trip() {
        for t in LayerTag::ALL {
            assert_eq!(t.as_str().parse::<LayerTag>().unwrap(), t);
            assert_eq!(LayerTag::from_code(t.code()), Some(t));
        }
    }
}
