//! Batched ViT forward and reverse-mode backward.
//!
//! Token matrices are `[batch·tokens, embed_dim]` with sample `b` occupying
//! rows `b·T .. (b+1)·T`. Row 0 of every sample is `[CLS]`, followed by any
//! prompt tokens and then the patches.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array4, ArrayView2, Axis};

use super::attention::{mha_kernel, mha_kernel_backward};
use super::loss::{cross_entropy_grad, cross_entropy_loss};
use super::ops::{gelu, gelu_derivative, layer_norm, layer_norm_backward, linear, LnCache};
use super::{Batch, Model};
use crate::error::{Error, Result};
use crate::params::{LayerTag, ParameterSet, Selector};
use crate::plugins::{PluginKind, PluginState};

struct Attached<'a> {
    prefix: Option<&'a PluginState>,
    prompt: Option<&'a PluginState>,
    mlp: Option<&'a PluginState>,
}

impl<'a> Attached<'a> {
    fn resolve(model: &Model, plugins: &[&'a PluginState]) -> Result<Self> {
        let mut out = Attached {
            prefix: None,
            prompt: None,
            mlp: None,
        };
        for &p in plugins {
            p.check_compatible(model.config())?;
            let slot = match p.kind() {
                PluginKind::VanillaPrefix | PluginKind::AdapterPrefix => &mut out.prefix,
                PluginKind::Prompt => &mut out.prompt,
                PluginKind::MlpAdapter => &mut out.mlp,
            };
            if slot.is_some() {
                return Err(Error::Usage(format!(
                    "conflicting plugin {} attached",
                    p.kind().as_str()
                )));
            }
            *slot = Some(p);
        }
        Ok(out)
    }

    fn prompt_len(&self) -> usize {
        self.prompt
            .map_or(0, |p| p.params.get(&p.prompt_id()).map_or(0, |t| t.value.shape()[0]))
    }
}

/// `[B, C, H, W]` to `[B·num_patches, C·p·p]`, patches in row-major grid
/// order, features ordered `(channel, dy, dx)`.
fn patchify(images: &Array4<f64>, p: usize) -> Array2<f64> {
    let (b, c, h, w) = images.dim();
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::zeros((b * gh * gw, c * p * p));
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let row = bi * gh * gw + gy * gw + gx;
                let mut col = 0;
                for ci in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[[row, col]] = images[[bi, ci, gy * p + dy, gx * p + dx]];
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Generated prefixes `[B·T, 2d]` and the tanh hidden state.
    generated: Option<(Array2<f64>, Array2<f64>)>,
    probs: Vec<Vec<Array2<f64>>>,
    heads: Array2<f64>,
    ln2: LnCache,
    c: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
    /// MLP output before the adapter, adapter pre-activation and activation.
    adapter: Option<(Array2<f64>, Array2<f64>, Array2<f64>)>,
}

struct Cache {
    patches: Array2<f64>,
    tokens: usize,
    prompt_len: usize,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    normed: Array2<f64>,
}

fn p_vec<'a>(params: &'a ParameterSet, id: &str) -> Result<ndarray::ArrayView1<'a, f64>> {
    params.vector(id)
}

fn run(model: &Model, att: &Attached, batch: &Batch) -> Result<(Array2<f64>, Cache)> {
    batch.check(model.config())?;
    let cfg = model.config();
    let prm = model.params();
    let d = cfg.embed_dim;
    let bsz = batch.len();
    let np = cfg.num_patches();
    let plen = att.prompt_len();
    let t = 1 + plen + np;

    let patches = patchify(&batch.images, cfg.patch_size);
    let emb = linear(
        patches.view(),
        prm.matrix("patch_embed.weight")?,
        Some(p_vec(prm, "patch_embed.bias")?),
    );
    let cls = p_vec(prm, "cls_token")?;
    let pos = prm.matrix("pos_embed")?;
    let prompts = match att.prompt {
        Some(p) if plen > 0 => Some(p.params.matrix(&p.prompt_id())?),
        _ => None,
    };

    let mut h = Array2::zeros((bsz * t, d));
    for b in 0..bsz {
        let base = b * t;
        h.row_mut(base).assign(&(&cls + &pos.row(0)));
        if let Some(pr) = prompts {
            h.slice_mut(s![base + 1..base + 1 + plen, ..]).assign(&pr);
        }
        let mut dst = h.slice_mut(s![base + 1 + plen..base + t, ..]);
        dst.assign(&emb.slice(s![b * np..(b + 1) * np, ..]));
        dst += &pos.slice(s![1.., ..]);
    }

    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let id = |n: &str| format!("blocks.{i}.{n}");
        let (a, ln1) = layer_norm(
            h.view(),
            p_vec(prm, &id("norm1.weight"))?,
            p_vec(prm, &id("norm1.bias"))?,
        );
        let q = linear(
            a.view(),
            prm.matrix(&id("attn.w_q"))?,
            Some(p_vec(prm, &id("attn.b_q"))?),
        );
        let k = linear(
            a.view(),
            prm.matrix(&id("attn.w_k"))?,
            Some(p_vec(prm, &id("attn.b_k"))?),
        );
        let v = linear(
            a.view(),
            prm.matrix(&id("attn.w_v"))?,
            Some(p_vec(prm, &id("attn.b_v"))?),
        );

        let prefix_plugin = att.prefix.filter(|p| p.covers_block(i));
        let scale = prefix_plugin.map_or(1.0, |p| p.spec.scale);
        let generated = match prefix_plugin {
            Some(p) if p.kind() == PluginKind::AdapterPrefix => {
                let hid = a.dot(&p.matrix(i, "w_down")?).mapv(f64::tanh);
                let gen = hid.dot(&p.matrix(i, "w_up")?);
                Some((gen, hid))
            }
            _ => None,
        };
        let free = match prefix_plugin {
            Some(p) if p.kind() == PluginKind::VanillaPrefix => Some((p.matrix(i, "keys")?, p.matrix(i, "values")?)),
            _ => None,
        };

        let mut heads = Array2::zeros((bsz * t, d));
        let mut probs = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let rows = s![b * t..(b + 1) * t, ..];
            let prefix = match (&generated, free) {
                (Some((gen, _)), _) => {
                    let g = gen.slice(rows);
                    Some((g.slice_move(s![.., ..d]), g.slice_move(s![.., d..])))
                }
                (None, Some(kv)) => Some(kv),
                _ => None,
            };
            let (out, pr) = mha_kernel(
                q.slice(rows),
                k.slice(rows),
                v.slice(rows),
                prefix,
                scale,
                cfg.num_heads,
            );
            heads.slice_mut(rows).assign(&out);
            probs.push(pr);
        }
        let o = linear(
            heads.view(),
            prm.matrix(&id("attn.w_o"))?,
            Some(p_vec(prm, &id("attn.b_o"))?),
        );
        let h1 = &h + &o;

        let (c, ln2) = layer_norm(
            h1.view(),
            p_vec(prm, &id("norm2.weight"))?,
            p_vec(prm, &id("norm2.bias"))?,
        );
        let f1 = linear(
            c.view(),
            prm.matrix(&id("mlp.fc1.weight"))?,
            Some(p_vec(prm, &id("mlp.fc1.bias"))?),
        );
        let g = gelu(&f1);
        let m = linear(
            g.view(),
            prm.matrix(&id("mlp.fc2.weight"))?,
            Some(p_vec(prm, &id("mlp.fc2.bias"))?),
        );
        let (m_out, adapter) = match att.mlp.filter(|p| p.covers_block(i)) {
            Some(p) => {
                let u = m.dot(&p.matrix(i, "w_down")?);
                let gu = gelu(&u);
                let out = &m + &gu.dot(&p.matrix(i, "w_up")?);
                (out, Some((m, u, gu)))
            }
            None => (m, None),
        };
        h = &h1 + &m_out;

        blocks.push(BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            generated,
            probs,
            heads,
            ln2,
            c,
            f1,
            g,
            adapter,
        });
    }

    let cls_rows = h.select(Axis(0), &(0..bsz).map(|b| b * t).collect::<Vec<_>>());
    let (normed, ln_f) = layer_norm(cls_rows.view(), p_vec(prm, "norm.weight")?, p_vec(prm, "norm.bias")?);
    let logits = linear(
        normed.view(),
        prm.matrix("head.weight")?,
        Some(p_vec(prm, "head.bias")?),
    );
    Ok((
        logits,
        Cache {
            patches,
            tokens: t,
            prompt_len: plen,
            blocks,
            ln_f,
            normed,
        },
    ))
}

pub(crate) fn forward(model: &Model, plugins: &[&PluginState], batch: &Batch) -> Result<Array2<f64>> {
    let att = Attached::resolve(model, plugins)?;
    run(model, &att, batch).map(|(logits, _)| logits)
}

/// Collects gradients for selected ids only.
struct Sink<'s> {
    selector: &'s Selector,
    tags: BTreeMap<String, LayerTag>,
    out: ParameterSet,
}

impl Sink<'_> {
    fn wants(&self, id: &str) -> bool {
        self.tags.get(id).is_some_and(|&tag| self.selector.matches(id, tag))
    }

    fn put<D: ndarray::Dimension>(&mut self, id: &str, value: ndarray::Array<f64, D>) {
        let tag = self.tags[id];
        self.out.insert(id.to_string(), tag, value.into_dyn());
    }

    /// Weight and bias gradients of `y = x·W + b`.
    fn linear(&mut self, w: &str, b: Option<&str>, x: ArrayView2<f64>, dy: ArrayView2<f64>) {
        if self.wants(w) {
            self.put(w, x.t().dot(&dy));
        }
        if let Some(b) = b.filter(|b| self.wants(b)) {
            self.put(b, dy.sum_axis(Axis(0)));
        }
    }

    fn norm(&mut self, prefix: &str, dgamma: Array1<f64>, dbeta: Array1<f64>) {
        let (w, b) = (format!("{prefix}.weight"), format!("{prefix}.bias"));
        if self.wants(&w) {
            self.put(&w, dgamma);
        }
        if self.wants(&b) {
            self.put(&b, dbeta);
        }
    }
}

/// Position of an id in the forward order: 0 for embeddings and prompts,
/// `i + 1` for block `i`, `depth + 1` for the final norm and head.
fn position(id: &str, depth: usize) -> usize {
    let block = id
        .strip_prefix("blocks.")
        .or_else(|| {
            id.strip_prefix("plugin.")
                .and_then(|r| r.split_once('.').map(|(_, r)| r))
        })
        .and_then(|r| r.split('.').next())
        .and_then(|n| n.parse::<usize>().ok());
    match block {
        Some(i) => i + 1,
        None if id.starts_with("norm.") || id.starts_with("head.") => depth + 1,
        None => 0,
    }
}

pub(crate) fn loss_and_gradients(
    model: &Model,
    plugins: &[&PluginState],
    batch: &Batch,
    selector: &Selector,
) -> Result<(f64, ParameterSet)> {
    let att = Attached::resolve(model, plugins)?;
    let mut catalog = model.catalog();
    for p in plugins {
        catalog.extend(p.params.catalog());
    }
    catalog.check_selector(selector)?;

    let (logits, cache) = run(model, &att, batch)?;
    let loss = cross_entropy_loss(logits.view(), &batch.labels)?;
    let dlogits = cross_entropy_grad(logits.view(), &batch.labels)?;

    let cfg = model.config();
    let prm = model.params();
    let mut sink = Sink {
        selector,
        tags: catalog.entries().iter().map(|e| (e.id.clone(), e.tag)).collect(),
        out: ParameterSet::new(),
    };
    let lowest = catalog
        .entries()
        .iter()
        .filter(|e| selector.matches(&e.id, e.tag))
        .map(|e| position(&e.id, cfg.depth))
        .min();
    let Some(lowest) = lowest else {
        return Ok((loss, sink.out));
    };

    let d = cfg.embed_dim;
    let bsz = batch.len();
    let t = cache.tokens;

    sink.linear("head.weight", Some("head.bias"), cache.normed.view(), dlogits.view());
    let dnormed = dlogits.dot(&prm.matrix("head.weight")?.t());
    let (dcls, dg, db) = layer_norm_backward(&cache.ln_f, p_vec(prm, "norm.weight")?, dnormed.view());
    sink.norm("norm", dg, db);

    let mut dh = Array2::zeros((bsz * t, d));
    for b in 0..bsz {
        dh.row_mut(b * t).assign(&dcls.row(b));
    }

    for i in (0..cfg.depth).rev() {
        if lowest > i + 1 {
            break;
        }
        let bc = &cache.blocks[i];
        let id = |n: &str| format!("blocks.{i}.{n}");

        // MLP branch: h2 = h1 + adapter(fc2(gelu(fc1(ln2(h1)))))
        let dm_out = &dh;
        let dm = match (&bc.adapter, att.mlp.filter(|p| p.covers_block(i))) {
            (Some((m, u, gu)), Some(p)) => {
                let w_up = p.matrix(i, "w_up")?;
                let w_down = p.matrix(i, "w_down")?;
                sink.linear(&p.block_param_id(i, "w_up"), None, gu.view(), dm_out.view());
                let du = dm_out.dot(&w_up.t()) * gelu_derivative(u);
                sink.linear(&p.block_param_id(i, "w_down"), None, m.view(), du.view());
                dm_out + &du.dot(&w_down.t())
            }
            _ => dm_out.clone(),
        };
        sink.linear(&id("mlp.fc2.weight"), Some(&id("mlp.fc2.bias")), bc.g.view(), dm.view());
        let dgl = dm.dot(&prm.matrix(&id("mlp.fc2.weight"))?.t()) * gelu_derivative(&bc.f1);
        sink.linear(
            &id("mlp.fc1.weight"),
            Some(&id("mlp.fc1.bias")),
            bc.c.view(),
            dgl.view(),
        );
        let dc = dgl.dot(&prm.matrix(&id("mlp.fc1.weight"))?.t());
        let (dx2, dg2, db2) = layer_norm_backward(&bc.ln2, p_vec(prm, &id("norm2.weight"))?, dc.view());
        sink.norm(&id("norm2"), dg2, db2);
        let dh1 = &dh + &dx2;

        // attention branch: h1 = h + W_o·attn(ln1(h))
        sink.linear(&id("attn.w_o"), Some(&id("attn.b_o")), bc.heads.view(), dh1.view());
        let dheads = dh1.dot(&prm.matrix(&id("attn.w_o"))?.t());

        let prefix_plugin = att.prefix.filter(|p| p.covers_block(i));
        let scale = prefix_plugin.map_or(1.0, |p| p.spec.scale);
        let free = match prefix_plugin {
            Some(p) if p.kind() == PluginKind::VanillaPrefix => Some((p.matrix(i, "keys")?, p.matrix(i, "values")?)),
            _ => None,
        };
        let mut dq = Array2::zeros((bsz * t, d));
        let mut dk = Array2::zeros((bsz * t, d));
        let mut dv = Array2::zeros((bsz * t, d));
        let mut dgen = bc.generated.as_ref().map(|_| Array2::<f64>::zeros((bsz * t, 2 * d)));
        let mut dfree = free.map(|(pk, _)| (Array2::<f64>::zeros(pk.dim()), Array2::<f64>::zeros(pk.dim())));
        for b in 0..bsz {
            let rows = s![b * t..(b + 1) * t, ..];
            let prefix = match (&bc.generated, free) {
                (Some((gen, _)), _) => {
                    let g = gen.slice(rows);
                    Some((g.slice_move(s![.., ..d]), g.slice_move(s![.., d..])))
                }
                (None, Some(kv)) => Some(kv),
                _ => None,
            };
            let kg = mha_kernel_backward(
                bc.q.slice(rows),
                bc.k.slice(rows),
                bc.v.slice(rows),
                prefix,
                scale,
                &bc.probs[b],
                dheads.slice(rows),
            );
            dq.slice_mut(rows).assign(&kg.dq);
            dk.slice_mut(rows).assign(&kg.dk);
            dv.slice_mut(rows).assign(&kg.dv);
            if let Some((dpk, dpv)) = kg.dprefix {
                if let Some(dg) = dgen.as_mut() {
                    dg.slice_mut(s![b * t..(b + 1) * t, ..d]).assign(&dpk);
                    dg.slice_mut(s![b * t..(b + 1) * t, d..]).assign(&dpv);
                } else if let Some((ak, av)) = dfree.as_mut() {
                    *ak += &dpk;
                    *av += &dpv;
                }
            }
        }

        let mut da = dq.dot(&prm.matrix(&id("attn.w_q"))?.t());
        da += &dk.dot(&prm.matrix(&id("attn.w_k"))?.t());
        da += &dv.dot(&prm.matrix(&id("attn.w_v"))?.t());
        for (p, g) in [("q", &dq), ("k", &dk), ("v", &dv)] {
            sink.linear(
                &id(&format!("attn.w_{p}")),
                Some(&id(&format!("attn.b_{p}"))),
                bc.a.view(),
                g.view(),
            );
        }
        if let (Some(p), Some(dgen), Some((_, hid))) = (prefix_plugin, &dgen, &bc.generated) {
            sink.linear(&p.block_param_id(i, "w_up"), None, hid.view(), dgen.view());
            let dpre = dgen.dot(&p.matrix(i, "w_up")?.t()) * hid.mapv(|x| 1.0 - x * x);
            sink.linear(&p.block_param_id(i, "w_down"), None, bc.a.view(), dpre.view());
            da += &dpre.dot(&p.matrix(i, "w_down")?.t());
        }
        if let (Some(p), Some((dk_free, dv_free))) = (prefix_plugin, dfree) {
            for (name, g) in [("keys", dk_free), ("values", dv_free)] {
                let pid = p.block_param_id(i, name);
                if sink.wants(&pid) {
                    sink.put(&pid, g);
                }
            }
        }
        let (dx1, dg1, db1) = layer_norm_backward(&bc.ln1, p_vec(prm, &id("norm1.weight"))?, da.view());
        sink.norm(&id("norm1"), dg1, db1);
        dh = dh1 + dx1;
    }

    if lowest == 0 {
        let np = cfg.num_patches();
        let plen = cache.prompt_len;
        let mut dcls_tok = Array1::zeros(d);
        let mut dpos = Array2::zeros((1 + np, d));
        let mut demb = Array2::zeros((bsz * np, d));
        let mut dprompt = Array2::zeros((plen, d));
        for b in 0..bsz {
            let base = b * t;
            dcls_tok += &dh.row(base);
            let patch_rows = dh.slice(s![base + 1 + plen..base + t, ..]);
            demb.slice_mut(s![b * np..(b + 1) * np, ..]).assign(&patch_rows);
            if plen > 0 {
                dprompt += &dh.slice(s![base + 1..base + 1 + plen, ..]);
            }
        }
        dpos.row_mut(0).assign(&dcls_tok);
        dpos.slice_mut(s![1.., ..]).assign(
            &demb
                .view()
                .into_shape_with_order((bsz, np, d))
                .expect("contiguous")
                .sum_axis(Axis(0)),
        );
        if sink.wants("cls_token") {
            sink.put("cls_token", dcls_tok);
        }
        if sink.wants("pos_embed") {
            sink.put("pos_embed", dpos);
        }
        if let Some(p) = att.prompt.filter(|_| plen > 0) {
            let pid = p.prompt_id();
            if sink.wants(&pid) {
                sink.put(&pid, dprompt);
            }
        }
        sink.linear(
            "patch_embed.weight",
            Some("patch_embed.bias"),
            cache.patches.view(),
            demb.view(),
        );
    }

    Ok((loss, sink.out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn patch_order_is_row_major() {
        let img = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, x)| (y * 4 + x) as f64);
        let p = patchify(&img, 2);
        assert_eq!(p.row(0).to_vec(), vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1).to_vec(), vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3).to_vec(), vec![10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn position_classifies_ids() {
        assert_eq!(position("patch_embed.weight", 2), 0);
        assert_eq!(position("plugin.prompt.tokens", 2), 0);
        assert_eq!(position("blocks.1.attn.w_q", 2), 2);
        assert_eq!(position("plugin.adapter.0.w_up", 2), 1);
        assert_eq!(position("plugin.mlp_adapter.1.w_up", 2), 2);
        assert_eq!(position("norm.bias", 2), 3);
        assert_eq!(position("head.weight", 2), 3);
    }
}
