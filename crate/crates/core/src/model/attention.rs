//! Multi-head self-attention with prefix rows, and its mixture decomposition.
//!
//! With prefixes `P_k, P_v` of `L` rows and scale `s`, each head attends over
//! the keys `[s·P_k ; Z·W_k]` and values `[s·P_v ; Z·W_v]` (prefix rows are
//! not projected). The same head output can be written as
//!
//! ```text
//! (1 - λ)·softmax(q·Kᵀ)·V  +  λ·softmax(q·(sP_k)ᵀ)·(sP_v)
//! λ = Σ exp(q·(sP_k)ᵀ) / (Σ exp(q·(sP_k)ᵀ) + Σ exp(q·Kᵀ))
//! ```
//!
//! [`attention_forward`] evaluates the joint softmax; [`decomposed_attention`]
//! evaluates the mixture form independently so the two can be cross-checked.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::ops::{linear, softmax_rows};
use crate::error::{Error, Result};
use crate::rng::truncated_normal_vec;

/// Projection weights of one attention layer, stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub num_heads: usize,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_q: Option<Array1<f64>>,
    pub b_k: Option<Array1<f64>>,
    pub b_v: Option<Array1<f64>>,
    pub b_o: Option<Array1<f64>>,
}

impl AttentionState {
    /// Truncated-normal projections with standard deviation `std` and random biases.
    pub fn random<R: Rng + ?Sized>(embed_dim: usize, num_heads: usize, std: f64, rng: &mut R) -> Self {
        let mut mat = || {
            Array2::from_shape_vec(
                (embed_dim, embed_dim),
                truncated_normal_vec(rng, embed_dim * embed_dim, std),
            )
            .expect("square shape")
        };
        let (w_q, w_k, w_v, w_o) = (mat(), mat(), mat(), mat());
        let mut vec = || Some(Array1::from(truncated_normal_vec(rng, embed_dim, std)));
        AttentionState {
            num_heads,
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: vec(),
            b_k: vec(),
            b_v: vec(),
            b_o: vec(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim() / self.num_heads
    }

    fn validate(&self) -> Result<()> {
        let d = self.embed_dim();
        if self.num_heads == 0 || !d.is_multiple_of(self.num_heads) {
            return Err(Error::Input(format!(
                "embed dim {d} not divisible into {} heads",
                self.num_heads
            )));
        }
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.dim() != (d, d) {
                return Err(Error::Input("attention projections must be square".into()));
            }
        }
        for b in [&self.b_q, &self.b_k, &self.b_v, &self.b_o].into_iter().flatten() {
            if b.len() != d {
                return Err(Error::Input("attention bias length mismatch".into()));
            }
        }
        Ok(())
    }

    fn project(&self, z: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        (
            linear(z, self.w_q.view(), self.b_q.as_ref().map(|b| b.view())),
            linear(z, self.w_k.view(), self.b_k.as_ref().map(|b| b.view())),
            linear(z, self.w_v.view(), self.b_v.as_ref().map(|b| b.view())),
        )
    }

    fn output(&self, heads: ArrayView2<f64>) -> Array2<f64> {
        linear(heads, self.w_o.view(), self.b_o.as_ref().map(|b| b.view()))
    }
}

/// Unscaled prefix rows `[prefix_len, embed_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prefixes {
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
}

impl Prefixes {
    pub fn new(keys: Array2<f64>, values: Array2<f64>) -> Result<Self> {
        if keys.dim() != values.dim() {
            return Err(Error::Input(format!(
                "prefix keys {:?} and values {:?} differ in shape",
                keys.dim(),
                values.dim()
            )));
        }
        Ok(Prefixes { keys, values })
    }

    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_inputs(attn: &AttentionState, z: ArrayView2<f64>, prefixes: Option<&Prefixes>, scale: f64) -> Result<()> {
    attn.validate()?;
    let d = attn.embed_dim();
    if z.ncols() != d {
        return Err(Error::Input(format!(
            "tokens have {} features, attention expects {d}",
            z.ncols()
        )));
    }
    if let Some(p) = prefixes {
        if p.keys.ncols() != d || p.values.ncols() != d || p.keys.nrows() != p.values.nrows() {
            return Err(Error::Input(format!(
                "prefix shape {:?}/{:?} incompatible with embed dim {d}",
                p.keys.dim(),
                p.values.dim()
            )));
        }
    }
    if !scale.is_finite() {
        return Err(Error::Input("prefix scale must be finite".into()));
    }
    Ok(())
}

/// Multi-head attention over one sequence.
///
/// `z` is `[seq_len, embed_dim]`; the output has the same shape.
pub fn attention_forward(
    attn: &AttentionState,
    z: ArrayView2<f64>,
    prefixes: Option<&Prefixes>,
    scale: f64,
) -> Result<Array2<f64>> {
    check_inputs(attn, z, prefixes, scale)?;
    let (q, k, v) = attn.project(z);
    let prefix = prefixes.map(|p| (p.keys.view(), p.values.view()));
    let (heads, _) = mha_kernel(q.view(), k.view(), v.view(), prefix, scale, attn.num_heads);
    Ok(attn.output(heads.view()))
}

/// The mixture form of prefix attention.
///
/// All per-head quantities are laid out like concatenated head outputs
/// (`[seq_len, embed_dim]`, head `h` in columns `h·d_h .. (h+1)·d_h`).
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedAttentionOutput {
    /// Projected output; equals [`attention_forward`].
    pub output: Array2<f64>,
    /// Head outputs before the output projection:
    /// `(1 - λ)·aggregated_part + λ·personalized_part` elementwise.
    pub mixture: Array2<f64>,
    /// `[num_heads, seq_len]`, the softmax mass on prefix positions.
    pub lambda_per_token: Array2<f64>,
    /// `softmax(q·Kᵀ)·V` per head.
    pub aggregated_part: Array2<f64>,
    /// `softmax(q·(sP_k)ᵀ)·(sP_v)` per head; zero when there are no prefixes.
    pub personalized_part: Array2<f64>,
}

impl DecomposedAttentionOutput {
    /// λ broadcast to the `[seq_len, embed_dim]` head layout.
    pub fn lambda_columns(&self) -> Array2<f64> {
        let (heads, seq) = self.lambda_per_token.dim();
        let d = self.mixture.ncols();
        let dh = d / heads;
        Array2::from_shape_fn((seq, d), |(t, c)| self.lambda_per_token[[c / dh, t]])
    }
}

pub fn decomposed_attention(
    attn: &AttentionState,
    z: ArrayView2<f64>,
    prefixes: Option<&Prefixes>,
    scale: f64,
) -> Result<DecomposedAttentionOutput> {
    check_inputs(attn, z, prefixes, scale)?;
    let (q, k, v) = attn.project(z);
    let seq = z.nrows();
    let d = attn.embed_dim();
    let heads = attn.num_heads;
    let dh = attn.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let prefix_len = prefixes.map_or(0, Prefixes::len);

    let mut aggregated = Array2::zeros((seq, d));
    let mut personalized = Array2::zeros((seq, d));
    let mut mixture = Array2::zeros((seq, d));
    let mut lambda = Array2::zeros((heads, seq));

    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let self_logits = qh.dot(&k.slice(cols).t()) * inv_sqrt;
        let mut self_probs = self_logits.clone();
        softmax_rows(&mut self_probs);
        let agg = self_probs.dot(&v.slice(cols));

        let (pers, lam) = match prefixes.filter(|p| !p.is_empty()) {
            None => (Array2::zeros((seq, dh)), Array1::zeros(seq)),
            Some(p) => {
                let pk = p.keys.slice(cols).mapv(|x| x * scale);
                let pv = p.values.slice(cols).mapv(|x| x * scale);
                let prefix_logits = qh.dot(&pk.t()) * inv_sqrt;
                let mut prefix_probs = prefix_logits.clone();
                softmax_rows(&mut prefix_probs);
                let pers = prefix_probs.dot(&pv);
                // λ = Σexp(prefix) / (Σexp(prefix) + Σexp(self)), shifted by the joint max.
                let lam = Array1::from_iter(
                    prefix_logits
                        .axis_iter(Axis(0))
                        .zip(self_logits.axis_iter(Axis(0)))
                        .map(|(pl, sl)| {
                            let m = pl.iter().chain(sl.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sp: f64 = pl.iter().map(|x| (x - m).exp()).sum();
                            let ss: f64 = sl.iter().map(|x| (x - m).exp()).sum();
                            sp / (sp + ss)
                        }),
                );
                (pers, lam)
            }
        };

        for t in 0..seq {
            let l = lam[t];
            for c in 0..dh {
                mixture[[t, h * dh + c]] = (1.0 - l) * agg[[t, c]] + l * pers[[t, c]];
            }
        }
        aggregated.slice_mut(cols).assign(&agg);
        personalized.slice_mut(cols).assign(&pers);
        lambda.row_mut(h).assign(&lam);
    }
    debug_assert!(prefix_len > 0 || lambda.iter().all(|&l| l == 0.0));

    Ok(DecomposedAttentionOutput {
        output: attn.output(mixture.view()),
        mixture,
        lambda_per_token: lambda,
        aggregated_part: aggregated,
        personalized_part: personalized,
    })
}

/// Keys or values for head columns `cols`: scaled prefix rows stacked on top
/// of the projected sequence rows.
fn stacked(prefix: Option<ArrayView2<f64>>, seq: ArrayView2<f64>, scale: f64) -> Array2<f64> {
    match prefix {
        Some(p) if p.nrows() > 0 => {
            let p = p.mapv(|x| x * scale);
            concatenate![Axis(0), p, seq]
        }
        _ => seq.to_owned(),
    }
}

/// Per-sequence multi-head attention core shared by the standalone operator
/// and the batched model. Returns concatenated head outputs
/// `[seq_len, embed_dim]` and the per-head probability matrices
/// `[seq_len, prefix_len + seq_len]`.
pub(crate) fn mha_kernel(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    prefix: Option<(ArrayView2<f64>, ArrayView2<f64>)>,
    scale: f64,
    heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (seq, d) = q.dim();
    let dh = d / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((seq, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let keys = stacked(prefix.map(|(pk, _)| pk.slice_move(cols)), k.slice(cols), scale);
        let vals = stacked(prefix.map(|(_, pv)| pv.slice_move(cols)), v.slice(cols), scale);
        let mut p = q.slice(cols).dot(&keys.t()) * inv_sqrt;
        softmax_rows(&mut p);
        out.slice_mut(cols).assign(&p.dot(&vals));
        probs.push(p);
    }
    (out, probs)
}

pub(crate) struct KernelGrads {
    pub dq: Array2<f64>,
    pub dk: Array2<f64>,
    pub dv: Array2<f64>,
    /// Gradients w.r.t. the unscaled prefix rows (`[prefix_len, embed_dim]`).
    pub dprefix: Option<(Array2<f64>, Array2<f64>)>,
}

pub(crate) fn mha_kernel_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    prefix: Option<(ArrayView2<f64>, ArrayView2<f64>)>,
    scale: f64,
    probs: &[Array2<f64>],
    d_out: ArrayView2<f64>,
) -> KernelGrads {
    let heads = probs.len();
    let (seq, d) = q.dim();
    let dh = d / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let plen = prefix.map_or(0, |(pk, _)| pk.nrows());
    let mut dq = Array2::zeros((seq, d));
    let mut dk = Array2::zeros((seq, d));
    let mut dv = Array2::zeros((seq, d));
    let mut dpk = Array2::zeros((plen, d));
    let mut dpv = Array2::zeros((plen, d));
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let keys = stacked(prefix.map(|(pk, _)| pk.slice_move(cols)), k.slice(cols), scale);
        let vals = stacked(prefix.map(|(_, pv)| pv.slice_move(cols)), v.slice(cols), scale);
        let dout = d_out.slice(cols);
        let dprobs = dout.dot(&vals.t());
        let dvals = p.t().dot(&dout);
        let mut dlogits = p * &dprobs;
        for (mut row, prow) in dlogits.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
            let dot = row.sum();
            row.scaled_add(-dot, &prow);
        }
        dlogits *= inv_sqrt;
        dq.slice_mut(cols).assign(&dlogits.dot(&keys));
        let dkeys = dlogits.t().dot(&q.slice(cols));
        dk.slice_mut(cols).assign(&dkeys.slice(s![plen.., ..]));
        dv.slice_mut(cols).assign(&dvals.slice(s![plen.., ..]));
        if plen > 0 {
            dpk.slice_mut(cols)
                .assign(&(dkeys.slice(s![..plen, ..]).to_owned() * scale));
            dpv.slice_mut(cols)
                .assign(&(dvals.slice(s![..plen, ..]).to_owned() * scale));
        }
    }
    KernelGrads {
        dq,
        dk,
        dv,
        dprefix: prefix.map(|_| (dpk, dpv)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_attention(d: usize) -> AttentionState {
        let eye = Array2::eye(d);
        AttentionState {
            num_heads: 1,
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_o: eye,
            b_q: None,
            b_k: None,
            b_v: None,
            b_o: None,
        }
    }

    #[test]
    fn two_position_softmax_by_hand() {
        // one token z = (1, 0), one prefix row p_k = (2, 0), p_v = (0, 3), s = 1, d_h = 2
        let attn = identity_attention(2);
        let z = array![[1.0, 0.0]];
        let p = Prefixes::new(array![[2.0, 0.0]], array![[0.0, 3.0]]).unwrap();
        let out = attention_forward(&attn, z.view(), Some(&p), 1.0).unwrap();
        // logits: prefix 2/sqrt2, self 1/sqrt2
        let lp = 2.0 / 2f64.sqrt();
        let ls = 1.0 / 2f64.sqrt();
        let wp = lp.exp() / (lp.exp() + ls.exp());
        let expected = [(1.0 - wp) * 1.0, wp * 3.0];
        assert!((out[[0, 0]] - expected[0]).abs() < 1e-14);
        assert!((out[[0, 1]] - expected[1]).abs() < 1e-14);
    }

    #[test]
    fn empty_prefix_is_vanilla_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let attn = AttentionState::random(8, 2, 0.5, &mut rng);
        let z = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 8 + j) as f64).sin());
        let empty = Prefixes::new(Array2::zeros((0, 8)), Array2::zeros((0, 8))).unwrap();
        let plain = attention_forward(&attn, z.view(), None, 1.5).unwrap();
        assert_eq!(plain, attention_forward(&attn, z.view(), Some(&empty), 1.5).unwrap());
        let dec = decomposed_attention(&attn, z.view(), Some(&empty), 1.5).unwrap();
        assert_eq!(dec.output, plain);
        assert!(dec.lambda_per_token.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn saturated_prefix_drives_lambda_to_one() {
        let attn = identity_attention(2);
        let z = array![[1.0, 0.0], [0.5, 0.1]];
        let p = Prefixes::new(array![[1e3, 0.0]], array![[0.0, 7.0]]).unwrap();
        let dec = decomposed_attention(&attn, z.view(), Some(&p), 1.0).unwrap();
        assert!(dec.lambda_per_token.iter().all(|&l| l > 1.0 - 1e-12));
        for (a, b) in dec.mixture.iter().zip(dec.personalized_part.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_errors() {
        let attn = identity_attention(2);
        let z = array![[1.0, 0.0]];
        let bad = Prefixes::new(array![[1.0, 0.0, 0.0]], array![[1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            attention_forward(&attn, z.view(), Some(&bad), 1.0),
            Err(Error::Input(_))
        ));
        assert!(Prefixes::new(array![[1.0, 0.0]], array![[1.0, 0.0], [0.0, 1.0]]).is_err());
        let z3 = array![[1.0, 0.0, 2.0]];
        assert!(decomposed_attention(&attn, z3.view(), None, 1.0).is_err());
    }
}
