//! Multi-head attention and its fixed-scale multi-scale variant.
//!
//! The fixed-scale path contextualizes each head's Q, K, V slices with one
//! configured radius per head before scaled dot-product attention; with all
//! radii zero it reduces to textbook MHA.

use rand::Rng;

use crate::error::{Error, Result};
use crate::experts::{apply_expert, PoolVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if d_model % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {d_model} not divisible by {heads} heads"
            )));
        }
        let bound = (6.0 / (2 * d_model) as f64).sqrt();
        Ok(AttentionParams {
            wq: Tensor::rand_uniform(&[d_model, d_model], bound, rng),
            wk: Tensor::rand_uniform(&[d_model, d_model], bound, rng),
            wv: Tensor::rand_uniform(&[d_model, d_model], bound, rng),
            wo: Tensor::rand_uniform(&[d_model, d_model], bound, rng),
            heads,
        })
    }

    pub fn d_k(&self) -> usize {
        self.wq.cols() / self.heads
    }
}

/// Tape-bound attention weights.
#[derive(Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
    pub d_model: usize,
}

impl AttnVars {
    pub fn bind(p: &AttentionParams, tape: &Tape) -> Self {
        AttnVars {
            wq: tape.leaf(p.wq.clone()),
            wk: tape.leaf(p.wk.clone()),
            wv: tape.leaf(p.wv.clone()),
            wo: tape.leaf(p.wo.clone()),
            heads: p.heads,
            d_model: p.wq.cols(),
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Per-head radius list for the fixed-scale path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleAssignment(pub Vec<usize>);

impl ScaleAssignment {
    /// Maps MSC-style kernel sizes (0 meaning identity, else odd k) to radii
    /// via k = 2δ−1.
    pub fn from_kernel_sizes(ks: &[usize]) -> Result<Self> {
        let mut radii = Vec::with_capacity(ks.len());
        for &k in ks {
            if k == 0 {
                radii.push(0);
            } else if k % 2 == 1 {
                radii.push((k + 1) / 2);
            } else {
                return Err(Error::InvalidArgument(format!("even kernel size {k}")));
            }
        }
        Ok(ScaleAssignment(radii))
    }
}

/// Additive attention-score mask: 0 where attending is allowed, −∞ where it
/// is not. `None` means fully open.
pub fn build_mask(
    lq: usize,
    lk: usize,
    causal: bool,
    key_pad: Option<&[bool]>,
) -> Option<Tensor> {
    if !causal && key_pad.map_or(true, |p| p.iter().all(|&x| !x)) {
        return None;
    }
    let mut m = Tensor::zeros(&[lq, lk]);
    for q in 0..lq {
        for k in 0..lk {
            let mut blocked = false;
            if causal && k > q {
                blocked = true;
            }
            if let Some(pad) = key_pad {
                if pad[k] {
                    blocked = true;
                }
            }
            if blocked {
                m.set2(q, k, f64::NEG_INFINITY);
            }
        }
    }
    Some(m)
}

/// Zeroes padded rows so they cannot leak through convolution windows.
pub fn zero_pad_rows(tape: &Tape, x: Var, pad: Option<&[bool]>) -> Var {
    let Some(pad) = pad else { return x };
    if pad.iter().all(|&p| !p) {
        return x;
    }
    let shape = tape.shape_of(x);
    let (l, c) = (shape[0], shape[1]);
    assert_eq!(pad.len(), l);
    let mut mask = Tensor::filled(&[l, c], 1.0);
    for (j, &p) in pad.iter().enumerate() {
        if p {
            for i in 0..c {
                mask.set2(j, i, 0.0);
            }
        }
    }
    tape.mul_const(x, mask)
}

/// Projects X through W^Q, W^K, W^V and splits each into h contiguous
/// d_k-wide head slices.
pub fn project_split(tape: &Tape, x: Var, p: &AttnVars) -> Result<Vec<(Var, Var, Var)>> {
    if p.d_model % p.heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "d_model {} not divisible by {} heads",
            p.d_model, p.heads
        )));
    }
    let d_k = p.d_k();
    let q = tape.matmul(x, p.wq);
    let k = tape.matmul(x, p.wk);
    let v = tape.matmul(x, p.wv);
    Ok((0..p.heads)
        .map(|i| {
            (
                tape.slice_cols(q, i * d_k, d_k),
                tape.slice_cols(k, i * d_k, d_k),
                tape.slice_cols(v, i * d_k, d_k),
            )
        })
        .collect())
}

/// softmax(QKᵀ/√d_k + mask)·V for one head.
pub fn scaled_dot_attention(
    tape: &Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor>,
) -> Var {
    let d_k = tape.shape_of(q)[1];
    let scores = tape.matmul_nt(q, k);
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let masked = match mask {
        Some(m) => tape.add_const(scaled, m.clone()),
        None => scaled,
    };
    let weights = tape.softmax_rows(masked);
    tape.matmul(weights, v)
}

/// Textbook multi-head attention.
pub fn mha_forward(tape: &Tape, x: Var, p: &AttnVars, mask: Option<&Tensor>) -> Result<Var> {
    let heads = project_split(tape, x, p)?;
    let outs: Vec<Var> = heads
        .into_iter()
        .map(|(q, k, v)| scaled_dot_attention(tape, q, k, v, mask))
        .collect();
    let cat = tape.concat_cols(&outs);
    Ok(tape.matmul(cat, p.wo))
}

/// Cross attention: queries projected from `x`, keys and values from
/// `memory`. Reduces to [`mha_forward`] when `x == memory`.
pub fn mha_cross_forward(
    tape: &Tape,
    x: Var,
    memory: Var,
    p: &AttnVars,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let d_k = p.d_k();
    let q_full = tape.matmul(x, p.wq);
    let k_full = tape.matmul(memory, p.wk);
    let v_full = tape.matmul(memory, p.wv);
    let mut outs = Vec::with_capacity(p.heads);
    for i in 0..p.heads {
        let q = tape.slice_cols(q_full, i * d_k, d_k);
        let k = tape.slice_cols(k_full, i * d_k, d_k);
        let v = tape.slice_cols(v_full, i * d_k, d_k);
        outs.push(scaled_dot_attention(tape, q, k, v, mask));
    }
    let cat = tape.concat_cols(&outs);
    Ok(tape.matmul(cat, p.wo))
}

/// Fixed-scale multi-scale attention: head i applies g(·, δ_i) to its Q, K,
/// and V slices before scaled dot-product attention.
pub fn msha_forward(
    tape: &Tape,
    x: Var,
    p: &AttnVars,
    pool: &PoolVars,
    assignment: &ScaleAssignment,
    mask: Option<&Tensor>,
    pad: Option<&[bool]>,
) -> Result<Var> {
    if assignment.0.len() != p.heads {
        return Err(Error::InvalidConfig(format!(
            "{} radii for {} heads",
            assignment.0.len(),
            p.heads
        )));
    }
    let heads = project_split(tape, x, p)?;
    let mut outs = Vec::with_capacity(p.heads);
    for ((q, k, v), &delta) in heads.into_iter().zip(&assignment.0) {
        let gq = apply_expert(tape, pool, delta, zero_pad_rows(tape, q, pad))?;
        let gk = apply_expert(tape, pool, delta, zero_pad_rows(tape, k, pad))?;
        let gv = apply_expert(tape, pool, delta, zero_pad_rows(tape, v, pad))?;
        outs.push(scaled_dot_attention(tape, gq, gk, gv, mask));
    }
    let cat = tape.concat_cols(&outs);
    Ok(tape.matmul(cat, p.wo))
}
