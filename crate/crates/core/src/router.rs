//! Adaptive expert selection and mixing.
//!
//! A router maps each token's head slice (optionally concatenated with the
//! language-ID embedding) to selection probabilities over the expert pool.
//! The top-k probabilities are renormalized with a second softmax and the
//! selected experts' outputs are mixed with those weights. Top-k selection
//! itself is treated as a constant during backward; gradients flow through
//! the gate weights and the selected experts only.

use rand::Rng;

use crate::error::{Error, Result};
use crate::experts::{apply_expert, PoolVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which projected stream a routing event belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Q,
    K,
    V,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Q, Stream::K, Stream::V];

    pub fn label(&self) -> &'static str {
        match self {
            Stream::Q => "Q",
            Stream::K => "K",
            Stream::V => "V",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RouterParams {
    /// (d_k + d_lid) × (Δ+1); d_lid = 0 without lid conditioning.
    pub w: Tensor,
    pub top_k: usize,
    pub lid: bool,
    /// Renormalize the top-k raw logits instead of the top-k probabilities.
    /// Off by default: the default follows the gating equations literally
    /// (softmax over the masked probability vector).
    pub mask_logits: bool,
}

impl RouterParams {
    pub fn new<R: Rng>(
        d_k: usize,
        d_lid: usize,
        n_experts: usize,
        top_k: usize,
        mask_logits: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if top_k == 0 || top_k > n_experts {
            return Err(Error::InvalidConfig(format!(
                "top_k {top_k} out of range for {n_experts} experts"
            )));
        }
        let d_in = d_k + d_lid;
        let bound = (6.0 / (d_in + n_experts) as f64).sqrt();
        Ok(RouterParams {
            w: Tensor::rand_uniform(&[d_in, n_experts], bound, rng),
            top_k,
            lid: d_lid > 0,
            mask_logits,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.w.cols()
    }
}

#[derive(Clone, Copy)]
pub struct RouterVars {
    pub w: Var,
    pub top_k: usize,
    pub lid: bool,
    pub mask_logits: bool,
}

impl RouterVars {
    pub fn bind(p: &RouterParams, tape: &Tape) -> Self {
        RouterVars {
            w: tape.leaf(p.w.clone()),
            top_k: p.top_k,
            lid: p.lid,
            mask_logits: p.mask_logits,
        }
    }
}

/// Per-token routing outcome: which experts were chosen and with what
/// mixture weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// Probability gap between the last selected and the best unselected
    /// expert (infinite when every expert is selected). Small margins mean
    /// the discrete selection is fragile under perturbation.
    pub margin: f64,
}

/// Top-k gating over a probability (or logit) vector: entries outside the
/// top k are masked to −∞ and the rest renormalized by softmax. Ties break
/// toward the lower expert index.
pub fn topk_gate(p: &[f64], k: usize) -> Result<GateDecision> {
    if k == 0 || k > p.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k {k} out of range for {} experts",
            p.len()
        )));
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let indices: Vec<usize> = order[..k].to_vec();
    let margin = if k < p.len() {
        p[order[k - 1]] - p[order[k]]
    } else {
        f64::INFINITY
    };
    let selected: Vec<f64> = indices.iter().map(|&i| p[i]).collect();
    let m = selected.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = selected.iter().map(|&v| (v - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    Ok(GateDecision {
        indices,
        weights: exps.iter().map(|e| e / denom).collect(),
        margin,
    })
}

/// Router probabilities P(x) = softmax([x | lid]·W^R) for every row of a
/// head slice. Returns (logits, probabilities).
pub fn router_probs(
    tape: &Tape,
    x: Var,
    lid: Option<Var>,
    router: &RouterVars,
) -> Result<(Var, Var)> {
    let input = if router.lid {
        let lid = lid.ok_or_else(|| {
            Error::InvalidConfig("router expects a language-ID context but none was given".into())
        })?;
        let l = tape.shape_of(x)[0];
        let lid_rows = tape.broadcast_row(lid, l);
        tape.concat_cols(&[x, lid_rows])
    } else {
        x
    };
    let d_in = tape.shape_of(input)[1];
    let w_rows = tape.shape_of(router.w)[0];
    if d_in != w_rows {
        return Err(Error::ShapeMismatch(format!(
            "router input width {d_in} vs weight rows {w_rows}"
        )));
    }
    let logits = tape.matmul(input, router.w);
    let probs = tape.softmax_rows(logits);
    Ok((logits, probs))
}

/// Adaptive contextualization of one head slice: per token, the router picks
/// top-k experts and the outputs are mixed per the gate weights. Expert
/// outputs come from full-sequence applications, gathered per position.
///
/// `x` must already have padded rows zeroed. `sink` receives every token's
/// decision (callers filter pad positions). When `aux` is given, a
/// load-balance penalty term n·Σ_e f_e·P̄_e is appended to it, where f_e is
/// the fraction of selection events landing on expert e and P̄_e the mean
/// router probability.
pub fn ada_contextualize(
    tape: &Tape,
    x: Var,
    pool: &PoolVars,
    router: &RouterVars,
    lid: Option<Var>,
    mut sink: Option<&mut dyn FnMut(usize, &GateDecision)>,
    aux: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let n = pool.n_experts();
    let (logits, probs) = router_probs(tape, x, lid, router)?;
    let n_router = tape.shape_of(probs)[1];
    if n_router != n {
        return Err(Error::ShapeMismatch(format!(
            "router width {n_router} vs pool size {n}"
        )));
    }
    let k = router.top_k.min(n);
    let pvals = tape.value(probs);
    let l = pvals.rows();

    let mut sel: Vec<Vec<usize>> = Vec::with_capacity(l);
    for j in 0..l {
        let decision = topk_gate(pvals.row(j), k)?;
        if let Some(s) = sink.as_deref_mut() {
            s(j, &decision);
        }
        sel.push(decision.indices);
    }

    if let Some(aux) = aux {
        let mut f = vec![0.0f64; n];
        for s in &sel {
            for &e in s {
                f[e] += 1.0;
            }
        }
        let events = (l * k) as f64;
        for v in &mut f {
            *v /= events;
        }
        let fmat = Tensor::from_vec(
            &[l, n],
            (0..l).flat_map(|_| f.iter().copied()).collect(),
        );
        let term = tape.scale(
            tape.sum(tape.mul_const(probs, fmat)),
            n as f64 / l as f64,
        );
        aux.push(term);
    }

    // differentiable gate weights: gather the top-k entries and softmax them
    let source = if router.mask_logits { logits } else { probs };
    let gathered = tape.gather_per_row(source, &sel);
    let weights = tape.softmax_rows(gathered);

    let expert_outs: Vec<Var> = (0..n)
        .map(|delta| apply_expert(tape, pool, delta, x))
        .collect::<Result<_>>()?;
    Ok(tape.mix_rows(weights, &sel, &expert_outs))
}

/// Full adaptive attention layer: every (stream, head) slice is
/// independently contextualized by the shared router(s) and expert pool,
/// then fed to scaled dot-product attention.
///
/// `routers` holds one shared router, or three (per Q/K/V stream) when
/// per-stream routing is configured.
#[allow(clippy::too_many_arguments)]
pub fn ada_msha_forward(
    tape: &Tape,
    x: Var,
    attn: &crate::attention::AttnVars,
    pool: &PoolVars,
    routers: &[RouterVars],
    lid: Option<Var>,
    mask: Option<&Tensor>,
    pad: Option<&[bool]>,
    mut sink: Option<&mut dyn FnMut(Stream, usize, usize, &GateDecision)>,
    mut aux: Option<&mut Vec<Var>>,
) -> Result<Var> {
    use crate::attention::{project_split, scaled_dot_attention, zero_pad_rows};
    if routers.is_empty() || (routers.len() != 1 && routers.len() != 3) {
        return Err(Error::InvalidConfig(format!(
            "expected 1 shared or 3 per-stream routers, got {}",
            routers.len()
        )));
    }
    let heads = project_split(tape, x, attn)?;
    let mut outs = Vec::with_capacity(attn.heads);
    for (head_idx, (q, k, v)) in heads.into_iter().enumerate() {
        let mut contextualized = Vec::with_capacity(3);
        for (stream_idx, (stream, slice)) in
            Stream::ALL.iter().zip([q, k, v]).enumerate()
        {
            let router = if routers.len() == 3 {
                &routers[stream_idx]
            } else {
                &routers[0]
            };
            let masked = zero_pad_rows(tape, slice, pad);
            let mut record = sink.as_deref_mut().map(|s| {
                move |token: usize, d: &GateDecision| s(*stream, head_idx, token, d)
            });
            let ctx = ada_contextualize(
                tape,
                masked,
                pool,
                router,
                lid,
                record
                    .as_mut()
                    .map(|r| r as &mut dyn FnMut(usize, &GateDecision)),
                aux.as_deref_mut(),
            )?;
            contextualized.push(ctx);
        }
        outs.push(scaled_dot_attention(
            tape,
            contextualized[0],
            contextualized[1],
            contextualized[2],
            mask,
        ));
    }
    let cat = tape.concat_cols(&outs);
    Ok(tape.matmul(cat, attn.wo))
}
