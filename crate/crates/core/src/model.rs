//! Encoder-decoder byte transformer with one adaptive multi-scale attention
//! layer in the encoder.
//!
//! Pre-norm residual blocks throughout, sinusoidal positions, shared
//! input/output embeddings by default. Parameters live in a flat named list
//! so the optimizer and checkpoint code never need to know the layout.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::RoutingStats;
use crate::attention::{
    build_mask, mha_cross_forward, mha_forward, msha_forward, AttentionParams, AttnVars,
    ScaleAssignment,
};
use crate::error::{Error, Result};
use crate::experts::{pool_param_count, ExpertPool, PoolVars};
use crate::router::{ada_msha_forward, GateDecision, RouterParams, RouterVars, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{Vocab, EOS_ID, PAD_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Largest contextualization radius; 0 disables the adaptive layer and
    /// leaves a plain transformer.
    pub delta_max: usize,
    pub top_k: usize,
    /// Encoder layer index that gets the adaptive attention block.
    pub ada_layer: usize,
    /// Condition the router on the source language embedding.
    pub lid: bool,
    /// Three stream-specific routers instead of one shared router.
    pub per_stream_router: bool,
    /// Renormalize top-k logits instead of top-k probabilities.
    pub mask_logits: bool,
    pub expert_bias: bool,
    pub expert_activation: bool,
    pub share_embeddings: bool,
    pub dropout: f64,
    /// Coefficient for the optional router load-balance penalty; 0 = off.
    pub balance_coeff: f64,
    pub seed: u64,
    /// Fixed per-head radii; replaces the router with static multi-scale
    /// attention at the adaptive layer.
    pub fixed_scales: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            heads: 4,
            ffn: 256,
            delta_max: 5,
            top_k: 2,
            ada_layer: 0,
            lid: true,
            per_stream_router: false,
            mask_logits: false,
            expert_bias: true,
            expert_activation: false,
            share_embeddings: true,
            dropout: 0.1,
            balance_coeff: 0.0,
            seed: 1,
            fixed_scales: None,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    /// True when the routed adaptive layer is present.
    pub fn moce_active(&self) -> bool {
        self.delta_max > 0 && self.fixed_scales.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::InvalidConfig("need at least one layer per side".into()));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.ffn == 0 {
            return Err(Error::InvalidConfig("ffn width must be positive".into()));
        }
        if self.delta_max > 0 && self.ada_layer >= self.enc_layers {
            return Err(Error::InvalidConfig(format!(
                "adaptive layer index {} out of range for {} encoder layers",
                self.ada_layer, self.enc_layers
            )));
        }
        if self.moce_active() && (self.top_k == 0 || self.top_k > self.delta_max + 1) {
            return Err(Error::InvalidConfig(format!(
                "top_k {} out of range for {} experts",
                self.top_k,
                self.delta_max + 1
            )));
        }
        if let Some(scales) = &self.fixed_scales {
            if scales.len() != self.heads {
                return Err(Error::InvalidConfig(format!(
                    "{} fixed scales for {} heads",
                    scales.len(),
                    self.heads
                )));
            }
            if scales.iter().any(|&s| s > self.delta_max) {
                return Err(Error::InvalidConfig(
                    "fixed scale exceeds delta_max".into(),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// How the router's language-ID context is chosen at inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LidMode {
    /// Use the leading language token of each source sequence.
    FromSource,
    /// Force a specific language token id.
    Override(usize),
    /// Feed an all-zero embedding row.
    Zero,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Builds a model with fresh parameters from `config.seed`. Construction is
/// deterministic: equal config and vocabulary give identical parameters.
pub fn build_model(config: &ModelConfig, vocab: &Vocab) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (d, h, f, v) = (config.d_model, config.heads, config.ffn, vocab.size());
    let mut names: Vec<String> = Vec::new();
    let mut params: Vec<Tensor> = Vec::new();
    let push = |names: &mut Vec<String>, params: &mut Vec<Tensor>, n: String, t: Tensor| {
        names.push(n);
        params.push(t);
    };

    let emb_bound = 1.0 / (d as f64).sqrt();
    push(
        &mut names,
        &mut params,
        "emb".into(),
        Tensor::rand_uniform(&[v, d], emb_bound, &mut rng),
    );

    let push_ln = |names: &mut Vec<String>, params: &mut Vec<Tensor>, prefix: String| {
        names.push(format!("{prefix}.g"));
        params.push(Tensor::filled(&[d], 1.0));
        names.push(format!("{prefix}.b"));
        params.push(Tensor::zeros(&[d]));
    };
    let push_attn =
        |names: &mut Vec<String>, params: &mut Vec<Tensor>, prefix: String, rng: &mut ChaCha8Rng| {
            let a = AttentionParams::new(d, h, rng).expect("validated dims");
            for (suffix, t) in [("wq", a.wq), ("wk", a.wk), ("wv", a.wv), ("wo", a.wo)] {
                names.push(format!("{prefix}.{suffix}"));
                params.push(t);
            }
        };
    let push_ffn =
        |names: &mut Vec<String>, params: &mut Vec<Tensor>, prefix: String, rng: &mut ChaCha8Rng| {
            let b1 = (6.0 / (d + f) as f64).sqrt();
            names.push(format!("{prefix}.w1"));
            params.push(Tensor::rand_uniform(&[d, f], b1, rng));
            names.push(format!("{prefix}.b1"));
            params.push(Tensor::zeros(&[f]));
            names.push(format!("{prefix}.w2"));
            params.push(Tensor::rand_uniform(&[f, d], b1, rng));
            names.push(format!("{prefix}.b2"));
            params.push(Tensor::zeros(&[d]));
        };

    for i in 0..config.enc_layers {
        push_ln(&mut names, &mut params, format!("enc{i}.ln1"));
        push_attn(&mut names, &mut params, format!("enc{i}.attn"), &mut rng);
        if i == config.ada_layer && config.delta_max > 0 {
            let pool = ExpertPool::new(
                config.delta_max,
                config.d_k(),
                config.expert_bias,
                config.expert_activation,
                &mut rng,
            );
            for e in pool.experts.into_iter().skip(1) {
                push(
                    &mut names,
                    &mut params,
                    format!("moce.expert{}.kernel", e.radius),
                    e.kernel.expect("conv expert"),
                );
                if let Some(b) = e.bias {
                    push(
                        &mut names,
                        &mut params,
                        format!("moce.expert{}.bias", e.radius),
                        b,
                    );
                }
            }
            if config.moce_active() {
                let d_lid = if config.lid { d } else { 0 };
                let router_names: Vec<String> = if config.per_stream_router {
                    Stream::ALL
                        .iter()
                        .map(|s| format!("moce.router.{}.w", s.label().to_lowercase()))
                        .collect()
                } else {
                    vec!["moce.router.w".into()]
                };
                for name in router_names {
                    let r = RouterParams::new(
                        config.d_k(),
                        d_lid,
                        config.delta_max + 1,
                        config.top_k,
                        config.mask_logits,
                        &mut rng,
                    )?;
                    push(&mut names, &mut params, name, r.w);
                }
            }
        }
        push_ln(&mut names, &mut params, format!("enc{i}.ln2"));
        push_ffn(&mut names, &mut params, format!("enc{i}.ffn"), &mut rng);
    }
    push_ln(&mut names, &mut params, "enc.ln".into());

    for i in 0..config.dec_layers {
        push_ln(&mut names, &mut params, format!("dec{i}.ln1"));
        push_attn(&mut names, &mut params, format!("dec{i}.self"), &mut rng);
        push_ln(&mut names, &mut params, format!("dec{i}.ln2"));
        push_attn(&mut names, &mut params, format!("dec{i}.cross"), &mut rng);
        push_ln(&mut names, &mut params, format!("dec{i}.ln3"));
        push_ffn(&mut names, &mut params, format!("dec{i}.ffn"), &mut rng);
    }
    push_ln(&mut names, &mut params, "dec.ln".into());

    if !config.share_embeddings {
        push(
            &mut names,
            &mut params,
            "out_proj".into(),
            Tensor::rand_uniform(&[v, d], emb_bound, &mut rng),
        );
    }

    let index = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    Ok(Model {
        config: config.clone(),
        vocab: vocab.clone(),
        names,
        params,
        index,
    })
}

/// Sinusoidal position table [l × d].
fn sinusoid(l: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[l, d]);
    for pos in 0..l {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe.set2(pos, 2 * i, angle.sin());
            pe.set2(pos, 2 * i + 1, angle.cos());
        }
    }
    pe
}

/// Dropout context: active only during training forwards.
struct DropCtx<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl DropCtx<'_> {
    fn apply(&mut self, tape: &Tape, v: Var) -> Var {
        match &mut self.rng {
            Some(rng) if self.rate > 0.0 => tape.dropout(v, self.rate, *rng),
            _ => v,
        }
    }
}

/// Tape-bound view of the whole parameter list.
struct Bound<'t, 'm> {
    tape: &'t Tape,
    vars: Vec<Var>,
    model: &'m Model,
}

type RoutingSink<'s> = Option<&'s mut dyn FnMut(Stream, usize, usize, &GateDecision)>;

impl<'t, 'm> Bound<'t, 'm> {
    fn new(model: &'m Model, tape: &'t Tape) -> Self {
        let vars = model.params.iter().map(|p| tape.leaf(p.clone())).collect();
        Bound { tape, vars, model }
    }

    fn v(&self, name: &str) -> Var {
        self.vars[*self
            .model
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    fn attn(&self, prefix: &str) -> AttnVars {
        AttnVars {
            wq: self.v(&format!("{prefix}.wq")),
            wk: self.v(&format!("{prefix}.wk")),
            wv: self.v(&format!("{prefix}.wv")),
            wo: self.v(&format!("{prefix}.wo")),
            heads: self.model.config.heads,
            d_model: self.model.config.d_model,
        }
    }

    fn pool(&self) -> PoolVars {
        let cfg = &self.model.config;
        PoolVars {
            kernels: (1..=cfg.delta_max)
                .map(|d| {
                    (
                        self.v(&format!("moce.expert{d}.kernel")),
                        cfg.expert_bias
                            .then(|| self.v(&format!("moce.expert{d}.bias"))),
                    )
                })
                .collect(),
            d_k: cfg.d_k(),
            use_activation: cfg.expert_activation,
        }
    }

    fn routers(&self) -> Vec<RouterVars> {
        let cfg = &self.model.config;
        let names: Vec<String> = if cfg.per_stream_router {
            Stream::ALL
                .iter()
                .map(|s| format!("moce.router.{}.w", s.label().to_lowercase()))
                .collect()
        } else {
            vec!["moce.router.w".into()]
        };
        names
            .iter()
            .map(|n| RouterVars {
                w: self.v(n),
                top_k: cfg.top_k,
                lid: cfg.lid,
                mask_logits: cfg.mask_logits,
            })
            .collect()
    }

    fn layer_norm(&self, x: Var, prefix: &str) -> Var {
        self.tape
            .layer_norm(x, self.v(&format!("{prefix}.g")), self.v(&format!("{prefix}.b")))
    }

    fn ffn(&self, x: Var, prefix: &str) -> Var {
        let t = self.tape;
        let h = t.relu(t.add_row(
            t.matmul(x, self.v(&format!("{prefix}.w1"))),
            self.v(&format!("{prefix}.b1")),
        ));
        t.add_row(
            t.matmul(h, self.v(&format!("{prefix}.w2"))),
            self.v(&format!("{prefix}.b2")),
        )
    }

    fn embed(&self, ids: &[usize], drop: &mut DropCtx) -> Var {
        let t = self.tape;
        let d = self.model.config.d_model;
        let e = t.scale(t.embedding(self.v("emb"), ids), (d as f64).sqrt());
        drop.apply(t, t.add_const(e, sinusoid(ids.len(), d)))
    }

    /// Router conditioning row for one source sequence, or `None` when the
    /// model has no language-conditioned router.
    fn lid_var(&self, src0: usize, mode: LidMode) -> Result<Option<Var>> {
        let cfg = &self.model.config;
        if !(cfg.lid && cfg.moce_active()) {
            return Ok(None);
        }
        Ok(Some(match mode {
            LidMode::FromSource => self.tape.embedding(self.v("emb"), &[src0]),
            LidMode::Override(id) => {
                if !self.model.vocab.is_lang(id) {
                    return Err(Error::InvalidArgument(format!(
                        "token {id} is not a language token"
                    )));
                }
                self.tape.embedding(self.v("emb"), &[id])
            }
            LidMode::Zero => self
                .tape
                .leaf(Tensor::zeros(&[1, self.model.config.d_model])),
        }))
    }

    #[allow(clippy::too_many_arguments)]
    fn encoder(
        &self,
        ids: &[usize],
        pad: Option<&[bool]>,
        lid: Option<Var>,
        drop: &mut DropCtx,
        mut sink: RoutingSink,
        aux: &mut Vec<Var>,
    ) -> Result<Var> {
        let t = self.tape;
        let cfg = &self.model.config;
        let mask = build_mask(ids.len(), ids.len(), false, pad);
        let mut x = self.embed(ids, drop);
        for i in 0..cfg.enc_layers {
            let h = self.layer_norm(x, &format!("enc{i}.ln1"));
            let attn = self.attn(&format!("enc{i}.attn"));
            let a = if i == cfg.ada_layer && cfg.moce_active() {
                // fresh closure so the trait object gets a per-iteration
                // lifetime; a bare reborrow of `sink` would pin it for the
                // whole loop
                let mut record = sink.as_deref_mut().map(|s| {
                    move |st: Stream, head: usize, tok: usize, d: &GateDecision| {
                        s(st, head, tok, d)
                    }
                });
                ada_msha_forward(
                    t,
                    h,
                    &attn,
                    &self.pool(),
                    &self.routers(),
                    lid,
                    mask.as_ref(),
                    pad,
                    record
                        .as_mut()
                        .map(|r| r as &mut dyn FnMut(Stream, usize, usize, &GateDecision)),
                    (cfg.balance_coeff > 0.0).then_some(&mut *aux),
                )?
            } else if i == cfg.ada_layer && cfg.fixed_scales.is_some() {
                let scales = cfg.fixed_scales.as_ref().expect("checked");
                msha_forward(
                    t,
                    h,
                    &attn,
                    &self.pool(),
                    &ScaleAssignment(scales.clone()),
                    mask.as_ref(),
                    pad,
                )?
            } else {
                mha_forward(t, h, &attn, mask.as_ref())?
            };
            x = t.add(x, drop.apply(t, a));
            let h = self.layer_norm(x, &format!("enc{i}.ln2"));
            let f = self.ffn(h, &format!("enc{i}.ffn"));
            x = t.add(x, drop.apply(t, f));
        }
        Ok(self.layer_norm(x, "enc.ln"))
    }

    fn decoder_logits(
        &self,
        ids: &[usize],
        memory: Var,
        src_pad: Option<&[bool]>,
        drop: &mut DropCtx,
    ) -> Result<Var> {
        let t = self.tape;
        let cfg = &self.model.config;
        let lt = ids.len();
        let ls = t.shape_of(memory)[0];
        let causal = build_mask(lt, lt, true, None);
        let cross = build_mask(lt, ls, false, src_pad);
        let mut x = self.embed(ids, drop);
        for i in 0..cfg.dec_layers {
            let h = self.layer_norm(x, &format!("dec{i}.ln1"));
            let a = mha_forward(t, h, &self.attn(&format!("dec{i}.self")), causal.as_ref())?;
            x = t.add(x, drop.apply(t, a));
            let h = self.layer_norm(x, &format!("dec{i}.ln2"));
            let c = mha_cross_forward(
                t,
                h,
                memory,
                &self.attn(&format!("dec{i}.cross")),
                cross.as_ref(),
            )?;
            x = t.add(x, drop.apply(t, c));
            let h = self.layer_norm(x, &format!("dec{i}.ln3"));
            let f = self.ffn(h, &format!("dec{i}.ffn"));
            x = t.add(x, drop.apply(t, f));
        }
        let x = self.layer_norm(x, "dec.ln");
        let proj = if cfg.share_embeddings {
            self.v("emb")
        } else {
            self.v("out_proj")
        };
        Ok(t.matmul_nt(x, proj))
    }
}

fn pad_flags(ids: &[usize]) -> Option<Vec<bool>> {
    if ids.contains(&PAD_ID) {
        Some(ids.iter().map(|&i| i == PAD_ID).collect())
    } else {
        None
    }
}

/// Frozen encoder output for a single source sequence, reusable across
/// decoding steps.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    pub memory: Tensor,
    pub src_pad: Option<Vec<bool>>,
    /// Smallest routing-probability margin seen while encoding; infinite for
    /// non-adaptive models.
    pub min_margin: f64,
}

impl Model {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if value.shape() != self.params[i].shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name}: stored {:?} vs given {:?}",
                self.params[i].shape(),
                value.shape()
            )));
        }
        self.params[i] = value;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Extra parameters introduced by the adaptive machinery (expert pool
    /// plus routers) relative to the plain-attention model.
    pub fn moce_param_overhead(&self) -> usize {
        let cfg = &self.config;
        if cfg.delta_max == 0 {
            return 0;
        }
        let mut n = pool_param_count(cfg.delta_max, cfg.d_k(), cfg.expert_bias);
        if cfg.moce_active() {
            let d_lid = if cfg.lid { cfg.d_model } else { 0 };
            let per_router = (cfg.d_k() + d_lid) * (cfg.delta_max + 1);
            n += per_router * if cfg.per_stream_router { 3 } else { 1 };
        }
        n
    }

    /// Resolve a `--override-lid`-style request against the vocabulary:
    /// `None` keeps the true source language, `"none"` zeroes the context.
    pub fn lid_mode(&self, request: Option<&str>) -> Result<LidMode> {
        match request {
            None => Ok(LidMode::FromSource),
            Some("none") => Ok(LidMode::Zero),
            Some(code) => Ok(LidMode::Override(self.vocab.lang_id(code)?)),
        }
    }

    fn check_leading_lang(&self, ids: &[usize]) -> Result<()> {
        match ids.first() {
            Some(&t) if self.vocab.is_lang(t) => Ok(()),
            _ => Err(Error::InvalidArgument(
                "sequence does not start with a language token".into(),
            )),
        }
    }

    /// Mean label-smoothed cross entropy over all non-PAD target positions
    /// of the batch, with gradients for every parameter. Dropout is active
    /// only when an RNG is supplied.
    pub fn loss_and_grads(
        &self,
        pairs: &[(Vec<usize>, Vec<usize>)],
        smoothing: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let bound = Bound::new(self, &tape);
        let loss = self.batch_loss(&tape, &bound, pairs, smoothing, rng, LidMode::FromSource)?;
        let value = tape.value(loss).item();
        let gb = tape.backward(loss)?;
        let grads = bound
            .vars
            .iter()
            .zip(&self.params)
            .map(|(v, p)| gb.get_or_zeros(*v, p.shape()))
            .collect();
        Ok((value, grads))
    }

    /// Evaluation-mode loss (no dropout, no gradients).
    pub fn loss_value(&self, pairs: &[(Vec<usize>, Vec<usize>)], smoothing: f64) -> Result<f64> {
        let tape = Tape::new();
        let bound = Bound::new(self, &tape);
        let loss = self.batch_loss(&tape, &bound, pairs, smoothing, None, LidMode::FromSource)?;
        Ok(tape.value(loss).item())
    }

    fn batch_loss(
        &self,
        tape: &Tape,
        bound: &Bound,
        pairs: &[(Vec<usize>, Vec<usize>)],
        smoothing: f64,
        rng: Option<&mut ChaCha8Rng>,
        lid: LidMode,
    ) -> Result<Var> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut drop = DropCtx {
            rate: self.config.dropout,
            rng,
        };
        let total: usize = pairs
            .iter()
            .map(|(_, t)| t.iter().filter(|&&id| id != PAD_ID).count().saturating_sub(1))
            .sum();
        if total == 0 {
            return Err(Error::InvalidArgument("no target tokens to score".into()));
        }
        let mut terms = Vec::with_capacity(pairs.len());
        let mut aux = Vec::new();
        for (src, tgt) in pairs {
            self.check_leading_lang(src)?;
            self.check_leading_lang(tgt)?;
            if tgt.len() < 2 {
                return Err(Error::InvalidArgument(
                    "target needs at least a language token and one more symbol".into(),
                ));
            }
            let pad = pad_flags(src);
            let lid_var = bound.lid_var(src[0], lid)?;
            let memory = bound.encoder(src, pad.as_deref(), lid_var, &mut drop, None, &mut aux)?;
            let logits =
                bound.decoder_logits(&tgt[..tgt.len() - 1], memory, pad.as_deref(), &mut drop)?;
            let pair_loss = tape.cross_entropy_ls(logits, &tgt[1..], smoothing, Some(PAD_ID))?;
            let n = tgt[1..].iter().filter(|&&id| id != PAD_ID).count();
            terms.push(tape.scale(pair_loss, n as f64 / total as f64));
        }
        let mut loss = tape.add_scalars(&terms);
        if self.config.balance_coeff > 0.0 && !aux.is_empty() {
            let penalty = tape.scale(
                tape.add_scalars(&aux),
                self.config.balance_coeff / aux.len() as f64,
            );
            loss = tape.add(loss, penalty);
        }
        Ok(loss)
    }

    /// Evaluation-mode encoder pass; optionally records every routing
    /// decision at non-PAD positions.
    pub fn encode_source(
        &self,
        src: &[usize],
        lid: LidMode,
        stats: Option<&mut RoutingStats>,
    ) -> Result<EncodedSource> {
        self.check_leading_lang(src)?;
        let tape = Tape::new();
        let bound = Bound::new(self, &tape);
        let pad = pad_flags(src);
        let lid_var = bound.lid_var(src[0], lid)?;
        let mut drop = DropCtx { rate: 0.0, rng: None };
        let mut min_margin = f64::INFINITY;
        let mut stats = stats;
        let pad_for_sink = pad.clone();
        let mut sink = |stream: Stream, head: usize, token: usize, d: &GateDecision| {
            if pad_for_sink.as_ref().map_or(false, |p| p[token]) {
                return;
            }
            min_margin = min_margin.min(d.margin);
            if let Some(s) = stats.as_deref_mut() {
                s.record(stream, head, d);
            }
        };
        let mut aux = Vec::new();
        let memory = bound.encoder(
            src,
            pad.as_deref(),
            lid_var,
            &mut drop,
            Some(&mut sink),
            &mut aux,
        )?;
        let memory = tape.value(memory);
        drop_sink(sink);
        Ok(EncodedSource {
            memory,
            src_pad: pad,
            min_margin,
        })
    }

    /// Log-probabilities of the next token given a target-side prefix.
    pub fn next_log_probs(&self, enc: &EncodedSource, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("empty decoding prefix".into()));
        }
        let tape = Tape::new();
        let bound = Bound::new(self, &tape);
        let memory = tape.leaf(enc.memory.clone());
        let mut drop = DropCtx { rate: 0.0, rng: None };
        let logits = bound.decoder_logits(prefix, memory, enc.src_pad.as_deref(), &mut drop)?;
        let row = tape.value(logits);
        let last = row.row(row.rows() - 1);
        let m = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_denom = m + last.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        Ok(last.iter().map(|v| v - log_denom).collect())
    }

    /// Translate a single source sequence. Returns the generated target ids
    /// including the leading language token and trailing end marker.
    #[allow(clippy::too_many_arguments)]
    pub fn translate_ids(
        &self,
        src: &[usize],
        tgt_lang: &str,
        beam: usize,
        length_penalty: f64,
        max_new: usize,
        lid: LidMode,
        stats: Option<&mut RoutingStats>,
    ) -> Result<Vec<usize>> {
        let enc = self.encode_source(src, lid, stats)?;
        let start = self.vocab.lang_id(tgt_lang)?;
        let scorer = ModelScorer { model: self, enc: &enc };
        beam_search(&scorer, start, EOS_ID, beam, length_penalty, max_new)
    }

    /// Relative error between reverse-mode and central-difference gradients
    /// over the batch loss. `sample` limits the number of probed
    /// coordinates (evenly strided); `None` checks every parameter.
    pub fn grad_check(
        &self,
        pairs: &[(Vec<usize>, Vec<usize>)],
        smoothing: f64,
        step: f64,
        sample: Option<usize>,
    ) -> Result<f64> {
        use rayon::prelude::*;
        let (_, grads) = self.loss_and_grads(pairs, smoothing, None)?;
        let mut coords: Vec<(usize, usize)> = Vec::new();
        for (pi, p) in self.params.iter().enumerate() {
            for ei in 0..p.len() {
                coords.push((pi, ei));
            }
        }
        if let Some(n) = sample {
            if n < coords.len() {
                let stride = coords.len() as f64 / n as f64;
                coords = (0..n)
                    .map(|i| coords[(i as f64 * stride) as usize])
                    .collect();
            }
        }
        coords
            .par_chunks(64)
            .map(|chunk| -> Result<f64> {
                let mut probe = self.clone();
                let mut worst = 0.0f64;
                for &(pi, ei) in chunk {
                    let analytic = grads[pi].data()[ei];
                    let mut err = f64::INFINITY;
                    // a probe interval can straddle a ReLU kink or a top-k
                    // selection boundary; those artifacts vanish at smaller
                    // steps while a genuine gradient error persists, so
                    // refine suspicious coordinates instead of trusting one
                    // step size
                    for h in [step, step / 10.0, step / 100.0] {
                        let orig = probe.params[pi].data()[ei];
                        probe.params[pi].data_mut()[ei] = orig + h;
                        let up = probe.loss_value(pairs, smoothing)?;
                        probe.params[pi].data_mut()[ei] = orig - h;
                        let down = probe.loss_value(pairs, smoothing)?;
                        probe.params[pi].data_mut()[ei] = orig;
                        let numeric = (up - down) / (2.0 * h);
                        err = err.min(
                            (analytic - numeric).abs()
                                / analytic.abs().max(numeric.abs()).max(1.0),
                        );
                        if err <= 1e-6 {
                            break;
                        }
                    }
                    worst = worst.max(err);
                }
                Ok(worst)
            })
            .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
    }
}

// Closures that borrow locals can't outlive the statements that read their
// captures; consuming the sink makes the borrow checker see the end of it.
fn drop_sink<F>(_f: F) {}

/// Anything that can score the next token of a target prefix. Lets the
/// search logic be tested against exhaustive enumeration with toy scorers.
pub trait TokenScorer {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

struct ModelScorer<'a> {
    model: &'a Model,
    enc: &'a EncodedSource,
}

impl TokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab.size()
    }

    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.model.next_log_probs(self.enc, prefix)
    }
}

#[derive(Clone, Debug)]
struct Hyp {
    ids: Vec<usize>,
    logp: f64,
}

impl Hyp {
    /// Length-normalized score: log P / (generated length)^penalty.
    fn score(&self, penalty: f64) -> f64 {
        let gen = (self.ids.len() - 1).max(1) as f64;
        self.logp / gen.powf(penalty)
    }
}

/// Beam search with length normalization. `beam == 1` reduces exactly to
/// greedy decoding; ties prefer the lower token id.
pub fn beam_search(
    scorer: &dyn TokenScorer,
    start: usize,
    eos: usize,
    beam: usize,
    length_penalty: f64,
    max_new: usize,
) -> Result<Vec<usize>> {
    if beam == 0 {
        return Err(Error::InvalidArgument("beam width must be positive".into()));
    }
    if max_new == 0 {
        return Err(Error::InvalidArgument("max_new must be positive".into()));
    }
    let mut active = vec![Hyp {
        ids: vec![start],
        logp: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..max_new {
        let mut candidates: Vec<Hyp> = Vec::new();
        for h in &active {
            let lp = scorer.next_log_probs(&h.ids)?;
            if lp.len() != scorer.vocab_size() {
                return Err(Error::ShapeMismatch(format!(
                    "scorer returned {} log-probs for vocab {}",
                    lp.len(),
                    scorer.vocab_size()
                )));
            }
            for (tok, &l) in lp.iter().enumerate() {
                let mut ids = h.ids.clone();
                ids.push(tok);
                candidates.push(Hyp {
                    ids,
                    logp: h.logp + l,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.logp
                .partial_cmp(&a.logp)
                .unwrap()
                .then(a.ids.last().cmp(&b.ids.last()))
        });
        // finished hypotheses occupy beam slots, so a beam of one reduces
        // exactly to greedy decoding
        active.clear();
        for c in candidates.into_iter().take(beam) {
            if *c.ids.last().unwrap() == eos {
                finished.push(c);
            } else {
                active.push(c);
            }
        }
        if active.is_empty() {
            break;
        }
    }
    // force-close anything still open at the cap
    finished.extend(active.into_iter().map(|mut h| {
        h.ids.push(eos);
        h
    }));
    finished
        .into_iter()
        .max_by(|a, b| {
            a.score(length_penalty)
                .partial_cmp(&b.score(length_penalty))
                .unwrap()
        })
        .map(|h| h.ids)
        .ok_or_else(|| Error::InvalidArgument("search produced no hypothesis".into()))
}

/// Greedy decoding: the beam-1 special case, kept as its own entry point.
pub fn greedy_decode(
    scorer: &dyn TokenScorer,
    start: usize,
    eos: usize,
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut ids = vec![start];
    for _ in 0..max_new {
        let lp = scorer.next_log_probs(&ids)?;
        let best = lp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("non-empty vocab");
        ids.push(best);
        if best == eos {
            return Ok(ids);
        }
    }
    ids.push(eos);
    Ok(ids)
}
