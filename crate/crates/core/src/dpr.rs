//! Dual-stream prototype refinement.
//!
//! Support and query token sets produce one `d × d` channel-affinity
//! matrix `A`. Both prototype streams are refined with that same matrix,
//! `LN(P + Conv1d(Linear(P) · Aᵀ))`, so each class vector is re-mixed
//! across channels by the support/query affinity. A sigmoid gate then
//! blends raw and refined prototypes per class.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{dense, TokenSet};
use crate::error::{Error, Result};
use crate::nn::{conv1d_proto, Graph, ParamStore, RowMixing, Var, LAYER_NORM_EPS};
use crate::prototypes::{PrototypeSet, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateGranularity {
    /// One gate value per class and channel.
    Vector,
    /// One gate value per class, shared across channels.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DprConfig {
    pub enabled: bool,
    pub gate_granularity: GateGranularity,
    pub conv_width: usize,
}

impl Default for DprConfig {
    fn default() -> Self {
        DprConfig {
            enabled: true,
            gate_granularity: GateGranularity::Vector,
            conv_width: 1,
        }
    }
}

/// Row-stochastic `d × d` channel affinity.
#[derive(Debug, Clone, Copy)]
pub struct ChannelAttention {
    pub weights: Var,
}

/// Sigmoid gate over `[a ∥ b]` blending `(1 − g)·a + g·b`.
#[derive(Debug, Clone)]
pub struct FusionGate {
    prefix: String,
    dim: usize,
    granularity: GateGranularity,
}

impl FusionGate {
    pub fn new(prefix: &str, dim: usize, granularity: GateGranularity) -> Self {
        FusionGate {
            prefix: prefix.to_string(),
            dim,
            granularity,
        }
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let out = match self.granularity {
            GateGranularity::Vector => self.dim,
            GateGranularity::Scalar => 1,
        };
        store.init_weight(&format!("{}.w", self.prefix), 2 * self.dim, out, rng)?;
        store.init_zeros(&format!("{}.b", self.prefix), out)
    }

    /// Gate values in (0, 1), shaped like `a`.
    pub fn gate_values(&self, g: &mut Graph, store: &ParamStore, a: Var, b: Var) -> Result<Var> {
        let cat = g.concat_cols(a, b)?;
        let logits = dense(g, store, cat, &self.prefix)?;
        let gate = g.sigmoid(logits)?;
        match self.granularity {
            GateGranularity::Vector => Ok(gate),
            GateGranularity::Scalar => g.broadcast_cols(gate, self.dim),
        }
    }

    /// `a + gate ⊙ (b − a)`, returning the blend and the gate values.
    pub fn blend(&self, g: &mut Graph, store: &ParamStore, a: Var, b: Var) -> Result<(Var, Var)> {
        let gate = self.gate_values(g, store, a, b)?;
        let diff = g.sub(b, a)?;
        let step = g.mul(gate, diff)?;
        Ok((g.add(a, step)?, gate))
    }
}

#[derive(Debug, Clone)]
pub struct Dpr {
    cfg: DprConfig,
    dim: usize,
    gate: FusionGate,
}

impl Dpr {
    pub fn new(cfg: DprConfig, dim: usize) -> Result<Self> {
        if cfg.conv_width == 0 || cfg.conv_width % 2 == 0 {
            return Err(Error::Config(format!(
                "dpr.conv_width must be odd, got {}",
                cfg.conv_width
            )));
        }
        let gate = FusionGate::new("dpr.gate", dim, cfg.gate_granularity);
        Ok(Dpr { cfg, dim, gate })
    }

    pub fn config(&self) -> &DprConfig {
        &self.cfg
    }

    pub fn gate(&self) -> &FusionGate {
        &self.gate
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let d = self.dim;
        for name in ["dpr.q", "dpr.k", "dpr.v"] {
            store.init_weight(&format!("{name}.w"), d, d, rng)?;
            store.init_zeros(&format!("{name}.b"), d)?;
        }
        let w = self.cfg.conv_width;
        for k in 0..w {
            // Fan-in covers the whole receptive field.
            let bound = (6.0 / (d * w + d) as f64).sqrt();
            let data = (0..d * d).map(|_| rng.gen_range(-bound..=bound)).collect();
            store.insert(&format!("dpr.conv.w{k}"), crate::nn::Tensor::matrix(d, d, data)?)?;
        }
        store.init_zeros("dpr.conv.b", d)?;
        store.init_ones("dpr.ln.gain", d)?;
        store.init_zeros("dpr.ln.bias", d)?;
        self.gate.init_params(store, rng)
    }

    /// `softmax_keys((T_Q W_q + b_q)ᵀ (T_S W_k + b_k) / √N_tok)`. With several
    /// support token sets the scaled score matrices are averaged before
    /// the softmax.
    pub fn channel_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: &TokenSet,
        support: &[TokenSet],
    ) -> Result<ChannelAttention> {
        if support.is_empty() {
            return Err(Error::InvalidArgument("no support token sets".into()));
        }
        for s in support {
            if s.n_tok != query.n_tok || s.dim != query.dim || s.dim != self.dim {
                return Err(Error::shape(
                    "channel_attention",
                    format!(
                        "query tokens {}x{}, support tokens {}x{}, model width {}",
                        query.n_tok, query.dim, s.n_tok, s.dim, self.dim
                    ),
                ));
            }
        }
        let q = dense(g, store, query.tokens, "dpr.q")?;
        let qt = g.transpose(q)?;
        let scale = 1.0 / ((query.n_tok as f64).sqrt() * support.len() as f64);
        let mut scores: Option<Var> = None;
        for s in support {
            let k = dense(g, store, s.tokens, "dpr.k")?;
            let s_qk = g.matmul(qt, k)?;
            scores = Some(match scores {
                Some(acc) => g.add(acc, s_qk)?,
                None => s_qk,
            });
        }
        let scaled = g.scale(scores.expect("non-empty support"), scale)?;
        Ok(ChannelAttention {
            weights: g.softmax(scaled)?,
        })
    }

    /// `LN(P + Conv1d(Linear(P) · Aᵀ))`, padded rows forced back to zero.
    pub fn refine_stream(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        attention: &ChannelAttention,
        raw: &PrototypeSet,
    ) -> Result<PrototypeSet> {
        raw.expect_stage(Stage::Raw)?;
        let v = dense(g, store, raw.protos, "dpr.v")?;
        let at = g.transpose(attention.weights)?;
        let substituted = g.matmul(v, at)?;
        let kernels = (0..self.cfg.conv_width)
            .map(|k| g.param(store, &format!("dpr.conv.w{k}")))
            .collect::<Result<Vec<_>>>()?;
        let bias = g.param(store, "dpr.conv.b")?;
        let conv = conv1d_proto(g, substituted, &kernels, Some(bias))?;
        let residual = g.add(raw.protos, conv)?;
        let gain = g.param(store, "dpr.ln.gain")?;
        let beta = g.param(store, "dpr.ln.bias")?;
        let normed = g.layer_norm(residual, gain, beta, LAYER_NORM_EPS)?;
        let masked = mask_rows(g, normed, raw)?;
        raw.advanced(masked, Stage::Refined)
    }

    /// Refines support and query prototypes with one shared attention.
    pub fn refine(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        support_tokens: &[TokenSet],
        query_tokens: &TokenSet,
        support_raw: &PrototypeSet,
        query_raw: &PrototypeSet,
    ) -> Result<(PrototypeSet, PrototypeSet)> {
        support_raw.expect_stage(Stage::Raw)?;
        query_raw.expect_stage(Stage::Raw)?;
        let attention = self.channel_attention(g, store, query_tokens, support_tokens)?;
        let s = self.refine_stream(g, store, &attention, support_raw)?;
        let q = self.refine_stream(g, store, &attention, query_raw)?;
        Ok((s, q))
    }

    /// `(1 − α) ⊙ raw + α ⊙ refined` with `α = σ(gate([raw ∥ refined]))`.
    pub fn fuse_alpha(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        raw: &PrototypeSet,
        refined: &PrototypeSet,
    ) -> Result<PrototypeSet> {
        fuse_alpha(g, store, &self.gate, raw, refined)
    }
}

pub fn fuse_alpha(
    g: &mut Graph,
    store: &ParamStore,
    gate: &FusionGate,
    raw: &PrototypeSet,
    refined: &PrototypeSet,
) -> Result<PrototypeSet> {
    raw.expect_stage(Stage::Raw)?;
    refined.expect_stage(Stage::Refined)?;
    if raw.class_ids != refined.class_ids {
        return Err(Error::InvalidArgument(
            "raw and refined prototypes cover different classes".into(),
        ));
    }
    let (blend, _) = gate.blend(g, store, raw.protos, refined.protos)?;
    raw.advanced(blend, Stage::Fused1)
}

pub(crate) fn mask_rows(g: &mut Graph, x: Var, like: &PrototypeSet) -> Result<Var> {
    if like.valid.iter().all(|&v| v) {
        return Ok(x);
    }
    g.row_mix(x, Arc::new(RowMixing::diagonal(&like.valid_weights())))
}
