//! Task-specific labeling layers stacked on the encoder output `Hᴸ`.
//!
//! Every token-level head maps `Hᴸ` to a task representation `Hᵀ` (the
//! identity for the linear head) and projects it to 13 tag logits with a
//! shared-shape output layer `W_o, b_o`. The CRF head lives in [`crate::crf`]
//! and is wrapped here so all five variants share one interface.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf::{self, CrfHead};
use crate::encoder::{self_attention, LayerNorm, Linear, TransformerLayer};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tagging::{allowed_transitions, NUM_TAGS};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    Linear,
    Gru,
    San,
    Tfm,
    Crf,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 5] = [
        HeadVariant::Linear,
        HeadVariant::Gru,
        HeadVariant::San,
        HeadVariant::Tfm,
        HeadVariant::Crf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadVariant::Linear => "linear",
            HeadVariant::Gru => "gru",
            HeadVariant::San => "san",
            HeadVariant::Tfm => "tfm",
            HeadVariant::Crf => "crf",
        }
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown head `{s}` (expected linear, gru, san, tfm or crf)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    /// Attention heads inside the SAN/TFM layer.
    pub attn_heads: usize,
    /// FFN width of the TFM layer; `0` means `4 · dim_h`.
    pub ffn_dim: usize,
    /// Restrict CRF decoding to transitions allowed by the BIOES grammar.
    pub crf_constrained: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            variant: HeadVariant::Linear,
            attn_heads: 1,
            ffn_dim: 0,
            crf_constrained: false,
        }
    }
}

/// GRU with a separate layer norm on each of its four preactivations.
#[derive(Clone, Debug)]
pub struct GruHead {
    /// Input-to-gates, `[dim_h × 2·dim_h]` producing stacked `r, z`.
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub w_xn: ParamId,
    pub w_hn: ParamId,
    pub ln_x: LayerNorm,
    pub ln_h: LayerNorm,
    pub ln_xn: LayerNorm,
    pub ln_hn: LayerNorm,
    pub dim: usize,
}

impl GruHead {
    fn new(store: &mut ParamStore, dim: usize, eps: f64, std: f64, rng: &mut ChaCha8Rng) -> Self {
        GruHead {
            w_x: store.add_normal("head.gru.w_x", &[dim, 2 * dim], std, rng),
            w_h: store.add_normal("head.gru.w_h", &[dim, 2 * dim], std, rng),
            w_xn: store.add_normal("head.gru.w_xn", &[dim, dim], std, rng),
            w_hn: store.add_normal("head.gru.w_hn", &[dim, dim], std, rng),
            ln_x: LayerNorm::new(store, "head.gru.ln_x", 2 * dim, eps),
            ln_h: LayerNorm::new(store, "head.gru.ln_h", 2 * dim, eps),
            ln_xn: LayerNorm::new(store, "head.gru.ln_xn", dim, eps),
            ln_hn: LayerNorm::new(store, "head.gru.ln_hn", dim, eps),
            dim,
        }
    }

    /// Left-to-right recurrence from a zero state; returns `[T×dim]`.
    pub fn hidden(&self, g: &mut Graph, h_l: Var) -> Result<Var> {
        let d = self.dim;
        let t_len = g.tape.value(h_l).rows();
        let (w_x, w_h, w_xn, w_hn) = (g.param(self.w_x), g.param(self.w_h), g.param(self.w_xn), g.param(self.w_hn));

        let x_rz = g.tape.matmul(h_l, w_x)?;
        let x_rz = self.ln_x.forward(g, x_rz)?;
        let x_n = g.tape.matmul(h_l, w_xn)?;
        let x_n = self.ln_xn.forward(g, x_n)?;

        let mut h = g.tape.constant(Tensor::zeros(&[1, d]));
        let mut states = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt_rz = g.tape.row(x_rz, t)?;
            let xt_n = g.tape.row(x_n, t)?;
            let h_rz = g.tape.matmul(h, w_h)?;
            let h_rz = self.ln_h.forward(g, h_rz)?;
            let pre = g.tape.add(xt_rz, h_rz)?;
            let gates = g.tape.sigmoid(pre);
            let r = g.tape.slice_cols(gates, 0, d)?;
            let z = g.tape.slice_cols(gates, d, d)?;
            let h_n = g.tape.matmul(h, w_hn)?;
            let h_n = self.ln_hn.forward(g, h_n)?;
            let gated = g.tape.mul(r, h_n)?;
            let pre_n = g.tape.add(xt_n, gated)?;
            let n = g.tape.tanh(pre_n);
            // (1 - z) * n + z * h  ==  n + z * (h - n)
            let diff = g.tape.sub(h, n)?;
            let carry = g.tape.mul(z, diff)?;
            h = g.tape.add(n, carry)?;
            states.push(h);
        }
        g.tape.concat_rows(&states)
    }
}

/// Single self-attention layer with residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct SanHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub norm: LayerNorm,
    pub heads: usize,
}

impl SanHead {
    fn new(store: &mut ParamStore, dim: usize, heads: usize, eps: f64, std: f64, rng: &mut ChaCha8Rng) -> Self {
        SanHead {
            w_q: store.add_normal("head.san.w_q", &[dim, dim], std, rng),
            w_k: store.add_normal("head.san.w_k", &[dim, dim], std, rng),
            w_v: store.add_normal("head.san.w_v", &[dim, dim], std, rng),
            norm: LayerNorm::new(store, "head.san.norm", dim, eps),
            heads,
        }
    }

    /// `Hᵀ = LN(Hᴸ + SlfAtt(Hᴸ W^Q, Hᴸ W^K, Hᴸ W^V))`.
    pub fn hidden(&self, g: &mut Graph, h_l: Var, mask: &[bool]) -> Result<Var> {
        let (wq, wk, wv) = (g.param(self.w_q), g.param(self.w_k), g.param(self.w_v));
        let q = g.tape.matmul(h_l, wq)?;
        let k = g.tape.matmul(h_l, wk)?;
        let v = g.tape.matmul(h_l, wv)?;
        let a = self_attention(g, q, k, v, self.heads, mask)?;
        let res = g.tape.add(h_l, a)?;
        self.norm.forward(g, res)
    }
}

#[derive(Clone, Debug)]
pub enum HeadKind {
    Linear,
    Gru(GruHead),
    San(SanHead),
    Tfm(TransformerLayer),
    Crf(CrfHead),
}

/// A complete labeling head: task layer plus output projection.
#[derive(Clone, Debug)]
pub struct Head {
    pub config: HeadConfig,
    pub kind: HeadKind,
    /// `W_o, b_o` for token-level heads; unused for CRF (which owns `W_e, b_e`).
    pub output: Option<Linear>,
}

pub const PARAM_PREFIX: &str = "head.";

impl Head {
    pub fn new(
        store: &mut ParamStore,
        config: &HeadConfig,
        dim_h: usize,
        eps: f64,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.attn_heads == 0 || !dim_h.is_multiple_of(config.attn_heads) {
            return Err(Error::Config(format!(
                "head attn_heads ({}) must divide dim_h ({dim_h})",
                config.attn_heads
            )));
        }
        let kind = match config.variant {
            HeadVariant::Linear => HeadKind::Linear,
            HeadVariant::Gru => HeadKind::Gru(GruHead::new(store, dim_h, eps, std, rng)),
            HeadVariant::San => HeadKind::San(SanHead::new(store, dim_h, config.attn_heads, eps, std, rng)),
            HeadVariant::Tfm => {
                let ffn = if config.ffn_dim == 0 { 4 * dim_h } else { config.ffn_dim };
                HeadKind::Tfm(TransformerLayer::new(store, "head.tfm", dim_h, config.attn_heads, ffn, eps, std, rng))
            }
            HeadVariant::Crf => HeadKind::Crf(CrfHead::new(store, "head.crf", dim_h, NUM_TAGS, std, rng)),
        };
        let output = match config.variant {
            HeadVariant::Crf => None,
            _ => Some(Linear::new(store, "head.out", dim_h, NUM_TAGS, std, rng)),
        };
        Ok(Head {
            config: config.clone(),
            kind,
            output,
        })
    }

    pub fn variant(&self) -> HeadVariant {
        self.config.variant
    }

    /// Task representation `Hᵀ` (identity for the linear and CRF heads).
    pub fn hidden(&self, g: &mut Graph, h_l: Var, mask: &[bool]) -> Result<Var> {
        match &self.kind {
            HeadKind::Linear | HeadKind::Crf(_) => Ok(h_l),
            HeadKind::Gru(gru) => gru.hidden(g, h_l),
            HeadKind::San(san) => san.hidden(g, h_l, mask),
            HeadKind::Tfm(layer) => layer.forward(g, h_l, mask),
        }
    }

    /// Per-token tag scores: logits for token-level heads, emissions `M^P`
    /// for the CRF.
    pub fn scores(&self, g: &mut Graph, h_l: Var, mask: &[bool]) -> Result<Var> {
        let h_t = self.hidden(g, h_l, mask)?;
        match (&self.kind, &self.output) {
            (HeadKind::Crf(crf), _) => crf.emissions(g, h_t),
            (_, Some(out)) => out.forward(g, h_t),
            (_, None) => Err(Error::contract("token-level head without output layer")),
        }
    }

    /// Per-token tag distributions; rows sum to one.
    pub fn probs(&self, g: &mut Graph, h_l: Var, mask: &[bool]) -> Result<Var> {
        let s = self.scores(g, h_l, mask)?;
        Ok(g.tape.softmax_rows(s))
    }

    /// Training loss for one sentence of length `gold.len()`; scores beyond
    /// that length (padding) are ignored.
    pub fn loss(&self, g: &mut Graph, scores: Var, gold: &[usize]) -> Result<Var> {
        match &self.kind {
            HeadKind::Crf(crf) => {
                let rows = g.tape.value(scores).rows();
                let em = if rows == gold.len() {
                    scores
                } else {
                    g.tape.slice_rows(scores, 0, gold.len())?
                };
                crf.nll(g, em, gold)
            }
            _ => {
                let rows = g.tape.value(scores).rows();
                let mask: Vec<bool> = (0..rows).map(|t| t < gold.len()).collect();
                let mut padded = gold.to_vec();
                padded.resize(rows, 0);
                token_nll_from_logits(&mut g.tape, scores, &padded, &mask)
            }
        }
    }

    /// Tag indices for one unpadded sentence: per-token argmax for
    /// token-level heads, Viterbi for the CRF.
    pub fn decode(&self, store: &ParamStore, scores: &Tensor) -> Result<Vec<usize>> {
        match &self.kind {
            HeadKind::Crf(crf) => {
                let trans = store.value(crf.transitions);
                if self.config.crf_constrained {
                    crf::viterbi_constrained(scores, trans, Some(&allowed_transitions()))
                } else {
                    crf::viterbi(scores, trans)
                }
            }
            _ => Ok((0..scores.rows()).map(|t| argmax(scores.row(t))).collect()),
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_gold(rows: usize, cols: usize, gold: &[usize], mask: &[bool]) -> Result<Vec<(usize, usize)>> {
    if gold.len() != rows || mask.len() != rows {
        return Err(Error::contract(format!(
            "{} gold tags and {} mask entries for {rows} positions",
            gold.len(),
            mask.len()
        )));
    }
    let mut picks = Vec::new();
    for (t, (&y, &m)) in gold.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if y >= cols {
            return Err(Error::contract(format!("gold tag {y} at position {t} out of range for {cols} tags")));
        }
        picks.push((t, y));
    }
    if picks.is_empty() {
        return Err(Error::contract("token loss over a fully masked sequence"));
    }
    Ok(picks)
}

/// `−(1/|unmasked|) Σ log probs[t, gold_t]` over unmasked positions.
pub fn token_nll(tape: &mut Tape, probs: Var, gold: &[usize], mask: &[bool]) -> Result<Var> {
    let (rows, cols) = (tape.value(probs).rows(), tape.value(probs).cols());
    let picks = check_gold(rows, cols, gold, mask)?;
    let p = tape.pick(probs, &picks)?;
    let logp = tape.log(p);
    let mean = tape.mean(logp);
    Ok(tape.scale(mean, -1.0))
}

/// Same quantity as [`token_nll`] computed through a log-softmax of the
/// logits, which stays finite when a probability underflows.
pub fn token_nll_from_logits(tape: &mut Tape, logits: Var, gold: &[usize], mask: &[bool]) -> Result<Var> {
    let (rows, cols) = (tape.value(logits).rows(), tape.value(logits).cols());
    let picks = check_gold(rows, cols, gold, mask)?;
    let logp = tape.log_softmax_rows(logits);
    let p = tape.pick(logp, &picks)?;
    let mean = tape.mean(p);
    Ok(tape.scale(mean, -1.0))
}
