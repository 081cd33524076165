//! Toy transformer encoder: token + position + segment embeddings followed
//! by a stack of post-norm transformer layers.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Logit assigned to masked attention keys.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_layers: usize,
    pub dim_h: usize,
    pub num_attn_heads: usize,
    pub ffn_dim: usize,
    pub num_segments: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 2,
            max_len: 64,
            num_layers: 2,
            dim_h: 32,
            num_attn_heads: 4,
            ffn_dim: 128,
            num_segments: 1,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim_h == 0 || self.num_attn_heads == 0 || !self.dim_h.is_multiple_of(self.num_attn_heads) {
            return bad(format!(
                "dim_h ({}) must be a positive multiple of num_attn_heads ({})",
                self.dim_h, self.num_attn_heads
            ));
        }
        if self.vocab_size < 2 || self.max_len == 0 || self.num_segments == 0 || self.ffn_dim == 0 {
            return bad("vocab_size ≥ 2 and max_len, num_segments, ffn_dim ≥ 1 are required".into());
        }
        Ok(())
    }
}

/// Scaled dot-product self-attention split over `heads` column blocks.
///
/// Keys at positions where `mask` is false get logit [`MASK_LOGIT`].
pub fn self_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, mask: &[bool]) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::contract("attention over a fully masked sequence"));
    }
    let dim = g.tape.value(q).cols();
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::contract(format!("{dim} columns cannot be split into {heads} heads")));
    }
    let dk = dim / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.tape.slice_cols(q, h * dk, dk)?,
                g.tape.slice_cols(k, h * dk, dk)?,
                g.tape.slice_cols(v, h * dk, dk)?,
            )
        };
        let scores = g.tape.matmul_nt(qh, kh)?;
        let scores = g.tape.scale(scores, scale);
        let scores = g.tape.mask_cols(scores, mask, MASK_LOGIT)?;
        let weights = g.tape.softmax_rows(scores);
        outs.push(g.tape.matmul(weights, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.tape.concat_cols(&outs)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: store.add_normal(format!("{name}.w"), &[fan_in, fan_out], std, rng),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.tape.matmul(x, w)?;
        g.tape.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.tape.layer_norm(x, gain, bias, self.eps)
    }
}

/// Post-norm transformer encoder layer:
/// `Ĥ = LN(H + Attn(H))`, `out = LN(Ĥ + FFN(Ĥ))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub attn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
    pub heads: usize,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        eps: f64,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        TransformerLayer {
            query: Linear::new(store, &format!("{prefix}.attn.query"), dim, dim, std, rng),
            key: Linear::new(store, &format!("{prefix}.attn.key"), dim, dim, std, rng),
            value: Linear::new(store, &format!("{prefix}.attn.value"), dim, dim, std, rng),
            attn_out: Linear::new(store, &format!("{prefix}.attn.out"), dim, dim, std, rng),
            attn_norm: LayerNorm::new(store, &format!("{prefix}.attn.norm"), dim, eps),
            ffn_in: Linear::new(store, &format!("{prefix}.ffn.in"), dim, ffn_dim, std, rng),
            ffn_out: Linear::new(store, &format!("{prefix}.ffn.out"), ffn_dim, dim, std, rng),
            ffn_norm: LayerNorm::new(store, &format!("{prefix}.ffn.norm"), dim, eps),
            heads,
        }
    }

    /// The attention sub-layer after its residual and norm.
    pub fn attention_block(&self, g: &mut Graph, h: Var, mask: &[bool]) -> Result<Var> {
        let q = self.query.forward(g, h)?;
        let k = self.key.forward(g, h)?;
        let v = self.value.forward(g, h)?;
        let a = self_attention(g, q, k, v, self.heads, mask)?;
        let a = self.attn_out.forward(g, a)?;
        let res = g.tape.add(h, a)?;
        self.attn_norm.forward(g, res)
    }

    pub fn forward(&self, g: &mut Graph, h: Var, mask: &[bool]) -> Result<Var> {
        let h_hat = self.attention_block(g, h, mask)?;
        let f = self.ffn_in.forward(g, h_hat)?;
        let f = g.tape.gelu(f);
        let f = self.ffn_out.forward(g, f)?;
        let res = g.tape.add(h_hat, f)?;
        self.ffn_norm.forward(g, res)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub seg_emb: ParamId,
    pub layers: Vec<TransformerLayer>,
}

pub const PARAM_PREFIX: &str = "encoder.";

impl Encoder {
    pub fn new(store: &mut ParamStore, config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let std = c.init_std;
        let token_emb = store.add_normal("encoder.token_emb", &[c.vocab_size, c.dim_h], std, rng);
        let pos_emb = store.add_normal("encoder.pos_emb", &[c.max_len, c.dim_h], std, rng);
        let seg_emb = store.add_normal("encoder.seg_emb", &[c.num_segments, c.dim_h], std, rng);
        let layers = (0..c.num_layers)
            .map(|l| {
                TransformerLayer::new(
                    store,
                    &format!("encoder.layer{l}"),
                    c.dim_h,
                    c.num_attn_heads,
                    c.ffn_dim,
                    c.ln_eps,
                    std,
                    rng,
                )
            })
            .collect();
        Ok(Encoder {
            config: config.clone(),
            token_emb,
            pos_emb,
            seg_emb,
            layers,
        })
    }

    /// `H⁰ₜ = token_emb[idₜ] + pos_emb[t] + seg_emb[segₜ]`.
    pub fn embed(&self, g: &mut Graph, token_ids: &[usize], segment_ids: &[usize]) -> Result<Var> {
        let t = token_ids.len();
        if t == 0 || t > self.config.max_len {
            return Err(Error::contract(format!(
                "sequence length {t} outside 1..={}",
                self.config.max_len
            )));
        }
        if segment_ids.len() != t {
            return Err(Error::contract(format!("{} segment ids for {t} tokens", segment_ids.len())));
        }
        let tok = g.param(self.token_emb);
        let pos = g.param(self.pos_emb);
        let seg = g.param(self.seg_emb);
        let positions: Vec<usize> = (0..t).collect();
        let e_tok = g.tape.gather_rows(tok, token_ids)?;
        let e_pos = g.tape.gather_rows(pos, &positions)?;
        let e_seg = g.tape.gather_rows(seg, segment_ids)?;
        let sum = g.tape.add(e_tok, e_pos)?;
        g.tape.add(sum, e_seg)
    }

    /// `H^L` for one (possibly padded) sentence.
    pub fn encode(&self, g: &mut Graph, token_ids: &[usize], segment_ids: &[usize], mask: &[bool]) -> Result<Var> {
        if mask.len() != token_ids.len() {
            return Err(Error::contract(format!("mask has {} entries for {} tokens", mask.len(), token_ids.len())));
        }
        let h0 = self.embed(g, token_ids, segment_ids)?;
        let mut h = g.dropout(h0)?;
        for layer in &self.layers {
            h = layer.forward(g, h, mask)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_config(layers: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 10,
            max_len: 12,
            num_layers: layers,
            dim_h: 8,
            num_attn_heads: 2,
            ffn_dim: 16,
            init_std: 0.3,
            ..EncoderConfig::default()
        }
    }

    fn build(layers: usize, seed: u64) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::new(&mut store, &small_config(layers), &mut rng).unwrap();
        (store, enc)
    }

    fn run(store: &ParamStore, enc: &Encoder, ids: &[usize], mask: &[bool]) -> Tensor {
        let mut g = Graph::new(store);
        let h = enc.encode(&mut g, ids, &vec![0; ids.len()], mask).unwrap();
        g.tape.value(h).clone()
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(1);
        c.num_attn_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_tables_embed_to_zero() {
        let (mut store, enc) = build(0, 1);
        for id in [enc.token_emb, enc.pos_emb, enc.seg_emb] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let h = run(&store, &enc, &[1, 2, 3], &[true; 3]);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_is_sum_of_three_rows() {
        let (store, enc) = build(0, 2);
        let h = run(&store, &enc, &[3], &[true]);
        let expected: Vec<f64> = (0..8)
            .map(|c| {
                store.value(enc.token_emb).get(3, c) + store.value(enc.pos_emb).get(0, c) + store.value(enc.seg_emb).get(0, c)
            })
            .collect();
        assert_eq!(h.shape(), [1, 8]);
        for c in 0..8 {
            assert!((h.get(0, c) - expected[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn same_token_different_position() {
        let (store, enc) = build(0, 3);
        let h = run(&store, &enc, &[4, 4], &[true, true]);
        assert_ne!(h.row(0), h.row(1));
    }

    #[test]
    fn vocabulary_error_names_index() {
        let (store, enc) = build(1, 4);
        let mut g = Graph::new(&store);
        let err = enc.encode(&mut g, &[1, 99], &[0, 0], &[true, true]).unwrap_err();
        assert!(matches!(err, Error::Vocabulary { index: 99, size: 10 }));
        let mut g = Graph::new(&store);
        assert!(enc.encode(&mut g, &[1; 13], &[0; 13], &[true; 13]).is_err());
    }

    #[test]
    fn empty_stack_returns_embeddings() {
        let (store, enc) = build(0, 5);
        let mut g = Graph::new(&store);
        let h0 = enc.embed(&mut g, &[1, 5, 2], &[0, 0, 0]).unwrap();
        let h0 = g.tape.value(h0).clone();
        assert_eq!(run(&store, &enc, &[1, 5, 2], &[true; 3]), h0);
    }

    #[test]
    fn layer_preserves_shape() {
        let (store, enc) = build(1, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for t in 1..=8 {
            let ids: Vec<usize> = (0..t).map(|_| rng.random_range(0..10)).collect();
            assert_eq!(run(&store, &enc, &ids, &vec![true; t]).shape(), [t, 8]);
        }
    }

    #[test]
    fn fully_masked_is_rejected() {
        let (store, enc) = build(1, 7);
        let mut g = Graph::new(&store);
        assert!(matches!(
            enc.encode(&mut g, &[1, 2], &[0, 0], &[false, false]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn singleton_attention_returns_value_row() {
        let (store, enc) = build(1, 8);
        let mut g = Graph::new(&store);
        let x = g.tape.constant(Tensor::from_rows(&[[0.5, -1.0, 2.0, 0.0, 1.5, -0.5, 0.25, 1.0]]).unwrap());
        let layer = &enc.layers[0];
        let q = layer.query.forward(&mut g, x).unwrap();
        let k = layer.key.forward(&mut g, x).unwrap();
        let v = layer.value.forward(&mut g, x).unwrap();
        let a = self_attention(&mut g, q, k, v, 2, &[true]).unwrap();
        assert_eq!(g.tape.value(a), g.tape.value(v));
    }

    #[test]
    fn masked_positions_do_not_leak() {
        let (store, enc) = build(2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        for _ in 0..20 {
            let t = rng.random_range(2..=8);
            let valid = rng.random_range(1..t);
            let mask: Vec<bool> = (0..t).map(|i| i < valid).collect();
            let ids: Vec<usize> = (0..t).map(|_| rng.random_range(0..10)).collect();
            let mut other = ids.clone();
            for id in other.iter_mut().skip(valid) {
                *id = rng.random_range(0..10);
            }
            let a = run(&store, &enc, &ids, &mask);
            let b = run(&store, &enc, &other, &mask);
            for r in 0..valid {
                for (x, y) in a.row(r).iter().zip(b.row(r)) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn depth_and_order_matter() {
        let (s1, e1) = build(1, 10);
        let (s2, e2) = build(2, 10);
        let ids = [1, 2, 3, 4];
        assert_ne!(run(&s1, &e1, &ids, &[true; 4]), run(&s2, &e2, &ids, &[true; 4]));

        // permuting tokens is not the same as permuting outputs
        let a = run(&s2, &e2, &ids, &[true; 4]);
        let b = run(&s2, &e2, &[4, 3, 2, 1], &[true; 4]);
        assert!((0..4).any(|r| a.row(r) != b.row(3 - r)));
    }

    #[test]
    fn forward_is_deterministic() {
        let (store, enc) = build(2, 11);
        let ids = [1, 7, 3, 3, 9];
        assert_eq!(run(&store, &enc, &ids, &[true; 5]), run(&store, &enc, &ids, &[true; 5]));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (store, enc) = build(2, 12);
        let mut g = Graph::new(&store);
        let ids: Vec<usize> = (0..10).collect();
        let h = enc.encode(&mut g, &ids, &[0; 10], &[true; 10]).unwrap();
        let w = g
            .tape
            .constant(Tensor::matrix(10, 8, (0..80).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect()).unwrap());
        let prod = g.tape.mul(h, w).unwrap();
        let loss = g.tape.sum(prod);
        g.backward(loss).unwrap();
        for (id, p) in store.iter() {
            let grad = g.param_grads()[id.index()].clone().expect(&p.name);
            assert!(grad.data().iter().any(|&v| v != 0.0), "dead parameter {}", p.name);
        }
    }
}
