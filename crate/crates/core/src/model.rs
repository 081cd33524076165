//! Encoder plus tagging head over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Example, Vocab};
use crate::encoder::{self, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::evaluation::{micro_prf, EvalReport};
use crate::heads::{Head, HeadConfig};
use crate::params::{Graph, ParamStore};
use crate::tagging::{repair, tags_from_indices, tags_to_spans, AspectSpan, Tag};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: Head,
}

impl Model {
    /// Fresh model; `encoder.vocab_size` is taken from `vocab`.
    pub fn new(config: &ModelConfig, vocab: Vocab, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut config = config.clone();
        config.encoder.vocab_size = vocab.len();
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config.encoder, rng)?;
        let e = &config.encoder;
        let head = Head::new(&mut store, &config.head, e.dim_h, e.ln_eps, e.init_std, rng)?;
        Ok(Model {
            config,
            vocab,
            store,
            encoder,
            head,
        })
    }

    pub fn with_seed(config: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        Model::new(config, vocab, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.store.set_trainable_prefix(encoder::PARAM_PREFIX, !frozen);
    }

    /// Tag scores for one sentence given as token ids (padded or not).
    pub fn forward(&self, g: &mut Graph, token_ids: &[usize], mask: &[bool]) -> Result<Var> {
        let segments = vec![0; token_ids.len()];
        let h = self.encoder.encode(g, token_ids, &segments, mask)?;
        let h = g.dropout(h)?;
        self.head.scores(g, h, mask)
    }

    /// Mean per-sentence loss over a padded batch.
    pub fn batch_loss(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut total: Option<Var> = None;
        for i in 0..batch.len() {
            let scores = self.forward(g, &batch.token_ids[i], &batch.mask[i])?;
            let gold = &batch.tag_ids[i][..batch.lengths[i]];
            let loss = self.head.loss(g, scores, gold)?;
            total = Some(match total {
                Some(t) => g.tape.add(t, loss)?,
                None => loss,
            });
        }
        let total = total.expect("non-empty batch");
        Ok(g.tape.scale(total, 1.0 / batch.len() as f64))
    }

    /// Unpadded score matrix for one sentence.
    pub fn scores(&self, tokens: &[String]) -> Result<Tensor> {
        let ids = self.vocab.encode(tokens);
        let mask = vec![true; ids.len()];
        let mut g = Graph::new(&self.store);
        let s = self.forward(&mut g, &ids, &mask)?;
        Ok(g.tape.value(s).clone())
    }

    /// Decoded and repaired tag sequence; always valid.
    pub fn predict_tags(&self, tokens: &[String]) -> Result<Vec<Tag>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let scores = self.scores(tokens)?;
        let raw = self.head.decode(&self.store, &scores)?;
        Ok(repair(&tags_from_indices(&raw)?))
    }

    pub fn predict_spans(&self, tokens: &[String]) -> Result<Vec<AspectSpan>> {
        tags_to_spans(&self.predict_tags(tokens)?)
    }

    pub fn evaluate(&self, examples: &[Example]) -> Result<EvalReport> {
        let pred = examples
            .iter()
            .map(|e| self.predict_spans(&e.tokens))
            .collect::<Result<Vec<_>>>()?;
        let gold: Vec<&[AspectSpan]> = examples.iter().map(|e| e.spans.as_slice()).collect();
        micro_prf(&gold, &pred)
    }
}
