//! Step-based training with periodic dev-set model selection.

use std::fmt::Write as _;
use std::thread;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{self, Example, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{average, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// First step eligible for model selection.
    pub selection_start: usize,
    /// Dev F1 is measured at every multiple of this (and at `max_steps`).
    pub selection_every: usize,
    pub seeds: Vec<u64>,
    pub freeze_encoder: bool,
    pub dropout: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global-norm clipping threshold; `0` disables clipping.
    pub grad_clip: f64,
    pub min_freq: usize,
    /// Number of seeds trained concurrently by [`multi_seed_run`].
    pub parallel_seeds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            max_steps: 1500,
            selection_start: 1000,
            selection_every: 100,
            seeds: vec![1, 2, 3, 4, 5],
            freeze_encoder: false,
            dropout: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            min_freq: 1,
            parallel_seeds: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.selection_every == 0 {
            return bad("selection_every must be at least 1");
        }
        if self.selection_start > self.max_steps {
            return bad("selection_start must not exceed max_steps");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) || self.grad_clip < 0.0 {
            return bad("learning_rate must be positive and grad_clip non-negative");
        }
        if self.min_freq == 0 || self.parallel_seeds == 0 {
            return bad("min_freq and parallel_seeds must be at least 1");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            clip_norm: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }

    fn is_eval_point(&self, step: usize) -> bool {
        step.is_multiple_of(self.selection_every) || step == self.max_steps
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    /// Mean training loss over the steps since the previous row; absent at
    /// step 0.
    pub loss: Option<f64>,
    pub dev_f1: f64,
}

pub fn trajectory_csv(points: &[TrajectoryPoint]) -> String {
    let mut out = String::from("step,loss,dev_f1\n");
    for p in points {
        let loss = p.loss.map(|l| l.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{}", p.step, loss, p.dev_f1).expect("writing to a String");
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trajectory: Vec<TrajectoryPoint>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn model(&self) -> Result<Model> {
        self.checkpoint.to_model()
    }
}

/// Independent random streams derived from one seed: parameter init, data
/// order, dropout masks.
fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng, ChaCha8Rng) {
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    (stream(0), stream(1), stream(2))
}

/// Trains one model under `seed` and returns the best dev-F1 checkpoint.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    seed: u64,
    vocab: &Vocab,
    train_set: &[Example],
    dev_set: &[Example],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Config("training and dev sets must be non-empty".into()));
    }
    let (mut init_rng, mut data_rng, mut dropout_rng) = streams(seed);
    let mut model = Model::new(model_config, vocab.clone(), &mut init_rng)?;
    let max_len = model.config.encoder.max_len;
    corpus::check_lengths(train_set, max_len, "train")?;
    corpus::check_lengths(dev_set, max_len, "dev")?;
    model.set_encoder_frozen(config.freeze_encoder);

    let mut adam = Adam::new(&model.store, config.adam());
    let mut trajectory = Vec::new();
    let mut step_losses = Vec::with_capacity(config.max_steps);
    let mut best: Option<Checkpoint> = None;
    let mut window_start = 0;

    let mut record = |model: &Model, step: usize, losses: &[f64], window_start: &mut usize| -> Result<()> {
        let dev_f1 = model.evaluate(dev_set)?.f1;
        let window = &losses[*window_start..];
        let loss = (!window.is_empty()).then(|| window.iter().sum::<f64>() / window.len() as f64);
        *window_start = losses.len();
        trajectory.push(TrajectoryPoint { step, loss, dev_f1 });
        let better = best.as_ref().is_none_or(|b| dev_f1 > b.best_dev_f1);
        if step >= config.selection_start && better {
            best = Some(Checkpoint::capture(model, config, dev_f1, step, seed));
        }
        Ok(())
    };

    record(&model, 0, &step_losses, &mut window_start)?;
    let mut batches = Vec::new().into_iter();
    for step in 1..=config.max_steps {
        let b = match batches.next() {
            Some(b) => b,
            None => {
                let epoch_seed = data_rng.next_u64();
                batches = corpus::batch(train_set, vocab, config.batch_size, epoch_seed)?.into_iter();
                batches.next().expect("non-empty training set")
            }
        };
        let mut g = Graph::with_dropout(&model.store, config.dropout, &mut dropout_rng);
        let loss = model.batch_loss(&mut g, &b)?;
        let value = g.tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        g.backward(loss)?;
        let grads = g.param_grads();
        drop(g);
        adam.step(&mut model.store, &grads).map_err(|e| match e {
            Error::Divergence { loss, .. } => Error::Divergence { step, loss },
            e => e,
        })?;
        step_losses.push(value);
        if config.is_eval_point(step) {
            record(&model, step, &step_losses, &mut window_start)?;
        }
    }

    Ok(TrainOutcome {
        checkpoint: best.expect("max_steps is always a selection point"),
        trajectory,
        step_losses,
    })
}

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub outcome: TrainOutcome,
    /// Dev score of the selected checkpoint.
    pub dev: EvalReport,
    pub test: EvalReport,
}

#[derive(Clone, Debug)]
pub struct MultiSeedReport {
    pub per_seed: Vec<SeedResult>,
    pub mean_dev: EvalReport,
    pub mean_test: EvalReport,
}

fn run_seed(
    model_config: &ModelConfig,
    config: &TrainConfig,
    seed: u64,
    vocab: &Vocab,
    sets: [&[Example]; 3],
) -> Result<SeedResult> {
    let [train_set, dev_set, test_set] = sets;
    let outcome = train(model_config, config, seed, vocab, train_set, dev_set)?;
    let model = outcome.model()?;
    let dev = model.evaluate(dev_set)?;
    let test = model.evaluate(test_set)?;
    Ok(SeedResult {
        seed,
        outcome,
        dev,
        test,
    })
}

/// One model per configured seed; reports are ordered by seed index and
/// averaged arithmetically. Up to `parallel_seeds` seeds run at once.
pub fn multi_seed_run(
    model_config: &ModelConfig,
    config: &TrainConfig,
    vocab: &Vocab,
    train_set: &[Example],
    dev_set: &[Example],
    test_set: &[Example],
) -> Result<MultiSeedReport> {
    config.validate()?;
    let sets = [train_set, dev_set, test_set];
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for chunk in config.seeds.chunks(config.parallel_seeds) {
        if chunk.len() == 1 {
            per_seed.push(run_seed(model_config, config, chunk[0], vocab, sets)?);
            continue;
        }
        let results: Vec<Result<SeedResult>> = thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| s.spawn(move || run_seed(model_config, config, seed, vocab, sets)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        });
        for r in results {
            per_seed.push(r?);
        }
    }
    let mean_dev = average(&per_seed.iter().map(|r| r.dev).collect::<Vec<_>>());
    let mean_test = average(&per_seed.iter().map(|r| r.test).collect::<Vec<_>>());
    Ok(MultiSeedReport {
        per_seed,
        mean_dev,
        mean_test,
    })
}

#[derive(Clone, Debug)]
pub struct FrozenComparison {
    pub fine_tuned: MultiSeedReport,
    pub frozen: MultiSeedReport,
}

impl FrozenComparison {
    /// Paired per-seed table: `seed  fine_tuned_dev  frozen_dev  fine_tuned_test  frozen_test`.
    pub fn table(&self) -> String {
        let mut out = String::from("seed\tfine_tuned_dev_f1\tfrozen_dev_f1\tfine_tuned_test_f1\tfrozen_test_f1\n");
        for (a, b) in self.fine_tuned.per_seed.iter().zip(&self.frozen.per_seed) {
            writeln!(out, "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", a.seed, a.dev.f1, b.dev.f1, a.test.f1, b.test.f1)
                .expect("writing to a String");
        }
        let (a, b) = (&self.fine_tuned, &self.frozen);
        writeln!(
            out,
            "mean\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            a.mean_dev.f1, b.mean_dev.f1, a.mean_test.f1, b.mean_test.f1
        )
        .expect("writing to a String");
        out
    }
}

/// Runs [`multi_seed_run`] twice, differing only in `freeze_encoder`.
pub fn compare_frozen(
    model_config: &ModelConfig,
    config: &TrainConfig,
    vocab: &Vocab,
    train_set: &[Example],
    dev_set: &[Example],
    test_set: &[Example],
) -> Result<FrozenComparison> {
    let tuned = TrainConfig {
        freeze_encoder: false,
        ..config.clone()
    };
    let frozen = TrainConfig {
        freeze_encoder: true,
        ..config.clone()
    };
    Ok(FrozenComparison {
        fine_tuned: multi_seed_run(model_config, &tuned, vocab, train_set, dev_set, test_set)?,
        frozen: multi_seed_run(model_config, &frozen, vocab, train_set, dev_set, test_set)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::heads::{HeadConfig, HeadVariant};
    use crate::synth;

    fn small() -> (ModelConfig, TrainConfig, Vocab, Vec<Example>, Vec<Example>) {
        let train_set = synth::generate(12, 1);
        let dev_set = synth::generate(6, 2);
        let vocab = Vocab::build(&train_set, 1).unwrap();
        let model = ModelConfig {
            encoder: EncoderConfig {
                dim_h: 8,
                num_attn_heads: 2,
                ffn_dim: 16,
                num_layers: 1,
                ..Default::default()
            },
            head: HeadConfig {
                variant: HeadVariant::Linear,
                ..Default::default()
            },
        };
        let train = TrainConfig {
            max_steps: 25,
            selection_start: 10,
            selection_every: 5,
            batch_size: 4,
            seeds: vec![7],
            ..Default::default()
        };
        (model, train, vocab, train_set, dev_set)
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let (m, mut t, vocab, tr, dev) = small();
        t.max_steps = 0;
        t.selection_start = 0;
        let out = train(&m, &t, 3, &vocab, &tr, &dev).unwrap();
        assert_eq!(out.trajectory.len(), 1);
        assert!(out.step_losses.is_empty());
        let fresh = Model::new(&m, vocab.clone(), &mut streams(3).0).unwrap();
        assert_eq!(out.model().unwrap().store, fresh.store);
        assert_eq!(out.checkpoint.best_dev_f1, fresh.evaluate(&dev).unwrap().f1);
    }

    #[test]
    fn selection_points_and_argmax() {
        let (m, t, vocab, tr, dev) = small();
        let out = train(&m, &t, 3, &vocab, &tr, &dev).unwrap();
        let steps: Vec<usize> = out.trajectory.iter().map(|p| p.step).collect();
        assert_eq!(steps, vec![0, 5, 10, 15, 20, 25]);
        assert_eq!(out.step_losses.len(), 25);
        let best = out
            .trajectory
            .iter()
            .filter(|p| p.step >= t.selection_start)
            .map(|p| p.dev_f1)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.checkpoint.best_dev_f1, best);
        assert!(out.checkpoint.step >= t.selection_start);
        assert_eq!(out.model().unwrap().evaluate(&dev).unwrap().f1, best);
    }

    #[test]
    fn deterministic_per_seed() {
        let (m, t, vocab, tr, dev) = small();
        let a = train(&m, &t, 11, &vocab, &tr, &dev).unwrap();
        let b = train(&m, &t, 11, &vocab, &tr, &dev).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.trajectory, b.trajectory);
    }

    #[test]
    fn parallel_seeds_match_sequential() {
        let (m, mut t, vocab, tr, dev) = small();
        t.seeds = vec![1, 2, 1];
        let seq = multi_seed_run(&m, &t, &vocab, &tr, &dev, &dev).unwrap();
        t.parallel_seeds = 3;
        let par = multi_seed_run(&m, &t, &vocab, &tr, &dev, &dev).unwrap();
        for (a, b) in seq.per_seed.iter().zip(&par.per_seed) {
            assert_eq!(a.outcome.checkpoint.params, b.outcome.checkpoint.params);
            assert_eq!(a.outcome.trajectory, b.outcome.trajectory);
            assert_eq!(a.test, b.test);
        }
        assert_eq!(seq.per_seed[0].test, seq.per_seed[2].test);
        assert_eq!(seq.mean_test, par.mean_test);
    }

    #[test]
    fn frozen_encoder_is_untouched() {
        let (m, mut t, vocab, tr, dev) = small();
        t.freeze_encoder = true;
        t.selection_start = 25;
        let out = train(&m, &t, 4, &vocab, &tr, &dev).unwrap();
        let trained = out.model().unwrap();
        let fresh = Model::new(&m, vocab.clone(), &mut streams(4).0).unwrap();
        let mut head_changed = false;
        for ((_, a), (_, b)) in trained.store.iter().zip(fresh.store.iter()) {
            if a.name.starts_with(crate::encoder::PARAM_PREFIX) {
                assert_eq!(a.value, b.value, "{}", a.name);
            } else {
                head_changed |= a.value != b.value;
            }
        }
        assert!(head_changed);
    }

    #[test]
    fn invalid_configs() {
        let (m, t, vocab, tr, dev) = small();
        let cases = [
            TrainConfig { selection_start: 100, ..t.clone() },
            TrainConfig { selection_every: 0, ..t.clone() },
            TrainConfig { seeds: vec![], ..t.clone() },
            TrainConfig { dropout: 1.0, ..t.clone() },
        ];
        for c in cases {
            assert!(matches!(train(&m, &c, 1, &vocab, &tr, &dev), Err(Error::Config(_))));
        }
        assert!(train(&m, &t, 1, &vocab, &[], &dev).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let (m, mut t, vocab, tr, dev) = small();
        t.learning_rate = f64::MAX;
        t.grad_clip = 0.0;
        match train(&m, &t, 1, &vocab, &tr, &dev) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1 && step <= t.max_steps),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn csv_layout() {
        let pts = [
            TrajectoryPoint { step: 0, loss: None, dev_f1: 0.0 },
            TrajectoryPoint { step: 5, loss: Some(1.5), dev_f1: 0.25 },
        ];
        assert_eq!(trajectory_csv(&pts), "step,loss,dev_f1\n0,,0\n5,1.5,0.25\n");
    }
}
