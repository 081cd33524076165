//! Central finite-difference checks of the training-loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{make_batch, Example, Vocab};
use crate::crf::{self, BOUNDARY_SCORE};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::heads::{HeadConfig, HeadVariant};
use crate::model::{Model, ModelConfig};
use crate::params::Graph;
use crate::tagging::{AspectSpan, Sentiment, NUM_TAGS};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub dim_h: usize,
    pub seq_len: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is below the finite-difference noise are compared on an
    /// absolute scale.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            dim_h: 8,
            seq_len: 5,
            step: 1e-6,
            tolerance: 1e-4,
            floor: 1e-4,
            seed: 17,
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Location of the largest error, e.g. `head.gru.w_x[3]`.
    pub worst: String,
    pub passed: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<5} {:<14} entries={:<5} max_rel_err={:.3e} at {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_err,
            self.worst
        )
    }
}

struct Worst {
    err: f64,
    at: String,
    checked: usize,
}

impl Worst {
    fn new() -> Self {
        Worst {
            err: 0.0,
            at: "-".into(),
            checked: 0,
        }
    }

    fn see(&mut self, err: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        if err > self.err || err.is_nan() {
            self.err = err;
            self.at = at();
        }
    }

    fn finish(self, name: &str, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            checked: self.checked,
            max_rel_err: self.err,
            worst: self.at,
            passed: self.err < tolerance,
        }
    }
}

/// Two sentences, the second shorter so the batch carries padding.
fn fixture(cfg: &GradCheckConfig) -> Vec<Example> {
    let words = ["the", "food", "is", "great", "but", "service", "slow", "."];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sentence = |len: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
    };
    let t = cfg.seq_len;
    let short = t.saturating_sub(2).max(1);
    let a = sentence(t, &mut rng);
    let b = sentence(short, &mut rng);
    let spans_a = if t >= 4 {
        vec![AspectSpan::new(0, 0, Sentiment::Neu), AspectSpan::new(1, 2, Sentiment::Pos), AspectSpan::new(t - 1, t - 1, Sentiment::Neg)]
    } else {
        vec![AspectSpan::new(0, t - 1, Sentiment::Pos)]
    };
    let spans_b = if short >= 3 {
        vec![AspectSpan::new(0, 2, Sentiment::Neg)]
    } else {
        Vec::new()
    };
    vec![
        Example::new(a, spans_a).expect("fixture spans fit"),
        Example::new(b, spans_b).expect("fixture spans fit"),
    ]
}

fn model_for(variant: HeadVariant, cfg: &GradCheckConfig, vocab: Vocab) -> Result<Model> {
    let config = ModelConfig {
        encoder: EncoderConfig {
            vocab_size: vocab.len(),
            max_len: cfg.seq_len,
            num_layers: 2,
            dim_h: cfg.dim_h,
            num_attn_heads: 2,
            ffn_dim: 2 * cfg.dim_h,
            num_segments: 1,
            ln_eps: 1e-5,
            init_std: 0.5,
        },
        head: HeadConfig {
            variant,
            ..Default::default()
        },
    };
    Model::with_seed(&config, vocab, cfg.seed)
}

/// Compares the backward pass of the mean batch loss against central
/// differences for every parameter entry of an encoder + `variant` model.
pub fn check_model(variant: HeadVariant, cfg: &GradCheckConfig, corrupt: Option<&'static str>) -> Result<CheckResult> {
    let data = fixture(cfg);
    let vocab = Vocab::build(&data, 1)?;
    let mut model = model_for(variant, cfg, vocab)?;
    let batch = make_batch(&data, &[0, 1], &model.vocab);

    let analytic = {
        let mut g = Graph::new(&model.store);
        if let Some(op) = corrupt {
            g.tape.corrupt_backward(op);
        }
        let loss = model.batch_loss(&mut g, &batch)?;
        g.backward(loss)?;
        g.param_grads()
    };
    let loss_at = |m: &Model| -> Result<f64> {
        let mut g = Graph::new(&m.store);
        let l = m.batch_loss(&mut g, &batch)?;
        Ok(g.tape.value(l).item())
    };

    let mut worst = Worst::new();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let n = model.store.value(id).numel();
        let grad = analytic[id.index()].as_ref().map(|t| t.data().to_vec()).unwrap_or(vec![0.0; n]);
        for k in 0..n {
            let x0 = model.store.value(id).data()[k];
            model.store.value_mut(id).data_mut()[k] = x0 + cfg.step;
            let up = loss_at(&model)?;
            model.store.value_mut(id).data_mut()[k] = x0 - cfg.step;
            let down = loss_at(&model)?;
            model.store.value_mut(id).data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * cfg.step);
            let err = relative_error(grad[k], numeric, cfg.floor);
            worst.see(err, || format!("{}[{k}]", model.store.get(id).name));
        }
    }
    Ok(worst.finish(variant.as_str(), cfg.tolerance))
}

/// Gradient of the CRF negative log-likelihood with respect to a free
/// emission matrix `[T × 13]` and the transition matrix.
pub fn check_crf_inputs(cfg: &GradCheckConfig, corrupt: Option<&'static str>) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc4f);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let t = cfg.seq_len;
    let k = NUM_TAGS;
    let em = Tensor::new(vec![t, k], (0..t * k).map(|_| normal.sample(&mut rng)).collect())?;
    let mut trans = Tensor::new(vec![k + 2, k + 2], (0..(k + 2) * (k + 2)).map(|_| normal.sample(&mut rng)).collect())?;
    for i in 0..k + 2 {
        trans.set(i, crf::start_state(k), BOUNDARY_SCORE);
        trans.set(crf::stop_state(k), i, BOUNDARY_SCORE);
    }
    let gold: Vec<usize> = (0..t).map(|_| rng.random_range(0..k)).collect();

    let mut tape = Tape::new();
    if let Some(op) = corrupt {
        tape.corrupt_backward(op);
    }
    let e = tape.param(em.clone());
    let a = tape.param(trans.clone());
    let loss = crf::crf_nll(&mut tape, e, a, &gold)?;
    tape.backward(loss)?;
    let grads = [tape.grad(e).expect("emission gradient"), tape.grad(a).expect("transition gradient")];

    let mut worst = Worst::new();
    let mut inputs = [em, trans];
    for (which, name) in ["emissions", "transitions"].iter().enumerate() {
        for idx in 0..inputs[which].numel() {
            let x0 = inputs[which].data()[idx];
            let mut eval = |x: f64| -> Result<f64> {
                inputs[which].data_mut()[idx] = x;
                let (em, tr) = (&inputs[0], &inputs[1]);
                Ok(crf::log_partition(em, tr)? - crf::sequence_score(em, tr, &gold)?)
            };
            let up = eval(x0 + cfg.step)?;
            let down = eval(x0 - cfg.step)?;
            inputs[which].data_mut()[idx] = x0;
            let numeric = (up - down) / (2.0 * cfg.step);
            let err = relative_error(grads[which].data()[idx], numeric, cfg.floor);
            worst.see(err, || format!("{name}[{idx}]"));
        }
    }
    Ok(worst.finish("crf-inputs", cfg.tolerance))
}

/// Every head through the full model, then the CRF inputs on their own.
pub fn run_suite(cfg: &GradCheckConfig, corrupt: Option<&'static str>) -> Result<Vec<CheckResult>> {
    let mut out = HeadVariant::ALL
        .into_iter()
        .map(|v| check_model(v, cfg, corrupt))
        .collect::<Result<Vec<_>>>()?;
    out.push(check_crf_inputs(cfg, corrupt)?);
    Ok(out)
}
