//! Span-level micro-averaged precision, recall and F1.
//!
//! A predicted span is correct only when start, end and sentiment all match
//! a gold span of the same sentence. Counts are pooled over the corpus.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tagging::AspectSpan;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalReport {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    /// `key=value` lines with full precision.
    pub fn key_values(&self) -> String {
        format!(
            "tp={}\nfp={}\nfn={}\nprecision={}\nrecall={}\nf1={}\n",
            self.tp, self.fp, self.fn_, self.precision, self.recall, self.f1
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P={:.4} R={:.4} F1={:.4}", self.precision, self.recall, self.f1)
    }
}

pub fn micro_prf<G, P>(gold: &[G], pred: &[P]) -> Result<EvalReport>
where
    G: AsRef<[AspectSpan]>,
    P: AsRef<[AspectSpan]>,
{
    if gold.len() != pred.len() {
        return Err(Error::contract(format!(
            "gold has {} sentences but prediction has {}",
            gold.len(),
            pred.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let g: BTreeSet<_> = g.as_ref().iter().collect();
        let p: BTreeSet<_> = p.as_ref().iter().collect();
        let hit = p.intersection(&g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(EvalReport::from_counts(tp, fp, fn_))
}

/// Elementwise mean of several reports; counts are summed.
pub fn average(reports: &[EvalReport]) -> EvalReport {
    let n = reports.len().max(1) as f64;
    let mut out = EvalReport::default();
    for r in reports {
        out.tp += r.tp;
        out.fp += r.fp;
        out.fn_ += r.fn_;
        out.precision += r.precision;
        out.recall += r.recall;
        out.f1 += r.f1;
    }
    out.precision /= n;
    out.recall /= n;
    out.f1 /= n;
    out
}
