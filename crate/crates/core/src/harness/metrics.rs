use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Dataset, ModalBatch};
use crate::error::Result;
use crate::model::{forward_batch, Urmf};
use crate::uncertainty::JointMode;

/// Samples per inference forward pass.
const EVAL_CHUNK: usize = 512;

/// Binary confusion counts with class 1 as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(preds: &[usize], labels: &[usize]) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in preds.iter().zip(labels) {
            match (p == 1, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// `tp / (tp + fp)`, or 0 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `tp / (tp + fn)`, or 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall, or 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean_where(values: &[f64], mask: &[bool], want: bool) -> Option<f64> {
    let picked: Vec<f64> = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == want)
        .map(|(&v, _)| v)
        .collect();
    if picked.is_empty() {
        None
    } else {
        Some(picked.iter().sum::<f64>() / picked.len() as f64)
    }
}

/// Mean fusion weights overall and split by whether a sample had any input
/// corrupted. Subgroup means are `None` for empty subgroups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub alpha_f: f64,
    pub alpha_i: f64,
    pub alpha_f_corrupted: Option<f64>,
    pub alpha_f_clean: Option<f64>,
    pub alpha_i_corrupted: Option<f64>,
    pub alpha_i_clean: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub alpha: AlphaSummary,
}

/// Per-sample inference outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub preds: Vec<usize>,
    /// Probability of class 1.
    pub prob_positive: Vec<f64>,
    pub alpha_f: Vec<f64>,
    pub alpha_i: Vec<f64>,
}

/// Inference-mode forward over `batch`, in chunks.
pub fn predict(model: &Urmf, batch: &ModalBatch) -> Result<Predictions> {
    let mut out = Predictions {
        preds: Vec::with_capacity(batch.len()),
        prob_positive: Vec::with_capacity(batch.len()),
        alpha_f: Vec::with_capacity(batch.len()),
        alpha_i: Vec::with_capacity(batch.len()),
    };
    let mut tape = Tape::new();
    let mut start = 0;
    while start < batch.len() {
        let len = EVAL_CHUNK.min(batch.len() - start);
        let chunk = batch.slice(start, len);
        tape.reset();
        let binds = model.store().bind_frozen(&mut tape);
        let trace = forward_batch(&mut tape, model, &binds, &chunk, JointMode::Infer)?;
        let probs = tape.value(trace.joint.probs);
        for r in 0..len {
            let row = probs.row(r);
            out.preds.push(usize::from(row[1] > row[0]));
            out.prob_positive.push(row[1]);
        }
        out.alpha_f
            .extend_from_slice(tape.value(trace.fusion.alpha_f).data());
        out.alpha_i
            .extend_from_slice(tape.value(trace.fusion.alpha_i).data());
        start += len;
    }
    Ok(out)
}

pub fn report(pred: &Predictions, batch: &ModalBatch) -> MetricsReport {
    let c = Confusion::from_predictions(&pred.preds, &batch.labels);
    let corrupted: Vec<bool> = batch
        .corrupted_text
        .iter()
        .zip(&batch.corrupted_image)
        .map(|(&t, &i)| t || i)
        .collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    MetricsReport {
        samples: batch.len(),
        accuracy: c.accuracy(),
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        alpha: AlphaSummary {
            alpha_f: mean(&pred.alpha_f),
            alpha_i: mean(&pred.alpha_i),
            alpha_f_corrupted: mean_where(&pred.alpha_f, &corrupted, true),
            alpha_f_clean: mean_where(&pred.alpha_f, &corrupted, false),
            alpha_i_corrupted: mean_where(&pred.alpha_i, &corrupted, true),
            alpha_i_clean: mean_where(&pred.alpha_i, &corrupted, false),
        },
    }
}

pub fn evaluate_batch(model: &Urmf, batch: &ModalBatch) -> Result<MetricsReport> {
    Ok(report(&predict(model, batch)?, batch))
}

/// Infer-mode metrics over the whole dataset.
pub fn evaluate(model: &Urmf, dataset: &Dataset) -> Result<MetricsReport> {
    evaluate_batch(model, &dataset.full_batch())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_confusion_matrix() {
        let c = Confusion::from_predictions(&[1, 1, 0, 0], &[1, 0, 0, 1]);
        assert_eq!(
            c,
            Confusion {
                tp: 1,
                fp: 1,
                fn_: 1,
                tn: 1
            }
        );
        assert_eq!(
            (c.accuracy(), c.precision(), c.recall(), c.f1()),
            (0.5, 0.5, 0.5, 0.5)
        );
    }

    #[test]
    fn perfect_and_all_negative() {
        let c = Confusion::from_predictions(&[1, 0, 1], &[1, 0, 1]);
        assert_eq!(
            (c.accuracy(), c.precision(), c.recall(), c.f1()),
            (1.0, 1.0, 1.0, 1.0)
        );
        let c = Confusion::from_predictions(&[0, 0, 0], &[1, 0, 1]);
        assert_eq!((c.recall(), c.f1(), c.precision()), (0.0, 0.0, 0.0));
    }

    proptest! {
        #[test]
        fn metric_identities(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..60)) {
            let (preds, labels): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let c = Confusion::from_predictions(&preds, &labels);
            let direct = preds.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / preds.len() as f64;
            prop_assert_eq!(c.accuracy(), direct);
            for m in [c.accuracy(), c.precision(), c.recall(), c.f1()] {
                prop_assert!((0.0..=1.0).contains(&m));
            }
            let (p, r) = (c.precision(), c.recall());
            if p + r > 0.0 {
                prop_assert!((c.f1() - 2.0 * p * r / (p + r)).abs() < 1e-15);
            } else {
                prop_assert_eq!(c.f1(), 0.0);
            }
        }
    }
}
