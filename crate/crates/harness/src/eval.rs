//! Accuracy metrics, evaluation passes and ensembling.

use wsnn_core::data::{LabeledDataset, NormalizationStats, NUM_CLASSES};
use wsnn_core::losses::{mse, nll, LossKind, LossOutput};
use wsnn_core::nn::{Layer, Sequential};
use wsnn_core::tensor::Element;
use wsnn_core::Tensor;

use crate::datasets::{chunks, range_batch};
use crate::error::{HarnessError, Result};

/// Training objective on log-probabilities. The gradient is with respect to
/// `logp`; for MSE the loss is taken on the probabilities `exp(logp)` against
/// one-hot targets.
pub fn objective<T: Element>(kind: LossKind, logp: &Tensor<T>, targets: &[usize]) -> Result<LossOutput<T>> {
    match kind {
        LossKind::Mse => {
            let p = logp.map(|v| v.exp());
            let mut y = p.zeros_like();
            let c = p.shape()[1];
            for (i, &t) in targets.iter().enumerate() {
                if t >= c {
                    return Err(wsnn_core::Error::IndexOutOfRange {
                        what: "class index",
                        index: t,
                        size: c,
                    }
                    .into());
                }
                y.outer_mut(i)[t] = T::one();
            }
            let out = mse(&p, &y)?;
            let grad = Tensor::from_vec(
                p.shape(),
                out.grad
                    .as_slice()
                    .iter()
                    .zip(p.as_slice())
                    .map(|(&g, &q)| g * q)
                    .collect(),
            )?;
            Ok(LossOutput { value: out.value, grad })
        }
        LossKind::CrossEntropy => Ok(nll(logp, targets)?),
        LossKind::MultilabelEntropy => Err(HarnessError::Config("multilabel loss needs multi-label targets".into())),
    }
}

/// Rank of `target` among the scores of one row: the number of classes with a
/// higher score, plus the number of lower-indexed classes with an equal score.
fn rank_of(row: &[f64], target: usize) -> usize {
    let s = row[target];
    row.iter()
        .enumerate()
        .filter(|&(c, &v)| v > s || (v == s && c < target))
        .count()
}

/// Top-k accuracy in percent. Ties go to the lower class index.
pub fn top_k(scores: &Tensor<f64>, labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &t)| rank_of(scores.outer(i), t) < k)
        .count();
    100.0 * hits as f64 / labels.len() as f64
}

/// Index of the largest value, the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Average precision of one ranking: items are sorted by descending score
/// (ties by ascending index) and precision is averaged over the positives'
/// ranks. `None` when there are no positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean over classes (with at least one positive) of the one-vs-rest AP, in percent.
pub fn mean_ap(scores: &Tensor<f64>, labels: &[usize]) -> f64 {
    let c = scores.shape()[1];
    let aps: Vec<f64> = (0..c)
        .filter_map(|k| {
            let col: Vec<f64> = (0..labels.len()).map(|i| scores.outer(i)[k]).collect();
            let pos: Vec<bool> = labels.iter().map(|&t| t == k).collect();
            average_precision(&col, &pos)
        })
        .collect();
    if aps.is_empty() {
        return 0.0;
    }
    100.0 * aps.iter().sum::<f64>() / aps.len() as f64
}

/// Result of an evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub mean_ap: f64,
    /// Per-item model output (log-probabilities), `N×10`.
    pub scores: Tensor<f64>,
    pub labels: Vec<usize>,
}

/// Eval-mode forward pass over the whole dataset in chunks of `batch`.
/// The model is put back into training mode afterwards.
pub fn evaluate<T: Element>(
    model: &mut Sequential<T>,
    ds: &LabeledDataset,
    batch: usize,
    loss: LossKind,
    norm: Option<&NormalizationStats>,
) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(HarnessError::Config("evaluation dataset is empty".into()));
    }
    model.set_training(false);
    let result = (|| {
        let mut scores = Vec::with_capacity(ds.len() * NUM_CLASSES);
        let mut labels = Vec::with_capacity(ds.len());
        let mut loss_sum = 0.0;
        for r in chunks(ds.len(), batch) {
            let (mut x, y) = range_batch::<T>(ds, r.clone())?;
            if let Some(n) = norm {
                x = n.normalize(&x);
            }
            let out = model.forward(&x)?;
            if out.rank() != 2 || out.shape()[1] != NUM_CLASSES {
                return Err(HarnessError::CheckpointMismatch(format!(
                    "model emits {:?}, expected B×{NUM_CLASSES}",
                    out.shape()
                )));
            }
            loss_sum += objective(loss, &out, &y)?.value.to_f64().unwrap_or(f64::NAN) * r.len() as f64;
            scores.extend(out.as_slice().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
            labels.extend(y);
        }
        let scores = Tensor::from_vec(&[labels.len(), NUM_CLASSES], scores)?;
        Ok(Evaluation {
            loss: loss_sum / labels.len() as f64,
            top1: top_k(&scores, &labels, 1),
            top5: top_k(&scores, &labels, 5),
            mean_ap: mean_ap(&scores, &labels),
            scores,
            labels,
        })
    })();
    model.set_training(true);
    result
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleMode {
    /// Plurality of per-model argmax, ties to the lowest class.
    Vote,
    /// Argmax of the averaged scores.
    MeanLogit,
}

impl std::str::FromStr for EnsembleMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vote" => Ok(Self::Vote),
            "mean_logit" => Ok(Self::MeanLogit),
            other => Err(HarnessError::Config(format!("unknown ensemble mode '{other}'"))),
        }
    }
}

/// Class priors of the training and target distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorCorrection {
    pub train: Vec<f64>,
    pub target: Vec<f64>,
}

impl PriorCorrection {
    pub fn validate(&self, classes: usize) -> Result<()> {
        for (name, p) in [("train", &self.train), ("target", &self.target)] {
            if p.len() != classes {
                return Err(HarnessError::Config(format!("{name} priors need {classes} entries")));
            }
            if p.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(HarnessError::Config(format!("{name} priors must be strictly positive")));
            }
            if (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(HarnessError::Config(format!("{name} priors must sum to 1")));
            }
        }
        Ok(())
    }

    /// Empirical class frequencies of `labels`, with a floor so every prior
    /// stays positive.
    pub fn frequencies(labels: &[u8], classes: usize) -> Vec<f64> {
        let mut counts = vec![0.5f64; classes];
        for &l in labels {
            counts[l as usize] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        counts.iter().map(|c| c / total).collect()
    }
}

/// Combines per-model scores (log-probabilities, `N×C` each).
///
/// With a prior correction each model's scores become
/// `log p_c + log target_c − log train_c` before voting or averaging, which
/// is the log of `p_c · target_c / train_c` up to a per-row constant.
pub fn ensemble_predict(
    model_scores: &[Tensor<f64>],
    mode: EnsembleMode,
    priors: Option<&PriorCorrection>,
) -> Result<Vec<usize>> {
    let first = model_scores
        .first()
        .ok_or_else(|| HarnessError::Config("ensemble needs at least one model".into()))?;
    let (n, c) = (first.shape()[0], first.shape()[1]);
    if model_scores.iter().any(|s| s.shape() != first.shape()) {
        return Err(HarnessError::Config("ensemble members disagree on output shape".into()));
    }
    let shift: Vec<f64> = match priors {
        Some(p) => {
            p.validate(c)?;
            p.target.iter().zip(&p.train).map(|(t, r)| t.ln() - r.ln()).collect()
        }
        None => vec![0.0; c],
    };
    let corrected =
        |s: &Tensor<f64>, i: usize| -> Vec<f64> { s.outer(i).iter().zip(&shift).map(|(v, d)| v + d).collect() };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let pred = match mode {
            EnsembleMode::Vote => {
                let mut votes = vec![0.0; c];
                for s in model_scores {
                    votes[argmax(&corrected(s, i))] += 1.0;
                }
                argmax(&votes)
            }
            EnsembleMode::MeanLogit => {
                let mut mean = vec![0.0; c];
                for s in model_scores {
                    for (m, v) in mean.iter_mut().zip(corrected(s, i)) {
                        *m += v;
                    }
                }
                argmax(&mean)
            }
        };
        out.push(pred);
    }
    Ok(out)
}

/// Percentage of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_vec(&[rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    #[test]
    fn perfect_predictor_scores_full_marks() {
        let s = t(&[&[5.0, 0.0, 0.0], &[0.0, 5.0, 0.0], &[0.0, 0.0, 5.0]]);
        assert_eq!(top_k(&s, &[0, 1, 2], 1), 100.0);
        assert_eq!(top_k(&s, &[0, 1, 2], 5), 100.0);
        assert_eq!(mean_ap(&s, &[0, 1, 2]), 100.0);
    }

    #[test]
    fn uniform_scores_credit_only_class_zero() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let s = Tensor::zeros(&[100, 10]).unwrap();
        assert_eq!(top_k(&s, &labels, 1), 10.0);
        assert_eq!(top_k(&s, &labels, 5), 50.0);
    }

    #[test]
    fn average_precision_by_hand() {
        // Ranking: items 2 (+), 0 (−), 3 (+), 1 (−): (1/1 + 2/3) / 2.
        let ap = average_precision(&[0.8, 0.1, 0.9, 0.5], &[false, false, true, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        // Tie between items 0 and 1 resolves by index: 0 (−) before 1 (+).
        let ap = average_precision(&[0.5, 0.5], &[false, true]).unwrap();
        assert!((ap - 0.5).abs() < 1e-15);
        assert_eq!(average_precision(&[0.5], &[false]), None);
    }

    #[test]
    fn single_model_ensemble_is_argmax() {
        let s = t(&[&[0.1, 0.7, 0.2], &[0.5, 0.4, 0.1], &[0.2, 0.2, 0.6]]);
        let p = ensemble_predict(&[s.clone()], EnsembleMode::Vote, None).unwrap();
        assert_eq!(p, vec![1, 0, 2]);
        assert_eq!(ensemble_predict(&[s], EnsembleMode::MeanLogit, None).unwrap(), p);
    }

    #[test]
    fn uniform_priors_do_not_change_predictions() {
        let s = t(&[&[0.1, 0.7, 0.2], &[0.5, 0.4, 0.1]]);
        let flat = PriorCorrection {
            train: vec![1.0 / 3.0; 3],
            target: vec![1.0 / 3.0; 3],
        };
        assert_eq!(
            ensemble_predict(&[s.clone()], EnsembleMode::Vote, Some(&flat)).unwrap(),
            ensemble_predict(&[s], EnsembleMode::Vote, None).unwrap()
        );
    }

    #[test]
    fn majority_wins_and_ties_go_low() {
        let a = t(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        let b = t(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let c = t(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        let p = ensemble_predict(&[a, b, c], EnsembleMode::Vote, None).unwrap();
        assert_eq!(p, vec![0, 0]);
    }

    #[test]
    fn invalid_priors_are_rejected() {
        let s = t(&[&[0.1, 0.9]]);
        for (train, target) in [(vec![0.5, 0.5], vec![1.0, 0.0]), (vec![0.2, 0.2], vec![0.5, 0.5])] {
            let p = PriorCorrection { train, target };
            assert!(ensemble_predict(&[s.clone()], EnsembleMode::Vote, Some(&p)).is_err());
        }
    }

    #[test]
    fn mse_objective_matches_finite_differences() {
        let logp = wsnn_core::nn::log_softmax_rows(&t(&[&[0.3, -1.0, 0.5], &[2.0, 0.1, -0.4]])).unwrap();
        let targets = [2, 0];
        let g = objective(LossKind::Mse, &logp, &targets).unwrap().grad;
        let h = 1e-6;
        for i in 0..logp.len() {
            let mut p = logp.clone();
            p.as_mut_slice()[i] += h;
            let mut m = logp.clone();
            m.as_mut_slice()[i] -= h;
            let fd = (objective(LossKind::Mse, &p, &targets).unwrap().value
                - objective(LossKind::Mse, &m, &targets).unwrap().value)
                / (2.0 * h);
            assert!((fd - g.as_slice()[i]).abs() < 1e-8);
        }
    }
}
