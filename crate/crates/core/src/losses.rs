//! Supervised contrastive and categorical cross-entropy losses.
//!
//! The supervised contrastive loss over a batch of embeddings z_i with class
//! labels y_i is
//!
//! ```text
//! L_SC = sum_{i : |P(i)| > 0} (-1 / |P(i)|) sum_{p in P(i)}
//!            log( exp(z_i . z_p / tau) / sum_{a in A(i)} exp(z_i . z_a / tau) )
//! ```
//!
//! with A(i) every index except i and P(i) the same-label subset of A(i).
//! Anchors without positives are skipped and counted; a batch where every
//! anchor is skipped yields a flagged zero instead of an error so odd small
//! batches do not abort training.
//!
//! Cross entropy over probability rows and one-hot targets is
//! `-(1/N) sum_i sum_j y_ij ln max(p_ij, 1e-12)`; the clamp keeps the loss
//! finite under saturated softmax outputs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit-norm invariant of incoming embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Probability floor inside the cross-entropy logarithm.
pub const CE_PROB_FLOOR: f64 = 1e-12;

/// Tolerance on probability rows summing to one.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SupConConfig {
    pub temperature: f64,
}

impl Default for SupConConfig {
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

impl SupConConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Argument(format!(
                "temperature must be a positive finite real, got {temperature}"
            )));
        }
        Ok(Self { temperature })
    }
}

/// A batch of unit-norm embeddings with class labels.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    embeddings: Array2<f64>,
    labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let n = embeddings.nrows();
        if n < 2 {
            return Err(Error::Argument(format!("batch size must be >= 2, got {n}")));
        }
        if labels.len() != n {
            return Err(Error::Argument(format!(
                "label count {} does not match batch size {n}",
                labels.len()
            )));
        }
        for (i, row) in embeddings.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Argument(format!("embedding {i} contains non-finite values")));
            }
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::Argument(format!("embedding {i} has zero norm")));
            }
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Argument(format!(
                    "embedding {i} is not unit-norm (norm = {norm})"
                )));
            }
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Result of a supervised-contrastive evaluation.
#[derive(Debug, Clone, Copy)]
pub struct SupConOutput {
    pub loss: f64,
    /// Number of anchors skipped because they had no positives.
    pub skipped_anchors: usize,
    /// True when every anchor was skipped (loss defined as zero).
    pub positive_free: bool,
}

/// Supervised contrastive loss over a validated batch.
pub fn supcon_loss(batch: &EmbeddingBatch, config: &SupConConfig) -> Result<SupConOutput> {
    SupConConfig::new(config.temperature)?;
    let (loss, grad, skipped) =
        supcon_value_and_grad(batch.embeddings(), batch.labels(), config.temperature);
    drop(grad);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("supervised contrastive loss is not finite: {loss}")));
    }
    Ok(SupConOutput {
        loss,
        skipped_anchors: skipped,
        positive_free: skipped == batch.len(),
    })
}

/// Core supervised-contrastive math on raw embeddings.
///
/// Works on any finite embeddings (unit-norm validation happens at the
/// [`EmbeddingBatch`] boundary) so it can be probed by finite differences.
/// Per-anchor logits are max-subtracted before exponentiation. Returns the
/// loss, its gradient w.r.t. the embeddings, and the skipped-anchor count.
pub fn supcon_value_and_grad(
    embeddings: ArrayView2<'_, f64>,
    labels: &[usize],
    temperature: f64,
) -> (f64, Array2<f64>, usize) {
    let n = embeddings.nrows();
    let dim = embeddings.ncols();
    assert_eq!(labels.len(), n, "labels must match batch size");
    assert!(temperature > 0.0, "temperature must be positive");

    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, dim));
    let mut skipped = 0usize;

    for i in 0..n {
        let positives: Vec<usize> =
            (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        let others: Vec<usize> = (0..n).filter(|&a| a != i).collect();
        let zi = embeddings.row(i);

        let logits: Vec<f64> =
            others.iter().map(|&a| zi.dot(&embeddings.row(a)) / temperature).collect();
        let max_logit = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max_logit).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let lse = max_logit + denom.ln();

        let inv_p = 1.0 / positives.len() as f64;
        for &p in &positives {
            let idx = others.iter().position(|&a| a == p).expect("p is in A(i)");
            loss -= inv_p * (logits[idx] - lse);
        }

        // d(loss_i)/d(logit_a) = softmax_a - [a in P(i)]/|P(i)|
        for (k, &a) in others.iter().enumerate() {
            let softmax_k = exps[k] / denom;
            let is_positive = labels[a] == labels[i];
            let coeff = softmax_k - if is_positive { inv_p } else { 0.0 };
            let scale = coeff / temperature;
            let za = embeddings.row(a);
            for d in 0..dim {
                grad[[i, d]] += scale * za[d];
                grad[[a, d]] += scale * zi[d];
            }
        }
    }

    (loss, grad, skipped)
}

/// A batch of predicted probability rows with one-hot targets.
#[derive(Debug, Clone)]
pub struct PredictionBatch {
    probabilities: Array2<f64>,
    targets: Array2<f64>,
}

impl PredictionBatch {
    pub fn new(probabilities: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        let n = probabilities.nrows();
        if n == 0 {
            return Err(Error::Argument("prediction batch is empty".into()));
        }
        if targets.dim() != probabilities.dim() {
            return Err(Error::Argument(format!(
                "target shape {:?} does not match predictions {:?}",
                targets.dim(),
                probabilities.dim()
            )));
        }
        for (i, row) in probabilities.rows().into_iter().enumerate() {
            if row.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::Argument(format!(
                    "probability row {i} has negative or non-finite entries"
                )));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Argument(format!(
                    "probability row {i} sums to {sum}, not 1 within {SIMPLEX_TOL}"
                )));
            }
        }
        for (i, row) in targets.rows().into_iter().enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != row.len() - 1 {
                return Err(Error::Argument(format!("target row {i} is not one-hot")));
            }
        }
        Ok(Self { probabilities, targets })
    }

    /// Builds one-hot targets from class indices.
    pub fn from_class_ids(
        probabilities: Array2<f64>,
        classes: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if classes.len() != probabilities.nrows() {
            return Err(Error::Argument(format!(
                "class count {} does not match batch size {}",
                classes.len(),
                probabilities.nrows()
            )));
        }
        let mut targets = Array2::zeros((classes.len(), num_classes));
        for (i, &c) in classes.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::Argument(format!(
                    "class id {c} out of range for {num_classes} classes"
                )));
            }
            targets[[i, c]] = 1.0;
        }
        Self::new(probabilities, targets)
    }

    pub fn len(&self) -> usize {
        self.probabilities.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn probabilities(&self) -> ArrayView2<'_, f64> {
        self.probabilities.view()
    }

    pub fn targets(&self) -> ArrayView2<'_, f64> {
        self.targets.view()
    }
}

/// Mean cross entropy over a validated batch.
pub fn cross_entropy_loss(batch: &PredictionBatch) -> Result<f64> {
    let (loss, _) = cross_entropy_value_and_grad(batch.probabilities(), batch.targets());
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("cross entropy is not finite: {loss}")));
    }
    Ok(loss)
}

/// Core cross-entropy math on raw probability rows.
///
/// Assumes non-negative entries; simplex validation happens at the
/// [`PredictionBatch`] boundary so the function can be probed by finite
/// differences. Entries at or below the clamp floor contribute a constant
/// (zero gradient).
pub fn cross_entropy_value_and_grad(
    probabilities: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> (f64, Array2<f64>) {
    let n = probabilities.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(probabilities.dim());
    for ((i, j), &y) in targets.indexed_iter() {
        if y == 0.0 {
            continue;
        }
        let p = probabilities[[i, j]];
        if p > CE_PROB_FLOOR {
            loss -= y * p.ln();
            grad[[i, j]] = -y / (n * p);
        } else {
            loss -= y * CE_PROB_FLOOR.ln();
        }
    }
    (loss / n, grad)
}

/// Gradient of the mean cross entropy w.r.t. pre-softmax logits for one
/// sample: (p - y) / N. Used by the stage-2 trainer where softmax and cross
/// entropy compose.
pub fn softmax_cross_entropy_logit_grad(
    probabilities: ArrayView1<'_, f64>,
    target_class: usize,
    batch_size: usize,
) -> Array1<f64> {
    let mut g = probabilities.to_owned();
    g[target_class] -= 1.0;
    g / batch_size as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn unit_rows(rows: &[Vec<f64>]) -> Array2<f64> {
        let dim = rows[0].len();
        let mut out = Array2::zeros((rows.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, &v) in r.iter().enumerate() {
                out[[i, j]] = if norm == 0.0 { v } else { v / norm };
            }
        }
        out
    }

    #[test]
    fn identical_positive_pair_has_zero_loss() {
        // Two identical embeddings, same class: the single positive term is
        // the whole denominator, so each anchor contributes log 1 = 0.
        let e = unit_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let batch = EmbeddingBatch::new(e, vec![1, 1]).unwrap();
        let out = supcon_loss(&batch, &SupConConfig::new(1.0).unwrap()).unwrap();
        assert!(out.loss.abs() < 1e-15);
        assert_eq!(out.skipped_anchors, 0);
        assert!(!out.positive_free);
    }

    #[test]
    fn positive_free_batch_is_flagged_zero() {
        let e = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let batch = EmbeddingBatch::new(e, vec![0, 1]).unwrap();
        let out = supcon_loss(&batch, &SupConConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.skipped_anchors, 2);
        assert!(out.positive_free);
    }

    #[test]
    fn batch_validation_rejects_degenerate_inputs() {
        let e = unit_rows(&[vec![1.0, 0.0]]);
        assert!(EmbeddingBatch::new(e, vec![0]).is_err(), "N < 2");

        let zero = arr2(&[[0.0, 0.0], [1.0, 0.0]]);
        let err = EmbeddingBatch::new(zero, vec![0, 0]).unwrap_err();
        assert!(err.to_string().contains("zero norm"));

        let long = arr2(&[[2.0, 0.0], [1.0, 0.0]]);
        assert!(EmbeddingBatch::new(long, vec![0, 0]).is_err(), "non-unit norm");
    }

    /// Brute-force oracle: enumerate every (anchor, positive, other) triple
    /// with naive exponentials. Kept deliberately independent of the stable
    /// implementation.
    fn supcon_brute_force(z: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
        let n = z.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let p_set: Vec<usize> =
                (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if p_set.is_empty() {
                continue;
            }
            let mut anchor_sum = 0.0;
            for &p in &p_set {
                let num = (z.row(i).dot(&z.row(p)) / tau).exp();
                let mut den = 0.0;
                for a in 0..n {
                    if a != i {
                        den += (z.row(i).dot(&z.row(a)) / tau).exp();
                    }
                }
                anchor_sum += (num / den).ln();
            }
            total += -anchor_sum / p_set.len() as f64;
        }
        total
    }

    #[test]
    fn matches_brute_force_on_two_cluster_batch() {
        // Four embeddings in two orthogonal clusters, tau = 0.1.
        let e = unit_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ]);
        let labels = vec![0usize, 0, 1, 1];
        let expected = supcon_brute_force(&e, &labels, 0.1);
        let batch = EmbeddingBatch::new(e, labels).unwrap();
        let out = supcon_loss(&batch, &SupConConfig::new(0.1).unwrap()).unwrap();
        let rel = (out.loss - expected).abs() / expected.abs();
        assert!(rel < 1e-9, "loss {} vs oracle {expected}", out.loss);
    }

    #[test]
    fn permutation_and_label_symmetry() {
        let e = unit_rows(&[
            vec![0.8, 0.6, 0.0],
            vec![0.6, -0.8, 0.0],
            vec![0.0, 0.6, 0.8],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let labels = vec![0usize, 1, 0, 2, 1];
        let cfg = SupConConfig::new(0.2).unwrap();
        let base = supcon_loss(&EmbeddingBatch::new(e.clone(), labels.clone()).unwrap(), &cfg)
            .unwrap()
            .loss;

        // Shuffle rows.
        let order = [3usize, 0, 4, 2, 1];
        let mut shuffled = Array2::zeros((5, 3));
        let mut shuffled_labels = vec![0usize; 5];
        for (new, &old) in order.iter().enumerate() {
            shuffled.row_mut(new).assign(&e.row(old));
            shuffled_labels[new] = labels[old];
        }
        let permuted =
            supcon_loss(&EmbeddingBatch::new(shuffled, shuffled_labels).unwrap(), &cfg)
                .unwrap()
                .loss;
        assert!((base - permuted).abs() < 1e-12);

        // Relabel classes 0->2, 1->0, 2->1.
        let relabeled: Vec<usize> = labels.iter().map(|&l| (l + 2) % 3).collect();
        let relabel_loss = supcon_loss(&EmbeddingBatch::new(e, relabeled).unwrap(), &cfg)
            .unwrap()
            .loss;
        assert!((base - relabel_loss).abs() < 1e-12);
    }

    #[test]
    fn prescale_by_1e3_then_renormalize_is_bit_identical() {
        // Dyadic components make the scale-then-normalize path exact, so the
        // equality is literal. The point under test: the stable loss only
        // sees the normalized embeddings.
        let raw = [
            vec![0.5, 0.5, 0.5, 0.5],
            vec![0.5, -0.5, 0.5, -0.5],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
        ];
        let labels = vec![0usize, 0, 1, 1];
        let cfg = SupConConfig::new(0.1).unwrap();

        let plain = unit_rows(&raw);
        let scaled: Vec<Vec<f64>> =
            raw.iter().map(|r| r.iter().map(|v| v * 1e3).collect()).collect();
        let rescaled = unit_rows(&scaled);
        assert_eq!(plain, rescaled);

        let a = supcon_loss(&EmbeddingBatch::new(plain, labels.clone()).unwrap(), &cfg)
            .unwrap()
            .loss;
        let b = supcon_loss(&EmbeddingBatch::new(rescaled, labels).unwrap(), &cfg)
            .unwrap()
            .loss;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn extreme_temperature_stays_finite() {
        // tau = 1e-3 pushes logits to +-1000; naive exponentials overflow.
        let e = unit_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0]]);
        let batch = EmbeddingBatch::new(e, vec![0, 0, 1]).unwrap();
        let out = supcon_loss(&batch, &SupConConfig::new(1e-3).unwrap()).unwrap();
        assert!(out.loss.is_finite());
    }

    #[test]
    fn supcon_gradient_matches_finite_differences() {
        use crate::gradcheck::{numerical_gradient, relative_error};
        let e = unit_rows(&[
            vec![0.8, 0.6, 0.0],
            vec![0.0, 0.6, 0.8],
            vec![0.6, 0.0, 0.8],
            vec![0.0, 1.0, 0.0],
        ]);
        let labels = vec![0usize, 0, 1, 1];
        let tau = 1.0;
        let (_, grad, _) = supcon_value_and_grad(e.view(), &labels, tau);

        let n = e.nrows();
        let dim = e.ncols();
        let flat: Vec<f64> = e.iter().copied().collect();
        let mut f = |x: &[f64]| {
            let arr = Array2::from_shape_vec((n, dim), x.to_vec()).unwrap();
            supcon_value_and_grad(arr.view(), &labels, tau).0
        };
        let numeric = numerical_gradient(&mut f, &flat, 1e-3);
        let analytic: Vec<f64> = grad.iter().copied().collect();
        let rel = relative_error(&analytic, &numeric, 1e-12);
        assert!(rel < 1e-6, "relative error {rel}");
    }

    // ------------------------------------------------------------------
    // Cross entropy
    // ------------------------------------------------------------------

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let p = arr2(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let batch = PredictionBatch::from_class_ids(p, &[0, 2], 3).unwrap();
        assert_eq!(cross_entropy_loss(&batch).unwrap(), 0.0);
    }

    #[test]
    fn uniform_prediction_is_ln3() {
        let third = 1.0 / 3.0;
        let p = arr2(&[[third; 3], [third; 3], [third; 3]]);
        let batch = PredictionBatch::from_class_ids(p, &[0, 1, 2], 3).unwrap();
        let loss = cross_entropy_loss(&batch).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-9, "loss {loss} vs ln 3");
    }

    #[test]
    fn matches_scalar_log_oracle() {
        let p = arr2(&[[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]]);
        let batch = PredictionBatch::from_class_ids(p, &[0, 1], 3).unwrap();
        let loss = cross_entropy_loss(&batch).unwrap();
        let expected = -(0.7f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        assert!((expected - 0.289926).abs() < 1e-6);
    }

    #[test]
    fn rejects_off_simplex_rows_and_bad_targets() {
        let p = arr2(&[[0.5, 0.2, 0.1]]);
        assert!(PredictionBatch::from_class_ids(p, &[0], 3).is_err());

        let p = arr2(&[[0.5, 0.3, 0.2]]);
        let bad_target = arr2(&[[1.0, 1.0, 0.0]]);
        assert!(PredictionBatch::new(p, bad_target).is_err());
    }

    #[test]
    fn clamp_keeps_saturated_rows_finite_and_bounded() {
        let p = arr2(&[[1.0, 0.0, 0.0]]);
        let batch = PredictionBatch::from_class_ids(p, &[1], 3).unwrap();
        let loss = cross_entropy_loss(&batch).unwrap();
        let bound = -CE_PROB_FLOOR.ln();
        assert!(loss.is_finite());
        assert!(loss > 0.0 && loss <= bound + 1e-9);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        use crate::gradcheck::{numerical_gradient, relative_error};
        let p = arr2(&[[0.75, 0.15, 0.10], [0.2, 0.7, 0.1]]);
        let mut targets = Array2::zeros((2, 3));
        targets[[0, 0]] = 1.0;
        targets[[1, 1]] = 1.0;
        let (_, grad) = cross_entropy_value_and_grad(p.view(), targets.view());

        let flat: Vec<f64> = p.iter().copied().collect();
        let mut f = |x: &[f64]| {
            let arr = Array2::from_shape_vec((2, 3), x.to_vec()).unwrap();
            cross_entropy_value_and_grad(arr.view(), targets.view()).0
        };
        let numeric = numerical_gradient(&mut f, &flat, 1e-3);
        let analytic: Vec<f64> = grad.iter().copied().collect();
        let rel = relative_error(&analytic, &numeric, 1e-12);
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn logit_grad_is_softmax_minus_onehot() {
        let p = ndarray::arr1(&[0.2, 0.5, 0.3]);
        let g = softmax_cross_entropy_logit_grad(p.view(), 1, 4);
        assert!((g[0] - 0.05).abs() < 1e-15);
        assert!((g[1] - (-0.125)).abs() < 1e-15);
        assert!((g[2] - 0.075).abs() < 1e-15);
    }
}
