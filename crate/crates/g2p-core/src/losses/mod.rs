//! Training-loss kernels with analytic gradients.
//!
//! Three supervisory signals: feature distillation (cosine), semantics
//! (cross-entropy + Lovász-softmax), and boundary (binary cross-entropy +
//! Dice), combined into a weighted total. Every kernel is pure and returns
//! both the scalar and its gradient; the gradients are checked against
//! central finite differences (see [`gradcheck`]). Reductions use a fixed
//! pairwise order so results never depend on thread count.

mod lovasz;

pub mod gradcheck;

pub use lovasz::{lovasz_class_terms, lovasz_softmax_from_probs, ClassTerm};

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::error::{Error, Result};

/// Norm floor below which a feature row counts as zero; such rows contribute
/// loss 1 with zero gradient (the defined limit of the cosine term).
pub const NORM_EPS: f64 = 1e-12;

/// Smoothing constant added to the Dice numerator and denominator.
pub const DICE_SMOOTHING: f64 = 1.0;

/// Deterministic pairwise reduction; the summation order is a function of
/// the slice length alone.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        acc
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        pairwise_sum(values) / values.len() as f64
    }
}

/// Explicit affine map y = Wx + b taking student features into the teacher
/// feature space. The map is injected, never trained here.
#[derive(Clone, Debug)]
pub struct AffineMap {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AffineMap {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::validation(
                "map",
                format!(
                    "weight has {} output rows but bias has {}",
                    weight.nrows(),
                    bias.len()
                ),
            ));
        }
        Ok(AffineMap { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        AffineMap {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Batch for the distillation term: student rows, teacher rows, and the map
/// between their spaces.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    /// N×D student features.
    pub student: Array2<f64>,
    /// N×D′ teacher features.
    pub teacher: Array2<f64>,
    pub map: AffineMap,
}

impl FeatureBatch {
    pub fn validate(&self) -> Result<()> {
        if self.student.nrows() != self.teacher.nrows() {
            return Err(Error::validation(
                "batch",
                format!(
                    "student has {} rows, teacher has {}",
                    self.student.nrows(),
                    self.teacher.nrows()
                ),
            ));
        }
        if self.student.ncols() == 0 || self.teacher.ncols() == 0 {
            return Err(Error::validation("batch", "feature dims must be >= 1"));
        }
        if self.map.input_dim() != self.student.ncols()
            || self.map.output_dim() != self.teacher.ncols()
        {
            return Err(Error::validation(
                "map",
                format!(
                    "map is {}→{} but batch needs {}→{}",
                    self.map.input_dim(),
                    self.map.output_dim(),
                    self.student.ncols(),
                    self.teacher.ncols()
                ),
            ));
        }
        Ok(())
    }
}

/// Mean cosine misalignment between mapped student rows and teacher rows,
/// with the gradient taken with respect to the student features.
///
/// The scalar lies in [0,2]; rows whose mapped or teacher norm falls below
/// [`NORM_EPS`] contribute 1 with zero gradient.
pub fn distill_loss(batch: &FeatureBatch) -> Result<(f64, Array2<f64>)> {
    batch.validate()?;
    let n = batch.student.nrows();
    let mut grad = Array2::zeros(batch.student.raw_dim());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut row_losses = Vec::with_capacity(n);
    for i in 0..n {
        let student = batch.student.row(i);
        let mapped = batch.map.weight.dot(&student) + &batch.map.bias;
        let teacher = batch.teacher.row(i);
        let norm_m = mapped.dot(&mapped).sqrt();
        let norm_t = teacher.dot(&teacher).sqrt();
        if norm_m <= NORM_EPS || norm_t <= NORM_EPS {
            row_losses.push(1.0);
            continue;
        }
        let cosine = mapped.dot(&teacher) / (norm_m * norm_t);
        row_losses.push(1.0 - cosine);
        // d(1-cos)/d(mapped), then back through the affine map
        let d_mapped =
            &mapped * (cosine / (norm_m * norm_m)) - &teacher.map(|&v| v / (norm_m * norm_t));
        let d_student = batch.map.weight.t().dot(&d_mapped);
        grad.row_mut(i).assign(&(&d_student / n as f64));
    }
    Ok((pairwise_mean(&row_losses), grad))
}

/// Batch for the semantic term: logits plus integer targets.
#[derive(Clone, Debug)]
pub struct SemBatch {
    /// N×C prediction logits.
    pub logits: Array2<f64>,
    pub targets: Vec<u32>,
    /// Target id excluded from the loss entirely.
    pub ignore_id: Option<u32>,
}

impl SemBatch {
    pub fn validate(&self) -> Result<()> {
        if self.logits.ncols() < 2 {
            return Err(Error::validation("logits", "need at least 2 classes"));
        }
        if self.logits.nrows() != self.targets.len() {
            return Err(Error::validation(
                "targets",
                format!(
                    "{} rows of logits vs {} targets",
                    self.logits.nrows(),
                    self.targets.len()
                ),
            ));
        }
        for (i, &t) in self.targets.iter().enumerate() {
            if Some(t) != self.ignore_id && t as usize >= self.logits.ncols() {
                return Err(Error::validation(
                    "targets",
                    format!("target {t} at row {i} out of range"),
                ));
            }
        }
        Ok(())
    }

    fn valid_rows(&self) -> Vec<usize> {
        (0..self.targets.len())
            .filter(|&i| Some(self.targets[i]) != self.ignore_id)
            .collect()
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.iter().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Semantic loss: mean cross-entropy plus the Lovász-softmax term, with the
/// gradient taken with respect to the logits.
pub fn sem_loss(batch: &SemBatch) -> Result<(f64, Array2<f64>)> {
    batch.validate()?;
    let valid = batch.valid_rows();
    let probs = softmax_rows(&batch.logits);
    let mut grad = Array2::zeros(batch.logits.raw_dim());
    if valid.is_empty() {
        return Ok((0.0, grad));
    }

    // cross-entropy over the valid rows
    let mut ce_terms = Vec::with_capacity(valid.len());
    for &i in &valid {
        let target = batch.targets[i] as usize;
        ce_terms.push(-probs[(i, target)].max(f64::MIN_POSITIVE).ln());
    }
    let ce = pairwise_mean(&ce_terms);
    let inv_n = 1.0 / valid.len() as f64;
    for &i in &valid {
        let target = batch.targets[i] as usize;
        for c in 0..batch.logits.ncols() {
            let indicator = (c == target) as u8 as f64;
            grad[(i, c)] += (probs[(i, c)] - indicator) * inv_n;
        }
    }

    // Lovász term, chained through the softmax Jacobian
    let (lov, d_probs) = lovasz_softmax_from_probs(&probs, &batch.targets, &valid);
    for &i in &valid {
        let mut inner = 0.0;
        for c in 0..batch.logits.ncols() {
            inner += d_probs[(i, c)] * probs[(i, c)];
        }
        for c in 0..batch.logits.ncols() {
            grad[(i, c)] += probs[(i, c)] * (d_probs[(i, c)] - inner);
        }
    }

    Ok((ce + lov, grad))
}

/// Batch for the boundary term: per-point logits and binary targets.
#[derive(Clone, Debug)]
pub struct BouBatch {
    pub logits: Vec<f64>,
    /// Targets must be exactly 0.0 or 1.0.
    pub targets: Vec<f64>,
}

impl BouBatch {
    pub fn validate(&self) -> Result<()> {
        if self.logits.len() != self.targets.len() {
            return Err(Error::validation(
                "targets",
                format!("{} logits vs {} targets", self.logits.len(), self.targets.len()),
            ));
        }
        if let Some(t) = self.targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::validation(
                "targets",
                format!("must be 0 or 1, got {t}"),
            ));
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Smoothed Dice loss on probabilities: 1 − (2Σpt + ε)/(Σp + Σt + ε).
/// The smoothing makes the all-zero case exactly 0.
pub fn dice_loss(probs: &[f64], targets: &[f64]) -> f64 {
    let products: Vec<f64> = probs.iter().zip(targets).map(|(p, t)| p * t).collect();
    let numerator = 2.0 * pairwise_sum(&products) + DICE_SMOOTHING;
    let denominator = pairwise_sum(probs) + pairwise_sum(targets) + DICE_SMOOTHING;
    1.0 - numerator / denominator
}

/// Boundary loss: mean binary cross-entropy plus smoothed Dice, with the
/// gradient taken with respect to the logits.
pub fn bou_loss(batch: &BouBatch) -> Result<(f64, Vec<f64>)> {
    batch.validate()?;
    let n = batch.logits.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let probs: Vec<f64> = batch.logits.iter().map(|&z| sigmoid(z)).collect();

    // numerically stable logit-space BCE
    let bce_terms: Vec<f64> = batch
        .logits
        .iter()
        .zip(&batch.targets)
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .collect();
    let bce = pairwise_mean(&bce_terms);

    let products: Vec<f64> = probs.iter().zip(&batch.targets).map(|(p, t)| p * t).collect();
    let numerator = 2.0 * pairwise_sum(&products) + DICE_SMOOTHING;
    let denominator = pairwise_sum(&probs) + pairwise_sum(&batch.targets) + DICE_SMOOTHING;
    let dice = 1.0 - numerator / denominator;

    let grad: Vec<f64> = (0..n)
        .map(|i| {
            let p = probs[i];
            let t = batch.targets[i];
            let d_bce = (p - t) / n as f64;
            let d_dice_dp = (numerator - 2.0 * t * denominator) / (denominator * denominator);
            d_bce + d_dice_dp * p * (1.0 - p)
        })
        .collect();
    Ok((bce + dice, grad))
}

/// Weighted sum of the three supervision terms.
pub fn total_loss(sem: f64, bou: f64, distill: f64, lambda_b: f64, lambda_d: f64) -> f64 {
    sem + lambda_b * bou + lambda_d * distill
}

/// Scalar values of all loss terms for one evaluation — the reporting shape
/// used by the CLI.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LossReport {
    pub sem: f64,
    pub bou: f64,
    pub distill: f64,
    pub lambda_b: f64,
    pub lambda_d: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(sem: f64, bou: f64, distill: f64, lambda_b: f64, lambda_d: f64) -> Self {
        LossReport {
            sem,
            bou,
            distill,
            lambda_b,
            lambda_d,
            total: total_loss(sem, bou, distill, lambda_b, lambda_d),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pairwise_sum_is_exact_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn distill_zero_for_identical_features() {
        let features = array![[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]];
        let batch = FeatureBatch {
            student: features.clone(),
            teacher: features,
            map: AffineMap::identity(3),
        };
        let (loss, grad) = distill_loss(&batch).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn distill_cosine_extremes() {
        let batch = FeatureBatch {
            student: array![[1.0, 0.0]],
            teacher: array![[0.0, 1.0]],
            map: AffineMap::identity(2),
        };
        let (orthogonal, _) = distill_loss(&batch).unwrap();
        assert_relative_eq!(orthogonal, 1.0, epsilon = 1e-12);

        let batch = FeatureBatch {
            student: array![[1.0, 0.0]],
            teacher: array![[-2.0, 0.0]],
            map: AffineMap::identity(2),
        };
        let (antiparallel, _) = distill_loss(&batch).unwrap();
        assert_relative_eq!(antiparallel, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn distill_zero_norm_rows_contribute_one_with_zero_gradient() {
        let batch = FeatureBatch {
            student: array![[0.0, 0.0], [1.0, 0.0]],
            teacher: array![[1.0, 0.0], [1.0, 0.0]],
            map: AffineMap::identity(2),
        };
        let (loss, grad) = distill_loss(&batch).unwrap();
        assert_relative_eq!(loss, 0.5, epsilon = 1e-12);
        assert!(grad.row(0).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn distill_matches_per_row_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d, dp) = (7, 4, 3);
        let batch = FeatureBatch {
            student: Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0)),
            teacher: Array2::from_shape_fn((n, dp), |_| rng.random_range(-2.0..2.0)),
            map: AffineMap::new(
                Array2::from_shape_fn((dp, d), |_| rng.random_range(-1.0..1.0)),
                Array1::from_shape_fn(dp, |_| rng.random_range(-0.5..0.5)),
            )
            .unwrap(),
        };
        let (loss, _) = distill_loss(&batch).unwrap();
        let mut direct = 0.0;
        for i in 0..n {
            let mapped = batch.map.weight.dot(&batch.student.row(i)) + &batch.map.bias;
            let teacher = batch.teacher.row(i);
            let cos = mapped.dot(&teacher)
                / (mapped.dot(&mapped).sqrt() * teacher.dot(&teacher).sqrt());
            direct += 1.0 - cos;
        }
        assert_relative_eq!(loss, direct / n as f64, epsilon = 1e-12);
    }

    #[test]
    fn sem_loss_saturated_correct_logits_vanish() {
        let logits = array![[40.0, -40.0], [-40.0, 40.0]];
        let batch = SemBatch {
            logits,
            targets: vec![0, 1],
            ignore_id: None,
        };
        let (loss, _) = sem_loss(&batch).unwrap();
        assert!(loss.abs() < 1e-12, "loss={loss}");
    }

    #[test]
    fn sem_loss_uniform_two_class_single_row() {
        // CE = ln 2; the single present class has one error of 0.5 so the
        // Lovász term adds 0.5.
        let batch = SemBatch {
            logits: array![[0.0, 0.0]],
            targets: vec![0],
            ignore_id: None,
        };
        let (loss, _) = sem_loss(&batch).unwrap();
        assert_relative_eq!(loss, 2f64.ln() + 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sem_loss_respects_ignore_id() {
        let batch = SemBatch {
            logits: array![[3.0, -1.0], [0.3, 0.1]],
            targets: vec![0, 9],
            ignore_id: Some(9),
        };
        let (_, grad) = sem_loss(&batch).unwrap();
        assert!(grad.row(1).iter().all(|&g| g == 0.0));

        let bad = SemBatch {
            logits: array![[3.0, -1.0]],
            targets: vec![7],
            ignore_id: None,
        };
        assert!(sem_loss(&bad).is_err());
    }

    #[test]
    fn sem_loss_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 6;
        let logits = Array2::from_shape_fn((n, 3), |_| rng.random_range(-2.0..2.0));
        let targets: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let batch = SemBatch {
            logits: logits.clone(),
            targets: targets.clone(),
            ignore_id: None,
        };
        let (loss, grad) = sem_loss(&batch).unwrap();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted = SemBatch {
            logits: Array2::from_shape_fn((n, 3), |(i, j)| logits[(perm[i], j)]),
            targets: perm.iter().map(|&i| targets[i]).collect(),
            ignore_id: None,
        };
        let (loss_p, grad_p) = sem_loss(&permuted).unwrap();
        assert_relative_eq!(loss, loss_p, epsilon = 1e-12);
        for (i, &pi) in perm.iter().enumerate() {
            for j in 0..3 {
                assert_relative_eq!(grad_p[(i, j)], grad[(pi, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bou_loss_perfect_saturated_predictions_vanish() {
        let batch = BouBatch {
            logits: vec![30.0, -30.0, 30.0],
            targets: vec![1.0, 0.0, 1.0],
        };
        let (loss, _) = bou_loss(&batch).unwrap();
        assert!(loss.abs() < 1e-6, "loss={loss}");
    }

    #[test]
    fn dice_all_zero_case_is_exactly_zero() {
        assert_eq!(dice_loss(&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn dice_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let n = rng.random_range(1..40);
            let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let targets: Vec<f64> =
                (0..n).map(|_| rng.random_range(0..2) as f64).collect();
            let d = dice_loss(&probs, &targets);
            assert!((0.0..=1.0).contains(&d), "dice={d}");
        }
    }

    #[test]
    fn bou_rejects_nonbinary_targets() {
        let batch = BouBatch {
            logits: vec![0.0],
            targets: vec![0.5],
        };
        assert!(bou_loss(&batch).is_err());
    }

    #[test]
    fn total_loss_weighted_sum() {
        assert_eq!(total_loss(1.0, 1.0, 1.0, 0.9, 0.4), 2.3);
        assert_eq!(total_loss(1.7, 5.0, 3.0, 0.0, 0.0), 1.7);
        // doubling the boundary term raises the total by exactly λ_b · bou
        let base = total_loss(0.3, 0.8, 0.1, 0.9, 0.4);
        let doubled = total_loss(0.3, 1.6, 0.1, 0.9, 0.4);
        assert_relative_eq!(doubled - base, 0.9 * 0.8, epsilon = 1e-15);
    }
}
