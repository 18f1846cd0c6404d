//! Central finite-difference verification of the analytic loss gradients.
//!
//! This backs the `losses-check` CLI subcommand so CI can gate on it; the
//! acceptance tests call the same machinery.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{bou_loss, distill_loss, sem_loss, AffineMap, BouBatch, FeatureBatch, SemBatch};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Default pass threshold on the relative error.
pub const FD_TOLERANCE: f64 = 1e-4;

/// |analytic − numeric| relative to the larger magnitude, floored so that
/// near-zero gradient coordinates compare absolutely.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Result of checking one kernel over many random instances.
#[derive(Clone, Debug, Serialize)]
pub struct KernelCheck {
    pub kernel: String,
    pub trials: usize,
    /// Worst relative error between analytic and central-difference
    /// gradients across all coordinates of all trials.
    pub max_rel_error: f64,
    /// Mean scalar loss over the trials, for report context.
    pub mean_value: f64,
}

impl KernelCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Full gradient-check report across the three kernels.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    pub kernels: Vec<KernelCheck>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.kernels.iter().all(|k| k.passes(self.tolerance))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.kernels
            .iter()
            .map(|k| k.max_rel_error)
            .fold(0.0, f64::max)
    }
}

fn check_distill(rng: &mut ChaCha8Rng, trials: usize) -> KernelCheck {
    let mut max_err = 0.0f64;
    let mut values = 0.0;
    for _ in 0..trials {
        let n = rng.random_range(2..6);
        let d = rng.random_range(2..5);
        let dp = rng.random_range(2..5);
        let mut batch = FeatureBatch {
            student: Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0)),
            teacher: Array2::from_shape_fn((n, dp), |_| rng.random_range(-2.0..2.0)),
            map: AffineMap::new(
                Array2::from_shape_fn((dp, d), |_| rng.random_range(-1.0..1.0)),
                Array1::from_shape_fn(dp, |_| rng.random_range(-0.5..0.5)),
            )
            .expect("dims match"),
        };
        let (value, grad) = distill_loss(&batch).expect("valid batch");
        values += value;
        for i in 0..n {
            for j in 0..d {
                let original = batch.student[(i, j)];
                batch.student[(i, j)] = original + FD_STEP;
                let (plus, _) = distill_loss(&batch).expect("valid batch");
                batch.student[(i, j)] = original - FD_STEP;
                let (minus, _) = distill_loss(&batch).expect("valid batch");
                batch.student[(i, j)] = original;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                max_err = max_err.max(relative_error(grad[(i, j)], numeric));
            }
        }
    }
    KernelCheck {
        kernel: "distill".into(),
        trials,
        max_rel_error: max_err,
        mean_value: values / trials as f64,
    }
}

fn check_sem(rng: &mut ChaCha8Rng, trials: usize) -> KernelCheck {
    let mut max_err = 0.0f64;
    let mut values = 0.0;
    for trial in 0..trials {
        let n = rng.random_range(2..7);
        let classes = rng.random_range(2..5);
        let ignore_id = if trial % 4 == 0 { Some(classes as u32) } else { None };
        let targets: Vec<u32> = (0..n)
            .map(|_| {
                if ignore_id.is_some() && rng.random_range(0..5) == 0 {
                    classes as u32
                } else {
                    rng.random_range(0..classes as u32)
                }
            })
            .collect();
        let mut batch = SemBatch {
            logits: Array2::from_shape_fn((n, classes), |_| rng.random_range(-2.0..2.0)),
            targets,
            ignore_id,
        };
        let (value, grad) = sem_loss(&batch).expect("valid batch");
        values += value;
        for i in 0..n {
            for c in 0..classes {
                let original = batch.logits[(i, c)];
                batch.logits[(i, c)] = original + FD_STEP;
                let (plus, _) = sem_loss(&batch).expect("valid batch");
                batch.logits[(i, c)] = original - FD_STEP;
                let (minus, _) = sem_loss(&batch).expect("valid batch");
                batch.logits[(i, c)] = original;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                max_err = max_err.max(relative_error(grad[(i, c)], numeric));
            }
        }
    }
    KernelCheck {
        kernel: "sem".into(),
        trials,
        max_rel_error: max_err,
        mean_value: values / trials as f64,
    }
}

fn check_bou(rng: &mut ChaCha8Rng, trials: usize) -> KernelCheck {
    let mut max_err = 0.0f64;
    let mut values = 0.0;
    for _ in 0..trials {
        let n = rng.random_range(2..10);
        let mut batch = BouBatch {
            logits: (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
            targets: (0..n).map(|_| rng.random_range(0..2) as f64).collect(),
        };
        let (value, grad) = bou_loss(&batch).expect("valid batch");
        values += value;
        for i in 0..n {
            let original = batch.logits[i];
            batch.logits[i] = original + FD_STEP;
            let (plus, _) = bou_loss(&batch).expect("valid batch");
            batch.logits[i] = original - FD_STEP;
            let (minus, _) = bou_loss(&batch).expect("valid batch");
            batch.logits[i] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_err = max_err.max(relative_error(grad[i], numeric));
        }
    }
    KernelCheck {
        kernel: "bou".into(),
        trials,
        max_rel_error: max_err,
        mean_value: values / trials as f64,
    }
}

/// Runs `trials` random instances per kernel and reports the worst relative
/// error of each against central finite differences.
pub fn run_gradient_checks(seed: u64, trials: usize, tolerance: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels = vec![
        check_distill(&mut rng, trials),
        check_sem(&mut rng, trials),
        check_bou(&mut rng, trials),
    ];
    GradCheckReport {
        seed,
        trials,
        step: FD_STEP,
        tolerance,
        kernels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_checks_pass_the_tolerance() {
        let report = run_gradient_checks(7, 25, FD_TOLERANCE);
        assert!(
            report.all_pass(),
            "max rel error {}",
            report.max_rel_error()
        );
        assert_eq!(report.kernels.len(), 3);
    }

    #[test]
    fn report_is_deterministic_for_a_seed() {
        let a = run_gradient_checks(11, 5, FD_TOLERANCE);
        let b = run_gradient_checks(11, 5, FD_TOLERANCE);
        for (x, y) in a.kernels.iter().zip(&b.kernels) {
            assert_eq!(x.max_rel_error, y.max_rel_error);
            assert_eq!(x.mean_value, y.mean_value);
        }
    }
}
