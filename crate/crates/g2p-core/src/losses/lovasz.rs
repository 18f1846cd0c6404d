//! Lovász-softmax: the Jaccard loss extended to real-valued scores through
//! the Lovász extension of its submodular set function, averaged over the
//! classes present in the batch.

use ndarray::Array2;

use super::pairwise_sum;

/// Piecewise-linear gradient of the Jaccard-loss extension along one sorted
/// error chain. `gt_sorted` holds 1.0 where the sorted position belongs to
/// the class, 0.0 elsewhere.
fn jaccard_chain_grad(gt_sorted: &[f64]) -> Vec<f64> {
    let n = gt_sorted.len();
    let total: f64 = pairwise_sum(gt_sorted);
    let mut grad = Vec::with_capacity(n);
    let mut hits = 0.0;
    let mut misses = 0.0;
    let mut prev = 0.0;
    for &g in gt_sorted {
        hits += g;
        misses += 1.0 - g;
        let jaccard = 1.0 - (total - hits) / (total + misses);
        grad.push(jaccard - prev);
        prev = jaccard;
    }
    grad
}

/// One class's share of the Lovász-softmax term.
#[derive(Clone, Copy, Debug)]
pub struct ClassTerm {
    pub class: u32,
    /// Extension value for this class, in [0,1].
    pub value: f64,
}

/// Per-class Lovász extension values over the classes present among the
/// valid rows, plus the gradient of their SUM with respect to `probs`.
pub fn lovasz_class_terms(
    probs: &Array2<f64>,
    targets: &[u32],
    valid: &[usize],
) -> (Vec<ClassTerm>, Array2<f64>) {
    let mut grad = Array2::zeros(probs.raw_dim());
    if valid.is_empty() {
        return (Vec::new(), grad);
    }

    let mut present: Vec<u32> = valid.iter().map(|&i| targets[i]).collect();
    present.sort_unstable();
    present.dedup();
    debug_assert!(present.iter().all(|&c| (c as usize) < probs.ncols()));

    let mut terms = Vec::with_capacity(present.len());
    for &class in &present {
        let c = class as usize;
        // per-row error magnitudes for this class
        let errors: Vec<f64> = valid
            .iter()
            .map(|&i| {
                if targets[i] == class {
                    1.0 - probs[(i, c)]
                } else {
                    probs[(i, c)]
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..valid.len()).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));

        let gt_sorted: Vec<f64> = order
            .iter()
            .map(|&j| (targets[valid[j]] == class) as u8 as f64)
            .collect();
        let chain = jaccard_chain_grad(&gt_sorted);

        let products: Vec<f64> = order
            .iter()
            .zip(&chain)
            .map(|(&j, &g)| errors[j] * g)
            .collect();
        terms.push(ClassTerm {
            class,
            value: pairwise_sum(&products),
        });

        for (&j, &g) in order.iter().zip(&chain) {
            let row = valid[j];
            let sign = if targets[row] == class { -1.0 } else { 1.0 };
            grad[(row, c)] += sign * g;
        }
    }
    (terms, grad)
}

/// Lovász-softmax term (mean of the per-class extensions) and its gradient
/// with respect to the class probabilities. Rows outside `valid` contribute
/// nothing and get zero gradient.
pub fn lovasz_softmax_from_probs(
    probs: &Array2<f64>,
    targets: &[u32],
    valid: &[usize],
) -> (f64, Array2<f64>) {
    let (terms, mut grad) = lovasz_class_terms(probs, targets, valid);
    if terms.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / terms.len() as f64;
    grad.mapv_inplace(|v| v * scale);
    let values: Vec<f64> = terms.iter().map(|t| t.value).collect();
    (pairwise_sum(&values) * scale, grad)
}
