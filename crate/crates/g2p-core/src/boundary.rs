//! Boundary pseudo-labels from aggregated Gaussian scales and from local
//! label disagreement, merged by union.
//!
//! Small aggregated scales concentrate at object edges while large ones
//! cover planar regions, so pruning the largest-scale share of the object
//! points leaves a scale-based boundary set. The semantic set marks any
//! point with a differently-labeled neighbor inside a small radius.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::CentroidIndex;
use crate::types::{AugmentedPoint, BoundaryFlags, BoundaryLabels};

/// L2 magnitude of an aggregated scale vector.
pub fn scale_magnitude(scale: &nalgebra::Vector3<f64>) -> f64 {
    (scale.x * scale.x + scale.y * scale.y + scale.z * scale.z).sqrt()
}

/// Scale-based boundary membership plus the realized threshold.
#[derive(Clone, Debug)]
pub struct ScaleBoundary {
    /// One entry per input point.
    pub members: Vec<bool>,
    /// The magnitude threshold actually applied (meters); NaN when the
    /// object set was empty.
    pub threshold: f64,
    /// Size of the object set (matched, non-background points).
    pub object_count: usize,
}

impl ScaleBoundary {
    pub fn count(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }
}

/// Extracts the scale-based boundary set.
///
/// The object set is the matched, non-background points. The threshold is
/// the nearest-rank (1−eta)-quantile of their scale magnitudes, so the
/// smallest ceil((1−eta)·n) magnitudes survive (plus any ties sitting
/// exactly on the threshold). Background points never enter the set.
pub fn extract_scale_boundary(
    points: &[AugmentedPoint],
    background_ids: &BTreeSet<u16>,
    eta: f64,
) -> Result<ScaleBoundary> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::validation("eta", "must lie strictly in (0,1)"));
    }
    for (i, p) in points.iter().enumerate() {
        if p.point.background.is_none() && p.point.label.is_none() {
            return Err(Error::validation(
                "labels",
                format!("point {i} has neither a label nor a background flag"),
            ));
        }
    }

    let object: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.matched && !p.point.is_background(background_ids))
        .map(|(i, _)| i)
        .collect();
    if object.is_empty() {
        return Ok(ScaleBoundary {
            members: vec![false; points.len()],
            threshold: f64::NAN,
            object_count: 0,
        });
    }

    let mut magnitudes: Vec<f64> = object
        .iter()
        .map(|&i| scale_magnitude(&points[i].scale))
        .collect();
    magnitudes.sort_unstable_by(f64::total_cmp);
    // nearest-rank quantile: keep the smallest ceil((1-eta)*n) magnitudes
    let keep = ((1.0 - eta) * object.len() as f64).ceil() as usize;
    let keep = keep.clamp(1, object.len());
    let threshold = magnitudes[keep - 1];

    let mut members = vec![false; points.len()];
    for &i in &object {
        members[i] = scale_magnitude(&points[i].scale) <= threshold;
    }
    Ok(ScaleBoundary {
        members,
        threshold,
        object_count: object.len(),
    })
}

/// Marks every point that has a differently-labeled neighbor within
/// `r_sem`. Membership is symmetric and exact (grid-accelerated, equal to
/// the quadratic scan).
pub fn extract_semantic_boundary(points: &[AugmentedPoint], r_sem: f64) -> Result<Vec<bool>> {
    if !(r_sem > 0.0 && r_sem.is_finite()) {
        return Err(Error::validation("r_sem", "must be > 0"));
    }
    let mut labels = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        match p.point.label {
            Some(l) => labels.push(l),
            None => {
                return Err(Error::validation(
                    "labels",
                    format!("point {i} has no semantic label"),
                ))
            }
        }
    }
    let positions: Vec<nalgebra::Vector3<f64>> =
        points.iter().map(|p| p.point.position).collect();
    let index = CentroidIndex::build(&positions, r_sem)?;

    let members: Vec<bool> = positions
        .par_iter()
        .enumerate()
        .map_init(Vec::new, |scratch, (i, pos)| {
            index.radius_query_into(pos, r_sem, scratch);
            scratch
                .iter()
                .any(|&j| j as usize != i && labels[j as usize] != labels[i])
        })
        .collect();
    Ok(members)
}

/// Merges the two boundary sets with a pointwise OR.
pub fn union_boundary(scale: &ScaleBoundary, sem: &[bool]) -> Result<BoundaryLabels> {
    if scale.members.len() != sem.len() {
        return Err(Error::validation(
            "boundary",
            format!(
                "scale set has {} points but semantic set has {}",
                scale.members.len(),
                sem.len()
            ),
        ));
    }
    let flags = scale
        .members
        .iter()
        .zip(sem)
        .map(|(&s, &m)| BoundaryFlags {
            in_scale: s,
            in_sem: m,
            in_union: s || m,
        })
        .collect();
    Ok(BoundaryLabels {
        flags,
        threshold: scale.threshold,
    })
}

/// Boundary labels from the scale set alone — the unlabeled-inference mode
/// where no semantic comparison is possible.
pub fn scale_only_boundary(scale: &ScaleBoundary) -> BoundaryLabels {
    BoundaryLabels {
        flags: scale
            .members
            .iter()
            .map(|&s| BoundaryFlags {
                in_scale: s,
                in_sem: false,
                in_union: s,
            })
            .collect(),
        threshold: scale.threshold,
    }
}
