//! Two-stage Gaussian-to-point correspondence and attribute aggregation.
//!
//! Stage one collects every Gaussian whose centroid lies within a Euclidean
//! radius of the point; stage two ranks the candidates by Mahalanobis
//! distance (or Euclidean, for the baseline metric) and keeps the `k`
//! closest. Neighbor attributes are then blended with normalized
//! inverse-distance weights.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::CentroidIndex;
use crate::types::{
    AugmentedPoint, CloudPoint, Correspondence, CorrespondenceSet, DistanceMetric,
    GaussianPrimitive, PipelineConfig,
};

/// Distances below this are treated as coincident; weights collapse onto the
/// coincident subset uniformly (the limit of inverse-distance weighting).
pub const ZERO_DISTANCE_EPS: f64 = 1e-12;

/// How many times the candidate radius is doubled before a point is declared
/// unmatched.
pub const MAX_RADIUS_DOUBLINGS: u32 = 5;

/// Distance from a point to one Gaussian under the configured metric.
pub fn point_distance(
    position: &Vector3<f64>,
    gaussian: &GaussianPrimitive,
    metric: DistanceMetric,
) -> f64 {
    match metric {
        DistanceMetric::Mahalanobis => gaussian.mahalanobis_to(position),
        DistanceMetric::Euclidean => (position - gaussian.centroid()).norm(),
    }
}

/// Matches one point against the indexed Gaussians.
///
/// Candidates come from a radius query at `cfg.r_match`; the `k` smallest
/// distances win, ties broken by ascending Gaussian id. When no candidate
/// exists the radius doubles up to [`MAX_RADIUS_DOUBLINGS`] times; a point
/// that still finds nothing comes back unmatched rather than failing.
pub fn match_point(
    position: &Vector3<f64>,
    index: &CentroidIndex,
    gaussians: &[GaussianPrimitive],
    cfg: &PipelineConfig,
) -> Correspondence {
    let mut radius = cfg.r_match;
    let mut candidates = index.radius_query(position, radius);
    let mut expanded = false;
    for _ in 0..MAX_RADIUS_DOUBLINGS {
        if !candidates.is_empty() {
            break;
        }
        radius *= 2.0;
        expanded = true;
        index.radius_query_into(position, radius, &mut candidates);
    }
    if candidates.is_empty() {
        return Correspondence {
            expanded,
            ..Correspondence::default()
        };
    }

    let mut scored: Vec<(f64, u32)> = candidates
        .into_iter()
        .map(|id| {
            (
                point_distance(position, &gaussians[id as usize], cfg.distance_metric),
                id,
            )
        })
        .collect();
    scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(cfg.k);

    let neighbors: Vec<u32> = scored.iter().map(|&(_, id)| id).collect();
    let distances: Vec<f64> = scored.iter().map(|&(d, _)| d).collect();
    let weights = inverse_distance_weights(&distances)
        .expect("matched point always has at least one distance");
    Correspondence {
        neighbors,
        distances,
        weights,
        expanded,
    }
}

/// Normalized inverse-distance weights over one neighbor list.
///
/// If any distance falls below [`ZERO_DISTANCE_EPS`] the weight mass goes
/// uniformly to the coincident subset and the rest get zero.
pub fn inverse_distance_weights(distances: &[f64]) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::validation("distances", "empty neighbor list"));
    }
    if let Some(d) = distances.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::validation(
            "distances",
            format!("must be finite and >= 0, got {d}"),
        ));
    }
    let coincident = distances.iter().filter(|&&d| d < ZERO_DISTANCE_EPS).count();
    if coincident > 0 {
        let share = 1.0 / coincident as f64;
        return Ok(distances
            .iter()
            .map(|&d| if d < ZERO_DISTANCE_EPS { share } else { 0.0 })
            .collect());
    }
    let inverses: Vec<f64> = distances.iter().map(|d| 1.0 / d).collect();
    let total: f64 = inverses.iter().sum();
    Ok(inverses.into_iter().map(|v| v / total).collect())
}

/// Blends neighbor scales and opacities with the correspondence weights.
/// An unmatched correspondence aggregates to zero scale and zero opacity.
pub fn aggregate_attributes(
    corr: &Correspondence,
    gaussians: &[GaussianPrimitive],
) -> (Vector3<f64>, f64) {
    let mut scale = Vector3::zeros();
    let mut opacity = 0.0;
    for (&id, &w) in corr.neighbors.iter().zip(&corr.weights) {
        let g = &gaussians[id as usize];
        scale += w * g.scale();
        opacity += w * g.opacity();
    }
    (scale, opacity)
}

/// Runs matching and aggregation over a whole cloud.
///
/// Output order equals input order, and the per-point work is pure, so the
/// result is identical for any thread count. Point geometry (position,
/// color, normal) is carried over untouched.
pub fn augment_cloud(
    points: &[CloudPoint],
    gaussians: &[GaussianPrimitive],
    cfg: &PipelineConfig,
) -> Result<(Vec<AugmentedPoint>, CorrespondenceSet)> {
    cfg.validate()?;
    let index = CentroidIndex::from_gaussians(gaussians, cfg.r_match)?;
    let (augmented, entries): (Vec<AugmentedPoint>, Vec<Correspondence>) = points
        .par_iter()
        .map(|p| {
            let corr = match_point(&p.position, &index, gaussians, cfg);
            let (scale, opacity) = aggregate_attributes(&corr, gaussians);
            (
                AugmentedPoint {
                    point: p.clone(),
                    scale,
                    opacity,
                    matched: corr.is_matched(),
                },
                corr,
            )
        })
        .unzip();
    Ok((augmented, CorrespondenceSet { entries }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Quaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_at(p: [f64; 3], scale: [f64; 3], opacity: f64) -> GaussianPrimitive {
        GaussianPrimitive::new(
            Vector3::from(p),
            Quaternion::new(1.0, 0.0, 0.0, 0.0),
            Vector3::from(scale),
            opacity,
            vec![],
            1e-8,
        )
        .unwrap()
    }

    fn random_gaussians(n: usize, seed: u64, extent: f64) -> Vec<GaussianPrimitive> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let q = Quaternion::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let q = if q.norm() < 1e-3 {
                    Quaternion::new(1.0, 0.0, 0.0, 0.0)
                } else {
                    q
                };
                GaussianPrimitive::new(
                    Vector3::new(
                        rng.random_range(0.0..extent),
                        rng.random_range(0.0..extent),
                        rng.random_range(0.0..extent),
                    ),
                    q,
                    Vector3::new(
                        rng.random_range(0.005..0.08),
                        rng.random_range(0.005..0.08),
                        rng.random_range(0.005..0.08),
                    ),
                    rng.random_range(0.0..1.0),
                    vec![],
                    1e-8,
                )
                .unwrap()
            })
            .collect()
    }

    /// Reference matcher: filter by Euclidean radius over ALL gaussians,
    /// rank every survivor, normalize by hand.
    fn brute_force_match(
        position: &Vector3<f64>,
        gaussians: &[GaussianPrimitive],
        cfg: &PipelineConfig,
    ) -> Correspondence {
        let mut radius = cfg.r_match;
        let mut doublings = 0;
        let mut expanded = false;
        let ids = loop {
            let ids: Vec<u32> = gaussians
                .iter()
                .enumerate()
                .filter(|(_, g)| (g.centroid() - position).norm_squared() <= radius * radius)
                .map(|(i, _)| i as u32)
                .collect();
            if !ids.is_empty() || doublings == MAX_RADIUS_DOUBLINGS {
                break ids;
            }
            radius *= 2.0;
            doublings += 1;
            expanded = true;
        };
        if ids.is_empty() {
            return Correspondence {
                expanded,
                ..Correspondence::default()
            };
        }
        let mut scored: Vec<(f64, u32)> = ids
            .into_iter()
            .map(|id| {
                (
                    point_distance(position, &gaussians[id as usize], cfg.distance_metric),
                    id,
                )
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(cfg.k);
        let distances: Vec<f64> = scored.iter().map(|s| s.0).collect();
        let inv: Vec<f64> = distances.iter().map(|d| 1.0 / d.max(ZERO_DISTANCE_EPS)).collect();
        let total: f64 = inv.iter().sum();
        Correspondence {
            neighbors: scored.iter().map(|s| s.1).collect(),
            distances: distances.clone(),
            weights: inv.iter().map(|v| v / total).collect(),
            expanded,
        }
    }

    #[test]
    fn single_candidate_gets_unit_weight() {
        let gaussians = vec![gaussian_at([0.0, 0.0, 0.0], [0.1, 0.1, 0.1], 0.7)];
        let index = CentroidIndex::from_gaussians(&gaussians, 0.1).unwrap();
        let cfg = PipelineConfig::default();
        let corr = match_point(&Vector3::new(0.05, 0.0, 0.0), &index, &gaussians, &cfg);
        assert_eq!(corr.neighbors, vec![0]);
        assert_eq!(corr.weights, vec![1.0]);
        assert!(!corr.expanded);
    }

    #[test]
    fn equidistant_equal_shape_neighbors_split_evenly() {
        let gaussians = vec![
            gaussian_at([-0.05, 0.0, 0.0], [0.1, 0.1, 0.1], 0.2),
            gaussian_at([0.05, 0.0, 0.0], [0.1, 0.1, 0.1], 0.6),
        ];
        let index = CentroidIndex::from_gaussians(&gaussians, 0.1).unwrap();
        let cfg = PipelineConfig::default();
        let corr = match_point(&Vector3::zeros(), &index, &gaussians, &cfg);
        assert_eq!(corr.neighbors, vec![0, 1]);
        assert_relative_eq!(corr.weights[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(corr.weights[1], 0.5, epsilon = 1e-12);
        let (scale, opacity) = aggregate_attributes(&corr, &gaussians);
        assert_relative_eq!(opacity, 0.4, epsilon = 1e-12);
        assert_relative_eq!(scale.x, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn selection_matches_brute_force_ranking() {
        let gaussians = random_gaussians(100, 11, 0.5);
        let cfg = PipelineConfig {
            r_match: 0.2,
            ..PipelineConfig::default()
        };
        let index = CentroidIndex::from_gaussians(&gaussians, cfg.r_match).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let p = Vector3::new(
                rng.random_range(0.0..0.5),
                rng.random_range(0.0..0.5),
                rng.random_range(0.0..0.5),
            );
            let got = match_point(&p, &index, &gaussians, &cfg);
            let want = brute_force_match(&p, &gaussians, &cfg);
            assert_eq!(got.neighbors, want.neighbors);
            for (a, b) in got.weights.iter().zip(&want.weights) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(
            inverse_distance_weights(&[1.0, 1.0, 1.0]).unwrap(),
            vec![1.0 / 3.0; 3]
        );
        // (1/1)/(1/1 + 1/2) = 2/3 by hand
        let w = inverse_distance_weights(&[1.0, 2.0]).unwrap();
        assert_relative_eq!(w[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(w[1], 1.0 / 3.0, epsilon = 1e-12);
        // coincident-point limit
        assert_eq!(inverse_distance_weights(&[0.0, 5.0]).unwrap(), vec![1.0, 0.0]);
        assert!(inverse_distance_weights(&[]).is_err());
    }

    #[test]
    fn aggregation_identity_and_mean() {
        let gaussians = vec![
            gaussian_at([0.0, 0.0, 0.0], [0.1, 0.2, 0.3], 0.8),
            gaussian_at([1.0, 0.0, 0.0], [0.1, 0.2, 0.3], 0.2),
        ];
        let single = Correspondence {
            neighbors: vec![0],
            distances: vec![0.5],
            weights: vec![1.0],
            expanded: false,
        };
        let (scale, opacity) = aggregate_attributes(&single, &gaussians);
        assert_eq!(scale, Vector3::new(0.1, 0.2, 0.3));
        assert_eq!(opacity, 0.8);

        let pair = Correspondence {
            neighbors: vec![0, 1],
            distances: vec![1.0, 1.0],
            weights: vec![0.5, 0.5],
            expanded: false,
        };
        let (_, opacity) = aggregate_attributes(&pair, &gaussians);
        assert_relative_eq!(opacity, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn aggregation_matches_compensated_dot_product() {
        // Neumaier-compensated reference for the weighted sums.
        fn compensated_dot(ws: &[f64], xs: &[f64]) -> f64 {
            let mut sum = 0.0;
            let mut c = 0.0;
            for (&w, &x) in ws.iter().zip(xs) {
                let term = w * x;
                let t = sum + term;
                c += if sum.abs() >= term.abs() {
                    (sum - t) + term
                } else {
                    (term - t) + sum
                };
                sum = t;
            }
            sum + c
        }

        let gaussians = random_gaussians(40, 21, 0.2);
        let cfg = PipelineConfig {
            r_match: 0.3,
            ..PipelineConfig::default()
        };
        let index = CentroidIndex::from_gaussians(&gaussians, cfg.r_match).unwrap();
        let corr = match_point(&Vector3::repeat(0.1), &index, &gaussians, &cfg);
        assert_eq!(corr.neighbors.len(), cfg.k);
        let (scale, opacity) = aggregate_attributes(&corr, &gaussians);

        let opacities: Vec<f64> = corr
            .neighbors
            .iter()
            .map(|&id| gaussians[id as usize].opacity())
            .collect();
        assert_relative_eq!(
            opacity,
            compensated_dot(&corr.weights, &opacities),
            epsilon = 1e-13
        );
        for axis in 0..3 {
            let components: Vec<f64> = corr
                .neighbors
                .iter()
                .map(|&id| gaussians[id as usize].scale()[axis])
                .collect();
            assert_relative_eq!(
                scale[axis],
                compensated_dot(&corr.weights, &components),
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn isolated_point_doubles_radius_then_gives_up() {
        let gaussians = vec![gaussian_at([0.0, 0.0, 0.0], [0.05, 0.05, 0.05], 0.5)];
        let cfg = PipelineConfig::default(); // r_match = 0.1, max reach 3.2
        let index = CentroidIndex::from_gaussians(&gaussians, cfg.r_match).unwrap();

        // reachable after doubling: distance 1.0 < 0.1 * 2^5
        let near = match_point(&Vector3::new(1.0, 0.0, 0.0), &index, &gaussians, &cfg);
        assert!(near.is_matched());
        assert!(near.expanded);

        // beyond the final doubled radius
        let far = match_point(&Vector3::new(10.0, 0.0, 0.0), &index, &gaussians, &cfg);
        assert!(!far.is_matched());
        assert!(far.expanded);
        assert!(far.neighbors.is_empty());
    }

    #[test]
    fn empty_gaussian_set_yields_unmatched_points() {
        let points = vec![CloudPoint::new(
            Vector3::zeros(),
            Vector3::repeat(0.5),
            Vector3::zeros(),
        )];
        let (aug, corr) = augment_cloud(&points, &[], &PipelineConfig::default()).unwrap();
        assert!(!aug[0].matched);
        assert_eq!(aug[0].scale, Vector3::zeros());
        assert_eq!(aug[0].opacity, 0.0);
        assert_eq!(corr.unmatched_count(), 1);
    }

    #[test]
    fn point_atop_single_gaussian_copies_attributes() {
        let gaussians = vec![gaussian_at([0.2, 0.3, 0.4], [0.01, 0.02, 0.03], 0.9)];
        let points = vec![CloudPoint::new(
            Vector3::new(0.2, 0.3, 0.4),
            Vector3::repeat(0.5),
            Vector3::zeros(),
        )];
        let (aug, _) = augment_cloud(&points, &gaussians, &PipelineConfig::default()).unwrap();
        assert!(aug[0].matched);
        assert_eq!(aug[0].scale, Vector3::new(0.01, 0.02, 0.03));
        assert_eq!(aug[0].opacity, 0.9);
    }

    #[test]
    fn augmentation_preserves_geometry_bitwise() {
        let gaussians = random_gaussians(300, 5, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let points: Vec<CloudPoint> = (0..100)
            .map(|_| {
                CloudPoint::new(
                    Vector3::new(
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    ),
                    Vector3::new(
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    ),
                    Vector3::zeros(),
                )
            })
            .collect();
        let (aug, _) = augment_cloud(&points, &gaussians, &PipelineConfig::default()).unwrap();
        for (a, p) in aug.iter().zip(&points) {
            assert_eq!(a.point.position, p.position);
            assert_eq!(a.point.color, p.color);
            assert_eq!(a.point.normal, p.normal);
        }
    }

    #[test]
    fn isotropic_covariances_reproduce_euclidean_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let gaussians: Vec<GaussianPrimitive> = (0..500)
            .map(|_| {
                GaussianPrimitive::new(
                    Vector3::new(
                        rng.random_range(0.0..0.5),
                        rng.random_range(0.0..0.5),
                        rng.random_range(0.0..0.5),
                    ),
                    Quaternion::new(1.0, 0.0, 0.0, 0.0),
                    Vector3::repeat(0.03),
                    rng.random_range(0.0..1.0),
                    vec![],
                    1e-8,
                )
                .unwrap()
            })
            .collect();
        let maha = PipelineConfig::default();
        let eucl = PipelineConfig {
            distance_metric: DistanceMetric::Euclidean,
            ..PipelineConfig::default()
        };
        let index = CentroidIndex::from_gaussians(&gaussians, maha.r_match).unwrap();
        for _ in 0..100 {
            let p = Vector3::new(
                rng.random_range(0.0..0.5),
                rng.random_range(0.0..0.5),
                rng.random_range(0.0..0.5),
            );
            let a = match_point(&p, &index, &gaussians, &maha);
            let b = match_point(&p, &index, &gaussians, &eucl);
            assert_eq!(a.neighbors, b.neighbors);
        }
    }

    proptest! {
        /// Weights form a simplex vector: nonnegative, summing to one.
        #[test]
        fn weights_live_on_the_simplex(distances in proptest::collection::vec(1e-9f64..10.0, 1..30)) {
            let w = inverse_distance_weights(&distances).unwrap();
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&x| x > 0.0));
        }

        /// Aggregates stay inside the neighbor min/max envelope — the blend
        /// is a convex combination.
        #[test]
        fn aggregate_respects_convex_hull(seed in 0u64..500) {
            let gaussians = random_gaussians(60, seed, 0.3);
            let cfg = PipelineConfig { r_match: 0.25, ..PipelineConfig::default() };
            let index = CentroidIndex::from_gaussians(&gaussians, cfg.r_match).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
            let p = Vector3::new(
                rng.random_range(0.0..0.3),
                rng.random_range(0.0..0.3),
                rng.random_range(0.0..0.3),
            );
            let corr = match_point(&p, &index, &gaussians, &cfg);
            prop_assume!(corr.is_matched());
            let (scale, opacity) = aggregate_attributes(&corr, &gaussians);
            let slack = 1e-12;
            for axis in 0..3 {
                let lo = corr.neighbors.iter()
                    .map(|&i| gaussians[i as usize].scale()[axis]).fold(f64::INFINITY, f64::min);
                let hi = corr.neighbors.iter()
                    .map(|&i| gaussians[i as usize].scale()[axis]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(scale[axis] >= lo - slack && scale[axis] <= hi + slack);
            }
            let lo = corr.neighbors.iter()
                .map(|&i| gaussians[i as usize].opacity()).fold(f64::INFINITY, f64::min);
            let hi = corr.neighbors.iter()
                .map(|&i| gaussians[i as usize].opacity()).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(opacity >= lo - slack && opacity <= hi + slack);
        }
    }
}
