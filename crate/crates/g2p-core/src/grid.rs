//! Uniform voxel grid over Gaussian centroids — the first-stage candidate
//! prefilter. Indoor splat scenes are dense and bounded, so a grid walk beats
//! a tree here and builds trivially.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::types::GaussianPrimitive;

/// Immutable radius-query index over a fixed set of positions.
///
/// Queries are exact: `radius_query` returns precisely the ids whose position
/// lies within the Euclidean ball, boundary ties included, sorted ascending.
#[derive(Clone, Debug)]
pub struct CentroidIndex {
    cell_edge: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    positions: Vec<Vector3<f64>>,
    bounds: Option<(Vector3<f64>, Vector3<f64>)>,
}

impl CentroidIndex {
    /// Builds the index with the given cell edge. The result is independent
    /// of input permutation: per-cell id lists are sorted ascending.
    pub fn build(positions: &[Vector3<f64>], cell_edge: f64) -> Result<Self> {
        if !(cell_edge > 0.0 && cell_edge.is_finite()) {
            return Err(Error::validation(
                "cell_edge",
                format!("must be > 0, got {cell_edge}"),
            ));
        }
        if positions.len() > u32::MAX as usize {
            return Err(Error::validation("positions", "more than u32::MAX entries"));
        }
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        let mut bounds: Option<(Vector3<f64>, Vector3<f64>)> = None;
        for (id, p) in positions.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::validation(
                    "positions",
                    format!("non-finite position at index {id}"),
                ));
            }
            cells.entry(cell_of(p, cell_edge)).or_default().push(id as u32);
            bounds = Some(match bounds {
                None => (*p, *p),
                Some((lo, hi)) => (lo.inf(p), hi.sup(p)),
            });
        }
        for ids in cells.values_mut() {
            ids.sort_unstable();
        }
        Ok(CentroidIndex {
            cell_edge,
            cells,
            positions: positions.to_vec(),
            bounds,
        })
    }

    /// Convenience: index the centroids of a Gaussian set.
    pub fn from_gaussians(gaussians: &[GaussianPrimitive], cell_edge: f64) -> Result<Self> {
        let centroids: Vec<Vector3<f64>> = gaussians.iter().map(|g| *g.centroid()).collect();
        Self::build(&centroids, cell_edge)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn cell_edge(&self) -> f64 {
        self.cell_edge
    }

    /// Axis-aligned bounds of the indexed positions, `None` when empty.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        self.bounds
    }

    pub fn position(&self, id: u32) -> &Vector3<f64> {
        &self.positions[id as usize]
    }

    /// All ids with ‖position − center‖ ≤ radius, ascending.
    pub fn radius_query(&self, center: &Vector3<f64>, radius: f64) -> Vec<u32> {
        let mut out = Vec::new();
        self.radius_query_into(center, radius, &mut out);
        out
    }

    /// As [`CentroidIndex::radius_query`], reusing `out` to avoid
    /// reallocations in hot loops.
    pub fn radius_query_into(&self, center: &Vector3<f64>, radius: f64, out: &mut Vec<u32>) {
        out.clear();
        if !(radius > 0.0) || self.cells.is_empty() {
            return;
        }
        let r2 = radius * radius;
        let lo = cell_of(&(center - Vector3::repeat(radius)), self.cell_edge);
        let hi = cell_of(&(center + Vector3::repeat(radius)), self.cell_edge);
        for cx in lo.0..=hi.0 {
            for cy in lo.1..=hi.1 {
                for cz in lo.2..=hi.2 {
                    let Some(ids) = self.cells.get(&(cx, cy, cz)) else {
                        continue;
                    };
                    for &id in ids {
                        if (self.positions[id as usize] - center).norm_squared() <= r2 {
                            out.push(id);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

fn cell_of(p: &Vector3<f64>, edge: f64) -> (i64, i64, i64) {
    (
        (p.x / edge).floor() as i64,
        (p.y / edge).floor() as i64,
        (p.z / edge).floor() as i64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(positions: &[Vector3<f64>], center: &Vector3<f64>, r: f64) -> Vec<u32> {
        positions
            .iter()
            .enumerate()
            .filter(|(_, p)| (*p - center).norm_squared() <= r * r)
            .map(|(i, _)| i as u32)
            .collect()
    }

    fn random_positions(n: usize, seed: u64, extent: f64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(0.0..extent),
                    rng.random_range(0.0..extent),
                    rng.random_range(0.0..extent),
                )
            })
            .collect()
    }

    #[test]
    fn empty_index_answers_empty() {
        let idx = CentroidIndex::build(&[], 0.1).unwrap();
        assert!(idx.is_empty());
        assert!(idx.radius_query(&Vector3::zeros(), 100.0).is_empty());
    }

    #[test]
    fn distant_points_land_in_distinct_cells() {
        let a = Vector3::new(0.0, 0.0, 0.0);
        let b = Vector3::new(10.0, 0.0, 0.0);
        let idx = CentroidIndex::build(&[a, b], 0.1).unwrap();
        assert_eq!(idx.radius_query(&a, 1e-9), vec![0]);
        assert_eq!(idx.radius_query(&b, 1e-9), vec![1]);
    }

    #[test]
    fn radius_larger_than_scene_returns_everything() {
        let positions = random_positions(200, 7, 1.0);
        let idx = CentroidIndex::build(&positions, 0.1).unwrap();
        let all = idx.radius_query(&Vector3::repeat(0.5), 100.0);
        assert_eq!(all, (0..200).collect::<Vec<u32>>());
    }

    #[test]
    fn boundary_ties_are_included() {
        let positions = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(2.5, 0.0, 0.0)];
        let idx = CentroidIndex::build(&positions, 0.25).unwrap();
        assert_eq!(idx.radius_query(&Vector3::zeros(), 1.0), vec![0]);
        assert_eq!(idx.radius_query(&Vector3::zeros(), 2.5), vec![0, 1]);
    }

    #[test]
    fn matches_brute_force_on_random_scenes() {
        let positions = random_positions(10_000, 42, 2.0);
        let idx = CentroidIndex::build(&positions, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..200 {
            let c = Vector3::new(
                rng.random_range(-0.2..2.2),
                rng.random_range(-0.2..2.2),
                rng.random_range(-0.2..2.2),
            );
            let r = rng.random_range(0.01..0.5);
            assert_eq!(idx.radius_query(&c, r), brute_force(&positions, &c, r));
        }
    }

    #[test]
    fn permutation_of_input_preserves_query_results() {
        let positions = random_positions(500, 9, 1.0);
        let idx = CentroidIndex::build(&positions, 0.2).unwrap();

        let mut shuffled: Vec<(u32, Vector3<f64>)> =
            positions.iter().copied().enumerate().map(|(i, p)| (i as u32, p)).collect();
        shuffled.reverse();
        let remap: Vec<u32> = shuffled.iter().map(|(i, _)| *i).collect();
        let shuffled_positions: Vec<Vector3<f64>> = shuffled.iter().map(|(_, p)| *p).collect();
        let idx2 = CentroidIndex::build(&shuffled_positions, 0.2).unwrap();

        let center = Vector3::repeat(0.4);
        let direct = idx.radius_query(&center, 0.3);
        let mut remapped: Vec<u32> = idx2
            .radius_query(&center, 0.3)
            .into_iter()
            .map(|id| remap[id as usize])
            .collect();
        remapped.sort_unstable();
        assert_eq!(direct, remapped);
    }

    #[test]
    fn rejects_nonfinite_positions_and_bad_edge() {
        assert!(CentroidIndex::build(&[Vector3::new(f64::NAN, 0.0, 0.0)], 0.1).is_err());
        assert!(CentroidIndex::build(&[], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn query_equals_brute_force(
            seed in 0u64..1000,
            n in 0usize..400,
            r in 0.001f64..0.8,
            qx in -0.5f64..1.5, qy in -0.5f64..1.5, qz in -0.5f64..1.5,
        ) {
            let positions = random_positions(n, seed, 1.0);
            let idx = CentroidIndex::build(&positions, 0.15).unwrap();
            let center = Vector3::new(qx, qy, qz);
            prop_assert_eq!(
                idx.radius_query(&center, r),
                brute_force(&positions, &center, r)
            );
        }
    }
}
