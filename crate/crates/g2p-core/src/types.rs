//! Domain types shared by every pipeline stage.
//!
//! All types are immutable after construction and safe to share across
//! threads. Angles, lengths, and scales are meters; opacities live in [0,1]
//! (linear/probability space — the on-disk log/logit encodings are undone by
//! the loaders in [`crate::io`]).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::Serialize;

use crate::error::{ensure_finite, ensure_finite_slice, Error, Result};

/// Dimensionality of the augmented per-point feature tuple.
pub const AUGMENTED_DIM: usize = 13;

/// Default floor for covariance eigenvalues (m²). Splat scenes contain
/// near-planar Gaussians whose smallest axis would otherwise make the
/// covariance numerically singular.
pub const DEFAULT_EPSILON_SIGMA: f64 = 1e-8;

/// Distance used to rank candidate Gaussians during matching.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    /// Covariance-normalized distance; respects each Gaussian's anisotropy.
    #[default]
    Mahalanobis,
    /// Isotropic baseline that ignores Gaussian shape.
    Euclidean,
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mahalanobis" => Ok(DistanceMetric::Mahalanobis),
            "euclidean" => Ok(DistanceMetric::Euclidean),
            other => Err(Error::validation(
                "distance_metric",
                format!("unknown metric `{other}` (expected mahalanobis or euclidean)"),
            )),
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistanceMetric::Mahalanobis => write!(f, "mahalanobis"),
            DistanceMetric::Euclidean => write!(f, "euclidean"),
        }
    }
}

/// Conditioned 3×3 covariance of one Gaussian, with its cached inverse.
#[derive(Clone, Copy, Debug)]
pub struct Covariance3 {
    sigma: Matrix3<f64>,
    inverse: Matrix3<f64>,
    degenerate: bool,
}

impl Covariance3 {
    /// Builds the covariance of a Gaussian with the given rotation and
    /// per-axis extents: rotate a diagonal of squared scales back into world
    /// space. Eigenvalues below `floor` are clamped up before inversion and
    /// the result is flagged degenerate.
    pub fn from_rotation_scale(
        rotation: &UnitQuaternion<f64>,
        scale: &Vector3<f64>,
        floor: f64,
    ) -> Result<Self> {
        ensure_finite_slice("scale", scale.as_slice())?;
        ensure_finite_slice("rotation", rotation.coords.as_slice())?;
        if scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::validation(
                "scale",
                format!("components must be > 0, got {:?}", scale.as_slice()),
            ));
        }
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::validation(
                "epsilon_sigma",
                format!("floor must be a positive finite number, got {floor}"),
            ));
        }

        // The rotation and scales ARE the eigendecomposition, so conditioning
        // can clamp the squared scales directly instead of re-factorizing.
        let rot = rotation.to_rotation_matrix().into_inner();
        let mut degenerate = false;
        let eigen = scale.map(|s| {
            let v = s * s;
            if v < floor {
                degenerate = true;
                floor
            } else {
                v
            }
        });
        let sigma = rot * Matrix3::from_diagonal(&eigen) * rot.transpose();
        let inverse = rot * Matrix3::from_diagonal(&eigen.map(|v| 1.0 / v)) * rot.transpose();
        Ok(Covariance3 {
            sigma: symmetrize(&sigma),
            inverse: symmetrize(&inverse),
            degenerate,
        })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.sigma
    }

    pub fn inverse(&self) -> &Matrix3<f64> {
        &self.inverse
    }

    /// True when eigenvalue clamping occurred during conditioning.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Covariance-normalized length of `offset`: √(dᵀ Σ⁻¹ d).
    pub fn mahalanobis(&self, offset: &Vector3<f64>) -> f64 {
        let q = offset.dot(&(self.inverse * offset));
        // rounding can push a near-zero quadratic form slightly negative
        q.max(0.0).sqrt()
    }
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// One optimized scene Gaussian: centroid, orientation, per-axis extent,
/// opacity, and its raw spherical-harmonics payload (kept verbatim, never
/// evaluated).
#[derive(Clone, Debug)]
pub struct GaussianPrimitive {
    centroid: Vector3<f64>,
    rotation: UnitQuaternion<f64>,
    scale: Vector3<f64>,
    opacity: f64,
    sh: Vec<f32>,
    covariance: Covariance3,
}

impl GaussianPrimitive {
    /// Validates fields, normalizes the quaternion (given in (w,x,y,z)
    /// order), and caches the conditioned covariance.
    pub fn new(
        centroid: Vector3<f64>,
        rotation: Quaternion<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        sh: Vec<f32>,
        epsilon_sigma: f64,
    ) -> Result<Self> {
        ensure_finite_slice("centroid", centroid.as_slice())?;
        ensure_finite("opacity", opacity)?;
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::validation(
                "opacity",
                format!("must lie in [0,1], got {opacity}"),
            ));
        }
        let norm = rotation.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::validation(
                "rotation",
                format!("quaternion with norm {norm} cannot be normalized"),
            ));
        }
        let rotation = UnitQuaternion::from_quaternion(rotation);
        let covariance = Covariance3::from_rotation_scale(&rotation, &scale, epsilon_sigma)?;
        Ok(GaussianPrimitive {
            centroid,
            rotation,
            scale,
            opacity,
            sh,
            covariance,
        })
    }

    pub fn centroid(&self) -> &Vector3<f64> {
        &self.centroid
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    /// Per-axis extents in linear space (meters).
    pub fn scale(&self) -> &Vector3<f64> {
        &self.scale
    }

    /// Blending opacity in [0,1].
    pub fn opacity(&self) -> f64 {
        self.opacity
    }

    pub fn sh(&self) -> &[f32] {
        &self.sh
    }

    pub fn covariance(&self) -> &Covariance3 {
        &self.covariance
    }

    /// Mahalanobis distance from this Gaussian's centroid to `point` under
    /// the Gaussian's own covariance.
    pub fn mahalanobis_to(&self, point: &Vector3<f64>) -> f64 {
        self.covariance.mahalanobis(&(point - self.centroid))
    }
}

/// One input point: coordinates, color, normal, optional semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudPoint {
    pub position: Vector3<f64>,
    /// RGB in [0,1].
    pub color: Vector3<f64>,
    /// Unit vector, or zero when the source file carried no normals.
    pub normal: Vector3<f64>,
    pub label: Option<u16>,
    /// Explicit background override; `None` derives the answer from `label`.
    pub background: Option<bool>,
}

impl CloudPoint {
    pub fn new(position: Vector3<f64>, color: Vector3<f64>, normal: Vector3<f64>) -> Self {
        CloudPoint {
            position,
            color,
            normal,
            label: None,
            background: None,
        }
    }

    pub fn with_label(mut self, label: u16) -> Self {
        self.label = Some(label);
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite_slice("position", self.position.as_slice())?;
        ensure_finite_slice("color", self.color.as_slice())?;
        ensure_finite_slice("normal", self.normal.as_slice())?;
        if self.color.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::validation(
                "color",
                format!("components must lie in [0,1], got {:?}", self.color.as_slice()),
            ));
        }
        let n = self.normal.norm();
        if n != 0.0 && (n - 1.0).abs() > 1e-4 {
            return Err(Error::validation(
                "normal",
                format!("must be unit or zero, got norm {n}"),
            ));
        }
        Ok(())
    }

    /// Background status: explicit flag wins, otherwise the label is looked
    /// up in the configured background class set.
    pub fn is_background(&self, background_ids: &BTreeSet<u16>) -> bool {
        match self.background {
            Some(flag) => flag,
            None => self
                .label
                .map(|l| background_ids.contains(&l))
                .unwrap_or(false),
        }
    }
}

/// A point extended with aggregated Gaussian scale and opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPoint {
    pub point: CloudPoint,
    /// Aggregated per-axis scale (meters), componentwise convex combination
    /// of the matched Gaussians' scales.
    pub scale: Vector3<f64>,
    /// Aggregated opacity in [0,1].
    pub opacity: f64,
    /// False when no Gaussian could be matched even after radius fallback.
    pub matched: bool,
}

impl AugmentedPoint {
    /// The full 13-dim numeric feature: (position, color, normal, scale,
    /// opacity).
    pub fn feature(&self) -> [f64; AUGMENTED_DIM] {
        let p = &self.point;
        [
            p.position.x,
            p.position.y,
            p.position.z,
            p.color.x,
            p.color.y,
            p.color.z,
            p.normal.x,
            p.normal.y,
            p.normal.z,
            self.scale.x,
            self.scale.y,
            self.scale.z,
            self.opacity,
        ]
    }
}

/// Matching result for a single point: neighbor ids, their distances under
/// the configured metric, and the normalized inverse-distance weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Correspondence {
    pub neighbors: Vec<u32>,
    pub distances: Vec<f64>,
    /// Simplex weights: positive, summing to 1 whenever ≥ 1 neighbor.
    pub weights: Vec<f64>,
    /// True when the candidate radius had to be doubled to find neighbors.
    pub expanded: bool,
}

impl Correspondence {
    pub fn is_matched(&self) -> bool {
        !self.neighbors.is_empty()
    }
}

/// Per-point correspondences for a whole cloud, in input point order.
#[derive(Clone, Debug, Default)]
pub struct CorrespondenceSet {
    pub entries: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Points whose neighbor search needed radius doubling.
    pub fn expanded_count(&self) -> usize {
        self.entries.iter().filter(|e| e.expanded).count()
    }

    /// Points that stayed unmatched even after fallback.
    pub fn unmatched_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.is_matched()).count()
    }
}

/// Boundary membership of one point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BoundaryFlags {
    pub in_scale: bool,
    pub in_sem: bool,
    pub in_union: bool,
}

impl BoundaryFlags {
    /// Packs (matched, in_scale, in_sem, in_union) into bits 0..4 of a byte —
    /// the on-disk layout used by the augmented container and the
    /// boundary-only export.
    pub fn to_byte(self, matched: bool) -> u8 {
        (matched as u8)
            | (self.in_scale as u8) << 1
            | (self.in_sem as u8) << 2
            | (self.in_union as u8) << 3
    }

    /// Inverse of [`BoundaryFlags::to_byte`]; returns the flags and the
    /// matched bit.
    pub fn from_byte(byte: u8) -> (Self, bool) {
        (
            BoundaryFlags {
                in_scale: byte & 0b10 != 0,
                in_sem: byte & 0b100 != 0,
                in_union: byte & 0b1000 != 0,
            },
            byte & 1 != 0,
        )
    }
}

/// Boundary pseudo-labels for a cloud plus the realized scale threshold.
#[derive(Clone, Debug)]
pub struct BoundaryLabels {
    pub flags: Vec<BoundaryFlags>,
    /// Scale-magnitude threshold actually used (meters). NaN when the object
    /// set was empty (or the labels were loaded from a container that does
    /// not store it).
    pub threshold: f64,
}

impl BoundaryLabels {
    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn scale_count(&self) -> usize {
        self.flags.iter().filter(|f| f.in_scale).count()
    }

    pub fn sem_count(&self) -> usize {
        self.flags.iter().filter(|f| f.in_sem).count()
    }

    pub fn union_count(&self) -> usize {
        self.flags.iter().filter(|f| f.in_union).count()
    }
}

/// Every tunable of the attribute-transfer pipeline.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineConfig {
    /// Candidate prefilter radius (m) for the first matching stage.
    pub r_match: f64,
    /// Neighbors kept per point in the second stage.
    pub k: usize,
    /// Semantic boundary neighborhood radius (m).
    pub r_sem: f64,
    /// Prune fraction in (0,1): the largest-scale `eta` share of object
    /// points is discarded, the rest become scale-boundary points.
    pub eta: f64,
    /// Class ids treated as background and excluded from scale boundaries.
    pub background_ids: BTreeSet<u16>,
    /// Boundary loss weight.
    pub lambda_b: f64,
    /// Distillation loss weight.
    pub lambda_d: f64,
    /// Covariance eigenvalue floor (m²).
    pub epsilon_sigma: f64,
    pub distance_metric: DistanceMetric,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            r_match: 0.10,
            k: 20,
            r_sem: 0.04,
            eta: 0.7,
            background_ids: BTreeSet::from([0, 1]),
            lambda_b: 0.9,
            lambda_d: 0.4,
            epsilon_sigma: DEFAULT_EPSILON_SIGMA,
            distance_metric: DistanceMetric::Mahalanobis,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_match > 0.0 && self.r_match.is_finite()) {
            return Err(Error::validation("r_match", "must be > 0"));
        }
        if self.k < 1 {
            return Err(Error::validation("k", "must be >= 1"));
        }
        if !(self.r_sem > 0.0 && self.r_sem.is_finite()) {
            return Err(Error::validation("r_sem", "must be > 0"));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::validation("eta", "must lie strictly in (0,1)"));
        }
        if !(self.lambda_b >= 0.0 && self.lambda_b.is_finite()) {
            return Err(Error::validation("lambda_b", "must be >= 0"));
        }
        if !(self.lambda_d >= 0.0 && self.lambda_d.is_finite()) {
            return Err(Error::validation("lambda_d", "must be >= 0"));
        }
        if !(self.epsilon_sigma > 0.0 && self.epsilon_sigma.is_finite()) {
            return Err(Error::validation("epsilon_sigma", "must be > 0"));
        }
        Ok(())
    }

    /// Applies one `key=value` assignment using the field names of this
    /// struct. `background_ids` takes a comma-separated id list.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num(key: &str, value: &str) -> Result<f64> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::validation(key, format!("not a number: `{value}`")))
        }
        match key.trim() {
            "r_match" => self.r_match = num(key, value)?,
            "k" => {
                self.k = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::validation("k", format!("not an integer: `{value}`")))?
            }
            "r_sem" => self.r_sem = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "lambda_b" => self.lambda_b = num(key, value)?,
            "lambda_d" => self.lambda_d = num(key, value)?,
            "epsilon_sigma" => self.epsilon_sigma = num(key, value)?,
            "distance_metric" => self.distance_metric = value.parse()?,
            "background_ids" => {
                let mut ids = BTreeSet::new();
                for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    ids.insert(part.parse().map_err(|_| {
                        Error::validation("background_ids", format!("bad class id `{part}`"))
                    })?);
                }
                self.background_ids = ids;
            }
            other => {
                return Err(Error::validation(
                    "config",
                    format!("unknown key `{other}`"),
                ))
            }
        }
        Ok(())
    }

    /// Parses flat `key=value` text (one assignment per line, `#` comments),
    /// starting from the defaults.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        cfg.apply_kv_text(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::validation("config", format!("line {}: expected key=value", lineno + 1))
            })?;
            self.set(key, value)?;
        }
        self.validate()
    }
}
