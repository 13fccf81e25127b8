//! The calibrated cluster, the anchored feature model, the observation
//! topology, keyframe motion and the ordered state vector.
//!
//! Camera and feature indices are zero-based. Camera 0 defines the cluster
//! frame, and the first keyframe defines the target frame, so the only motion
//! to estimate is the pose of keyframe 1 relative to keyframe 2.

use std::fmt;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bearing_to_unit, exp_so3, Bearing, RigidTransform, Rotation};
use crate::measurement::intermediate_vectors;

/// Minimum `‖v × â‖ / ‖v‖` for an observation to carry depth information.
pub const COLLINEARITY_TOL: f64 = 1e-8;

/// Extrinsics `T_c,h` (camera `h` frame to cluster frame) of every camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCalibration {
    extrinsics: Vec<RigidTransform>,
}

impl ClusterCalibration {
    pub fn new(extrinsics: Vec<RigidTransform>) -> Result<Self> {
        let first = extrinsics
            .first()
            .ok_or_else(|| Error::InvalidScenario("cluster needs at least one camera".into()))?;
        let off = (first.to_homogeneous() - nalgebra::Matrix4::identity()).amax();
        if off > 1e-12 {
            return Err(Error::InvalidScenario(format!(
                "camera 0 defines the cluster frame and must have identity extrinsics (off by {off:e})"
            )));
        }
        Ok(Self { extrinsics })
    }

    pub fn camera_count(&self) -> usize {
        self.extrinsics.len()
    }

    pub fn extrinsics(&self) -> &[RigidTransform] {
        &self.extrinsics
    }

    pub fn extrinsic(&self, camera: usize) -> Result<&RigidTransform> {
        self.extrinsics.get(camera).ok_or(Error::IndexOutOfRange {
            what: "camera",
            index: camera,
            len: self.extrinsics.len(),
        })
    }

    /// A lone camera.
    pub fn single() -> Self {
        Self { extrinsics: vec![RigidTransform::identity()] }
    }

    /// `n` cameras on a horizontal ring of the given radius, each looking
    /// radially outwards, with headings evenly spaced about the `y` axis.
    /// Camera 0 sits at the origin looking along `+z`.
    pub fn ring(n: usize, radius: f64) -> Self {
        let extrinsics = (0..n)
            .map(|h| {
                let alpha = 2.0 * std::f64::consts::PI * h as f64 / n as f64;
                let t = Vector3::new(alpha.sin(), 0.0, alpha.cos() - 1.0) * radius;
                if h == 0 {
                    RigidTransform::identity()
                } else {
                    RigidTransform::new(Rotation::about_y(alpha), t)
                }
            })
            .collect();
        Self { extrinsics }
    }

    /// Two cameras looking outwards in opposite directions, centres
    /// `baseline` apart along the optical axis.
    pub fn back_to_back(baseline: f64) -> Self {
        Self::ring(2, baseline / 2.0)
    }
}

/// Anchor camera, bearing and depth of one point feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureParam {
    pub anchor: usize,
    pub bearing: Bearing,
    pub depth: f64,
}

impl FeatureParam {
    pub fn new(anchor: usize, phi: f64, theta: f64, depth: f64) -> Self {
        Self { anchor, bearing: Bearing::new(phi, theta), depth }
    }

    /// Position in the anchor camera frame at keyframe 1.
    pub fn anchor_position(&self) -> Result<Vector3<f64>> {
        Ok(bearing_to_unit(&self.bearing)? * self.depth)
    }
}

/// Observing cameras at keyframe 2, per feature, in observation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationMap(pub Vec<Vec<usize>>);

impl ObservationMap {
    pub fn observers(&self, feature: usize) -> &[usize] {
        &self.0[feature]
    }

    /// `m_o`, the total number of keyframe-2 observations.
    pub fn total(&self) -> usize {
        self.0.iter().map(Vec::len).sum()
    }

    /// `(feature, observation)` pairs in feature-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().enumerate().flat_map(|(j, obs)| (0..obs.len()).map(move |k| (j, k)))
    }
}

/// Pose of keyframe 1 relative to keyframe 2: `t_K` and `R_K = exp(ω_K)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeMotion {
    translation: Vector3<f64>,
    omega: Vector3<f64>,
    rotation: Rotation,
}

impl KeyframeMotion {
    pub fn new(translation: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Self { translation, omega, rotation: exp_so3(&omega) }
    }

    pub fn from_rotation(translation: Vector3<f64>, rotation: Rotation) -> Self {
        Self { translation, omega: rotation.log(), rotation }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn omega(&self) -> &Vector3<f64> {
        &self.omega
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    pub fn with_translation(&self, translation: Vector3<f64>) -> Self {
        Self { translation, ..*self }
    }

    /// `R_K ← exp(δ) R_K`; `ω_K` is re-extracted from the new rotation.
    pub fn perturbed_left(&self, delta: &Vector3<f64>) -> Self {
        Self::from_rotation(self.translation, exp_so3(delta).compose(&self.rotation))
    }

    /// `T_k2 = [R_Kᵀ, -R_Kᵀ t_K]`, the keyframe-2 cluster pose in the target frame.
    pub fn keyframe2_pose(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.translation).inverse()
    }
}

/// A complete two-keyframe problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub calibration: ClusterCalibration,
    pub features: Vec<FeatureParam>,
    pub observations: ObservationMap,
    pub motion: KeyframeMotion,
}

impl Scenario {
    /// Checks the index structure; the physical assumptions are checked by
    /// [`validate_assumptions`].
    pub fn new(
        calibration: ClusterCalibration,
        features: Vec<FeatureParam>,
        observations: ObservationMap,
        motion: KeyframeMotion,
    ) -> Result<Self> {
        if features.len() != observations.0.len() {
            return Err(Error::InvalidScenario(format!(
                "{} features but {} observation lists",
                features.len(),
                observations.0.len()
            )));
        }
        let n_c = calibration.camera_count();
        for (j, f) in features.iter().enumerate() {
            if f.anchor >= n_c {
                return Err(Error::InvalidScenario(format!(
                    "feature {j}: anchor camera {} out of range ({n_c} cameras)",
                    f.anchor
                )));
            }
            for &i in observations.observers(j) {
                if i >= n_c {
                    return Err(Error::InvalidScenario(format!(
                        "feature {j}: observing camera {i} out of range ({n_c} cameras)"
                    )));
                }
            }
        }
        Ok(Self { calibration, features, observations, motion })
    }

    pub fn feature_count(&self) -> usize {
        self.features.len()
    }

    pub fn observation_count(&self) -> usize {
        self.observations.total()
    }

    /// `n = 6 + 3 n_f`.
    pub fn state_dim(&self) -> usize {
        6 + 3 * self.features.len()
    }

    /// `m = 2 (n_f + m_o)`.
    pub fn measurement_dim(&self) -> usize {
        2 * (self.features.len() + self.observations.total())
    }

    pub fn with_motion(&self, motion: KeyframeMotion) -> Self {
        Self { motion, ..self.clone() }
    }

    /// Replaces depths, motion and bearings by the contents of `x`.
    pub fn with_state(&self, x: &StateVector) -> Result<Self> {
        let parts = split_state(x, self.features.len())?;
        let features = self
            .features
            .iter()
            .zip(parts.depths.iter().zip(&parts.bearings))
            .map(|(f, (&depth, &bearing))| FeatureParam { anchor: f.anchor, bearing, depth })
            .collect();
        Ok(Self {
            features,
            motion: KeyframeMotion::new(parts.translation, parts.omega),
            ..self.clone()
        })
    }
}

/// Flat state `[s₁..s_nf | t_K | ω_K | φ₁ θ₁ .. φ_nf θ_nf]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(pub DVector<f64>);

impl StateVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Column offsets of the state blocks for `n_f` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub features: usize,
}

impl StateLayout {
    pub fn new(features: usize) -> Self {
        Self { features }
    }

    pub fn dim(&self) -> usize {
        6 + 3 * self.features
    }

    pub fn depth(&self, j: usize) -> usize {
        j
    }

    pub fn translation(&self) -> usize {
        self.features
    }

    pub fn rotation(&self) -> usize {
        self.features + 3
    }

    pub fn bearing(&self, j: usize) -> usize {
        self.features + 6 + 2 * j
    }
}

/// The state split into its blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct StateParts {
    pub depths: Vec<f64>,
    pub translation: Vector3<f64>,
    pub omega: Vector3<f64>,
    pub bearings: Vec<Bearing>,
}

pub fn assemble_state(scenario: &Scenario) -> StateVector {
    let layout = StateLayout::new(scenario.features.len());
    let mut x = DVector::zeros(layout.dim());
    for (j, f) in scenario.features.iter().enumerate() {
        x[layout.depth(j)] = f.depth;
        x[layout.bearing(j)] = f.bearing.phi;
        x[layout.bearing(j) + 1] = f.bearing.theta;
    }
    x.fixed_rows_mut::<3>(layout.translation()).copy_from(scenario.motion.translation());
    x.fixed_rows_mut::<3>(layout.rotation()).copy_from(scenario.motion.omega());
    StateVector(x)
}

pub fn split_state(x: &StateVector, n_f: usize) -> Result<StateParts> {
    let layout = StateLayout::new(n_f);
    if x.len() != layout.dim() {
        return Err(Error::StateLength { got: x.len(), expected: layout.dim(), features: n_f });
    }
    let v = &x.0;
    Ok(StateParts {
        depths: (0..n_f).map(|j| v[layout.depth(j)]).collect(),
        translation: v.fixed_rows::<3>(layout.translation()).into_owned(),
        omega: v.fixed_rows::<3>(layout.rotation()).into_owned(),
        bearings: (0..n_f)
            .map(|j| Bearing::new(v[layout.bearing(j)], v[layout.bearing(j) + 1]))
            .collect(),
    })
}

/// Pose of a camera in the target frame at keyframe 1 or 2.
pub fn camera_pose_at_keyframe(
    calibration: &ClusterCalibration,
    motion: &KeyframeMotion,
    camera: usize,
    keyframe: u8,
) -> Result<RigidTransform> {
    let extrinsic = calibration.extrinsic(camera)?;
    match keyframe {
        1 => Ok(*extrinsic),
        2 => Ok(motion.keyframe2_pose().compose(extrinsic)),
        k => Err(Error::BadKeyframe(k)),
    }
}

/// Which modelling assumption a violation breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AssumptionKind {
    /// Malformed feature parameters (depth, bearing, indices).
    Structure,
    /// Single anchor observation at keyframe 1.
    Anchor,
    /// At least one keyframe-2 observation with a usable baseline.
    Baseline,
    /// Observed points in front of the observing camera.
    Visibility,
}

impl AssumptionKind {
    pub fn number(&self) -> Option<u8> {
        match self {
            AssumptionKind::Structure => None,
            AssumptionKind::Anchor => Some(1),
            AssumptionKind::Baseline => Some(2),
            AssumptionKind::Visibility => Some(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: AssumptionKind,
    pub feature: usize,
    pub observation: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind.number() {
            Some(n) => write!(f, "Assumption {n}: ")?,
            None => write!(f, "invalid feature: ")?,
        }
        write!(f, "feature {}", self.feature)?;
        if let Some(k) = self.observation {
            write!(f, " observation {k}")?;
        }
        write!(f, ": {}", self.message)
    }
}

/// Lists every violation of the modelling assumptions. Empty iff the
/// scenario is well posed.
pub fn validate_assumptions(scenario: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let n_c = scenario.calibration.camera_count();
    for (j, f) in scenario.features.iter().enumerate() {
        let mut push = |kind, observation, message: String| {
            out.push(Violation { kind, feature: j, observation, message })
        };
        let mut malformed = false;
        if !(f.depth > 0.0 && f.depth.is_finite()) {
            push(AssumptionKind::Structure, None, format!("depth must be positive (got {})", f.depth));
            malformed = true;
        }
        if !f.bearing.in_field_of_view() {
            push(
                AssumptionKind::Structure,
                None,
                format!("bearing ({}, {}) outside (-pi/2, pi/2)", f.bearing.phi, f.bearing.theta),
            );
            malformed = true;
        }
        if f.anchor >= n_c {
            push(AssumptionKind::Anchor, None, format!("anchor camera {} does not exist", f.anchor));
            malformed = true;
        }
        let observers = scenario.observations.0.get(j).map(Vec::as_slice).unwrap_or(&[]);
        if observers.is_empty() {
            push(AssumptionKind::Baseline, None, "not observed at keyframe 2".into());
            continue;
        }
        if let Some(&bad) = observers.iter().find(|&&i| i >= n_c) {
            push(AssumptionKind::Baseline, None, format!("observing camera {bad} does not exist"));
            malformed = true;
        }
        if malformed {
            continue;
        }
        let mut has_baseline = false;
        for (k, &observer) in observers.iter().enumerate() {
            let iv = match intermediate_vectors(scenario, j, k) {
                Ok(iv) => iv,
                Err(e) => {
                    push(AssumptionKind::Structure, Some(k), e.to_string());
                    continue;
                }
            };
            let z = iv.depth_in_observer;
            if !(z > 0.0 && z.is_finite()) {
                push(
                    AssumptionKind::Visibility,
                    Some(k),
                    format!("behind camera {observer} at keyframe 2 (z = {z:.6e})"),
                );
            }
            let vn = iv.v.norm();
            if vn > 0.0 && iv.v.cross(&iv.a).norm() / vn > COLLINEARITY_TOL {
                has_baseline = true;
            }
        }
        if !has_baseline {
            push(
                AssumptionKind::Baseline,
                None,
                "every camera observation vector is zero or collinear with the initial bearing".into(),
            );
        }
    }
    out
}

/// Observations whose camera observation vector is exactly zero. They are
/// allowed but add nothing to the depth or motion constraints.
pub fn zero_baseline_observations(scenario: &Scenario) -> Vec<(usize, usize)> {
    scenario
        .observations
        .pairs()
        .filter(|&(j, k)| {
            intermediate_vectors(scenario, j, k).map(|iv| iv.v == Vector3::zeros()).unwrap_or(false)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_feature() -> Scenario {
        Scenario::new(
            ClusterCalibration::single(),
            vec![FeatureParam::new(0, 0.1, 0.2, 2.0)],
            ObservationMap(vec![vec![0]]),
            KeyframeMotion::new(Vector3::new(0.3, 0.0, 0.0), Vector3::zeros()),
        )
        .unwrap()
    }

    #[test]
    fn state_layout_example() {
        let s = one_feature().with_motion(KeyframeMotion::identity());
        let x = assemble_state(&s);
        assert_eq!(x.as_slice(), &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1, 0.2]);
        let parts = split_state(&x, 1).unwrap();
        assert_eq!(parts.depths, vec![2.0]);
        assert_eq!(parts.bearings, vec![Bearing::new(0.1, 0.2)]);
        assert!(matches!(split_state(&x, 2), Err(Error::StateLength { .. })));
        assert_eq!(StateLayout::new(5).dim(), 21);
    }

    #[test]
    fn with_state_replaces_parameters() {
        let s = one_feature();
        let mut x = assemble_state(&s);
        x.0[0] = 7.0;
        x.0[4] = 0.25;
        let s2 = s.with_state(&x).unwrap();
        assert_eq!(s2.features[0].depth, 7.0);
        assert_eq!(s2.motion.omega().x, 0.25);
        assert_eq!(assemble_state(&s2), x);
    }

    #[test]
    fn calibration_requires_identity_first() {
        let bad = RigidTransform::new(Rotation::identity(), Vector3::new(0.1, 0.0, 0.0));
        assert!(ClusterCalibration::new(vec![bad]).is_err());
        assert!(ClusterCalibration::new(vec![]).is_err());
        let ring = ClusterCalibration::ring(3, 0.25);
        assert!(ClusterCalibration::new(ring.extrinsics().to_vec()).is_ok());
    }

    #[test]
    fn back_to_back_cameras_face_away() {
        let c = ClusterCalibration::back_to_back(0.4);
        let axis = c.extrinsics()[1].rotation.apply(&Vector3::z());
        assert_relative_eq!(axis, -Vector3::z(), epsilon = 1e-15);
        assert_relative_eq!(c.extrinsics()[1].translation, Vector3::new(0.0, 0.0, -0.4), epsilon = 1e-15);
    }

    #[test]
    fn camera_pose_cases() {
        let cal = ClusterCalibration::ring(3, 0.3);
        let m = KeyframeMotion::new(Vector3::new(0.5, -0.2, 1.0), Vector3::zeros());
        let p = camera_pose_at_keyframe(&cal, &m, 0, 1).unwrap();
        assert_eq!(p, RigidTransform::identity());
        let p2 = camera_pose_at_keyframe(&cal, &m, 0, 2).unwrap();
        assert_relative_eq!(*p2.rotation.matrix(), nalgebra::Matrix3::identity(), epsilon = 1e-15);
        assert_relative_eq!(p2.translation, -m.translation(), epsilon = 1e-15);
        assert!(camera_pose_at_keyframe(&cal, &m, 3, 1).is_err());
        assert!(camera_pose_at_keyframe(&cal, &m, 0, 3).is_err());
    }

    #[test]
    fn camera_pose_matches_matrix_product() {
        let cal = ClusterCalibration::ring(4, 0.3);
        let m = KeyframeMotion::new(Vector3::new(0.5, -0.2, 1.0), Vector3::new(0.1, 0.3, -0.2));
        let r = m.rotation().matrix();
        let mut tk = nalgebra::Matrix4::identity();
        tk.fixed_view_mut::<3, 3>(0, 0).copy_from(&r.transpose());
        tk.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-r.transpose() * m.translation()));
        for h in 0..4 {
            let expected = tk * cal.extrinsics()[h].to_homogeneous();
            let got = camera_pose_at_keyframe(&cal, &m, h, 2).unwrap().to_homogeneous();
            assert_relative_eq!(got, expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn scenario_rejects_bad_indices() {
        let s = one_feature();
        let e = Scenario::new(s.calibration.clone(), s.features.clone(), ObservationMap(vec![vec![1]]), s.motion);
        assert!(e.is_err());
        let e = Scenario::new(s.calibration.clone(), s.features.clone(), ObservationMap(vec![]), s.motion);
        assert!(e.is_err());
    }

    #[test]
    fn validation_flags_depth_and_visibility() {
        let mut s = one_feature();
        assert!(validate_assumptions(&s).is_empty());
        s.features[0].depth = -1.0;
        let v = validate_assumptions(&s);
        assert!(v[0].message.contains("depth must be positive"));

        // camera 1 looks backwards, so a feature in front of camera 0 is behind it
        let s = Scenario::new(
            ClusterCalibration::back_to_back(0.2),
            vec![FeatureParam::new(0, 0.0, 0.0, 3.0)],
            ObservationMap(vec![vec![1]]),
            KeyframeMotion::new(Vector3::new(0.2, 0.0, 0.0), Vector3::zeros()),
        )
        .unwrap();
        let v = validate_assumptions(&s);
        assert!(v.iter().any(|v| v.kind == AssumptionKind::Visibility));
        assert!(v[0].to_string().starts_with("Assumption 3"));
    }

    #[test]
    fn validation_flags_collinear_baseline() {
        // motion straight along the feature bearing
        let s = Scenario::new(
            ClusterCalibration::single(),
            vec![FeatureParam::new(0, 0.0, 0.0, 3.0)],
            ObservationMap(vec![vec![0, 0]]),
            KeyframeMotion::new(Vector3::new(0.0, 0.0, 0.5), Vector3::zeros()),
        )
        .unwrap();
        let v = validate_assumptions(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, AssumptionKind::Baseline);
        assert!(v[0].to_string().starts_with("Assumption 2"));
    }

    #[test]
    fn zero_baseline_is_flagged_but_allowed() {
        let s = Scenario::new(
            ClusterCalibration::back_to_back(0.2),
            vec![FeatureParam::new(0, 0.1, 0.0, 3.0)],
            ObservationMap(vec![vec![0]]),
            KeyframeMotion::identity(),
        )
        .unwrap();
        assert_eq!(zero_baseline_observations(&s), vec![(0, 0)]);
        assert!(!validate_assumptions(&s).is_empty());
    }
}
