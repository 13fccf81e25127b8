//! TOML scenario files.
//!
//! ```toml
//! [metadata]
//! seed = 7
//! description = "three cameras, eight features"
//! expected = "non_degenerate"
//!
//! [motion]
//! t = [0.4, -0.1, 0.3]
//! omega = [0.05, 0.2, -0.1]
//!
//! [[cameras]]
//! rotation = [0.0, 0.0, 0.0]           # axis-angle, or a 3×3 / 9-element row-major matrix
//! translation = [0.0, 0.0, 0.0]
//!
//! [[features]]
//! anchor = 0
//! phi = 0.1
//! theta = -0.2
//! depth = 3.5
//! observers = [0]
//! ```
//!
//! Camera indices are 0-based; the first camera defines the cluster frame and
//! must have identity extrinsics.

use std::fmt;
use std::path::Path;

use cluster_degen::cluster::{
    validate_assumptions, ClusterCalibration, FeatureParam, KeyframeMotion, ObservationMap, Scenario,
};
use cluster_degen::geometry::{exp_so3, RigidTransform, Rotation};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Matrices further than this from orthonormal are rejected.
pub const ORTHONORMAL_REJECT: f64 = 1e-6;
/// Matrices further than this (but within the reject limit) are repaired with a warning.
pub const ORTHONORMAL_WARN: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Documented classification: `degenerate`, `near_degenerate` or `non_degenerate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RotationSpec {
    AxisAngle([f64; 3]),
    Matrix([[f64; 3]; 3]),
    Flat([f64; 9]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub rotation: RotationSpec,
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub anchor: usize,
    pub phi: f64,
    pub theta: f64,
    pub depth: f64,
    /// Cameras observing the feature at keyframe 2.
    pub observers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    pub t: [f64; 3],
    pub omega: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub metadata: Metadata,
    pub motion: MotionSpec,
    pub cameras: Vec<CameraSpec>,
    pub features: Vec<FeatureSpec>,
}

/// A problem located by its path inside the document.
#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn issue(path: impl Into<String>, message: impl Into<String>) -> Issue {
    Issue { path: path.into(), message: message.into() }
}

/// A scenario read from a file, with any non-fatal warnings.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub file: ScenarioFile,
    pub scenario: Scenario,
    pub warnings: Vec<Issue>,
}

fn check_finite(path: &str, values: &[f64], issues: &mut Vec<Issue>) {
    if values.iter().any(|v| !v.is_finite()) {
        issues.push(issue(path, "values must be finite"));
    }
}

fn rotation_from_spec(path: &str, spec: &RotationSpec, issues: &mut Vec<Issue>, warnings: &mut Vec<Issue>) -> Option<Rotation> {
    let m = match spec {
        RotationSpec::AxisAngle(w) => {
            check_finite(path, w, issues);
            return w.iter().all(|v| v.is_finite()).then(|| exp_so3(&Vector3::from(*w)));
        }
        RotationSpec::Matrix(rows) => Matrix3::from_fn(|r, c| rows[r][c]),
        RotationSpec::Flat(v) => Matrix3::from_row_slice(v),
    };
    if m.iter().any(|v| !v.is_finite()) {
        issues.push(issue(path, "values must be finite"));
        return None;
    }
    let deviation = (m.transpose() * m - Matrix3::identity()).amax();
    let det = m.determinant();
    if deviation > ORTHONORMAL_REJECT || det <= 0.0 {
        issues.push(issue(
            path,
            format!("not a rotation matrix (max |RᵀR − I| = {deviation:.3e}, det = {det:.6})"),
        ));
        return None;
    }
    match Rotation::orthonormalize(&m) {
        Ok(r) => {
            if deviation > ORTHONORMAL_WARN {
                warnings.push(issue(path, format!("re-orthonormalized (max |RᵀR − I| = {deviation:.3e})")));
            }
            Some(r)
        }
        Err(e) => {
            issues.push(issue(path, e.to_string()));
            None
        }
    }
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, Vec<Issue>> {
        toml::from_str(text).map_err(|e| {
            let path = e.span().map_or_else(
                || "document".to_string(),
                |s| {
                    let before = &text[..s.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
                    format!("line {line}, column {col}")
                },
            );
            vec![issue(path, e.message().trim().to_string())]
        })
    }

    /// Builds the scenario, reporting every structural problem at once.
    /// Physical assumptions are checked separately by [`Loaded::violations`].
    pub fn to_scenario(&self) -> Result<(Scenario, Vec<Issue>), Vec<Issue>> {
        let mut issues = Vec::new();
        let mut warnings = Vec::new();
        if self.cameras.is_empty() {
            issues.push(issue("cameras", "at least one camera is required"));
        }
        let mut extrinsics = Vec::with_capacity(self.cameras.len());
        for (i, cam) in self.cameras.iter().enumerate() {
            let path = format!("cameras[{i}]");
            check_finite(&format!("{path}.translation"), &cam.translation, &mut issues);
            if let Some(r) = rotation_from_spec(&format!("{path}.rotation"), &cam.rotation, &mut issues, &mut warnings) {
                extrinsics.push(RigidTransform::new(r, Vector3::from(cam.translation)));
            }
        }
        if let Some(first) = extrinsics.first() {
            if self.cameras.len() == extrinsics.len()
                && ((first.rotation.matrix() - Matrix3::identity()).amax() > 1e-12 || first.translation.amax() > 1e-12)
            {
                issues.push(issue("cameras[0]", "the first camera defines the cluster frame and must be the identity"));
            }
        }
        let n_c = self.cameras.len();
        let mut features = Vec::with_capacity(self.features.len());
        let mut observers = Vec::with_capacity(self.features.len());
        for (j, f) in self.features.iter().enumerate() {
            let path = format!("features[{j}]");
            check_finite(&path, &[f.phi, f.theta, f.depth], &mut issues);
            if f.anchor >= n_c {
                issues.push(issue(format!("{path}.anchor"), format!("camera {} does not exist ({n_c} cameras)", f.anchor)));
            }
            for (k, &i) in f.observers.iter().enumerate() {
                if i >= n_c {
                    issues.push(issue(format!("{path}.observers[{k}]"), format!("camera {i} does not exist ({n_c} cameras)")));
                }
            }
            features.push(FeatureParam::new(f.anchor, f.phi, f.theta, f.depth));
            observers.push(f.observers.clone());
        }
        check_finite("motion.t", &self.motion.t, &mut issues);
        check_finite("motion.omega", &self.motion.omega, &mut issues);
        if !issues.is_empty() {
            return Err(issues);
        }
        let calibration = ClusterCalibration::new(extrinsics).map_err(|e| vec![issue("cameras", e.to_string())])?;
        let motion = KeyframeMotion::new(Vector3::from(self.motion.t), Vector3::from(self.motion.omega));
        let scenario = Scenario::new(calibration, features, ObservationMap(observers), motion)
            .map_err(|e| vec![issue("document", e.to_string())])?;
        Ok((scenario, warnings))
    }

    /// The file form of a scenario; rotations are written as axis-angle vectors.
    pub fn from_scenario(scenario: &Scenario, metadata: Metadata) -> Self {
        let cameras = scenario
            .calibration
            .extrinsics()
            .iter()
            .map(|e| CameraSpec {
                rotation: RotationSpec::AxisAngle(e.rotation.log().into()),
                translation: e.translation.into(),
            })
            .collect();
        let features = scenario
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| FeatureSpec {
                anchor: f.anchor,
                phi: f.bearing.phi,
                theta: f.bearing.theta,
                depth: f.depth,
                observers: scenario.observations.observers(j).to_vec(),
            })
            .collect();
        ScenarioFile {
            metadata,
            motion: MotionSpec { t: (*scenario.motion.translation()).into(), omega: (*scenario.motion.omega()).into() },
            cameras,
            features,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario files always serialize")
    }
}

impl Loaded {
    pub fn from_text(text: &str) -> Result<Self, Vec<Issue>> {
        let file = ScenarioFile::parse(text)?;
        let (scenario, warnings) = file.to_scenario()?;
        Ok(Loaded { file, scenario, warnings })
    }

    pub fn from_path(path: &Path) -> Result<Self, Vec<Issue>> {
        let text = std::fs::read_to_string(path).map_err(|e| vec![issue(path.display().to_string(), e.to_string())])?;
        Self::from_text(&text)
    }

    /// Modelling-assumption violations, located in the document.
    pub fn violations(&self) -> Vec<Issue> {
        validate_assumptions(&self.scenario)
            .into_iter()
            .map(|v| {
                let path = match v.observation {
                    Some(k) => format!("features[{}].observers[{k}]", v.feature),
                    None => format!("features[{}]", v.feature),
                };
                issue(path, v.to_string())
            })
            .collect()
    }
}
