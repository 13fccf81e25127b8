//! Motions under which every camera observation vector is parallel, plus the
//! zero-rotation cross-camera counterexample.
//!
//! Parallel observation vectors `v ∥ u` give `M2` the null vector `(u, 0)`,
//! so each construction below is degenerate whatever the features are.

use nalgebra::Vector3;

use crate::cluster::{ClusterCalibration, KeyframeMotion, Scenario};
use crate::error::Result;
use crate::geometry::{exp_so3, Rotation};
use crate::measurement::{synthesize_scenario, SynthConfig, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Observers {
    SameCamera,
    /// Feature anchored in camera `h` is observed by camera `(h + shift) % n_c`.
    Shifted(usize),
}

/// A cluster, a motion and an observation pattern; features are drawn freely.
#[derive(Debug, Clone)]
pub struct Construction {
    pub name: &'static str,
    pub calibration: ClusterCalibration,
    pub motion: KeyframeMotion,
    observers: Observers,
}

impl Construction {
    pub fn synth_config(&self, features: usize) -> SynthConfig {
        let n_c = self.calibration.camera_count();
        let topology = match self.observers {
            Observers::SameCamera => Topology::SameCamera,
            Observers::Shifted(s) => Topology::Explicit((0..features).map(|j| vec![(j % n_c + s) % n_c]).collect()),
        };
        SynthConfig::new(self.calibration.clone(), features, self.motion).topology(topology)
    }

    pub fn scenario(&self, features: usize, seed: u64) -> Result<Scenario> {
        synthesize_scenario(&self.synth_config(features), seed)
    }
}

/// No rotation, each feature re-observed by its own camera: every `v = t`.
pub fn pure_translation(calibration: ClusterCalibration, translation: Vector3<f64>) -> Construction {
    Construction {
        name: "pure-translation",
        calibration,
        motion: KeyframeMotion::new(translation, Vector3::zeros()),
        observers: Observers::SameCamera,
    }
}

/// Four coplanar cameras rotating about an axis inside their plane.
/// `(R − I)` maps every in-plane camera centre onto one line, and the
/// translation is chosen along that line.
pub fn inplane_rotation(radius: f64, angle: f64, lambda: f64) -> Construction {
    let omega = Vector3::new(angle, 0.0, 0.0);
    let r = exp_so3(&omega);
    let t = (r.matrix() - nalgebra::Matrix3::identity()) * Vector3::z() * lambda;
    Construction {
        name: "in-plane-rotation",
        calibration: ClusterCalibration::ring(4, radius),
        motion: KeyframeMotion::new(t, omega),
        observers: Observers::SameCamera,
    }
}

/// A four-camera ring turning a quarter turn so each camera takes its
/// neighbour's heading; that neighbour re-observes the features, and every
/// `v = t + (R − I)·centre`.
pub fn quarter_turn(radius: f64, translation: Vector3<f64>) -> Construction {
    Construction {
        name: "quarter-turn",
        calibration: ClusterCalibration::ring(4, radius),
        motion: KeyframeMotion::from_rotation(translation, Rotation::about_y(std::f64::consts::FRAC_PI_2)),
        observers: Observers::Shifted(1),
    }
}

/// Translation `λ (R − I) t_c` that keeps camera centre `camera` and the
/// reference camera on concentric circles.
pub fn degenerate_translation_line(
    calibration: &ClusterCalibration,
    camera: usize,
    omega: &Vector3<f64>,
    lambda: f64,
) -> Result<Vector3<f64>> {
    let t_c = calibration.extrinsic(camera)?.translation;
    Ok((exp_so3(omega).matrix() - nalgebra::Matrix3::identity()) * t_c * lambda)
}

/// Two back-to-back cameras whose centres move on concentric circles.
pub fn concentric_circles(baseline: f64, angle: f64, lambda: f64) -> Construction {
    let calibration = ClusterCalibration::back_to_back(baseline);
    let omega = Vector3::new(0.0, angle, 0.0);
    let t = degenerate_translation_line(&calibration, 1, &omega, lambda).expect("camera 1 exists");
    Construction {
        name: "concentric-circles",
        calibration,
        motion: KeyframeMotion::new(t, omega),
        observers: Observers::SameCamera,
    }
}

/// The four parallel-vector motions with default parameters.
pub fn all() -> Vec<Construction> {
    vec![
        pure_translation(ClusterCalibration::ring(3, 0.3), Vector3::new(0.3, -0.1, 0.4)),
        inplane_rotation(0.3, 0.25, 1.0),
        quarter_turn(0.3, Vector3::new(0.1, 0.05, 0.2)),
        concentric_circles(0.3, 0.25, 0.5),
    ]
}

/// Back-to-back pair, zero rotation, a long backwards translation so the
/// first `cross` features pass from one camera to the other.
pub fn cross_camera_zero_rotation(features: usize, cross: usize, seed: u64) -> Result<Scenario> {
    let motion = KeyframeMotion::new(Vector3::new(0.3, 0.2, -4.0), Vector3::zeros());
    let cfg = SynthConfig::new(ClusterCalibration::back_to_back(0.3), features, motion).cross_camera(cross);
    synthesize_scenario(&cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degeneracy::all_parallel;
    use crate::measurement::intermediate_vectors;

    fn vs(s: &Scenario) -> Vec<Vector3<f64>> {
        s.observations.pairs().map(|(j, k)| intermediate_vectors(s, j, k).unwrap().v).collect()
    }

    #[test]
    fn every_construction_has_parallel_vectors() {
        for c in all() {
            for seed in 0..20 {
                let s = c.scenario(10, seed).unwrap();
                assert!(all_parallel(&vs(&s), 1e-9), "{} seed {seed}", c.name);
            }
        }
    }

    #[test]
    fn quarter_turn_vectors_coincide() {
        let c = quarter_turn(0.3, Vector3::new(0.1, 0.05, 0.2));
        let s = c.scenario(8, 1).unwrap();
        let v = vs(&s);
        let expected = Vector3::new(0.1 - 0.3, 0.05, 0.2 + 0.3);
        for x in v {
            assert!((x - expected).amax() < 1e-12);
        }
        for (j, f) in s.features.iter().enumerate() {
            assert_eq!(s.observations.observers(j), &[(f.anchor + 1) % 4]);
        }
    }

    #[test]
    fn cross_camera_features_change_camera() {
        let s = cross_camera_zero_rotation(8, 2, 3).unwrap();
        for j in 0..2 {
            assert!(s.observations.observers(j).iter().all(|&i| i != s.features[j].anchor));
        }
    }
}
