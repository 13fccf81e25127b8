//! Forward measurement model, stacked measurement vectors, noise and
//! synthetic scenario generation.

use nalgebra::{DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cluster::{
    camera_pose_at_keyframe, validate_assumptions, ClusterCalibration, FeatureParam, KeyframeMotion,
    ObservationMap, Scenario,
};
use crate::error::{Error, Result};
use crate::geometry::{bearing_to_unit, direction_to_bearing, project_pinhole, ImagePoint};

/// Vectors describing observation `k` of feature `j` at keyframe 2, all
/// expressed in the keyframe-2 cluster frame.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateVectors {
    /// `â = R_K R_c,h p̂`, the initial bearing rotated into keyframe 2.
    pub a: Vector3<f64>,
    /// `b = t_K`.
    pub b: Vector3<f64>,
    /// `c = R_K t_c,h`.
    pub c: Vector3<f64>,
    /// `d = -t_c,i`.
    pub d: Vector3<f64>,
    /// `q = s â + b + c + d`, the feature relative to the observing camera centre.
    pub q: Vector3<f64>,
    /// Camera observation vector `v = b + c + d`.
    pub v: Vector3<f64>,
    /// `w = s â + c`.
    pub w: Vector3<f64>,
    /// `R_c,i`; its columns are the observing camera axes `n_x, n_y, n_z`.
    pub observer_rotation: Matrix3<f64>,
    /// `z = n_zᵀ q`, depth along the observing camera's optical axis.
    pub depth_in_observer: f64,
}

impl IntermediateVectors {
    /// The feature in the observing camera frame, `R_c,iᵀ q`.
    pub fn position_in_observer(&self) -> Vector3<f64> {
        self.observer_rotation.transpose() * self.q
    }
}

pub fn intermediate_vectors(scenario: &Scenario, j: usize, k: usize) -> Result<IntermediateVectors> {
    let f = scenario.features.get(j).ok_or(Error::IndexOutOfRange {
        what: "feature",
        index: j,
        len: scenario.features.len(),
    })?;
    let observers = scenario.observations.observers(j);
    let &i = observers.get(k).ok_or(Error::IndexOutOfRange {
        what: "observation",
        index: k,
        len: observers.len(),
    })?;
    let anchor = scenario.calibration.extrinsic(f.anchor)?;
    let observer = scenario.calibration.extrinsic(i)?;
    let r_k = scenario.motion.rotation();
    let p_hat = bearing_to_unit(&f.bearing)?;

    let a = r_k.apply(&anchor.rotation.apply(&p_hat));
    let b = *scenario.motion.translation();
    let c = r_k.apply(&anchor.translation);
    let d = -observer.translation;
    let v = b + c + d;
    let w = a * f.depth + c;
    let q = a * f.depth + v;
    let observer_rotation = *observer.rotation.matrix();
    let depth_in_observer = observer_rotation.column(2).dot(&q);
    Ok(IntermediateVectors { a, b, c, d, q, v, w, observer_rotation, depth_in_observer })
}

/// Image of feature `j` in camera `camera` at keyframe 1 or 2, evaluated
/// through the full chain `T_c,i⁻¹ T_kℓ⁻¹ T_c,h p`.
pub fn measure_feature(scenario: &Scenario, j: usize, camera: usize, keyframe: u8) -> Result<ImagePoint> {
    let f = scenario.features.get(j).ok_or(Error::IndexOutOfRange {
        what: "feature",
        index: j,
        len: scenario.features.len(),
    })?;
    let anchor = scenario.calibration.extrinsic(f.anchor)?;
    let target = anchor.transform_point(&f.anchor_position()?);
    let pose = camera_pose_at_keyframe(&scenario.calibration, &scenario.motion, camera, keyframe)?;
    let p = pose.inverse().transform_point(&target);
    project_pinhole(&p).map_err(|_| Error::FeatureBehindCamera { feature: j, camera, keyframe, z: p.z })
}

/// Measurements of one feature: keyframe-2 observations in order, then the
/// keyframe-1 anchor observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeasurements {
    pub observations: Vec<ImagePoint>,
    pub anchor: ImagePoint,
}

/// All measurements, feature-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub features: Vec<FeatureMeasurements>,
}

impl MeasurementSet {
    pub fn dim(&self) -> usize {
        self.features.iter().map(|f| 2 * (f.observations.len() + 1)).sum()
    }

    /// Shape `[n_o(0), n_o(1), ...]`.
    pub fn shape(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.observations.len()).collect()
    }

    /// The stacked `m`-vector.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for f in &self.features {
            for p in f.observations.iter().chain(std::iter::once(&f.anchor)) {
                out.push(p.u);
                out.push(p.v);
            }
        }
        DVector::from_vec(out)
    }

    /// Inverse of [`to_vector`](Self::to_vector) for a given shape.
    pub fn from_vector(shape: &[usize], z: &DVector<f64>) -> Result<Self> {
        let expected: usize = shape.iter().map(|n| 2 * (n + 1)).sum();
        if z.len() != expected {
            return Err(Error::Dimension(format!("measurement vector length {} != {expected}", z.len())));
        }
        let mut it = z.iter().copied();
        let mut next = || ImagePoint { u: it.next().unwrap_or_default(), v: it.next().unwrap_or_default() };
        let features = shape
            .iter()
            .map(|&n| {
                let observations = (0..n).map(|_| next()).collect();
                FeatureMeasurements { observations, anchor: next() }
            })
            .collect();
        Ok(Self { features })
    }
}

/// First row of feature `j`'s block in the stacked vector.
pub fn feature_row_offset(observations: &ObservationMap, j: usize) -> usize {
    observations.0[..j].iter().map(|o| 2 * (o.len() + 1)).sum()
}

pub fn stack_measurements(scenario: &Scenario) -> Result<MeasurementSet> {
    let features = scenario
        .features
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let observations = scenario
                .observations
                .observers(j)
                .iter()
                .map(|&i| measure_feature(scenario, j, i, 2))
                .collect::<Result<Vec<_>>>()?;
            let anchor = measure_feature(scenario, j, f.anchor, 1)?;
            Ok(FeatureMeasurements { observations, anchor })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeasurementSet { features })
}

/// Adds independent `N(0, σ²)` noise to every image coordinate.
pub fn add_noise(ms: &MeasurementSet, sigma: f64, seed: u64) -> Result<MeasurementSet> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidScenario(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(ms.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidScenario(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ms.clone();
    for f in &mut out.features {
        for p in f.observations.iter_mut().chain(std::iter::once(&mut f.anchor)) {
            p.u += normal.sample(&mut rng);
            p.v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// How keyframe-2 observers are chosen for synthetic features.
#[derive(Debug, Clone, PartialEq)]
pub enum Topology {
    /// The camera whose field of view contains the transformed feature,
    /// preferring the anchor camera.
    Auto,
    /// Every feature is observed only by its anchor camera.
    SameCamera,
    /// Fixed observer lists per feature.
    Explicit(Vec<Vec<usize>>),
}

/// Configuration for [`synthesize_scenario`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub calibration: ClusterCalibration,
    pub features: usize,
    pub topology: Topology,
    /// The first `cross_camera` features must be observed at keyframe 2 by a
    /// camera other than their anchor.
    pub cross_camera: usize,
    pub motion: KeyframeMotion,
    /// Bearings are drawn uniformly in `(-bearing_limit, bearing_limit)²`.
    pub bearing_limit: f64,
    /// Depths are drawn log-uniformly in this range (metres).
    pub depth_range: (f64, f64),
    /// Half-angle of the square field of view used to decide visibility
    /// at keyframe 2.
    pub fov_half_angle: f64,
    pub max_retries: usize,
}

impl SynthConfig {
    pub fn new(calibration: ClusterCalibration, features: usize, motion: KeyframeMotion) -> Self {
        Self {
            calibration,
            features,
            topology: Topology::Auto,
            cross_camera: 0,
            motion,
            bearing_limit: 0.6,
            depth_range: (1.0, 10.0),
            fov_half_angle: 0.9,
            max_retries: 1000,
        }
    }

    pub fn topology(mut self, topology: Topology) -> Self {
        self.topology = topology;
        self
    }

    pub fn cross_camera(mut self, k: usize) -> Self {
        self.cross_camera = k;
        self
    }
}

fn in_view(iv: &IntermediateVectors, fov_half_angle: f64) -> Option<f64> {
    let p = iv.position_in_observer();
    if !(p.z > 0.0) {
        return None;
    }
    let b = direction_to_bearing(&p).ok()?;
    let off_axis = b.phi.abs().max(b.theta.abs());
    (off_axis < fov_half_angle).then_some(off_axis)
}

/// Draws a random scenario satisfying every modelling assumption.
/// Deterministic for a fixed seed. Anchors are assigned round-robin except
/// for cross-camera features, whose anchor is drawn per attempt.
pub fn synthesize_scenario(config: &SynthConfig, seed: u64) -> Result<Scenario> {
    let n_c = config.calibration.camera_count();
    if config.cross_camera > config.features {
        return Err(Error::InvalidScenario(format!(
            "{} cross-camera features requested but only {} features",
            config.cross_camera, config.features
        )));
    }
    if config.cross_camera > 0 && n_c < 2 {
        return Err(Error::InvalidScenario("cross-camera observations need two or more cameras".into()));
    }
    if let Topology::Explicit(lists) = &config.topology {
        if lists.len() != config.features {
            return Err(Error::InvalidScenario(format!(
                "explicit topology has {} lists for {} features",
                lists.len(),
                config.features
            )));
        }
    }
    if config.cross_camera > 0 && config.topology == Topology::SameCamera {
        return Err(Error::InvalidScenario("same-camera topology excludes cross-camera features".into()));
    }
    let (d_lo, d_hi) = config.depth_range;
    if !(d_lo > 0.0 && d_hi >= d_lo) {
        return Err(Error::InvalidScenario("depth range must be positive and ordered".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lim = config.bearing_limit;
    let mut features = Vec::with_capacity(config.features);
    let mut observers = Vec::with_capacity(config.features);

    for j in 0..config.features {
        let cross = j < config.cross_camera;
        let mut placed = None;
        for _ in 0..config.max_retries {
            let anchor = if cross { rng.random_range(0..n_c) } else { j % n_c };
            let phi = rng.random_range(-lim..lim);
            let theta = rng.random_range(-lim..lim);
            let depth = (rng.random_range(d_lo.ln()..=d_hi.ln())).exp();
            let feature = FeatureParam::new(anchor, phi, theta, depth);

            // every camera as a candidate observer of this single feature
            let probe = Scenario {
                calibration: config.calibration.clone(),
                features: vec![feature],
                observations: ObservationMap(vec![(0..n_c).collect()]),
                motion: config.motion,
            };
            let views: Vec<Option<f64>> = (0..n_c)
                .map(|i| intermediate_vectors(&probe, 0, i).ok().and_then(|iv| in_view(&iv, config.fov_half_angle)))
                .collect();

            let chosen: Option<Vec<usize>> = match &config.topology {
                Topology::Explicit(lists) => {
                    let list = &lists[j];
                    let ok = !list.is_empty()
                        && list.iter().all(|&i| i < n_c && views[i].is_some())
                        && (!cross || list.iter().any(|&i| i != anchor));
                    ok.then(|| list.clone())
                }
                Topology::SameCamera => views[anchor].map(|_| vec![anchor]),
                Topology::Auto => {
                    if !cross && views[anchor].is_some() {
                        Some(vec![anchor])
                    } else {
                        views
                            .iter()
                            .enumerate()
                            .filter(|(i, v)| v.is_some() && !(cross && *i == anchor))
                            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                            .map(|(i, _)| vec![i])
                    }
                }
            };
            let Some(obs) = chosen else { continue };
            let candidate = Scenario {
                calibration: config.calibration.clone(),
                features: vec![feature],
                observations: ObservationMap(vec![obs.clone()]),
                motion: config.motion,
            };
            if validate_assumptions(&candidate).is_empty() {
                placed = Some((feature, obs));
                break;
            }
        }
        let (feature, obs) = placed.ok_or_else(|| {
            Error::CannotSatisfy(format!("feature {j}: no valid placement after {} attempts", config.max_retries))
        })?;
        features.push(feature);
        observers.push(obs);
    }
    Scenario::new(config.calibration.clone(), features, ObservationMap(observers), config.motion)
}
