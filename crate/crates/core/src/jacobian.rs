//! Closed-form measurement Jacobian, a finite-difference reference and rank
//! diagnostics.
//!
//! Columns follow [`StateLayout`]: depths, translation, rotation, bearings.
//! Rows follow [`MeasurementSet`](crate::measurement::MeasurementSet): for
//! each feature, its keyframe-2 observations in order and then its anchor
//! observation.
//!
//! The rotation columns are derivatives with respect to a left perturbation
//! `R_K ← exp(δ) R_K` taken at the current estimate, under which
//! `∂q/∂δ = -[s â + c]×` holds exactly.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3x2, RowVector3, Vector3};
use rayon::prelude::*;

use crate::cluster::{Scenario, StateLayout};
use crate::error::{Error, Result};
use crate::geometry::{skew, Bearing};
use crate::linalg::Spectrum;
use crate::measurement::{feature_row_offset, intermediate_vectors, stack_measurements};

/// Default relative tolerance for numerical rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// What a pair of Jacobian rows measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowKey {
    pub feature: usize,
    pub keyframe: u8,
    /// Observation index at keyframe 2, `None` for the anchor observation.
    pub observation: Option<usize>,
    /// First of the two rows.
    pub row: usize,
}

#[derive(Debug, Clone)]
pub struct JacobianBundle {
    pub matrix: DMatrix<f64>,
    pub rows: Vec<RowKey>,
    pub spectrum: Spectrum,
}

impl JacobianBundle {
    /// `n` singular values, descending.
    pub fn singular_values(&self) -> &DVector<f64> {
        &self.spectrum.singular_values
    }

    pub fn row_of(&self, feature: usize, observation: Option<usize>) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.feature == feature && r.observation == observation)
            .map(|r| r.row)
    }
}

/// Derivative of the anchor image point with respect to `(φ, θ)`.
pub fn bearing_block(mu: &Bearing) -> Matrix2<f64> {
    let (tp, tt) = (mu.phi.tan(), mu.theta.tan());
    let (cp, ct) = (mu.phi.cos(), mu.theta.cos());
    Matrix2::new(-tp * tp - 1.0, 0.0, tp * tt / cp, 1.0 / (cp * ct * ct))
}

/// `∂p̂/∂(φ, θ)` for the unit bearing vector.
fn unit_bearing_derivative(mu: &Bearing) -> Matrix3x2<f64> {
    let (sp, cp) = mu.phi.sin_cos();
    let (st, ct) = mu.theta.sin_cos();
    Matrix3x2::new(cp * ct, -sp * st, 0.0, -ct, -sp * ct, -cp * st)
}

/// The anchor observation's two rows: zero except the bearing block.
pub fn anchor_rows(scenario: &Scenario, j: usize) -> Result<DMatrix<f64>> {
    let f = scenario.features.get(j).ok_or(Error::IndexOutOfRange {
        what: "feature",
        index: j,
        len: scenario.features.len(),
    })?;
    let layout = StateLayout::new(scenario.feature_count());
    let mut rows = DMatrix::zeros(2, layout.dim());
    rows.fixed_view_mut::<2, 2>(0, layout.bearing(j)).copy_from(&bearing_block(&f.bearing));
    Ok(rows)
}

/// Rows of observation `k` of feature `j` at keyframe 2:
/// `z⁻² [-(n_y × q)ᵀ; (n_x × q)ᵀ] ∂q/∂x`.
pub fn observation_rows(scenario: &Scenario, j: usize, k: usize) -> Result<DMatrix<f64>> {
    let iv = intermediate_vectors(scenario, j, k)?;
    let z = iv.depth_in_observer;
    if !(z > 0.0) {
        let camera = scenario.observations.observers(j)[k];
        return Err(Error::FeatureBehindCamera { feature: j, camera, keyframe: 2, z });
    }
    let f = &scenario.features[j];
    let n_x: Vector3<f64> = iv.observer_rotation.column(0).into_owned();
    let n_y: Vector3<f64> = iv.observer_rotation.column(1).into_owned();
    let inv_z2 = 1.0 / (z * z);
    let du: RowVector3<f64> = -(n_y.cross(&iv.q)).transpose() * inv_z2;
    let dv: RowVector3<f64> = n_x.cross(&iv.q).transpose() * inv_z2;

    let dq_ds = iv.a;
    let dq_dw = -skew(&iv.w);
    let anchor = scenario.calibration.extrinsic(f.anchor)?;
    let dq_dmu = scenario.motion.rotation().matrix()
        * anchor.rotation.matrix()
        * unit_bearing_derivative(&f.bearing)
        * f.depth;

    let layout = StateLayout::new(scenario.feature_count());
    let mut rows = DMatrix::zeros(2, layout.dim());
    for (r, d) in [du, dv].iter().enumerate() {
        rows[(r, layout.depth(j))] = d.dot(&dq_ds.transpose());
        rows.fixed_view_mut::<1, 3>(r, layout.translation()).copy_from(d);
        rows.fixed_view_mut::<1, 3>(r, layout.rotation()).copy_from(&(d * dq_dw));
        rows.fixed_view_mut::<1, 2>(r, layout.bearing(j)).copy_from(&(d * dq_dmu));
    }
    Ok(rows)
}

/// Stacks every observation's rows into the full `m × n` Jacobian.
type RowBlocks = Vec<(RowKey, DMatrix<f64>)>;

pub fn assemble_jacobian(scenario: &Scenario) -> Result<JacobianBundle> {
    let n_f = scenario.feature_count();
    let layout = StateLayout::new(n_f);
    let blocks: Vec<Result<RowBlocks>> = (0..n_f)
        .into_par_iter()
        .map(|j| {
            let mut row = feature_row_offset(&scenario.observations, j);
            let mut out = Vec::new();
            for k in 0..scenario.observations.observers(j).len() {
                let key = RowKey { feature: j, keyframe: 2, observation: Some(k), row };
                out.push((key, observation_rows(scenario, j, k)?));
                row += 2;
            }
            out.push((RowKey { feature: j, keyframe: 1, observation: None, row }, anchor_rows(scenario, j)?));
            Ok(out)
        })
        .collect();

    let mut matrix = DMatrix::zeros(scenario.measurement_dim(), layout.dim());
    let mut rows = Vec::with_capacity(scenario.observation_count() + n_f);
    for block in blocks {
        for (key, m) in block? {
            matrix.view_mut((key.row, 0), (2, layout.dim())).copy_from(&m);
            rows.push(key);
        }
    }
    let spectrum = Spectrum::of(&matrix);
    Ok(JacobianBundle { matrix, rows, spectrum })
}

/// Central differences of the stacked measurements. Rotation columns use the
/// same left perturbation as the analytic Jacobian.
pub fn fd_jacobian(scenario: &Scenario, step: f64) -> Result<DMatrix<f64>> {
    if !(step > 0.0) {
        return Err(Error::NonPositiveStep);
    }
    let n_f = scenario.feature_count();
    let layout = StateLayout::new(n_f);
    let measure = |s: &Scenario| -> Result<DVector<f64>> { Ok(stack_measurements(s)?.to_vector()) };
    let perturb = |col: usize, h: f64| -> Scenario {
        let mut s = scenario.clone();
        if col < layout.translation() {
            s.features[col].depth += h;
        } else if col < layout.rotation() {
            let mut t = *s.motion.translation();
            t[col - layout.translation()] += h;
            s.motion = s.motion.with_translation(t);
        } else if col < layout.bearing(0) {
            let mut delta = Vector3::zeros();
            delta[col - layout.rotation()] = h;
            s.motion = s.motion.perturbed_left(&delta);
        } else {
            let j = (col - layout.bearing(0)) / 2;
            if (col - layout.bearing(0)).is_multiple_of(2) {
                s.features[j].bearing.phi += h;
            } else {
                s.features[j].bearing.theta += h;
            }
        }
        s
    };
    let mut jac = DMatrix::zeros(scenario.measurement_dim(), layout.dim());
    for col in 0..layout.dim() {
        let plus = measure(&perturb(col, step))?;
        let minus = measure(&perturb(col, -step))?;
        jac.set_column(col, &((plus - minus) / (2.0 * step)));
    }
    Ok(jac)
}

/// Rank decision plus the smallest singular pair.
#[derive(Debug, Clone)]
pub struct GapReport {
    pub sigma_max: f64,
    /// `σ_n`, the smallest singular value.
    pub sigma_min: f64,
    /// `σ_{n-1}`.
    pub sigma_next: f64,
    /// Unit right singular vector of `σ_n`.
    pub null_direction: DVector<f64>,
}

/// Rank as the count of `σ_i > rel_tol · σ_max`.
pub fn jacobian_rank(bundle: &JacobianBundle, rel_tol: f64) -> (usize, GapReport) {
    let sv = &bundle.spectrum.singular_values;
    let n = sv.len();
    let report = GapReport {
        sigma_max: bundle.spectrum.max(),
        sigma_min: bundle.spectrum.min(),
        sigma_next: if n >= 2 { sv[n - 2] } else { f64::NAN },
        null_direction: bundle.spectrum.null_direction(),
    };
    (bundle.spectrum.rank(rel_tol), report)
}

/// Largest `|a - b| / max(1, |b|)` over all entries.
pub fn max_relative_difference(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}
