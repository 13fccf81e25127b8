//! Levenberg–Marquardt bundle adjustment over the two-keyframe state.
//!
//! The update solves `(JᵀJ + λ diag(JᵀJ)) δ = Jᵀ ε` with `ε = z − h(x)`.
//! Depths, translation and bearings are updated additively; the rotation is
//! updated on the left, `R_K ← exp(δω) R_K`, matching the Jacobian columns.
//!
//! Every evaluated iterate is rank-checked: when `J` loses column rank the
//! least-squares problem has no unique minimiser and the solver stops with
//! [`Termination::Degenerate`] instead of reporting an arbitrary point.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{assemble_state, FeatureParam, Scenario, StateLayout, StateVector};
use crate::error::{Error, Result};
use crate::geometry::Bearing;
use crate::jacobian::{assemble_jacobian, DEFAULT_RANK_TOL};
use crate::linalg::Spectrum;
use crate::measurement::{stack_measurements, MeasurementSet};

/// Condition number above which the damped normal matrix is treated as singular.
pub const MAX_CONDITION: f64 = 1e14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tol: f64,
    /// Stop when `‖δ‖ ≤ step_tol (‖x‖ + step_tol)`.
    pub step_tol: f64,
    /// Cost at or below which the fit is exact for practical purposes.
    pub cost_floor: f64,
    /// Relative singular-value cut-off for the per-iterate rank check.
    pub rank_tol: f64,
    /// Give up once `λ` exceeds this without an accepted step.
    pub max_lambda: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            cost_tol: 1e-12,
            step_tol: 1e-12,
            cost_floor: 1e-28,
            rank_tol: DEFAULT_RANK_TOL,
            max_lambda: 1e16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    /// `J` is column-rank deficient: the solution is under-constrained.
    Degenerate,
    /// No cost-reducing step could be found.
    Stalled,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max_iterations",
            Termination::Degenerate => "degenerate",
            Termination::Stalled => "stalled",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub scenario: Scenario,
    pub iterations: usize,
    /// `½‖ε‖²` at the start and after every accepted step.
    pub cost_history: Vec<f64>,
    pub termination: Termination,
    /// `σ_min(J)/σ_max(J)` at the returned estimate.
    pub sigma_ratio: f64,
    /// `|⟨scale direction, v_min⟩|` at the returned estimate.
    pub scale_alignment: f64,
}

impl SolveResult {
    pub fn final_cost(&self) -> f64 {
        self.cost_history.last().copied().unwrap_or(f64::NAN)
    }

    pub fn state(&self) -> StateVector {
        assemble_state(&self.scenario)
    }
}

/// `ε = z − h(x)` and the cost `½ εᵀε`.
pub fn reprojection_error(scenario: &Scenario, z: &MeasurementSet) -> Result<(DVector<f64>, f64)> {
    let h = stack_measurements(scenario)?;
    if h.shape() != z.shape() {
        return Err(Error::Dimension(format!(
            "measurement shape {:?} does not match scenario shape {:?}",
            z.shape(),
            h.shape()
        )));
    }
    let eps = z.to_vector() - h.to_vector();
    let cost = 0.5 * eps.norm_squared();
    Ok((eps, cost))
}

/// One damped step `(JᵀJ + λ diag(JᵀJ)) δ = Jᵀ ε`.
pub fn lm_step(jacobian: &DMatrix<f64>, residual: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    if jacobian.nrows() != residual.len() {
        return Err(Error::Dimension(format!(
            "jacobian has {} rows but residual has {}",
            jacobian.nrows(),
            residual.len()
        )));
    }
    let jt = jacobian.transpose();
    let jtj = &jt * jacobian;
    let mut normal = jtj.clone();
    for i in 0..normal.nrows() {
        normal[(i, i)] += lambda * jtj[(i, i)];
    }
    let sv = normal.singular_values();
    let (max, min) = (sv.max(), sv.min());
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::NormalMatrixSingular { condition });
    }
    let rhs = jt * residual;
    match normal.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&rhs)),
        None => normal.lu().solve(&rhs).ok_or(Error::NormalMatrixSingular { condition }),
    }
}

/// Applies `δ` to the scenario: additive except for the left rotation update.
/// Fails if a depth becomes non-positive or a bearing leaves `(-π/2, π/2)²`.
pub fn apply_update(scenario: &Scenario, delta: &DVector<f64>) -> Result<Scenario> {
    let n_f = scenario.feature_count();
    let layout = StateLayout::new(n_f);
    if delta.len() != layout.dim() {
        return Err(Error::StateLength { got: delta.len(), expected: layout.dim(), features: n_f });
    }
    let mut features = Vec::with_capacity(n_f);
    for (j, f) in scenario.features.iter().enumerate() {
        let depth = f.depth + delta[layout.depth(j)];
        let b = layout.bearing(j);
        let bearing = Bearing::new(f.bearing.phi + delta[b], f.bearing.theta + delta[b + 1]);
        if !(depth > 0.0) {
            return Err(Error::InvalidScenario(format!("feature {j}: update makes depth {depth} non-positive")));
        }
        if !bearing.in_field_of_view() {
            return Err(Error::BearingOutsideFov { phi: bearing.phi, theta: bearing.theta });
        }
        features.push(FeatureParam { anchor: f.anchor, bearing, depth });
    }
    let t = scenario.motion.translation() + delta.fixed_rows::<3>(layout.translation());
    let omega: Vector3<f64> = delta.fixed_rows::<3>(layout.rotation()).into_owned();
    let motion = scenario.motion.with_translation(t).perturbed_left(&omega);
    Ok(Scenario { features, motion, ..scenario.clone() })
}

/// Unit tangent of uniformly rescaling all depths and the translation.
pub fn scale_direction(scenario: &Scenario) -> Result<DVector<f64>> {
    let n_f = scenario.feature_count();
    let layout = StateLayout::new(n_f);
    let mut d = DVector::zeros(layout.dim());
    for (j, f) in scenario.features.iter().enumerate() {
        d[layout.depth(j)] = f.depth;
    }
    d.fixed_rows_mut::<3>(layout.translation()).copy_from(scenario.motion.translation());
    let n = d.norm();
    if n > 0.0 {
        Ok(d / n)
    } else {
        Err(Error::ZeroScaleDirection)
    }
}

/// Diagnostic: how closely the weakest direction of `J` is the scale
/// direction (NaN when the scale direction is undefined).
pub fn scale_alignment(scenario: &Scenario, spectrum: &Spectrum) -> f64 {
    scale_direction(scenario).map_or(f64::NAN, |d| d.dot(&spectrum.null_direction()).abs())
}

/// Multiplies every state entry by `1 + p u`, `u ~ U[-1, 1]`.
pub fn perturb_state(x: &StateVector, fraction: f64, seed: u64) -> StateVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    StateVector(x.0.map(|v| v * (1.0 + fraction * rng.random_range(-1.0..=1.0))))
}

struct Evaluation {
    residual: DVector<f64>,
    cost: f64,
}

fn evaluate(scenario: &Scenario, z: &MeasurementSet) -> Result<Evaluation> {
    let (residual, cost) = reprojection_error(scenario, z)?;
    Ok(Evaluation { residual, cost })
}

/// Minimises the reprojection error from `initial`, which also supplies the
/// calibration and observation structure.
pub fn lm_solve(initial: &Scenario, measurements: &MeasurementSet, options: &SolverOptions) -> Result<SolveResult> {
    let mut current = initial.clone();
    let mut eval = evaluate(&current, measurements)?;
    let mut cost_history = vec![eval.cost];
    let mut lambda = options.initial_lambda;
    let mut iterations = 0;

    let termination = loop {
        if eval.cost <= options.cost_floor {
            break Termination::Converged;
        }
        if iterations >= options.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;
        let bundle = assemble_jacobian(&current)?;
        if bundle.spectrum.rank(options.rank_tol) < current.state_dim() {
            break Termination::Degenerate;
        }

        let mut accepted = None;
        while lambda <= options.max_lambda {
            let delta = match lm_step(&bundle.matrix, &eval.residual, lambda) {
                Ok(d) => d,
                Err(Error::NormalMatrixSingular { .. }) => break,
                Err(e) => return Err(e),
            };
            let trial = apply_update(&current, &delta).and_then(|s| evaluate(&s, measurements).map(|e| (s, e)));
            match trial {
                Ok((s, e)) if e.cost < eval.cost => {
                    accepted = Some((s, e, delta));
                    lambda = (lambda / options.lambda_down).max(1e-12);
                    break;
                }
                _ => lambda *= options.lambda_up,
            }
        }
        let Some((next, next_eval, delta)) = accepted else {
            break if lambda > options.max_lambda { Termination::Stalled } else { Termination::Degenerate };
        };
        let reduction = (eval.cost - next_eval.cost) / eval.cost;
        let x_norm = assemble_state(&current).0.norm();
        current = next;
        eval = next_eval;
        cost_history.push(eval.cost);
        if reduction < options.cost_tol || delta.norm() <= options.step_tol * (x_norm + options.step_tol) {
            break Termination::Converged;
        }
    };

    let spectrum = assemble_jacobian(&current)?.spectrum;
    let termination = if termination != Termination::Degenerate && spectrum.rank(options.rank_tol) < current.state_dim() {
        Termination::Degenerate
    } else {
        termination
    };
    Ok(SolveResult {
        sigma_ratio: spectrum.ratio(),
        scale_alignment: scale_alignment(&current, &spectrum),
        scenario: current,
        iterations,
        cost_history,
        termination,
    })
}
