//! The reduced rank test and the determinant-locus sweeps.
//!
//! The measurement Jacobian has full column rank exactly when the `m_o × 6`
//! matrix `M2` does. Row `k` of feature `j` is the Plücker line
//! `[v × â ; w × (v × â)]`, built from the intermediate vectors of the
//! measurement chain. Degeneracy testing therefore reduces to a rank-6 test
//! on a matrix with one row per keyframe-2 observation.

use std::collections::BTreeSet;

use itertools::Itertools;
use nalgebra::{DMatrix, Matrix6, RowVector6, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{KeyframeMotion, Scenario};
use crate::error::{Error, Result};
use crate::jacobian::DEFAULT_RANK_TOL;
use crate::linalg::Spectrum;
use crate::measurement::intermediate_vectors;

/// The Plücker row of one observation: `[d ; w × d]` with `d = v × â`.
pub fn m2_row(a: &Vector3<f64>, v: &Vector3<f64>, w: &Vector3<f64>) -> RowVector6<f64> {
    let d = v.cross(a);
    let m = w.cross(&d);
    RowVector6::new(d.x, d.y, d.z, m.x, m.y, m.z)
}

/// `M2` with a `(feature, observation)` key per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedMatrixM2 {
    pub matrix: DMatrix<f64>,
    pub rows: Vec<(usize, usize)>,
}

impl ReducedMatrixM2 {
    pub fn row_count(&self) -> usize {
        self.matrix.nrows()
    }

    /// Largest relative violation of the line-coordinate constraint
    /// `direction · moment = 0` over all rows.
    pub fn plucker_violation(&self) -> f64 {
        self.matrix
            .row_iter()
            .map(|r| {
                let d = Vector3::new(r[0], r[1], r[2]);
                let m = Vector3::new(r[3], r[4], r[5]);
                d.dot(&m).abs() / (d.norm() * m.norm() + f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max)
    }

    /// The direction block (first three columns).
    pub fn direction_block(&self) -> DMatrix<f64> {
        self.matrix.columns(0, 3).into_owned()
    }
}

/// Rows in feature-major, observation-ascending order.
pub fn build_m2(scenario: &Scenario) -> Result<ReducedMatrixM2> {
    let rows: Vec<(usize, usize)> = scenario.observations.pairs().collect();
    let mut matrix = DMatrix::zeros(rows.len(), 6);
    for (r, &(j, k)) in rows.iter().enumerate() {
        let iv = intermediate_vectors(scenario, j, k)?;
        matrix.set_row(r, &m2_row(&iv.a, &iv.v, &iv.w));
    }
    Ok(ReducedMatrixM2 { matrix, rows })
}

/// Numerical rank and singular values (descending, six of them).
pub fn rank_m2(m2: &ReducedMatrixM2, rel_tol: f64) -> (usize, Vec<f64>) {
    let spectrum = Spectrum::of(&m2.matrix);
    (spectrum.rank(rel_tol), spectrum.singular_values.as_slice().to_vec())
}

/// Rank of the direction block; at most 2 whenever all `v` are parallel.
pub fn direction_block_rank(m2: &ReducedMatrixM2, rel_tol: f64) -> usize {
    Spectrum::of(&m2.direction_block()).rank(rel_tol)
}

/// Configurations that are degenerate for structural reasons alone.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SufficientFlags {
    /// The cluster has a single camera.
    pub single_camera: bool,
    /// Only one feature: its rows span at most two dimensions.
    pub single_feature_many_obs: bool,
    /// All non-zero observation vectors `v` are parallel.
    pub parallel_observation_vectors: bool,
    /// Fewer than six keyframe-2 observations.
    pub too_few_observations: bool,
}

impl SufficientFlags {
    pub fn any(&self) -> bool {
        self.single_camera || self.single_feature_many_obs || self.parallel_observation_vectors || self.too_few_observations
    }

    pub fn reasons(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.single_camera {
            out.push("cluster has a single camera".to_string());
        }
        if self.single_feature_many_obs {
            out.push("only one feature is observed".to_string());
        }
        if self.parallel_observation_vectors {
            out.push("all camera observation vectors are parallel".to_string());
        }
        if self.too_few_observations {
            out.push("fewer than six observations".to_string());
        }
        out
    }
}

/// `true` iff every pair of non-zero vectors satisfies
/// `‖a × b‖ / (‖a‖‖b‖) < tol`. Zero vectors are ignored.
pub fn all_parallel(vectors: &[Vector3<f64>], tol: f64) -> bool {
    let nonzero: Vec<&Vector3<f64>> = vectors.iter().filter(|v| v.norm() > 0.0).collect();
    nonzero
        .iter()
        .array_combinations()
        .all(|[a, b]| a.cross(b).norm() / (a.norm() * b.norm()) < tol)
}

pub fn detect_sufficient_conditions(scenario: &Scenario, parallel_tol: f64) -> Result<SufficientFlags> {
    let mut vs = Vec::with_capacity(scenario.observation_count());
    for (j, k) in scenario.observations.pairs() {
        vs.push(intermediate_vectors(scenario, j, k)?.v);
    }
    Ok(SufficientFlags {
        single_camera: scenario.calibration.camera_count() == 1,
        single_feature_many_obs: scenario.feature_count() == 1,
        parallel_observation_vectors: all_parallel(&vs, parallel_tol),
        too_few_observations: vs.len() < 6,
    })
}

/// Tolerances for [`classify`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Relative singular-value cut-off for the rank of `M2`.
    pub rank_tol: f64,
    /// `σ₆/σ₁` at or below this (but above `rank_tol`) is near-degenerate.
    pub near_degenerate: f64,
    /// Angular tolerance for the parallel observation vector test.
    pub parallel_tol: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { rank_tol: DEFAULT_RANK_TOL, near_degenerate: 1e-5, parallel_tol: 1e-9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Degenerate,
    NearDegenerate,
    NonDegenerate,
}

impl Classification {
    pub fn as_str(&self) -> &'static str {
        match self {
            Classification::Degenerate => "degenerate",
            Classification::NearDegenerate => "near_degenerate",
            Classification::NonDegenerate => "non_degenerate",
        }
    }
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct DegeneracyReport {
    pub m2: ReducedMatrixM2,
    pub rank_m2: usize,
    pub singular_values: Vec<f64>,
    /// `σ₆/σ₁` of `M2` (zero for a zero matrix).
    pub sigma_ratio: f64,
    pub flags: SufficientFlags,
    pub classification: Classification,
    pub reasons: Vec<String>,
    pub thresholds: Thresholds,
}

/// A scenario is degenerate when `rank(M2) < 6` or a sufficient condition
/// holds; otherwise near-degenerate when `σ₆/σ₁ ≤ near_degenerate`.
pub fn classify(scenario: &Scenario, thresholds: &Thresholds) -> Result<DegeneracyReport> {
    let m2 = build_m2(scenario)?;
    let (rank_m2, singular_values) = rank_m2(&m2, thresholds.rank_tol);
    let sigma_ratio = if singular_values[0] > 0.0 { singular_values[5] / singular_values[0] } else { 0.0 };
    let flags = detect_sufficient_conditions(scenario, thresholds.parallel_tol)?;
    let mut reasons = flags.reasons();
    if rank_m2 < 6 {
        reasons.push(format!("rank(M2) = {rank_m2} < 6"));
    }
    let classification = if rank_m2 < 6 || flags.any() {
        Classification::Degenerate
    } else if sigma_ratio <= thresholds.near_degenerate {
        reasons.push(format!("sigma6/sigma1 = {sigma_ratio:.3e} is small"));
        Classification::NearDegenerate
    } else {
        Classification::NonDegenerate
    };
    Ok(DegeneracyReport { m2, rank_m2, singular_values, sigma_ratio, flags, classification, reasons, thresholds: *thresholds })
}

// ---------------------------------------------------------------------------
// Determinant-locus sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        self as usize
    }

    fn remaining(a: Axis, b: Axis) -> Option<Axis> {
        [Axis::X, Axis::Y, Axis::Z].into_iter().find(|&c| c != a && c != b)
    }
}

/// A regular 2-D grid over two translation components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub axes: [Axis; 2],
    pub ranges: [(f64, f64); 2],
    pub steps: [usize; 2],
    /// Value of the third translation component; `None` keeps the template's.
    pub slice: Option<f64>,
    /// Rotation used at every cell; `None` keeps the template's.
    pub omega: Option<[f64; 3]>,
}

impl SweepGrid {
    /// The usual `t_x × t_y` grid at fixed `t_z`.
    pub fn tz_slice(x: (f64, f64), y: (f64, f64), steps: usize, tz: f64) -> Self {
        Self { axes: [Axis::X, Axis::Y], ranges: [x, y], steps: [steps, steps], slice: Some(tz), omega: None }
    }

    pub fn cell_count(&self) -> usize {
        self.steps[0] * self.steps[1]
    }

    /// Coordinate of grid line `i` along grid axis `g` (0 or 1).
    pub fn coordinate(&self, g: usize, i: usize) -> f64 {
        let (lo, hi) = self.ranges[g];
        if self.steps[g] <= 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (self.steps[g] - 1) as f64
        }
    }

    /// Cells are ordered with the first axis outermost.
    pub fn cell_index(&self, i0: usize, i1: usize) -> usize {
        i0 * self.steps[1] + i1
    }

    pub fn cell_coords(&self, cell: usize) -> (usize, usize) {
        (cell / self.steps[1], cell % self.steps[1])
    }

    fn validate(&self) -> Result<()> {
        if self.axes[0] == self.axes[1] {
            return Err(Error::InvalidScenario("sweep axes must differ".into()));
        }
        for g in 0..2 {
            let (lo, hi) = self.ranges[g];
            if self.steps[g] == 0 || !lo.is_finite() || !hi.is_finite() || hi < lo {
                return Err(Error::InvalidScenario(format!("bad range or step count on sweep axis {g}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// `|det|` below this marks a zero cell (rows are unit-normalised).
    pub abs_tol: f64,
    /// Upper bound on evaluated subsets once `m_o > 10`.
    pub max_subsets: usize,
    /// Seed for subset sampling when the cap applies.
    pub subset_seed: u64,
    /// Intersection radius in cells.
    pub radius: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { abs_tol: 1e-8, max_subsets: 210, subset_seed: 0, radius: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMetadata {
    pub observations: usize,
    /// `C(m_o, 6)`.
    pub total_subsets: u128,
    pub evaluated_subsets: usize,
    pub capped: bool,
    pub options: SweepOptions,
    pub warnings: Vec<String>,
}

/// A connected group of intersection cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub cells: Vec<(usize, usize)>,
    /// Mean translation of the cells.
    pub centroid: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionSet {
    pub radius: f64,
    pub cells: Vec<(usize, usize)>,
    pub components: Vec<Component>,
}

impl IntersectionSet {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub grid: SweepGrid,
    /// Translation of the template; the two swept components are overwritten per cell.
    pub base_translation: Vector3<f64>,
    pub omega: Vector3<f64>,
    /// Row indices of `M2` in each subset, ascending.
    pub subsets: Vec<[usize; 6]>,
    /// Cell-major: `determinants[cell * subsets.len() + s]`.
    pub determinants: Vec<f64>,
    /// `zero_crossings[s][cell]`.
    pub zero_crossings: Vec<Vec<bool>>,
    /// Intersections at the radius in `metadata.options`.
    pub intersections: IntersectionSet,
    pub metadata: SweepMetadata,
}

impl SweepResult {
    pub fn translation(&self, cell: usize) -> Vector3<f64> {
        let (i0, i1) = self.grid.cell_coords(cell);
        let mut t = self.base_translation;
        t[self.grid.axes[0].index()] = self.grid.coordinate(0, i0);
        t[self.grid.axes[1].index()] = self.grid.coordinate(1, i1);
        t
    }

    pub fn determinant(&self, cell: usize, subset: usize) -> f64 {
        self.determinants[cell * self.subsets.len() + subset]
    }

    /// Cells where subset `s` has a zero crossing.
    pub fn zero_cells(&self, s: usize) -> Vec<(usize, usize)> {
        self.zero_crossings[s]
            .iter()
            .enumerate()
            .filter(|(_, &z)| z)
            .map(|(c, _)| self.grid.cell_coords(c))
            .collect()
    }
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// All 6-subsets in lexicographic order, or a seeded sample of
/// `max_subsets` of them (sorted) when `m_o > 10` and the count exceeds the cap.
pub fn choose_subsets(m_o: usize, max_subsets: usize, seed: u64) -> (Vec<[usize; 6]>, bool) {
    let total = binomial(m_o, 6);
    if m_o <= 10 || total <= max_subsets as u128 {
        let all = (0..m_o).combinations(6).map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]]).collect();
        return (all, false);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = BTreeSet::new();
    while picked.len() < max_subsets {
        let mut idx = rand::seq::index::sample(&mut rng, m_o, 6).into_vec();
        idx.sort_unstable();
        picked.insert([idx[0], idx[1], idx[2], idx[3], idx[4], idx[5]]);
    }
    (picked.into_iter().collect(), true)
}

/// The `t`-independent pieces of one `M2` row: `v = t + v_offset`.
#[derive(Debug, Clone, Copy)]
struct RowPieces {
    a: Vector3<f64>,
    v_offset: Vector3<f64>,
    w: Vector3<f64>,
}

impl RowPieces {
    fn unit_row(&self, t: &Vector3<f64>) -> RowVector6<f64> {
        let r = m2_row(&self.a, &(t + self.v_offset), &self.w);
        let n = r.norm();
        if n > 0.0 {
            r / n
        } else {
            r
        }
    }
}

/// Evaluates the determinant of every 6-row subset of the unit-row `M2`
/// over a translation grid, with features and rotation held fixed.
pub fn sweep_translations(template: &Scenario, grid: &SweepGrid, options: &SweepOptions) -> Result<SweepResult> {
    grid.validate()?;
    let m_o = template.observation_count();
    if m_o < 6 {
        return Err(Error::TooFewObservations(m_o));
    }
    let omega = grid.omega.map(Vector3::from).unwrap_or(*template.motion.omega());
    let mut base_translation = *template.motion.translation();
    if let (Some(z), Some(third)) = (grid.slice, Axis::remaining(grid.axes[0], grid.axes[1])) {
        base_translation[third.index()] = z;
    }
    let scenario = template.with_motion(KeyframeMotion::new(base_translation, omega));
    let pieces: Vec<RowPieces> = scenario
        .observations
        .pairs()
        .map(|(j, k)| {
            intermediate_vectors(&scenario, j, k).map(|iv| RowPieces { a: iv.a, v_offset: iv.v - iv.b, w: iv.w })
        })
        .collect::<Result<_>>()?;

    let (subsets, capped) = choose_subsets(m_o, options.max_subsets, options.subset_seed);
    let n_cells = grid.cell_count();

    let per_cell: Vec<Vec<f64>> = (0..n_cells)
        .into_par_iter()
        .map(|cell| {
            let (i0, i1) = grid.cell_coords(cell);
            let mut t = base_translation;
            t[grid.axes[0].index()] = grid.coordinate(0, i0);
            t[grid.axes[1].index()] = grid.coordinate(1, i1);
            let rows: Vec<RowVector6<f64>> = pieces.iter().map(|p| p.unit_row(&t)).collect();
            subsets
                .iter()
                .map(|s| Matrix6::from_fn(|r, c| rows[s[r]][c]).determinant())
                .collect()
        })
        .collect();
    let determinants: Vec<f64> = per_cell.into_iter().flatten().collect();
    SweepResult::from_determinants(grid.clone(), base_translation, omega, subsets, determinants, m_o, capped, options)
}

impl SweepResult {
    /// Derives zero crossings, intersections and metadata from per-cell
    /// determinants (cell-major, `subsets.len()` per cell).
    #[allow(clippy::too_many_arguments)]
    pub fn from_determinants(
        grid: SweepGrid,
        base_translation: Vector3<f64>,
        omega: Vector3<f64>,
        subsets: Vec<[usize; 6]>,
        determinants: Vec<f64>,
        observations: usize,
        capped: bool,
        options: &SweepOptions,
    ) -> Result<Self> {
        grid.validate()?;
        let ns = subsets.len();
        if determinants.len() != ns * grid.cell_count() {
            return Err(Error::Dimension(format!(
                "{} determinants for {} cells x {} subsets",
                determinants.len(),
                grid.cell_count(),
                ns
            )));
        }
        let zero_crossings: Vec<Vec<bool>> = (0..ns)
            .into_par_iter()
            .map(|s| zero_crossing_mask(&grid, |cell| determinants[cell * ns + s], options.abs_tol))
            .collect();

        let mut warnings = Vec::new();
        if grid.steps[0] < 20 || grid.steps[1] < 20 {
            warnings.push(format!(
                "grid of {}x{} cells is coarse; zero crossings and intersections may be missed",
                grid.steps[0], grid.steps[1]
            ));
        }
        let total_subsets = binomial(observations, 6);
        if capped {
            warnings.push(format!("evaluated {} of {} subsets (seed {})", ns, total_subsets, options.subset_seed));
        }
        let metadata =
            SweepMetadata { observations, total_subsets, evaluated_subsets: ns, capped, options: *options, warnings };
        let mut result = SweepResult {
            grid,
            base_translation,
            omega,
            subsets,
            determinants,
            zero_crossings,
            intersections: IntersectionSet { radius: options.radius, cells: Vec::new(), components: Vec::new() },
            metadata,
        };
        result.intersections = intersect_loci(&result, options.radius);
        Ok(result)
    }
}

/// A cell is a zero crossing when `|det| < abs_tol` or its determinant has
/// the opposite sign to an axis neighbour (both cells are marked).
fn zero_crossing_mask(grid: &SweepGrid, det: impl Fn(usize) -> f64, abs_tol: f64) -> Vec<bool> {
    let [n0, n1] = grid.steps;
    let mut mask = vec![false; n0 * n1];
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            let c = grid.cell_index(i0, i1);
            let d = det(c);
            if d.abs() < abs_tol {
                mask[c] = true;
            }
            for (j0, j1) in [(i0 + 1, i1), (i0, i1 + 1)] {
                if j0 < n0 && j1 < n1 {
                    let n = grid.cell_index(j0, j1);
                    if d * det(n) < 0.0 {
                        mask[c] = true;
                        mask[n] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Cells within Euclidean index distance `radius` of a zero crossing of
/// every subset, grouped into 8-connected components.
pub fn intersect_loci(sweep: &SweepResult, radius: f64) -> IntersectionSet {
    let grid = &sweep.grid;
    let [n0, n1] = grid.steps;
    let r = radius.max(0.0).floor() as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .cartesian_product(-r..=r)
        .filter(|&(a, b)| ((a * a + b * b) as f64) <= radius * radius)
        .collect();

    let mut all = vec![!sweep.zero_crossings.is_empty(); n0 * n1];
    for mask in &sweep.zero_crossings {
        let mut near = vec![false; n0 * n1];
        for (c, _) in mask.iter().enumerate().filter(|(_, &z)| z) {
            let (i0, i1) = grid.cell_coords(c);
            for &(a, b) in &offsets {
                let (j0, j1) = (i0 as isize + a, i1 as isize + b);
                if j0 >= 0 && j1 >= 0 && (j0 as usize) < n0 && (j1 as usize) < n1 {
                    near[grid.cell_index(j0 as usize, j1 as usize)] = true;
                }
            }
        }
        for (x, n) in all.iter_mut().zip(near) {
            *x &= n;
        }
    }

    let cells: Vec<(usize, usize)> = (0..n0 * n1).filter(|&c| all[c]).map(|c| grid.cell_coords(c)).collect();
    let mut seen = vec![false; n0 * n1];
    let mut components = Vec::new();
    for &(i0, i1) in &cells {
        let start = grid.cell_index(i0, i1);
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![(i0, i1)];
        let mut members = Vec::new();
        while let Some((a, b)) = stack.pop() {
            members.push((a, b));
            for (da, db) in (-1isize..=1).cartesian_product(-1isize..=1) {
                let (x, y) = (a as isize + da, b as isize + db);
                if x < 0 || y < 0 || x as usize >= n0 || y as usize >= n1 {
                    continue;
                }
                let c = grid.cell_index(x as usize, y as usize);
                if all[c] && !seen[c] {
                    seen[c] = true;
                    stack.push((x as usize, y as usize));
                }
            }
        }
        members.sort_unstable();
        let centroid = members
            .iter()
            .map(|&(a, b)| sweep.translation(grid.cell_index(a, b)))
            .fold(Vector3::zeros(), |acc, t| acc + t)
            / members.len() as f64;
        components.push(Component { cells: members, centroid });
    }
    IntersectionSet { radius, cells, components }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{ClusterCalibration, FeatureParam, ObservationMap};
    use crate::constructions;
    use crate::jacobian::{assemble_jacobian, jacobian_rank};
    use crate::measurement::{synthesize_scenario, SynthConfig};
    use approx::assert_relative_eq;

    fn generic(cal: ClusterCalibration, features: usize, seed: u64) -> Scenario {
        let motion = KeyframeMotion::new(Vector3::new(0.4, -0.1, 0.3), Vector3::new(0.05, 0.2, -0.1));
        synthesize_scenario(&SynthConfig::new(cal, features, motion), seed).unwrap()
    }

    #[test]
    fn row_matches_skew_form() {
        // [−âᵀ[v]× , âᵀ[v]×[w]×]
        use crate::geometry::skew;
        let a = Vector3::new(0.2, -0.4, 0.9);
        let v = Vector3::new(1.0, 0.3, -0.2);
        let w = Vector3::new(-0.5, 2.0, 0.7);
        let r = m2_row(&a, &v, &w);
        let first = -(a.transpose() * skew(&v));
        let second = a.transpose() * skew(&v) * skew(&w);
        assert_relative_eq!(r.fixed_columns::<3>(0).into_owned(), first, epsilon = 1e-15);
        assert_relative_eq!(r.fixed_columns::<3>(3).into_owned(), second, epsilon = 1e-15);
    }

    #[test]
    fn row_vanishes_when_v_along_a() {
        let a = Vector3::new(0.0, 0.6, 0.8);
        let r = m2_row(&a, &(a * 2.5), &Vector3::new(1.0, 2.0, 3.0));
        assert!(r.fixed_columns::<3>(0).amax() < 1e-15);
    }

    #[test]
    fn rows_follow_observation_order() {
        let s = generic(ClusterCalibration::ring(3, 0.3), 7, 4);
        let m2 = build_m2(&s).unwrap();
        assert_eq!(m2.row_count(), s.observation_count());
        assert_eq!(m2.rows, s.observations.pairs().collect::<Vec<_>>());
        assert!(m2.plucker_violation() < 1e-12);
    }

    #[test]
    fn generic_rank_six_and_matches_jacobian() {
        let s = generic(ClusterCalibration::ring(2, 0.3), 6, 1);
        let (r, sv) = rank_m2(&build_m2(&s).unwrap(), 1e-9);
        assert_eq!(r, 6);
        assert_eq!(sv.len(), 6);
        let (rj, _) = jacobian_rank(&assemble_jacobian(&s).unwrap(), 1e-9);
        assert_eq!(rj, s.state_dim());
    }

    #[test]
    fn five_observations_rank_at_most_five() {
        let s = generic(ClusterCalibration::ring(3, 0.3), 5, 0);
        assert!(rank_m2(&build_m2(&s).unwrap(), 1e-9).0 <= 5);
        let rep = classify(&s, &Thresholds::default()).unwrap();
        assert!(rep.flags.too_few_observations);
        assert_eq!(rep.classification, Classification::Degenerate);
    }

    #[test]
    fn single_feature_seen_by_six_cameras() {
        let cal = ClusterCalibration::ring(6, 0.3);
        let s = Scenario::new(
            cal,
            vec![FeatureParam::new(0, 0.1, -0.2, 4.0)],
            ObservationMap(vec![(0..6).collect()]),
            KeyframeMotion::new(Vector3::new(0.3, 0.1, 0.2), Vector3::new(0.0, 0.1, 0.05)),
        )
        .unwrap();
        let m2 = build_m2(&s).unwrap();
        assert!(rank_m2(&m2, 1e-9).0 < 6);
        let flags = detect_sufficient_conditions(&s, 1e-9).unwrap();
        assert!(flags.single_feature_many_obs && !flags.single_camera);
    }

    #[test]
    fn single_camera_is_flagged() {
        let s = generic(ClusterCalibration::single(), 8, 3);
        let rep = classify(&s, &Thresholds::default()).unwrap();
        assert!(rep.flags.single_camera && rep.flags.parallel_observation_vectors);
        assert!(rep.rank_m2 < 6);
    }

    #[test]
    fn parallel_test_ignores_zero_vectors() {
        let x = Vector3::new(1.0, 2.0, 3.0);
        assert!(all_parallel(&[x, Vector3::zeros(), -2.0 * x], 1e-9));
        assert!(!all_parallel(&[x, Vector3::new(1.0, 2.0, 3.1)], 1e-9));
        assert!(all_parallel(&[], 1e-9));
    }

    #[test]
    fn constructions_are_degenerate() {
        for c in constructions::all() {
            let s = c.scenario(8, 5).unwrap();
            let rep = classify(&s, &Thresholds::default()).unwrap();
            assert!(rep.flags.parallel_observation_vectors, "{}", c.name);
            assert_eq!(rep.classification, Classification::Degenerate, "{}", c.name);
            assert!(direction_block_rank(&rep.m2, 1e-9) <= 2, "{}", c.name);
        }
    }

    #[test]
    fn cross_camera_zero_rotation_is_non_degenerate() {
        let s = constructions::cross_camera_zero_rotation(8, 2, 11).unwrap();
        let rep = classify(&s, &Thresholds::default()).unwrap();
        assert_eq!(rep.rank_m2, 6);
        assert!(!rep.flags.any());
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(6, 6), 1);
        assert_eq!(binomial(8, 6), 28);
        assert_eq!(binomial(10, 6), 210);
        assert_eq!(binomial(40, 6), 3_838_380);
        assert_eq!(binomial(3, 6), 0);
    }

    #[test]
    fn subset_enumeration_and_cap() {
        let (s, capped) = choose_subsets(7, 1, 0);
        assert!(!capped);
        assert_eq!(s.len(), 7);
        assert_eq!(s[0], [0, 1, 2, 3, 4, 5]);
        let (a, capped) = choose_subsets(14, 50, 9);
        assert!(capped);
        assert_eq!(a.len(), 50);
        assert_eq!(a, choose_subsets(14, 50, 9).0);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    fn small_grid(steps: usize) -> SweepGrid {
        SweepGrid::tz_slice((-2.0, 2.0), (-2.0, 2.0), steps, 1.0)
    }

    #[test]
    fn sweep_matches_direct_determinant() {
        let s = generic(ClusterCalibration::ring(3, 0.3), 7, 2);
        let grid = small_grid(9);
        let sweep = sweep_translations(&s, &grid, &SweepOptions::default()).unwrap();
        assert_eq!(sweep.subsets.len(), 7);
        assert_eq!(sweep.determinants.len(), 81 * 7);
        assert!(!sweep.metadata.warnings.is_empty());
        for cell in [0, 40, 80] {
            let t = sweep.translation(cell);
            let m2 = build_m2(&s.with_motion(s.motion.with_translation(t))).unwrap();
            for (si, sub) in sweep.subsets.iter().enumerate() {
                let m = Matrix6::from_fn(|r, c| m2.matrix[(sub[r], c)] / m2.matrix.row(sub[r]).norm());
                assert_relative_eq!(sweep.determinant(cell, si), m.determinant(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn six_observations_give_a_curve() {
        for n_c in [2, 3] {
            let s = generic(ClusterCalibration::ring(n_c, 0.3), 6, 7);
            let sweep = sweep_translations(&s, &small_grid(60), &SweepOptions::default()).unwrap();
            let zeros = sweep.zero_cells(0).len();
            assert!(zeros > 0 && zeros < 60 * 60 / 2, "{n_c} cameras: {zeros} zero cells");
            // one subset: intersections are the (dilated) zero set itself
            let exact = intersect_loci(&sweep, 0.0);
            assert_eq!(exact.cells, sweep.zero_cells(0));
        }
    }

    #[test]
    fn disjoint_loci_do_not_intersect() {
        let grid = small_grid(5);
        let mut z0 = vec![false; 25];
        let mut z1 = vec![false; 25];
        z0[0] = true;
        z1[24] = true;
        let sweep = SweepResult {
            grid: grid.clone(),
            base_translation: Vector3::zeros(),
            omega: Vector3::zeros(),
            subsets: vec![[0, 1, 2, 3, 4, 5]; 2],
            determinants: vec![1.0; 50],
            zero_crossings: vec![z0, z1],
            intersections: IntersectionSet { radius: 0.0, cells: vec![], components: vec![] },
            metadata: SweepMetadata {
                observations: 7,
                total_subsets: 7,
                evaluated_subsets: 2,
                capped: false,
                options: SweepOptions::default(),
                warnings: vec![],
            },
        };
        assert!(intersect_loci(&sweep, 2.0).is_empty());
        assert_eq!(intersect_loci(&sweep, 6.0).components.len(), 1);
    }

    #[test]
    fn sweep_requires_six_rows() {
        let s = generic(ClusterCalibration::ring(3, 0.3), 5, 2);
        assert!(matches!(
            sweep_translations(&s, &small_grid(5), &SweepOptions::default()),
            Err(Error::TooFewObservations(5))
        ));
    }

    #[test]
    fn sweep_is_deterministic_across_thread_pools() {
        let s = generic(ClusterCalibration::ring(3, 0.3), 8, 6);
        let grid = small_grid(25);
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| sweep_translations(&s, &grid, &SweepOptions::default()).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.determinants.iter().map(|d| d.to_bits()).collect::<Vec<_>>(), b.determinants.iter().map(|d| d.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.zero_crossings, b.zero_crossings);
        assert_eq!(a.intersections, b.intersections);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn plucker_relation_holds(seed in 0u64..10_000, n_c in 1usize..5, n_f in 1usize..10) {
                let s = generic(ClusterCalibration::ring(n_c, 0.3), n_f, seed);
                prop_assert!(build_m2(&s).unwrap().plucker_violation() <= 1e-12);
            }

            #[test]
            fn appending_rows_never_lowers_rank(seed in 0u64..10_000, n_f in 2usize..9) {
                let s = generic(ClusterCalibration::ring(3, 0.3), n_f, seed);
                let m2 = build_m2(&s).unwrap();
                let mut prev = 0;
                for r in 1..=m2.row_count() {
                    let partial = ReducedMatrixM2 { matrix: m2.matrix.rows(0, r).into_owned(), rows: m2.rows[..r].to_vec() };
                    let rank = rank_m2(&partial, 1e-9).0;
                    prop_assert!(rank >= prev);
                    prev = rank;
                }
            }
        }
    }
}
