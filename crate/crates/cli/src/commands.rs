use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cluster_degen::cluster::{assemble_state, zero_baseline_observations, ClusterCalibration, KeyframeMotion, Scenario};
use cluster_degen::constructions::{self, Construction};
use cluster_degen::degeneracy::{
    choose_subsets, classify, sweep_translations, Axis, SufficientFlags, SweepGrid, SweepOptions, SweepResult,
    Thresholds,
};
use cluster_degen::estimator::{lm_solve, perturb_state, SolverOptions};
use cluster_degen::jacobian::assemble_jacobian;
use cluster_degen::measurement::{add_noise, stack_measurements, synthesize_scenario, SynthConfig, Topology};
use nalgebra::Vector3;
use serde::Serialize;

use crate::scenario_file::{Issue, Loaded, Metadata, ScenarioFile};
use crate::{AnalyzeArgs, Command, SolveArgs, SweepArgs, SynthArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}", join_issues(.0))]
    Invalid(Vec<Issue>),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] cluster_degen::error::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn join_issues(issues: &[Issue]) -> String {
    issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("\n")
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            _ => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn stdout_err(source: std::io::Error) -> CliError {
    CliError::Io { path: PathBuf::from("<stdout>"), source }
}

pub fn dispatch(command: &Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<i32> {
    match command {
        Command::Validate { file } => validate(file, out, err),
        Command::Analyze(a) => analyze(a, out, err),
        Command::Sweep(a) => sweep(a, out, err),
        Command::Solve(a) => solve(a, out, err),
        Command::Synth(a) => synth(a, out, err),
    }
}

fn load(path: &Path, err: &mut dyn Write) -> CliResult<Loaded> {
    let loaded = Loaded::from_path(path).map_err(CliError::Invalid)?;
    for w in &loaded.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    Ok(loaded)
}

/// Loads and rejects files that break a modelling assumption.
fn load_valid(path: &Path, err: &mut dyn Write) -> CliResult<Loaded> {
    let loaded = load(path, err)?;
    let violations = loaded.violations();
    if violations.is_empty() {
        Ok(loaded)
    } else {
        Err(CliError::Invalid(violations))
    }
}

fn validate(path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<i32> {
    let loaded = match load(path, err) {
        Ok(l) => l,
        Err(CliError::Invalid(issues)) => {
            for i in issues {
                writeln!(out, "{i}").map_err(stdout_err)?;
            }
            return Ok(1);
        }
        Err(e) => return Err(e),
    };
    let violations = loaded.violations();
    for v in &violations {
        writeln!(out, "{v}").map_err(stdout_err)?;
    }
    for (j, k) in zero_baseline_observations(&loaded.scenario) {
        let _ = writeln!(err, "note: features[{j}].observers[{k}]: zero baseline (contributes a zero row)");
    }
    if violations.is_empty() {
        writeln!(
            out,
            "ok: {} cameras, {} features, {} observations",
            loaded.scenario.calibration.camera_count(),
            loaded.scenario.feature_count(),
            loaded.scenario.observation_count()
        )
        .map_err(stdout_err)?;
        Ok(0)
    } else {
        Ok(1)
    }
}

#[derive(Serialize)]
struct AnalyzeReport {
    classification: String,
    rank_m2: usize,
    sigma_ratio: f64,
    singular_values: Vec<f64>,
    observations: usize,
    jacobian_rank: usize,
    jacobian_columns: usize,
    jacobian_sigma_ratio: f64,
    reasons: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expected: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    matches_expected: Option<bool>,
    flags: SufficientFlags,
    thresholds: Thresholds,
}

fn analyze(a: &AnalyzeArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<i32> {
    let loaded = load_valid(&a.file, err)?;
    let thresholds = Thresholds { rank_tol: a.tol, near_degenerate: a.near, ..Thresholds::default() };
    let report = classify(&loaded.scenario, &thresholds)?;
    let jac = assemble_jacobian(&loaded.scenario)?;
    let expected = loaded.file.metadata.expected.clone();
    let classification = report.classification.as_str().to_string();
    let doc = AnalyzeReport {
        matches_expected: expected.as_ref().map(|e| *e == classification),
        expected,
        classification,
        rank_m2: report.rank_m2,
        sigma_ratio: report.sigma_ratio,
        singular_values: report.singular_values.clone(),
        observations: report.m2.row_count(),
        jacobian_rank: jac.spectrum.rank(a.tol),
        jacobian_columns: loaded.scenario.state_dim(),
        jacobian_sigma_ratio: jac.spectrum.ratio(),
        reasons: report.reasons.clone(),
        flags: report.flags,
        thresholds,
    };
    write!(out, "{}", toml::to_string(&doc).expect("report serializes")).map_err(stdout_err)?;
    Ok(if a.strict && report.classification == cluster_degen::degeneracy::Classification::Degenerate { 2 } else { 0 })
}

fn parse_axes(s: &str) -> CliResult<[Axis; 2]> {
    let axis = |c: char| match c {
        'x' => Ok(Axis::X),
        'y' => Ok(Axis::Y),
        'z' => Ok(Axis::Z),
        _ => Err(CliError::Usage(format!("--axes: unknown axis '{c}' (use x, y or z)"))),
    };
    let chars: Vec<char> = s.chars().collect();
    match chars.as_slice() {
        [a, b] if a != b => Ok([axis(*a)?, axis(*b)?]),
        _ => Err(CliError::Usage(format!("--axes: expected two distinct axes such as 'xy', got '{s}'"))),
    }
}

fn parse_range(flag: &str, s: &str) -> CliResult<(f64, f64)> {
    let bad = || CliError::Usage(format!("{flag}: expected 'lo:hi', got '{s}'"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

/// `{:.16e}` keeps 17 significant digits, enough to round-trip any `f64`.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn intersections_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "sweep".into());
    out.with_file_name(format!("{stem}.intersections.csv"))
}

pub const SWEEP_HEADER: &str = "t_x,t_y,t_z,subset_id,normalized_det";
pub const INTERSECTIONS_HEADER: &str = "t_x,t_y,t_z";

pub fn write_sweep_csv(sweep: &SweepResult, w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    let ns = sweep.subsets.len();
    let mut line = String::with_capacity(128);
    for cell in 0..sweep.grid.cell_count() {
        let t = sweep.translation(cell);
        let prefix = format!("{},{},{}", num(t.x), num(t.y), num(t.z));
        for s in 0..ns {
            line.clear();
            let _ = writeln!(line, "{prefix},{s},{}", num(sweep.determinant(cell, s)));
            w.write_all(line.as_bytes())?;
        }
    }
    Ok(())
}

pub fn write_intersections_csv(sweep: &SweepResult, w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "{INTERSECTIONS_HEADER}")?;
    for &(i0, i1) in &sweep.intersections.cells {
        let t = sweep.translation(sweep.grid.cell_index(i0, i1));
        writeln!(w, "{},{},{}", num(t.x), num(t.y), num(t.z))?;
    }
    Ok(())
}

/// Rebuilds a sweep from its determinant CSV, for re-running intersection
/// detection on exported data.
pub fn read_sweep_csv(
    text: &str,
    grid: &SweepGrid,
    observations: usize,
    options: &SweepOptions,
) -> CliResult<SweepResult> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(CliError::Usage("sweep CSV: unexpected header".into()));
    }
    let mut determinants = Vec::new();
    let mut first: Option<Vector3<f64>> = None;
    let mut max_subset = 0;
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || CliError::Usage(format!("sweep CSV line {}: malformed row", n + 2));
        if fields.len() != 5 {
            return Err(bad());
        }
        let vals: Vec<f64> = [0, 1, 2, 4].iter().map(|&i| fields[i].parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
        let subset: usize = fields[3].parse().map_err(|_| bad())?;
        max_subset = max_subset.max(subset);
        first.get_or_insert(Vector3::new(vals[0], vals[1], vals[2]));
        determinants.push(vals[3]);
    }
    let (subsets, capped) = choose_subsets(observations, options.max_subsets, options.subset_seed);
    if subsets.len() != max_subset + 1 {
        return Err(CliError::Usage(format!("sweep CSV has {} subsets, expected {}", max_subset + 1, subsets.len())));
    }
    let base = first.unwrap_or_else(Vector3::zeros);
    Ok(SweepResult::from_determinants(
        grid.clone(),
        base,
        Vector3::zeros(),
        subsets,
        determinants,
        observations,
        capped,
        options,
    )?)
}

#[derive(Serialize)]
struct ComponentSummary {
    cells: usize,
    centroid: [f64; 3],
}

#[derive(Serialize)]
struct SweepSummary {
    cells: usize,
    observations: usize,
    subsets: usize,
    total_subsets: String,
    capped: bool,
    radius: f64,
    intersection_cells: usize,
    determinants: String,
    intersections: String,
    warnings: Vec<String>,
    components: Vec<ComponentSummary>,
}

fn sweep(a: &SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<i32> {
    let loaded = load_valid(&a.file, err)?;
    let grid = SweepGrid {
        axes: parse_axes(&a.axes)?,
        ranges: [parse_range("--range-a", &a.range_a)?, parse_range("--range-b", &a.range_b)?],
        steps: [a.steps, a.steps],
        slice: a.slice,
        omega: None,
    };
    let options = SweepOptions { abs_tol: a.abs_tol, max_subsets: a.max_subsets, subset_seed: a.seed, radius: a.radius };
    let result = sweep_translations(&loaded.scenario, &grid, &options)?;

    let inter_path = intersections_path(&a.out);
    let mut w = BufWriter::new(File::create(&a.out).map_err(io_err(&a.out))?);
    write_sweep_csv(&result, &mut w).and_then(|_| w.flush()).map_err(io_err(&a.out))?;
    let mut w = BufWriter::new(File::create(&inter_path).map_err(io_err(&inter_path))?);
    write_intersections_csv(&result, &mut w).and_then(|_| w.flush()).map_err(io_err(&inter_path))?;

    for warning in &result.metadata.warnings {
        let _ = writeln!(err, "warning: {warning}");
    }
    let summary = SweepSummary {
        cells: grid.cell_count(),
        observations: result.metadata.observations,
        subsets: result.subsets.len(),
        total_subsets: result.metadata.total_subsets.to_string(),
        capped: result.metadata.capped,
        radius: options.radius,
        intersection_cells: result.intersections.cells.len(),
        determinants: a.out.display().to_string(),
        intersections: inter_path.display().to_string(),
        warnings: result.metadata.warnings.clone(),
        components: result
            .intersections
            .components
            .iter()
            .map(|c| ComponentSummary { cells: c.cells.len(), centroid: c.centroid.into() })
            .collect(),
    };
    write!(out, "{}", toml::to_string(&summary).expect("summary serializes")).map_err(stdout_err)?;
    Ok(0)
}

#[derive(Serialize)]
struct SolveSummary {
    termination: String,
    iterations: usize,
    initial_cost: f64,
    final_cost: f64,
    sigma_ratio: f64,
    scale_alignment: f64,
    state_error: f64,
    noise: f64,
    perturb: f64,
    seed: u64,
    t: [f64; 3],
    omega: [f64; 3],
}

fn solve(a: &SolveArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<i32> {
    let loaded = load_valid(&a.file, err)?;
    let truth = &loaded.scenario;
    let z = add_noise(&stack_measurements(truth)?, a.noise, a.seed)?;
    let x_true = assemble_state(truth);
    // a distinct stream for the start point so noise and perturbation are independent
    let start = truth.with_state(&perturb_state(&x_true, a.perturb, a.seed.wrapping_add(1)))?;
    let options = SolverOptions { max_iterations: a.max_iterations, ..SolverOptions::default() };
    let res = lm_solve(&start, &z, &options)?;
    let summary = SolveSummary {
        termination: res.termination.to_string(),
        iterations: res.iterations,
        initial_cost: res.cost_history[0],
        final_cost: res.final_cost(),
        sigma_ratio: res.sigma_ratio,
        scale_alignment: res.scale_alignment,
        state_error: (res.state().0 - x_true.0).amax(),
        noise: a.noise,
        perturb: a.perturb,
        seed: a.seed,
        t: (*res.scenario.motion.translation()).into(),
        omega: (*res.scenario.motion.omega()).into(),
    };
    write!(out, "{}", toml::to_string(&summary).expect("summary serializes")).map_err(stdout_err)?;
    Ok(0)
}

fn preset(name: &str, radius: f64, err: &mut dyn Write) -> CliResult<ClusterCalibration> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(CliError::Usage("--radius must be positive".into()));
    }
    Ok(match name {
        "single" => ClusterCalibration::single(),
        "back-to-back" => ClusterCalibration::back_to_back(2.0 * radius),
        "triangle" => ClusterCalibration::ring(3, radius),
        "planar4" => ClusterCalibration::ring(4, radius),
        _ => {
            if let Some(n) = name.strip_prefix("ring:") {
                let n: usize = n.parse().map_err(|_| CliError::Usage(format!("--cameras: bad ring size in '{name}'")))?;
                if n == 0 {
                    return Err(CliError::Usage("--cameras: a ring needs at least one camera".into()));
                }
                ClusterCalibration::ring(n, radius)
            } else {
                load(Path::new(name), err)?.scenario.calibration
            }
        }
    })
}

fn parse_vec3(key: &str, s: &str) -> CliResult<Vector3<f64>> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--motion: bad numbers for '{key}'")))?;
    match vals.as_slice() {
        [x, y, z] if vals.iter().all(|v| v.is_finite()) => Ok(Vector3::new(*x, *y, *z)),
        _ => Err(CliError::Usage(format!("--motion: '{key}' needs three finite numbers"))),
    }
}

enum MotionChoice {
    Explicit(KeyframeMotion),
    Named(Construction),
}

fn parse_motion(spec: &str) -> CliResult<MotionChoice> {
    let named = match spec {
        "pure-translation" => Some(constructions::pure_translation(ClusterCalibration::ring(3, 0.3), Vector3::new(0.3, -0.1, 0.4))),
        "in-plane-rotation" => Some(constructions::inplane_rotation(0.3, 0.25, 1.0)),
        "quarter-turn" => Some(constructions::quarter_turn(0.3, Vector3::new(0.1, 0.05, 0.2))),
        "concentric-circles" => Some(constructions::concentric_circles(0.3, 0.25, 0.5)),
        _ => None,
    };
    if let Some(c) = named {
        return Ok(MotionChoice::Named(c));
    }
    let mut t = None;
    let mut omega = Vector3::zeros();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--motion: unknown construction or malformed spec '{spec}'")))?;
        match key.trim() {
            "t" => t = Some(parse_vec3("t", value)?),
            "omega" => omega = parse_vec3("omega", value)?,
            other => return Err(CliError::Usage(format!("--motion: unknown key '{other}'"))),
        }
    }
    let t = t.ok_or_else(|| CliError::Usage("--motion: 't=x,y,z' is required".into()))?;
    Ok(MotionChoice::Explicit(KeyframeMotion::new(t, omega)))
}

fn synth(a: &SynthArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<i32> {
    let mut config = match parse_motion(&a.motion)? {
        MotionChoice::Named(c) => {
            let _ = writeln!(err, "note: construction '{}' fixes the cameras and observation pattern", c.name);
            c.synth_config(a.features)
        }
        MotionChoice::Explicit(motion) => {
            let topology = match a.topology.as_str() {
                "auto" => Topology::Auto,
                "same-camera" => Topology::SameCamera,
                other => return Err(CliError::Usage(format!("--topology: unknown value '{other}'"))),
            };
            SynthConfig::new(preset(&a.cameras, a.radius, err)?, a.features, motion).topology(topology)
        }
    };
    config = config.cross_camera(a.cross_camera);
    let scenario: Scenario = synthesize_scenario(&config, a.seed)?;
    let description = a.description.clone().unwrap_or_else(|| {
        format!(
            "synthesized: cameras={}, features={}, cross_camera={}, motion={}",
            a.cameras, a.features, a.cross_camera, a.motion
        )
    });
    let metadata = Metadata { seed: Some(a.seed), description: Some(description), expected: None };
    let text = ScenarioFile::from_scenario(&scenario, metadata).to_toml();
    match &a.out {
        Some(path) => std::fs::write(path, &text).map_err(io_err(path))?,
        None => out.write_all(text.as_bytes()).map_err(stdout_err)?,
    }
    Ok(0)
}
