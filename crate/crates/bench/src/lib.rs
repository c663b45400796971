//! Iterations- and time-to-accuracy tables and per-iteration convergence
//! traces for the decomposition solver, measured against the global FDFD
//! solution.
//!
//! Every row carries the SHA-256 of the canonical JSON of the inputs that
//! produced it, so a row can be regenerated from the report alone.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use snapddm_core::datagen::{device_problem, MaterialMode};
use snapddm_core::ddm::{
    ddm_iterate, masked_relative_l1, run_ddm, stitch, DdmConfig, DdmProblem, DdmSetup, DdmState, IterationRecord, SolverSet,
};
use snapddm_core::fdfd::solve_global;
use snapddm_core::{ComplexField2D, WavevectorConvention};
use thiserror::Error;

pub const ACCURACY_METRIC: &str = "relative_l1 = mean|H - H_fdfd| / mean|H_fdfd| over measured cells";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] snapddm_core::Error),
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// SHA-256 of the canonical JSON of `value`, hex encoded.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(&serde_json::to_value(value)?)?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub n: usize,
    /// Refractive index of the densest material; `max_eps = index^2`.
    pub index: f64,
    pub material: MaterialMode,
    pub seed: u64,
    pub convention: WavevectorConvention,
}

impl DeviceSpec {
    pub fn max_eps(&self) -> f64 {
        self.index * self.index
    }

    pub fn id(&self) -> String {
        format!("n{}-idx{}-s{}", self.n, self.index, self.seed)
    }

    pub fn build(&self) -> Result<DdmProblem> {
        Ok(device_problem(self.n, self.max_eps(), self.material, self.seed, self.convention)?)
    }
}

/// Every (size, index, seed) combination. Devices sharing a size and seed
/// share their geometry and differ only in permittivity scale.
pub fn device_set(sizes: &[usize], indices: &[f64], count: usize, seed: u64, material: MaterialMode) -> Vec<DeviceSpec> {
    let mut out = Vec::new();
    for &n in sizes {
        for &index in indices {
            for k in 0..count as u64 {
                out.push(DeviceSpec { n, index, material, seed: seed + k, convention: WavevectorConvention::default() });
            }
        }
    }
    out
}

/// A device with its decomposition and oracle.
pub struct BenchProblem {
    pub spec: DeviceSpec,
    pub problem: DdmProblem,
    pub setup: DdmSetup,
    pub oracle: ComplexField2D,
    pub oracle_ms: f64,
}

impl BenchProblem {
    pub fn new(spec: DeviceSpec, overlap: usize) -> Result<Self> {
        let problem = spec.build()?;
        Self::from_problem(spec, problem, overlap)
    }

    pub fn from_problem(spec: DeviceSpec, problem: DdmProblem, overlap: usize) -> Result<Self> {
        let setup = DdmSetup::new(&problem, overlap)?;
        let t = Instant::now();
        let oracle = solve_global(&problem.eps, &problem.source, &problem.grid, &problem.pml, &problem.bloch)?;
        Ok(Self { spec, problem, setup, oracle, oracle_ms: t.elapsed().as_secs_f64() * 1e3 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub device: String,
    pub spec: DeviceSpec,
    pub backend: String,
    /// Sweeps until the error fell below the target; `None` when censored.
    pub iterations: Option<usize>,
    pub censored: bool,
    /// Sweeps run (the cap when censored).
    pub sweeps: usize,
    pub final_rel_l1: f64,
    pub wall_ms: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGroup {
    pub n: usize,
    pub index: f64,
    pub devices: usize,
    pub censored: usize,
    /// Mean over uncensored devices.
    pub mean_iterations: Option<f64>,
    /// Mean with censored devices counted at the cap.
    pub mean_iterations_lower_bound: f64,
    pub mean_wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub target: f64,
    pub max_iters: usize,
    pub metric: String,
    pub rows: Vec<AccuracyRow>,
    pub groups: Vec<AccuracyGroup>,
}

impl AccuracyTable {
    pub fn group(&self, n: usize, index: f64) -> Option<&AccuracyGroup> {
        self.groups.iter().find(|g| g.n == n && g.index == index)
    }
}

#[derive(Serialize)]
struct RowKey<'a> {
    spec: &'a DeviceSpec,
    backend: &'a str,
    target: f64,
    max_iters: usize,
    overlap: usize,
}

fn group_rows(rows: &[AccuracyRow], max_iters: usize) -> Vec<AccuracyGroup> {
    let mut keys: Vec<(usize, f64)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.spec.n, r.spec.index)) {
            keys.push((r.spec.n, r.spec.index));
        }
    }
    keys.into_iter()
        .map(|(n, index)| {
            let g: Vec<&AccuracyRow> = rows.iter().filter(|r| r.spec.n == n && r.spec.index == index).collect();
            let done: Vec<f64> = g.iter().filter_map(|r| r.iterations.map(|i| i as f64)).collect();
            let len = g.len() as f64;
            AccuracyGroup {
                n,
                index,
                devices: g.len(),
                censored: g.len() - done.len(),
                mean_iterations: (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64),
                mean_iterations_lower_bound: g.iter().map(|r| r.iterations.unwrap_or(max_iters) as f64).sum::<f64>() / len,
                mean_wall_ms: g.iter().map(|r| r.wall_ms).sum::<f64>() / len,
            }
        })
        .collect()
}

/// Sweeps from the zero state until the stitched field is within `target`
/// relative L1 of the oracle. Devices that miss the cap are kept as censored.
pub fn time_to_accuracy(
    problems: &[BenchProblem],
    solvers: &SolverSet,
    backend: &str,
    target: f64,
    max_iters: usize,
) -> Result<AccuracyTable> {
    if target.is_nan() || target <= 0.0 {
        return Err(BenchError::Config(format!("target must be positive, got {target}")));
    }
    let mut rows = Vec::with_capacity(problems.len());
    for bp in problems {
        let mask = &bp.setup.measure_mask;
        let t = Instant::now();
        let mut state = DdmState::zero(&bp.setup);
        let mut field = ComplexField2D::zeros(bp.problem.grid.nx, bp.problem.grid.ny);
        let mut rel = masked_relative_l1(&field, &bp.oracle, mask)?;
        while !(rel < target) && state.iteration < max_iters {
            state = ddm_iterate(&state, &bp.setup, solvers)?;
            field = stitch(&state, &bp.setup.tiling);
            rel = masked_relative_l1(&field, &bp.oracle, mask)?;
        }
        let reached = rel < target;
        let overlap = bp.setup.tiling.overlap;
        rows.push(AccuracyRow {
            device: bp.spec.id(),
            spec: bp.spec,
            backend: backend.into(),
            iterations: reached.then_some(state.iteration),
            censored: !reached,
            sweeps: state.iteration,
            final_rel_l1: rel,
            wall_ms: t.elapsed().as_secs_f64() * 1e3,
            config_hash: config_hash(&RowKey { spec: &bp.spec, backend, target, max_iters, overlap })?,
        });
        log::info!("{} {backend}: {} sweeps, rel_l1 {rel:.3e}{}", bp.spec.id(), state.iteration, if reached { "" } else { " (censored)" });
    }
    let groups = group_rows(&rows, max_iters);
    Ok(AccuracyTable { target, max_iters, metric: ACCURACY_METRIC.into(), rows, groups })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub device: String,
    pub spec: DeviceSpec,
    pub backend: String,
    pub records: Vec<IterationRecord>,
    pub config_hash: String,
}

impl ConvergenceTrace {
    pub fn final_rel_l1(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.rel_l1_vs_oracle)
    }

    /// Smallest error over the last `window` sweeps.
    pub fn plateau(&self, window: usize) -> Option<f64> {
        let k = self.records.len().saturating_sub(window);
        self.records[k..].iter().filter_map(|r| r.rel_l1_vs_oracle).reduce(f64::min)
    }
}

/// Fixed-length traces for every (device, backend) pair.
pub fn convergence_study(problems: &[BenchProblem], backends: &[(&str, SolverSet)], iters: usize) -> Result<Vec<ConvergenceTrace>> {
    let cfg = DdmConfig { max_iters: iters, residual_threshold: 0.0, divergence_window: usize::MAX, ..Default::default() };
    let mut out = Vec::new();
    for bp in problems {
        for (name, solvers) in backends {
            let run = run_ddm(&bp.problem, &bp.setup, &cfg, solvers, Some(&bp.oracle))?;
            #[derive(Serialize)]
            struct Key<'a> {
                spec: &'a DeviceSpec,
                backend: &'a str,
                ddm: &'a DdmConfig,
            }
            out.push(ConvergenceTrace {
                device: bp.spec.id(),
                spec: bp.spec,
                backend: (*name).into(),
                records: run.trace,
                config_hash: config_hash(&Key { spec: &bp.spec, backend: name, ddm: &cfg })?,
            });
        }
    }
    Ok(out)
}

/// Everything needed to regenerate a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub suite: String,
    pub sizes: Vec<usize>,
    pub indices: Vec<f64>,
    pub devices_per_group: usize,
    pub seed: u64,
    pub material: MaterialMode,
    pub target: f64,
    pub max_iters: usize,
    pub overlap: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            suite: "accuracy".into(),
            sizes: vec![304, 424, 544],
            indices: vec![1.5, 2.48],
            devices_per_group: 10,
            seed: 0,
            material: MaterialMode::Grf { corr_len: 6.0 },
            target: 0.15,
            max_iters: 300,
            overlap: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: u32,
    pub config: BenchConfig,
    pub config_hash: String,
    pub metric: String,
    pub accuracy: Vec<AccuracyTable>,
    pub traces: Vec<ConvergenceTrace>,
}

impl BenchReport {
    pub fn new(config: BenchConfig) -> Result<Self> {
        Ok(Self {
            version: REPORT_VERSION,
            config_hash: config_hash(&config)?,
            config,
            metric: ACCURACY_METRIC.into(),
            accuracy: Vec::new(),
            traces: Vec::new(),
        })
    }

    /// Copy with every wall-clock field zeroed, for comparing reruns.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for t in &mut r.accuracy {
            t.rows.iter_mut().for_each(|row| row.wall_ms = 0.0);
            t.groups.iter_mut().for_each(|g| g.mean_wall_ms = 0.0);
        }
        for t in &mut r.traces {
            t.records.iter_mut().for_each(|rec| rec.wall_ms = 0.0);
        }
        r
    }
}

/// Builds the device set of `config` and runs the requested suite with one
/// solver set: `accuracy` (iterations to target) or `convergence` (traces).
pub fn run_suite(config: &BenchConfig, backend: &str, solvers: &SolverSet) -> Result<BenchReport> {
    let specs = device_set(&config.sizes, &config.indices, config.devices_per_group, config.seed, config.material);
    let problems = specs.into_iter().map(|s| BenchProblem::new(s, config.overlap)).collect::<Result<Vec<_>>>()?;
    let mut report = BenchReport::new(config.clone())?;
    match config.suite.as_str() {
        "accuracy" => report.accuracy.push(time_to_accuracy(&problems, solvers, backend, config.target, config.max_iters)?),
        "convergence" => report.traces = convergence_study(&problems, &[(backend, *solvers)], config.max_iters)?,
        other => return Err(BenchError::Config(format!("unknown suite {other:?}; expected accuracy or convergence"))),
    }
    Ok(report)
}
