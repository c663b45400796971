//! Subcommand key tables and implementations.

use std::fs;
use std::path::Path;
use std::time::Instant;

use snapddm_bench::{config_hash, run_suite, BenchConfig, DeviceSpec};
use snapddm_core::datagen::MaterialMode;
use snapddm_core::dataset::{generate_to_file, DatasetSpec, SndsReader};
use snapddm_core::ddm::{run_ddm, DdmConfig, DdmSetup, IterationRecord, SolverSet};
use snapddm_core::fdfd::{pde_residual_map, solve_global, solve_global_report};
use snapddm_core::io::{load_cf2d, save_cf2d, save_eps2};
use snapddm_core::subdomain::{ExactSubdomainSolver, SubdomainClass};
use snapddm_core::{relative_l1, WavevectorConvention};
use snapddm_nn::inputs::{decode, encode_sample, in_channels, planes_to_field, target};
use snapddm_nn::losses::{loss_terms, LossConfig, PhysicsContext};
use snapddm_nn::solver::NeuralSubdomainSolver;
use snapddm_nn::train::{train, TrainConfig};
use snapddm_nn::weights::{load_weights, save_weights, SavedModel};
use snapddm_nn::{InitOptions, SmFno, SmFnoConfig};

use crate::config::{input, optional, output, value, KeySpec, Params};
use crate::error::{CliError, Result};
use crate::export::{field_to_csv, field_to_pgm16, ExportFormat};
use crate::manifest::{record, sha256_bytes, Manifest};

pub type RunFn = fn(&Params, &mut Manifest) -> Result<()>;

pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: &'static [KeySpec],
    pub run: RunFn,
}

pub fn commands() -> &'static [CommandSpec] {
    &COMMANDS
}

pub fn find(name: &str) -> Option<&'static CommandSpec> {
    COMMANDS.iter().find(|c| c.name == name)
}

static COMMANDS: [CommandSpec; 7] = [
    CommandSpec { name: "gen", about: "Generate a training dataset (.snds)", keys: GEN_KEYS, run: cmd_gen },
    CommandSpec { name: "solve-fdfd", about: "Solve a random device with the global FDFD solver", keys: FDFD_KEYS, run: cmd_solve_fdfd },
    CommandSpec { name: "solve-ddm", about: "Solve a random device by domain decomposition", keys: DDM_KEYS, run: cmd_solve_ddm },
    CommandSpec { name: "infer", about: "Run a trained subdomain network on one dataset sample", keys: INFER_KEYS, run: cmd_infer },
    CommandSpec { name: "train", about: "Train a subdomain network on one class of a dataset", keys: TRAIN_KEYS, run: cmd_train },
    CommandSpec { name: "bench", about: "Iterations-to-accuracy or convergence benchmarks (JSON report)", keys: BENCH_KEYS, run: cmd_bench },
    CommandSpec { name: "export", about: "Export a .cf2d field as csv or pgm16", keys: EXPORT_KEYS, run: cmd_export },
];

macro_rules! device_keys {
    ($($extra:expr),* $(,)?) => {
        &[
            value("n", "304", "grid side in cells; 64 + 60k for overlap 4"),
            value("index", "1.5", "refractive index of the densest material"),
            value("seed", "0", "device seed"),
            value("material", "grf", "grf or voronoi"),
            value("corr-len", "6", "GRF correlation length in cells"),
            value("voronoi-points", "24", "Voronoi seed count"),
            value("convention", "linear", "Robin wavenumber convention: linear (k0 eps) or sqrt (k0 sqrt eps)"),
            $($extra),*
        ]
    };
}

const GEN_KEYS: &[KeySpec] = &[
    output("out", "dataset file to write"),
    value("simulations", "4", "number of global simulations"),
    value("crops", "64", "crops per simulation"),
    value("n", "256", "simulation grid side"),
    value("pml", "40", "PML thickness in cells"),
    value("max-eps", "16", "largest permittivity"),
    value("material", "grf", "grf or voronoi"),
    value("corr-len", "16", "GRF correlation length in cells"),
    value("voronoi-points", "24", "Voronoi seed count"),
    value("augment-rot", "true", "random quarter-turn rotations"),
    value("convention", "linear", "Robin wavenumber convention"),
    value("seed", "0", "dataset seed"),
];

const FDFD_KEYS: &[KeySpec] = device_keys!(output("out", "field file (.cf2d)"), output("eps-out", "permittivity file (.eps2)"),);

const DDM_KEYS: &[KeySpec] = device_keys!(
    output("out", "stitched field (.cf2d)"),
    output("trace", "per-iteration CSV"),
    value("overlap", "4", "tile overlap in cells"),
    value("backend", "exact", "exact or smfno (classes without weights use exact)"),
    input("weights-material", "material-class network (.snw)"),
    input("weights-source", "source-class network (.snw)"),
    input("weights-pml", "PML-class network (.snw)"),
    value("max-iters", "300", "sweep cap"),
    value("threshold", "1e-3", "stop when the normalized residual is below this"),
    value("oracle", "false", "also solve globally and track relative L1"),
);

const INFER_KEYS: &[KeySpec] = &[
    input("weights", "network (.snw)"),
    input("data", "dataset (.snds)"),
    value("index", "0", "sample index"),
    output("out", "predicted field (.cf2d)"),
];

const TRAIN_KEYS: &[KeySpec] = &[
    input("data", "dataset (.snds)"),
    output("out", "trained weights (.snw)"),
    output("history", "per-epoch loss CSV"),
    output("checkpoint", "checkpoint rewritten every epoch (.snw)"),
    value("class", "material", "material, source or pml"),
    value("model", "toy", "toy, v1 or v2"),
    value("epochs", "10", "epochs"),
    optional("max-steps", "cap on optimizer steps"),
    value("batch", "64", "batch size"),
    value("lr", "1e-3", "initial learning rate"),
    value("lr-decay", "30", "initial / final learning rate"),
    value("alpha-prime", "0.3", "target physics-to-data loss ratio"),
    value("warmup", "0", "epochs trained on data loss only"),
    value("bc-weight", "1", "weight of the boundary term in the physics loss"),
    value("test-fraction", "0.1", "held-out fraction"),
    optional("limit", "use only the first N samples of the class"),
    value("seed", "0", "shuffle seed"),
    value("init-seed", "0", "weight initialization seed"),
];

const BENCH_KEYS: &[KeySpec] = &[
    output("out", "report (.json)"),
    value("suite", "accuracy", "accuracy (alias fig5) or convergence (alias fig7)"),
    value("sizes", "304,424,544", "grid sides"),
    value("indices", "1.5,2.48", "refractive indices"),
    value("devices", "10", "devices per (size, index)"),
    value("seed", "0", "first device seed"),
    value("material", "grf", "grf or voronoi"),
    value("corr-len", "6", "GRF correlation length in cells"),
    value("voronoi-points", "24", "Voronoi seed count"),
    value("target", "0.15", "relative L1 target"),
    value("max-iters", "300", "sweep cap"),
    value("overlap", "4", "tile overlap in cells"),
    value("backend", "exact", "exact or smfno"),
    input("weights-material", "material-class network (.snw)"),
    input("weights-source", "source-class network (.snw)"),
    input("weights-pml", "PML-class network (.snw)"),
];

const EXPORT_KEYS: &[KeySpec] = &[
    input("input", "field (.cf2d)"),
    value("format", "csv", "csv or pgm16"),
    output("out", "exported file"),
];

fn material(p: &Params) -> Result<MaterialMode> {
    match p.get::<String>("material")?.as_str() {
        "grf" => Ok(MaterialMode::Grf { corr_len: p.get("corr-len")? }),
        "voronoi" => Ok(MaterialMode::Voronoi { points: p.get("voronoi-points")? }),
        other => Err(CliError::Usage(format!("unknown material {other:?}; expected grf or voronoi"))),
    }
}

fn convention(p: &Params) -> Result<WavevectorConvention> {
    p.get("convention")
}

fn device(p: &Params) -> Result<DeviceSpec> {
    Ok(DeviceSpec { n: p.get("n")?, index: p.get("index")?, material: material(p)?, seed: p.get("seed")?, convention: convention(p)? })
}

fn parse_bool(p: &Params, key: &str) -> Result<bool> {
    p.get(key)
}

fn cmd_gen(p: &Params, m: &mut Manifest) -> Result<()> {
    let spec = DatasetSpec {
        simulations: p.get("simulations")?,
        crops_per_simulation: p.get("crops")?,
        n: p.get("n")?,
        pml_thickness: p.get("pml")?,
        max_eps: p.get("max-eps")?,
        material: material(p)?,
        augment_rot: parse_bool(p, "augment-rot")?,
        convention: convention(p)?,
        seed: p.get("seed")?,
    };
    let t = Instant::now();
    let h = generate_to_file(&spec, p.path("out")?)?;
    log::info!("wrote {} samples {:?} in {:.1?}", h.count, h.class_counts, t.elapsed());
    m.set_result("count", h.count)?;
    m.set_result("class_counts", h.class_counts)
}

fn cmd_solve_fdfd(p: &Params, m: &mut Manifest) -> Result<()> {
    let d = device(p)?.build()?;
    let sol = solve_global_report(&d.eps, &d.source, &d.grid, &d.pml, &d.bloch)?;
    log::info!(
        "{}x{} solve: residual {:.2e}, factor {:.2}s, solve {:.2}s, {} MiB",
        d.grid.nx,
        d.grid.ny,
        sol.relative_residual,
        sol.factor_seconds,
        sol.solve_seconds,
        sol.factor_bytes >> 20
    );
    save_cf2d(p.path("out")?, &sol.field)?;
    if let Some(e) = p.opt_path("eps-out")? {
        save_eps2(e, &d.eps)?;
    }
    let r = pde_residual_map(&d.eps, &sol.field, &d.source, &d.grid)?;
    let mask = d.pml.mask(&d.grid);
    let (mut s, mut n) = (0.0, 0usize);
    for x in 1..d.grid.nx - 1 {
        for y in 1..d.grid.ny - 1 {
            if !*mask.get(x, y) {
                s += r.get(x, y).norm();
                n += 1;
            }
        }
    }
    m.set_result("relative_residual", sol.relative_residual)?;
    m.set_result("mean_interior_pde_residual", s / n.max(1) as f64)
}

struct Backends {
    exact: ExactSubdomainSolver,
    neural: Vec<NeuralSubdomainSolver<f32>>,
}

impl Backends {
    fn load(p: &Params) -> Result<Self> {
        let mut neural = Vec::new();
        match p.get::<String>("backend")?.as_str() {
            "exact" => {}
            "smfno" => {
                for class in SubdomainClass::ALL {
                    if let Some(path) = p.opt_path(&format!("weights-{class}"))? {
                        let saved = load_weights::<f32>(&path)?;
                        if saved.class.is_some_and(|c| c != class) {
                            return Err(CliError::Failed(format!("{} holds a {:?} network, not {class}", path.display(), saved.class)));
                        }
                        neural.push(NeuralSubdomainSolver::new(saved.model, class)?);
                    }
                }
                if neural.is_empty() {
                    return Err(CliError::Usage("backend smfno needs at least one --weights-<class>".into()));
                }
            }
            other => return Err(CliError::Usage(format!("unknown backend {other:?}; expected exact or smfno"))),
        }
        Ok(Self { exact: ExactSubdomainSolver::new(), neural })
    }

    fn set(&self) -> SolverSet<'_> {
        self.neural.iter().fold(SolverSet::uniform(&self.exact), |s, n| s.with(n.class(), n))
    }

    fn name(&self) -> String {
        if self.neural.is_empty() {
            "exact".into()
        } else {
            let c: Vec<String> = self.neural.iter().map(|n| n.class().to_string()).collect();
            format!("smfno[{}]", c.join("+"))
        }
    }
}

fn trace_csv(trace: &[IterationRecord]) -> String {
    let mut s = String::from("iter,mean_pde_residual,normalized_residual,rel_l1\n");
    for r in trace {
        let rel = r.rel_l1_vs_oracle.map(|v| format!("{v:e}")).unwrap_or_default();
        s.push_str(&format!("{},{:e},{:e},{rel}\n", r.iter, r.mean_pde_residual, r.normalized_residual));
    }
    s
}

fn cmd_solve_ddm(p: &Params, m: &mut Manifest) -> Result<()> {
    let d = device(p)?.build()?;
    let cfg = DdmConfig {
        max_iters: p.get("max-iters")?,
        residual_threshold: p.get("threshold")?,
        overlap: p.get("overlap")?,
        ..Default::default()
    };
    let setup = DdmSetup::new(&d, cfg.overlap)?;
    let oracle = if parse_bool(p, "oracle")? { Some(solve_global(&d.eps, &d.source, &d.grid, &d.pml, &d.bloch)?) } else { None };
    let backends = Backends::load(p)?;
    let t = Instant::now();
    let out = run_ddm(&d, &setup, &cfg, &backends.set(), oracle.as_ref())?;
    let last = out.trace.last();
    log::info!(
        "{}: {} sweeps in {:.1?}, converged {}, residual {:?}",
        backends.name(),
        out.state.iteration,
        t.elapsed(),
        out.converged,
        last.map(|r| r.normalized_residual)
    );
    save_cf2d(p.path("out")?, &out.field)?;
    if let Some(path) = p.opt_path("trace")? {
        fs::write(path, trace_csv(&out.trace))?;
    }
    m.set_result("backend", backends.name())?;
    m.set_result("iterations", out.state.iteration)?;
    m.set_result("converged", out.converged)?;
    m.set_result("normalized_residual", last.map(|r| r.normalized_residual))?;
    m.set_result("rel_l1", last.and_then(|r| r.rel_l1_vs_oracle))
}

fn cmd_infer(p: &Params, m: &mut Manifest) -> Result<()> {
    let saved = load_weights::<f32>(p.path("weights")?)?;
    let mut reader = SndsReader::open(p.path("data")?)?;
    let header = reader.header().clone();
    let s = reader.read(p.get("index")?)?;
    if saved.class.is_some_and(|c| c != s.class) {
        return Err(CliError::Failed(format!("sample {} is {}, network is {:?}", p.get::<usize>("index")?, s.class, saved.class)));
    }
    let e = encode_sample::<f32>(&s, header.k0_delta)?;
    let (out, _) = saved.model.forward(&e.input, false)?;
    let n = s.size();
    let pred = decode(&out, n, n, &e.scaling);
    save_cf2d(p.path("out")?, &pred)?;
    let ctx = PhysicsContext::from_sample(&s, &e.scaling, header.convention);
    let truth = planes_to_field(&target::<f64>(&s.h, &e.scaling), n, n);
    let terms = loss_terms(&planes_to_field(&out, n, n), &truth, &ctx);
    let rel = relative_l1(&pred, &s.h)?;
    log::info!("{} sample: relative L1 {rel:.4}, losses {terms:?}", s.class);
    m.set_result("class", s.class)?;
    m.set_result("rel_l1", rel)?;
    m.set_result("losses", terms)
}

fn model_config(name: &str, class: SubdomainClass) -> Result<SmFnoConfig> {
    let c = in_channels(class);
    match name {
        "toy" => Ok(SmFnoConfig::toy(c)),
        "v1" => Ok(SmFnoConfig::v1(c)),
        "v2" => Ok(SmFnoConfig::v2(c)),
        other => Err(CliError::Usage(format!("unknown model {other:?}; expected toy, v1 or v2"))),
    }
}

fn cmd_train(p: &Params, m: &mut Manifest) -> Result<()> {
    let class: SubdomainClass = p.get("class")?;
    let mut reader = SndsReader::open(p.path("data")?)?;
    let header = reader.header().clone();
    let mut samples: Vec<_> = reader.read_all()?.into_iter().filter(|s| s.class == class).collect();
    if let Some(limit) = p.opt::<usize>("limit")? {
        samples.truncate(limit);
    }
    if samples.is_empty() {
        return Err(CliError::Failed(format!("dataset has no {class} samples")));
    }
    let cfg = TrainConfig {
        batch_size: p.get("batch")?,
        epochs: p.get("epochs")?,
        max_steps: p.opt("max-steps")?,
        lr_start: p.get("lr")?,
        lr_decay: p.get("lr-decay")?,
        seed: p.get("seed")?,
        test_fraction: p.get("test-fraction")?,
        checkpoint: p.opt_path("checkpoint")?,
        target_rel_data: None,
        convention: header.convention,
    };
    let loss = LossConfig { c: p.get("bc-weight")?, alpha_prime: p.get("alpha-prime")?, alpha: 0.0, warmup_epochs: p.get("warmup")? };
    let model = SmFno::<f32>::init(
        model_config(&p.get::<String>("model")?, class)?,
        InitOptions { seed: p.get("init-seed")?, ..Default::default() },
    )?;
    log::info!("training {} parameters on {} {class} samples", model.param_count(), samples.len());
    let outcome = train(model, &samples, header.k0_delta, &cfg, &loss)?;
    let meta = serde_json::json!({
        "train": TrainConfig { checkpoint: None, ..cfg },
        "loss": outcome.loss,
        "steps": outcome.steps,
        "samples": samples.len(),
    });
    let saved = SavedModel { model: outcome.model, class: Some(class), convention: header.convention, meta };
    save_weights(&saved, p.path("out")?)?;
    if let Some(h) = p.opt_path("history")? {
        fs::write(h, outcome.history.to_csv())?;
    }
    m.set_result("steps", outcome.steps)?;
    m.set_result("alpha", outcome.loss.alpha)?;
    m.set_result("train_rel_data", outcome.final_train.rel_data)?;
    m.set_result("train_losses", outcome.final_train.terms)
}

fn cmd_bench(p: &Params, m: &mut Manifest) -> Result<()> {
    let suite = match p.get::<String>("suite")?.as_str() {
        "accuracy" | "fig5" => "accuracy",
        "convergence" | "fig7" => "convergence",
        other => return Err(CliError::Usage(format!("unknown suite {other:?}"))),
    };
    let cfg = BenchConfig {
        suite: suite.into(),
        sizes: p.list("sizes")?,
        indices: p.list("indices")?,
        devices_per_group: p.get("devices")?,
        seed: p.get("seed")?,
        material: material(p)?,
        target: p.get("target")?,
        max_iters: p.get("max-iters")?,
        overlap: p.get("overlap")?,
    };
    let backends = Backends::load(p)?;
    let report = run_suite(&cfg, &backends.name(), &backends.set())?;
    for t in &report.accuracy {
        for g in &t.groups {
            log::info!("n={} index={}: mean sweeps {:.2} ({} censored)", g.n, g.index, g.mean_iterations_lower_bound, g.censored);
        }
    }
    let out = p.path("out")?;
    fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
    let mut rec = record("out", &out)?;
    rec.content_sha256 = Some(sha256_bytes(&serde_json::to_vec(&report.without_timings())?));
    m.outputs.push(rec);
    m.set_result("config_hash", config_hash(&cfg)?)
}

fn cmd_export(p: &Params, _m: &mut Manifest) -> Result<()> {
    let fmt: ExportFormat = p.get("format")?;
    let h = load_cf2d(p.path("input")?)?;
    let out = p.path("out")?;
    match fmt {
        ExportFormat::Csv => fs::write(&out, field_to_csv(&h))?,
        ExportFormat::Pgm16 => fs::write(&out, field_to_pgm16(&h))?,
    }
    log::info!("exported {}x{} field to {}", h.nx(), h.ny(), Path::new(&out).display());
    Ok(())
}
