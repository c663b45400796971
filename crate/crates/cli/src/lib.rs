//! `snapddm` command line: argument handling, manifests and replay.

pub mod commands;
pub mod config;
pub mod error;
pub mod export;
pub mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::commands::{commands, find, CommandSpec};
use crate::config::{parse_kv, resolve, KeyKind, Params, Resolved};
use crate::error::{CliError, Result};
use crate::manifest::{record, sha256_file, Manifest};

pub const THREADS_ENV: &str = "SNAPDDM_THREADS";

pub fn cli() -> Command {
    let mut root = Command::new("snapddm")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Domain-decomposition wave solvers with neural subdomain backends")
        .after_help(format!(
            "Every command also accepts --config FILE with `key = value` lines; flags override the file.\n\
             {THREADS_ENV} sets the worker thread count."
        ))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(Arg::new("config").long("config").global(true).value_name("FILE").help("key = value config file"))
        .arg(
            Arg::new("manifest")
                .long("manifest")
                .global(true)
                .value_name("FILE")
                .help("manifest path (default: <out>.manifest.json); for replay, the manifest to rerun"),
        )
        .arg(Arg::new("verbose").short('v').long("verbose").global(true).action(ArgAction::Count).help("more logging"))
        .arg(Arg::new("quiet").short('q').long("quiet").global(true).action(ArgAction::SetTrue).help("errors only"));
    for spec in commands() {
        let mut sub = Command::new(spec.name).about(spec.about);
        for k in spec.keys {
            let help = match k.default {
                Some(d) => format!("{} [default: {d}]", k.help),
                None => k.help.to_string(),
            };
            sub = sub.arg(Arg::new(k.name).long(k.name).value_name("VALUE").help(help));
        }
        root = root.subcommand(sub);
    }
    root.subcommand(
        Command::new("replay")
            .about("Rerun a command from its manifest and compare output hashes")
            .arg(Arg::new("out-dir").long("out-dir").value_name("DIR").help("where rerun outputs go (default: a temp dir)")),
    )
}

fn init_logging(m: &ArgMatches) {
    let level = if m.get_flag("quiet") {
        log::LevelFilter::Error
    } else {
        match m.get_count("verbose") {
            0 => log::LevelFilter::Info,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp_millis().try_init();
}

pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Runs `spec` on a resolved config in a pool of `threads` workers and
/// returns the manifest (not yet saved).
pub fn execute(spec: &CommandSpec, config: Resolved, threads: usize) -> Result<Manifest> {
    let mut manifest = Manifest::new(spec.name, config.clone(), threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Failed(format!("thread pool: {e}")))?;
    let params = Params::new(&config);
    pool.install(|| (spec.run)(&params, &mut manifest))?;
    for k in spec.keys.iter().filter(|k| k.kind == KeyKind::Input) {
        if let Some(path) = config.get(k.name) {
            manifest.inputs.push(record(k.name, Path::new(path))?);
        }
    }
    for k in spec.keys.iter().filter(|k| k.kind == KeyKind::Output) {
        if let Some(path) = config.get(k.name) {
            if !manifest.outputs.iter().any(|r| r.key == k.name) {
                manifest.outputs.push(record(k.name, Path::new(path))?);
            }
        }
    }
    Ok(manifest)
}

fn default_manifest_path(config: &Resolved) -> Result<PathBuf> {
    let out = config.get("out").ok_or_else(|| CliError::Usage("--out is required".into()))?;
    Ok(PathBuf::from(format!("{out}.manifest.json")))
}

fn run_command(spec: &CommandSpec, top: &ArgMatches, sub: &ArgMatches) -> Result<()> {
    let file = match top.get_one::<String>("config") {
        Some(p) => parse_kv(&std::fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    let flags: BTreeMap<String, String> =
        spec.keys.iter().filter_map(|k| sub.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone()))).collect();
    let config = resolve(spec.keys, &file, &flags)?;
    let manifest_path = match top.get_one::<String>("manifest") {
        Some(p) => PathBuf::from(p),
        None => default_manifest_path(&config)?,
    };
    let manifest = execute(spec, config, threads_from_env()?)?;
    manifest.save(&manifest_path)?;
    log::info!("manifest written to {}", manifest_path.display());
    Ok(())
}

/// Reruns the manifest's command with outputs redirected to `out_dir`
/// and returns the keys whose outputs or results differ.
pub fn replay(manifest: &Manifest, out_dir: &Path) -> Result<Vec<String>> {
    let spec = find(&manifest.command).ok_or_else(|| CliError::Failed(format!("unknown command {:?}", manifest.command)))?;
    for rec in &manifest.inputs {
        let now = sha256_file(&rec.path)?;
        if now != rec.sha256 {
            return Err(CliError::Failed(format!("input {} ({}) changed since the recorded run", rec.key, rec.path.display())));
        }
    }
    let mut config = manifest.config.clone();
    for k in spec.keys.iter().filter(|k| k.kind == KeyKind::Output) {
        if let Some(v) = config.get_mut(k.name) {
            let name = Path::new(v.as_str()).file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            *v = out_dir.join(format!("{}-{name}", k.name)).to_string_lossy().into_owned();
        }
    }
    let rerun = execute(spec, config, manifest.threads)?;
    let mut diffs = Vec::new();
    for rec in &manifest.outputs {
        let same = rerun.outputs.iter().find(|r| r.key == rec.key).is_some_and(|r| match (&rec.content_sha256, &r.content_sha256) {
            (Some(a), Some(b)) => a == b,
            _ => r.sha256 == rec.sha256,
        });
        if !same {
            diffs.push(rec.key.clone());
        }
    }
    if rerun.results != manifest.results {
        diffs.push("results".into());
    }
    Ok(diffs)
}

fn run_replay(top: &ArgMatches, sub: &ArgMatches) -> Result<()> {
    let path = top.get_one::<String>("manifest").ok_or_else(|| CliError::Usage("replay needs --manifest FILE".into()))?;
    let manifest = Manifest::load(path)?;
    let tmp;
    let dir = match sub.get_one::<String>("out-dir") {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            PathBuf::from(d)
        }
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let diffs = replay(&manifest, &dir)?;
    if !diffs.is_empty() {
        return Err(CliError::Failed(format!("replay of {path} differs in: {}", diffs.join(", "))));
    }
    println!("replay ok: {} outputs match ({})", manifest.outputs.len(), manifest.command);
    Ok(())
}

/// Parses `args` (including the program name) and returns the exit code:
/// 0 on success, 1 when the operation fails, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let m = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(&m);
    let (name, sub) = m.subcommand().expect("subcommand required");
    let res = if name == "replay" {
        run_replay(&m, sub)
    } else {
        let spec = find(name).expect("registered subcommand");
        run_command(spec, &m, sub)
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
