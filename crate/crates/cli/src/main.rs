//! `fedrca`: generate datasets, train, score, sweep and summarize runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedrca_core::config::RunConfig;
use fedrca_core::federation::FederationCheckpoint;
use fedrca_core::io::{self, DatasetManifest};
use fedrca_core::pipeline::{self, Method, Metrics, SweepAxis};
use fedrca_core::seeds::substream_seed;
use fedrca_core::synthetic::{Dataset, World};
use serde_json::json;

/// Where run directories go when `--out` is not given.
const OUTPUT_ROOT_ENV: &str = "FEDRCA_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "fedrca", version, about = "Federated root cause analysis experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `section.key=value` override, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to a named directory under $FEDRCA_OUTPUT_ROOT.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured world and write train/calib/test splits.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one method and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory from `generate`; simulated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "framework", value_parser = parse_method)]
        method: Method,
        /// Continue from this checkpoint for `experiment.epochs` more passes.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Calibrate on the calib split and score the test split.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Re-run the framework across values of one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Summarize one or more run directories and write plot data.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<_> = Method::ALL.iter().map(|m| m.as_str()).collect();
        format!("unknown method {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    SweepAxis::parse(s).ok_or_else(|| {
        let names: Vec<_> = SweepAxis::ALL.iter().map(|a| a.as_str()).collect();
        format!("unknown axis {s:?}; expected one of {}", names.join(", "))
    })
}

fn load_config(common: &Common, base: Option<&Path>) -> Result<RunConfig> {
    let path = common.config.as_deref().or(base);
    let text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::from_toml_with_overrides(&text, &overrides)
        .with_context(|| format!("invalid configuration{}", path.map(|p| format!(" in {}", p.display())).unwrap_or_default()))?;
    Ok(cfg)
}

fn run_dir(common: &Common, cfg: &RunConfig, name: &str) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    let root = cfg
        .output
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{name}-seed{}", cfg.seed))
}

/// Resolved config and every derived seed, enough to re-run the directory.
fn write_manifest(dir: &Path, cfg: &RunConfig) -> Result<()> {
    io::write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let per_client = |label: &str| -> Vec<u64> {
        (0..cfg.world.clients as u64)
            .map(|m| substream_seed(cfg.seed, label, m))
            .collect()
    };
    let seeds = json!({
        "master": cfg.seed,
        "world": substream_seed(cfg.seed, "world", 0),
        "client/phi": per_client("client/phi"),
        "server": substream_seed(cfg.seed, "server", 0),
        "privacy": substream_seed(cfg.seed, "privacy", 0),
        "inference/flags": substream_seed(cfg.seed, "inference/flags", 0),
        "sweep/repeat": (0..cfg.experiment.repeats.max(1) as u64)
            .map(|r| substream_seed(cfg.seed, "sweep/repeat", r))
            .collect::<Vec<_>>(),
    });
    io::write_json(&dir.join("seeds.json"), &seeds)?;
    Ok(())
}

fn write_timing(dir: &Path, command: &str, started: Instant, extra: serde_json::Value) -> Result<()> {
    let mut v = json!({ "command": command, "seconds": started.elapsed().as_secs_f64() });
    if let (Some(m), serde_json::Value::Object(e)) = (v.as_object_mut(), extra) {
        m.extend(e);
    }
    io::write_json(&dir.join("timing.json"), &v)?;
    Ok(())
}

/// The world from the config, checked against a dataset's manifest.
fn world_for(cfg: &RunConfig, manifest: Option<&DatasetManifest>) -> Result<World> {
    let world = pipeline::build_world(cfg)?;
    if let Some(m) = manifest {
        if m.clients != cfg.world.clients || m.state_dims != world.states().dims() {
            bail!(
                "dataset has {} clients with state dims {:?}; the config builds {} with {:?}",
                m.clients,
                m.state_dims,
                cfg.world.clients,
                world.states().dims()
            );
        }
        if let Some(sum) = &m.checksum {
            if *sum != world.checksum() {
                bail!("dataset was generated from different world maps (checksum mismatch); use the generating config and seed");
            }
        }
    }
    Ok(world)
}

fn load_split(dir: &Path, manifest: &DatasetManifest, name: &str) -> Result<Dataset> {
    io::read_split(dir, manifest, name).with_context(|| format!("reading split {name:?} from {}", dir.display()))
}

fn cmd_generate(dir: &Path, cfg: &RunConfig) -> Result<String> {
    let t0 = Instant::now();
    let world = pipeline::build_world(cfg)?;
    let splits = pipeline::generate_splits(cfg, &world)?;
    let manifest = DatasetManifest {
        clients: cfg.world.clients,
        state_dims: world.states().dims().to_vec(),
        obs_dims: world.model.observations.dims().to_vec(),
        seed: Some(cfg.seed),
        checksum: Some(world.checksum()),
        splits: Vec::new(),
    };
    io::write_dataset(
        dir,
        &manifest,
        &[("train", &splits.train), ("calib", &splits.calib), ("test", &splits.test)],
    )?;
    write_manifest(dir, cfg)?;
    write_timing(dir, "generate", t0, json!({}))?;
    Ok(format!(
        "wrote {} clients × ({} + {} + {}) steps, {} test episodes to {}",
        cfg.world.clients,
        splits.train.steps(),
        splits.calib.steps(),
        splits.test.steps(),
        splits.test.episodes.len(),
        dir.display()
    ))
}

fn cmd_train(dir: &Path, cfg: &RunConfig, data: Option<&Path>, method: Method, resume: Option<&Path>) -> Result<String> {
    let t0 = Instant::now();
    let (world, train_data) = match data {
        Some(d) => {
            let manifest = io::read_manifest(d)?;
            let world = world_for(cfg, Some(&manifest))?;
            (world, load_split(d, &manifest, "train")?)
        }
        None => {
            let world = world_for(cfg, None)?;
            let train_data = world.generate_split(cfg.experiment.train_steps, "train", false)?;
            (world, train_data)
        }
    };
    let trained = match resume {
        Some(path) => {
            let ck: FederationCheckpoint =
                io::read_json(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
            pipeline::resume(cfg, &world, &train_data, method, ck, cfg.experiment.epochs)?
        }
        None => pipeline::train(cfg, &world, &train_data, method, false)?,
    };
    write_manifest(dir, cfg)?;
    io::write_json(&dir.join("privacy.json"), &trained.derived)?;
    io::write_json(&dir.join("checkpoint.json"), &trained.federation.checkpoint()?)?;
    io::write_rounds(&dir.join("rounds.csv"), &trained.report)?;
    let report = &trained.report;
    let window = pipeline::FINAL_WINDOW;
    let locals: Vec<f64> = (0..cfg.world.clients)
        .map(|m| pipeline::tail_mean(&report.local_losses(m), window))
        .collect();
    let final_ls = pipeline::tail_mean(&report.server_losses(), window);
    io::write_json(
        &dir.join("train.json"),
        &json!({
            "method": method,
            "rounds": report.rounds.len(),
            "final_server_loss": finite_or_null(final_ls),
            "final_local_losses": locals.iter().map(|&v| finite_or_null(v)).collect::<Vec<_>>(),
            "resumed_from": resume.map(|p| p.display().to_string()),
            "data": data.map(|p| p.display().to_string()),
        }),
    )?;
    write_timing(dir, "train", t0, json!({ "round_seconds": report.wall_seconds.iter().sum::<f64>() }))?;
    Ok(format!(
        "trained {} for {} rounds (final L_s {final_ls:.5}); checkpoint in {}",
        method.as_str(),
        report.rounds.len(),
        dir.display()
    ))
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}

fn cmd_infer(dir: &Path, cfg: &RunConfig, run: &Path, data: Option<&Path>) -> Result<String> {
    let t0 = Instant::now();
    let train_info: serde_json::Value = io::read_json(&run.join("train.json"))
        .with_context(|| format!("{} is not a train run directory", run.display()))?;
    let method = train_info["method"]
        .as_str()
        .and_then(Method::parse)
        .ok_or_else(|| anyhow!("{}: train.json names no known method", run.display()))?;
    let ck: FederationCheckpoint = io::read_json(&run.join("checkpoint.json"))?;
    let data = data
        .map(Path::to_path_buf)
        .or_else(|| train_info["data"].as_str().map(PathBuf::from));
    let (world, splits) = match &data {
        Some(d) => {
            let manifest = io::read_manifest(d)?;
            let world = world_for(cfg, Some(&manifest))?;
            let splits = pipeline::Splits {
                train: load_split(d, &manifest, "train")?,
                calib: load_split(d, &manifest, "calib")?,
                test: load_split(d, &manifest, "test")?,
            };
            (world, splits)
        }
        None => {
            let world = world_for(cfg, None)?;
            let splits = pipeline::generate_splits(cfg, &world)?;
            (world, splits)
        }
    };
    let trained = pipeline::trained_from_checkpoint(cfg, &world, &splits.train, method, ck)?;
    let eval = pipeline::evaluate(cfg, &trained, &splits)?;
    write_manifest(dir, cfg)?;
    io::write_json(&dir.join("privacy.json"), &trained.derived)?;
    io::write_flags(&dir.join("flags.csv"), &eval.flags)?;
    let m = &eval.metrics;
    io::write_csv(
        &dir.join("diagnoses.csv"),
        &["onset", "duration", "root", "predicted"].map(String::from),
        m.episodes.iter().map(|e| {
            let predicted: Vec<String> = e.predicted.iter().map(usize::to_string).collect();
            vec![e.onset.to_string(), e.duration.to_string(), e.root.to_string(), predicted.join(" ")]
        }),
    )?;
    io::write_json(&dir.join("metrics.json"), m)?;
    write_timing(dir, "infer", t0, json!({}))?;
    Ok(format!("{}\nwrote flags, diagnoses and metrics to {}", summary_row(m), dir.display()))
}

fn sweep_header() -> Vec<String> {
    [
        "value",
        "repeat",
        "seed",
        "final_L_s",
        "final_local_loss",
        "arl0",
        "arl1",
        "precision",
        "recall",
        "f1",
        "bytes_per_round",
    ]
    .map(String::from)
    .to_vec()
}

fn cmd_sweep(dir: &Path, cfg: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<String> {
    let t0 = Instant::now();
    let rows = pipeline::sweep(cfg, axis, values)?;
    write_manifest(dir, cfg)?;
    let mut header = sweep_header();
    header[0] = axis.as_str().to_string();
    io::write_csv(
        &dir.join("sweep.csv"),
        &header,
        rows.iter().map(|r| {
            vec![
                r.value.to_string(),
                r.repeat.to_string(),
                r.seed.to_string(),
                r.final_server_loss.to_string(),
                r.final_local_loss.to_string(),
                io::fmt_opt(r.arl0),
                io::fmt_opt(r.arl1),
                io::fmt_opt(r.precision),
                io::fmt_opt(r.recall),
                io::fmt_opt(r.f1),
                r.bytes_per_round.to_string(),
            ]
        }),
    )?;
    write_timing(dir, "sweep", t0, json!({ "runs": rows.len() }))?;
    Ok(format!("{} runs over {} written to {}", rows.len(), axis.as_str(), dir.join("sweep.csv").display()))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

const TABLE_HEADER: &str = "method               ARL0      ARL1      precision recall    F1";

fn summary_row(m: &Metrics) -> String {
    let tail = match (&m.rca, &m.rca_error) {
        (Some(r), _) => format!("{:<9} {:<9} {}", cell(Some(r.precision)), cell(Some(r.recall)), cell(Some(r.f1))),
        (None, Some(e)) => e.clone(),
        (None, None) => "-".to_string(),
    };
    format!("{:<20} {:<9} {:<9} {tail}", m.method.as_str(), cell(m.arl.arl0), cell(m.arl.arl1))
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| Ok(rec?.iter().map(String::from).collect()))
        .collect::<Result<Vec<Vec<String>>>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok((header, rows))
}

fn num(s: &str) -> Option<f64> {
    s.parse().ok()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// `round,L_s,L_local_mean`.
fn report_losses(run: &Path, out: &mut Vec<String>) -> Result<()> {
    let (header, rows) = read_rows(&run.join("rounds.csv"))?;
    let locals: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("L_") && *h != "L_s")
        .map(|(i, _)| i)
        .collect();
    let plot: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let l: Vec<f64> = locals.iter().filter_map(|&i| num(&r[i])).collect();
            vec![r[0].clone(), r[1].clone(), io::fmt_opt(mean(&l))]
        })
        .collect();
    let ls: Vec<f64> = rows.iter().filter_map(|r| num(&r[1])).collect();
    if !ls.is_empty() {
        out.push(format!(
            "training: {} rounds, L_s first {:.5}, final (mean of last {}) {:.5}",
            ls.len(),
            ls[0],
            pipeline::FINAL_WINDOW.min(ls.len()),
            pipeline::tail_mean(&ls, pipeline::FINAL_WINDOW)
        ));
    }
    io::write_csv(&run.join("plot_losses.csv"), &["round", "L_s", "L_local_mean"].map(String::from), plot)?;
    Ok(())
}

/// One row per axis value, columns averaged over repeats.
fn report_sweep(run: &Path, out: &mut Vec<String>) -> Result<()> {
    let (header, rows) = read_rows(&run.join("sweep.csv"))?;
    let mut groups: BTreeMap<String, Vec<&Vec<String>>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in &rows {
        if !groups.contains_key(&r[0]) {
            order.push(r[0].clone());
        }
        groups.entry(r[0].clone()).or_default().push(r);
    }
    let cols = 3..header.len();
    let mut plot_header = vec![header[0].clone(), "runs".to_string()];
    plot_header.extend(header[cols.clone()].iter().cloned());
    out.push(format!("sweep over {}:", header[0]));
    out.push(plot_header.join("\t"));
    let mut plot = Vec::new();
    for v in order {
        let g = &groups[&v];
        let mut row = vec![v.clone(), g.len().to_string()];
        for c in cols.clone() {
            let xs: Vec<f64> = g.iter().filter_map(|r| num(&r[c])).collect();
            row.push(io::fmt_opt(mean(&xs)));
        }
        out.push(row.join("\t"));
        plot.push(row);
    }
    io::write_csv(&run.join("plot_sweep.csv"), &plot_header, plot)?;
    Ok(())
}

fn cmd_report(runs: &[PathBuf]) -> Result<String> {
    let mut out = Vec::new();
    let mut table = Vec::new();
    for run in runs {
        if !run.is_dir() {
            bail!("run directory {} does not exist", run.display());
        }
        let mut lines = vec![format!("== {}", run.display())];
        let mut found = false;
        if run.join("metrics.json").exists() {
            let m: Metrics = io::read_json(&run.join("metrics.json"))?;
            lines.push(format!(
                "detection: {} of {} episodes detected, {} nominal segments",
                m.arl.detected, m.arl.episodes, m.arl.nominal_segments
            ));
            table.push(summary_row(&m));
            found = true;
        }
        if run.join("rounds.csv").exists() {
            report_losses(run, &mut lines)?;
            found = true;
        }
        if run.join("sweep.csv").exists() {
            report_sweep(run, &mut lines)?;
            found = true;
        }
        if !found {
            bail!("{} holds no metrics.json, rounds.csv or sweep.csv", run.display());
        }
        io::write_text(&run.join("report.txt"), &(lines.join("\n") + "\n"))?;
        out.extend(lines);
    }
    if !table.is_empty() {
        out.push(String::new());
        out.push(TABLE_HEADER.to_string());
        out.extend(table);
    }
    Ok(out.join("\n"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (result, dir) = dispatch(cli.command);
    match result {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(dir) = dir {
                match io::quarantine(&dir) {
                    Ok(Some(q)) => eprintln!("partial outputs moved to {}", q.display()),
                    Ok(None) => {}
                    Err(qe) => eprintln!("could not quarantine {}: {qe}", dir.display()),
                }
            }
            ExitCode::FAILURE
        }
    }
}

/// Runs a command; also returns the run directory it was writing, if any.
fn dispatch(command: Command) -> (Result<String>, Option<PathBuf>) {
    let setup = |common: &Common, base: Option<&Path>, name: &str| -> Result<(RunConfig, PathBuf)> {
        let cfg = load_config(common, base)?;
        let dir = run_dir(common, &cfg, name);
        io::ensure_dir(&dir)?;
        Ok((cfg, dir))
    };
    macro_rules! with_dir {
        ($common:expr, $base:expr, $name:expr, |$cfg:ident, $dir:ident| $body:expr) => {
            match setup($common, $base, $name) {
                Ok(($cfg, $dir)) => {
                    let r = (|| -> Result<String> { $body })();
                    (r, Some($dir))
                }
                Err(e) => (Err(e), None),
            }
        };
    }
    match command {
        Command::Generate { common } => with_dir!(&common, None, "generate", |cfg, dir| cmd_generate(&dir, &cfg)),
        Command::Train {
            common,
            data,
            method,
            resume,
        } => with_dir!(&common, None, &format!("train-{}", method.as_str()), |cfg, dir| cmd_train(
            &dir,
            &cfg,
            data.as_deref(),
            method,
            resume.as_deref()
        )),
        Command::Infer { common, run, data } => {
            let base = run.join("config.toml");
            with_dir!(&common, Some(&base), "infer", |cfg, dir| cmd_infer(&dir, &cfg, &run, data.as_deref()))
        }
        Command::Sweep { common, axis, values } => {
            with_dir!(&common, None, &format!("sweep-{}", axis.as_str()), |cfg, dir| cmd_sweep(&dir, &cfg, axis, &values))
        }
        Command::Report { runs } => (cmd_report(&runs), None),
    }
}
