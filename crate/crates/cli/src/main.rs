//! `sada`: one binary for the full experimental protocol. Subcommands
//! generate the synthetic benchmark, train the source checkpoint, evaluate
//! any inference method, and sweep hyperparameters on the validation split.
//!
//! Exit codes: 0 success, 2 usage or bad configuration, 3 training failure,
//! 4 artifact mismatch (including a sweep that touched target-split files),
//! 5 I/O failure.

mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use config::RunConfig;
use sada_core::adapt::{evaluate_set, Aggregate, Method, SampleRecord};
use sada_core::checkpoint::Checkpoint;
use sada_core::error::{Error, Result};
use sada_core::exec;
use sada_core::io;
use sada_core::model::TinySegNet;
use sada_core::optim::poly_lr;
use sada_core::synth::{self, Split};
use sada_core::train::train_source;

#[derive(Parser)]
#[command(name = "sada", version, about = "Self-adaptive segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single-key override, repeatable: --set alpha=0.2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Base seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-image parallelism (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        cfg.apply_sets(&self.set)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate one dataset split (images, masks, manifest).
    Gen {
        /// Output root; files land under <out>/<split>/.
        #[arg(long)]
        out: PathBuf,
        /// source | val | targetA | targetB | targetC
        #[arg(long)]
        split: String,
        /// Number of images.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the source checkpoint.
    Train {
        /// Path to the source manifest (JSON lines).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for --set epochs=N.
        #[arg(long)]
        epochs: Option<u32>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Evaluate one method over a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// tbn | pbn | san | tta | adapt | entropy
        #[arg(long)]
        method: String,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand overrides for the matching config keys.
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long)]
        psi: Option<f32>,
        #[arg(long)]
        eta: Option<f32>,
        #[arg(long)]
        iters: Option<u32>,
        /// Comma-separated parameter groups to adapt.
        #[arg(long)]
        groups: Option<String>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Sweep one hyperparameter over a grid on the validation split.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// alpha | psi | eta | iters
        #[arg(long)]
        param: String,
        /// Comma-separated grid, e.g. 0,0.1,0.2
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        /// Evaluation method; defaults to san for alpha, adapt otherwise.
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        common: ConfigArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SADA_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Contract(_) => 2,
        Error::Training(_) => 3,
        Error::Shape(_) | Error::Format(_) | Error::ArchMismatch(_) => 4,
        Error::Io { .. } => 5,
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen { out, split, n, seed } => cmd_gen(&out, &split, n, seed),
        Cmd::Train { data, out, epochs, common } => cmd_train(&data, &out, epochs, &common),
        Cmd::Eval { ckpt, data, method, out, alpha, psi, eta, iters, groups, common } => {
            let mut cfg = common.build()?;
            if let Some(v) = alpha {
                cfg.adapt.alpha = v;
            }
            if let Some(v) = psi {
                cfg.adapt.psi = v;
            }
            if let Some(v) = eta {
                cfg.adapt.eta = v;
            }
            if let Some(v) = iters {
                cfg.adapt.n_iters = v;
            }
            if let Some(g) = &groups {
                cfg.adapt.adapt_groups = g.split(',').map(|s| s.trim().to_string()).collect();
            }
            cmd_eval(&ckpt, &data, &method, &out, &cfg, common.jobs)
        }
        Cmd::Sweep { ckpt, data, param, grid, out, method, common } => {
            let cfg = common.build()?;
            cmd_sweep(&ckpt, &data, &param, &grid, &out, method.as_deref(), &cfg, common.jobs)
        }
    }
}

fn cmd_gen(out: &Path, split: &str, n: usize, seed: u64) -> Result<()> {
    let split = Split::parse(split)?;
    let (manifest, entries) = synth::generate(out, split, n, seed)?;
    info!("wrote {} samples for split {split}", entries.len());
    println!("{}", manifest.display());
    Ok(())
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn create_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_config_echo(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(
        &out.join("effective_config.txt"),
        &format!("# config_hash = {}\n{}", cfg.hash(), cfg.canonical()),
    )
}

#[derive(Serialize)]
struct TrainLogLine {
    step: u32,
    lr: f32,
    loss: f32,
}

#[derive(Serialize)]
struct TrainSummary {
    steps: u32,
    epochs: u32,
    final_loss: f32,
    config_hash: u32,
}

fn cmd_train(data: &Path, out: &Path, epochs: Option<u32>, common: &ConfigArgs) -> Result<()> {
    let mut cfg = common.build()?;
    if let Some(e) = epochs {
        cfg.recipe.epochs = e;
    }
    cfg.recipe.seed = cfg.seed;
    cfg.validate()?;
    let entries = io::read_manifest(data)?;
    let dir = manifest_dir(data);
    create_out_dir(out)?;

    let mut net = TinySegNet::new(cfg.classes, cfg.seed);
    let stats = exec::with_jobs(common.jobs, || train_source(&mut net, &dir, &entries, &cfg.recipe))?;

    let ckpt = Checkpoint::from_net(&net, stats.epochs, cfg.seed, &data.display().to_string());
    let ckpt_path = out.join("checkpoint.sack");
    ckpt.save(&ckpt_path)?;

    let total = stats.steps as usize;
    let mut log = String::new();
    for (i, loss) in stats.losses.iter().enumerate() {
        let line = TrainLogLine {
            step: i as u32,
            lr: poly_lr(cfg.recipe.base_lr, i, total, cfg.recipe.poly_power),
            loss: *loss,
        };
        log.push_str(&serde_json::to_string(&line).expect("log line serializes"));
        log.push('\n');
    }
    let summary = TrainSummary {
        steps: stats.steps,
        epochs: stats.epochs,
        final_loss: *stats.losses.last().unwrap_or(&f32::NAN),
        config_hash: cfg.hash(),
    };
    log.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
    log.push('\n');
    write_text(&out.join("train_log.jsonl"), &log)?;
    write_config_echo(out, &cfg)?;
    info!("trained {} steps, final loss {}", summary.steps, summary.final_loss);
    println!("{}", ckpt_path.display());
    Ok(())
}

fn write_records(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::format(format!("record: {e}")))?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn write_aggregate(path: &Path, agg: &Aggregate) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(agg).map_err(|e| Error::format(format!("aggregate: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    method: &str,
    out: &Path,
    cfg: &RunConfig,
    jobs: Option<usize>,
) -> Result<()> {
    cfg.validate()?;
    let method = Method::parse(method)?;
    let net = Checkpoint::load(ckpt)?.build_net()?;
    let entries = io::read_manifest(data)?;
    let dir = manifest_dir(data);
    create_out_dir(out)?;

    let result = exec::with_jobs(jobs, || evaluate_set(&net, &dir, &entries, method, &cfg.adapt))?;
    let agg = result.aggregate(method, cfg.hash());
    write_records(&out.join("records.jsonl"), &result.records)?;
    write_aggregate(&out.join("aggregate.json"), &agg)?;
    write_config_echo(out, cfg)?;
    info!(
        "method {method}: {} images, miou {:?}, ece {:?}",
        agg.n_images, agg.miou, agg.ece
    );
    println!("{}", out.join("aggregate.json").display());
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    value: f64,
    aggregate: Aggregate,
    /// Mean first-iteration pseudo-label coverage (adaptive methods only).
    coverage: Option<f64>,
    wall_ms: u64,
}

#[derive(Serialize)]
struct SweepReport {
    param: String,
    method: String,
    rows: Vec<SweepRow>,
    best_value: f64,
    best_miou: f64,
    config_hash: u32,
}

fn apply_sweep_value(cfg: &mut RunConfig, param: &str, token: &str) -> Result<f64> {
    match param {
        "alpha" | "psi" | "eta" => {
            let v: f32 = token.trim().parse().map_err(|_| {
                Error::contract(format!("grid value '{token}' is not a number"))
            })?;
            match param {
                "alpha" => cfg.adapt.alpha = v,
                "psi" => cfg.adapt.psi = v,
                _ => cfg.adapt.eta = v,
            }
            Ok(v as f64)
        }
        "iters" => {
            let v: u32 = token.trim().parse().map_err(|_| {
                Error::contract(format!("grid value '{token}' is not an iteration count"))
            })?;
            cfg.adapt.n_iters = v;
            Ok(v as f64)
        }
        other => Err(Error::contract(format!(
            "unknown sweep parameter '{other}' (expected alpha|psi|eta|iters)"
        ))),
    }
}

fn check_no_target_reads(entries: &[io::ManifestEntry], paths: &[PathBuf]) -> Result<()> {
    for e in entries {
        if Split::parse(&e.domain).map(|s| s.is_target()).unwrap_or(false) {
            return Err(Error::format(format!(
                "sweep data contains target-split sample '{}' (domain {})",
                e.image, e.domain
            )));
        }
    }
    for p in paths {
        let touches_target = p
            .components()
            .any(|c| c.as_os_str().to_string_lossy().starts_with("target"));
        if touches_target {
            return Err(Error::format(format!(
                "sweep read a target-split file: {}",
                p.display()
            )));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    ckpt: &Path,
    data: &Path,
    param: &str,
    grid: &str,
    out: &Path,
    method: Option<&str>,
    base_cfg: &RunConfig,
    jobs: Option<usize>,
) -> Result<()> {
    let method = match method {
        Some(m) => Method::parse(m)?,
        None if param == "alpha" => Method::San,
        None => Method::Adapt,
    };
    let tokens: Vec<&str> = grid.split(',').filter(|t| !t.trim().is_empty()).collect();
    if tokens.is_empty() {
        return Err(Error::contract("empty sweep grid"));
    }

    io::audit_begin();
    let result = (|| -> Result<(Vec<SweepRow>, Vec<io::ManifestEntry>)> {
        let net = Checkpoint::load(ckpt)?.build_net()?;
        let entries = io::read_manifest(data)?;
        let dir = manifest_dir(data);
        let mut rows = Vec::with_capacity(tokens.len());
        for token in &tokens {
            let mut cfg = base_cfg.clone();
            let value = apply_sweep_value(&mut cfg, param, token)?;
            cfg.validate()?;
            let eval =
                exec::with_jobs(jobs, || evaluate_set(&net, &dir, &entries, method, &cfg.adapt))?;
            let coverages: Vec<f64> = eval
                .records
                .iter()
                .filter_map(|r| r.coverage.first().map(|c| *c as f64))
                .collect();
            let coverage = if coverages.is_empty() {
                None
            } else {
                Some(coverages.iter().sum::<f64>() / coverages.len() as f64)
            };
            let wall_ms = eval.records.iter().map(|r| r.wall_ms).sum();
            let aggregate = eval.aggregate(method, cfg.hash());
            info!("sweep {param}={value}: miou {:?}", aggregate.miou);
            rows.push(SweepRow { value, aggregate, coverage, wall_ms });
        }
        Ok((rows, entries))
    })();
    let read_paths = io::audit_end();
    let (rows, entries) = result?;
    check_no_target_reads(&entries, &read_paths)?;

    let best = rows
        .iter()
        .filter_map(|r| r.aggregate.miou.map(|m| (r.value, m)))
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("miou is never NaN"))
        .ok_or_else(|| Error::contract("no grid point produced a defined mIoU"))?;

    create_out_dir(out)?;
    let mut csv = String::from("param,value,miou,ece,coverage,wall_ms\n");
    for r in &rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{param},{},{},{},{},{}\n",
            r.value,
            opt(r.aggregate.miou),
            opt(r.aggregate.ece),
            opt(r.coverage),
            r.wall_ms
        ));
    }
    write_text(&out.join("sweep.csv"), &csv)?;
    let report = SweepReport {
        param: param.to_string(),
        method: method.name().to_string(),
        rows,
        best_value: best.0,
        best_miou: best.1,
        config_hash: base_cfg.hash(),
    };
    let mut json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::format(format!("sweep report: {e}")))?;
    json.push('\n');
    write_text(&out.join("sweep.json"), &json)?;
    write_config_echo(out, base_cfg)?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "best {param} = {} (miou {:.4})", best.0, best.1);
    Ok(())
}
