//! `polyseq`: generate datasets, train, evaluate, ablate and plot.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use polyseq::eval;
use polyseq::experiment::{self, EvalSplit, Evaluated, ExperimentConfig, RunManifest, MANIFEST_FILE};
use polyseq::grad::load_checkpoint;

const CODE_HASH: &str = env!("POLYSEQ_CODE_HASH");

#[derive(Parser, Debug)]
#[command(name = "polyseq", version, about = "Parallel vs auto-regressive set prediction experiments")]
struct Cli {
    /// Worker threads for generation and evaluation.
    #[arg(long, global = true, env = "POLYSEQ_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a dataset of rendered scenes and labels.
    Gen(GenArgs),
    /// Train a model; evaluates the final checkpoint unless --no-eval.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the ground truth with --oracle).
    Eval(EvalArgs),
    /// Order × decoder positional encoding ablation of an AR config.
    Ablate(RunArgs),
    /// Compare AP-versus-threshold curves of several evaluation reports.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// `key = value` experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run the command recorded in a run manifest.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Number of scenes.
    #[arg(long)]
    count: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Continue from this checkpoint's step counter.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Skip the evaluation of the final checkpoint.
    #[arg(long)]
    no_eval: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to evaluate; its embedded config is used without --config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate on held-out scenes with `n_max` scaled by this factor.
    #[arg(long)]
    cardinality_multiplier: Option<usize>,
    /// Score the ground truth itself as detections.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// `summary.json` files or directories containing one.
    #[arg(long = "report", required = true, num_args = 1..)]
    reports: Vec<PathBuf>,
    /// SVG file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "AP by threshold")]
    title: String,
}

fn workers(cli: &Cli) -> usize {
    cli.workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

/// The config and recorded flags of a run, from `--manifest` or `--config`.
struct Resolved {
    config: ExperimentConfig,
    args: BTreeMap<String, String>,
}

fn resolve(run: &RunArgs, command: &str, fallback: Option<ExperimentConfig>) -> Result<Resolved> {
    if let Some(path) = &run.manifest {
        let m = RunManifest::read(path)?;
        if m.command != command {
            bail!("{} records a `{}` run, not `{command}`", path.display(), m.command);
        }
        return Ok(Resolved {
            config: m.experiment_config()?,
            args: m.args,
        });
    }
    let config = match (&run.config, fallback) {
        (Some(path), _) => ExperimentConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(cfg)) => cfg,
        (None, None) => bail!("`{command}` needs --config or --manifest"),
    };
    Ok(Resolved {
        config,
        args: BTreeMap::new(),
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Digests of every file under `dir` except the run manifest itself.
fn digests(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let p = e?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_file(&p)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

fn finish(command: &str, out: &Path, r: &Resolved, started: Instant, history: Vec<experiment::LossRow>, report: Option<&str>) -> Result<()> {
    let manifest = RunManifest {
        command: command.into(),
        args: r.args.clone(),
        config: r.config.to_text(),
        code_hash: CODE_HASH.into(),
        seed: r.config.seed,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        metric_history: history,
        report: report.map(str::to_string),
        outputs: digests(out)?,
    };
    manifest.write(out)?;
    Ok(())
}

fn print_report(report: &eval::EvalReport) {
    println!("task {} mAP {:.4}", report.task, report.map);
    for t in &report.per_threshold {
        println!("  threshold {:.2}: AP {:.4} (tp {}, fp {}, fn {})", t.threshold, t.ap, t.tp, t.fp, t.fn_);
    }
    let d = report.diagnostics;
    if d.malformed_detections + d.malformed_outputs > 0 {
        println!("  malformed detections {}, malformed outputs {}", d.malformed_detections, d.malformed_outputs);
    }
}

fn cmd_gen(a: &GenArgs, workers: usize) -> Result<()> {
    let started = Instant::now();
    let mut r = resolve(&a.run, "gen", None)?;
    let count = match a.count {
        Some(c) => c,
        None => r.args.get("count").context("`gen` needs --count")?.parse().context("manifest count")?,
    };
    r.args.insert("count".into(), count.to_string());
    experiment::generate_dataset(&r.config, count, &a.run.out, workers)?;
    fs::write(a.run.out.join(experiment::CONFIG_FILE), r.config.to_text())?;
    println!("wrote {count} {} scenes to {}", r.config.task, a.run.out.display());
    finish("gen", &a.run.out, &r, started, Vec::new(), None)
}

fn cmd_train(a: &TrainArgs, workers: usize) -> Result<()> {
    let started = Instant::now();
    let mut r = resolve(&a.run, "train", None)?;
    let no_eval = a.no_eval || r.args.get("no_eval").is_some_and(|v| v == "true");
    if no_eval {
        r.args.insert("no_eval".into(), "true".into());
    }
    let out = &a.run.out;
    let summary = experiment::train(&r.config, out, a.resume.as_deref(), &mut |row| {
        eprintln!("step {:>7} loss {:.5} grad_norm {:.4} lr {:.2e}", row.step, row.loss, row.grad_norm, row.lr_transformer);
    })?;
    println!("trained {} steps, final loss {:.5}, checkpoint {}", summary.steps, summary.final_loss, summary.checkpoint.display());
    let report = if no_eval {
        None
    } else {
        let rep = experiment::evaluate(&r.config, Evaluated::Checkpoint(&summary.checkpoint), &out.join("eval"), workers)?;
        print_report(&rep);
        Some("eval/summary.json")
    };
    finish("train", out, &r, started, summary.history, report)
}

fn cmd_eval(a: &EvalArgs, workers: usize) -> Result<()> {
    let started = Instant::now();
    let mut args = BTreeMap::new();
    let checkpoint = a.checkpoint.clone();
    let embedded = match (&checkpoint, &a.run.config, &a.run.manifest) {
        (Some(ck), None, None) => {
            let ck = load_checkpoint(ck).with_context(|| format!("loading {}", ck.display()))?;
            let text = ck.config["run"]["config"].as_str().context("checkpoint carries no run config; pass --config")?;
            Some(ExperimentConfig::parse(text)?)
        }
        _ => None,
    };
    let mut r = resolve(&a.run, "eval", embedded)?;
    let checkpoint = match checkpoint {
        Some(c) => Some(c),
        None => r.args.get("checkpoint").map(PathBuf::from),
    };
    let oracle = a.oracle || r.args.get("oracle").is_some_and(|v| v == "true");
    let multiplier = match a.cardinality_multiplier {
        Some(k) => Some(k),
        None => r.args.get("cardinality_multiplier").map(|v| v.parse()).transpose().context("manifest multiplier")?,
    };
    if let Some(k) = multiplier {
        r.config.eval_split = EvalSplit::Test;
        r.config.cardinality_multiplier = k;
        r.config.validate()?;
        args.insert("cardinality_multiplier".into(), k.to_string());
    }
    let what = if oracle {
        args.insert("oracle".into(), "true".into());
        Evaluated::Oracle
    } else {
        let ck = checkpoint.as_deref().context("`eval` needs --checkpoint or --oracle")?;
        let abs = fs::canonicalize(ck).with_context(|| format!("resolving {}", ck.display()))?;
        args.insert("checkpoint".into(), abs.to_string_lossy().into_owned());
        Evaluated::Checkpoint(ck)
    };
    r.args = args;
    let report = experiment::evaluate(&r.config, what, &a.run.out, workers)?;
    fs::write(a.run.out.join(experiment::CONFIG_FILE), r.config.to_text())?;
    print_report(&report);
    finish("eval", &a.run.out, &r, started, Vec::new(), Some("summary.json"))
}

fn cmd_ablate(a: &RunArgs, workers: usize) -> Result<()> {
    let started = Instant::now();
    let r = resolve(a, "ablate", None)?;
    let rows = experiment::ablate(&r.config, &a.out, workers, &mut |msg| eprintln!("{msg}"))?;
    for row in &rows {
        println!(
            "order {:<8} pos_enc {:<5} seed {:>3}: mAP {:.4} delta {:+.4}",
            row.order.as_str(),
            row.pos_enc,
            row.seed,
            row.map,
            row.delta
        );
    }
    fs::write(a.out.join(experiment::CONFIG_FILE), r.config.to_text())?;
    finish("ablate", &a.out, &r, started, Vec::new(), Some("ablation.csv"))
}

fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let mut series = Vec::new();
    for path in &a.reports {
        let file = if path.is_dir() { path.join("summary.json") } else { path.clone() };
        let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
        let per = v["per_threshold"].as_object().with_context(|| format!("{}: no per_threshold table", file.display()))?;
        let mut pts = Vec::with_capacity(per.len());
        for (t, ap) in per {
            let t: f64 = t.parse().with_context(|| format!("{}: threshold {t:?}", file.display()))?;
            pts.push((t, ap.as_f64().with_context(|| format!("{}: AP at {t}", file.display()))?));
        }
        let name = file
            .parent()
            .and_then(|p| p.file_name())
            .map_or_else(|| file.display().to_string(), |n| n.to_string_lossy().into_owned());
        let map = v["mAP"].as_f64().unwrap_or(f64::NAN);
        series.push((format!("{name} (mAP {map:.3})"), pts));
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, eval::ap_threshold_svg(&a.title, &series)).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} with {} series", a.out.display(), series.len());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let w = workers(cli);
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, w),
        Command::Train(a) => cmd_train(a, w),
        Command::Eval(a) => cmd_eval(a, w),
        Command::Ablate(a) => cmd_ablate(a, w),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            eprintln!("run `polyseq --help` for usage");
            ExitCode::FAILURE
        }
    }
}
