use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use recall_forge::calibration::{CalibrationSummary, CorrectiveTriplet};
use recall_forge::io::{ensure_dir, read_json, write_json};
use recall_forge::miner::MiningReport;
use recall_forge::numeric::EncoderParameters;
use recall_forge::pipeline::{self as pl, PipelineConfig};
use recall_forge::retrieval::MetricsReport;
use recall_forge::trainer::Profile;
use recall_forge::world::World;
use recall_forge::Error;

const CONFIG: &str = "config.json";

#[derive(Parser)]
#[command(name = "recall-forge", version, about = "Diagnose, generate and refine a composed-retrieval encoder")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults to <out>/config.json when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Top-level seed; re-derives every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Remote oracle server root, e.g. http://127.0.0.1:8080
    #[arg(long, global = true, env = "RECALL_FORGE_ORACLE_URL")]
    oracle_url: Option<String>,
    /// Hyperparameter preset for both training stages.
    #[arg(long, global = true)]
    profile: Option<Profile>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) the world and write it to the run directory.
    GenWorld,
    /// Stage 1: InfoNCE training from a fresh encoder.
    TrainBase,
    /// Rank the gallery with the base encoder and record failures.
    Mine,
    /// Generate corrective triplets and filter them through the oracle.
    Calibrate,
    /// Grouped contrastive refinement from the base encoder.
    Refine,
    /// Score the base and refined snapshots on the held-out queries.
    Evaluate {
        /// Evaluate only this snapshot and print its metrics.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Every stage in order.
    Pipeline,
    /// Render metrics and filter statistics.
    Report {
        /// Render only this calibration summary file.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            let body = json!({"error": {"kind": kind(&e), "message": format!("{e:#}"), "exit_code": code}});
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}

fn library_error(e: &anyhow::Error) -> Option<&Error> {
    e.chain().find_map(|c| c.downcast_ref::<Error>())
}

fn kind(e: &anyhow::Error) -> &'static str {
    match exit_code(e) {
        2 => "usage",
        3 => "missing_input",
        4 => "schema",
        5 => "oracle_unreachable",
        6 => "divergence",
        _ => "failure",
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match library_error(e) {
        Some(Error::Argument(_)) => 2,
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 3,
        Some(Error::Schema { .. } | Error::Json(_) | Error::Data(_) | Error::Shape { .. }) => 4,
        Some(Error::Transport(_)) => 5,
        Some(Error::Divergence { .. }) => 6,
        Some(_) => 1,
        None if e.downcast_ref::<MissingInput>().is_some() => 3,
        None if e.downcast_ref::<Usage>().is_some() => 2,
        None => 1,
    }
}

#[derive(Debug, thiserror::Error)]
#[error("missing input: {0}")]
struct MissingInput(String);

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn require(path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(MissingInput(path.display().to_string()).into());
    }
    Ok(())
}

struct Run {
    dir: PathBuf,
    cfg: PipelineConfig,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn input(&self, name: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        require(&p)?;
        Ok(p)
    }

    fn world(&self) -> anyhow::Result<World> {
        let p = self.input(pl::WORLD_DIR)?;
        Ok(World::load(&p)?)
    }

    fn snapshot(&self, name: &str) -> anyhow::Result<EncoderParameters> {
        Ok(EncoderParameters::load(&self.input(name)?)?)
    }
}

/// Resolves the config (file, then flags) and the run directory.
fn open_run(common: &Common, fresh: bool) -> anyhow::Result<Run> {
    let config_path = match (&common.config, &common.out) {
        (Some(c), _) => Some(c.clone()),
        (None, Some(out)) if out.join(CONFIG).exists() => Some(out.join(CONFIG)),
        _ => None,
    };
    let mut cfg = match &config_path {
        Some(p) => {
            require(p)?;
            PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(profile) = common.profile {
        cfg.apply_profile(profile);
    }
    if let Some(seed) = common.seed {
        cfg.reseed(seed);
    }
    cfg.validate()?;

    let dir = match &common.out {
        Some(d) => d.clone(),
        None if fresh => {
            let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            PathBuf::from("runs").join(format!("{}-{ts}", cfg.hash()))
        }
        None => return Err(Usage("--out is required to locate the run directory".into()).into()),
    };
    ensure_dir(&dir)?;
    write_json(&dir.join(CONFIG), &cfg)?;
    Ok(Run { dir, cfg })
}

fn dispatch(cli: &Cli) -> anyhow::Result<Value> {
    let c = &cli.common;
    let oracle_url = c.oracle_url.as_deref().filter(|s| !s.is_empty());
    match &cli.command {
        Command::GenWorld => gen_world(&open_run(c, true)?),
        Command::TrainBase => train_base(&open_run(c, false)?),
        Command::Mine => mine(&open_run(c, false)?),
        Command::Calibrate => calibrate(&open_run(c, false)?, oracle_url),
        Command::Refine => refine(&open_run(c, false)?),
        Command::Evaluate { snapshot } => evaluate(&open_run(c, false)?, snapshot.as_deref()),
        Command::Report { calibration: Some(path) } => {
            require(path)?;
            let s: CalibrationSummary = read_json(path)?;
            Ok(json!({"report": pl::calibration_line(&s).trim_end()}))
        }
        Command::Report { calibration: None } => report(&open_run(c, false)?),
        Command::Pipeline => {
            let run = open_run(c, true)?;
            gen_world(&run)?;
            train_base(&run)?;
            mine(&run)?;
            calibrate(&run, oracle_url)?;
            refine(&run)?;
            evaluate(&run, None)?;
            let mut summary = report(&run)?;
            summary["run_dir"] = json!(run.dir);
            Ok(summary)
        }
    }
}

fn gen_world(run: &Run) -> anyhow::Result<Value> {
    let world = pl::gen_world_stage(&run.cfg, &run.dir)?;
    Ok(json!({
        "stage": "gen-world",
        "items": world.items.len(),
        "queries": world.queries.len(),
        "train_queries": world.train_queries().len(),
        "test_queries": world.test_queries().len(),
    }))
}

fn train_base(run: &Run) -> anyhow::Result<Value> {
    let world = run.world()?;
    let (_, log) = pl::train_base_stage(&world, &run.cfg, &run.dir)?;
    Ok(json!({
        "stage": "train-base",
        "steps": log.records.len(),
        "final_loss": log.records.last().map(|r| r.loss_total),
        "snapshot_id": log.snapshot_id,
    }))
}

fn mine(run: &Run) -> anyhow::Result<Value> {
    let world = run.world()?;
    let base = run.snapshot(pl::BASE_SNAPSHOT)?;
    let report = pl::mine_stage(&base, &world, &run.cfg)?;
    report.save(&run.path(pl::MINING_REPORT))?;
    Ok(json!({
        "stage": "mine",
        "queries": report.records.len(),
        "failures": report.failure_count(),
        "instances": report.mined_instance_count(),
    }))
}

fn calibrate(run: &Run, oracle_url: Option<&str>) -> anyhow::Result<Value> {
    let world = run.world()?;
    let mining = MiningReport::load(&run.input(pl::MINING_REPORT)?)?;
    let oracle = pl::make_oracle(&world, &run.cfg, oracle_url)?;
    let cal = pl::calibrate_stage(oracle.as_ref(), &world, &mining, &run.cfg)?;
    pl::save_calibration(&cal, &run.dir)?;
    Ok(json!({"stage": "calibrate", "summary": cal.summary}))
}

fn refine(run: &Run) -> anyhow::Result<Value> {
    let world = run.world()?;
    let base = run.snapshot(pl::BASE_SNAPSHOT)?;
    let kept = CorrectiveTriplet::load_all(&run.input(pl::KEPT)?)?;
    let (_, log) = pl::refine_stage(base, &world, &kept, &run.cfg, &run.dir)?;
    Ok(json!({
        "stage": "refine",
        "correctives": kept.len(),
        "steps": log.records.len(),
        "final_loss": log.records.last().map(|r| r.loss_total),
        "snapshot_id": log.snapshot_id,
    }))
}

fn evaluate(run: &Run, snapshot: Option<&Path>) -> anyhow::Result<Value> {
    let world = run.world()?;
    if let Some(path) = snapshot {
        require(path)?;
        let params = EncoderParameters::load(path)?;
        let m = pl::evaluate(&params, &world, world.test_queries(), &run.cfg.eval)?;
        return Ok(json!({"stage": "evaluate", "metrics": m}));
    }
    let mut out = json!({"stage": "evaluate"});
    for (snap, metrics, key) in [
        (pl::BASE_SNAPSHOT, pl::BASE_METRICS, "base"),
        (pl::REFINE_SNAPSHOT, pl::REFINE_METRICS, "refine"),
    ] {
        if !run.path(snap).exists() {
            continue;
        }
        let params = run.snapshot(snap)?;
        let m = pl::evaluate(&params, &world, world.test_queries(), &run.cfg.eval)?;
        write_json(&run.path(metrics), &m)?;
        out[key] = json!(m);
    }
    if out.get("base").is_none() && out.get("refine").is_none() {
        bail!(MissingInput(format!("no snapshot in {}", run.dir.display())));
    }
    Ok(out)
}

fn report(run: &Run) -> anyhow::Result<Value> {
    let base: MetricsReport = read_json(&run.input(pl::BASE_METRICS)?)?;
    let refined: MetricsReport = read_json(&run.input(pl::REFINE_METRICS)?)?;
    let summary: Option<CalibrationSummary> = match run.path(pl::CALIBRATION_SUMMARY) {
        p if p.exists() => Some(read_json(&p)?),
        _ => None,
    };
    let text = pl::render_report(&base, &refined, summary.as_ref());
    std::fs::write(run.path(pl::REPORT), &text).with_context(|| format!("writing {}", pl::REPORT))?;
    Ok(json!({
        "stage": "report",
        "text": text,
        "base": base,
        "refine": refined,
        "calibration": summary,
    }))
}
