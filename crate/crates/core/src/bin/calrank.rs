use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use calrank::checkpoint;
use calrank::experiment::{self, CommandReport, ExperimentSpec};
use calrank::pipeline::{self, evaluate, EvalCalibration, RunOptions};
use calrank::rng;
use calrank::world::{QueryStream, SyntheticWorld};
use calrank::Result;

#[derive(Parser)]
#[command(name = "calrank", version, about = "Calibrated ranking experiments on a synthetic click world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SpecArgs {
    /// Experiment spec JSON; omitted fields take defaults.
    #[arg(long, visible_alias = "config")]
    spec: Option<PathBuf>,
    /// Override a spec field, e.g. `--set pipeline.batch_size=256`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl SpecArgs {
    fn load(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.spec {
            Some(p) => ExperimentSpec::from_json(&std::fs::read_to_string(p)?)?,
            None => ExperimentSpec::default(),
        };
        for o in &self.overrides {
            spec.set(o)?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Output directory for report.csv, summary.json and timeseries.csv.
    #[arg(long, default_value = "reports")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write it to a directory.
    Generate {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        out: PathBuf,
        /// World seed (defaults to the first replication seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one live or replayed training run.
    Train {
        #[command(flatten)]
        report: ReportArgs,
        /// Load the world from a directory instead of generating it.
        #[arg(long)]
        world: Option<PathBuf>,
        /// Persist every served record as NDJSON.
        #[arg(long, conflicts_with = "replay")]
        log: Option<PathBuf>,
        /// Train from a persisted record log instead of live serving.
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Write a scorer checkpoint at every sync.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate checkpoints on the held-out query stream.
    Evaluate {
        #[command(flatten)]
        report: ReportArgs,
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        scorer: PathBuf,
        /// Calibration-net checkpoint applied to the scorer outputs.
        #[arg(long)]
        cali: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare the six training methods.
    Compare(ReportArgs),
    /// Item-level versus query-level shuffling for point and point+pair losses.
    ShuffleAblation(ReportArgs),
    /// Sweep the relative ranking weight with and without the calibrator.
    AlphaSweep {
        #[command(flatten)]
        report: ReportArgs,
        /// Comma-separated weights; defaults to the experiment file's list.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
    /// No calibration, Platt scaling and the calibration module on ListNet and SBR.
    CalibrationAblation(ReportArgs),
    /// Optimal pairwise score gap for two Bernoulli items.
    Theorem1 {
        #[arg(long)]
        p1: f64,
        #[arg(long)]
        p2: f64,
        /// Count tied label outcomes as pairs with target 0.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        include_ties: bool,
    },
}

fn load_world(spec: &ExperimentSpec, dir: Option<&Path>, seed: u64) -> Result<SyntheticWorld> {
    match dir {
        Some(d) => SyntheticWorld::read_from_dir(d),
        None => spec.world_for_seed(seed),
    }
}

fn finish(report: &CommandReport, out: &Path) -> Result<()> {
    report.write(out)?;
    println!("{}", serde_json::to_string_pretty(&report.summary_json())?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out, seed } => {
            let spec = spec.load()?;
            let seed = seed.unwrap_or(spec.seeds[0]);
            let world = spec.world_for_seed(seed)?;
            world.write_to_dir(&out)?;
            println!("{}", json!({ "world": out, "seed": seed, "sha256": world.content_hash() }));
        }
        Command::Train { report, world, log, replay, checkpoints, seed } => {
            let spec = report.spec.load()?;
            let seed = seed.unwrap_or(spec.seeds[0]);
            let world = load_world(&spec, world.as_deref(), seed)?;
            let cfg = pipeline::PipelineConfig { seed, ..spec.pipeline.clone() };
            let options = RunOptions {
                num_queries: spec.num_queries,
                eval_every: spec.eval_every,
                eval_queries: spec.eval_queries,
                retain_snapshots: false,
                checkpoint_dir: checkpoints,
            };
            let out = match replay {
                Some(path) => {
                    let reader = BufReader::new(File::open(path)?);
                    pipeline::replay_experiment(&world, &cfg, &options, pipeline::read_log(reader))?
                }
                None => match log {
                    Some(path) => {
                        let mut w = BufWriter::new(File::create(path)?);
                        let out = pipeline::run_experiment(&world, &cfg, &options, Some(&mut w))?;
                        w.flush()?;
                        out
                    }
                    None => pipeline::run_experiment(&world, &cfg, &options, None)?,
                },
            };
            std::fs::create_dir_all(&report.out)?;
            checkpoint::write_scorer(&report.out.join("scorer.ckpt"), &out.trainer.scorer, 0, out.steps)?;
            if let Some(net) = out.trainer.cali_net() {
                checkpoint::write_cali(&report.out.join("cali.ckpt"), net, 0, out.steps)?;
            }
            let mut r = CommandReport {
                command: "train".into(),
                config_hash: spec.config_hash(),
                seeds: vec![seed],
                rows: Vec::new(),
                timeseries: Vec::new(),
                comparisons: Vec::new(),
                extra: json!({
                    "steps": out.steps,
                    "records_served": out.records_served,
                    "records_trained": out.records_trained,
                    "max_dump_age": out.max_dump_age,
                    "missing_context": out.trainer.missing_context(),
                }),
            };
            let cell = cfg.loss_mode.name();
            r.rows.push(experiment::ReportRow { cell: cell.into(), seed, report: out.final_report });
            r.timeseries.extend(
                out.timeseries.iter().map(|p| experiment::TimeseriesRow { cell: cell.into(), seed, point: p.clone() }),
            );
            finish(&r, &report.out)?;
        }
        Command::Evaluate { report, world, scorer, cali, seed } => {
            let spec = report.spec.load()?;
            let seed = seed.unwrap_or(spec.seeds[0]);
            let world = load_world(&spec, world.as_deref(), seed)?;
            let (_, scorer) = checkpoint::read_scorer(&scorer)?;
            let cali = cali.map(|p| checkpoint::read_cali(&p)).transpose()?;
            let groups = QueryStream::new(&world, seed, rng::STREAM_EVAL_QUERIES, pipeline::EVAL_FIRST_ID).take_groups(spec.eval_queries)?;
            let calibration = match &cali {
                Some((_, net)) => EvalCalibration::Net(net),
                None => EvalCalibration::None,
            };
            let metrics = evaluate(&scorer, calibration, &groups)?;
            let mut r = CommandReport {
                command: "evaluate".into(),
                config_hash: spec.config_hash(),
                seeds: vec![seed],
                rows: Vec::new(),
                timeseries: Vec::new(),
                comparisons: Vec::new(),
                extra: json!({ "calibrated": cali.is_some() }),
            };
            r.rows.push(experiment::ReportRow { cell: "checkpoint".into(), seed, report: metrics });
            finish(&r, &report.out)?;
        }
        Command::Compare(a) => finish(&experiment::cmd_compare(&a.spec.load()?)?, &a.out)?,
        Command::ShuffleAblation(a) => finish(&experiment::cmd_shuffle_ablation(&a.spec.load()?)?, &a.out)?,
        Command::AlphaSweep { report, weights } => {
            let spec = report.spec.load()?;
            let weights = weights.unwrap_or_else(|| spec.weights.clone());
            finish(&experiment::cmd_alpha_sweep(&spec, &weights)?, &report.out)?;
        }
        Command::CalibrationAblation(a) => finish(&experiment::cmd_calibration_ablation(&a.spec.load()?)?, &a.out)?,
        Command::Theorem1 { p1, p2, include_ties } => {
            let r = experiment::cmd_theorem1_oracle(p1, p2, include_ties)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let obj = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{obj}");
            if e.kind() == "config" {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
