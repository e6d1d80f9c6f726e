//! `osd`: workload generation, warmup, online serving, offline distillation
//! and report emission. Errors are printed as a single line
//! `error: <kind>: <message>`; configuration and usage errors exit with 2,
//! runtime failures with 1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use osd_core::config::{DraftTopology, Overrides, RunConfig};
use osd_core::distill::{offline_distill, OptimizerState};
use osd_core::engine::ServeLog;
use osd_core::model::{load_checkpoint, ConditionalModel, save_checkpoint, Checkpoint, NeuralDraftModel};
use osd_core::report::{
    check_writable, emit_reports, read_serve_log, summarize, token_stats, write_json, write_reference_table_csv,
    write_serve_log, write_speedup_surface_csv, write_token_improvement_csv, write_token_stats_csv, ReportOptions,
};
use osd_core::workload::write_trace;
use osd_core::{experiment, Error};

#[derive(Parser)]
#[command(name = "osd", version, about = "Online speculative decoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured request trace (trace.jsonl).
    GenWorkload(Common),
    /// Pre-train drafts on warmup prompts (draft-<i>.ckpt).
    Warmup(Common),
    /// Serve a trace with online updates and write reports.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Trace file to serve instead of the configured workload.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Draft checkpoint to start from, once per draft in route order.
        #[arg(long)]
        draft: Vec<PathBuf>,
    },
    /// Distill one draft offline and compare token statistics before/after.
    OfflineDistill(Common),
    /// Write speedup surfaces and the reference-table reproduction.
    Analyze(Common),
    /// Token precision/recall from a serve log.
    TokenStats {
        #[command(flatten)]
        common: Common,
        /// Serve log to analyze.
        #[arg(long)]
        log: PathBuf,
        /// Earlier serve log for a before/after comparison.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Requests between draft updates [default: 8].
    #[arg(long)]
    update_interval: Option<usize>,
    /// Distillation measure: kl, rkl or jsd.
    #[arg(long)]
    measure: Option<String>,
    /// Rollout policy: teacher, student or mix.
    #[arg(long)]
    policy: Option<String>,
    /// Proposed tokens per step [default: 5].
    #[arg(long)]
    k: Option<usize>,
    /// Draft context window in tokens [default: 8].
    #[arg(long)]
    window: Option<usize>,
}

/// Failure classes with their exit codes.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: config: {}", one_line(&m));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: runtime: {}", one_line(&m));
            ExitCode::from(1)
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        out_dir: common.out.clone(),
        update_interval: common.update_interval,
        measure: common.measure.clone(),
        policy: common.policy.clone(),
        k: common.k,
        window: common.window,
    })?;
    Ok(cfg)
}

/// Checks the output directory and records the resolved configuration.
fn prepare(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let out = cfg.out_dir.clone();
    check_writable(&out)?;
    let text = cfg.to_toml()?;
    let path = out.join("resolved_config.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

fn seeds(cfg: &RunConfig) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::from([("run".to_string(), cfg.seed)]);
    for c in &cfg.clusters {
        m.insert(format!("cluster:{}", c.id), c.seed);
    }
    m
}

fn save_drafts(out: &Path, cfg: &RunConfig, drafts: &[NeuralDraftModel], step: u64) -> Result<(), Failure> {
    for (i, d) in drafts.iter().enumerate() {
        let ckpt = Checkpoint::Neural { model: d.clone(), seed: cfg.seed, creation_step: step };
        save_checkpoint(&ckpt, out.join(format!("draft-{i}.ckpt")))?;
    }
    Ok(())
}

fn write_losses(path: &Path, losses: &[Vec<f64>]) -> Result<(), Failure> {
    let mut text = String::from("# osd-training-losses v1\ndraft,step,loss\n");
    for (d, l) in losses.iter().enumerate() {
        for (s, v) in l.iter().enumerate() {
            text.push_str(&format!("{d},{s},{v:.9}\n"));
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenWorkload(common) => {
            let cfg = resolve(&common)?;
            let out = prepare(&cfg)?;
            write_trace(out.join("trace.jsonl"), &experiment::trace(&cfg)?)?;
        }
        Command::Warmup(common) => {
            let cfg = resolve(&common)?;
            let out = prepare(&cfg)?;
            let target = experiment::target(&cfg)?;
            let mut drafts = experiment::init_drafts(&cfg)?;
            let losses = experiment::warmup_drafts(&cfg, &target, &mut drafts)?;
            save_drafts(&out, &cfg, &drafts, 0)?;
            write_losses(&out.join("warmup_losses.csv"), &losses)?;
        }
        Command::Serve { common, trace, draft } => {
            let mut cfg = resolve(&common)?;
            if let Some(t) = trace {
                cfg.workload.trace_path = Some(t);
            }
            let out = prepare(&cfg)?;
            let target = experiment::target(&cfg)?;
            let mut drafts = experiment::init_drafts(&cfg)?;
            if draft.is_empty() {
                experiment::warmup_drafts(&cfg, &target, &mut drafts)?;
            } else {
                if draft.len() != drafts.len() {
                    return Err(Failure::Config(format!("expected {} --draft checkpoints, got {}", drafts.len(), draft.len())));
                }
                for (slot, path) in drafts.iter_mut().zip(&draft) {
                    *slot = load_checkpoint(path)?.into_neural(target.vocab())?;
                }
            }
            let trace = experiment::trace(&cfg)?;
            let (log, finals) = experiment::serve(&cfg, &target, drafts, trace)?;
            let opts = ReportOptions {
                windows: (cfg.engine.windows[0], cfg.engine.windows[1]),
                k: cfg.speculation.k,
                config_digest: cfg.digest()?,
                seeds: seeds(&cfg),
            };
            emit_reports(&out, &log, &opts)?;
            save_drafts(&out, &cfg, &finals, log.requests.len() as u64)?;
        }
        Command::OfflineDistill(common) => {
            let cfg = resolve(&common)?;
            let out = prepare(&cfg)?;
            let target = experiment::target(&cfg)?;
            // One draft for every cluster, never updated while evaluating.
            let mut shared = cfg.clone();
            shared.engine.drafts = DraftTopology::Shared;
            shared.engine.update_interval = usize::MAX;
            let before = experiment::init_drafts(&shared)?.remove(0);
            let mut after = before.clone();
            let distill = cfg.distill_config()?;
            let prompts = experiment::offline_prompts(&shared)?;
            let mut state = OptimizerState::new(distill.optimizer);
            let trace = offline_distill(&mut after, &target, &prompts, &distill, &mut state, &mut experiment::offline_rng(&cfg))?;
            write_losses(&out.join("training_losses.csv"), &[trace.batch_losses])?;
            save_drafts(&out, &cfg, std::slice::from_ref(&after), state.steps())?;

            let eval = experiment::trace(&shared)?;
            let (log_before, _) = experiment::serve(&shared, &target, vec![before], eval.clone())?;
            let (log_after, _) = experiment::serve(&shared, &target, vec![after], eval)?;
            write_serve_log(&out.join("serve_log_before.jsonl"), &log_before)?;
            write_serve_log(&out.join("serve_log_after.jsonl"), &log_after)?;
            let (sb, sa) = (token_stats(&log_before), token_stats(&log_after));
            write_token_stats_csv(&out.join("token_stats_before.csv"), &sb)?;
            write_token_stats_csv(&out.join("token_stats_after.csv"), &sa)?;
            write_token_improvement_csv(&out.join("token_improvement.csv"), &sb, &sa, cfg.report.top_n)?;
            let digest = cfg.digest()?;
            let summary = BTreeMap::from([
                ("before", summarize(&log_before, &digest, seeds(&cfg))),
                ("after", summarize(&log_after, &digest, seeds(&cfg))),
            ]);
            write_json(&out.join("summary.json"), &summary)?;
        }
        Command::Analyze(common) => {
            let cfg = resolve(&common)?;
            let out = prepare(&cfg)?;
            write_reference_table_csv(&out.join("reference_table.csv"), cfg.speculation.k)?;
            let alphas: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
            let ks: Vec<usize> = (1..=10).collect();
            write_speedup_surface_csv(&out.join("speedup_surface.csv"), &alphas, &[0.0, 0.05, 0.1, 0.2, 0.5], &ks)?;
        }
        Command::TokenStats { common, log, baseline } => {
            let cfg = resolve(&common)?;
            let out = prepare(&cfg)?;
            let after = token_stats(&read_serve_log(&log)?);
            write_token_stats_csv(&out.join("token_stats.csv"), &after)?;
            if let Some(b) = baseline {
                let before: ServeLog = read_serve_log(&b)?;
                write_token_improvement_csv(&out.join("token_improvement.csv"), &token_stats(&before), &after, cfg.report.top_n)?;
            }
        }
    }
    Ok(())
}
