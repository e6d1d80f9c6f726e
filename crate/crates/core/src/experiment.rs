//! Assembles targets, traces and drafts from a [`RunConfig`]. Each
//! consumer of randomness draws from its own stream of the run seed.

use crate::config::{DraftTopology, LoadConfig, RunConfig, WorkloadKind};
use crate::engine::{warmup, ClusterRouter, OnlineEngine, ServeLog};
use crate::error::Result;
use crate::model::{GrammarOracle, NeuralDraftModel, Sequence};
use crate::rng::SeededRng;
use crate::workload::{
    apply_square_wave_load, build_grammar, build_target, gen_cluster_trace, gen_mix_trace, gen_prompts,
    gen_shift_trace, read_trace, ShiftSchedule, TraceRecord,
};

const TRACE_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const WARMUP_STREAM: u64 = 3;
const OFFLINE_STREAM: u64 = 4;

pub fn target(cfg: &RunConfig) -> Result<GrammarOracle> {
    build_target(&cfg.grammar_specs())
}

/// The configured trace: read from `workload.trace_path` when set,
/// generated otherwise.
pub fn trace(cfg: &RunConfig) -> Result<Vec<TraceRecord>> {
    if let Some(path) = &cfg.workload.trace_path {
        return read_trace(path);
    }
    let w = &cfg.workload;
    let specs = cfg.grammar_specs();
    let lens = (w.prompt_len[0], w.prompt_len[1]);
    let mut rng = SeededRng::with_stream(cfg.seed, TRACE_STREAM);
    let mut records = match w.kind {
        WorkloadKind::Stationary => gen_cluster_trace(&specs, w.requests, lens, &mut rng)?,
        WorkloadKind::Shift => {
            let schedule = ShiftSchedule { blocks: specs.iter().map(|s| (s.clone(), w.requests)).collect() };
            gen_shift_trace(&schedule, lens, &mut rng)?
        }
        WorkloadKind::Mix => gen_mix_trace(&specs[0], &specs[1], w.requests, w.phase_split, lens, &mut rng)?,
    };
    match w.load {
        LoadConfig::Constant { value } => records.iter_mut().for_each(|r| r.load = value),
        LoadConfig::Square { period, high, low } => apply_square_wave_load(&mut records, period, high, low),
    }
    Ok(records)
}

/// Freshly initialized drafts, one per route.
pub fn init_drafts(cfg: &RunConfig) -> Result<Vec<NeuralDraftModel>> {
    let vocab = cfg.grammar_specs()[0].vocab()?;
    let count = match cfg.engine.drafts {
        DraftTopology::Shared => 1,
        DraftTopology::PerCluster => cfg.clusters.len(),
    };
    let m = cfg.model;
    (0..count)
        .map(|i| {
            let mut rng = SeededRng::with_stream(cfg.seed, INIT_STREAM + 16 * i as u64);
            NeuralDraftModel::init(vocab, m.window, m.embed_dim, m.hidden_dim, m.output_scale, &mut rng)
        })
        .collect()
}

pub fn router(cfg: &RunConfig) -> ClusterRouter {
    match cfg.engine.drafts {
        DraftTopology::Shared => ClusterRouter::single(),
        DraftTopology::PerCluster => cfg
            .clusters
            .iter()
            .enumerate()
            .fold(ClusterRouter::default(), |r, (i, c)| r.with_route(c.id.clone(), i)),
    }
}

/// `count` prompts from each cluster feeding draft `draft`.
pub fn prompts_for(cfg: &RunConfig, draft: usize, count: usize, stream: u64) -> Result<Vec<Sequence>> {
    let specs = cfg.grammar_specs();
    let lens = (cfg.workload.prompt_len[0], cfg.workload.prompt_len[1]);
    let mut rng = SeededRng::with_stream(cfg.seed, stream + 16 * draft as u64);
    let mut out = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        if cfg.engine.drafts == DraftTopology::PerCluster && i != draft {
            continue;
        }
        out.extend(gen_prompts(&build_grammar(spec)?, count, lens, &mut rng)?);
    }
    Ok(out)
}

/// Runs warmup distillation on every draft; returns per-draft batch losses.
pub fn warmup_drafts(cfg: &RunConfig, target: &GrammarOracle, drafts: &mut [NeuralDraftModel]) -> Result<Vec<Vec<f64>>> {
    let distill = cfg.distill_config()?;
    let n = cfg.engine.warmup_prompts;
    drafts
        .iter_mut()
        .enumerate()
        .map(|(i, d)| {
            if n == 0 {
                return Ok(Vec::new());
            }
            let prompts = prompts_for(cfg, i, n, WARMUP_STREAM)?;
            let mut rng = SeededRng::with_stream(cfg.seed, WARMUP_STREAM + 16 * i as u64 + 1);
            Ok(warmup(d, target, &prompts, &distill, &mut rng)?.batch_losses)
        })
        .collect()
}

/// Prompts for offline distillation, separate from warmup and trace prompts.
pub fn offline_prompts(cfg: &RunConfig) -> Result<Vec<Sequence>> {
    prompts_for(cfg, 0, cfg.workload.requests, OFFLINE_STREAM)
}

pub fn offline_rng(cfg: &RunConfig) -> SeededRng {
    SeededRng::with_stream(cfg.seed, OFFLINE_STREAM + 1)
}

/// Serves `trace` with the given drafts; returns the log and final drafts.
pub fn serve(
    cfg: &RunConfig,
    target: &GrammarOracle,
    drafts: Vec<NeuralDraftModel>,
    trace: Vec<TraceRecord>,
) -> Result<(ServeLog, Vec<NeuralDraftModel>)> {
    let n = drafts.len();
    let mut engine = OnlineEngine::new(drafts, router(cfg), cfg.engine_config()?)?;
    let log = engine.serve_stream(target, trace)?;
    Ok((log, (0..n).map(|i| engine.draft(i)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig::from_toml(
            "vocab_size = 8\n[model]\nwindow = 2\nembed_dim = 3\nhidden_dim = 4\n[speculation]\nmax_total_len = 24\n\
             [workload]\nrequests = 12\n[[clusters]]\nid = \"a\"\nsupport_len = 4\n\
             [[clusters]]\nid = \"b\"\nsupport_start = 4\nsupport_len = 4\n[engine]\ndrafts = \"per_cluster\"\nwarmup_prompts = 2",
        )
        .unwrap()
    }

    #[test]
    fn assembled_run_is_deterministic() {
        let cfg = small();
        let run = || {
            let t = target(&cfg).unwrap();
            let mut drafts = init_drafts(&cfg).unwrap();
            warmup_drafts(&cfg, &t, &mut drafts).unwrap();
            serve(&cfg, &t, drafts, trace(&cfg).unwrap()).unwrap()
        };
        let (a, da) = run();
        let (b, db) = run();
        assert_eq!(a, b);
        assert_eq!(da, db);
        assert_eq!(a.requests.len(), 12);
        assert!(a.requests.iter().all(|r| r.error.is_none()));
        assert!(a.requests.iter().all(|r| r.draft == Some(if r.cluster_id == "a" { 0 } else { 1 })));
    }

    #[test]
    fn per_cluster_warmup_uses_own_prompts() {
        let cfg = small();
        let p = prompts_for(&cfg, 1, 3, 9).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|s| s.tokens()[1..].iter().all(|t| (4..8).contains(&t.0))));
    }
}
