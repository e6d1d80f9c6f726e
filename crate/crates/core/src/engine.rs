//! The online serving loop: speculative decoding per request, per-draft
//! replay buffers, distillation every `I` requests when the load gate is
//! open, and atomic parameter swaps between requests.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::distill::{distill_on_examples, offline_distill, DistillConfig, OptimizerState, TrainingExample, TrainingTrace};
use crate::error::{Error, Result};
use crate::model::{ConditionalModel, NeuralDraftModel, Sequence};
use crate::rng::SeededRng;
use crate::specdecode::{run_request, ErrorRecord, SpeculationConfig};
use crate::workload::TraceRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Requests between draft updates (per draft).
    pub update_interval: usize,
    pub speculation: SpeculationConfig,
    /// Measure, temperature and optimizer used by online updates.
    pub distill: DistillConfig,
    /// Optimizer passes over the buffer per update.
    pub update_epochs: usize,
    /// Updates are deferred while load exceeds this fraction.
    pub spare_capacity_threshold: f64,
    /// Drop records of steps that accepted every proposal.
    pub skip_full_accept_records: bool,
    /// Seed of the per-request random streams.
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            update_interval: 8,
            speculation: SpeculationConfig::default(),
            distill: DistillConfig::default(),
            update_epochs: 1,
            spare_capacity_threshold: 1.0,
            skip_full_accept_records: false,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.update_interval == 0 {
            return Err(Error::invalid("update_interval must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.spare_capacity_threshold) {
            return Err(Error::invalid("spare_capacity_threshold must lie in [0, 1]"));
        }
        self.speculation.validate()?;
        self.distill.validate()
    }

    /// A configuration that never updates: static speculative decoding.
    pub fn static_draft(mut self) -> Self {
        self.update_interval = usize::MAX;
        self
    }
}

/// Pre-trains the draft on warmup prompts; an empty set leaves it untouched.
pub fn warmup<T: ConditionalModel + ?Sized>(
    draft: &mut NeuralDraftModel,
    target: &T,
    prompts: &[Sequence],
    cfg: &DistillConfig,
    rng: &mut SeededRng,
) -> Result<TrainingTrace> {
    let mut state = OptimizerState::new(cfg.optimizer);
    offline_distill(draft, target, prompts, cfg, &mut state, rng)
}

/// `true` when an update may run at this load.
pub fn load_gate(current_load: f64, cfg: &EngineConfig) -> bool {
    current_load <= cfg.spare_capacity_threshold
}

/// Served sequences with the positions the target corrected.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayBuffer {
    entries: Vec<(Sequence, Vec<ErrorRecord>)>,
}

impl ReplayBuffer {
    pub fn push(&mut self, sequence: Sequence, records: Vec<ErrorRecord>) {
        self.entries.push((sequence, records));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record_count(&self) -> usize {
        self.entries.iter().map(|(_, r)| r.len()).sum()
    }

    /// One training example per stored record.
    pub fn examples(&self, skip_full_accept: bool) -> Result<Vec<TrainingExample>> {
        let mut out = Vec::with_capacity(self.record_count());
        for (seq, records) in &self.entries {
            for r in records {
                if skip_full_accept && r.accepted_all {
                    continue;
                }
                out.push(TrainingExample::new(seq.clone(), r.error_index - 1, r.target_dist.clone())?);
            }
        }
        Ok(out)
    }

    pub fn flush(&mut self) {
        self.entries.clear();
    }
}

/// Holds the live draft parameters. Readers take a frozen snapshot; writers
/// replace the whole parameter set at once.
#[derive(Debug)]
pub struct DraftSlot {
    current: RwLock<Arc<Snapshot>>,
}

/// An immutable parameter set and its digest.
#[derive(Debug)]
pub struct Snapshot {
    pub model: NeuralDraftModel,
    pub digest: String,
}

impl DraftSlot {
    pub fn new(model: NeuralDraftModel) -> Self {
        let digest = model.digest();
        Self { current: RwLock::new(Arc::new(Snapshot { model, digest })) }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.current.read().expect("draft slot lock poisoned"))
    }

    /// Publishes `model`; requests holding an older snapshot keep it.
    pub fn snapshot_and_swap(&self, model: NeuralDraftModel) {
        let digest = model.digest();
        let next = Arc::new(Snapshot { model, digest });
        *self.current.write().expect("draft slot lock poisoned") = next;
    }
}

/// Maps cluster ids to draft indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterRouter {
    routes: BTreeMap<String, usize>,
    default: Option<usize>,
}

impl ClusterRouter {
    /// Every cluster goes to draft 0.
    pub fn single() -> Self {
        Self { routes: BTreeMap::new(), default: Some(0) }
    }

    pub fn with_route(mut self, cluster_id: impl Into<String>, draft: usize) -> Self {
        self.routes.insert(cluster_id.into(), draft);
        self
    }

    pub fn with_default(mut self, draft: Option<usize>) -> Self {
        self.default = draft;
        self
    }

    pub fn route(&self, cluster_id: &str) -> Option<usize> {
        self.routes.get(cluster_id).copied().or(self.default)
    }
}

/// What one draft carries between requests.
#[derive(Debug)]
pub struct DraftState {
    pub slot: DraftSlot,
    pub optimizer: OptimizerState,
    pub buffer: ReplayBuffer,
    /// Requests served by this draft.
    pub served: u64,
}

/// Per-step proposal outcome kept in the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub proposed: Vec<u32>,
    pub accept_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLog {
    /// Position in arrival order.
    pub index: usize,
    pub request_id: u64,
    pub cluster_id: String,
    pub source_tag: String,
    pub draft: Option<usize>,
    pub load: f64,
    pub update_mask: bool,
    pub proposed: usize,
    pub accepted: usize,
    pub prompt_len: usize,
    pub final_tokens: Vec<u32>,
    pub truncated: bool,
    pub steps: Vec<StepSummary>,
    /// Digest of the parameters that served the request.
    pub draft_digest: Option<String>,
    pub error: Option<String>,
}

impl RequestLog {
    pub fn alpha(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    /// Index of the request after which the update was considered.
    pub after_request: usize,
    pub draft: usize,
    pub buffered_requests: usize,
    pub examples: usize,
    pub mean_loss: Option<f64>,
    pub applied: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServeLog {
    pub requests: Vec<RequestLog>,
    pub updates: Vec<UpdateEvent>,
}

impl ServeLog {
    /// Indices of requests after which an update was applied.
    pub fn applied_update_indices(&self) -> Vec<usize> {
        self.updates.iter().filter(|u| u.applied).map(|u| u.after_request).collect()
    }
}

/// Drafts, router and configuration of a serving session.
#[derive(Debug)]
pub struct OnlineEngine {
    pub drafts: Vec<DraftState>,
    pub router: ClusterRouter,
    pub cfg: EngineConfig,
}

impl OnlineEngine {
    pub fn new(drafts: Vec<NeuralDraftModel>, router: ClusterRouter, cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        if drafts.is_empty() {
            return Err(Error::invalid("at least one draft is required"));
        }
        let drafts = drafts
            .into_iter()
            .map(|m| DraftState {
                slot: DraftSlot::new(m),
                optimizer: OptimizerState::new(cfg.distill.optimizer),
                buffer: ReplayBuffer::default(),
                served: 0,
            })
            .collect();
        Ok(Self { drafts, router, cfg })
    }

    pub fn draft(&self, i: usize) -> NeuralDraftModel {
        self.drafts[i].slot.snapshot().model.clone()
    }

    /// Serves every record in order, updating drafts along the way.
    pub fn serve_stream<T, I>(&mut self, target: &T, trace: I) -> Result<ServeLog>
    where
        T: ConditionalModel + ?Sized,
        I: IntoIterator<Item = TraceRecord>,
    {
        let mut log = ServeLog::default();
        for (index, rec) in trace.into_iter().enumerate() {
            let req = self.serve_one(target, index, &rec, &mut log)?;
            log.requests.push(req);
        }
        Ok(log)
    }

    fn serve_one<T: ConditionalModel + ?Sized>(
        &mut self,
        target: &T,
        index: usize,
        rec: &TraceRecord,
        log: &mut ServeLog,
    ) -> Result<RequestLog> {
        let vocab = *target.vocab();
        let mut entry = RequestLog {
            index,
            request_id: rec.request_id,
            cluster_id: rec.cluster_id.clone(),
            source_tag: rec.source_tag.clone(),
            draft: None,
            load: rec.load,
            update_mask: rec.update_mask,
            proposed: 0,
            accepted: 0,
            prompt_len: rec.prompt.len(),
            final_tokens: rec.prompt.clone(),
            truncated: false,
            steps: Vec::new(),
            draft_digest: None,
            error: None,
        };
        let Some(d) = self.router.route(&rec.cluster_id).filter(|&d| d < self.drafts.len()) else {
            entry.error = Some(format!("no draft for cluster {:?}", rec.cluster_id));
            return Ok(entry);
        };
        entry.draft = Some(d);
        let prompt = match rec.validate().and_then(|_| rec.prompt_sequence(&vocab)) {
            Ok(p) => p,
            Err(e) => {
                entry.error = Some(e.to_string());
                return Ok(entry);
            }
        };

        let snap = self.drafts[d].slot.snapshot();
        let mut rng = SeededRng::with_stream(self.cfg.seed, rec.request_id);
        let result = run_request(&snap.model, target, &prompt, &self.cfg.speculation, &mut rng)?;
        entry.draft_digest = Some(snap.digest.clone());
        drop(snap);

        entry.proposed = result.proposed_total;
        entry.accepted = result.accepted_total;
        entry.truncated = result.truncated;
        entry.final_tokens = result.final_sequence.tokens().iter().map(|t| t.0).collect();
        entry.steps = result
            .steps
            .iter()
            .map(|s| StepSummary { proposed: s.proposed.iter().map(|t| t.0).collect(), accept_count: s.accept_count })
            .collect();

        let state = &mut self.drafts[d];
        if rec.update_mask {
            state.buffer.push(result.final_sequence, result.error_records);
        }
        state.served += 1;
        if state.served.is_multiple_of(self.cfg.update_interval as u64) {
            log.updates.push(self.maybe_update(d, index, rec.load)?);
        }
        Ok(entry)
    }

    fn maybe_update(&mut self, d: usize, index: usize, load: f64) -> Result<UpdateEvent> {
        let cfg = &self.cfg;
        let state = &mut self.drafts[d];
        let mut event = UpdateEvent {
            after_request: index,
            draft: d,
            buffered_requests: state.buffer.len(),
            examples: 0,
            mean_loss: None,
            applied: false,
        };
        if !load_gate(load, cfg) {
            return Ok(event);
        }
        let examples = state.buffer.examples(cfg.skip_full_accept_records)?;
        event.examples = examples.len();
        if !examples.is_empty() {
            let mut next = state.slot.snapshot().model.clone();
            let update_cfg = DistillConfig { epochs: cfg.update_epochs, ..cfg.distill.clone() };
            event.mean_loss = distill_on_examples(&mut next, &examples, &update_cfg, &mut state.optimizer)?;
            state.slot.snapshot_and_swap(next);
        }
        state.buffer.flush();
        event.applied = true;
        Ok(event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TokenId, Vocabulary};
    use crate::workload::{apply_square_wave_load, build_target, gen_cluster_trace, GrammarSpec};

    fn setup(n: usize, interval: usize) -> (crate::model::GrammarOracle, Vec<TraceRecord>, EngineConfig, NeuralDraftModel) {
        let spec = GrammarSpec::new("a", 1, 8);
        let target = build_target(std::slice::from_ref(&spec)).unwrap();
        let trace = gen_cluster_trace(&[spec], n, (1, 3), &mut SeededRng::new(2)).unwrap();
        let cfg = EngineConfig {
            update_interval: interval,
            speculation: SpeculationConfig { k: 3, max_total_len: 24, serve_tau: 1.0 },
            ..Default::default()
        };
        let v = Vocabulary::new(8).unwrap();
        let draft = NeuralDraftModel::init(v, 2, 4, 8, 1.0, &mut SeededRng::new(3)).unwrap();
        (target, trace, cfg, draft)
    }

    #[test]
    fn interval_longer_than_trace_is_static() {
        let (target, trace, cfg, draft) = setup(10, 50);
        let mut online = OnlineEngine::new(vec![draft.clone()], ClusterRouter::single(), cfg.clone()).unwrap();
        let a = online.serve_stream(&target, trace.clone()).unwrap();
        let mut fixed = OnlineEngine::new(vec![draft.clone()], ClusterRouter::single(), cfg.static_draft()).unwrap();
        let b = fixed.serve_stream(&target, trace).unwrap();
        assert!(a.updates.is_empty());
        assert_eq!(a.requests, b.requests);
        assert_eq!(online.draft(0), draft);
    }

    #[test]
    fn updates_every_eighth_request() {
        let (target, trace, cfg, draft) = setup(32, 8);
        let mut e = OnlineEngine::new(vec![draft.clone()], ClusterRouter::single(), cfg).unwrap();
        let log = e.serve_stream(&target, trace).unwrap();
        assert_eq!(log.applied_update_indices(), vec![7, 15, 23, 31]);
        assert!(e.drafts[0].buffer.is_empty());
        assert_ne!(e.draft(0), draft);
    }

    #[test]
    fn closed_gate_defers_and_buffer_grows() {
        let (target, mut trace, mut cfg, draft) = setup(24, 4);
        cfg.spare_capacity_threshold = 0.0;
        trace.iter_mut().for_each(|r| r.load = 0.5);
        let mut e = OnlineEngine::new(vec![draft.clone()], ClusterRouter::single(), cfg).unwrap();
        let log = e.serve_stream(&target, trace).unwrap();
        assert!(log.updates.iter().all(|u| !u.applied));
        let sizes: Vec<usize> = log.updates.iter().map(|u| u.buffered_requests).collect();
        assert_eq!(sizes, vec![4, 8, 12, 16, 20, 24]);
        assert_eq!(e.draft(0), draft);
    }

    #[test]
    fn open_gate_always_allows() {
        let cfg = EngineConfig { spare_capacity_threshold: 1.0, ..Default::default() };
        assert!(load_gate(1.0, &cfg));
        assert!(load_gate(0.0, &cfg));
    }

    #[test]
    fn square_wave_updates_only_in_low_load() {
        let (target, mut trace, mut cfg, draft) = setup(64, 4);
        cfg.spare_capacity_threshold = 0.5;
        apply_square_wave_load(&mut trace, 8, 0.9, 0.1);
        let mut e = OnlineEngine::new(vec![draft], ClusterRouter::single(), cfg).unwrap();
        let log = e.serve_stream(&target, trace.clone()).unwrap();
        let applied = log.applied_update_indices();
        assert!(!applied.is_empty());
        for i in &applied {
            assert!(trace[*i].load <= 0.5, "update at high-load request {i}");
        }
        // Deferred buffers are carried into the next open boundary.
        let first = log.updates.iter().find(|u| u.applied).unwrap();
        assert_eq!(first.buffered_requests, 12);
    }

    #[test]
    fn masked_requests_do_not_enter_buffer() {
        let (target, mut trace, cfg, draft) = setup(8, 100);
        for r in trace.iter_mut().step_by(2) {
            r.update_mask = false;
        }
        let mut e = OnlineEngine::new(vec![draft], ClusterRouter::single(), cfg).unwrap();
        e.serve_stream(&target, trace).unwrap();
        assert_eq!(e.drafts[0].buffer.len(), 4);
    }

    #[test]
    fn unroutable_requests_are_logged_and_skipped() {
        let (target, trace, cfg, draft) = setup(4, 8);
        let router = ClusterRouter::default().with_route("other", 0);
        let mut e = OnlineEngine::new(vec![draft], router, cfg).unwrap();
        let log = e.serve_stream(&target, trace).unwrap();
        assert_eq!(log.requests.len(), 4);
        assert!(log.requests.iter().all(|r| r.error.is_some() && r.proposed == 0));
    }

    #[test]
    fn serving_is_deterministic() {
        let (target, trace, cfg, draft) = setup(24, 4);
        let run = || {
            let mut e = OnlineEngine::new(vec![draft.clone()], ClusterRouter::single(), cfg.clone()).unwrap();
            e.serve_stream(&target, trace.clone()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn swap_boundary_is_visible_in_digests() {
        let (target, trace, cfg, draft) = setup(16, 8);
        let original = draft.digest();
        let mut e = OnlineEngine::new(vec![draft], ClusterRouter::single(), cfg).unwrap();
        let log = e.serve_stream(&target, trace).unwrap();
        let digests: Vec<&str> = log.requests.iter().map(|r| r.draft_digest.as_deref().unwrap()).collect();
        assert!(digests[..8].iter().all(|d| *d == original));
        assert!(digests[8..].iter().all(|d| *d == digests[8] && *d != original));
    }

    #[test]
    fn noop_swap_changes_nothing() {
        let v = Vocabulary::new(4).unwrap();
        let m = NeuralDraftModel::init(v, 2, 2, 2, 1.0, &mut SeededRng::new(1)).unwrap();
        let slot = DraftSlot::new(m.clone());
        let before = slot.snapshot().digest.clone();
        slot.snapshot_and_swap(m.clone());
        assert_eq!(slot.snapshot().digest, before);
        assert_eq!(slot.snapshot().model, m);
    }

    #[test]
    fn concurrent_readers_never_see_mixed_parameters() {
        let v = Vocabulary::new(4).unwrap();
        let models: Vec<_> =
            (0..4).map(|s| NeuralDraftModel::init(v, 2, 3, 4, 1.0, &mut SeededRng::new(s)).unwrap()).collect();
        let slot = Arc::new(DraftSlot::new(models[0].clone()));
        let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let readers: Vec<_> = (0..4)
            .map(|_| {
                let (slot, stop) = (Arc::clone(&slot), Arc::clone(&stop));
                std::thread::spawn(move || {
                    let mut checked = 0;
                    while !stop.load(std::sync::atomic::Ordering::Relaxed) || checked == 0 {
                        let s = slot.snapshot();
                        assert_eq!(s.model.digest(), s.digest);
                        let _ = s.model.forward(&[TokenId(0)]).unwrap();
                        checked += 1;
                    }
                    checked
                })
            })
            .collect();
        for i in 0..200 {
            slot.snapshot_and_swap(models[i % models.len()].clone());
        }
        stop.store(true, std::sync::atomic::Ordering::Relaxed);
        for r in readers {
            assert!(r.join().unwrap() > 0);
        }
    }

    #[test]
    fn empty_warmup_is_noop() {
        let (target, _, cfg, draft) = setup(1, 8);
        let mut d = draft.clone();
        warmup(&mut d, &target, &[], &cfg.distill, &mut SeededRng::new(1)).unwrap();
        assert_eq!(d, draft);
    }
}
