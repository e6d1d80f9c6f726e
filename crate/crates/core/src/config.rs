//! Experiment configuration read from TOML. Every section and field is
//! optional; unknown keys are rejected.
//!
//! ```toml
//! seed = 1
//! out_dir = "osd-out"
//! vocab_size = 64
//! order = 1
//!
//! [[clusters]]
//! id = "a"
//! seed = 11
//! concentration = 0.1
//! eos_rate = 0.02
//! support_start = 0
//! support_len = 16
//!
//! [model]
//! window = 8
//! embed_dim = 32
//! hidden_dim = 64
//!
//! [speculation]
//! k = 5
//! max_total_len = 128
//!
//! [distill]
//! measure = "kl"        # kl | rkl | jsd
//! policy = "teacher"    # teacher | student | mix
//!
//! [engine]
//! update_interval = 8
//! drafts = "shared"     # shared | per_cluster
//!
//! [workload]
//! kind = "stationary"   # stationary | shift | mix
//! requests = 200
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{DistanceMeasure, DistillConfig, OptimizerConfig, OptimizerKind, SamplingPolicy};
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::specdecode::SpeculationConfig;
use crate::workload::GrammarSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Ordinary tokens shared by every cluster.
    pub vocab_size: u32,
    /// Grammar order shared by every cluster.
    pub order: usize,
    pub clusters: Vec<ClusterConfig>,
    pub model: ModelConfig,
    pub speculation: SpeculationSection,
    pub distill: DistillSection,
    pub engine: EngineSection,
    pub workload: WorkloadSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("osd-out"),
            vocab_size: 64,
            order: 1,
            clusters: vec![ClusterConfig::default()],
            model: ModelConfig::default(),
            speculation: SpeculationSection::default(),
            distill: DistillSection::default(),
            engine: EngineSection::default(),
            workload: WorkloadSection::default(),
            report: ReportSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub id: String,
    pub seed: u64,
    pub concentration: f64,
    pub eos_rate: f64,
    pub support_start: u32,
    /// 0 means every token from `support_start` on.
    pub support_len: u32,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { id: "default".into(), seed: 11, concentration: 0.1, eos_rate: 0.02, support_start: 0, support_len: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Scale of the initial output weights.
    pub output_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { window: 8, embed_dim: 32, hidden_dim: 64, output_scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeculationSection {
    pub k: usize,
    pub max_total_len: usize,
    pub serve_tau: f64,
}

impl Default for SpeculationSection {
    fn default() -> Self {
        let d = SpeculationConfig::default();
        Self { k: d.k, max_total_len: d.max_total_len, serve_tau: d.serve_tau }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub measure: String,
    /// JSD mixing weight.
    pub beta: f64,
    pub tau: f64,
    pub policy: String,
    /// Teacher share for the `mix` policy.
    pub mix_beta: f64,
    pub rollout_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        let o = OptimizerConfig::default();
        Self {
            measure: "kl".into(),
            beta: 0.5,
            tau: d.tau,
            policy: "teacher".into(),
            mix_beta: 0.5,
            rollout_len: d.rollout_len,
            batch_size: d.batch_size,
            epochs: d.epochs,
            optimizer: o.kind,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftTopology {
    /// One draft serves every cluster.
    Shared,
    /// One draft per cluster, routed by cluster id.
    PerCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub update_interval: usize,
    pub update_epochs: usize,
    pub spare_capacity_threshold: f64,
    pub skip_full_accept_records: bool,
    /// Warmup prompts drawn from each cluster before serving.
    pub warmup_prompts: usize,
    pub drafts: DraftTopology,
    /// Rolling-α windows reported side by side.
    pub windows: [usize; 2],
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            update_interval: 8,
            update_epochs: 1,
            spare_capacity_threshold: 1.0,
            skip_full_accept_records: false,
            warmup_prompts: 0,
            drafts: DraftTopology::Shared,
            windows: [50, 100],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    /// Round-robin over the clusters; `requests` in total.
    Stationary,
    /// Clusters in order as blocks of `requests` each.
    Shift,
    /// First two clusters shuffled together, `requests` each, with update
    /// masks switching sources at `phase_split`.
    Mix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LoadConfig {
    Constant { value: f64 },
    Square { period: usize, high: f64, low: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub kind: WorkloadKind,
    pub requests: usize,
    pub prompt_len: [usize; 2],
    pub phase_split: f64,
    pub load: LoadConfig,
    /// Read requests from this file instead of generating them.
    pub trace_path: Option<PathBuf>,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            kind: WorkloadKind::Stationary,
            requests: 200,
            prompt_len: [1, 4],
            phase_split: 0.5,
            load: LoadConfig::Constant { value: 0.0 },
            trace_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Tokens in the frequency ranking of the improvement table.
    pub top_n: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { top_n: 10 }
    }
}

/// Command-line overrides applied on top of a file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub update_interval: Option<usize>,
    pub measure: Option<String>,
    pub policy: Option<String>,
    pub k: Option<usize>,
    pub window: Option<usize>,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out_dir {
            self.out_dir = p.clone();
        }
        if let Some(i) = o.update_interval {
            self.engine.update_interval = i;
        }
        if let Some(m) = &o.measure {
            self.distill.measure = m.clone();
        }
        if let Some(p) = &o.policy {
            self.distill.policy = p.clone();
        }
        if let Some(k) = o.k {
            self.speculation.k = k;
        }
        if let Some(w) = o.window {
            self.model.window = w;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if self.clusters.is_empty() {
            return Err(config_err("at least one cluster is required"));
        }
        let mut ids: Vec<&str> = self.clusters.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_err("cluster ids must be unique"));
        }
        for spec in self.grammar_specs() {
            spec.validate().map_err(|e| config_err(format!("cluster {:?}: {e}", spec.cluster_id)))?;
        }
        if self.model.window == 0 || self.model.embed_dim == 0 || self.model.hidden_dim == 0 {
            return Err(config_err("model dimensions must be at least 1"));
        }
        if !(self.model.output_scale > 0.0 && self.model.output_scale.is_finite()) {
            return Err(config_err("model.output_scale must be positive"));
        }
        self.engine_config().and_then(|e| e.validate()).map_err(wrap)?;
        let d = self.distill_config().map_err(wrap)?;
        if d.epochs == 0 || d.batch_size == 0 || d.rollout_len == 0 {
            return Err(config_err("distill epochs, batch_size and rollout_len must be at least 1"));
        }
        if self.engine.windows.contains(&0) {
            return Err(config_err("engine.windows must be at least 1"));
        }
        let w = &self.workload;
        if w.requests == 0 {
            return Err(config_err("workload.requests must be at least 1"));
        }
        if w.prompt_len[0] > w.prompt_len[1] {
            return Err(config_err("workload.prompt_len must be [min, max]"));
        }
        if w.prompt_len[1] + 1 >= self.speculation.max_total_len {
            return Err(config_err("workload.prompt_len leaves no room under speculation.max_total_len"));
        }
        if !(0.0..=1.0).contains(&w.phase_split) {
            return Err(config_err("workload.phase_split must lie in [0, 1]"));
        }
        if w.kind == WorkloadKind::Mix && self.clusters.len() < 2 {
            return Err(config_err("a mix workload needs two clusters"));
        }
        match w.load {
            LoadConfig::Constant { value } if !(0.0..=1.0).contains(&value) => {
                Err(config_err("workload.load.value must lie in [0, 1]"))
            }
            LoadConfig::Square { period, high, low }
                if period == 0 || !(0.0..=1.0).contains(&high) || !(0.0..=1.0).contains(&low) =>
            {
                Err(config_err("square load needs period ≥ 1 and levels in [0, 1]"))
            }
            _ => Ok(()),
        }?;
        if self.report.top_n == 0 {
            return Err(config_err("report.top_n must be at least 1"));
        }
        Ok(())
    }

    pub fn grammar_specs(&self) -> Vec<GrammarSpec> {
        self.clusters
            .iter()
            .map(|c| GrammarSpec {
                cluster_id: c.id.clone(),
                seed: c.seed,
                vocab_size: self.vocab_size,
                order: self.order,
                concentration: c.concentration,
                eos_rate: c.eos_rate,
                support_start: c.support_start,
                support_len: c.support_len,
            })
            .collect()
    }

    pub fn speculation_config(&self) -> SpeculationConfig {
        let s = self.speculation;
        SpeculationConfig { k: s.k, max_total_len: s.max_total_len, serve_tau: s.serve_tau }
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        let d = &self.distill;
        let cfg = DistillConfig {
            measure: DistanceMeasure::parse(&d.measure, d.beta)?,
            tau: d.tau,
            policy: SamplingPolicy::parse(&d.policy, d.mix_beta)?,
            rollout_len: d.rollout_len,
            batch_size: d.batch_size,
            epochs: d.epochs,
            optimizer: OptimizerConfig { kind: d.optimizer, lr: d.lr, beta1: d.beta1, beta2: d.beta2, eps: d.eps },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn engine_config(&self) -> Result<EngineConfig> {
        let e = &self.engine;
        Ok(EngineConfig {
            update_interval: e.update_interval,
            speculation: self.speculation_config(),
            distill: self.distill_config()?,
            update_epochs: e.update_epochs,
            spare_capacity_threshold: e.spare_capacity_threshold,
            skip_full_accept_records: e.skip_full_accept_records,
            seed: self.seed,
        })
    }

    /// SHA-256 over the canonical TOML form, ignoring `out_dir` so that
    /// identical experiments written to different places share a digest.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let text = c.to_toml()?;
        Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }
}
