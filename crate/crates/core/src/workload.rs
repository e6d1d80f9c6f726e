//! Synthetic query distributions and request traces.
//!
//! A [`GrammarSpec`] describes one cluster's order-`m` grammar. Each cluster
//! may be confined to a contiguous token range, and [`build_target`] stitches
//! several clusters into one target oracle whose rows for a cluster's tokens
//! are exactly that cluster's rows.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_token, CategoricalDistribution, ConditionalModel, GrammarOracle, Sequence, TokenId, Vocabulary};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSpec {
    pub cluster_id: String,
    pub seed: u64,
    /// Ordinary token count of the shared vocabulary.
    pub vocab_size: u32,
    #[serde(default = "default_order")]
    pub order: usize,
    /// Dirichlet concentration; smaller values give sharper rows.
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    /// Per-step EOS probability; every row stops with exactly this chance.
    #[serde(default = "default_eos_rate")]
    pub eos_rate: f64,
    /// First ordinary token this cluster emits.
    #[serde(default)]
    pub support_start: u32,
    /// Number of ordinary tokens this cluster emits; 0 means all from `support_start`.
    #[serde(default)]
    pub support_len: u32,
}

fn default_order() -> usize {
    1
}

fn default_concentration() -> f64 {
    0.1
}

fn default_eos_rate() -> f64 {
    0.05
}

impl GrammarSpec {
    pub fn new(cluster_id: impl Into<String>, seed: u64, vocab_size: u32) -> Self {
        Self {
            cluster_id: cluster_id.into(),
            seed,
            vocab_size,
            order: default_order(),
            concentration: default_concentration(),
            eos_rate: default_eos_rate(),
            support_start: 0,
            support_len: 0,
        }
    }

    pub fn with_support(mut self, start: u32, len: u32) -> Self {
        self.support_start = start;
        self.support_len = len;
        self
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.vocab_size)
    }

    /// Ordinary ids this cluster emits.
    pub fn support(&self) -> std::ops::Range<u32> {
        let end = if self.support_len == 0 { self.vocab_size } else { self.support_start + self.support_len };
        self.support_start..end
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab()?;
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::invalid(format!("concentration must be positive, got {}", self.concentration)));
        }
        if !(self.eos_rate > 0.0 && self.eos_rate < 1.0) {
            return Err(Error::invalid(format!("eos_rate must lie in (0, 1), got {}", self.eos_rate)));
        }
        let s = self.support();
        if s.start >= s.end || s.end > self.vocab_size {
            return Err(Error::invalid(format!(
                "support {}..{} does not fit {} tokens",
                s.start, s.end, self.vocab_size
            )));
        }
        Ok(())
    }

    fn owns(&self, t: TokenId) -> bool {
        self.support().contains(&t.0)
    }

    /// Random stream for a context, keyed by its tokens relative to the
    /// support. Specs differing only in `support_start` are therefore
    /// relabeled copies of one grammar.
    fn row_stream(&self, vocab: &Vocabulary, key: &[TokenId]) -> u64 {
        let support = self.support();
        let base = support.len() as u64 + 2;
        key.iter().fold(0u64, |acc, &t| {
            let digit = if support.contains(&t.0) {
                (t.0 - support.start) as u64
            } else if t == vocab.bos() {
                base - 2
            } else {
                base - 1
            };
            acc.wrapping_mul(base).wrapping_add(digit)
        })
    }

    /// Row for context `key`: Gamma weights over the support, normalized to
    /// `1 − eos_rate`, with EOS taking exactly `eos_rate`.
    fn row(&self, vocab: &Vocabulary, key: &[TokenId]) -> Result<CategoricalDistribution> {
        let mut rng = SeededRng::with_stream(self.seed, self.row_stream(vocab, key));
        let gamma = Gamma::new(self.concentration, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
        let support = self.support();
        let mut w = vec![0.0; vocab.total()];
        for t in support.clone() {
            w[t as usize] = gamma.sample(&mut rng);
        }
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            // Every weight underflowed: fall back to a single random token.
            let pick = rng.range_inclusive(0, support.len() - 1);
            w.iter_mut().for_each(|x| *x = 0.0);
            w[support.start as usize + pick] = 1.0;
        }
        let scale = (1.0 - self.eos_rate) / w.iter().sum::<f64>();
        w.iter_mut().for_each(|x| *x *= scale);
        w[vocab.eos().index()] = self.eos_rate;
        CategoricalDistribution::from_weights(w)
    }
}

/// The grammar of a single cluster.
pub fn build_grammar(spec: &GrammarSpec) -> Result<GrammarOracle> {
    build_target(std::slice::from_ref(spec))
}

/// One oracle covering several clusters. A row belongs to the cluster owning
/// the last ordinary token of its context, or to the first cluster when no
/// cluster owns it.
pub fn build_target(specs: &[GrammarSpec]) -> Result<GrammarOracle> {
    let first = specs.first().ok_or_else(|| Error::invalid("at least one grammar spec is required"))?;
    for s in specs {
        s.validate()?;
        if s.vocab_size != first.vocab_size || s.order != first.order {
            return Err(Error::invalid("all clusters must share vocabulary size and order"));
        }
    }
    let vocab = first.vocab()?;
    // Same order as the result, used only to decode row indices into contexts.
    let shell = GrammarOracle::from_fn(vocab, first.order, 0, |_| Ok(CategoricalDistribution::uniform(vocab.total())))?;
    let seed = specs.iter().fold(0u64, |acc, s| acc.rotate_left(13) ^ s.seed);
    GrammarOracle::from_fn(vocab, first.order, seed, |r| {
        let key = shell.row_key(r);
        let owner = key
            .iter()
            .rev()
            .find(|t| vocab.is_ordinary(**t))
            .and_then(|t| specs.iter().find(|s| s.owns(*t)))
            .unwrap_or(first);
        owner.row(&vocab, &key)
    })
}

/// Prompts sampled from `oracle` with EOS suppressed: BOS followed by a
/// length drawn uniformly from `len_range`.
pub fn gen_prompts(
    oracle: &GrammarOracle,
    count: usize,
    len_range: (usize, usize),
    rng: &mut SeededRng,
) -> Result<Vec<Sequence>> {
    if count == 0 {
        return Err(Error::invalid("prompt count must be at least 1"));
    }
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(Error::invalid(format!("prompt length range {lo}..={hi} is invalid")));
    }
    let vocab = *oracle.vocab();
    (0..count)
        .map(|_| {
            let len = rng.range_inclusive(lo, hi);
            let mut tokens = vec![vocab.bos()];
            for _ in 0..len {
                let row = oracle.conditional(&tokens, 1.0)?;
                let mut w: Vec<f64> = row.probs().to_vec();
                for t in [vocab.eos(), vocab.bos(), vocab.pad()] {
                    w[t.index()] = 0.0;
                }
                let t = match CategoricalDistribution::from_weights(w) {
                    Ok(d) => sample_token(&d, rng),
                    Err(_) => TokenId(rng.range_inclusive(0, vocab.size() - 1) as u32),
                };
                tokens.push(t);
            }
            Sequence::prompt(tokens, &vocab)
        })
        .collect()
}

/// One request of an online stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub request_id: u64,
    pub cluster_id: String,
    pub source_tag: String,
    /// Whether this request may feed the replay buffer.
    pub update_mask: bool,
    /// Serving load in `[0, 1]` when the request arrives.
    pub load: f64,
    pub prompt: Vec<u32>,
}

impl TraceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::invalid("prompt must not be empty"));
        }
        if !(0.0..=1.0).contains(&self.load) {
            return Err(Error::invalid(format!("load {} outside [0, 1]", self.load)));
        }
        Ok(())
    }

    pub fn prompt_sequence(&self, vocab: &Vocabulary) -> Result<Sequence> {
        Sequence::prompt(self.prompt.iter().map(|&t| TokenId(t)).collect(), vocab)
    }
}

/// Consecutive blocks, each drawn from one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSchedule {
    pub blocks: Vec<(GrammarSpec, usize)>,
}

fn record(id: usize, spec: &GrammarSpec, tag: String, mask: bool, prompt: &Sequence) -> TraceRecord {
    TraceRecord {
        request_id: id as u64,
        cluster_id: spec.cluster_id.clone(),
        source_tag: tag,
        update_mask: mask,
        load: 0.0,
        prompt: prompt.tokens().iter().map(|t| t.0).collect(),
    }
}

/// Blocks concatenated in order; block `i` is tagged `block-i`.
pub fn gen_shift_trace(schedule: &ShiftSchedule, len_range: (usize, usize), rng: &mut SeededRng) -> Result<Vec<TraceRecord>> {
    if schedule.blocks.is_empty() {
        return Err(Error::invalid("shift schedule has no blocks"));
    }
    let mut out = Vec::new();
    for (i, (spec, count)) in schedule.blocks.iter().enumerate() {
        if *count == 0 {
            return Err(Error::invalid(format!("block {i} has zero records")));
        }
        let grammar = build_grammar(spec)?;
        for p in gen_prompts(&grammar, *count, len_range, rng)? {
            out.push(record(out.len(), spec, format!("block-{i}"), true, &p));
        }
    }
    Ok(out)
}

/// `count_each` prompts per source, shuffled together. Records before
/// `phase_split × total` may update only from source A, the rest only from
/// source B. Sources are tagged `source-a` / `source-b`.
pub fn gen_mix_trace(
    spec_a: &GrammarSpec,
    spec_b: &GrammarSpec,
    count_each: usize,
    phase_split: f64,
    len_range: (usize, usize),
    rng: &mut SeededRng,
) -> Result<Vec<TraceRecord>> {
    if count_each == 0 {
        return Err(Error::invalid("count_each must be at least 1"));
    }
    if !(0.0..=1.0).contains(&phase_split) {
        return Err(Error::invalid("phase_split must lie in [0, 1]"));
    }
    let prompts_a = gen_prompts(&build_grammar(spec_a)?, count_each, len_range, rng)?;
    let prompts_b = gen_prompts(&build_grammar(spec_b)?, count_each, len_range, rng)?;
    let mut order: Vec<bool> = std::iter::repeat_n(true, count_each).chain(std::iter::repeat_n(false, count_each)).collect();
    order.shuffle(rng);
    let boundary = (phase_split * order.len() as f64).round() as usize;
    let (mut ia, mut ib) = (prompts_a.iter(), prompts_b.iter());
    Ok(order
        .iter()
        .enumerate()
        .map(|(i, &is_a)| {
            let phase_one = i < boundary;
            if is_a {
                record(i, spec_a, "source-a".into(), phase_one, ia.next().expect("count_each A prompts"))
            } else {
                record(i, spec_b, "source-b".into(), !phase_one, ib.next().expect("count_each B prompts"))
            }
        })
        .collect())
}

/// A stationary trace: prompts drawn round-robin from the clusters.
pub fn gen_cluster_trace(
    specs: &[GrammarSpec],
    count: usize,
    len_range: (usize, usize),
    rng: &mut SeededRng,
) -> Result<Vec<TraceRecord>> {
    if specs.is_empty() {
        return Err(Error::invalid("at least one cluster is required"));
    }
    let grammars: Vec<_> = specs.iter().map(build_grammar).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let c = i % specs.len();
        let p = gen_prompts(&grammars[c], 1, len_range, rng)?.remove(0);
        out.push(record(i, &specs[c], specs[c].cluster_id.clone(), true, &p));
    }
    Ok(out)
}

/// Overwrites loads with a square wave: `period` requests at `high`, then
/// `period` at `low`, starting high.
pub fn apply_square_wave_load(records: &mut [TraceRecord], period: usize, high: f64, low: f64) {
    let period = period.max(1);
    for (i, r) in records.iter_mut().enumerate() {
        r.load = if (i / period).is_multiple_of(2) { high } else { low };
    }
}

pub fn write_trace(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("trace records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses line-delimited trace records; blank lines are skipped.
pub fn parse_trace(reader: impl BufRead) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Line { line: line_no, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(&line).map_err(|e| Error::Line { line: line_no, msg: e.to_string() })?;
        rec.validate().map_err(|e| Error::Line { line: line_no, msg: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trace(BufReader::new(file))
}
