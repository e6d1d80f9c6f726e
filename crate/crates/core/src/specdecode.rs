//! Exact speculative sampling.
//!
//! The draft proposes `k` tokens; the target evaluates `k+1` conditionals;
//! proposal `i` is kept while `u < p(y_i)/q(y_i)`. The first rejected
//! position is resampled from `norm(max(0, p − q))`, and when every proposal
//! survives a bonus token is drawn from the target. Emitted tokens follow the
//! target distribution exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{context_tail, sample_token, CategoricalDistribution, ConditionalModel, Sequence, TokenId};
use crate::rng::SeededRng;

/// Positive residual mass below which the residual falls back to `p`.
pub const RESIDUAL_MASS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeculationConfig {
    /// Proposals per step.
    pub k: usize,
    /// Hard cap on the sequence length, prompt included.
    pub max_total_len: usize,
    pub serve_tau: f64,
}

impl Default for SpeculationConfig {
    fn default() -> Self {
        Self { k: 5, max_total_len: 128, serve_tau: 1.0 }
    }
}

impl SpeculationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.max_total_len < 2 {
            return Err(Error::invalid("max_total_len must be at least 2"));
        }
        if !(self.serve_tau > 0.0 && self.serve_tau.is_finite()) {
            return Err(Error::invalid("serve_tau must be positive"));
        }
        Ok(())
    }
}

/// One propose/verify round.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeculationStep {
    pub proposed: Vec<TokenId>,
    pub draft_dists: Vec<CategoricalDistribution>,
    /// `k + 1` target conditionals.
    pub target_dists: Vec<CategoricalDistribution>,
    pub accept_count: usize,
    /// Accepted prefix plus one corrected or bonus token.
    pub emitted: Vec<TokenId>,
    pub uniform_draws: Vec<f64>,
}

/// A position where the target supplied the token, with its full conditional.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRecord {
    /// Sequence length right after the step's tokens were appended; the
    /// corrected token sits at `error_index - 1`.
    pub error_index: usize,
    pub target_dist: CategoricalDistribution,
    /// The step accepted every proposal (the token is a bonus sample).
    pub accepted_all: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestResult {
    pub final_sequence: Sequence,
    pub steps: Vec<SpeculationStep>,
    pub error_records: Vec<ErrorRecord>,
    pub proposed_total: usize,
    pub accepted_total: usize,
    /// Generation stopped at `max_total_len` rather than EOS.
    pub truncated: bool,
}

impl RequestResult {
    /// `accepted_total / proposed_total`, absent without proposals.
    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.proposed_total > 0).then(|| self.accepted_total as f64 / self.proposed_total as f64)
    }
}

/// Samples `k` tokens autoregressively from the draft.
pub fn propose<D: ConditionalModel + ?Sized>(
    draft: &D,
    context: &[TokenId],
    k: usize,
    tau: f64,
    rng: &mut SeededRng,
) -> Result<(Vec<TokenId>, Vec<CategoricalDistribution>)> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut ctx = context_tail(context, draft.context_window().map(|w| w + k)).to_vec();
    let mut tokens = Vec::with_capacity(k);
    let mut dists = Vec::with_capacity(k);
    for _ in 0..k {
        let q = draft.conditional(&ctx, tau)?;
        let t = sample_token(&q, rng);
        ctx.push(t);
        tokens.push(t);
        dists.push(q);
    }
    Ok((tokens, dists))
}

/// `norm(max(0, p − q))`, or `p` when the positive mass vanishes.
pub fn residual_distribution(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<CategoricalDistribution> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} ids", p.len(), q.len())));
    }
    let diff: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(p, q)| (p - q).max(0.0)).collect();
    let mass: f64 = diff.iter().sum();
    if mass < RESIDUAL_MASS_FLOOR {
        return Ok(p.clone());
    }
    CategoricalDistribution::from_weights(diff)
}

/// Accept/reject the proposals against the target.
pub fn verify<T: ConditionalModel + ?Sized>(
    target: &T,
    context: &[TokenId],
    proposed: &[TokenId],
    draft_dists: &[CategoricalDistribution],
    tau: f64,
    rng: &mut SeededRng,
) -> Result<SpeculationStep> {
    let k = proposed.len();
    if k == 0 || draft_dists.len() != k {
        return Err(Error::invalid(format!("{} proposals with {} draft distributions", k, draft_dists.len())));
    }
    let mut ctx = context_tail(context, target.context_window().map(|w| w + k)).to_vec();
    let mut target_dists = Vec::with_capacity(k + 1);
    for i in 0..=k {
        target_dists.push(target.conditional(&ctx, tau)?);
        if i < k {
            ctx.push(proposed[i]);
        }
    }

    let mut uniform_draws = Vec::with_capacity(k);
    let mut emitted = Vec::with_capacity(k + 1);
    let mut accept_count = k;
    for i in 0..k {
        let y = proposed[i];
        let q = draft_dists[i].prob(y);
        let ratio = if q > 0.0 { target_dists[i].prob(y) / q } else { 0.0 };
        let u = rng.uniform();
        uniform_draws.push(u);
        if u < ratio {
            emitted.push(y);
        } else {
            accept_count = i;
            break;
        }
    }
    let extra = if accept_count < k {
        residual_distribution(&target_dists[accept_count], &draft_dists[accept_count])?
    } else {
        target_dists[k].clone()
    };
    emitted.push(sample_token(&extra, rng));

    Ok(SpeculationStep {
        proposed: proposed.to_vec(),
        draft_dists: draft_dists.to_vec(),
        target_dists,
        accept_count,
        emitted,
        uniform_draws,
    })
}

/// Largest id count accepted by the enumeration oracles.
pub const ENUMERATION_MAX_IDS: usize = 8;
/// Largest proposal length accepted by the enumeration oracles.
pub const ENUMERATION_MAX_K: usize = 2;

/// Every possible emitted token list of one verify step with its exact
/// probability, enumerating proposals and accept/reject outcomes.
pub fn enumerate_step_outcomes(
    draft_fn: &dyn Fn(&[TokenId]) -> CategoricalDistribution,
    target_fn: &dyn Fn(&[TokenId]) -> CategoricalDistribution,
    context: &[TokenId],
    k: usize,
) -> Result<Vec<(Vec<TokenId>, f64)>> {
    if k == 0 || k > ENUMERATION_MAX_K {
        return Err(Error::EnumerationBound(format!("k = {k}, supported 1..={ENUMERATION_MAX_K}")));
    }
    let n = target_fn(context).len();
    if n > ENUMERATION_MAX_IDS {
        return Err(Error::EnumerationBound(format!("{n} ids, supported ≤ {ENUMERATION_MAX_IDS}")));
    }
    let mut out = Vec::new();
    let mut ctx = context.to_vec();
    enumerate_from(draft_fn, target_fn, &mut ctx, 0, k, 1.0, &mut Vec::new(), &mut out)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn enumerate_from(
    draft_fn: &dyn Fn(&[TokenId]) -> CategoricalDistribution,
    target_fn: &dyn Fn(&[TokenId]) -> CategoricalDistribution,
    ctx: &mut Vec<TokenId>,
    depth: usize,
    k: usize,
    prob: f64,
    emitted: &mut Vec<TokenId>,
    out: &mut Vec<(Vec<TokenId>, f64)>,
) -> Result<()> {
    let p = target_fn(ctx);
    if depth == k {
        for (z, &pz) in p.probs().iter().enumerate() {
            if pz > 0.0 {
                let mut e = emitted.clone();
                e.push(TokenId(z as u32));
                out.push((e, prob * pz));
            }
        }
        return Ok(());
    }
    let q = draft_fn(ctx);
    if q.len() != p.len() {
        return Err(Error::ShapeMismatch("draft and target disagree on id count".into()));
    }
    let residual = residual_distribution(&p, &q)?;
    for (y, &qy) in q.probs().iter().enumerate() {
        if qy <= 0.0 {
            continue;
        }
        let accept = (p.probs()[y] / qy).min(1.0);
        if accept > 0.0 {
            ctx.push(TokenId(y as u32));
            emitted.push(TokenId(y as u32));
            enumerate_from(draft_fn, target_fn, ctx, depth + 1, k, prob * qy * accept, emitted, out)?;
            emitted.pop();
            ctx.pop();
        }
        if accept < 1.0 {
            let reject = prob * qy * (1.0 - accept);
            for (z, &rz) in residual.probs().iter().enumerate() {
                if rz > 0.0 {
                    let mut e = emitted.clone();
                    e.push(TokenId(z as u32));
                    out.push((e, reject * rz));
                }
            }
        }
    }
    Ok(())
}

/// Exact distribution of the first emitted token, by enumeration.
pub fn exact_output_marginal(
    draft_fn: &dyn Fn(&[TokenId]) -> CategoricalDistribution,
    target_fn: &dyn Fn(&[TokenId]) -> CategoricalDistribution,
    context: &[TokenId],
    k: usize,
) -> Result<CategoricalDistribution> {
    let outcomes = enumerate_step_outcomes(draft_fn, target_fn, context, k)?;
    let mut probs = vec![0.0; target_fn(context).len()];
    for (emitted, p) in outcomes {
        probs[emitted[0].index()] += p;
    }
    CategoricalDistribution::new(probs)
}

/// Serves one request: propose/verify until EOS or `max_total_len`,
/// recording one [`ErrorRecord`] per step.
pub fn run_request<D, T>(
    draft: &D,
    target: &T,
    prompt: &Sequence,
    cfg: &SpeculationConfig,
    rng: &mut SeededRng,
) -> Result<RequestResult>
where
    D: ConditionalModel + ?Sized,
    T: ConditionalModel + ?Sized,
{
    cfg.validate()?;
    if prompt.len() >= cfg.max_total_len {
        return Err(Error::invalid(format!(
            "prompt of {} tokens leaves no room under max_total_len {}",
            prompt.len(),
            cfg.max_total_len
        )));
    }
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must contain at least BOS"));
    }
    let vocab = *target.vocab();
    let eos = vocab.eos();
    let mut seq = prompt.clone();
    let mut cur_len = seq.len();
    let mut result = RequestResult {
        final_sequence: seq.clone(),
        steps: Vec::new(),
        error_records: Vec::new(),
        proposed_total: 0,
        accepted_total: 0,
        truncated: false,
    };
    while !seq.ends_with(eos) && seq.len() < cfg.max_total_len {
        let (proposed, draft_dists) = propose(draft, seq.tokens(), cfg.k, cfg.serve_tau, rng)?;
        let step = verify(target, seq.tokens(), &proposed, &draft_dists, cfg.serve_tau, rng)?;

        let mut keep = step.emitted.len();
        if let Some(pos) = step.emitted.iter().position(|&t| t == eos) {
            keep = keep.min(pos + 1);
        }
        let room = cfg.max_total_len - seq.len();
        if keep > room {
            keep = room;
            result.truncated = true;
        }
        for &t in &step.emitted[..keep] {
            seq.push(t, &vocab)?;
        }
        cur_len += keep;
        result.error_records.push(ErrorRecord {
            error_index: cur_len,
            target_dist: step.target_dists[keep - 1].clone(),
            accepted_all: step.accept_count == cfg.k,
        });
        result.proposed_total += cfg.k;
        result.accepted_total += step.accept_count;
        result.steps.push(step);
    }
    if !seq.ends_with(eos) && seq.len() >= cfg.max_total_len {
        result.truncated = true;
    }
    result.final_sequence = seq;
    Ok(result)
}
