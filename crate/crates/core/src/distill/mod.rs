//! Knowledge distillation of the draft towards the target: divergences,
//! rollout sampling policies, the plug-in sequence objective and the
//! optimizer loop used both offline and by online updates.

mod divergence;
mod optim;

pub use divergence::{divergence, DistanceMeasure, PROB_FLOOR};
pub(crate) use divergence::divergence_and_grad_wrt_q;
pub use optim::{apply_update, OptimizerConfig, OptimizerKind, OptimizerState};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    sample_token, CategoricalDistribution, ConditionalModel, NeuralDraftModel, ParameterGradient, Sequence, TokenId,
};
use crate::rng::SeededRng;

/// Where rollout tokens for the sequence objective come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SamplingPolicy {
    Teacher,
    Student,
    /// Each token from `beta·p + (1−beta)·q`.
    Mix { beta: f64 },
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplingPolicy::Mix { beta } if !(0.0..=1.0).contains(&beta) => {
                Err(Error::invalid(format!("mixture weight must lie in [0, 1], got {beta}")))
            }
            _ => Ok(()),
        }
    }

    pub fn parse(name: &str, mix_beta: f64) -> Result<Self> {
        let p = match name.to_ascii_lowercase().as_str() {
            "teacher" | "tf" => SamplingPolicy::Teacher,
            "student" | "sf" => SamplingPolicy::Student,
            "mix" | "mixf" => SamplingPolicy::Mix { beta: mix_beta },
            other => return Err(Error::invalid(format!("unknown sampling policy {other:?}"))),
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub measure: DistanceMeasure,
    pub tau: f64,
    pub policy: SamplingPolicy,
    pub rollout_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            measure: DistanceMeasure::Kl,
            tau: 1.0,
            policy: SamplingPolicy::Teacher,
            rollout_len: 32,
            batch_size: 16,
            epochs: 2,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.measure.validate()?;
        self.policy.validate()?;
        self.optimizer.validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("distillation temperature must be positive"));
        }
        if self.rollout_len == 0 || self.batch_size == 0 {
            return Err(Error::invalid("rollout_len and batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// A stored target distribution for the token at `position` of `context`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub context: Sequence,
    pub position: usize,
    pub target_dist: CategoricalDistribution,
}

impl TrainingExample {
    pub fn new(context: Sequence, position: usize, target_dist: CategoricalDistribution) -> Result<Self> {
        if position == 0 || position > context.len() {
            return Err(Error::invalid(format!(
                "position {position} outside 1..={} of the context",
                context.len()
            )));
        }
        Ok(Self { context, position, target_dist })
    }

    /// Tokens the draft conditions on.
    pub fn prefix(&self) -> &[TokenId] {
        &self.context.tokens()[..self.position]
    }
}

/// Draws a continuation of at most `len` tokens, stopping after EOS.
pub fn sample_rollout<T: ConditionalModel + ?Sized>(
    policy: SamplingPolicy,
    draft: &NeuralDraftModel,
    target: &T,
    prompt: &Sequence,
    len: usize,
    tau: f64,
    rng: &mut SeededRng,
) -> Result<Vec<TokenId>> {
    if len == 0 {
        return Err(Error::invalid("rollout length must be at least 1"));
    }
    policy.validate()?;
    let eos = target.vocab().eos();
    let mut ctx = prompt.tokens().to_vec();
    let mut out = Vec::with_capacity(len);
    if prompt.ends_with(eos) {
        return Ok(out);
    }
    for _ in 0..len {
        let dist = match policy {
            SamplingPolicy::Teacher => target.conditional(&ctx, 1.0)?,
            SamplingPolicy::Student => draft.conditional(&ctx, tau)?,
            SamplingPolicy::Mix { beta } => {
                let p = target.conditional(&ctx, 1.0)?;
                let q = draft.conditional(&ctx, tau)?;
                p.mix(&q, beta)?
            }
        };
        let t = sample_token(&dist, rng);
        ctx.push(t);
        out.push(t);
        if t == eos {
            break;
        }
    }
    Ok(out)
}

/// Per-position contexts of the plug-in objective: one per continuation
/// token plus the position after it, unless the continuation ended in EOS.
fn objective_prefixes(prompt: &Sequence, continuation: &[TokenId], eos: TokenId) -> Vec<Vec<TokenId>> {
    let mut ctx = prompt.tokens().to_vec();
    let mut out = Vec::with_capacity(continuation.len() + 1);
    out.push(ctx.clone());
    for &t in continuation {
        ctx.push(t);
        if t == eos {
            break;
        }
        out.push(ctx.clone());
    }
    out
}

/// `Σ_j D(p(·|x, y_<j) ∥ q_θ(·|x, y_<j))` over the continuation positions.
pub fn sequence_loss<T: ConditionalModel + ?Sized>(
    draft: &NeuralDraftModel,
    prompt: &Sequence,
    continuation: &[TokenId],
    target: &T,
    measure: DistanceMeasure,
    tau: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for ctx in objective_prefixes(prompt, continuation, target.vocab().eos()) {
        let p = target.conditional(&ctx, 1.0)?;
        let q = draft.conditional(&ctx, tau)?;
        total += divergence(&p, &q, measure)?;
    }
    Ok(total)
}

/// Adds `weight * ∇sequence_loss` into `grad`; the rollout is treated as a
/// constant so no gradient flows through the sampling.
pub fn accumulate_sequence_grad<T: ConditionalModel + ?Sized>(
    draft: &NeuralDraftModel,
    prompt: &Sequence,
    continuation: &[TokenId],
    target: &T,
    measure: DistanceMeasure,
    tau: f64,
    weight: f64,
    grad: &mut ParameterGradient,
) -> Result<f64> {
    let mut total = 0.0;
    for ctx in objective_prefixes(prompt, continuation, target.vocab().eos()) {
        let p = target.conditional(&ctx, 1.0)?;
        total += draft.accumulate_loss_and_grad(&ctx, &p, measure, tau, weight, grad)?;
    }
    Ok(total)
}

/// Mean sequence loss over `prompts`, with one rollout per prompt.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: ConditionalModel + ?Sized>(
    draft: &NeuralDraftModel,
    target: &T,
    prompts: &[Sequence],
    policy: SamplingPolicy,
    measure: DistanceMeasure,
    tau: f64,
    rollout_len: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::invalid("batch must hold at least one prompt"));
    }
    let mut sum = 0.0;
    for prompt in prompts {
        let y = sample_rollout(policy, draft, target, prompt, rollout_len, tau, rng)?;
        sum += sequence_loss(draft, prompt, &y, target, measure, tau)?;
    }
    Ok(sum / prompts.len() as f64)
}

/// Fits the draft to stored target distributions: one optimizer step per
/// epoch over the full set. Returns the mean loss of the last epoch, or
/// `None` when there is nothing to learn from.
pub fn distill_on_examples(
    draft: &mut NeuralDraftModel,
    examples: &[TrainingExample],
    cfg: &DistillConfig,
    state: &mut OptimizerState,
) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    cfg.measure.validate()?;
    let weight = 1.0 / examples.len() as f64;
    let mut last = None;
    for _ in 0..cfg.epochs {
        let mut grad = ParameterGradient::zeros(*draft.shape());
        let mut sum = 0.0;
        for ex in examples {
            sum += draft.accumulate_loss_and_grad(ex.prefix(), &ex.target_dist, cfg.measure, cfg.tau, weight, &mut grad)?;
        }
        apply_update(draft, &grad, state)?;
        last = Some(sum * weight);
    }
    Ok(last)
}

/// Per-step losses recorded by the offline loops.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    pub batch_losses: Vec<f64>,
}

/// Offline distillation: rollouts per `cfg.policy`, plug-in objective,
/// one optimizer step per batch. Prompts are reshuffled every epoch.
pub fn offline_distill<T: ConditionalModel + ?Sized>(
    draft: &mut NeuralDraftModel,
    target: &T,
    prompts: &[Sequence],
    cfg: &DistillConfig,
    state: &mut OptimizerState,
    rng: &mut SeededRng,
) -> Result<TrainingTrace> {
    train_loop(draft, target, prompts, cfg, state, rng, Objective::Distill)
}

/// Finetuning on teacher-sampled labels: negative log-likelihood of each
/// sampled token under the draft.
pub fn ft_baseline<T: ConditionalModel + ?Sized>(
    draft: &mut NeuralDraftModel,
    target: &T,
    prompts: &[Sequence],
    cfg: &DistillConfig,
    state: &mut OptimizerState,
    rng: &mut SeededRng,
) -> Result<TrainingTrace> {
    train_loop(draft, target, prompts, cfg, state, rng, Objective::Labels)
}

/// Mean over the batch of `−Σ_j ln q_θ(y_j | x, y_<j)` for teacher labels.
pub fn label_nll(
    draft: &NeuralDraftModel,
    prompts: &[Sequence],
    labels: &[Vec<TokenId>],
    tau: f64,
) -> Result<f64> {
    if prompts.is_empty() || prompts.len() != labels.len() {
        return Err(Error::invalid("need one label sequence per prompt"));
    }
    let mut sum = 0.0;
    for (prompt, ys) in prompts.iter().zip(labels) {
        let mut ctx = prompt.tokens().to_vec();
        for &y in ys {
            let q = draft.conditional(&ctx, tau)?;
            sum -= q.prob(y).max(PROB_FLOOR).ln();
            ctx.push(y);
        }
    }
    Ok(sum / prompts.len() as f64)
}

#[derive(Clone, Copy)]
enum Objective {
    Distill,
    Labels,
}

fn train_loop<T: ConditionalModel + ?Sized>(
    draft: &mut NeuralDraftModel,
    target: &T,
    prompts: &[Sequence],
    cfg: &DistillConfig,
    state: &mut OptimizerState,
    rng: &mut SeededRng,
    objective: Objective,
) -> Result<TrainingTrace> {
    cfg.validate()?;
    let mut trace = TrainingTrace::default();
    if prompts.is_empty() || cfg.epochs == 0 {
        return Ok(trace);
    }
    let ids = draft.shape().ids;
    let policy = match objective {
        Objective::Distill => cfg.policy,
        Objective::Labels => SamplingPolicy::Teacher,
    };
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            let mut grad = ParameterGradient::zeros(*draft.shape());
            let mut sum = 0.0;
            for &i in batch {
                let prompt = &prompts[i];
                let y = sample_rollout(policy, draft, target, prompt, cfg.rollout_len, cfg.tau, rng)?;
                sum += match objective {
                    Objective::Distill => {
                        accumulate_sequence_grad(draft, prompt, &y, target, cfg.measure, cfg.tau, weight, &mut grad)?
                    }
                    Objective::Labels => {
                        let mut ctx = prompt.tokens().to_vec();
                        let mut s = 0.0;
                        for &label in &y {
                            let one_hot = CategoricalDistribution::one_hot(ids, label);
                            s += draft.accumulate_loss_and_grad(
                                &ctx,
                                &one_hot,
                                DistanceMeasure::Kl,
                                cfg.tau,
                                weight,
                                &mut grad,
                            )?;
                            ctx.push(label);
                        }
                        s
                    }
                };
            }
            apply_update(draft, &grad, state)?;
            trace.batch_losses.push(sum * weight);
        }
    }
    Ok(trace)
}
