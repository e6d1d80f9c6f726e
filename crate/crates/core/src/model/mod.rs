//! Vocabulary, sequences, categorical distributions and the two model
//! families: exact grammar tables and the small trainable neural draft.

mod checkpoint;
mod grammar;
mod neural;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use grammar::GrammarOracle;
pub use neural::{ModelShape, NeuralDraftModel, ParameterGradient};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Tolerance on the total mass of a [`CategoricalDistribution`].
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// `size` ordinary tokens with ids `0..size`, followed by BOS, EOS and PAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid(format!("vocabulary needs at least 2 ordinary tokens, got {size}")));
        }
        if size > 1 << 20 {
            return Err(Error::invalid(format!("vocabulary of {size} tokens is too large")));
        }
        Ok(Self { size })
    }

    /// Number of ordinary tokens.
    pub fn size(&self) -> usize {
        self.size as usize
    }

    /// Total id count including reserved ids.
    pub fn total(&self) -> usize {
        self.size as usize + 3
    }

    pub fn bos(&self) -> TokenId {
        TokenId(self.size)
    }

    pub fn eos(&self) -> TokenId {
        TokenId(self.size + 1)
    }

    pub fn pad(&self) -> TokenId {
        TokenId(self.size + 2)
    }

    pub fn is_ordinary(&self, t: TokenId) -> bool {
        t.0 < self.size
    }

    pub fn check(&self, t: TokenId) -> Result<()> {
        if t.index() < self.total() {
            Ok(())
        } else {
            Err(Error::invalid(format!("token id {} out of vocabulary ({} ids)", t.0, self.total())))
        }
    }
}

/// Prompt followed by generated tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    tokens: Vec<TokenId>,
    prompt_len: usize,
}

impl Sequence {
    /// A prompt: every token counts towards `prompt_len`.
    pub fn prompt(tokens: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        let prompt_len = tokens.len();
        Self::new(tokens, prompt_len, vocab)
    }

    pub fn new(tokens: Vec<TokenId>, prompt_len: usize, vocab: &Vocabulary) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::invalid("prompt_len exceeds sequence length"));
        }
        let eos = vocab.eos();
        for (i, &t) in tokens.iter().enumerate() {
            vocab.check(t)?;
            if t == eos && i + 1 != tokens.len() {
                return Err(Error::invalid("EOS may only appear as the last token"));
            }
        }
        Ok(Self { tokens, prompt_len })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn ends_with(&self, t: TokenId) -> bool {
        self.tokens.last() == Some(&t)
    }

    /// Appends `t`. Fails if the sequence is already terminated.
    pub(crate) fn push(&mut self, t: TokenId, vocab: &Vocabulary) -> Result<()> {
        vocab.check(t)?;
        if self.ends_with(vocab.eos()) {
            return Err(Error::invalid("cannot extend a sequence past EOS"));
        }
        self.tokens.push(t);
        Ok(())
    }
}

/// Probability vector over every vocabulary id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CategoricalDistribution {
    probs: Vec<f64>,
}

impl CategoricalDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty distribution"));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::invalid(format!("probability {p} at id {i} is not a non-negative real")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::invalid("weights must be non-negative with positive finite sum"));
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n] }
    }

    pub fn one_hot(n: usize, id: TokenId) -> Self {
        let mut probs = vec![0.0; n];
        probs[id.index()] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, t: TokenId) -> f64 {
        self.probs.get(t.index()).copied().unwrap_or(0.0)
    }

    /// Id with the highest probability (lowest id on ties).
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }

    /// `beta * self + (1 - beta) * other`.
    pub fn mix(&self, other: &Self, beta: f64) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!("{} vs {} ids", self.len(), other.len())));
        }
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(p, q)| beta * p + (1.0 - beta) * q)
            .collect();
        Ok(Self { probs })
    }

    /// Raises each entry to `1/tau` and renormalizes; `tau == 1` is the identity.
    pub fn with_temperature(&self, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        if tau == 1.0 {
            return Ok(self.clone());
        }
        let logits = self.probs.iter().map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY });
        let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.map(|l| ((l - max) / tau).exp()).collect();
        Self::from_weights(w)
    }
}

impl TryFrom<Vec<f64>> for CategoricalDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CategoricalDistribution> for Vec<f64> {
    fn from(d: CategoricalDistribution) -> Self {
        d.probs
    }
}

/// Unnormalized scores, one per vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    values: Vec<f64>,
}

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("empty logits"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite logit {v}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive and finite, got {tau}")))
    }
}

/// `softmax(logits / tau)` with max-subtraction.
pub fn softmax_with_temperature(logits: &Logits, tau: f64) -> Result<CategoricalDistribution> {
    check_tau(tau)?;
    Ok(CategoricalDistribution { probs: softmax_raw(logits.values(), tau) })
}

pub(crate) fn softmax_raw(values: &[f64], tau: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Inverse-CDF sampling with a single uniform draw.
pub fn sample_token(dist: &CategoricalDistribution, rng: &mut SeededRng) -> TokenId {
    let u = rng.uniform();
    let mut cdf = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        cdf += p;
        if u < cdf {
            return TokenId(i as u32);
        }
    }
    // Rounding left the cumulative mass just below u.
    TokenId(last_positive as u32)
}

/// Anything that yields next-token distributions for a context.
pub trait ConditionalModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    /// Next-token distribution after `context` at temperature `tau`.
    fn conditional(&self, context: &[TokenId], tau: f64) -> Result<CategoricalDistribution>;

    /// How many trailing context tokens the conditional depends on, if bounded.
    fn context_window(&self) -> Option<usize> {
        None
    }
}

/// The part of `context` a model with `window` actually reads.
pub(crate) fn context_tail(context: &[TokenId], window: Option<usize>) -> &[TokenId] {
    match window {
        Some(w) => &context[context.len().saturating_sub(w.max(1))..],
        None => context,
    }
}

/// The frozen target model `p`.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetOracle {
    Grammar(GrammarOracle),
    Neural(NeuralDraftModel),
}

impl ConditionalModel for TargetOracle {
    fn vocab(&self) -> &Vocabulary {
        match self {
            TargetOracle::Grammar(g) => g.vocab(),
            TargetOracle::Neural(n) => n.vocab(),
        }
    }

    fn conditional(&self, context: &[TokenId], tau: f64) -> Result<CategoricalDistribution> {
        match self {
            TargetOracle::Grammar(g) => g.conditional(context, tau),
            TargetOracle::Neural(n) => n.conditional(context, tau),
        }
    }

    fn context_window(&self) -> Option<usize> {
        match self {
            TargetOracle::Grammar(g) => g.context_window(),
            TargetOracle::Neural(n) => n.context_window(),
        }
    }
}

/// Plain autoregressive sampling until EOS or `max_new` tokens.
pub fn generate<M: ConditionalModel + ?Sized>(
    model: &M,
    prompt: &Sequence,
    max_new: usize,
    tau: f64,
    rng: &mut SeededRng,
) -> Result<Sequence> {
    if max_new == 0 {
        return Err(Error::invalid("max_new must be at least 1"));
    }
    let vocab = *model.vocab();
    let mut seq = prompt.clone();
    for _ in 0..max_new {
        if seq.ends_with(vocab.eos()) {
            break;
        }
        let dist = model.conditional(seq.tokens(), tau)?;
        let t = sample_token(&dist, rng);
        seq.push(t, &vocab)?;
    }
    Ok(seq)
}
