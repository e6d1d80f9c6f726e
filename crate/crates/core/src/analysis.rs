//! Closed-form latency and cost models for speculative decoding, plus a
//! Monte Carlo validator driven through the real verify path.

use crate::error::{Error, Result};
use crate::model::{CategoricalDistribution, GrammarOracle, TokenId, Vocabulary};
use crate::rng::SeededRng;
use crate::specdecode::verify;

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Domain(format!("acceptance rate must lie in [0, 1), got {alpha}")))
    }
}

fn check_k(k: usize) -> Result<()> {
    if k >= 1 {
        Ok(())
    } else {
        Err(Error::Domain("k must be at least 1".into()))
    }
}

/// Expected tokens emitted per target run: `(1 − α^{k+1}) / (1 − α)`.
pub fn expected_length(alpha: f64, k: usize) -> Result<f64> {
    check_alpha(alpha)?;
    check_k(k)?;
    Ok((1.0 - alpha.powi(k as i32 + 1)) / (1.0 - alpha))
}

/// [`expected_length`] extended to `α = 1` (limit `k + 1`) when `allow_unit` is set.
pub fn expected_length_with_limit(alpha: f64, k: usize, allow_unit: bool) -> Result<f64> {
    if allow_unit && alpha == 1.0 {
        check_k(k)?;
        return Ok(k as f64 + 1.0);
    }
    expected_length(alpha, k)
}

/// `(1 − α^{k+1}) / ((1 − α)(k·c + 1))`; values below 1 mean a slowdown.
pub fn expected_speedup(alpha: f64, k: usize, c: f64) -> Result<f64> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::Domain(format!("cost coefficient must be non-negative, got {c}")));
    }
    Ok(expected_length(alpha, k)? / (k as f64 * c + 1.0))
}

/// Speedup of a draft with acceptance `alpha2` over one with `alpha1`:
/// `Σ_{i=0..k} α2^i / Σ_{i=0..k} α1^i`.
pub fn osd_speedup_ratio(alpha1: f64, alpha2: f64, k: usize) -> Result<f64> {
    Ok(expected_length(alpha2, k)? / expected_length(alpha1, k)?)
}

/// Target-forward FLOPs over draft FLOPs per target run:
/// `(k+1)·F_pfwd / ((k + 3a)·F_qfwd)`.
pub fn flops_ratio(f_pfwd: f64, f_qfwd: f64, k: usize, a: f64) -> Result<f64> {
    if !(f_pfwd > 0.0 && f_qfwd > 0.0 && a > 0.0) || k == 0 {
        return Err(Error::Domain("FLOPs inputs must be positive".into()));
    }
    Ok((k as f64 + 1.0) * f_pfwd / ((k as f64 + 3.0 * a) * f_qfwd))
}

/// Inputs of the per-update FLOPs model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsInputs {
    pub f_pfwd: f64,
    pub f_qfwd: f64,
    pub f_qbwd: f64,
    /// Average generated tokens per request.
    pub length: f64,
    /// Requests per update.
    pub interval: f64,
    pub k: usize,
    /// Expected tokens emitted per target run.
    pub a: f64,
}

impl FlopsInputs {
    /// Training FLOPs default to three times inference.
    pub fn new(f_pfwd: f64, f_qfwd: f64, length: f64, interval: f64, k: usize, a: f64) -> Self {
        Self { f_pfwd, f_qfwd, f_qbwd: 3.0 * f_qfwd, length, interval, k, a }
    }

    fn check(&self) -> Result<()> {
        let vals = [self.f_pfwd, self.f_qfwd, self.f_qbwd, self.interval, self.a];
        if vals.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(self.length >= 0.0) || self.k == 0 {
            return Err(Error::Domain("FLOPs inputs must be positive".into()));
        }
        Ok(())
    }
}

/// Serving plus training FLOPs for one update interval, simplified form:
/// `(L·I/a)·[(k + 3a)·F_qfwd + (k+1)·F_pfwd]`. Assumes `F_qbwd = 3·F_qfwd`.
pub fn total_update_flops(x: &FlopsInputs) -> Result<f64> {
    x.check()?;
    let k = x.k as f64;
    Ok(x.length * x.interval / x.a * ((k + 3.0 * x.a) * x.f_qfwd + (k + 1.0) * x.f_pfwd))
}

/// The same quantity before simplification:
/// `(L·I/a)·[k·F_qfwd + (k+1)·F_pfwd] + I·L·F_qbwd`.
pub fn total_update_flops_unsimplified(x: &FlopsInputs) -> Result<f64> {
    x.check()?;
    let k = x.k as f64;
    Ok(x.length * x.interval / x.a * (k * x.f_qfwd + (k + 1.0) * x.f_pfwd) + x.interval * x.length * x.f_qbwd)
}

/// Sustained FLOPs/second: `(tokens / seconds) · params · flops_per_token_per_param`.
pub fn cluster_utilization_estimate(
    total_tokens: f64,
    duration_seconds: f64,
    params: f64,
    flops_per_token_per_param: f64,
) -> Result<f64> {
    if !(duration_seconds > 0.0) || total_tokens < 0.0 || params < 0.0 || flops_per_token_per_param < 0.0 {
        return Err(Error::Domain("utilization inputs must be non-negative with positive duration".into()));
    }
    Ok(total_tokens / duration_seconds * params * flops_per_token_per_param)
}

/// Mean tokens emitted per verify step when every proposal survives with
/// probability `alpha`: the draft is one-hot on token A and the target
/// puts `alpha` on A and the rest on B.
pub fn monte_carlo_expected_length(alpha: f64, k: usize, trials: usize, rng: &mut SeededRng) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("acceptance rate must lie in [0, 1], got {alpha}")));
    }
    check_k(k)?;
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let vocab = Vocabulary::new(2)?;
    let (a, b) = (TokenId(0), TokenId(1));
    let mut row = vec![0.0; vocab.total()];
    row[a.index()] = alpha;
    row[b.index()] = 1.0 - alpha;
    let target = GrammarOracle::constant(vocab, CategoricalDistribution::new(row)?)?;
    let draft_dists = vec![CategoricalDistribution::one_hot(vocab.total(), a); k];
    let proposed = vec![a; k];
    let context = [vocab.bos()];
    let mut total = 0usize;
    for _ in 0..trials {
        total += verify(&target, &context, &proposed, &draft_dists, 1.0, rng)?.emitted.len();
    }
    Ok(total as f64 / trials as f64)
}

/// Acceptance rates before (`original`) and after teacher-sampled
/// distillation (`distilled`), with the speedup quoted for that row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub model: &'static str,
    pub task: &'static str,
    pub original: f64,
    pub distilled: f64,
    pub quoted_speedup: f64,
}

/// Published acceptance rates (Original and TF columns) and the speedups
/// quoted for them, k = 5.
pub const REFERENCE_ROWS: [ReferenceRow; 8] = [
    ReferenceRow { model: "Vicuna-7B", task: "Spider", original: 0.28, distilled: 0.76, quoted_speedup: 2.42 },
    ReferenceRow { model: "Vicuna-7B", task: "Gsm8k", original: 0.58, distilled: 0.75, quoted_speedup: 1.43 },
    ReferenceRow { model: "Vicuna-7B", task: "Code-search-Python", original: 0.38, distilled: 0.65, quoted_speedup: 1.64 },
    ReferenceRow { model: "Vicuna-7B", task: "Alpaca-finance", original: 0.57, distilled: 0.67, quoted_speedup: 1.22 },
    ReferenceRow { model: "FLAN-T5-XL", task: "Spider", original: 0.13, distilled: 0.78, quoted_speedup: 3.06 },
    ReferenceRow { model: "FLAN-T5-XL", task: "Gsm8k", original: 0.29, distilled: 0.62, quoted_speedup: 1.76 },
    ReferenceRow { model: "FLAN-T5-XL", task: "Code-search-Python", original: 0.28, distilled: 0.81, quoted_speedup: 2.72 },
    ReferenceRow { model: "FLAN-T5-XL", task: "Alpaca-finance", original: 0.39, distilled: 0.63, quoted_speedup: 1.55 },
];

/// One line of the reference-reproduction table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReproducedRow {
    pub row: ReferenceRow,
    pub computed_speedup: f64,
}

pub fn reproduce_reference_table(k: usize) -> Result<Vec<ReproducedRow>> {
    REFERENCE_ROWS
        .iter()
        .map(|&row| Ok(ReproducedRow { row, computed_speedup: osd_speedup_ratio(row.original, row.distilled, k)? }))
        .collect()
}

/// One point of a speedup surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedupPoint {
    pub alpha: f64,
    pub c: f64,
    pub k: usize,
    pub expected_length: f64,
    pub speedup: f64,
}

/// Speedups over the cartesian product of the grids.
pub fn speedup_surface(alphas: &[f64], cs: &[f64], ks: &[usize]) -> Result<Vec<SpeedupPoint>> {
    let mut out = Vec::with_capacity(alphas.len() * cs.len() * ks.len());
    for &k in ks {
        for &c in cs {
            for &alpha in alphas {
                out.push(SpeedupPoint {
                    alpha,
                    c,
                    k,
                    expected_length: expected_length(alpha, k)?,
                    speedup: expected_speedup(alpha, k, c)?,
                });
            }
        }
    }
    Ok(out)
}
