use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CategoricalDistribution;

/// Floor applied to probabilities before any log or division.
pub const PROB_FLOOR: f64 = 1e-12;

/// Distance between the teacher `p` and the student `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DistanceMeasure {
    /// Forward KL, `KL(p ∥ q)`.
    Kl,
    /// Reverse KL, `KL(q ∥ p)`.
    Rkl,
    /// `β·KL(p ∥ m) + (1−β)·KL(q ∥ m)` with `m = βp + (1−β)q`.
    Jsd { beta: f64 },
}

impl DistanceMeasure {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DistanceMeasure::Jsd { beta } if !(beta > 0.0 && beta < 1.0) => {
                Err(Error::invalid(format!("JSD beta must lie in (0, 1), got {beta}")))
            }
            _ => Ok(()),
        }
    }

    /// Parses `kl`, `rkl` or `jsd`; `beta` is used only by JSD.
    pub fn parse(name: &str, beta: f64) -> Result<Self> {
        let m = match name.to_ascii_lowercase().as_str() {
            "kl" | "fkl" => DistanceMeasure::Kl,
            "rkl" => DistanceMeasure::Rkl,
            "jsd" => DistanceMeasure::Jsd { beta },
            other => return Err(Error::invalid(format!("unknown distance measure {other:?}"))),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistanceMeasure::Kl => "kl",
            DistanceMeasure::Rkl => "rkl",
            DistanceMeasure::Jsd { .. } => "jsd",
        }
    }
}

#[inline]
fn floor(x: f64) -> f64 {
    x.max(PROB_FLOOR)
}

/// d floor(x) / dx divided by floor(x): the derivative of `ln floor(x)`.
#[inline]
fn dlog_floor(x: f64) -> f64 {
    if x >= PROB_FLOOR {
        1.0 / x
    } else {
        0.0
    }
}

/// `D(p ∥ q)` for the chosen measure; always ≥ 0.
pub fn divergence(p: &CategoricalDistribution, q: &CategoricalDistribution, measure: DistanceMeasure) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} ids", p.len(), q.len())));
    }
    Ok(divergence_and_grad_wrt_q(p.probs(), q.probs(), measure)?.0)
}

/// Loss value and its gradient with respect to each `q_i`.
pub(crate) fn divergence_and_grad_wrt_q(p: &[f64], q: &[f64], measure: DistanceMeasure) -> Result<(f64, Vec<f64>)> {
    measure.validate()?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; q.len()];
    match measure {
        DistanceMeasure::Kl => {
            for i in 0..q.len() {
                if p[i] > 0.0 {
                    loss += p[i] * (floor(p[i]).ln() - floor(q[i]).ln());
                }
                grad[i] = -p[i] * dlog_floor(q[i]);
            }
        }
        DistanceMeasure::Rkl => {
            for i in 0..q.len() {
                let log_ratio = floor(q[i]).ln() - floor(p[i]).ln();
                loss += q[i] * log_ratio;
                grad[i] = log_ratio + q[i] * dlog_floor(q[i]);
            }
        }
        DistanceMeasure::Jsd { beta } => {
            for i in 0..q.len() {
                let m = beta * p[i] + (1.0 - beta) * q[i];
                let ln_m = floor(m).ln();
                let dm = dlog_floor(m) * (1.0 - beta);
                let ln_q = floor(q[i]).ln();
                if p[i] > 0.0 {
                    loss += beta * p[i] * (floor(p[i]).ln() - ln_m);
                }
                loss += (1.0 - beta) * q[i] * (ln_q - ln_m);
                grad[i] = -beta * p[i] * dm + (1.0 - beta) * (ln_q - ln_m + q[i] * dlog_floor(q[i]) - q[i] * dm);
            }
        }
    }
    Ok((loss.max(0.0), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(v: &[f64]) -> CategoricalDistribution {
        CategoricalDistribution::new(v.to_vec()).unwrap()
    }

    const MEASURES: [DistanceMeasure; 3] = [DistanceMeasure::Kl, DistanceMeasure::Rkl, DistanceMeasure::Jsd { beta: 0.5 }];

    #[test]
    fn identical_distributions_have_zero_divergence() {
        let p = d(&[0.2, 0.0, 0.8]);
        for m in MEASURES {
            assert_eq!(divergence(&p, &p, m).unwrap(), 0.0);
        }
    }

    #[test]
    fn hand_values() {
        let p = d(&[0.5, 0.5]);
        let q = d(&[0.9, 0.1]);
        // Independent scalar evaluations of each formula.
        let kl = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let rkl = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let (m0, m1) = (0.7f64, 0.3f64);
        let jsd = 0.5 * (0.5 * (0.5 / m0).ln() + 0.5 * (0.5 / m1).ln())
            + 0.5 * (0.9 * (0.9 / m0).ln() + 0.1 * (0.1 / m1).ln());
        assert!((divergence(&p, &q, DistanceMeasure::Kl).unwrap() - kl).abs() < 1e-12);
        assert!((divergence(&p, &q, DistanceMeasure::Rkl).unwrap() - rkl).abs() < 1e-12);
        assert!((divergence(&p, &q, DistanceMeasure::Jsd { beta: 0.5 }).unwrap() - jsd).abs() < 1e-12);
        assert!((kl - 0.5108).abs() < 1e-4);
        assert!((rkl - 0.3681).abs() < 1e-4);
        assert!((jsd - 0.1017).abs() < 1e-4);
    }

    #[test]
    fn zero_entries_use_the_floor() {
        let p = d(&[1.0, 0.0]);
        let q = d(&[0.0, 1.0]);
        for m in MEASURES {
            let v = divergence(&p, &q, m).unwrap();
            assert!(v.is_finite() && v > 0.0, "{m:?}: {v}");
        }
        let kl = divergence(&p, &q, DistanceMeasure::Kl).unwrap();
        assert!((kl - (1.0 / PROB_FLOOR).ln()).abs() < 1e-9);
    }

    #[test]
    fn invalid_beta_is_rejected() {
        let p = d(&[0.5, 0.5]);
        for beta in [0.0, 1.0, -0.2, f64::NAN] {
            assert!(divergence(&p, &p, DistanceMeasure::Jsd { beta }).is_err());
        }
        assert!(DistanceMeasure::parse("hellinger", 0.5).is_err());
        assert_eq!(DistanceMeasure::parse("RKL", 0.5).unwrap(), DistanceMeasure::Rkl);
    }
}
