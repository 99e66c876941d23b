//! Stable log-domain arithmetic.
//!
//! `-inf` is an ordinary value here: it encodes probability zero, absorbs
//! addition (`-inf + x = -inf`) and is the identity of [`log_sum_exp`].

use crate::error::{Error, Result};

/// A log-probability in `[-inf, 0]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct LogProb(f64);

impl LogProb {
    pub const ZERO_PROB: LogProb = LogProb(f64::NEG_INFINITY);
    pub const ONE: LogProb = LogProb(0.0);

    /// Rejects NaN and values above zero (a tiny positive rounding excess is clamped).
    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || value > 1e-12 {
            return Err(Error::numerical(format!("{value} is not a log-probability")));
        }
        Ok(LogProb(value.min(0.0)))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn prob(self) -> f64 {
        self.0.exp()
    }
}

/// `log(exp(a) + exp(b))`.
#[inline]
pub fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log(exp(a) + exp(b) + exp(c))`.
#[inline]
pub fn lse3(a: f64, b: f64, c: f64) -> f64 {
    let hi = a.max(b).max(c);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + ((a - hi).exp() + (b - hi).exp() + (c - hi).exp()).ln()
}

/// `log(sum_i exp(values[i]))` by max-shift. Errors on an empty slice.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    let hi = values
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::usage("log_sum_exp of an empty list"))?;
    if hi == f64::NEG_INFINITY {
        return Ok(hi);
    }
    Ok(hi + values.iter().map(|v| (v - hi).exp()).sum::<f64>().ln())
}

/// [`log_sum_exp`] over [`LogProb`]s.
pub fn log_sum_exp_probs(values: &[LogProb]) -> Result<LogProb> {
    let raw: Vec<f64> = values.iter().map(|v| v.0).collect();
    log_sum_exp(&raw).map(|v| LogProb(v.min(0.0)))
}

/// Softmax of one row of finite logits.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let hi = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - hi).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// Log-softmax of one row of finite logits.
pub fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let hi = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = hi + logits.iter().map(|v| (v - hi).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn lse_examples() {
        let half = 0.5f64.ln();
        assert!(log_sum_exp(&[half, half]).unwrap().abs() < 1e-15);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - LN2).abs() < 1e-15);
        assert!(matches!(log_sum_exp(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn lse_ignores_neg_inf_and_order() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let mut v: Vec<f64> = (0..6).map(|_| 10.0 * rng.standard_normal()).collect();
            let base = log_sum_exp(&v).unwrap();
            v.push(f64::NEG_INFINITY);
            assert_eq!(log_sum_exp(&v).unwrap(), base);
            v.reverse();
            assert!((log_sum_exp(&v).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn lse_helpers_match_general() {
        let cases = [(0.3, -2.0, 5.0), (f64::NEG_INFINITY, -1.0, -3.0), (-700.0, -701.0, -800.0)];
        for (a, b, c) in cases {
            assert!((lse2(a, b) - log_sum_exp(&[a, b]).unwrap()).abs() < 1e-12);
            assert!((lse3(a, b, c) - log_sum_exp(&[a, b, c]).unwrap()).abs() < 1e-12);
        }
        let ni = f64::NEG_INFINITY;
        assert_eq!(lse3(ni, ni, ni), ni);
        assert_eq!(lse2(ni, ni), ni);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_row(&[0.0, 0.0, 0.0]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for c in [-50.0, 0.0, 3.7, 80.0] {
            let p = softmax_row(&[c, c + LN2]);
            assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
            assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_naive_and_is_shift_invariant() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
            let z: f64 = x.iter().map(|v| v.exp()).sum();
            let naive: Vec<f64> = x.iter().map(|v| v.exp() / z).collect();
            let p = softmax_row(&x);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&naive) {
                assert!((a - b).abs() < 1e-12);
            }
            for shift in [-100.0, -3.0, 42.0, 100.0] {
                let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
                let q = softmax_row(&shifted);
                for (a, b) in p.iter().zip(&q) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert_eq!(
                    crate::numerics::tensor::argmax(&p),
                    crate::numerics::tensor::argmax(&q)
                );
            }
        }
    }

    #[test]
    fn log_softmax_consistent_with_softmax() {
        let x = [1.0, -2.0, 0.5, 3.0];
        let p = softmax_row(&x);
        let lp = log_softmax_row(&x);
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn logprob_rejects_positive() {
        assert!(LogProb::new(0.5).is_err());
        assert!(LogProb::new(f64::NAN).is_err());
        assert_eq!(LogProb::new(f64::NEG_INFINITY).unwrap(), LogProb::ZERO_PROB);
        let half = LogProb::new(0.5f64.ln()).unwrap();
        assert!(log_sum_exp_probs(&[half, half]).unwrap().value().abs() < 1e-15);
    }
}
