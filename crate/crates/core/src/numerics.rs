//! Special functions and stable reductions.
//!
//! `log_gamma`, `digamma` and `trigamma` all follow the same pattern: push the
//! argument above [`SHIFT`] with the functional recurrence, then evaluate the
//! asymptotic (Stirling-type) series there.

use crate::{Error, Result};

/// Arguments below this are shifted up by recurrence before the asymptotic
/// series is applied.
const SHIFT: f64 = 10.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// B_{2k} for k = 1..=8.
const BERNOULLI: [f64; 8] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
];

fn check_positive(func: &'static str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain { func, value: x })
    }
}

/// `ln Γ(x)` for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    check_positive("log_gamma", x)?;
    let mut z = x;
    let mut shift = 0.0;
    while z < SHIFT {
        shift += z.ln();
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv;
    for (k, b) in BERNOULLI.iter().enumerate() {
        let n = 2.0 * (k as f64 + 1.0);
        series += b / (n * (n - 1.0)) * pow;
        pow *= inv2;
    }
    Ok((z - 0.5) * z.ln() - z + HALF_LN_2PI + series - shift)
}

/// Digamma `ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma", x)?;
    let mut z = x;
    let mut acc = 0.0;
    while z < SHIFT {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv2 = 1.0 / (z * z);
    let mut series = 0.0;
    let mut pow = inv2;
    for (k, b) in BERNOULLI.iter().enumerate() {
        let n = 2.0 * (k as f64 + 1.0);
        series += b / n * pow;
        pow *= inv2;
    }
    Ok(acc + z.ln() - 0.5 / z - series)
}

/// Trigamma `ψ′(x)` for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive("trigamma", x)?;
    let mut z = x;
    let mut acc = 0.0;
    while z < SHIFT {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv2 * inv;
    for b in BERNOULLI.iter() {
        series += b * pow;
        pow *= inv2;
    }
    Ok(acc + inv + 0.5 * inv2 + series)
}

/// `ln Σ exp(v_i)`, shifted by the maximum so large entries do not overflow.
///
/// Entries may be `-inf`; an all `-inf` input returns `-inf`.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("log_sum_exp"));
    }
    if let Some(bad) = v.iter().find(|x| x.is_nan() || **x == f64::INFINITY) {
        return Err(Error::Domain {
            func: "log_sum_exp",
            value: *bad,
        });
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Softmax of `v` written into `out`, returning the log normalizer.
pub fn softmax_into(v: &[f64], out: &mut [f64]) -> Result<f64> {
    let lse = log_sum_exp(v)?;
    for (o, x) in out.iter_mut().zip(v) {
        *o = (x - lse).exp();
    }
    Ok(lse)
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out)?;
    Ok(out)
}

/// Logistic sigmoid, evaluated on the branch that cannot overflow.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn log_gamma_integers() {
        assert!(log_gamma(1.0).unwrap().abs() < 1e-14);
        assert!(log_gamma(2.0).unwrap().abs() < 1e-14);
        // 9! = 362880
        assert!((log_gamma(10.0).unwrap() - 362_880f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_gamma_half_integer() {
        // Γ(5.5) = (9·7·5·3·1 / 2^5) √π
        let expected = (945.0 / 32.0 * std::f64::consts::PI.sqrt()).ln();
        assert!((log_gamma(5.5).unwrap() - expected).abs() < 1e-12);
        let half = 0.5 * std::f64::consts::PI.ln();
        assert!((log_gamma(0.5).unwrap() - half).abs() < 1e-12);
    }

    #[test]
    fn log_gamma_small_and_large() {
        // Γ(x) ~ 1/x - γ near zero
        let x = 1e-3;
        let approx = (1.0 / x - EULER_GAMMA + 0.989_055_995_327_972_6 * x).ln();
        assert!((log_gamma(x).unwrap() - approx).abs() < 1e-9);
        // relative accuracy is what f64 can offer at 1e6
        let big = 1e6;
        let stirling = (big - 0.5) * f64::ln(big) - big + HALF_LN_2PI + 1.0 / (12.0 * big);
        let got = log_gamma(big).unwrap();
        assert!(((got - stirling) / stirling).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        assert!(log_gamma(0.0).is_err());
        assert!(log_gamma(-1.0).is_err());
        assert!(log_gamma(f64::NAN).is_err());
        assert!(log_gamma(f64::INFINITY).is_err());
        assert!(digamma(0.0).is_err());
        assert!(trigamma(-2.5).is_err());
    }

    #[test]
    fn digamma_known_values() {
        assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() < 1e-14);
        assert!((digamma(2.0).unwrap() - (1.0 - EULER_GAMMA)).abs() < 1e-14);
        assert!((digamma(2.0).unwrap() - 0.422_784_335_098_467_1).abs() < 1e-14);
    }

    #[test]
    fn digamma_matches_log_gamma_difference() {
        let h = 1e-6;
        let x = 3.7;
        let fd = (log_gamma(x + h).unwrap() - log_gamma(x - h).unwrap()) / (2.0 * h);
        let d = digamma(x).unwrap();
        assert!(((fd - d) / d).abs() < 1e-6);
    }

    #[test]
    fn trigamma_known_values() {
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0).unwrap() - pi2_6).abs() < 1e-13);
        assert!((trigamma(1.0).unwrap() - 1.644_934_066_848_226_4).abs() < 1e-13);
        assert!((trigamma(2.0).unwrap() - (pi2_6 - 1.0)).abs() < 1e-13);
    }

    #[test]
    fn trigamma_matches_digamma_difference() {
        let h = 1e-6;
        let x = 4.2;
        let fd = (digamma(x + h).unwrap() - digamma(x - h).unwrap()) / (2.0 * h);
        let t = trigamma(x).unwrap();
        assert!(((fd - t) / t).abs() < 1e-6);
    }

    #[test]
    fn recurrences_hold_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let x: f64 = 100.0 * (1.0 - rng.random::<f64>());
            let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap() - 1.0 / x;
            assert!(d.abs() <= 1e-12, "digamma recurrence at {x}: {d}");
            let t = trigamma(x + 1.0).unwrap() - trigamma(x).unwrap() + 1.0 / (x * x);
            assert!(t.abs() <= 1e-12, "trigamma recurrence at {x}: {t}");
        }
    }

    #[test]
    fn digamma_is_log_gamma_derivative_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..1000 {
            let x: f64 = rng.random_range(0.05..50.0);
            let fd = (log_gamma(x + h).unwrap() - log_gamma(x - h).unwrap()) / (2.0 * h);
            let d = digamma(x).unwrap();
            let scale = d.abs().max(1.0);
            assert!((fd - d).abs() / scale < 1e-6, "x={x} fd={fd} d={d}");
        }
    }

    #[test]
    fn log_sum_exp_basic() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let v = [-1.0, 2.0, 0.5];
        let naive: f64 = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v).unwrap() - naive).abs() < 1e-14);
        assert!(log_sum_exp(&[]).is_err());
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
        assert!((log_sum_exp(&[f64::NEG_INFINITY, 0.0]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        for v in [0.3, 5.0, 40.0, 800.0] {
            assert!((sigmoid(v) + sigmoid(-v) - 1.0).abs() < 1e-15);
        }
    }

    proptest::proptest! {
        #[test]
        fn log_sum_exp_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..20),
            c in -500.0f64..500.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = log_sum_exp(&shifted).unwrap();
            let b = log_sum_exp(&v).unwrap() + c;
            proptest::prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
