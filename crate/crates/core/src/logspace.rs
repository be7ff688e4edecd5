//! Log-domain arithmetic shared by every backend.
//!
//! Invalid entries use the finite sentinel [`NEG_INF`] rather than `-inf`, so
//! that differences such as `x - max(x)` never produce NaN. Reductions whose
//! maximum sits within one unit of the sentinel are treated as empty and
//! return the sentinel unchanged.

/// Sentinel for an impossible log-score.
pub const NEG_INF: f64 = -1e9;

/// Anything at or below this value is treated as [`NEG_INF`].
pub const NEG_INF_GUARD: f64 = NEG_INF + 1.0;

/// Bound applied to each summand of `alpha + psi + beta` before adding.
pub const INTERMEDIATE_CLAMP: f64 = 1e6;

/// Bound applied to a log-marginal before exponentiation.
pub const LOG_MARGINAL_CLAMP: f64 = 80.0;

#[inline]
pub fn is_neg_inf(x: f64) -> bool {
    x <= NEG_INF_GUARD
}

/// `log(exp(a) + exp(b))` with sentinel guards.
#[inline]
pub fn lse2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if is_neg_inf(hi) {
        return NEG_INF;
    }
    if is_neg_inf(lo) {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Log-sum-exp over a slice; returns [`NEG_INF`] for an empty or all-sentinel
/// input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_nan() || max <= NEG_INF_GUARD {
        return NEG_INF;
    }
    let sum: f64 = xs.iter().filter(|x| !is_neg_inf(**x)).map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Log-sum-exp over an iterator, in one pass with a running maximum.
pub fn logsumexp_iter<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut max = NEG_INF;
    let mut acc = 0.0;
    for x in xs {
        if is_neg_inf(x) {
            continue;
        }
        if x > max {
            acc = acc * (max - x).exp() + 1.0;
            max = x;
        } else {
            acc += (x - max).exp();
        }
    }
    if is_neg_inf(max) {
        NEG_INF
    } else {
        max + acc.ln()
    }
}

#[inline]
pub fn clamp_intermediate(x: f64) -> f64 {
    x.clamp(-INTERMEDIATE_CLAMP, INTERMEDIATE_CLAMP)
}

/// Maps the internal sentinel to IEEE `-inf` for reporting.
pub fn to_ieee(x: f64) -> f64 {
    if is_neg_inf(x) {
        f64::NEG_INFINITY
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse2_matches_closed_form() {
        // log(e^0.5 + e^2)
        let expected = 2.201_413_277_982_752_4;
        assert!((lse2(0.5, 2.0) - expected).abs() < 1e-15);
        assert!((lse2(2.0, 0.5) - expected).abs() < 1e-15);
    }

    #[test]
    fn lse2_large_values_do_not_overflow() {
        let got = lse2(1234.0, 1232.0);
        assert!((got - (1234.0 + (-2.0f64).exp().ln_1p())).abs() < 1e-12);
    }

    #[test]
    fn sentinel_is_absorbing() {
        assert_eq!(lse2(NEG_INF, NEG_INF), NEG_INF);
        assert_eq!(lse2(NEG_INF, 3.0), 3.0);
        assert_eq!(logsumexp(&[NEG_INF, NEG_INF]), NEG_INF);
        assert_eq!(logsumexp(&[]), NEG_INF);
        // A shifted sentinel is still a sentinel.
        assert_eq!(logsumexp(&[NEG_INF - 50.0, NEG_INF + 0.5]), NEG_INF);
    }

    #[test]
    fn slice_and_iter_agree() {
        let xs = [0.3, -1.2, 5.0, NEG_INF, 2.2, 4.9];
        let a = logsumexp(&xs);
        let b = logsumexp_iter(xs.iter().copied());
        let naive: f64 = xs[..3].iter().chain(&xs[4..]).map(|x| x.exp()).sum::<f64>().ln();
        assert!((a - naive).abs() < 1e-14);
        assert!((b - naive).abs() < 1e-14);
    }

    #[test]
    fn uniform_input() {
        assert!((logsumexp(&[0.0; 4]) - 4f64.ln()).abs() < 1e-15);
    }
}
