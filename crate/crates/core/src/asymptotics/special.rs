//! Chi-square distribution functions.

use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};

/// Poisson mass below which the noncentral series is truncated.
const SERIES_TAIL: f64 = 1e-12;

fn check(x: f64, dof: f64) -> Result<()> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::InvalidArgument(format!("chi-square argument must be >= 0, got {x}")));
    }
    if !(dof >= 1.0) {
        return Err(Error::InvalidArgument(format!("degrees of freedom must be >= 1, got {dof}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn central_cdf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        gamma_lr(0.5 * dof, 0.5 * x)
    }
}

/// `P(chi^2_p <= x)` through the regularized lower incomplete gamma function.
pub fn chi2_cdf(x: f64, p: usize) -> Result<f64> {
    check(x, p as f64)?;
    Ok(central_cdf(x, p as f64))
}

/// `P(chi^2_p(lambda) <= x)` as a Poisson(`lambda/2`) mixture of central
/// CDFs with `p + 2j` degrees of freedom.
pub fn noncentral_chi2_cdf(x: f64, p: usize, lambda: f64) -> Result<f64> {
    check(x, p as f64)?;
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noncentrality must be >= 0, got {lambda}"
        )));
    }
    Ok(noncentral_cdf(x, p as f64, lambda))
}

pub(crate) fn noncentral_cdf(x: f64, dof: f64, lambda: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    if lambda == 0.0 {
        return central_cdf(x, dof);
    }
    let half = 0.5 * lambda;
    let log_half = half.ln();
    let log_weight = |j: f64| -half + j * log_half - ln_gamma(j + 1.0);

    // Sum outward from the Poisson mode so that large noncentralities do not
    // underflow the leading weights.
    let mode = half.floor();
    let mut total_weight = 0.0;
    let mut acc = 0.0;
    let mut up = mode;
    let mut down = mode - 1.0;
    let mut up_open = true;
    let mut down_open = down >= 0.0;
    while total_weight < 1.0 - SERIES_TAIL && (up_open || down_open) {
        if up_open {
            let w = log_weight(up).exp();
            acc += w * central_cdf(x, dof + 2.0 * up);
            total_weight += w;
            up_open = w > 0.0 || up <= mode;
            up += 1.0;
        }
        if down_open && total_weight < 1.0 - SERIES_TAIL {
            let w = log_weight(down).exp();
            acc += w * central_cdf(x, dof + 2.0 * down);
            total_weight += w;
            down -= 1.0;
            down_open = down >= 0.0 && w > 0.0;
        }
    }
    acc.clamp(0.0, 1.0)
}

fn central_density(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = 0.5 * dof;
    ((k - 1.0) * x.ln() - 0.5 * x - k * std::f64::consts::LN_2 - ln_gamma(k)).exp()
}

/// The `prob`-quantile of the central chi-square with `p` degrees of
/// freedom, by safeguarded Newton iteration on the CDF.
pub fn chi2_quantile(p: usize, prob: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidArgument(format!("probability {prob} outside [0, 1]")));
    }
    if p == 0 {
        return Err(Error::InvalidArgument("degrees of freedom must be >= 1".into()));
    }
    if prob == 0.0 {
        return Ok(0.0);
    }
    if prob == 1.0 {
        return Ok(f64::INFINITY);
    }
    let dof = p as f64;
    let mut lo = 0.0;
    let mut hi = dof.max(1.0);
    while central_cdf(hi, dof) < prob {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = central_cdf(x, dof) - prob;
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = central_density(x, dof);
        let newton = x - f / d;
        x = if d > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (hi - lo) <= 4.0 * f64::EPSILON * hi || (f / d).abs() <= 1e-15 * x {
            break;
        }
    }
    Ok(x)
}

/// Standard normal quantile, expressed through the one-degree chi-square.
pub fn normal_quantile(prob: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::InvalidArgument(format!("probability {prob} outside (0, 1)")));
    }
    let r = chi2_quantile(1, (2.0 * prob - 1.0).abs())?.sqrt();
    Ok(if prob < 0.5 { -r } else { r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use statrs::function::erf::erf;

    #[test]
    fn central_endpoints() {
        for p in 1..6 {
            assert_eq!(chi2_cdf(0.0, p).unwrap(), 0.0);
            assert_eq!(chi2_cdf(f64::INFINITY, p).unwrap(), 1.0);
            assert!(chi2_cdf(1e6, p).unwrap() > 1.0 - 1e-15);
        }
        assert!(chi2_cdf(-1.0, 2).is_err());
        assert!(chi2_cdf(1.0, 0).is_err());
        assert!(noncentral_chi2_cdf(1.0, 2, -0.5).is_err());
    }

    #[test]
    fn one_degree_matches_normal_cdf() {
        // P(chi2_1 <= x) = P(|N| <= sqrt x) = erf(sqrt(x / 2))
        for x in [0.01, 0.5, 1.0, 2.7, 9.0] {
            assert_abs_diff_eq!(chi2_cdf(x, 1).unwrap(), erf((x / 2.0).sqrt()), epsilon = 1e-9);
        }
        // two degrees: exponential with mean 2
        for x in [0.1, 1.0, 5.0] {
            assert_abs_diff_eq!(chi2_cdf(x, 2).unwrap(), 1.0 - (-x / 2.0).exp(), epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_noncentrality_is_central() {
        for p in 1..5 {
            for x in [0.2, 1.0, 3.3, 12.0] {
                let a = noncentral_chi2_cdf(x, p, 0.0).unwrap();
                let b = chi2_cdf(x, p).unwrap();
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noncentral_one_degree_closed_form() {
        // chi2_1(lambda) is (N + sqrt(lambda))^2:
        // P = Phi(sqrt x - sqrt l) - Phi(-sqrt x - sqrt l)
        let phi = |t: f64| 0.5 * (1.0 + erf(t / std::f64::consts::SQRT_2));
        for (x, l) in [(1.0, 0.5), (4.0, 2.0), (0.3, 7.0), (30.0, 25.0)] {
            let want = phi(f64::sqrt(x) - f64::sqrt(l)) - phi(-f64::sqrt(x) - f64::sqrt(l));
            assert_abs_diff_eq!(noncentral_chi2_cdf(x, 1, l).unwrap(), want, epsilon = 1e-11);
        }
    }

    #[test]
    fn large_noncentrality_does_not_underflow() {
        let l: f64 = 4000.0;
        let mean = 3.0 + l;
        let sd: f64 = (2.0 * (3.0 + 2.0 * l) as f64).sqrt();
        let below = noncentral_chi2_cdf(mean - 6.0 * sd, 3, l).unwrap();
        let mid = noncentral_chi2_cdf(mean, 3, l).unwrap();
        let above = noncentral_chi2_cdf(mean + 6.0 * sd, 3, l).unwrap();
        assert!(below < 1e-6);
        assert!((mid - 0.5).abs() < 0.02);
        assert!(above > 1.0 - 1e-6);
    }

    #[test]
    fn noncentral_is_decreasing_in_lambda() {
        let mut last = 1.0;
        for l in [0.0, 0.5, 1.0, 2.0, 5.0, 20.0] {
            let v = noncentral_chi2_cdf(6.0, 3, l).unwrap();
            assert!(v < last || l == 0.0);
            last = v;
        }
    }

    #[test]
    fn quantiles() {
        assert_abs_diff_eq!(chi2_quantile(3, 0.95).unwrap(), 7.814727903251178, epsilon = 1e-9);
        assert_abs_diff_eq!(chi2_quantile(1, 0.95).unwrap(), 3.841458820694124, epsilon = 1e-9);
        assert_abs_diff_eq!(chi2_quantile(2, 0.5).unwrap(), 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(chi2_quantile(4, 0.0).unwrap(), 0.0);
        let tiny = chi2_quantile(3, 1e-9).unwrap();
        assert!(tiny > 0.0 && (chi2_cdf(tiny, 3).unwrap() - 1e-9).abs() < 1e-15);
        assert_abs_diff_eq!(normal_quantile(0.975).unwrap(), 1.959963984540054, epsilon = 1e-12);
        assert_abs_diff_eq!(normal_quantile(0.025).unwrap(), -1.959963984540054, epsilon = 1e-12);
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
    }
}
