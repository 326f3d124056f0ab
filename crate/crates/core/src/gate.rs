//! Bias-detection test for the real-world stratum.

use nalgebra::{DMatrix, DVector};

use crate::asymptotics::special::{central_cdf, chi2_quantile};
use crate::error::{Error, Result};
use crate::model::PsiVector;
use crate::score::{symmetrize, ScoreContext, Stratum, VarianceBundle};

#[derive(Clone, Debug, PartialEq)]
pub struct GateResult {
    pub t_stat: f64,
    /// `n^{-1/2}` times the real-world score sum at the trial estimate.
    pub eta_hat: DVector<f64>,
    pub sigma_ss_hat: DMatrix<f64>,
    pub gamma: f64,
    pub c_gamma: f64,
    pub accepted: bool,
    /// `1 - F_p(T)`; diagnostic only, the decision uses `c_gamma`.
    pub p_value: f64,
}

impl GateResult {
    pub fn p(&self) -> usize {
        self.eta_hat.len()
    }

    /// The same statistic judged at a different level.
    pub fn at_gamma(&self, gamma: f64) -> Result<GateResult> {
        let c_gamma = threshold(self.p(), gamma)?;
        Ok(GateResult { gamma, c_gamma, accepted: decide(self.t_stat, c_gamma), ..self.clone() })
    }
}

/// `x' S^{-1} x` through a Cholesky solve.
pub fn quadratic_form(x: &DVector<f64>, s: &DMatrix<f64>) -> Result<f64> {
    let ch = symmetrize(s)
        .cholesky()
        .ok_or_else(|| Error::SingularInformation("Sigma_SS is not positive definite".into()))?;
    let sol = ch.solve(x);
    let q = x.dot(&sol);
    if !q.is_finite() {
        return Err(Error::SingularInformation("Sigma_SS is numerically singular".into()));
    }
    Ok(q.max(0.0))
}

/// `(T, eta_hat)` with `eta_hat = n^{-1/2} sum_{rw} S(psi_rt)`.
pub fn test_statistic(
    ctx: &ScoreContext<'_>,
    psi_rt: &PsiVector,
    bundle: &VarianceBundle,
) -> Result<(f64, DVector<f64>)> {
    let n = ctx.sample().n() as f64;
    let eta_hat = ctx.ee_sum(psi_rt, Stratum::RealWorldOnly) / n.sqrt();
    let t = quadratic_form(&eta_hat, &bundle.sigma_ss)?;
    Ok((t, eta_hat))
}

/// The `(1 - gamma)` quantile of the central chi-square with `p` degrees of freedom.
pub fn threshold(p: usize, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    chi2_quantile(p, 1.0 - gamma)
}

/// Accept the real-world data iff `T < c_gamma`; ties reject.
#[inline]
pub fn decide(t_stat: f64, c_gamma: f64) -> bool {
    t_stat < c_gamma
}

/// Run the full test at level `gamma`.
pub fn run_gate(
    ctx: &ScoreContext<'_>,
    psi_rt: &PsiVector,
    bundle: &VarianceBundle,
    gamma: f64,
) -> Result<GateResult> {
    let (t_stat, eta_hat) = test_statistic(ctx, psi_rt, bundle)?;
    let c_gamma = threshold(eta_hat.len(), gamma)?;
    Ok(GateResult {
        t_stat,
        p_value: 1.0 - central_cdf(t_stat, eta_hat.len() as f64),
        eta_hat,
        sigma_ss_hat: bundle.sigma_ss.clone(),
        gamma,
        c_gamma,
        accepted: decide(t_stat, c_gamma),
    })
}
