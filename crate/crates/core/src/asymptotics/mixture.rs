//! The limiting law of the scaled elastic estimator and its moments.
//!
//! With `Z2 ~ N(V_eff^{1/2} eta, I)` and `Z1 ~ N(Sigma_SS^{-1/2} eta, I)`
//! independent, `sqrt(n)(psi_elas - psi0)` converges to
//!
//! ```text
//!   V_eff^{1/2} Z2 - L Z1^t     with probability xi   (gate rejects)
//!   V_eff^{1/2} Z2              with probability 1-xi (gate accepts)
//! ```
//!
//! where `Z1^t` is `Z1` conditioned on `|Z1|^2 >= c_gamma`,
//! `xi = 1 - F_p(c_gamma; lambda)`, `lambda = eta' Sigma_SS^{-1} eta`, and
//! `L = V_eff Sigma_SS^{1/2}` is the factor of `V_rt - V_eff = L L'` that
//! carries the real-world score sum into the trial estimate.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::special::{central_cdf, noncentral_cdf};
use crate::error::{Error, Result};
use crate::gate::threshold;
use crate::score::{symmetrize, VarianceBundle};

/// Truncations whose acceptance probability falls below this are refused.
pub const MIN_ACCEPTANCE: f64 = 1e-6;

/// Symmetric square root with negative eigenvalues clipped at zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose()))
}

/// Symmetric inverse square root of a positive-definite matrix.
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    let max = eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|&v| !(v > 1e-14 * max.max(f64::MIN_POSITIVE))) {
        return Err(Error::SingularInformation("matrix is not positive definite".into()));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Ok(symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose())))
}

/// Parameters of the mixture law `M(gamma; eta)`.
#[derive(Clone, Debug)]
pub struct MixtureSpec {
    pub v_rt: DMatrix<f64>,
    pub v_eff: DMatrix<f64>,
    pub v_rt_minus_eff: DMatrix<f64>,
    pub sigma_ss: DMatrix<f64>,
    pub gamma: f64,
    pub eta: DVector<f64>,
    pub sqrt_v_eff: DMatrix<f64>,
    pub sqrt_v_rt_minus_eff: DMatrix<f64>,
    pub sqrt_sigma_ss: DMatrix<f64>,
    pub inv_sqrt_sigma_ss: DMatrix<f64>,
    /// `V_eff Sigma_SS^{1/2}`; its outer square is `V_rt - V_eff`.
    pub rt_minus_eff_factor: DMatrix<f64>,
    /// Gate threshold (`+inf` at `gamma = 0`, `0` at `gamma = 1`).
    pub c_gamma: f64,
    pub lambda: f64,
    /// Probability of the rejecting (trial-only) branch.
    pub xi: f64,
    pub mu1: DVector<f64>,
    pub mu2: DVector<f64>,
}

impl MixtureSpec {
    pub fn new(bundle: &VarianceBundle, gamma: f64, eta: DVector<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
        }
        let p = bundle.p();
        if eta.len() != p {
            return Err(Error::InvalidArgument(format!("eta has {} entries, expected {p}", eta.len())));
        }
        let c_gamma = if gamma == 0.0 {
            f64::INFINITY
        } else if gamma == 1.0 {
            0.0
        } else {
            threshold(p, gamma)?
        };
        let sqrt_sigma_ss = sym_sqrt(&bundle.sigma_ss);
        let inv_sqrt_sigma_ss = sym_inv_sqrt(&bundle.sigma_ss)?;
        let spec = MixtureSpec {
            v_rt: bundle.v_rt.clone(),
            v_eff: bundle.v_eff.clone(),
            v_rt_minus_eff: bundle.v_rt_minus_eff.clone(),
            sigma_ss: bundle.sigma_ss.clone(),
            gamma,
            sqrt_v_eff: sym_sqrt(&bundle.v_eff),
            sqrt_v_rt_minus_eff: sym_sqrt(&bundle.v_rt_minus_eff),
            rt_minus_eff_factor: &bundle.v_eff * &sqrt_sigma_ss,
            sqrt_sigma_ss,
            inv_sqrt_sigma_ss,
            c_gamma,
            lambda: 0.0,
            xi: 0.0,
            mu1: DVector::zeros(p),
            mu2: DVector::zeros(p),
            eta: DVector::zeros(p),
        };
        Ok(spec.with_eta(eta))
    }

    /// Same variances and `gamma`, different local parameter.
    pub fn with_eta(&self, eta: DVector<f64>) -> Self {
        let mut out = self.clone();
        out.mu1 = &self.inv_sqrt_sigma_ss * &eta;
        out.mu2 = &self.sqrt_v_eff * &eta;
        out.lambda = out.mu1.norm_squared();
        out.xi = 1.0 - noncentral_cdf(self.c_gamma, self.p() as f64, out.lambda);
        out.eta = eta;
        out
    }

    pub fn p(&self) -> usize {
        self.v_eff.nrows()
    }

    /// `F_k(c_gamma; lambda)`.
    fn cdf(&self, dof: usize) -> f64 {
        noncentral_cdf(self.c_gamma, dof as f64, self.lambda)
    }
}

/// Analytic bias vector and second-moment (MSE) matrix of `M(gamma; eta)`:
///
/// ```text
/// bias = V_eff eta F_{p+2}
/// mse  = V_eff + (V_rt - V_eff)(1 - F_{p+2}) + V_eff eta eta' V_eff (2 F_{p+2} - F_{p+4})
/// ```
///
/// with every `F_k = F_k(c_gamma; lambda)`. At `gamma = 0` this is
/// `(V_eff eta, V_eff + V_eff eta eta' V_eff)` and at `gamma = 1` it is `(0, V_rt)`.
pub fn analytic_bias_mse(spec: &MixtureSpec) -> (DVector<f64>, DMatrix<f64>) {
    let p = spec.p();
    let f2 = spec.cdf(p + 2);
    let f4 = spec.cdf(p + 4);
    let shift = &spec.v_eff * &spec.eta;
    let bias = &shift * f2;
    let mse = &spec.v_eff
        + &spec.v_rt_minus_eff * (1.0 - f2)
        + (&shift * shift.transpose()) * (2.0 * f2 - f4);
    (bias, symmetrize(&mse))
}

/// Pick the `gamma` in `grid` minimising the trace of the analytic MSE at
/// `eta_hat`; ties go to the smaller `gamma`.
pub fn select_gamma(bundle: &VarianceBundle, eta_hat: &DVector<f64>, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("gamma grid is empty".into()));
    }
    if let Some(g) = grid.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
        return Err(Error::InvalidArgument(format!("gamma grid value {g} outside (0, 1)")));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let base = MixtureSpec::new(bundle, sorted[0], eta_hat.clone())?;
    let mut best = (f64::INFINITY, sorted[0]);
    for &g in &sorted {
        let spec = MixtureSpec::new(bundle, g, eta_hat.clone()).unwrap_or_else(|_| base.clone());
        let risk = analytic_bias_mse(&spec).1.trace();
        if risk < best.0 {
            best = (risk, g);
        }
    }
    Ok(best.1)
}

/// Draws from `N(mu1, I)` conditioned on `|z|^2 >= c`, by rejection.
#[derive(Clone, Debug)]
pub struct TruncatedDraws {
    /// Row-major, `count x p`.
    pub draws: Vec<f64>,
    pub p: usize,
    pub proposals: u64,
}

impl TruncatedDraws {
    pub fn acceptance_rate(&self) -> f64 {
        (self.draws.len() / self.p) as f64 / self.proposals as f64
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.draws[i * self.p..(i + 1) * self.p]
    }
}

fn truncation_acceptance(mu1: &DVector<f64>, c: f64) -> f64 {
    1.0 - noncentral_cdf(c, mu1.len() as f64, mu1.norm_squared())
}

fn draw_truncated_into<R: Rng>(rng: &mut R, mu1: &DVector<f64>, c: f64, out: &mut [f64]) -> u64 {
    let mut proposals = 0;
    loop {
        proposals += 1;
        let mut norm2 = 0.0;
        for (o, m) in out.iter_mut().zip(mu1.iter()) {
            *o = m + rng.sample::<f64, _>(StandardNormal);
            norm2 += *o * *o;
        }
        if norm2 >= c {
            return proposals;
        }
    }
}

/// `count` draws of `N(mu1, I_p)` restricted to `|z|^2 >= c`.
pub fn sample_truncated(mu1: &DVector<f64>, c: f64, count: usize, seed: u64) -> Result<TruncatedDraws> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_truncated_with(&mut rng, mu1, c, count)
}

pub fn sample_truncated_with<R: Rng>(
    rng: &mut R,
    mu1: &DVector<f64>,
    c: f64,
    count: usize,
) -> Result<TruncatedDraws> {
    if c.is_nan() || c < 0.0 {
        return Err(Error::InvalidArgument(format!("truncation level must be >= 0, got {c}")));
    }
    let acc = truncation_acceptance(mu1, c);
    if acc < MIN_ACCEPTANCE {
        return Err(Error::InfeasibleTruncation(acc));
    }
    let p = mu1.len();
    let mut draws = vec![0.0; count * p];
    let mut proposals = 0;
    for row in draws.chunks_mut(p.max(1)) {
        proposals += draw_truncated_into(rng, mu1, c, row);
    }
    Ok(TruncatedDraws { draws, p, proposals })
}

/// Draws from `M(gamma; eta)`.
#[derive(Clone, Debug)]
pub struct MixtureDraws {
    /// `count x p`.
    pub draws: DMatrix<f64>,
    /// True where the draw came from the rejecting (truncated) branch.
    pub component_flags: Vec<bool>,
    pub seed: u64,
    pub proposals: u64,
}

impl MixtureDraws {
    pub fn count(&self) -> usize {
        self.draws.nrows()
    }

    pub fn truncated_fraction(&self) -> f64 {
        self.component_flags.iter().filter(|&&f| f).count() as f64 / self.count() as f64
    }

    pub fn mean(&self) -> DVector<f64> {
        self.draws.row_mean().transpose()
    }

    /// `mean of d d'` over draws.
    pub fn second_moment(&self) -> DMatrix<f64> {
        self.draws.transpose() * &self.draws / self.count() as f64
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.draws.column(k).iter().copied().collect()
    }
}

/// Mixture sampler with common random numbers: the branch uniforms and the
/// `Z2` innovations are drawn once and reused for every spec passed to
/// [`MixtureSampler::draw`], and the truncated component restarts the same
/// random stream each time.
#[derive(Clone, Debug)]
pub struct MixtureSampler {
    p: usize,
    seed: u64,
    uniforms: Vec<f64>,
    innovations: Vec<f64>,
}

impl MixtureSampler {
    pub fn new(p: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uniforms = (0..count).map(|_| rng.random::<f64>()).collect();
        let innovations = (0..count * p).map(|_| rng.sample(StandardNormal)).collect();
        MixtureSampler { p, seed, uniforms, innovations }
    }

    pub fn count(&self) -> usize {
        self.uniforms.len()
    }

    pub fn draw(&self, spec: &MixtureSpec) -> Result<MixtureDraws> {
        let p = self.p;
        if spec.p() != p {
            return Err(Error::InvalidArgument("sampler and spec dimensions differ".into()));
        }
        let count = self.count();
        let mut trunc_rng = ChaCha8Rng::seed_from_u64(self.seed);
        trunc_rng.set_stream(1);
        let needs_truncation = self.uniforms.iter().any(|&u| u < spec.xi);
        if needs_truncation {
            let acc = truncation_acceptance(&spec.mu1, spec.c_gamma);
            if acc < MIN_ACCEPTANCE {
                return Err(Error::InfeasibleTruncation(acc));
            }
        }

        let mut draws = DMatrix::zeros(count, p);
        let mut flags = Vec::with_capacity(count);
        let mut proposals = 0;
        let mut z2 = vec![0.0; p];
        let mut z1 = vec![0.0; p];
        let mut out = vec![0.0; p];
        for i in 0..count {
            for k in 0..p {
                z2[k] = spec.mu2[k] + self.innovations[i * p + k];
            }
            for r in 0..p {
                out[r] = (0..p).map(|c| spec.sqrt_v_eff[(r, c)] * z2[c]).sum();
            }
            let truncated = self.uniforms[i] < spec.xi;
            if truncated {
                proposals += draw_truncated_into(&mut trunc_rng, &spec.mu1, spec.c_gamma, &mut z1);
                for r in 0..p {
                    out[r] -= (0..p).map(|c| spec.rt_minus_eff_factor[(r, c)] * z1[c]).sum::<f64>();
                }
            }
            for k in 0..p {
                draws[(i, k)] = out[k];
            }
            flags.push(truncated);
        }
        Ok(MixtureDraws { draws, component_flags: flags, seed: self.seed, proposals })
    }
}

pub fn sample_mixture(spec: &MixtureSpec, count: usize, seed: u64) -> Result<MixtureDraws> {
    if count == 0 {
        return Err(Error::InvalidArgument("need at least one mixture draw".into()));
    }
    MixtureSampler::new(spec.p(), count, seed).draw(spec)
}

/// Type-7 (linear interpolation) sample quantile. Reorders `values`.
pub fn quantile_type7(values: &mut [f64], prob: f64) -> f64 {
    let n = values.len();
    assert!(n > 0, "quantile of an empty sample");
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let (_, &mut at_lo, right) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || right.is_empty() {
        return at_lo;
    }
    let at_hi = right.iter().copied().fold(f64::INFINITY, f64::min);
    at_lo + frac * (at_hi - at_lo)
}

/// The `prob` quantile of coordinate `k` of the draws.
pub fn mixture_quantile(draws: &MixtureDraws, k: usize, prob: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {prob} outside (0, 1)")));
    }
    if k >= draws.draws.ncols() {
        return Err(Error::InvalidArgument(format!("coordinate {k} out of range")));
    }
    Ok(quantile_type7(&mut draws.column(k), prob))
}

/// Densities on a regular grid, for plotting the mixture and its branches.
#[derive(Clone, Debug, Serialize)]
pub struct DensityGrid {
    pub x: Vec<f64>,
    pub mixture: Vec<f64>,
    pub truncated_branch: Vec<f64>,
    pub normal_branch: Vec<f64>,
}

/// Histogram-based density estimates of coordinate `k`, each branch
/// normalised to integrate to one on its own.
pub fn density_grid(draws: &MixtureDraws, k: usize, bins: usize) -> DensityGrid {
    let col = draws.column(k);
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut all = vec![0.0; bins];
    let mut trunc = vec![0.0; bins];
    let mut normal = vec![0.0; bins];
    for (v, &flag) in col.iter().zip(&draws.component_flags) {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        all[b] += 1.0;
        if flag {
            trunc[b] += 1.0;
        } else {
            normal[b] += 1.0;
        }
    }
    let norm = |h: &mut Vec<f64>| {
        let total: f64 = h.iter().sum();
        if total > 0.0 {
            h.iter_mut().for_each(|v| *v /= total * width);
        }
    };
    norm(&mut all);
    norm(&mut trunc);
    norm(&mut normal);
    DensityGrid {
        x: (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect(),
        mixture: all,
        truncated_branch: trunc,
        normal_branch: normal,
    }
}

/// `F_p(c)` for the central law, exposed for reporting.
pub fn central_acceptance(p: usize, c: f64) -> f64 {
    central_cdf(c, p as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_bundle() -> VarianceBundle {
        let one = DMatrix::from_element(1, 1, 1.0);
        VarianceBundle::from_information(one.clone(), one, 1.0).unwrap()
    }

    fn bundle3() -> VarianceBundle {
        let i_rt = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, -0.1, 0.2, 0.8, 0.05, -0.1, 0.05, 0.6]);
        let i_rw = DMatrix::from_row_slice(3, 3, &[2.0, -0.3, 0.1, -0.3, 1.5, 0.2, 0.1, 0.2, 1.2]);
        VarianceBundle::from_information(i_rt, i_rw, 0.3).unwrap()
    }

    #[test]
    fn square_roots() {
        let b = bundle3();
        let r = sym_sqrt(&b.v_eff);
        assert!((&r * &r - &b.v_eff).amax() < 1e-10);
        let spec = MixtureSpec::new(&b, 0.3, DVector::zeros(3)).unwrap();
        let l = &spec.rt_minus_eff_factor;
        assert!((l * l.transpose() - &b.v_rt_minus_eff).amax() < 1e-10);
        let s = &spec.inv_sqrt_sigma_ss;
        assert!((s * &b.sigma_ss * s - DMatrix::identity(3, 3)).amax() < 1e-10);
        let clipped = sym_sqrt(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]));
        assert_eq!(clipped[(1, 1)], 0.0);
    }

    #[test]
    fn truncation_off_gives_plain_normals() {
        let t = sample_truncated(&DVector::zeros(2), 0.0, 1000, 4).unwrap();
        assert_eq!(t.acceptance_rate(), 1.0);
    }

    #[test]
    fn scalar_truncation_rate() {
        let count = 20_000;
        let t = sample_truncated(&DVector::zeros(1), 1.0, count, 8).unwrap();
        let expected = 0.3173105078629141;
        let sd = (expected * (1.0 - expected) / t.proposals as f64).sqrt();
        assert!((t.acceptance_rate() - expected).abs() < 3.0 * sd);
        assert!(t.draws.iter().all(|v| v * v >= 1.0));
    }

    #[test]
    fn infeasible_truncation_is_refused() {
        let err = sample_truncated(&DVector::zeros(2), 60.0, 10, 1).unwrap_err();
        assert!(matches!(err, Error::InfeasibleTruncation(a) if a < MIN_ACCEPTANCE));
        assert!(sample_truncated(&DVector::zeros(2), -1.0, 10, 1).is_err());
    }

    #[test]
    fn endpoints_of_the_analytic_moments() {
        let b = bundle3();
        let eta = DVector::from_vec(vec![0.7, -1.2, 0.4]);
        let (bias, mse) = analytic_bias_mse(&MixtureSpec::new(&b, 0.0, eta.clone()).unwrap());
        let shift = &b.v_eff * &eta;
        assert!((&bias - &shift).amax() < 1e-12);
        assert!((&mse - (&b.v_eff + &shift * shift.transpose())).amax() < 1e-12);

        let (bias, mse) = analytic_bias_mse(&MixtureSpec::new(&b, 1.0, eta).unwrap());
        assert!(bias.amax() < 1e-12);
        assert!((&mse - &b.v_rt).amax() < 1e-12);

        let (bias, _) = analytic_bias_mse(&MixtureSpec::new(&b, 0.4, DVector::zeros(3)).unwrap());
        assert_eq!(bias.amax(), 0.0);
    }

    #[test]
    fn null_mse_sits_between_efficient_and_trial_variances() {
        let b = bundle3();
        for g in [0.05, 0.2, 0.5, 0.8, 0.95] {
            let (_, mse) = analytic_bias_mse(&MixtureSpec::new(&b, g, DVector::zeros(3)).unwrap());
            assert!(mse.trace() >= b.v_eff.trace() - 1e-12);
            assert!(mse.trace() <= b.v_rt.trace() + 1e-12);
        }
    }

    #[test]
    fn null_branch_probability_is_gamma() {
        let spec = MixtureSpec::new(&bundle3(), 0.23, DVector::zeros(3)).unwrap();
        assert_abs_diff_eq!(spec.xi, 0.23, epsilon = 1e-10);
    }

    #[test]
    fn scalar_mixture_matches_analytic_moments() {
        let spec = MixtureSpec::new(&scalar_bundle(), 0.8, DVector::from_element(1, 1.0)).unwrap();
        let draws = sample_mixture(&spec, 400_000, 21).unwrap();
        let (bias, mse) = analytic_bias_mse(&spec);
        let col = draws.column(0);
        let m = col.len() as f64;
        let mean = col.iter().sum::<f64>() / m;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        assert!((mean - bias[0]).abs() < 3.0 * sd / m.sqrt(), "{mean} vs {}", bias[0]);
        let sq: Vec<f64> = col.iter().map(|v| v * v).collect();
        let msq = sq.iter().sum::<f64>() / m;
        let sd_sq = (sq.iter().map(|v| (v - msq).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        assert!((msq - mse[(0, 0)]).abs() < 3.0 * sd_sq / m.sqrt(), "{msq} vs {}", mse[(0, 0)]);
    }

    #[test]
    fn no_truncation_gives_trial_variance() {
        let b = bundle3();
        let spec = MixtureSpec::new(&b, 1.0, DVector::zeros(3)).unwrap();
        let draws = sample_mixture(&spec, 100_000, 3).unwrap();
        assert_eq!(draws.truncated_fraction(), 1.0);
        let cov = draws.second_moment();
        for k in 0..3 {
            assert!((cov[(k, k)] / b.v_rt[(k, k)] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn common_random_numbers_are_reused() {
        let b = bundle3();
        let sampler = MixtureSampler::new(3, 2000, 77);
        let s1 = MixtureSpec::new(&b, 0.3, DVector::zeros(3)).unwrap();
        let a = sampler.draw(&s1).unwrap();
        let again = sampler.draw(&s1).unwrap();
        assert_eq!(a.draws, again.draws);
        let direct = sample_mixture(&s1, 2000, 77).unwrap();
        assert_eq!(a.draws, direct.draws);
        // accepting-branch draws only depend on eta through mu2
        let s2 = s1.with_eta(DVector::from_vec(vec![0.5, 0.0, 0.0]));
        let b2 = sampler.draw(&s2).unwrap();
        for i in 0..2000 {
            if !a.component_flags[i] && !b2.component_flags[i] {
                let d = (a.draws.row(i) - b2.draws.row(i)).transpose();
                let shift = &s2.sqrt_v_eff * &s2.mu2;
                assert!((d + shift).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn quantile_rules() {
        let mut v = vec![3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile_type7(&mut v.clone(), 0.5), 2.5);
        assert_eq!(quantile_type7(&mut v.clone(), 0.0), 1.0);
        assert_eq!(quantile_type7(&mut v, 1.0), 4.0);
        let spec = MixtureSpec::new(&scalar_bundle(), 0.4, DVector::zeros(1)).unwrap();
        let d = sample_mixture(&spec, 50_000, 5).unwrap();
        let mut last = f64::NEG_INFINITY;
        for a in [0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let q = mixture_quantile(&d, 0, a).unwrap();
            assert!(q >= last);
            last = q;
        }
        let med = mixture_quantile(&d, 0, 0.5).unwrap();
        // density near zero is positive; SE of the median is about 1.25 sd / sqrt(M)
        assert!(med.abs() < 3.0 * 1.26 * 0.85 / (50_000f64).sqrt());
        assert!(mixture_quantile(&d, 0, 1.0).is_err());
    }

    #[test]
    fn gamma_selection_at_zero_eta_is_the_smallest() {
        let grid = [0.5, 0.1, 0.3, 0.9];
        assert_eq!(select_gamma(&bundle3(), &DVector::zeros(3), &grid).unwrap(), 0.1);
        assert!(select_gamma(&bundle3(), &DVector::zeros(3), &[]).is_err());
        assert!(select_gamma(&bundle3(), &DVector::zeros(3), &[0.0, 0.5]).is_err());
    }

    #[test]
    fn gamma_selection_at_large_eta_prefers_large_gamma() {
        let grid: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
        let b = scalar_bundle();
        assert_eq!(select_gamma(&b, &DVector::from_element(1, 0.5), &grid).unwrap(), 0.05);
        assert_eq!(select_gamma(&b, &DVector::from_element(1, 3.0), &grid).unwrap(), 0.95);
    }
}
