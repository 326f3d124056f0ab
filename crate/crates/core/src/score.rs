//! The semiparametric efficiency score
//! `S(V) = q*(X, delta) {H - mu_delta(X)} {A - e_delta(X)}` with
//! `q* = d tau / d psi / sigma^2_delta(X)`, its stratum sums and Jacobians,
//! and the information matrices that drive the gate and the mixture law.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{dot, CombinedSample, HteKind, HteModel, PsiVector, Source};
use crate::nuisance::{NuisanceFit, NuisanceValues, TrialPropensity};

/// Which records enter an estimating-equation sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stratum {
    TrialOnly,
    RealWorldOnly,
    Pooled,
    /// Trial records, plus the real-world records when the flag is set.
    Elastic(bool),
}

impl Stratum {
    #[inline]
    pub fn includes(self, source: Source) -> bool {
        match (self, source) {
            (Stratum::Pooled, _) => true,
            (Stratum::TrialOnly, s) | (Stratum::Elastic(false), s) => s == Source::Trial,
            (Stratum::RealWorldOnly, s) => s == Source::RealWorld,
            (Stratum::Elastic(true), _) => true,
        }
    }
}

/// Score of a single observation from its ingredients.
#[allow(clippy::too_many_arguments)]
pub fn ses_value(
    kind: HteKind,
    psi: &DVector<f64>,
    z: &[f64],
    a: f64,
    y: f64,
    e: f64,
    mu: f64,
    sigma2: f64,
) -> DVector<f64> {
    let s = dot(z, psi);
    let weight = kind.slope(s) / sigma2 * (y - kind.value(s) * a - mu) * (a - e);
    DVector::from_iterator(z.len(), z.iter().map(|v| v * weight))
}

/// A model, a sample, and per-record nuisance values.
#[derive(Clone, Debug)]
pub struct ScoreContext<'a> {
    pub model: HteModel,
    sample: &'a CombinedSample,
    values: NuisanceValues,
}

impl<'a> ScoreContext<'a> {
    pub fn new(model: HteModel, nuisance: &NuisanceFit, sample: &'a CombinedSample) -> Result<Self> {
        Self::from_values(model, sample, nuisance.predict(sample))
    }

    /// Use externally supplied nuisance values (e.g. the true functions of a
    /// simulation). Values are used as given, without clipping.
    pub fn from_values(
        model: HteModel,
        sample: &'a CombinedSample,
        values: NuisanceValues,
    ) -> Result<Self> {
        if model.p != sample.p() {
            return Err(Error::InvalidArgument(format!(
                "model has {} parameters but the sample has {} effect modifiers",
                model.p,
                sample.p()
            )));
        }
        let len = sample.len();
        if values.e.len() != len || values.mu.len() != len || values.sigma2.len() != len {
            return Err(Error::InvalidArgument("nuisance values not aligned with sample".into()));
        }
        if values.sigma2.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("outcome variances must be positive".into()));
        }
        Ok(ScoreContext { model, sample, values })
    }

    /// The working score of the preliminary trial fit: `mu = 0`,
    /// `sigma^2 = 1` and the known trial propensity, which reduces the trial
    /// sum to `sum dtau/dpsi {A - e1(X)} H`.
    pub fn preliminary(
        model: HteModel,
        sample: &'a CombinedSample,
        e1: &TrialPropensity,
    ) -> Result<Self> {
        e1.validate(sample)?;
        let len = sample.len();
        let e = (0..len)
            .map(|i| if sample.records()[i].is_trial() { e1.at(i) } else { 0.5 })
            .collect();
        Self::from_values(
            model,
            sample,
            NuisanceValues { e, mu: vec![0.0; len], sigma2: vec![1.0; len] },
        )
    }

    pub fn sample(&self) -> &'a CombinedSample {
        self.sample
    }

    pub fn values(&self) -> &NuisanceValues {
        &self.values
    }

    pub fn p(&self) -> usize {
        self.model.p
    }

    /// Score of record `i` at `psi`.
    pub fn ses(&self, psi: &PsiVector, i: usize) -> DVector<f64> {
        let r = &self.sample.records()[i];
        ses_value(
            self.model.kind,
            &psi.0,
            self.sample.z(i),
            r.a(),
            r.y,
            self.values.e[i],
            self.values.mu[i],
            self.values.sigma2[i],
        )
    }

    fn each<F: FnMut(usize)>(&self, stratum: Stratum, mut f: F) {
        for (i, r) in self.sample.records().iter().enumerate() {
            if stratum.includes(r.source) {
                f(i)
            }
        }
    }

    /// Sum of scores over the records of `stratum`.
    pub fn ee_sum(&self, psi: &PsiVector, stratum: Stratum) -> DVector<f64> {
        let p = self.p();
        let mut acc = DVector::zeros(p);
        self.each(stratum, |i| {
            let r = &self.sample.records()[i];
            let z = self.sample.z(i);
            let s = dot(z, &psi.0);
            let w = self.model.kind.slope(s) / self.values.sigma2[i]
                * (r.y - self.model.kind.value(s) * r.a() - self.values.mu[i])
                * (r.a() - self.values.e[i]);
            for k in 0..p {
                acc[k] += z[k] * w;
            }
        });
        acc
    }

    /// Derivative of [`Self::ee_sum`] with respect to `psi`.
    ///
    /// Per record: `(A - e)/sigma^2 [tau''(s) (H - mu) z z' - A tau'(s)^2 z z']`.
    pub fn ee_jacobian(&self, psi: &PsiVector, stratum: Stratum) -> DMatrix<f64> {
        let p = self.p();
        let kind = self.model.kind;
        let mut jac = DMatrix::zeros(p, p);
        self.each(stratum, |i| {
            let r = &self.sample.records()[i];
            let z = self.sample.z(i);
            let s = dot(z, &psi.0);
            let a = r.a();
            let slope = kind.slope(s);
            let resid = r.y - kind.value(s) * a - self.values.mu[i];
            let w = (a - self.values.e[i]) / self.values.sigma2[i]
                * (kind.curvature(s) * resid - a * slope * slope);
            for j in 0..p {
                for k in 0..p {
                    jac[(j, k)] += w * z[j] * z[k];
                }
            }
        });
        jac
    }

    /// `sum S S'` over the records of `stratum`.
    pub fn outer_sum(&self, psi: &PsiVector, stratum: Stratum) -> DMatrix<f64> {
        let p = self.p();
        let mut acc = DMatrix::zeros(p, p);
        self.each(stratum, |i| {
            let s = self.ses(psi, i);
            acc.ger(1.0, &s, &s, 1.0);
        });
        acc
    }

    /// Sandwich covariance of the root of the `stratum` equation on the
    /// `psi` scale, treating the nuisance values as fixed.
    pub fn sandwich(&self, psi: &PsiVector, stratum: Stratum) -> Result<DMatrix<f64>> {
        let bread = self.ee_jacobian(psi, stratum);
        let meat = self.outer_sum(psi, stratum);
        let inv = bread.try_inverse().ok_or_else(|| {
            Error::SingularInformation("estimating-equation Jacobian is singular".into())
        })?;
        Ok(symmetrize(&(&inv * meat * inv.transpose())))
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let ch = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::SingularInformation(format!("{what} is not positive definite")))?;
    let inv = ch.inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularInformation(format!("{what} is numerically singular")));
    }
    Ok(symmetrize(&inv))
}

/// Information and asymptotic variance matrices, all on the `sqrt(n)` scale
/// with `n` the real-world size.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceBundle {
    pub i_rt: DMatrix<f64>,
    pub i_rw: DMatrix<f64>,
    /// Asymptotic variance of the scaled real-world score sum at the trial
    /// estimate: `Gamma' I_rt Gamma + I_rw`.
    pub sigma_ss: DMatrix<f64>,
    /// `I_rt^{-1} I_rw rho^{-1/2}` (not symmetric in general).
    pub gamma_mat: DMatrix<f64>,
    /// `(rho I_rt)^{-1}`
    pub v_rt: DMatrix<f64>,
    /// `(rho I_rt + I_rw)^{-1}`
    pub v_eff: DMatrix<f64>,
    pub v_rt_minus_eff: DMatrix<f64>,
    pub rho: f64,
}

impl VarianceBundle {
    /// Outer-product information estimates at `psi_hat` and everything
    /// derived from them.
    pub fn compute(ctx: &ScoreContext<'_>, psi_hat: &PsiVector) -> Result<Self> {
        let s = ctx.sample();
        let i_rt = ctx.outer_sum(psi_hat, Stratum::TrialOnly) / s.m() as f64;
        let i_rw = ctx.outer_sum(psi_hat, Stratum::RealWorldOnly) / s.n() as f64;
        Self::from_information(i_rt, i_rw, s.rho())
    }

    pub fn from_information(i_rt: DMatrix<f64>, i_rw: DMatrix<f64>, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
        }
        if i_rt.shape() != i_rw.shape() || !i_rt.is_square() {
            return Err(Error::InvalidArgument("information matrices must be p x p".into()));
        }
        let i_rt = symmetrize(&i_rt);
        let i_rw = symmetrize(&i_rw);
        let i_rt_inv = spd_inverse(&i_rt, "trial information")?;
        let gamma_mat = &i_rt_inv * &i_rw / rho.sqrt();
        let sigma_ss = symmetrize(&(gamma_mat.transpose() * &i_rt * &gamma_mat + &i_rw));
        let v_rt = &i_rt_inv / rho;
        let v_eff = spd_inverse(&(&i_rt * rho + &i_rw), "pooled information")?;
        let v_rt_minus_eff = symmetrize(&(&v_rt - &v_eff));
        Ok(VarianceBundle { i_rt, i_rw, sigma_ss, gamma_mat, v_rt, v_eff, v_rt_minus_eff, rho })
    }

    pub fn p(&self) -> usize {
        self.i_rt.nrows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Record;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::sync::Arc;

    fn random_sample(seed: u64, rt: usize, rw: usize) -> CombinedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Arc<[usize]> = vec![0, 1, 2].into();
        let records = (0..rt + rw)
            .map(|i| {
                let src = if i < rt { Source::Trial } else { Source::RealWorld };
                let x1: f64 = rng.sample(StandardNormal);
                let x2: f64 = rng.sample(StandardNormal);
                let a = rng.random::<f64>() < 0.5;
                let y = if a { 0.3 } else { 0.0 } + x1 + 0.5 * rng.sample::<f64, _>(StandardNormal);
                Record::new(src, a, y, vec![1.0, x1, x2], z.clone()).unwrap()
            })
            .collect();
        CombinedSample::new(records).unwrap()
    }

    fn random_values(seed: u64, len: usize) -> NuisanceValues {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NuisanceValues {
            e: (0..len).map(|_| rng.random_range(0.2..0.8)).collect(),
            mu: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            sigma2: (0..len).map(|_| rng.random_range(0.5..2.0)).collect(),
        }
    }

    #[test]
    fn score_vanishes_with_either_factor() {
        let psi = DVector::from_vec(vec![0.4, -0.1]);
        let z = [1.0, 2.0];
        let v = ses_value(HteKind::Linear, &psi, &z, 1.0, 3.0, 1.0, 0.2, 1.0);
        assert_eq!(v.norm(), 0.0);
        let v = ses_value(HteKind::RiskDifference, &psi, &z, 0.0, 0.7, 0.3, 0.7, 0.21);
        assert_eq!(v.norm(), 0.0);
    }

    #[test]
    fn stratum_sums_partition() {
        let s = random_sample(1, 40, 60);
        let model = HteModel::new(HteKind::Linear, 3).unwrap();
        let ctx = ScoreContext::from_values(model, &s, random_values(2, s.len())).unwrap();
        let psi = PsiVector::new(vec![0.2, 0.1, -0.3]).unwrap();
        let rt = ctx.ee_sum(&psi, Stratum::TrialOnly);
        let rw = ctx.ee_sum(&psi, Stratum::RealWorldOnly);
        let pooled = ctx.ee_sum(&psi, Stratum::Pooled);
        assert!((&rt + &rw - &pooled).norm() < 1e-12);
        assert_eq!(ctx.ee_sum(&psi, Stratum::Elastic(true)), pooled);
        assert_eq!(ctx.ee_sum(&psi, Stratum::Elastic(false)), rt);
        let by_record: DVector<f64> =
            (0..s.len()).map(|i| ctx.ses(&psi, i)).fold(DVector::zeros(3), |a, b| a + b);
        assert!((by_record - pooled).norm() < 1e-12);
    }

    #[test]
    fn linear_jacobian_is_constant() {
        let s = random_sample(3, 30, 30);
        let model = HteModel::new(HteKind::Linear, 3).unwrap();
        let ctx = ScoreContext::from_values(model, &s, random_values(4, s.len())).unwrap();
        let j1 = ctx.ee_jacobian(&PsiVector::zeros(3), Stratum::Pooled);
        let j2 = ctx.ee_jacobian(&PsiVector::new(vec![5.0, -2.0, 1.0]).unwrap(), Stratum::Pooled);
        assert!((j1 - j2).norm() < 1e-12);
    }

    #[test]
    fn single_record_jacobian() {
        let z: Arc<[usize]> = vec![0, 1].into();
        let rt = Record::new(Source::Trial, true, 1.0, vec![1.0, 2.0], z.clone()).unwrap();
        let rw = Record::new(Source::RealWorld, false, 1.0, vec![1.0, 2.0], z).unwrap();
        let s = CombinedSample::new(vec![rt, rw]).unwrap();
        let model = HteModel::new(HteKind::Linear, 2).unwrap();
        let values = NuisanceValues { e: vec![0.5, 0.5], mu: vec![0.0; 2], sigma2: vec![1.0; 2] };
        let ctx = ScoreContext::from_values(model, &s, values).unwrap();
        let jac = ctx.ee_jacobian(&PsiVector::zeros(2), Stratum::TrialOnly);
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]) * -0.5;
        assert!((jac - want).norm() < 1e-15);
    }

    fn fd_jacobian(ctx: &ScoreContext<'_>, psi: &PsiVector, stratum: Stratum) -> DMatrix<f64> {
        let p = psi.len();
        let h = 1e-6;
        let mut out = DMatrix::zeros(p, p);
        for k in 0..p {
            let mut up = psi.0.clone();
            let mut dn = psi.0.clone();
            up[k] += h;
            dn[k] -= h;
            let col = (ctx.ee_sum(&PsiVector(up), stratum) - ctx.ee_sum(&PsiVector(dn), stratum))
                / (2.0 * h);
            out.set_column(k, &col);
        }
        out
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let s = random_sample(7, 50, 50);
        for kind in [HteKind::Linear, HteKind::RiskDifference] {
            let model = HteModel::new(kind, 3).unwrap();
            let ctx = ScoreContext::from_values(model, &s, random_values(8, s.len())).unwrap();
            let psi = PsiVector::new(vec![0.3, -0.4, 0.2]).unwrap();
            for stratum in [Stratum::TrialOnly, Stratum::Pooled] {
                let a = ctx.ee_jacobian(&psi, stratum);
                let b = fd_jacobian(&ctx, &psi, stratum);
                assert!((&a - &b).norm() / a.norm() < 1e-5, "{kind:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn scalar_bundle() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let b = VarianceBundle::from_information(one.clone(), one, 1.0).unwrap();
        assert_abs_diff_eq!(b.v_rt[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.v_eff[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(b.sigma_ss[(0, 0)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.gamma_mat[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.v_rt_minus_eff[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn singular_trial_information_is_reported() {
        let zero = DMatrix::zeros(2, 2);
        let eye = DMatrix::identity(2, 2);
        assert!(matches!(
            VarianceBundle::from_information(zero, eye, 1.0),
            Err(Error::SingularInformation(_))
        ));
    }

    #[test]
    fn bundle_from_sample_is_consistent() {
        let s = random_sample(9, 80, 120);
        let model = HteModel::new(HteKind::Linear, 3).unwrap();
        let ctx = ScoreContext::from_values(model, &s, random_values(10, s.len())).unwrap();
        let b = VarianceBundle::compute(&ctx, &PsiVector::zeros(3)).unwrap();
        assert_abs_diff_eq!(b.rho, 80.0 / 120.0);
        let rebuilt = b.gamma_mat.transpose() * &b.i_rt * &b.gamma_mat + &b.i_rw;
        assert!((rebuilt - &b.sigma_ss).amax() < 1e-12);
        for m in [&b.i_rt, &b.i_rw, &b.sigma_ss, &b.v_rt, &b.v_eff, &b.v_rt_minus_eff] {
            assert!((m - m.transpose()).amax() < 1e-10);
        }
    }

    fn spd(entries: &[f64], p: usize, shift: f64) -> DMatrix<f64> {
        let a = DMatrix::from_row_slice(p, p, entries);
        &a * a.transpose() + DMatrix::identity(p, p) * shift
    }

    proptest! {
        #[test]
        fn rt_minus_eff_is_psd(
            a in proptest::collection::vec(-1.0f64..1.0, 9),
            b in proptest::collection::vec(-1.0f64..1.0, 9),
            rho in 0.05f64..5.0,
        ) {
            let bundle = VarianceBundle::from_information(spd(&a, 3, 0.1), spd(&b, 3, 0.05), rho).unwrap();
            let diff = &bundle.v_rt_minus_eff + DMatrix::identity(3, 3) * 1e-10;
            prop_assert!(diff.cholesky().is_some());
            let mut ev_rt: Vec<f64> = bundle.v_rt.clone().symmetric_eigenvalues().iter().copied().collect();
            let mut ev_eff: Vec<f64> = bundle.v_eff.clone().symmetric_eigenvalues().iter().copied().collect();
            ev_rt.sort_by(f64::total_cmp);
            ev_eff.sort_by(f64::total_cmp);
            for (r, e) in ev_rt.iter().zip(&ev_eff) {
                prop_assert!(e <= &(r + 1e-10));
            }
            let rebuilt = bundle.gamma_mat.transpose() * &bundle.i_rt * &bundle.gamma_mat + &bundle.i_rw;
            prop_assert!((rebuilt - &bundle.sigma_ss).amax() < 1e-12 * bundle.sigma_ss.amax().max(1.0));
        }

        #[test]
        fn score_is_linear_in_outcome_residual(c in -3.0f64..3.0, y in -2.0f64..2.0, mu in -1.0f64..1.0) {
            let psi = DVector::from_vec(vec![0.2, 0.5]);
            let z = [1.0, -0.7];
            // H - mu scales by c when y is shifted accordingly
            let tau = HteKind::RiskDifference.value(dot(&z, &psi));
            let base = ses_value(HteKind::RiskDifference, &psi, &z, 1.0, y, 0.4, mu, 0.8);
            let resid = y - tau - mu;
            let scaled_y = mu + tau + c * resid;
            let scaled = ses_value(HteKind::RiskDifference, &psi, &z, 1.0, scaled_y, 0.4, mu, 0.8);
            prop_assert!((scaled - base * c).norm() < 1e-12);
        }
    }
}
