//! Z-estimation of the HTE parameter: the trial-only estimator, the
//! efficient integrative estimator, the covariate-adjustment comparator and
//! the elastic estimator, with sandwich and bootstrap variances.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::mixture::select_gamma;
use crate::error::{Error, Result};
use crate::gate::{run_gate, GateResult};
use crate::model::{CombinedSample, HteKind, HteModel, PsiVector, Source};
use crate::nuisance::{fit_nuisance, BasisSpec, NuisanceFit, NuisanceValues, TrialPropensity};
use crate::score::{symmetrize, ScoreContext, Stratum, VarianceBundle};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// Converged once the Euclidean norm of the equation falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-8, max_iter: 100, max_halvings: 20 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub psi: PsiVector,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Damped Newton iteration for `equation(psi) = 0`. A step is halved until
/// the equation norm decreases.
pub fn solve_z<F, J>(equation: F, jacobian: J, init: PsiVector, opts: &SolverOptions) -> Result<Solution>
where
    F: Fn(&PsiVector) -> DVector<f64>,
    J: Fn(&PsiVector) -> DMatrix<f64>,
{
    let mut psi = init;
    let mut f = equation(&psi);
    let mut norm = f.norm();
    let fail = |psi: &PsiVector, iterations| Error::ConvergenceFailure {
        what: "Newton solver",
        iterations,
        last_iterate: psi.as_slice().to_vec(),
    };
    for iter in 0..=opts.max_iter {
        if !norm.is_finite() {
            return Err(fail(&psi, iter));
        }
        if norm < opts.tol {
            return Ok(Solution { psi, iterations: iter, residual_norm: norm });
        }
        if iter == opts.max_iter {
            break;
        }
        let step = jacobian(&psi)
            .lu()
            .solve(&f)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::SingularInformation("estimating-equation Jacobian is singular".into()))?;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = PsiVector(&psi.0 - &step * scale);
            let fc = equation(&cand);
            let nc = fc.norm();
            if nc < norm {
                accepted = Some((cand, fc, nc));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((p, fc, nc)) => {
                psi = p;
                f = fc;
                norm = nc;
            }
            None => return Err(fail(&psi, iter + 1)),
        }
    }
    Err(fail(&psi, opts.max_iter))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Trial-only root of the efficient score.
    Rt,
    Eff,
    Elastic,
    /// Covariate adjustment on the trial records.
    CovAdjRt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rt => "rt",
            Method::Eff => "eff",
            Method::Elastic => "elastic",
            Method::CovAdjRt => "cov_adj_rt",
        }
    }
}

/// How the gate level is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum GammaChoice {
    Fixed(f64),
    /// Minimise the trace of the asymptotic MSE at `eta_hat` over the grid.
    Adaptive(Vec<f64>),
}

impl GammaChoice {
    /// `{0.05, 0.10, ..., 0.95}`.
    pub fn default_grid() -> Vec<f64> {
        (1..20).map(|i| i as f64 / 20.0).collect()
    }

    pub fn adaptive() -> Self {
        GammaChoice::Adaptive(Self::default_grid())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub basis: BasisSpec,
    pub e1: TrialPropensity,
    pub solver: SolverOptions,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            basis: BasisSpec::default(),
            e1: TrialPropensity::Constant(0.5),
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EstimateResult {
    pub psi: PsiVector,
    /// Sandwich covariance on the `psi` scale. For the elastic estimator
    /// this is the covariance of the selected branch and ignores the
    /// pre-test; use the elastic CI for inference.
    pub variance: DMatrix<f64>,
    pub method: Method,
    pub gate: Option<GateResult>,
    /// Information and variance matrices at the trial estimate (elastic only).
    pub bundle: Option<VarianceBundle>,
    pub iterations: usize,
    pub converged: bool,
}

impl EstimateResult {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.psi.len()).map(|k| self.variance[(k, k)].max(0.0).sqrt()).collect()
    }
}

fn check_trial_arms(sample: &CombinedSample) -> Result<()> {
    let mut arms = [false; 2];
    for r in sample.records().iter().filter(|r| r.is_trial()) {
        arms[r.treated as usize] = true;
    }
    if arms != [true, true] {
        return Err(Error::SingularInformation(
            "all trial records share one treatment arm; the trial equation carries no information".into(),
        ));
    }
    Ok(())
}

/// Steps 1-3 of the estimation algorithm, shared by every score-based
/// estimator: the preliminary trial fit and the nuisance fits at it.
#[derive(Clone, Debug)]
pub struct NuisanceStage {
    pub model: HteModel,
    pub preliminary: Solution,
    pub nuisance: NuisanceFit,
    pub values: NuisanceValues,
}

impl NuisanceStage {
    pub fn fit(sample: &CombinedSample, model: HteModel, cfg: &EstimatorConfig) -> Result<Self> {
        if model.p != sample.p() {
            return Err(Error::InvalidArgument(format!(
                "model has {} parameters but the sample has {} effect modifiers",
                model.p,
                sample.p()
            )));
        }
        check_trial_arms(sample)?;
        let pre = ScoreContext::preliminary(model, sample, &cfg.e1)?;
        let preliminary = solve_z(
            |psi| pre.ee_sum(psi, Stratum::TrialOnly),
            |psi| pre.ee_jacobian(psi, Stratum::TrialOnly),
            PsiVector::zeros(model.p),
            &cfg.solver,
        )?;
        let nuisance = fit_nuisance(sample, &model, &preliminary.psi, &cfg.basis, &cfg.e1)?;
        let values = nuisance.predict(sample);
        Ok(NuisanceStage { model, preliminary, nuisance, values })
    }

    pub fn context<'a>(&self, sample: &'a CombinedSample) -> Result<ScoreContext<'a>> {
        ScoreContext::from_values(self.model, sample, self.values.clone())
    }

    /// Root of the efficient score over `stratum`, started at the preliminary fit.
    pub fn solve(
        &self,
        ctx: &ScoreContext<'_>,
        stratum: Stratum,
        solver: &SolverOptions,
        method: Method,
    ) -> Result<EstimateResult> {
        let sol = solve_z(
            |psi| ctx.ee_sum(psi, stratum),
            |psi| ctx.ee_jacobian(psi, stratum),
            self.preliminary.psi.clone(),
            solver,
        )?;
        let variance = ctx.sandwich(&sol.psi, stratum)?;
        Ok(EstimateResult {
            psi: sol.psi,
            variance,
            method,
            gate: None,
            bundle: None,
            iterations: sol.iterations,
            converged: true,
        })
    }
}

/// Trial-only estimator: preliminary fit with unit working variance, then
/// the trial equation with the estimated nuisance functions.
pub fn estimate_rt(sample: &CombinedSample, model: HteModel, cfg: &EstimatorConfig) -> Result<EstimateResult> {
    let stage = NuisanceStage::fit(sample, model, cfg)?;
    let ctx = stage.context(sample)?;
    stage.solve(&ctx, Stratum::TrialOnly, &cfg.solver, Method::Rt)
}

/// Efficient integrative estimator solving the pooled equation.
pub fn estimate_eff(sample: &CombinedSample, model: HteModel, cfg: &EstimatorConfig) -> Result<EstimateResult> {
    let stage = NuisanceStage::fit(sample, model, cfg)?;
    let ctx = stage.context(sample)?;
    stage.solve(&ctx, Stratum::Pooled, &cfg.solver, Method::Eff)
}

/// Least squares of `Y` on `(A - e1(X)) Z` over the trial records (no
/// intercept), with a heteroscedasticity-robust covariance.
pub fn estimate_cov_adj_rt(
    sample: &CombinedSample,
    model: HteModel,
    e1: &TrialPropensity,
) -> Result<EstimateResult> {
    if model.kind != HteKind::Linear {
        return Err(Error::UnsupportedMethod(
            "covariate adjustment is only defined for the linear HTE model".into(),
        ));
    }
    if model.p != sample.p() {
        return Err(Error::InvalidArgument("model and sample dimensions differ".into()));
    }
    e1.validate(sample)?;
    let p = model.p;
    let rt = sample.indices_of(Source::Trial);
    let mut gram = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    let mut rows = Vec::with_capacity(rt.len());
    for &i in &rt {
        let r = &sample.records()[i];
        let c = r.a() - e1.at(i);
        let x = DVector::from_iterator(p, sample.z(i).iter().map(|z| z * c));
        gram.ger(1.0, &x, &x, 1.0);
        xty.axpy(r.y, &x, 1.0);
        rows.push((x, r.y));
    }
    let rank_deficient = || Error::ConvergenceFailure {
        what: "covariate adjustment",
        iterations: 0,
        last_iterate: vec![f64::NAN; p],
    };
    let chol = symmetrize(&gram).cholesky().ok_or_else(rank_deficient)?;
    let beta = chol.solve(&xty);
    let bread = chol.inverse();
    if beta.iter().chain(bread.iter()).any(|v| !v.is_finite()) {
        return Err(rank_deficient());
    }
    let mut meat = DMatrix::zeros(p, p);
    for (x, y) in &rows {
        let e = y - x.dot(&beta);
        meat.ger(e * e, x, x, 1.0);
    }
    Ok(EstimateResult {
        psi: PsiVector(beta),
        variance: symmetrize(&(&bread * meat * &bread)),
        method: Method::CovAdjRt,
        gate: None,
        bundle: None,
        iterations: 0,
        converged: true,
    })
}

/// Every score-based fit of one sample at once, sharing the nuisance stage.
#[derive(Clone, Debug)]
pub struct IntegrativeFit {
    pub stage: NuisanceStage,
    pub rt: EstimateResult,
    pub eff: EstimateResult,
    pub bundle: VarianceBundle,
    pub gate: GateResult,
    pub elastic: EstimateResult,
}

impl IntegrativeFit {
    pub fn gamma(&self) -> f64 {
        self.gate.gamma
    }
}

/// Run the full pipeline: trial and pooled roots, the gate at the trial
/// root, and the elastic choice between them.
pub fn fit_integrative(
    sample: &CombinedSample,
    model: HteModel,
    cfg: &EstimatorConfig,
    gamma: &GammaChoice,
) -> Result<IntegrativeFit> {
    if let GammaChoice::Fixed(g) = gamma {
        if !(*g > 0.0 && *g < 1.0) {
            return Err(Error::InvalidArgument(format!("gamma must lie in (0, 1), got {g}")));
        }
    }
    let stage = NuisanceStage::fit(sample, model, cfg)?;
    let ctx = stage.context(sample)?;
    let rt = stage.solve(&ctx, Stratum::TrialOnly, &cfg.solver, Method::Rt)?;
    let eff = stage.solve(&ctx, Stratum::Pooled, &cfg.solver, Method::Eff)?;
    let bundle = VarianceBundle::compute(&ctx, &rt.psi)?;
    let probe = run_gate(&ctx, &rt.psi, &bundle, 0.5)?;
    let gate = match gamma {
        GammaChoice::Fixed(g) => probe.at_gamma(*g)?,
        GammaChoice::Adaptive(grid) => probe.at_gamma(select_gamma(&bundle, &probe.eta_hat, grid)?)?,
    };
    let chosen = if gate.accepted { &eff } else { &rt };
    let elastic = EstimateResult {
        method: Method::Elastic,
        gate: Some(gate.clone()),
        bundle: Some(bundle.clone()),
        ..chosen.clone()
    };
    Ok(IntegrativeFit { stage, rt, eff, bundle, gate, elastic })
}

/// The elastic estimator: the pooled root when the gate accepts, the
/// trial-only root otherwise.
pub fn estimate_elastic(
    sample: &CombinedSample,
    model: HteModel,
    cfg: &EstimatorConfig,
    gamma: &GammaChoice,
) -> Result<EstimateResult> {
    Ok(fit_integrative(sample, model, cfg, gamma)?.elastic)
}

/// Point estimate of `method` on `sample`.
pub fn estimate(
    sample: &CombinedSample,
    model: HteModel,
    cfg: &EstimatorConfig,
    method: Method,
) -> Result<EstimateResult> {
    match method {
        Method::Rt => estimate_rt(sample, model, cfg),
        Method::Eff => estimate_eff(sample, model, cfg),
        Method::CovAdjRt => estimate_cov_adj_rt(sample, model, &cfg.e1),
        Method::Elastic => estimate_elastic(sample, model, cfg, &GammaChoice::adaptive()),
    }
}

/// Record indices of one stratified resample (trial and real-world
/// records resampled separately, sizes preserved).
pub fn stratified_resample<R: Rng>(sample: &CombinedSample, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(sample.len());
    for source in [Source::Trial, Source::RealWorld] {
        let idx = sample.indices_of(source);
        out.extend((0..idx.len()).map(|_| idx[rng.random_range(0..idx.len())]));
    }
    out
}

/// Empirical covariance of `method` over `b` stratified bootstrap
/// resamples. Replicate `j` draws from stream `j` of `seed`.
pub fn bootstrap_variance(
    sample: &CombinedSample,
    model: HteModel,
    cfg: &EstimatorConfig,
    method: Method,
    b: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if method == Method::Elastic {
        return Err(Error::UnsupportedMethod(
            "the nonparametric bootstrap is inconsistent for the elastic estimator, \
             whose limit law is non-regular; use the elastic confidence interval"
                .into(),
        ));
    }
    if b < 2 {
        return Err(Error::InvalidArgument("bootstrap needs at least 2 replicates".into()));
    }
    let estimates: Vec<DVector<f64>> = (0..b)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let idx = stratified_resample(sample, &mut rng);
            let resampled = sample.select(&idx)?;
            let cfg = EstimatorConfig { e1: cfg.e1.select(&idx), ..cfg.clone() };
            Ok(estimate(&resampled, model, &cfg, method)?.psi.0)
        })
        .collect::<Result<_>>()?;
    Ok(covariance(&estimates))
}

/// Sample covariance (divisor `len - 1`) of a set of vectors, computed on
/// data shifted by the first vector.
pub fn covariance(vs: &[DVector<f64>]) -> DMatrix<f64> {
    let p = vs[0].len();
    let k = vs.len() as f64;
    let shifted: Vec<DVector<f64>> = vs.iter().map(|v| v - &vs[0]).collect();
    let mean = shifted.iter().fold(DVector::zeros(p), |a, v| a + v) / k;
    let mut cov = DMatrix::zeros(p, p);
    for v in &shifted {
        let d = v - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    symmetrize(&(cov / (k - 1.0)))
}
