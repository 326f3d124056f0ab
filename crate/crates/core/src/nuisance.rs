//! Sieve fits of the nuisance functions: the real-world propensity `e0(X)`,
//! the stratum outcome means `mu_delta(X)` of `H`, and the stratum variances.
//! The trial propensity `e1(X)` is known by design and only passed through.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CombinedSample, HteModel, PsiVector, Source};

/// Propensities handed to the score are clipped into `[PROPENSITY_CLIP, 1 - PROPENSITY_CLIP]`.
pub const PROPENSITY_CLIP: f64 = 0.01;
/// Lower bound for fitted outcome variances.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Coefficients beyond this magnitude signal (quasi-)complete separation.
pub const SEPARATION_BOUND: f64 = 30.0;

const LOGISTIC_RIDGE: f64 = 1e-8;
const LINEAR_RIDGE: f64 = 1e-10;

/// Degree-2 power-series basis: intercept, levels, squares and pairwise
/// products of the retained covariates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub include_squares: bool,
    pub include_pairwise_interactions: bool,
    /// Covariate positions (into `x`) left out of the basis entirely.
    pub omit_indices: Vec<usize>,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            include_squares: true,
            include_pairwise_interactions: true,
            omit_indices: Vec::new(),
        }
    }
}

impl BasisSpec {
    pub fn validate(&self, dx: usize) -> Result<()> {
        for &j in &self.omit_indices {
            if j == 0 {
                return Err(Error::InvalidArgument("the intercept cannot be omitted".into()));
            }
            if j >= dx {
                return Err(Error::InvalidArgument(format!(
                    "omitted index {j} out of bounds for {dx} covariates"
                )));
            }
        }
        Ok(())
    }

    fn kept(&self, dx: usize) -> Vec<usize> {
        (1..dx).filter(|j| !self.omit_indices.contains(j)).collect()
    }

    /// Number of basis functions for covariate dimension `dx`.
    pub fn len(&self, dx: usize) -> usize {
        let k = self.kept(dx).len();
        let mut len = 1 + k;
        if self.include_squares {
            len += k;
        }
        if self.include_pairwise_interactions {
            len += k * k.saturating_sub(1) / 2;
        }
        len
    }
}

/// Expand `x` (with `x[0] = 1`) into the sieve basis. Ordering: intercept,
/// levels, squares, then products `x_j x_k` for `j < k` in lexicographic order.
pub fn build_basis(x: &[f64], spec: &BasisSpec) -> Vec<f64> {
    let kept = spec.kept(x.len());
    let mut out = Vec::with_capacity(spec.len(x.len()));
    out.push(1.0);
    out.extend(kept.iter().map(|&j| x[j]));
    if spec.include_squares {
        out.extend(kept.iter().map(|&j| x[j] * x[j]));
    }
    if spec.include_pairwise_interactions {
        for (a, &j) in kept.iter().enumerate() {
            for &k in &kept[a + 1..] {
                out.push(x[j] * x[k]);
            }
        }
    }
    out
}

/// Basis rows for the records at `indices`.
pub fn basis_matrix(sample: &CombinedSample, indices: &[usize], spec: &BasisSpec) -> DMatrix<f64> {
    let cols = spec.len(sample.dx());
    let mut data = Vec::with_capacity(indices.len() * cols);
    for &i in indices {
        data.extend(build_basis(&sample.records()[i].x, spec));
    }
    DMatrix::from_row_slice(indices.len(), cols, &data)
}

#[inline]
pub(crate) fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub(crate) fn clip_propensity(e: f64) -> f64 {
    e.clamp(PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP)
}

#[derive(Clone, Debug)]
pub struct LogisticFit {
    pub coef: DVector<f64>,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Set when a coefficient exceeded [`SEPARATION_BOUND`]; the fit stops
    /// there and clipped predictions remain usable.
    pub separated: bool,
}

fn log_likelihood(features: &DMatrix<f64>, labels: &[f64], coef: &DVector<f64>) -> f64 {
    let eta = features * coef;
    eta.iter().zip(labels).map(|(&t, &y)| y * t - softplus(t)).sum()
}

/// Solve the symmetric system `a x = b`, retrying with `ridge` on the
/// diagonal when `a` is not numerically positive definite.
fn spd_solve(mut a: DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let scale = (0..a.nrows()).map(|i| a[(i, i)].abs()).fold(1.0, f64::max);
    for i in 0..a.nrows() {
        a[(i, i)] += ridge * scale;
    }
    a.cholesky().map(|ch| ch.solve(b)).filter(|x| x.iter().all(|v| v.is_finite()))
}

/// Binomial maximum likelihood by iteratively reweighted least squares with
/// step-halving. Converged once the largest coefficient change is below `tol`.
pub fn fit_logistic(
    features: &DMatrix<f64>,
    labels: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<LogisticFit> {
    let (rows, cols) = features.shape();
    if cols == 0 {
        return Err(Error::InvalidArgument("logistic fit needs at least one feature".into()));
    }
    if rows != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{rows} feature rows but {} labels",
            labels.len()
        )));
    }
    if labels.iter().any(|&y| !(0.0..=1.0).contains(&y)) {
        return Err(Error::InvalidArgument("logistic labels must lie in [0, 1]".into()));
    }

    let mut coef = DVector::zeros(cols);
    let mut ll = log_likelihood(features, labels, &coef);
    for iter in 1..=max_iter {
        let eta = features * &coef;
        let mut weighted = features.clone();
        let mut score = DVector::zeros(cols);
        for i in 0..rows {
            let p = expit(eta[i]);
            let w = (p * (1.0 - p)).max(1e-12);
            let r = labels[i] - p;
            for j in 0..cols {
                score[j] += features[(i, j)] * r;
                weighted[(i, j)] *= w;
            }
        }
        let info = features.tr_mul(&weighted);
        let step = spd_solve(info, &score, LOGISTIC_RIDGE).ok_or_else(|| {
            Error::SingularInformation("logistic information matrix is singular".into())
        })?;

        let mut t = 1.0;
        let mut candidate = &coef + &step;
        let mut cand_ll = log_likelihood(features, labels, &candidate);
        let mut halvings = 0;
        while cand_ll < ll - 1e-10 * ll.abs().max(1.0) && halvings < 20 {
            t *= 0.5;
            halvings += 1;
            candidate = &coef + &step * t;
            cand_ll = log_likelihood(features, labels, &candidate);
        }
        let change = (&step * t).amax();
        coef = candidate;
        ll = cand_ll.max(ll);

        if coef.amax() > SEPARATION_BOUND {
            return Ok(LogisticFit { coef, iterations: iter, log_likelihood: ll, separated: true });
        }
        if change < tol {
            return Ok(LogisticFit { coef, iterations: iter, log_likelihood: ll, separated: false });
        }
    }
    Err(Error::ConvergenceFailure {
        what: "logistic IRLS",
        iterations: max_iter,
        last_iterate: coef.iter().copied().collect(),
    })
}

/// Ordinary least squares through the normal equations, with a small ridge
/// fallback for nearly singular designs.
pub fn fit_linear(features: &DMatrix<f64>, targets: &[f64]) -> Result<DVector<f64>> {
    let (rows, cols) = features.shape();
    if rows != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{rows} feature rows but {} targets",
            targets.len()
        )));
    }
    if rows < cols || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "least squares needs rows >= columns >= 1, got {rows} x {cols}"
        )));
    }
    let y = DVector::from_column_slice(targets);
    let gram = features.tr_mul(features);
    let rhs = features.tr_mul(&y);
    spd_solve(gram, &rhs, LINEAR_RIDGE).ok_or_else(|| Error::ConvergenceFailure {
        what: "least squares",
        iterations: 1,
        last_iterate: vec![],
    })
}

/// The known trial propensity `e1(X)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrialPropensity {
    Constant(f64),
    /// One value per record of the sample it accompanies (real-world
    /// entries are ignored).
    PerRecord(Vec<f64>),
}

impl TrialPropensity {
    pub fn validate(&self, sample: &CombinedSample) -> Result<()> {
        let ok = |e: f64| e > 0.0 && e < 1.0;
        match self {
            TrialPropensity::Constant(e) if ok(*e) => Ok(()),
            TrialPropensity::Constant(e) => Err(Error::InvalidArgument(format!(
                "trial propensity {e} must lie strictly between 0 and 1"
            ))),
            TrialPropensity::PerRecord(v) => {
                if v.len() != sample.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} trial propensities for {} records",
                        v.len(),
                        sample.len()
                    )));
                }
                let bad = sample
                    .records()
                    .iter()
                    .zip(v)
                    .position(|(r, &e)| r.is_trial() && !ok(e));
                match bad {
                    Some(i) => Err(Error::InvalidArgument(format!(
                        "trial propensity of record {i} must lie strictly between 0 and 1"
                    ))),
                    None => Ok(()),
                }
            }
        }
    }

    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        match self {
            TrialPropensity::Constant(e) => *e,
            TrialPropensity::PerRecord(v) => v[i],
        }
    }

    /// Re-index alongside [`CombinedSample::select`].
    pub fn select(&self, indices: &[usize]) -> Self {
        match self {
            TrialPropensity::Constant(e) => TrialPropensity::Constant(*e),
            TrialPropensity::PerRecord(v) => {
                TrialPropensity::PerRecord(indices.iter().map(|&i| v[i]).collect())
            }
        }
    }
}

/// How `sigma^2_delta(X)` is represented.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OutcomeVariance {
    /// Stratum-constant residual variance (continuous outcomes).
    Constant { trial: f64, real_world: f64 },
    /// `mu(X)(1 - mu(X))` evaluated pointwise (binary outcomes).
    Binary,
}

/// Fitted nuisance functions.
#[derive(Clone, Debug)]
pub struct NuisanceFit {
    pub basis: BasisSpec,
    pub e1: TrialPropensity,
    pub e0_coef: DVector<f64>,
    pub e0_separated: bool,
    pub mu1_coef: DVector<f64>,
    pub mu0_coef: DVector<f64>,
    pub variance: OutcomeVariance,
}

/// Per-record nuisance values aligned with a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NuisanceValues {
    pub e: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl NuisanceFit {
    /// Evaluate `e_delta`, `mu_delta`, `sigma^2_delta` at every record.
    /// `sample` must be the sample the trial propensity is aligned with.
    pub fn predict(&self, sample: &CombinedSample) -> NuisanceValues {
        let len = sample.len();
        let mut e = Vec::with_capacity(len);
        let mut mu = Vec::with_capacity(len);
        let mut sigma2 = Vec::with_capacity(len);
        for (i, r) in sample.records().iter().enumerate() {
            let b = build_basis(&r.x, &self.basis);
            let dotb = |c: &DVector<f64>| b.iter().zip(c.iter()).map(|(u, v)| u * v).sum::<f64>();
            let (ei, mi) = match r.source {
                Source::Trial => (self.e1.at(i), dotb(&self.mu1_coef)),
                Source::RealWorld => (expit(dotb(&self.e0_coef)), dotb(&self.mu0_coef)),
            };
            let s2 = match &self.variance {
                OutcomeVariance::Constant { trial, real_world } => match r.source {
                    Source::Trial => *trial,
                    Source::RealWorld => *real_world,
                },
                OutcomeVariance::Binary => {
                    let q = clip_propensity(mi);
                    q * (1.0 - q)
                }
            };
            e.push(clip_propensity(ei));
            mu.push(mi);
            sigma2.push(s2.max(VARIANCE_FLOOR));
        }
        NuisanceValues { e, mu, sigma2 }
    }
}

/// Fit `e0` on the real-world records and, per stratum, the mean of
/// `H` at `psi_prelim` on the sieve basis together with its variance.
pub fn fit_nuisance(
    sample: &CombinedSample,
    model: &HteModel,
    psi_prelim: &PsiVector,
    spec: &BasisSpec,
    e1: &TrialPropensity,
) -> Result<NuisanceFit> {
    spec.validate(sample.dx())?;
    e1.validate(sample)?;
    if psi_prelim.len() != model.p || model.p != sample.p() {
        return Err(Error::InvalidArgument(format!(
            "psi has {} entries, model expects {}, sample has {} effect modifiers",
            psi_prelim.len(),
            model.p,
            sample.p()
        )));
    }

    let rt = sample.indices_of(Source::Trial);
    let rw = sample.indices_of(Source::RealWorld);
    let x_rw = basis_matrix(sample, &rw, spec);
    let a_rw: Vec<f64> = rw.iter().map(|&i| sample.records()[i].a()).collect();
    let e0 = fit_logistic(&x_rw, &a_rw, 100, 1e-8)?;

    let h = |i: usize| {
        let r = &sample.records()[i];
        r.y - model.kind.value(crate::model::dot(sample.z(i), &psi_prelim.0)) * r.a()
    };
    let x_rt = basis_matrix(sample, &rt, spec);
    let h_rt: Vec<f64> = rt.iter().map(|&i| h(i)).collect();
    let h_rw: Vec<f64> = rw.iter().map(|&i| h(i)).collect();
    let mu1 = fit_linear(&x_rt, &h_rt)?;
    let mu0 = fit_linear(&x_rw, &h_rw)?;

    let variance = if model.kind.binary_outcome() {
        OutcomeVariance::Binary
    } else {
        let msr = |x: &DMatrix<f64>, t: &[f64], c: &DVector<f64>| {
            let fitted = x * c;
            let ss: f64 = fitted.iter().zip(t).map(|(f, y)| (y - f) * (y - f)).sum();
            (ss / t.len() as f64).max(VARIANCE_FLOOR)
        };
        OutcomeVariance::Constant {
            trial: msr(&x_rt, &h_rt, &mu1),
            real_world: msr(&x_rw, &h_rw, &mu0),
        }
    };

    Ok(NuisanceFit {
        basis: spec.clone(),
        e1: e1.clone(),
        e0_coef: e0.coef,
        e0_separated: e0.separated,
        mu1_coef: mu1,
        mu0_coef: mu0,
        variance,
    })
}
