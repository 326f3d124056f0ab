//! Simulation design with hidden confounding of the real-world data, and a
//! Monte Carlo harness summarising coverage, MSE ratios and selected gamma.

use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::ci::{elastic_ci, CiBranch, CiOptions};
use crate::asymptotics::special::normal_quantile;
use crate::error::{Error, Result};
use crate::estimator::{
    bootstrap_variance, estimate_cov_adj_rt, fit_integrative, EstimateResult, EstimatorConfig,
    GammaChoice, Method,
};
use crate::model::{CombinedSample, HteKind, HteModel, Record, Source};
use crate::nuisance::{expit, TrialPropensity};

/// Confounding strengths of the default study.
pub const DEFAULT_B_GRID: [f64; 7] = [0.10, 0.17, 0.29, 0.51, 0.89, 1.54, 2.69];

const MAX_RETRIES: u64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub population_size: usize,
    pub psi_true: [f64; 3],
    /// Coefficient of the hidden covariate `X3` in both potential outcomes.
    pub b: f64,
    /// Trial selection logit coefficients on `(1, X1, X2, X3)`.
    pub selection_coefs: [f64; 4],
    pub rw_sample_size: usize,
    pub e1_value: f64,
    /// Real-world treatment logit coefficients on `(1, X1, X2, X3)`.
    pub e0_logit_coefs: [f64; 4],
    /// Drop `X3` from the emitted covariates (it still drives the outcomes).
    pub omit_x3: bool,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            population_size: 100_000,
            psi_true: [1.0, 1.0, 1.0],
            b: 0.0,
            selection_coefs: [-6.5, 1.0, 1.0, 0.0],
            rw_sample_size: 1000,
            e1_value: 0.5,
            e0_logit_coefs: [1.0, -2.0, 0.0, -2.0],
            omit_x3: true,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rw_sample_size == 0 || self.population_size < self.rw_sample_size {
            return Err(Error::InvalidArgument(format!(
                "population of {} cannot supply a real-world sample of {}",
                self.population_size, self.rw_sample_size
            )));
        }
        if !self.b.is_finite() {
            return Err(Error::InvalidArgument("b must be finite".into()));
        }
        if !(self.e1_value > 0.0 && self.e1_value < 1.0) {
            return Err(Error::InvalidArgument("e1 must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// `tau(X) = psi1 + psi2 X1 + psi3 X2`.
    pub fn tau(&self, x: &[f64; 3]) -> f64 {
        self.psi_true[0] + self.psi_true[1] * x[0] + self.psi_true[2] * x[1]
    }

    /// `E{Y(0) | X} = X1 + b X3`.
    pub fn mu0(&self, x: &[f64; 3]) -> f64 {
        x[0] + self.b * x[2]
    }

    pub fn e0(&self, x: &[f64; 3]) -> f64 {
        linear_expit(&self.e0_logit_coefs, x)
    }

    pub fn selection_probability(&self, x: &[f64; 3]) -> f64 {
        linear_expit(&self.selection_coefs, x)
    }

    pub fn model(&self) -> HteModel {
        HteModel { kind: HteKind::Linear, p: 3 }
    }
}

fn linear_expit(c: &[f64; 4], x: &[f64; 3]) -> f64 {
    expit(c[0] + c[1] * x[0] + c[2] * x[1] + c[3] * x[2])
}

/// A generated data set together with the hidden covariate, for oracles.
#[derive(Clone, Debug)]
pub struct Replication {
    pub sample: CombinedSample,
    /// `(X1, X2, X3)` of each record, aligned with the sample.
    pub latent: Vec<[f64; 3]>,
    pub attempts: u64,
}

/// One data set: a Bernoulli-selected trial with randomised treatment and a
/// simple random real-world sample with confounded treatment.
pub fn generate_replication(cfg: &DgpConfig, rep_index: u64) -> Result<CombinedSample> {
    Ok(generate_replication_full(cfg, rep_index)?.sample)
}

pub fn generate_replication_full(cfg: &DgpConfig, rep_index: u64) -> Result<Replication> {
    cfg.validate()?;
    for attempt in 0..MAX_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(rep_index * MAX_RETRIES + attempt);
        if let Some(rep) = draw_once(cfg, &mut rng)? {
            return Ok(Replication { attempts: attempt + 1, ..rep });
        }
    }
    Err(Error::Degenerate(format!(
        "no trial participants selected in {MAX_RETRIES} attempts"
    )))
}

fn draw_once(cfg: &DgpConfig, rng: &mut ChaCha8Rng) -> Result<Option<Replication>> {
    let pop: Vec<[f64; 3]> = (0..cfg.population_size)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect();
    let trial: Vec<usize> =
        (0..pop.len()).filter(|&i| rng.random::<f64>() < cfg.selection_probability(&pop[i])).collect();
    if trial.is_empty() {
        return Ok(None);
    }
    let rw = index::sample(rng, pop.len(), cfg.rw_sample_size).into_vec();

    let z_idx: Arc<[usize]> = vec![0, 1, 2].into();
    let mut records = Vec::with_capacity(trial.len() + rw.len());
    let mut latent = Vec::with_capacity(trial.len() + rw.len());
    for (source, idx) in [(Source::Trial, &trial), (Source::RealWorld, &rw)] {
        for &i in idx {
            let x = pop[i];
            let e = match source {
                Source::Trial => cfg.e1_value,
                Source::RealWorld => cfg.e0(&x),
            };
            let treated = rng.random::<f64>() < e;
            let eps: f64 = rng.sample(StandardNormal);
            let y = cfg.mu0(&x) + if treated { cfg.tau(&x) } else { 0.0 } + eps;
            let covs = if cfg.omit_x3 { vec![1.0, x[0], x[1]] } else { vec![1.0, x[0], x[1], x[2]] };
            records.push(Record::new(source, treated, y, covs, z_idx.clone())?);
            latent.push(x);
        }
    }
    Ok(Some(Replication { sample: CombinedSample::new(records)?, latent, attempts: 0 }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyConfig {
    /// Template design; `b` and `seed` are set per grid point.
    pub dgp: DgpConfig,
    pub b_grid: Vec<f64>,
    pub reps: usize,
    pub alpha: f64,
    /// Estimators to run and summarise.
    pub methods: Vec<Method>,
    /// Bootstrap replicates for the Wald intervals of the regular
    /// estimators; `0` uses the sandwich variance instead.
    pub bootstrap: usize,
    pub ci_draws: usize,
    pub ci_points: usize,
    pub gamma: GammaChoice,
    pub estimator: EstimatorConfig,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            dgp: DgpConfig::default(),
            b_grid: DEFAULT_B_GRID.to_vec(),
            reps: 500,
            alpha: 0.05,
            methods: vec![Method::CovAdjRt, Method::Eff, Method::Elastic],
            bootstrap: 100,
            ci_draws: 20_000,
            ci_points: 100,
            gamma: GammaChoice::adaptive(),
            estimator: EstimatorConfig::default(),
            seed: 20_240_601,
        }
    }
}

/// Per-replication outcome of one estimator.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub psi: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub b_index: usize,
    pub b: f64,
    pub rep: usize,
    pub m: usize,
    pub n: usize,
    pub t_stat: f64,
    pub gamma: f64,
    pub c_gamma: f64,
    pub accepted: bool,
    pub ci_branch: Option<CiBranch>,
    /// Whether the local-branch elastic CI contained its plug-in interval.
    pub plug_in_contained: Option<bool>,
    pub outcomes: Vec<MethodOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub b: f64,
    pub method: Method,
    pub coordinate: usize,
    pub bias: f64,
    pub mse: f64,
    /// `MSE / MSE(reference)`, unscaled.
    pub mse_ratio: Option<f64>,
    /// `None` when fewer than two replications succeeded.
    pub coverage: Option<f64>,
    pub replications: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyResult {
    pub b_grid: Vec<f64>,
    pub reps: usize,
    pub psi_true: [f64; 3],
    pub reference: Option<Method>,
    pub summary: Vec<SummaryRow>,
    pub mean_gamma: Vec<f64>,
    pub failures: Vec<usize>,
    pub replicates: Vec<ReplicationRecord>,
}

impl StudyResult {
    pub fn row(&self, b_index: usize, method: Method, coordinate: usize) -> Option<&SummaryRow> {
        let b = self.b_grid[b_index];
        self.summary.iter().find(|r| r.b == b && r.method == method && r.coordinate == coordinate)
    }
}

/// A seed derived from `(seed, key)`.
pub fn derive_seed(seed: u64, key: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng.random()
}

fn wald(est: &EstimateResult, var_diag: &[f64], z: f64) -> MethodOutcome {
    let psi = est.psi.as_slice().to_vec();
    let half: Vec<f64> = var_diag.iter().map(|v| z * v.max(0.0).sqrt()).collect();
    MethodOutcome {
        method: est.method,
        ci_lower: psi.iter().zip(&half).map(|(p, h)| p - h).collect(),
        ci_upper: psi.iter().zip(&half).map(|(p, h)| p + h).collect(),
        psi,
    }
}

fn run_replication(cfg: &StudyConfig, b_index: usize, rep: usize) -> Result<ReplicationRecord> {
    let b = cfg.b_grid[b_index];
    let dgp = DgpConfig { b, seed: derive_seed(cfg.seed, b_index as u64), ..cfg.dgp.clone() };
    let sample = generate_replication(&dgp, rep as u64)?;
    let model = dgp.model();
    let est_cfg = EstimatorConfig { e1: TrialPropensity::Constant(dgp.e1_value), ..cfg.estimator.clone() };
    let fit = fit_integrative(&sample, model, &est_cfg, &cfg.gamma)?;
    let rep_seed = derive_seed(dgp.seed, 1 << 32 | rep as u64);
    let z = normal_quantile(1.0 - cfg.alpha / 2.0)?;

    let mut outcomes = Vec::with_capacity(cfg.methods.len());
    let mut ci_branch = None;
    let mut plug_in_contained = None;
    for (j, &method) in cfg.methods.iter().enumerate() {
        let method_seed = derive_seed(rep_seed, j as u64);
        let outcome = match method {
            Method::Elastic => {
                let opts = CiOptions {
                    alpha: cfg.alpha,
                    draws: cfg.ci_draws,
                    points: cfg.ci_points,
                    seed: method_seed,
                };
                let ci = elastic_ci(&fit.bundle, &fit.gate, &fit.elastic.psi, sample.n(), &opts)?;
                ci_branch = Some(ci.branch);
                plug_in_contained = ci.plug_in.as_ref().map(|(lo, hi)| {
                    (0..lo.len()).all(|k| ci.lower[k] <= lo[k] && hi[k] <= ci.upper[k])
                });
                MethodOutcome {
                    method,
                    psi: fit.elastic.psi.as_slice().to_vec(),
                    ci_lower: ci.lower,
                    ci_upper: ci.upper,
                }
            }
            _ => {
                let est = match method {
                    Method::Rt => fit.rt.clone(),
                    Method::Eff => fit.eff.clone(),
                    _ => estimate_cov_adj_rt(&sample, model, &est_cfg.e1)?,
                };
                let var = if cfg.bootstrap > 0 {
                    bootstrap_variance(&sample, model, &est_cfg, method, cfg.bootstrap, method_seed)?
                } else {
                    est.variance.clone()
                };
                let diag: Vec<f64> = (0..model.p).map(|k| var[(k, k)]).collect();
                wald(&est, &diag, z)
            }
        };
        outcomes.push(outcome);
    }
    Ok(ReplicationRecord {
        b_index,
        b,
        rep,
        m: sample.m(),
        n: sample.n(),
        t_stat: fit.gate.t_stat,
        gamma: fit.gate.gamma,
        c_gamma: fit.gate.c_gamma,
        accepted: fit.gate.accepted,
        ci_branch,
        plug_in_contained,
        outcomes,
    })
}

/// Run every `(b, replication)` pair, in parallel, and summarise. Results
/// do not depend on the thread count.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    if cfg.reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    if cfg.b_grid.is_empty() {
        return Err(Error::InvalidArgument("b grid is empty".into()));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {}", cfg.alpha)));
    }
    cfg.dgp.validate()?;
    let tasks: Vec<(usize, usize)> =
        (0..cfg.b_grid.len()).flat_map(|b| (0..cfg.reps).map(move |r| (b, r))).collect();
    let outcomes: Vec<Result<ReplicationRecord>> =
        tasks.par_iter().map(|&(b, r)| run_replication(cfg, b, r)).collect();

    let mut failures = vec![0; cfg.b_grid.len()];
    let mut replicates = Vec::with_capacity(outcomes.len());
    let mut last_error = None;
    for ((b, _), out) in tasks.iter().zip(outcomes) {
        match out {
            Ok(r) => replicates.push(r),
            Err(e) => {
                failures[*b] += 1;
                last_error = Some(e);
            }
        }
    }
    if let Some(e) = last_error {
        if failures.iter().any(|&f| f * 100 >= cfg.reps) {
            return Err(Error::Degenerate(format!(
                "replication failures {failures:?} exceed 1% of {} reps (last: {e})",
                cfg.reps
            )));
        }
    }
    Ok(summarise(cfg, replicates, failures))
}

fn summarise(cfg: &StudyConfig, replicates: Vec<ReplicationRecord>, failures: Vec<usize>) -> StudyResult {
    let psi_true = cfg.dgp.psi_true;
    let reference = [Method::CovAdjRt, Method::Rt].into_iter().find(|m| cfg.methods.contains(m));
    let mut summary = Vec::new();
    let mut mean_gamma = Vec::new();
    for (bi, &b) in cfg.b_grid.iter().enumerate() {
        let reps: Vec<&ReplicationRecord> = replicates.iter().filter(|r| r.b_index == bi).collect();
        let count = reps.len();
        mean_gamma.push(reps.iter().map(|r| r.gamma).sum::<f64>() / count.max(1) as f64);
        let mut rows = Vec::new();
        for (j, &method) in cfg.methods.iter().enumerate() {
            for k in 0..3 {
                let err: Vec<f64> = reps.iter().map(|r| r.outcomes[j].psi[k] - psi_true[k]).collect();
                let covered = reps
                    .iter()
                    .filter(|r| r.outcomes[j].ci_lower[k] <= psi_true[k] && psi_true[k] <= r.outcomes[j].ci_upper[k])
                    .count();
                let c = count.max(1) as f64;
                rows.push(SummaryRow {
                    b,
                    method,
                    coordinate: k,
                    bias: err.iter().sum::<f64>() / c,
                    mse: err.iter().map(|e| e * e).sum::<f64>() / c,
                    mse_ratio: None,
                    coverage: (count >= 2).then(|| covered as f64 / c),
                    replications: count,
                });
            }
        }
        if let Some(reference) = reference {
            let ref_mse: Vec<f64> =
                (0..3).map(|k| rows.iter().find(|r| r.method == reference && r.coordinate == k).unwrap().mse).collect();
            for r in &mut rows {
                let denom = ref_mse[r.coordinate];
                r.mse_ratio = (denom > 0.0).then(|| r.mse / denom);
            }
        }
        summary.extend(rows);
    }
    StudyResult {
        b_grid: cfg.b_grid.clone(),
        reps: cfg.reps,
        psi_true,
        reference,
        summary,
        mean_gamma,
        failures,
        replicates,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioRow {
    pub b: f64,
    pub method: Method,
    pub coordinate: usize,
    /// `100 * MSE / MSE(reference)`.
    pub ratio_x100: f64,
}

/// MSE ratios (x100) against the trial-only reference estimator.
pub fn mse_ratio_table(result: &StudyResult) -> Result<Vec<RatioRow>> {
    let reference = result
        .reference
        .ok_or_else(|| Error::Precondition("no trial-only reference estimator in the study".into()))?;
    let mut out = Vec::with_capacity(result.summary.len());
    for row in &result.summary {
        let ref_row = result
            .summary
            .iter()
            .find(|r| r.b == row.b && r.method == reference && r.coordinate == row.coordinate)
            .expect("reference rows are always summarised");
        if !(ref_row.mse > 0.0) {
            return Err(Error::Degenerate(format!(
                "reference MSE is zero at b = {}, coordinate {}",
                row.b, row.coordinate
            )));
        }
        out.push(RatioRow {
            b: row.b,
            method: row.method,
            coordinate: row.coordinate,
            ratio_x100: 100.0 * row.mse / ref_row.mse,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DgpConfig {
        DgpConfig { population_size: 20_000, rw_sample_size: 300, ..DgpConfig::default() }
    }

    #[test]
    fn replication_layout() {
        let cfg = small();
        let s = generate_replication(&cfg, 0).unwrap();
        assert_eq!(s.n(), 300);
        assert!(s.m() > 0);
        assert_eq!(s.dx(), 3);
        assert_eq!(s.z_idx(), &[0, 1, 2]);
        let full = generate_replication(&DgpConfig { omit_x3: false, ..cfg.clone() }, 0).unwrap();
        assert_eq!(full.dx(), 4);
        // same stream, same records apart from the emitted X3
        for (a, b) in s.records().iter().zip(full.records()) {
            assert_eq!(a.y, b.y);
            assert_eq!(&a.x[..], &b.x[..3]);
        }
    }

    #[test]
    fn replications_are_reproducible_and_distinct() {
        let cfg = small();
        let a = generate_replication(&cfg, 3).unwrap();
        let b = generate_replication(&cfg, 3).unwrap();
        let c = generate_replication(&cfg, 4).unwrap();
        assert_eq!(a.records(), b.records());
        assert_ne!(a.records()[0].y, c.records()[0].y);
    }

    #[test]
    fn impossible_selection_is_reported() {
        let cfg = DgpConfig { selection_coefs: [-60.0, 0.0, 0.0, 0.0], ..small() };
        assert!(matches!(generate_replication(&cfg, 0), Err(Error::Degenerate(_))));
        let bad = DgpConfig { rw_sample_size: 30_000, ..small() };
        assert!(generate_replication(&bad, 0).is_err());
    }

    #[test]
    fn single_replication_has_no_coverage() {
        let cfg = StudyConfig {
            dgp: small(),
            b_grid: vec![0.1],
            reps: 1,
            bootstrap: 0,
            ci_draws: 500,
            ci_points: 5,
            ..StudyConfig::default()
        };
        let res = run_study(&cfg).unwrap();
        assert_eq!(res.replicates.len(), 1);
        assert!(res.summary.iter().all(|r| r.coverage.is_none()));
        let ratios = mse_ratio_table(&res).unwrap();
        for r in ratios.iter().filter(|r| r.method == Method::CovAdjRt) {
            assert_eq!(r.ratio_x100, 100.0);
        }
    }
}
