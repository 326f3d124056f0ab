use std::path::{Path, PathBuf};

use elastic_hte::asymptotics::{elastic_ci, normal_quantile, CiBranch, CiOptions};
use elastic_hte::estimator::{fit_integrative, EstimateResult, EstimatorConfig, GammaChoice, IntegrativeFit};
use elastic_hte::model::HteKind;
use serde::Serialize;

use super::{create_dir, csv_writer, entries, finish, record_failure, rows, write_json, Io, Tool, TOOL};
use crate::config::{PropensitySetting, RunConfig};
use crate::data::{prepare, Dataset, Prepared, Standardization};
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Serialize)]
pub struct DataSummary {
    pub path: PathBuf,
    pub rows_read: usize,
    pub rows_rejected: usize,
    pub trial_rows: usize,
    pub real_world_rows: usize,
    pub covariates: Vec<String>,
    pub effect_modifiers: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GateSummary {
    pub t_stat: f64,
    pub df: usize,
    pub p_value: f64,
    pub gamma: f64,
    pub gamma_selection: &'static str,
    pub c_gamma: f64,
    pub decision: &'static str,
    pub eta_hat: Vec<f64>,
    pub sigma_ss: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub est: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodReport {
    pub method: &'static str,
    pub interval: &'static str,
    pub ci_branch: Option<CiBranch>,
    pub kappa_n: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub coefficients: Vec<Coefficient>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimateReport {
    pub tool: Tool,
    pub seed: u64,
    pub alpha: f64,
    pub model: HteKind,
    pub trial_propensity: String,
    pub data: DataSummary,
    pub standardization: Vec<Standardization>,
    pub gate: GateSummary,
    pub estimates: Vec<MethodReport>,
}

/// Everything the `estimate` and `gate` commands share.
pub struct Fitted {
    pub data: DataSummary,
    pub prepared: Prepared,
    pub fit: IntegrativeFit,
}

pub fn fit(path: &Path, cfg: &RunConfig, out: &Path) -> CliResult<Fitted> {
    let column = match &cfg.trial.propensity {
        PropensitySetting::Column(c) => Some(c.as_str()),
        PropensitySetting::Constant(_) => None,
    };
    let dataset = Dataset::read_path(path, column)?;
    let prepared = prepare(&dataset, cfg)?;
    let sample = &prepared.sample;
    let model = elastic_hte::model::HteModel::new(cfg.model.kind, sample.p())?;
    let est = EstimatorConfig { basis: prepared.basis.clone(), e1: prepared.e1.clone(), ..EstimatorConfig::default() };
    let fit = fit_integrative(sample, model, &est, &cfg.gamma_choice()).map_err(|e| record_failure(out, &e))?;
    let data = DataSummary {
        path: path.to_path_buf(),
        rows_read: dataset.rows_read,
        rows_rejected: dataset.rows_rejected,
        trial_rows: sample.m(),
        real_world_rows: sample.n(),
        covariates: dataset.covariates.clone(),
        effect_modifiers: prepared.coefficient_names[1..].to_vec(),
    };
    Ok(Fitted { data, prepared, fit })
}

pub fn gate_summary(fit: &IntegrativeFit, cfg: &RunConfig) -> GateSummary {
    let g = &fit.gate;
    GateSummary {
        t_stat: g.t_stat,
        df: g.p(),
        p_value: g.p_value,
        gamma: g.gamma,
        gamma_selection: match cfg.gamma_choice() {
            GammaChoice::Fixed(_) => "fixed",
            GammaChoice::Adaptive(_) => "adaptive",
        },
        c_gamma: g.c_gamma,
        decision: if g.accepted { "accept" } else { "reject" },
        eta_hat: entries(&g.eta_hat),
        sigma_ss: rows(&g.sigma_ss_hat),
    }
}

fn wald(est: &EstimateResult, names: &[String], z: f64, method: &'static str) -> MethodReport {
    let se = est.standard_errors();
    MethodReport {
        method,
        interval: "wald",
        ci_branch: None,
        kappa_n: None,
        converged: est.converged,
        iterations: est.iterations,
        coefficients: names
            .iter()
            .zip(est.psi.as_slice())
            .zip(&se)
            .map(|((name, &est), &se)| Coefficient {
                name: name.clone(),
                est,
                se,
                ci_lo: est - z * se,
                ci_hi: est + z * se,
            })
            .collect(),
    }
}

pub fn run(io: &Io, cfg: &RunConfig) -> CliResult<EstimateReport> {
    let path = io.data.as_deref().ok_or_else(|| CliError::Input("--data is required".into()))?;
    let Fitted { data, prepared, fit } = fit(path, cfg, &io.out)?;
    let names = &prepared.coefficient_names;
    let seed = cfg.seed.unwrap_or(0);
    let z = normal_quantile(1.0 - cfg.ci.alpha / 2.0)?;

    let opts = CiOptions { alpha: cfg.ci.alpha, draws: cfg.ci.draws, points: cfg.ci.points, seed };
    let ci = elastic_ci(&fit.bundle, &fit.gate, &fit.elastic.psi, prepared.sample.n(), &opts)
        .map_err(|e| record_failure(&io.out, &e))?;
    let se = fit.elastic.standard_errors();
    let elastic = MethodReport {
        method: "elastic",
        interval: "elastic",
        ci_branch: Some(ci.branch),
        kappa_n: Some(ci.kappa_n),
        converged: fit.elastic.converged,
        iterations: fit.elastic.iterations,
        coefficients: (0..names.len())
            .map(|k| Coefficient {
                name: names[k].clone(),
                est: fit.elastic.psi.as_slice()[k],
                se: se[k],
                ci_lo: ci.lower[k],
                ci_hi: ci.upper[k],
            })
            .collect(),
    };

    let report = EstimateReport {
        tool: TOOL,
        seed,
        alpha: cfg.ci.alpha,
        model: cfg.model.kind,
        trial_propensity: match &cfg.trial.propensity {
            PropensitySetting::Constant(e) => e.to_string(),
            PropensitySetting::Column(c) => format!("column {c}"),
        },
        data,
        standardization: prepared.standardization.clone(),
        gate: gate_summary(&fit, cfg),
        estimates: vec![wald(&fit.rt, names, z, "rt"), wald(&fit.eff, names, z, "eff"), elastic],
    };

    create_dir(&io.out)?;
    write_json(&io.out.join("estimate.json"), &report)?;
    let csv_path = io.out.join("estimate.csv");
    let mut w = csv_writer(&csv_path)?;
    w.write_record(["method", "coefficient", "est", "se", "ci_lo", "ci_hi"])?;
    for m in &report.estimates {
        for c in &m.coefficients {
            w.write_record([
                m.method.to_string(),
                c.name.clone(),
                c.est.to_string(),
                c.se.to_string(),
                c.ci_lo.to_string(),
                c.ci_hi.to_string(),
            ])?;
        }
    }
    finish(w, &csv_path)?;
    Ok(report)
}
