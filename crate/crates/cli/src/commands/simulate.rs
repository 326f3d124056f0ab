use elastic_hte::estimator::{EstimatorConfig, GammaChoice};
use elastic_hte::simulate::{mse_ratio_table, run_study, StudyConfig, StudyResult, SummaryRow};
use serde::Serialize;

use super::{cell, create_dir, csv_writer, finish, write_json, Io, Tool, TOOL};
use crate::config::RunConfig;
use crate::error::CliResult;

pub fn study_config(cfg: &RunConfig) -> StudyConfig {
    let s = &cfg.study;
    StudyConfig {
        dgp: s.dgp.clone(),
        b_grid: s.b_grid.clone(),
        reps: s.reps,
        alpha: cfg.ci.alpha,
        methods: s.methods.clone(),
        bootstrap: s.bootstrap,
        ci_draws: s.ci_draws,
        ci_points: s.ci_points,
        gamma: cfg.gamma_choice(),
        estimator: EstimatorConfig::default(),
        seed: cfg.seed.unwrap_or(StudyConfig::default().seed),
    }
}

#[derive(Serialize)]
struct Settings<'a> {
    seed: u64,
    reps: usize,
    alpha: f64,
    bootstrap: usize,
    ci_draws: usize,
    ci_points: usize,
    gamma: String,
    dgp: &'a elastic_hte::simulate::DgpConfig,
}

#[derive(Serialize)]
struct Summary<'a> {
    tool: Tool,
    settings: Settings<'a>,
    b_grid: &'a [f64],
    psi_true: [f64; 3],
    reference: Option<&'static str>,
    mean_gamma: &'a [f64],
    failures: &'a [usize],
    rows: &'a [SummaryRow],
}

pub fn run(io: &Io, cfg: &RunConfig) -> CliResult<StudyResult> {
    let study = study_config(cfg);
    let result = run_study(&study)?;
    create_dir(&io.out)?;

    let summary = Summary {
        tool: TOOL,
        settings: Settings {
            seed: study.seed,
            reps: study.reps,
            alpha: study.alpha,
            bootstrap: study.bootstrap,
            ci_draws: study.ci_draws,
            ci_points: study.ci_points,
            gamma: match &study.gamma {
                GammaChoice::Fixed(g) => g.to_string(),
                GammaChoice::Adaptive(_) => "adaptive".into(),
            },
            dgp: &study.dgp,
        },
        b_grid: &result.b_grid,
        psi_true: result.psi_true,
        reference: result.reference.map(|m| m.name()),
        mean_gamma: &result.mean_gamma,
        failures: &result.failures,
        rows: &result.summary,
    };
    write_json(&io.out.join("summary.json"), &summary)?;

    let ratios = if result.reference.is_some() { mse_ratio_table(&result).ok() } else { None };
    let path = io.out.join("table1.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "b", "method", "coordinate", "bias", "mse", "mse_ratio_x100", "coverage", "mean_gamma", "replications",
        "failures",
    ])?;
    for (i, row) in result.summary.iter().enumerate() {
        let bi = result.b_grid.iter().position(|&b| b == row.b).unwrap_or(0);
        w.write_record([
            row.b.to_string(),
            row.method.name().to_string(),
            format!("psi{}", row.coordinate + 1),
            row.bias.to_string(),
            row.mse.to_string(),
            cell(ratios.as_ref().map(|r| r[i].ratio_x100)),
            cell(row.coverage),
            result.mean_gamma[bi].to_string(),
            row.replications.to_string(),
            result.failures[bi].to_string(),
        ])?;
    }
    finish(w, &path)?;

    let path = io.out.join("replicates.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "b", "rep", "m", "n", "t_stat", "gamma", "accepted", "method", "coordinate", "estimate", "ci_lower",
        "ci_upper",
    ])?;
    for r in &result.replicates {
        for o in &r.outcomes {
            for k in 0..o.psi.len() {
                w.write_record([
                    r.b.to_string(),
                    r.rep.to_string(),
                    r.m.to_string(),
                    r.n.to_string(),
                    r.t_stat.to_string(),
                    r.gamma.to_string(),
                    r.accepted.to_string(),
                    o.method.name().to_string(),
                    format!("psi{}", k + 1),
                    o.psi[k].to_string(),
                    o.ci_lower[k].to_string(),
                    o.ci_upper[k].to_string(),
                ])?;
            }
        }
    }
    finish(w, &path)?;
    Ok(result)
}
