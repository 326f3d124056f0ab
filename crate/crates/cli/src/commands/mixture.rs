use elastic_hte::asymptotics::mixture::{analytic_bias_mse, density_grid, sample_mixture, MixtureSpec};
use elastic_hte::score::VarianceBundle;
use nalgebra::DVector;
use serde::Serialize;

use super::{create_dir, csv_writer, entries, finish, rows, write_json, Io, Tool, TOOL};
use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Clone, Debug, Serialize)]
pub struct MixtureSummary {
    pub tool: Tool,
    pub seed: u64,
    pub p: usize,
    pub gamma: f64,
    pub rho: f64,
    pub eta: Vec<f64>,
    /// `None` when the gate never rejects (`gamma = 0`).
    pub c_gamma: Option<f64>,
    pub lambda: f64,
    pub xi: f64,
    pub draws: usize,
    pub proposals: u64,
    pub truncated_fraction: f64,
    pub normal_fraction: f64,
    pub v_rt: Vec<Vec<f64>>,
    pub v_eff: Vec<Vec<f64>>,
    pub analytic_bias: Vec<f64>,
    pub analytic_mse: Vec<Vec<f64>>,
    pub empirical_mean: Vec<f64>,
    pub empirical_second_moment: Vec<Vec<f64>>,
    pub empirical_sd: Vec<f64>,
}

pub fn run(io: &Io, cfg: &RunConfig) -> CliResult<MixtureSummary> {
    let m = &cfg.mixture;
    let seed = cfg.seed.unwrap_or(0);
    let bundle = VarianceBundle::from_information(m.i_rt.to_matrix(m.p), m.i_rw.to_matrix(m.p), m.rho)?;
    let eta = if m.eta.is_empty() { DVector::zeros(m.p) } else { DVector::from_column_slice(&m.eta) };
    let spec = MixtureSpec::new(&bundle, m.gamma, eta)?;
    let draws = sample_mixture(&spec, m.draws, seed)?;
    let (bias, mse) = analytic_bias_mse(&spec);
    let mean = draws.mean();
    let second = draws.second_moment();

    let summary = MixtureSummary {
        tool: TOOL,
        seed,
        p: m.p,
        gamma: m.gamma,
        rho: m.rho,
        eta: entries(&spec.eta),
        c_gamma: spec.c_gamma.is_finite().then_some(spec.c_gamma),
        lambda: spec.lambda,
        xi: spec.xi,
        draws: draws.count(),
        proposals: draws.proposals,
        truncated_fraction: draws.truncated_fraction(),
        normal_fraction: 1.0 - draws.truncated_fraction(),
        v_rt: rows(&spec.v_rt),
        v_eff: rows(&spec.v_eff),
        analytic_bias: entries(&bias),
        analytic_mse: rows(&mse),
        empirical_sd: (0..m.p).map(|k| (second[(k, k)] - mean[k] * mean[k]).max(0.0).sqrt()).collect(),
        empirical_mean: entries(&mean),
        empirical_second_moment: rows(&second),
    };

    create_dir(&io.out)?;
    write_json(&io.out.join("summary.json"), &summary)?;

    let path = io.out.join("draws.csv");
    let mut w = csv_writer(&path)?;
    let mut header: Vec<String> = (1..=m.p).map(|k| format!("z{k}")).collect();
    header.push("component".into());
    w.write_record(&header)?;
    for i in 0..draws.count() {
        let mut fields: Vec<String> = draws.draws.row(i).iter().map(f64::to_string).collect();
        fields.push(if draws.component_flags[i] { "truncated" } else { "normal" }.into());
        w.write_record(&fields)?;
    }
    finish(w, &path)?;

    let path = io.out.join("density.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["coordinate", "x", "mixture", "truncated_branch", "normal_branch"])?;
    for k in 0..m.p {
        let g = density_grid(&draws, k, m.bins);
        for i in 0..g.x.len() {
            w.write_record([
                format!("z{}", k + 1),
                g.x[i].to_string(),
                g.mixture[i].to_string(),
                g.truncated_branch[i].to_string(),
                g.normal_branch[i].to_string(),
            ])?;
        }
    }
    finish(w, &path)?;
    Ok(summary)
}
