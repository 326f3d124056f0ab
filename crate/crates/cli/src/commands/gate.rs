use serde::Serialize;

use super::estimate::{fit, gate_summary, DataSummary, Fitted, GateSummary};
use super::{create_dir, write_json, Io, Tool, TOOL};
use crate::config::RunConfig;
use crate::data::Standardization;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Serialize)]
pub struct Level {
    pub gamma: f64,
    pub c_gamma: f64,
    pub decision: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct GateReport {
    pub tool: Tool,
    pub data: DataSummary,
    pub standardization: Vec<Standardization>,
    /// The level the estimator itself would use.
    pub selected: GateSummary,
    pub levels: Vec<Level>,
}

pub fn run(io: &Io, cfg: &RunConfig) -> CliResult<GateReport> {
    let path = io.data.as_deref().ok_or_else(|| CliError::Input("--data is required".into()))?;
    let Fitted { data, prepared, fit } = fit(path, cfg, &io.out)?;
    let levels = cfg
        .gate
        .levels
        .iter()
        .map(|&g| {
            let at = fit.gate.at_gamma(g)?;
            Ok(Level { gamma: g, c_gamma: at.c_gamma, decision: if at.accepted { "accept" } else { "reject" } })
        })
        .collect::<CliResult<Vec<Level>>>()?;
    let report = GateReport {
        tool: TOOL,
        data,
        standardization: prepared.standardization,
        selected: gate_summary(&fit, cfg),
        levels,
    };
    create_dir(&io.out)?;
    write_json(&io.out.join("gate.json"), &report)?;
    Ok(report)
}
