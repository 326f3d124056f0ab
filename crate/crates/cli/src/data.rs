//! CSV ingestion: `source` (rt/rw), `treatment` (0/1), `outcome`, then any
//! number of covariate columns, optionally one trial-propensity column.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use elastic_hte::model::{CombinedSample, Record, Source};
use elastic_hte::nuisance::{BasisSpec, TrialPropensity};
use serde::Serialize;

use crate::config::{PropensitySetting, RunConfig};
use crate::error::{CliError, CliResult};

const REQUIRED: [&str; 3] = ["source", "treatment", "outcome"];

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    /// 1-based line in the source file.
    pub line: u64,
    pub source: Source,
    pub treated: bool,
    pub outcome: f64,
    pub covariates: Vec<f64>,
    pub propensity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub covariates: Vec<String>,
    pub propensity_column: Option<String>,
    pub rows: Vec<Row>,
    pub rows_read: usize,
    /// Rows dropped for missing values.
    pub rows_rejected: usize,
}

fn missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f.eq_ignore_ascii_case("na") || f.eq_ignore_ascii_case("nan")
}

fn number(field: &str, line: u64, column: &str) -> CliResult<f64> {
    match field.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(CliError::Input(format!("line {line}: column {column}: expected a finite number, got {field:?}"))),
    }
}

impl Dataset {
    pub fn read_path(path: &Path, propensity_column: Option<&str>) -> CliResult<Self> {
        let file = std::fs::File::open(path).map_err(CliError::io(path))?;
        Dataset::read(file, propensity_column).map_err(|e| match e {
            CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn read<R: Read>(input: R, propensity_column: Option<&str>) -> CliResult<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        let find = |name: &str| header.iter().position(|h| h == name);
        let mut required = [0usize; 3];
        for (slot, name) in required.iter_mut().zip(REQUIRED) {
            *slot = find(name).ok_or_else(|| CliError::Input(format!("line 1: missing required column {name:?}")))?;
        }
        let prop_pos = match propensity_column {
            Some(name) => Some(
                find(name).ok_or_else(|| CliError::Input(format!("line 1: missing propensity column {name:?}")))?,
            ),
            None => None,
        };
        let cov_pos: Vec<usize> =
            (0..header.len()).filter(|i| !required.contains(i) && Some(*i) != prop_pos).collect();
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = header.iter().find(|h| !seen.insert(h.as_str())) {
            return Err(CliError::Input(format!("line 1: duplicate column {dup:?}")));
        }

        let mut rows = Vec::new();
        let mut rows_read = 0;
        let mut rejected = 0;
        for rec in reader.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            rows_read += 1;
            let [si, ti, yi] = required;
            let source = match rec[si].trim() {
                f if missing(f) => None,
                "rt" => Some(Source::Trial),
                "rw" => Some(Source::RealWorld),
                f => return Err(CliError::Input(format!("line {line}: column source: expected rt or rw, got {f:?}"))),
            };
            let prop_missing = prop_pos.is_some_and(|i| missing(&rec[i]));
            let trial_needs_prop = source == Some(Source::Trial) && prop_missing;
            if source.is_none()
                || missing(&rec[ti])
                || missing(&rec[yi])
                || cov_pos.iter().any(|&i| missing(&rec[i]))
                || trial_needs_prop
            {
                rejected += 1;
                continue;
            }
            let treated = match rec[ti].trim() {
                "0" => false,
                "1" => true,
                f => return Err(CliError::Input(format!("line {line}: column treatment: expected 0 or 1, got {f:?}"))),
            };
            let outcome = number(&rec[yi], line, "outcome")?;
            let covariates = cov_pos
                .iter()
                .map(|&i| number(&rec[i], line, &header[i]))
                .collect::<CliResult<Vec<f64>>>()?;
            let propensity = match prop_pos {
                Some(i) if !prop_missing => Some(number(&rec[i], line, &header[i])?),
                _ => None,
            };
            rows.push(Row { line, source: source.unwrap(), treated, outcome, covariates, propensity });
        }
        Ok(Dataset {
            covariates: cov_pos.iter().map(|&i| header[i].clone()).collect(),
            propensity_column: prop_pos.map(|i| header[i].clone()),
            rows,
            rows_read,
            rows_rejected: rejected,
        })
    }

    /// Serialise the retained rows in the same layout they were read in.
    pub fn write<W: Write>(&self, out: W) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = REQUIRED.to_vec();
        header.extend(self.covariates.iter().map(String::as_str));
        if let Some(p) = &self.propensity_column {
            header.push(p);
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut fields = vec![
                match r.source {
                    Source::Trial => "rt".to_string(),
                    Source::RealWorld => "rw".to_string(),
                },
                (r.treated as u8).to_string(),
                r.outcome.to_string(),
            ];
            fields.extend(r.covariates.iter().map(f64::to_string));
            if self.propensity_column.is_some() {
                fields.push(r.propensity.map_or_else(String::new, |v| v.to_string()));
            }
            w.write_record(&fields)?;
        }
        w.flush().map_err(|e| CliError::Input(e.to_string()))?;
        Ok(())
    }

    /// A sample laid out as a dataset, covariates named `x1..xd`.
    pub fn from_sample(sample: &CombinedSample) -> Self {
        let rows: Vec<Row> = sample
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| Row {
                line: i as u64 + 2,
                source: r.source,
                treated: r.treated,
                outcome: r.y,
                covariates: r.x[1..].to_vec(),
                propensity: None,
            })
            .collect();
        Dataset {
            covariates: (1..sample.dx()).map(|j| format!("x{j}")).collect(),
            propensity_column: None,
            rows_read: rows.len(),
            rows,
            rows_rejected: 0,
        }
    }

    fn column(&self, name: &str, key: &str) -> CliResult<usize> {
        self.covariates
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::Input(format!("{key}: unknown covariate column {name:?}")))
    }
}

/// Affine rescaling applied to one covariate: `x* = (x - mean) / sd`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Standardization {
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

/// A dataset turned into estimator inputs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample: CombinedSample,
    pub e1: TrialPropensity,
    pub basis: BasisSpec,
    /// Names of the `Z` coordinates, intercept first.
    pub coefficient_names: Vec<String>,
    pub standardization: Vec<Standardization>,
}

pub fn prepare(data: &Dataset, cfg: &RunConfig) -> CliResult<Prepared> {
    let mut rows = data.rows.clone();
    let mut standardization = Vec::new();
    for name in &cfg.data.standardize {
        let j = data.column(name, "data.standardize")?;
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r.covariates[j]).sum::<f64>() / n;
        let sd = (rows.iter().map(|r| (r.covariates[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(CliError::Input(format!("data.standardize: column {name:?} has no spread")));
        }
        for r in &mut rows {
            r.covariates[j] = (r.covariates[j] - mean) / sd;
        }
        standardization.push(Standardization { column: name.clone(), mean, sd });
    }

    let modifiers: Vec<String> = match &cfg.model.effect_modifiers {
        Some(m) => m.clone(),
        None => data.covariates.clone(),
    };
    let mut z_idx = vec![0usize];
    for name in &modifiers {
        z_idx.push(data.column(name, "model.effect_modifiers")? + 1);
    }
    z_idx.sort_unstable();
    let z_idx: Arc<[usize]> = z_idx.into();
    let coefficient_names = std::iter::once("intercept".to_string())
        .chain(z_idx[1..].iter().map(|&j| data.covariates[j - 1].clone()))
        .collect();

    let mut omit = Vec::new();
    for name in &cfg.nuisance.basis.omit {
        omit.push(data.column(name, "nuisance.basis.omit")? + 1);
    }
    let basis = BasisSpec {
        include_squares: cfg.nuisance.basis.squares,
        include_pairwise_interactions: cfg.nuisance.basis.interactions,
        omit_indices: omit,
    };

    let records = rows
        .iter()
        .map(|r| {
            let x = std::iter::once(1.0).chain(r.covariates.iter().copied()).collect();
            Record::new(r.source, r.treated, r.outcome, x, z_idx.clone())
                .map_err(|e| CliError::Input(format!("line {}: {e}", r.line)))
        })
        .collect::<CliResult<Vec<Record>>>()?;
    let sample = CombinedSample::new(records)?;

    let e1 = match &cfg.trial.propensity {
        PropensitySetting::Constant(e) => TrialPropensity::Constant(*e),
        PropensitySetting::Column(_) => {
            TrialPropensity::PerRecord(rows.iter().map(|r| r.propensity.unwrap_or(0.5)).collect())
        }
    };
    e1.validate(&sample)?;
    Ok(Prepared { sample, e1, basis, coefficient_names, standardization })
}
