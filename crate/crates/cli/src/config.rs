//! The TOML run configuration. Every section is optional; unknown keys are
//! rejected so that typos surface before any computation starts.

use std::path::{Path, PathBuf};

use elastic_hte::estimator::{GammaChoice, Method};
use elastic_hte::model::HteKind;
use elastic_hte::simulate::{DgpConfig, StudyConfig, DEFAULT_B_GRID};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub nuisance: NuisanceSection,
    pub trial: TrialSection,
    pub gate: GateSection,
    pub ci: CiSection,
    pub data: DataSection,
    pub output: OutputSection,
    pub study: StudySection,
    pub mixture: MixtureSection,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: HteKind,
    /// Covariate columns entering `Z` after the intercept; all covariates
    /// when absent.
    pub effect_modifiers: Option<Vec<String>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { kind: HteKind::Linear, effect_modifiers: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceSection {
    pub basis: BasisSection,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisSection {
    pub squares: bool,
    pub interactions: bool,
    /// Covariate columns left out of the nuisance basis.
    pub omit: Vec<String>,
}

impl Default for BasisSection {
    fn default() -> Self {
        BasisSection { squares: true, interactions: true, omit: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum PropensitySetting {
    Constant(f64),
    Column(String),
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialSection {
    pub propensity: PropensitySetting,
}

impl Default for TrialSection {
    fn default() -> Self {
        TrialSection { propensity: PropensitySetting::Constant(0.5) }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum GammaSetting {
    Fixed(f64),
    Word(String),
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSection {
    /// `"adaptive"` or a level in (0, 1).
    pub gamma: GammaSetting,
    /// Candidate levels for the adaptive choice.
    pub grid: Option<Vec<f64>>,
    /// Levels tabulated by the `gate` command.
    pub levels: Vec<f64>,
}

impl Default for GateSection {
    fn default() -> Self {
        GateSection {
            gamma: GammaSetting::Word("adaptive".into()),
            grid: None,
            levels: vec![0.01, 0.05, 0.10, 0.20],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CiSection {
    pub alpha: f64,
    /// Mixture draws per search point.
    #[serde(rename = "M")]
    pub draws: usize,
    /// Points in the `eta` search region.
    #[serde(rename = "L")]
    pub points: usize,
}

impl Default for CiSection {
    fn default() -> Self {
        CiSection { alpha: 0.05, draws: 100_000, points: 200 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Covariate columns rescaled to mean 0, SD 1 before fitting.
    pub standardize: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub reps: usize,
    pub b_grid: Vec<f64>,
    pub methods: Vec<Method>,
    /// Bootstrap replicates for the Wald intervals; 0 = sandwich.
    pub bootstrap: usize,
    /// Elastic CI cost per replication (the `ci` section governs `estimate`).
    pub ci_draws: usize,
    pub ci_points: usize,
    pub dgp: DgpConfig,
}

impl Default for StudySection {
    fn default() -> Self {
        let d = StudyConfig::default();
        StudySection {
            reps: d.reps,
            b_grid: DEFAULT_B_GRID.to_vec(),
            methods: d.methods,
            bootstrap: d.bootstrap,
            ci_draws: d.ci_draws,
            ci_points: d.ci_points,
            dgp: d.dgp,
        }
    }
}

/// Either a scalar (times the identity) or explicit rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSetting {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSetting {
    pub fn to_matrix(&self, p: usize) -> nalgebra::DMatrix<f64> {
        match self {
            MatrixSetting::Scalar(s) => nalgebra::DMatrix::identity(p, p) * *s,
            MatrixSetting::Rows(rows) => nalgebra::DMatrix::from_fn(p, p, |i, j| rows[i][j]),
        }
    }

    fn shape_ok(&self, p: usize) -> bool {
        match self {
            MatrixSetting::Scalar(s) => s.is_finite(),
            MatrixSetting::Rows(rows) => {
                rows.len() == p && rows.iter().all(|r| r.len() == p && r.iter().all(|v| v.is_finite()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSection {
    pub p: usize,
    pub i_rt: MatrixSetting,
    pub i_rw: MatrixSetting,
    pub rho: f64,
    pub gamma: f64,
    /// Zero when empty.
    pub eta: Vec<f64>,
    #[serde(rename = "M")]
    pub draws: usize,
    pub bins: usize,
}

impl Default for MixtureSection {
    fn default() -> Self {
        MixtureSection {
            p: 1,
            i_rt: MatrixSetting::Scalar(1.0),
            i_rw: MatrixSetting::Scalar(1.0),
            rho: 1.0,
            gamma: 0.8,
            eta: Vec::new(),
            draws: 100_000,
            bins: 100,
        }
    }
}

/// 1-based line of the first `key = ...` assignment, for diagnostics.
fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

struct Checker<'a> {
    text: &'a str,
    problems: Vec<String>,
}

impl Checker<'_> {
    fn require(&mut self, ok: bool, key: &str, msg: impl Into<String>) {
        if !ok {
            let leaf = key.rsplit('.').next().unwrap_or(key);
            let msg = msg.into();
            self.problems.push(match line_of(self.text, leaf) {
                Some(line) => format!("line {line}: {key}: {msg}"),
                None => format!("{key}: {msg}"),
            });
        }
    }
}

fn open_unit(v: f64) -> bool {
    v > 0.0 && v < 1.0
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
                RunConfig::parse(&text).map_err(|e| match e {
                    CliError::Input(m) => CliError::Input(format!("{}: {m}", p.display())),
                    e => e,
                })
            }
        }
    }

    /// Schema checks beyond what deserialisation enforces. All problems are
    /// reported together.
    pub fn validate(&self, text: &str) -> CliResult<()> {
        let mut c = Checker { text, problems: Vec::new() };

        if let Some(mods) = &self.model.effect_modifiers {
            let mut seen = std::collections::HashSet::new();
            c.require(mods.iter().all(|m| seen.insert(m)), "model.effect_modifiers", "duplicate column");
        }
        match &self.trial.propensity {
            PropensitySetting::Constant(e) => {
                c.require(open_unit(*e), "trial.propensity", format!("must lie in (0, 1), got {e}"))
            }
            PropensitySetting::Column(name) => {
                c.require(!name.trim().is_empty(), "trial.propensity", "column name is empty")
            }
        }
        match &self.gate.gamma {
            GammaSetting::Fixed(g) => c.require(open_unit(*g), "gate.gamma", format!("must lie in (0, 1), got {g}")),
            GammaSetting::Word(w) => {
                c.require(w == "adaptive", "gate.gamma", format!("expected \"adaptive\" or a number, got {w:?}"))
            }
        }
        if let Some(grid) = &self.gate.grid {
            c.require(!grid.is_empty(), "gate.grid", "is empty");
            c.require(grid.iter().all(|&g| open_unit(g)), "gate.grid", "levels must lie in (0, 1)");
        }
        c.require(!self.gate.levels.is_empty(), "gate.levels", "is empty");
        c.require(self.gate.levels.iter().all(|&g| open_unit(g)), "gate.levels", "levels must lie in (0, 1)");

        c.require(open_unit(self.ci.alpha), "ci.alpha", format!("must lie in (0, 1), got {}", self.ci.alpha));
        c.require(self.ci.draws >= 2, "ci.M", "needs at least 2 draws");
        c.require(self.ci.points >= 2, "ci.L", "needs at least 2 points");

        let s = &self.study;
        c.require(s.reps >= 1, "study.reps", "must be at least 1");
        c.require(!s.b_grid.is_empty(), "study.b_grid", "is empty");
        c.require(s.b_grid.iter().all(|b| b.is_finite()), "study.b_grid", "values must be finite");
        c.require(!s.methods.is_empty(), "study.methods", "is empty");
        let mut seen = std::collections::HashSet::new();
        c.require(s.methods.iter().all(|m| seen.insert(*m)), "study.methods", "duplicate method");
        c.require(s.ci_draws >= 2, "study.ci_draws", "needs at least 2 draws");
        c.require(s.ci_points >= 2, "study.ci_points", "needs at least 2 points");
        if let Err(e) = s.dgp.validate() {
            c.problems.push(format!("study.dgp: {e}"));
        }

        let m = &self.mixture;
        c.require(m.p >= 1, "mixture.p", "must be at least 1");
        c.require(m.i_rt.shape_ok(m.p), "mixture.i_rt", format!("must be a scalar or {0} x {0} finite rows", m.p));
        c.require(m.i_rw.shape_ok(m.p), "mixture.i_rw", format!("must be a scalar or {0} x {0} finite rows", m.p));
        c.require(m.rho > 0.0 && m.rho.is_finite(), "mixture.rho", "must be positive");
        c.require((0.0..=1.0).contains(&m.gamma), "mixture.gamma", "must lie in [0, 1]");
        c.require(m.eta.is_empty() || m.eta.len() == m.p, "mixture.eta", format!("needs {} entries", m.p));
        c.require(m.eta.iter().all(|v| v.is_finite()), "mixture.eta", "values must be finite");
        c.require(m.draws >= 1, "mixture.M", "needs at least 1 draw");
        c.require(m.bins >= 1, "mixture.bins", "needs at least 1 bin");

        if c.problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Input(format!("invalid configuration:\n  {}", c.problems.join("\n  "))))
        }
    }

    pub fn gamma_choice(&self) -> GammaChoice {
        match (&self.gate.gamma, &self.gate.grid) {
            (GammaSetting::Fixed(g), _) => GammaChoice::Fixed(*g),
            (GammaSetting::Word(_), Some(grid)) => GammaChoice::Adaptive(grid.clone()),
            (GammaSetting::Word(_), None) => GammaChoice::adaptive(),
        }
    }

    /// Apply a `--gamma` flag (`adaptive` or a number).
    pub fn set_gamma(&mut self, flag: &str) -> CliResult<()> {
        let setting = match flag.trim() {
            "adaptive" => GammaSetting::Word("adaptive".into()),
            v => GammaSetting::Fixed(
                v.parse().map_err(|_| CliError::Input(format!("--gamma: expected \"adaptive\" or a number, got {v:?}")))?,
            ),
        };
        if let GammaSetting::Fixed(g) = setting {
            if !open_unit(g) {
                return Err(CliError::Input(format!("--gamma: must lie in (0, 1), got {g}")));
            }
        }
        self.gate.gamma = setting;
        Ok(())
    }

    pub fn set_alpha(&mut self, alpha: f64) -> CliResult<()> {
        if !open_unit(alpha) {
            return Err(CliError::Input(format!("--alpha: must lie in (0, 1), got {alpha}")));
        }
        self.ci.alpha = alpha;
        Ok(())
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from("elastic-hte-out"))
    }
}
