//! Samples and the parametric family of heterogeneous treatment effects.
//!
//! A [`CombinedSample`] holds trial records (`delta = 1`) and real-world
//! records (`delta = 0`). Throughout the crate `m` is the trial size, `n` the
//! real-world size and `rho = m / n`.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Data source of a record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Trial,
    RealWorld,
}

impl Source {
    pub fn delta(self) -> u8 {
        match self {
            Source::Trial => 1,
            Source::RealWorld => 0,
        }
    }

    pub fn from_delta(delta: u8) -> Result<Self> {
        match delta {
            1 => Ok(Source::Trial),
            0 => Ok(Source::RealWorld),
            d => Err(Error::InvalidArgument(format!("delta must be 0 or 1, got {d}"))),
        }
    }
}

/// One subject. `x[0]` is the intercept; `z_idx` selects the effect
/// modifiers out of `x`, so `Z` is always a subvector of `X`.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub source: Source,
    pub treated: bool,
    pub y: f64,
    pub x: Vec<f64>,
    pub z_idx: Arc<[usize]>,
}

impl Record {
    pub fn new(
        source: Source,
        treated: bool,
        y: f64,
        x: Vec<f64>,
        z_idx: Arc<[usize]>,
    ) -> Result<Self> {
        if x.first() != Some(&1.0) {
            return Err(Error::InvalidArgument(
                "covariate vector must start with the intercept 1".into(),
            ));
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite outcome or covariate".into()));
        }
        validate_z_idx(&z_idx, x.len())?;
        Ok(Record { source, treated, y, x, z_idx })
    }

    /// Treatment as 0.0 / 1.0.
    #[inline]
    pub fn a(&self) -> f64 {
        if self.treated {
            1.0
        } else {
            0.0
        }
    }

    pub fn z(&self) -> Vec<f64> {
        self.z_idx.iter().map(|&j| self.x[j]).collect()
    }

    pub fn is_trial(&self) -> bool {
        self.source == Source::Trial
    }
}

fn validate_z_idx(z_idx: &[usize], dx: usize) -> Result<()> {
    if z_idx.is_empty() {
        return Err(Error::InvalidArgument("effect-modifier index set is empty".into()));
    }
    if z_idx[0] != 0 {
        return Err(Error::InvalidArgument(
            "the first effect modifier must be the intercept (index 0)".into(),
        ));
    }
    if z_idx.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "effect-modifier indices must be strictly increasing".into(),
        ));
    }
    if *z_idx.last().unwrap() >= dx {
        return Err(Error::InvalidArgument(format!(
            "effect-modifier index {} out of bounds for {dx} covariates",
            z_idx.last().unwrap()
        )));
    }
    Ok(())
}

/// Trial and real-world records in one container.
///
/// The effect modifiers of every record are cached row-major in `z_cache`;
/// the cache is derived from `x` and `z_idx` at construction and never
/// edited independently.
#[derive(Clone, Debug)]
pub struct CombinedSample {
    records: Vec<Record>,
    z_idx: Arc<[usize]>,
    z_cache: Vec<f64>,
    dx: usize,
    m: usize,
    n: usize,
}

impl CombinedSample {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidArgument("sample has no records".into()))?;
        let dx = first.x.len();
        let z_idx = first.z_idx.clone();
        validate_z_idx(&z_idx, dx)?;
        let mut m = 0;
        for (i, r) in records.iter().enumerate() {
            if r.x.len() != dx {
                return Err(Error::InvalidArgument(format!(
                    "record {i} has {} covariates, expected {dx}",
                    r.x.len()
                )));
            }
            if *r.z_idx != *z_idx {
                return Err(Error::InvalidArgument(format!(
                    "record {i} uses a different effect-modifier selection"
                )));
            }
            if r.x[0] != 1.0 {
                return Err(Error::InvalidArgument(format!("record {i} lacks the intercept")));
            }
            if r.is_trial() {
                m += 1;
            }
        }
        let n = records.len() - m;
        if m == 0 {
            return Err(Error::Precondition("rt stratum empty".into()));
        }
        if n == 0 {
            return Err(Error::Precondition("rw stratum empty".into()));
        }
        let p = z_idx.len();
        let mut z_cache = Vec::with_capacity(records.len() * p);
        for r in &records {
            z_cache.extend(z_idx.iter().map(|&j| r.x[j]));
        }
        Ok(CombinedSample { records, z_idx, z_cache, dx, m, n })
    }

    /// A new sample built from the records at `indices` (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        CombinedSample::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn z_idx(&self) -> &[usize] {
        &self.z_idx
    }

    #[inline]
    pub fn z(&self, i: usize) -> &[f64] {
        let p = self.z_idx.len();
        &self.z_cache[i * p..(i + 1) * p]
    }

    /// Covariate dimension, intercept included.
    pub fn dx(&self) -> usize {
        self.dx
    }

    /// Number of effect modifiers.
    pub fn p(&self) -> usize {
        self.z_idx.len()
    }

    /// Trial size.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Real-world size.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rho(&self) -> f64 {
        self.m as f64 / self.n as f64
    }

    pub fn indices_of(&self, source: Source) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].source == source).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HteKind {
    /// `tau(z) = z'psi`, continuous outcomes.
    Linear,
    /// `tau(z) = (exp(z'psi) - 1) / (exp(z'psi) + 1)`, binary outcomes.
    RiskDifference,
}

/// Largest f64 below 1.
const RD_BOUND: f64 = 1.0 - f64::EPSILON / 2.0;

impl HteKind {
    /// Effect at linear index `s = z'psi`.
    #[inline]
    pub fn value(self, s: f64) -> f64 {
        match self {
            HteKind::Linear => s,
            // (e^s - 1)/(e^s + 1) = tanh(s/2), which cannot overflow. The
            // clamp keeps the value strictly inside (-1, 1) once tanh rounds
            // to +-1.
            HteKind::RiskDifference => (0.5 * s).tanh().clamp(-RD_BOUND, RD_BOUND),
        }
    }

    /// d tau / ds.
    #[inline]
    pub fn slope(self, s: f64) -> f64 {
        match self {
            HteKind::Linear => 1.0,
            HteKind::RiskDifference => {
                let t = (0.5 * s).tanh();
                0.5 * (1.0 - t * t)
            }
        }
    }

    /// d^2 tau / ds^2.
    #[inline]
    pub fn curvature(self, s: f64) -> f64 {
        match self {
            HteKind::Linear => 0.0,
            HteKind::RiskDifference => {
                let t = (0.5 * s).tanh();
                -0.5 * t * (1.0 - t * t)
            }
        }
    }

    /// Whether outcomes are treated as binary by the nuisance fits.
    pub fn binary_outcome(self) -> bool {
        matches!(self, HteKind::RiskDifference)
    }
}

/// Parametric HTE family with `p` parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HteModel {
    pub kind: HteKind,
    pub p: usize,
}

/// Parameter vector of an [`HteModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct PsiVector(pub DVector<f64>);

impl PsiVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("psi has non-finite entries".into()));
        }
        Ok(PsiVector(DVector::from_vec(values)))
    }

    pub fn zeros(p: usize) -> Self {
        PsiVector(DVector::zeros(p))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

impl From<DVector<f64>> for PsiVector {
    fn from(v: DVector<f64>) -> Self {
        PsiVector(v)
    }
}

#[inline]
pub(crate) fn dot(z: &[f64], psi: &DVector<f64>) -> f64 {
    z.iter().zip(psi.iter()).map(|(a, b)| a * b).sum()
}

impl HteModel {
    pub fn new(kind: HteKind, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidArgument("HTE model needs at least one parameter".into()));
        }
        Ok(HteModel { kind, p })
    }

    fn check(&self, psi: &PsiVector, z: &[f64]) -> Result<()> {
        if psi.len() != self.p || z.len() != self.p {
            return Err(Error::InvalidArgument(format!(
                "dimension mismatch: model p = {}, |psi| = {}, |z| = {}",
                self.p,
                psi.len(),
                z.len()
            )));
        }
        Ok(())
    }

    pub fn tau(&self, psi: &PsiVector, z: &[f64]) -> Result<f64> {
        self.check(psi, z)?;
        Ok(self.kind.value(dot(z, &psi.0)))
    }

    pub fn tau_grad(&self, psi: &PsiVector, z: &[f64]) -> Result<DVector<f64>> {
        self.check(psi, z)?;
        let g = self.kind.slope(dot(z, &psi.0));
        Ok(DVector::from_iterator(z.len(), z.iter().map(|v| v * g)))
    }

    /// `H = Y - tau(Z) A`, the outcome with the effect of the received
    /// treatment removed.
    pub fn h_residual(&self, psi: &PsiVector, record: &Record) -> Result<f64> {
        let z = record.z();
        Ok(record.y - self.tau(psi, &z)? * record.a())
    }
}
