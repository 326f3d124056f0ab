//! Confidence intervals for the elastic estimator.
//!
//! When the gate statistic is small relative to `kappa_n = sqrt(log n)` the
//! local parameter `eta` is only known up to a confidence region, so the
//! interval takes the least favourable mixture quantiles over that region.
//! Otherwise the estimator behaves like the trial-only one and a normal
//! interval is used.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mixture::{quantile_type7, MixtureSampler, MixtureSpec};
use super::special::{chi2_quantile, normal_quantile};
use crate::error::{Error, Result};
use crate::gate::GateResult;
use crate::model::PsiVector;
use crate::score::VarianceBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiBranch {
    LocalAlternative,
    FixedAlternative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CiOptions {
    pub alpha: f64,
    /// Mixture draws per `eta` point.
    pub draws: usize,
    /// Points in the `eta` search region, including `eta_hat`.
    pub points: usize,
    pub seed: u64,
}

impl Default for CiOptions {
    fn default() -> Self {
        CiOptions { alpha: 0.05, draws: 100_000, points: 200, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElasticCi {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub branch: CiBranch,
    pub alpha: f64,
    pub kappa_n: f64,
    /// The interval obtained at `eta = eta_hat` alone, with the same
    /// quantile levels (local branch only).
    pub plug_in: Option<(Vec<f64>, Vec<f64>)>,
}

/// Uniform points in `{eta : (eta - centre)' S^{-1} (eta - centre) <= r2}`,
/// given the symmetric root of `S`. The centre comes first.
fn ellipsoid_points(
    centre: &DVector<f64>,
    sqrt_s: &nalgebra::DMatrix<f64>,
    r2: f64,
    count: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    let p = centre.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut out = vec![centre.clone()];
    while out.len() < count {
        let dir = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = dir.norm();
        if norm == 0.0 {
            continue;
        }
        let radius = r2.sqrt() * rng.random::<f64>().powf(1.0 / p as f64);
        out.push(centre + sqrt_s * (dir * (radius / norm)));
    }
    out
}

/// Per-coordinate `(q_lo, q_hi)` quantiles of the mixture at one `eta`.
fn quantile_pair(
    sampler: &MixtureSampler,
    spec: &MixtureSpec,
    lo: f64,
    hi: f64,
) -> Result<Vec<(f64, f64)>> {
    let draws = sampler.draw(spec)?;
    Ok((0..spec.p())
        .map(|k| {
            let mut col = draws.column(k);
            (quantile_type7(&mut col, lo), quantile_type7(&mut col, hi))
        })
        .collect())
}

/// Elastic confidence interval around `psi_elas`; `n` is the real-world
/// sample size that scales the limit law.
pub fn elastic_ci(
    bundle: &VarianceBundle,
    gate: &GateResult,
    psi_elas: &PsiVector,
    n: usize,
    opts: &CiOptions,
) -> Result<ElasticCi> {
    let alpha = opts.alpha;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if opts.points < 2 {
        return Err(Error::InvalidArgument("the eta search needs at least 2 points".into()));
    }
    if opts.draws < 2 {
        return Err(Error::InvalidArgument("need at least 2 mixture draws".into()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("real-world sample size must be at least 2".into()));
    }
    let p = bundle.p();
    if psi_elas.len() != p || gate.p() != p {
        return Err(Error::InvalidArgument("dimension mismatch between estimate and gate".into()));
    }
    let root_n = (n as f64).sqrt();
    let kappa_n = (n as f64).ln().sqrt();
    let psi = psi_elas.as_slice();

    if gate.t_stat > kappa_n {
        let z = normal_quantile(1.0 - alpha / 2.0)?;
        let half: Vec<f64> = (0..p).map(|k| z * (bundle.v_rt[(k, k)] / n as f64).sqrt()).collect();
        return Ok(ElasticCi {
            lower: (0..p).map(|k| psi[k] - half[k]).collect(),
            upper: (0..p).map(|k| psi[k] + half[k]).collect(),
            branch: CiBranch::FixedAlternative,
            alpha,
            kappa_n,
            plug_in: None,
        });
    }

    let alpha_tilde = 1.0 - (1.0 - alpha).sqrt();
    let (q_lo, q_hi) = (alpha_tilde / 2.0, 1.0 - alpha_tilde / 2.0);
    let base = MixtureSpec::new(bundle, gate.gamma, gate.eta_hat.clone())?;
    let r2 = chi2_quantile(p, 1.0 - alpha_tilde)?;
    let etas = ellipsoid_points(&gate.eta_hat, &base.sqrt_sigma_ss, r2, opts.points, opts.seed);
    let sampler = MixtureSampler::new(p, opts.draws, opts.seed);

    let per_eta: Vec<Vec<(f64, f64)>> = etas
        .par_iter()
        .map(|eta| quantile_pair(&sampler, &base.with_eta(eta.clone()), q_lo, q_hi))
        .collect::<Result<_>>()?;

    let to_psi = |qs: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) {
        let lower = (0..p).map(|k| psi[k] - qs[k].1 / root_n).collect();
        let upper = (0..p).map(|k| psi[k] - qs[k].0 / root_n).collect();
        (lower, upper)
    };
    let envelope: Vec<(f64, f64)> = (0..p)
        .map(|k| {
            per_eta.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), qs| {
                (lo.min(qs[k].0), hi.max(qs[k].1))
            })
        })
        .collect();
    let (lower, upper) = to_psi(&envelope);
    Ok(ElasticCi {
        lower,
        upper,
        branch: CiBranch::LocalAlternative,
        alpha,
        kappa_n,
        plug_in: Some(to_psi(&per_eta[0])),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::threshold;
    use nalgebra::DMatrix;

    fn bundle() -> VarianceBundle {
        let i_rt = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 0.7]);
        let i_rw = DMatrix::from_row_slice(2, 2, &[1.5, -0.2, -0.2, 1.1]);
        VarianceBundle::from_information(i_rt, i_rw, 0.3).unwrap()
    }

    fn gate(b: &VarianceBundle, eta: Vec<f64>, gamma: f64) -> GateResult {
        let eta = DVector::from_vec(eta);
        let t = crate::gate::quadratic_form(&eta, &b.sigma_ss).unwrap();
        let c = threshold(2, gamma).unwrap();
        GateResult {
            t_stat: t,
            eta_hat: eta,
            sigma_ss_hat: b.sigma_ss.clone(),
            gamma,
            c_gamma: c,
            accepted: t < c,
            p_value: 0.5,
        }
    }

    fn opts() -> CiOptions {
        CiOptions { alpha: 0.05, draws: 4000, points: 20, seed: 9 }
    }

    #[test]
    fn fixed_branch_is_a_normal_interval() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let b = VarianceBundle::from_information(one.clone(), one, 1.0).unwrap();
        let g = GateResult {
            t_stat: 50.0,
            eta_hat: DVector::from_element(1, 10.0),
            sigma_ss_hat: b.sigma_ss.clone(),
            gamma: 0.1,
            c_gamma: threshold(1, 0.1).unwrap(),
            accepted: false,
            p_value: 0.0,
        };
        let n = 400;
        let ci = elastic_ci(&b, &g, &PsiVector::new(vec![0.3]).unwrap(), n, &opts()).unwrap();
        assert_eq!(ci.branch, CiBranch::FixedAlternative);
        let half = 1.959963984540054 / 20.0;
        assert!((ci.upper[0] - 0.3 - half).abs() < 1e-12);
        assert!((0.3 - ci.lower[0] - half).abs() < 1e-12);
    }

    #[test]
    fn local_branch_contains_plug_in() {
        let b = bundle();
        let g = gate(&b, vec![0.3, -0.2], 0.2);
        let psi = PsiVector::new(vec![1.0, 2.0]).unwrap();
        let ci = elastic_ci(&b, &g, &psi, 1000, &opts()).unwrap();
        assert_eq!(ci.branch, CiBranch::LocalAlternative);
        let (lo, hi) = ci.plug_in.clone().unwrap();
        for k in 0..2 {
            assert!(ci.lower[k] <= lo[k] && hi[k] <= ci.upper[k]);
            assert!(ci.lower[k] < psi.as_slice()[k] && psi.as_slice()[k] < ci.upper[k]);
        }
        let again = elastic_ci(&b, &g, &psi, 1000, &opts()).unwrap();
        assert_eq!(ci, again);
    }

    #[test]
    fn ellipsoid_points_stay_inside() {
        let b = bundle();
        let centre = DVector::from_vec(vec![1.0, -1.0]);
        let root = crate::asymptotics::mixture::sym_sqrt(&b.sigma_ss);
        let pts = ellipsoid_points(&centre, &root, 4.0, 500, 1);
        assert_eq!(pts[0], centre);
        let mut inner = 0;
        for e in &pts {
            let q = crate::gate::quadratic_form(&(e - &centre), &b.sigma_ss).unwrap();
            assert!(q <= 4.0 + 1e-9);
            if q <= 1.0 {
                inner += 1;
            }
        }
        // uniform in two dimensions: a quarter of the area lies within half the radius
        assert!((inner as f64 / 500.0 - 0.25).abs() < 0.07);
    }

    #[test]
    fn argument_checks() {
        let b = bundle();
        let g = gate(&b, vec![0.0, 0.0], 0.2);
        let psi = PsiVector::zeros(2);
        let bad = |o: CiOptions| elastic_ci(&b, &g, &psi, 100, &o).is_err();
        assert!(bad(CiOptions { points: 1, ..opts() }));
        assert!(bad(CiOptions { alpha: 1.0, ..opts() }));
        assert!(elastic_ci(&b, &g, &PsiVector::zeros(3), 100, &opts()).is_err());
    }
}
