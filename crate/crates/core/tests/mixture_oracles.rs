use elastic_hte::asymptotics::mixture::{analytic_bias_mse, sample_mixture, sample_truncated, MixtureSpec};
use elastic_hte::asymptotics::{chi2_quantile, mixture_quantile, noncentral_chi2_cdf};
use elastic_hte::score::VarianceBundle;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_spd(rng: &mut ChaCha8Rng, p: usize, shift: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(p, p) * shift
}

fn random_bundle(rng: &mut ChaCha8Rng, p: usize) -> VarianceBundle {
    let i_rt = random_spd(rng, p, 0.3);
    let i_rw = random_spd(rng, p, 0.3);
    VarianceBundle::from_information(i_rt, i_rw, rng.random_range(0.2..1.5)).unwrap()
}

#[test]
fn noncentral_cdf_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mu = (2.5f64 / 3.0).sqrt();
    let draws = 2_000_000;
    let hits = (0..draws)
        .filter(|_| {
            let s: f64 = (0..3).map(|_| (mu + rng.sample::<f64, _>(StandardNormal)).powi(2)).sum();
            s <= 7.81
        })
        .count();
    let mc = hits as f64 / draws as f64;
    let exact = noncentral_chi2_cdf(7.81, 3, 2.5).unwrap();
    let se = (exact * (1.0 - exact) / draws as f64).sqrt();
    assert!((mc - exact).abs() < 4.0 * se, "{mc} vs {exact}");
}

#[test]
fn truncation_acceptance_matches_noncentral_tail() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..12 {
        let p = rng.random_range(1..=3);
        let mu = DVector::from_fn(p, |_, _| rng.random_range(-1.5..1.5));
        let c = rng.random_range(0.0..8.0);
        let t = sample_truncated(&mu, c, 5000, 100 + trial).unwrap();
        let xi = 1.0 - noncentral_chi2_cdf(c, p, mu.norm_squared()).unwrap();
        let se = (xi * (1.0 - xi) / t.proposals as f64).sqrt();
        assert!((t.acceptance_rate() - xi).abs() < 3.0 * se + 1e-12, "p={p} c={c}: {} vs {xi}", t.acceptance_rate());
    }
}

#[test]
fn analytic_moments_match_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (j, (p, gamma, scale)) in [(1, 0.5, 1.0), (2, 0.1, 3.0), (3, 0.9, 1.0), (2, 0.5, 0.0)].into_iter().enumerate() {
        let bundle = random_bundle(&mut rng, p);
        let dir = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eta = if scale == 0.0 { DVector::zeros(p) } else { dir.normalize() * scale };
        let spec = MixtureSpec::new(&bundle, gamma, eta).unwrap();
        let draws = sample_mixture(&spec, 200_000, 40 + j as u64).unwrap();
        let (bias, mse) = analytic_bias_mse(&spec);
        let m = draws.count() as f64;
        for a in 0..p {
            let col = draws.column(a);
            let mean = col.iter().sum::<f64>() / m;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
            assert!((mean - bias[a]).abs() < 4.0 * sd / m.sqrt(), "bias {a}: {mean} vs {}", bias[a]);
            for b in 0..p {
                let prod: Vec<f64> = (0..draws.count()).map(|i| draws.draws[(i, a)] * draws.draws[(i, b)]).collect();
                let pm = prod.iter().sum::<f64>() / m;
                let psd = (prod.iter().map(|v| (v - pm).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
                assert!((pm - mse[(a, b)]).abs() < 4.0 * psd / m.sqrt(), "mse {a}{b}: {pm} vs {}", mse[(a, b)]);
            }
        }
        // the branch frequency is a binomial estimate of xi
        let band = 3.0 * (spec.xi * (1.0 - spec.xi) / m).sqrt() + 1e-12;
        assert!((draws.truncated_fraction() - spec.xi).abs() < band);
    }
}

#[test]
fn pure_trial_limit_has_normal_quantiles() {
    let one = DMatrix::from_element(1, 1, 1.0);
    let bundle = VarianceBundle::from_information(one.clone() * 2.0, one, 1.0).unwrap();
    let spec = MixtureSpec::new(&bundle, 1.0, DVector::zeros(1)).unwrap();
    let draws = sample_mixture(&spec, 200_000, 5).unwrap();
    let q = mixture_quantile(&draws, 0, 0.975).unwrap();
    let want = 1.959963984540054 * bundle.v_rt[(0, 0)].sqrt();
    // SE of the 0.975 quantile: sqrt(q(1-q)/M) / density
    let dens = (-0.5f64 * 1.96 * 1.96).exp() / (2.0 * std::f64::consts::PI).sqrt() / bundle.v_rt[(0, 0)].sqrt();
    let se = (0.975f64 * 0.025 / 200_000.0).sqrt() / dens;
    assert!((q - want).abs() < 4.0 * se, "{q} vs {want}");
}

#[test]
fn analytic_mse_is_monotone_at_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bundle = random_bundle(&mut rng, 3);
    let mut last = 0.0;
    for g in [0.02, 0.1, 0.3, 0.6, 0.9, 0.99] {
        let (_, mse) = analytic_bias_mse(&MixtureSpec::new(&bundle, g, DVector::zeros(3)).unwrap());
        assert!(mse.trace() > last);
        last = mse.trace();
    }
    assert!(chi2_quantile(3, 0.5).unwrap() > 0.0);
}
