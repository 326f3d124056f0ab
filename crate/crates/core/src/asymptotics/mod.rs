//! Limit theory of the elastic estimator in computable form.

pub mod ci;
pub mod mixture;
pub mod special;

pub use ci::{elastic_ci, CiBranch, CiOptions, ElasticCi};
pub use mixture::{
    analytic_bias_mse, mixture_quantile, sample_mixture, sample_truncated, select_gamma,
    MixtureDraws, MixtureSampler, MixtureSpec,
};
pub use special::{chi2_cdf, chi2_quantile, noncentral_chi2_cdf, normal_quantile};
