//! The Gibbs sampler: censored-cell imputation plus every full-conditional
//! update, orchestrated into seeded chains.

use nalgebra::{DMatrix, DVector};

use crate::data::{CensorMark, MixedDataset};
use crate::error::{Error, Result};
use crate::model::{CovariancePayload, Hyperparameters, InitResult, ModelState, StructureTag};
use crate::stochastic::{
    draw_beta, draw_categorical, draw_dirichlet, draw_inverse_gamma, draw_inverse_wishart,
    log_dirichlet_pdf, log_normal_pdf, logpdf_mvn, RngStream, SpdMatrix, TruncationSide,
};

#[derive(Debug, Clone)]
pub struct ChainConfig {
    /// Total Gibbs iterations T.
    pub total_iterations: usize,
    /// Burn-in count t*; iterations t > t* are retained.
    pub burn_in: usize,
    pub seed: u64,
    pub chain_id: u64,
    /// Reproduce the printed spike-variance rate (no 1/2 on the quadratic
    /// sum) instead of the conjugate-correct form.
    pub paper_literal_a10: bool,
}

impl ChainConfig {
    pub fn new(total_iterations: usize, burn_in: usize, seed: u64, chain_id: u64) -> Self {
        Self {
            total_iterations,
            burn_in,
            seed,
            chain_id,
            paper_literal_a10: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.burn_in >= self.total_iterations {
            return Err(Error::Validation(format!(
                "burn-in {} must be below total iterations {}",
                self.burn_in, self.total_iterations
            )));
        }
        Ok(())
    }
}

/// Cluster-indexed parameters of one retained iteration (membership labels and
/// the working imputation matrix are summarized separately).
#[derive(Debug, Clone)]
pub struct IterationSnapshot {
    pub tau: Vec<f64>,
    pub mu: DMatrix<f64>,
    pub sigma: CovariancePayload,
    pub theta: Vec<DMatrix<f64>>,
    pub delta: Vec<bool>,
}

/// Post-burn-in output of one chain.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    pub chain_id: u64,
    pub snapshots: Vec<IterationSnapshot>,
    /// Membership-probability matrices P, one n x G matrix per retained
    /// iteration; rows are simplexes.
    pub probs: Vec<DMatrix<f64>>,
    /// Average of the working continuous matrix over retained iterations
    /// (posterior-mean imputations; observed cells are unchanged).
    pub imputed_mean: DMatrix<f64>,
}

/// A chain that errored mid-run; failures are counted, never retried.
#[derive(Debug)]
pub struct ChainFailure {
    pub chain_id: u64,
    pub iteration: usize,
    pub cause: Error,
}

impl std::fmt::Display for ChainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "chain {} failed at iteration {}: {}",
            self.chain_id, self.iteration, self.cause
        )
    }
}

/// Conditional mean and variance of continuous coordinate `m` for row `i`
/// given the other coordinates, under row i's current cluster. Derived from
/// the precision matrix: var = 1/Lambda_mm, mean = mu_m - var * sum_{p != m}
/// Lambda_mp (x_p - mu_p).
pub fn conditional_moments(state: &ModelState, i: usize, m: usize) -> Result<(f64, f64)> {
    let g = state.z[i];
    let spd = state.sigma.cluster_spd(g)?;
    let lambda = spd.inverse();
    conditional_moments_from_precision(state, &lambda, i, m, g)
}

fn conditional_moments_from_precision(
    state: &ModelState,
    lambda: &DMatrix<f64>,
    i: usize,
    m: usize,
    g: usize,
) -> Result<(f64, f64)> {
    let q = state.mu.nrows();
    let var = 1.0 / lambda[(m, m)];
    if !var.is_finite() || var <= 0.0 {
        return Err(Error::Numeric(format!(
            "non-positive conditional variance for variable {m}"
        )));
    }
    let mut cross = 0.0;
    for p in 0..q {
        if p != m {
            cross += lambda[(m, p)] * (state.x[(i, p)] - state.mu[(p, g)]);
        }
    }
    Ok((state.mu[(m, g)] - var * cross, var))
}

/// Resample every censored cell from its truncated conditional normal;
/// left-censored cells stay below their bound, right-censored above.
pub fn impute_censored(
    dataset: &MixedDataset,
    state: &mut ModelState,
    rng: &mut RngStream,
) -> Result<()> {
    let cells = dataset.censored_cells();
    if cells.is_empty() {
        return Ok(());
    }
    let n_clusters = state.n_clusters();
    let mut precisions: Vec<Option<DMatrix<f64>>> = vec![None; n_clusters];
    for (i, m) in cells {
        let g = state.z[i];
        if precisions[g].is_none() {
            precisions[g] = Some(state.sigma.cluster_spd(g)?.inverse());
        }
        let lambda = precisions[g].as_ref().unwrap();
        let (mu_star, var_star) = conditional_moments_from_precision(state, lambda, i, m, g)?;
        let (bound, side) = match dataset.censor_mark(i, m) {
            CensorMark::LeftCensored { bound } => (bound, TruncationSide::BelowBound),
            CensorMark::RightCensored { bound } => (bound, TruncationSide::AboveBound),
            CensorMark::Observed => unreachable!("censored_cells only returns censored cells"),
        };
        state.x[(i, m)] =
            crate::stochastic::draw_truncated_normal(mu_star, var_star.sqrt(), bound, side, rng)?;
    }
    Ok(())
}

/// Draw the covariance payload from its structure-specific full conditional.
pub fn update_covariance(
    state: &mut ModelState,
    hyper: &Hyperparameters,
    rng: &mut RngStream,
) -> Result<()> {
    let n = state.x.nrows();
    let q = state.x.ncols();
    let sizes = state.cluster_sizes();
    match &mut state.sigma {
        CovariancePayload::Eei { variances } => {
            for m in 0..q {
                let mut ss = 0.0;
                for i in 0..n {
                    let d = state.x[(i, m)] - state.mu[(m, state.z[i])];
                    ss += d * d;
                }
                variances[m] =
                    draw_inverse_gamma(hyper.eei_a + n as f64 / 2.0, hyper.eei_b + 0.5 * ss, rng)?;
            }
        }
        CovariancePayload::Eee { sigma } => {
            let mut scatter = hyper.eee_s0.clone();
            for i in 0..n {
                let d = state.x.row(i).transpose() - state.mu.column(state.z[i]);
                scatter += &d * d.transpose();
            }
            let scale = SpdMatrix::new(scatter, "sigma_posterior_scale")?;
            *sigma = draw_inverse_wishart(hyper.eee_nu0 + n as f64, &scale, rng)?;
        }
        CovariancePayload::Vvv { sigmas } => {
            for g in 0..sigmas.len() {
                let mut scatter = hyper.vvv_s[g].clone();
                for i in 0..n {
                    if state.z[i] == g {
                        let d = state.x.row(i).transpose() - state.mu.column(g);
                        scatter += &d * d.transpose();
                    }
                }
                let scale = SpdMatrix::new(scatter, "sigma_posterior_scale")?;
                sigmas[g] = draw_inverse_wishart(hyper.vvv_nu[g] + sizes[g] as f64, &scale, rng)?;
            }
        }
    }
    Ok(())
}

/// Draw every cluster mean from its normal full conditional. `xbar` is the
/// marginal mean vector, zero under standardization but kept explicit. The
/// shared-diagonal branch has no cross-variable term; the full-covariance
/// branches include the precision-weighted correction over other variables.
pub fn update_means(
    state: &mut ModelState,
    hyper: &Hyperparameters,
    xbar: &[f64],
    rng: &mut RngStream,
) -> Result<()> {
    let n = state.x.nrows();
    let q = state.x.ncols();
    let n_clusters = state.n_clusters();
    let sizes = state.cluster_sizes();
    let omega = hyper.omega;
    let s2d0 = state.sigma2_delta0;

    match state.sigma.tag() {
        StructureTag::Eei => {
            let variances = match &state.sigma {
                CovariancePayload::Eei { variances } => variances.clone(),
                _ => unreachable!(),
            };
            for g in 0..n_clusters {
                for m in 0..q {
                    let v0 = if state.delta_at(m, g) { omega * s2d0 } else { s2d0 };
                    let sm2 = variances[m];
                    let mut zx = 0.0;
                    for i in 0..n {
                        if state.z[i] == g {
                            zx += state.x[(i, m)];
                        }
                    }
                    let denom = sm2 + sizes[g] as f64 * v0;
                    let mean = (xbar[m] * sm2 + v0 * zx) / denom;
                    let var = v0 * sm2 / denom;
                    state.mu[(m, g)] = draw_normal(mean, var, rng);
                }
            }
        }
        StructureTag::Eee | StructureTag::Vvv => {
            for g in 0..n_clusters {
                let lambda = state.sigma.cluster_spd(g)?.inverse();
                for m in 0..q {
                    let v0 = if state.delta_at(m, g) { omega * s2d0 } else { s2d0 };
                    let lmm = lambda[(m, m)];
                    let mut zx = 0.0;
                    let mut w_g = 0.0;
                    for i in 0..n {
                        if state.z[i] == g {
                            zx += state.x[(i, m)];
                            for p in 0..q {
                                if p != m {
                                    w_g += lambda[(m, p)] * (state.x[(i, p)] - state.mu[(p, g)]);
                                }
                            }
                        }
                    }
                    let denom = 1.0 + sizes[g] as f64 * lmm * v0;
                    let mean = (xbar[m] + v0 * (lmm * zx + w_g)) / denom;
                    let var = v0 / denom;
                    state.mu[(m, g)] = draw_normal(mean, var, rng);
                }
            }
        }
    }
    Ok(())
}

fn draw_normal(mean: f64, var: f64, rng: &mut RngStream) -> f64 {
    let std: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
    mean + var.sqrt() * std
}

/// Draw every categorical probability vector from its Dirichlet conditional,
/// with slab or spike concentration chosen by the inclusion indicator.
pub fn update_theta(
    dataset: &MixedDataset,
    state: &mut ModelState,
    hyper: &Hyperparameters,
    rng: &mut RngStream,
) -> Result<()> {
    let q = dataset.q();
    let n = dataset.n();
    for (j, &l) in dataset.levels().iter().enumerate() {
        let m_total = q + j;
        for g in 0..state.n_clusters() {
            let base = if state.delta_at(m_total, g) {
                &hyper.alpha_slab[j]
            } else {
                &hyper.alpha_spike[j]
            };
            let mut alpha = base.clone();
            for i in 0..n {
                if state.z[i] == g {
                    alpha[dataset.categorical_code(i, j) - 1] += 1.0;
                }
            }
            let draw = draw_dirichlet(&alpha, rng)?;
            for lev in 0..l {
                state.theta[j][(g, lev)] = draw[lev];
            }
        }
    }
    Ok(())
}

/// Posterior inclusion probability for one continuous mean under the
/// slab/spike normal pair, computed in log space.
pub fn continuous_inclusion_prob(
    mu_centered: f64,
    p1: f64,
    omega: f64,
    sigma2_delta0: f64,
) -> f64 {
    let p1 = p1.clamp(1e-300, 1.0 - 1e-16);
    let log_slab = p1.ln() + log_normal_pdf(mu_centered, 0.0, omega * sigma2_delta0);
    let log_spike = (1.0 - p1).ln() + log_normal_pdf(mu_centered, 0.0, sigma2_delta0);
    1.0 / (1.0 + (log_spike - log_slab).exp())
}

/// Posterior inclusion probability for one categorical probability vector
/// under the slab/spike Dirichlet pair, computed in log space.
pub fn categorical_inclusion_prob(theta_row: &[f64], slab: &[f64], spike: &[f64], p2: f64) -> f64 {
    let p2 = p2.clamp(1e-300, 1.0 - 1e-16);
    let log_slab = p2.ln() + log_dirichlet_pdf(theta_row, slab);
    let log_spike = (1.0 - p2).ln() + log_dirichlet_pdf(theta_row, spike);
    1.0 / (1.0 + (log_spike - log_slab).exp())
}

/// Draw every inclusion indicator from its Bernoulli conditional.
pub fn update_delta(
    state: &mut ModelState,
    hyper: &Hyperparameters,
    xbar: &[f64],
    rng: &mut RngStream,
) -> Result<()> {
    let q = state.mu.nrows();
    for g in 0..state.n_clusters() {
        for m in 0..q {
            let prob = continuous_inclusion_prob(
                state.mu[(m, g)] - xbar[m],
                state.p1[m],
                hyper.omega,
                state.sigma2_delta0,
            );
            let u: f64 = rand::Rng::gen(rng);
            state.set_delta(m, g, u < prob);
        }
        for j in 0..state.theta.len() {
            let row: Vec<f64> = state.theta[j].row(g).iter().copied().collect();
            let prob = categorical_inclusion_prob(
                &row,
                &hyper.alpha_slab[j],
                &hyper.alpha_spike[j],
                state.p2[j],
            );
            let u: f64 = rand::Rng::gen(rng);
            state.set_delta(q + j, g, u < prob);
        }
    }
    Ok(())
}

/// Posterior shape and rate for the spike variance. The conjugate form puts
/// 1/2 on both the count and the quadratic sum; the literal switch drops the
/// 1/2 on the rate.
pub fn spike_variance_posterior(
    state: &ModelState,
    hyper: &Hyperparameters,
    xbar: &[f64],
    paper_literal: bool,
) -> (f64, f64) {
    let q = state.mu.nrows();
    let mut count = 0.0;
    let mut quad = 0.0;
    for m in 0..q {
        for g in 0..state.n_clusters() {
            if !state.delta_at(m, g) {
                count += 1.0;
                let d = state.mu[(m, g)] - xbar[m];
                quad += d * d;
            }
        }
    }
    let rate_factor = if paper_literal { 1.0 } else { 0.5 };
    (
        hyper.a_delta0 + 0.5 * count,
        hyper.b_delta0 + rate_factor * quad,
    )
}

pub fn update_spike_variance(
    state: &mut ModelState,
    hyper: &Hyperparameters,
    xbar: &[f64],
    paper_literal: bool,
    rng: &mut RngStream,
) -> Result<()> {
    let (shape, rate) = spike_variance_posterior(state, hyper, xbar, paper_literal);
    state.sigma2_delta0 = draw_inverse_gamma(shape, rate, rng)?;
    Ok(())
}

/// Draw the per-variable inclusion probabilities from their Beta conditionals.
pub fn update_inclusion_probs(
    state: &mut ModelState,
    hyper: &Hyperparameters,
    rng: &mut RngStream,
) -> Result<()> {
    let q = state.mu.nrows();
    let g_total = state.n_clusters() as f64;
    for m in 0..q {
        let on: f64 = (0..state.n_clusters())
            .filter(|&g| state.delta_at(m, g))
            .count() as f64;
        state.p1[m] = draw_beta(hyper.a_p1 + on, hyper.b_p1 + (g_total - on), rng)?;
    }
    for j in 0..state.theta.len() {
        let on: f64 = (0..state.n_clusters())
            .filter(|&g| state.delta_at(q + j, g))
            .count() as f64;
        state.p2[j] = draw_beta(hyper.a_p2 + on, hyper.b_p2 + (g_total - on), rng)?;
    }
    Ok(())
}

/// Draw the mixture weights from their Dirichlet conditional.
pub fn update_tau(
    state: &mut ModelState,
    hyper: &Hyperparameters,
    rng: &mut RngStream,
) -> Result<()> {
    let alpha: Vec<f64> = hyper
        .delta_dirichlet
        .iter()
        .zip(state.cluster_sizes())
        .map(|(d, n_g)| d + n_g as f64)
        .collect();
    state.tau = draw_dirichlet(&alpha, rng)?;
    Ok(())
}

/// Per-row log mixture-component weights: log tau_g + log normal density of
/// the continuous block + log categorical product.
fn log_membership_weights(
    dataset: &MixedDataset,
    state: &ModelState,
    spds: &[SpdMatrix],
    log_theta: &[DMatrix<f64>],
    i: usize,
) -> Result<Vec<f64>> {
    let n_clusters = state.n_clusters();
    let u = state.x.row(i).transpose();
    let mut weights = Vec::with_capacity(n_clusters);
    for g in 0..n_clusters {
        let mut w = state.tau[g].max(1e-300).ln();
        let mu_g = DVector::from_column_slice(state.mu.column(g).as_slice());
        w += logpdf_mvn(&u, &mu_g, &spds[g]);
        for j in 0..dataset.n_categorical() {
            w += log_theta[j][(g, dataset.categorical_code(i, j) - 1)];
        }
        weights.push(w);
    }
    Ok(weights)
}

fn softmax(log_weights: &[f64], row: usize) -> Result<Vec<f64>> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric(format!(
            "all membership log-densities are -inf for row {row}"
        )));
    }
    let mut probs: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

/// Draw every membership label and return the n x G membership-probability
/// matrix computed from the same (current) parameters.
pub fn update_z(
    dataset: &MixedDataset,
    state: &mut ModelState,
    rng: &mut RngStream,
) -> Result<DMatrix<f64>> {
    let n = dataset.n();
    let n_clusters = state.n_clusters();
    let spds = state.sigma.per_cluster_spd(n_clusters)?;
    let log_theta: Vec<DMatrix<f64>> = state
        .theta
        .iter()
        .map(|t| t.map(|v| v.max(1e-300).ln()))
        .collect();
    let mut probs = DMatrix::zeros(n, n_clusters);
    for i in 0..n {
        let weights = log_membership_weights(dataset, state, &spds, &log_theta, i)?;
        let row = softmax(&weights, i)?;
        state.z[i] = draw_categorical(&row, rng)?;
        for g in 0..n_clusters {
            probs[(i, g)] = row[g];
        }
    }
    Ok(probs)
}

/// Membership probabilities under fixed parameters (no draw); used for the
/// plug-in MAP rule and likelihood evaluation.
pub fn membership_probs(
    dataset: &MixedDataset,
    state: &ModelState,
) -> Result<DMatrix<f64>> {
    let n = dataset.n();
    let n_clusters = state.n_clusters();
    let spds = state.sigma.per_cluster_spd(n_clusters)?;
    let log_theta: Vec<DMatrix<f64>> = state
        .theta
        .iter()
        .map(|t| t.map(|v| v.max(1e-300).ln()))
        .collect();
    let mut probs = DMatrix::zeros(n, n_clusters);
    for i in 0..n {
        let weights = log_membership_weights(dataset, state, &spds, &log_theta, i)?;
        let row = softmax(&weights, i)?;
        for g in 0..n_clusters {
            probs[(i, g)] = row[g];
        }
    }
    Ok(probs)
}

/// Build the chain's starting state from an initialization.
pub fn initial_state(
    dataset: &MixedDataset,
    structure: StructureTag,
    hyper: &Hyperparameters,
    init: &InitResult,
) -> Result<ModelState> {
    let q = dataset.q();
    let m_total = dataset.total_vars();
    let n_clusters = hyper.n_clusters;
    Ok(ModelState {
        tau: init.tau0.clone(),
        mu: init.mu0.clone(),
        sigma: init.covariance_payload(structure)?,
        theta: init.theta0.clone(),
        z: init.z0.clone(),
        delta: vec![true; m_total * n_clusters],
        sigma2_delta0: hyper.b_delta0 / (hyper.a_delta0 - 1.0).max(0.5),
        p1: vec![0.5; q],
        p2: vec![0.5; m_total - q],
        x: dataset.continuous().clone(),
    })
}

/// Run one chain: per iteration impute censored cells, then update
/// covariance, means, categorical probabilities, inclusion indicators, spike
/// variance, inclusion probabilities, mixture weights, and memberships, in
/// that fixed order. Retains snapshots and membership matrices after burn-in.
pub fn run_chain(
    dataset: &MixedDataset,
    structure: StructureTag,
    hyper: &Hyperparameters,
    init: &InitResult,
    config: &ChainConfig,
) -> std::result::Result<ChainTrace, ChainFailure> {
    let fail = |iteration: usize, cause: Error| ChainFailure {
        chain_id: config.chain_id,
        iteration,
        cause,
    };
    config.validate().map_err(|e| fail(0, e))?;
    let mut rng = RngStream::with_stream(config.seed, config.chain_id);
    let mut state = initial_state(dataset, structure, hyper, init).map_err(|e| fail(0, e))?;
    let xbar = vec![0.0; dataset.q()];

    let retained = config.total_iterations - config.burn_in;
    let mut snapshots = Vec::with_capacity(retained);
    let mut probs_trace = Vec::with_capacity(retained);
    let mut imputed_sum = DMatrix::zeros(dataset.n(), dataset.q());

    for t in 1..=config.total_iterations {
        let step = (|| -> Result<DMatrix<f64>> {
            impute_censored(dataset, &mut state, &mut rng)?;
            update_covariance(&mut state, hyper, &mut rng)?;
            update_means(&mut state, hyper, &xbar, &mut rng)?;
            update_theta(dataset, &mut state, hyper, &mut rng)?;
            update_delta(&mut state, hyper, &xbar, &mut rng)?;
            update_spike_variance(
                &mut state,
                hyper,
                &xbar,
                config.paper_literal_a10,
                &mut rng,
            )?;
            update_inclusion_probs(&mut state, hyper, &mut rng)?;
            update_tau(&mut state, hyper, &mut rng)?;
            update_z(dataset, &mut state, &mut rng)
        })();
        let probs = step.map_err(|e| fail(t, e))?;
        if t > config.burn_in {
            snapshots.push(IterationSnapshot {
                tau: state.tau.clone(),
                mu: state.mu.clone(),
                sigma: state.sigma.clone(),
                theta: state.theta.clone(),
                delta: state.delta.clone(),
            });
            probs_trace.push(probs);
            imputed_sum += &state.x;
        }
    }

    Ok(ChainTrace {
        chain_id: config.chain_id,
        snapshots,
        probs: probs_trace,
        imputed_mean: imputed_sum / retained as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ingest, IngestSpec};
    use crate::model::{bootstrap_kmeans_init, default_hyperparameters};
    use approx::assert_relative_eq;

    fn planted_dataset(seed: u64, n_per: usize, censor_first: bool) -> MixedDataset {
        // Two well-separated 1-d blobs plus a cluster-linked categorical.
        let mut rng = RngStream::new(seed);
        let mut csv = String::from("x,y,c\n");
        for k in 0..2 {
            let center = if k == 0 { -3.0 } else { 3.0 };
            for row in 0..n_per {
                let e1: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                let e2: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                let v = center + 0.5 * e1;
                let w = -center + 0.5 * e2;
                let label = if k == 0 { "a" } else { "b" };
                if censor_first && row % 4 == 0 {
                    csv.push_str(&format!("<{:.6},{w},{label}\n", center - 0.3));
                } else {
                    csv.push_str(&format!("{v},{w},{label}\n"));
                }
            }
        }
        let spec = IngestSpec::parse("continuous=x,y\ncategorical=c\n").unwrap();
        ingest(csv.as_bytes(), &spec).unwrap()
    }

    fn fitted_state(dataset: &MixedDataset, structure: StructureTag) -> (ModelState, Hyperparameters) {
        let mut rng = RngStream::new(77);
        let init = bootstrap_kmeans_init(dataset, 2, 10, &mut rng).unwrap();
        let hyper = default_hyperparameters(dataset, 2, 75, &init).unwrap();
        let state = initial_state(dataset, structure, &hyper, &init).unwrap();
        (state, hyper)
    }

    #[test]
    fn conditional_moments_diagonal_is_marginal() {
        let data = planted_dataset(1, 30, false);
        let (mut state, _) = fitted_state(&data, StructureTag::Eei);
        let variances = match &state.sigma {
            CovariancePayload::Eei { variances } => variances.clone(),
            _ => unreachable!(),
        };
        state.sigma = CovariancePayload::Eei {
            variances: variances.clone(),
        };
        let g = state.z[0];
        let (mu_star, var_star) = conditional_moments(&state, 0, 0).unwrap();
        assert_relative_eq!(mu_star, state.mu[(0, g)], epsilon = 1e-10);
        assert_relative_eq!(var_star, variances[0], epsilon = 1e-10);
    }

    #[test]
    fn conditional_moments_bivariate() {
        // mu = 0, Sigma = [[1, rho], [rho, 1]], other coordinate at a:
        // conditional is N(rho * a, 1 - rho^2).
        let data = planted_dataset(2, 20, false);
        let (mut state, _) = fitted_state(&data, StructureTag::Eee);
        let rho = 0.5;
        let a = 2.0;
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        state.sigma = CovariancePayload::Eee {
            sigma: SpdMatrix::new(cov, "sigma").unwrap(),
        };
        let g = state.z[0];
        state.mu[(0, g)] = 0.0;
        state.mu[(1, g)] = 0.0;
        state.x[(0, 1)] = a;
        let (mu_star, var_star) = conditional_moments(&state, 0, 0).unwrap();
        assert_relative_eq!(mu_star, rho * a, epsilon = 1e-10);
        assert_relative_eq!(var_star, 1.0 - rho * rho, epsilon = 1e-10);
    }

    #[test]
    fn imputation_respects_bounds() {
        let data = planted_dataset(3, 40, true);
        let (mut state, _) = fitted_state(&data, StructureTag::Eei);
        let mut rng = RngStream::new(4);
        for _ in 0..50 {
            impute_censored(&data, &mut state, &mut rng).unwrap();
            for (i, m) in data.censored_cells() {
                match data.censor_mark(i, m) {
                    CensorMark::LeftCensored { bound } => assert!(state.x[(i, m)] < bound),
                    CensorMark::RightCensored { bound } => assert!(state.x[(i, m)] > bound),
                    CensorMark::Observed => unreachable!(),
                }
            }
        }
    }

    #[test]
    fn imputation_noop_without_censoring() {
        let data = planted_dataset(5, 20, false);
        let (mut state, _) = fitted_state(&data, StructureTag::Eei);
        let before = state.x.clone();
        let mut rng = RngStream::new(6);
        impute_censored(&data, &mut state, &mut rng).unwrap();
        assert_eq!(state.x, before);
    }

    #[test]
    fn continuous_inclusion_reference_values() {
        // omega = 1: slab equals spike, probability is exactly p1.
        assert_relative_eq!(continuous_inclusion_prob(0.7, 0.3, 1.0, 0.2), 0.3);
        // mu at the center with omega = 100: densities scale as 1/sqrt(omega),
        // so p = (0.5/10) / (0.5/10 + 0.5) = 1/11.
        assert_relative_eq!(
            continuous_inclusion_prob(0.0, 0.5, 100.0, 1.0),
            1.0 / 11.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn categorical_inclusion_identical_densities() {
        let theta = [0.4, 0.6];
        let alpha = [1.0, 1.0];
        assert_relative_eq!(
            categorical_inclusion_prob(&theta, &alpha, &alpha, 0.35),
            0.35,
            epsilon = 1e-12
        );
    }

    #[test]
    fn spike_variance_bookkeeping() {
        let data = planted_dataset(7, 20, false);
        let (mut state, mut hyper) = fitted_state(&data, StructureTag::Eei);
        hyper.a_delta0 = 2.0;
        hyper.b_delta0 = 0.005;
        // All indicators on: posterior equals prior.
        for d in &mut state.delta {
            *d = true;
        }
        let xbar = vec![0.0; data.q()];
        let (a, b) = spike_variance_posterior(&state, &hyper, &xbar, false);
        assert_relative_eq!(a, 2.0);
        assert_relative_eq!(b, 0.005);
        // One spike term with squared deviation 4 -> InvGamma(2.5, 2.005).
        state.set_delta(0, 0, false);
        state.mu[(0, 0)] = 2.0;
        let (a, b) = spike_variance_posterior(&state, &hyper, &xbar, false);
        assert_relative_eq!(a, 2.5);
        assert_relative_eq!(b, 2.005, epsilon = 1e-12);
        // Literal form drops the 1/2 on the rate only.
        let (a, b) = spike_variance_posterior(&state, &hyper, &xbar, true);
        assert_relative_eq!(a, 2.5);
        assert_relative_eq!(b, 4.005, epsilon = 1e-12);
    }

    #[test]
    fn trace_length_and_determinism() {
        let data = planted_dataset(8, 25, true);
        let mut rng = RngStream::new(9);
        let init = bootstrap_kmeans_init(&data, 2, 10, &mut rng).unwrap();
        let hyper = default_hyperparameters(&data, 2, 75, &init).unwrap();
        let config = ChainConfig::new(10, 5, 42, 0);
        let a = run_chain(&data, StructureTag::Eei, &hyper, &init, &config).unwrap();
        let b = run_chain(&data, StructureTag::Eei, &hyper, &init, &config).unwrap();
        assert_eq!(a.snapshots.len(), 5);
        assert_eq!(a.probs.len(), 5);
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.imputed_mean, b.imputed_mean);
        for p in &a.probs {
            for i in 0..p.nrows() {
                assert_relative_eq!(p.row(i).sum(), 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn invalid_burn_in_rejected() {
        let data = planted_dataset(10, 15, false);
        let mut rng = RngStream::new(11);
        let init = bootstrap_kmeans_init(&data, 2, 5, &mut rng).unwrap();
        let hyper = default_hyperparameters(&data, 2, 75, &init).unwrap();
        let config = ChainConfig::new(5, 5, 1, 0);
        assert!(run_chain(&data, StructureTag::Eei, &hyper, &init, &config).is_err());
    }

    #[test]
    fn planted_two_cluster_recovery() {
        // Tiny well-separated data: MAP labels should match the plant.
        let mut exact = 0;
        for seed in 0..20u64 {
            let data = planted_dataset(100 + seed, 30, false);
            let truth: Vec<usize> = (0..60).map(|i| i / 30).collect();
            let mut rng = RngStream::with_stream(200 + seed, 1);
            let init = bootstrap_kmeans_init(&data, 2, 20, &mut rng).unwrap();
            let hyper = default_hyperparameters(&data, 2, 75, &init).unwrap();
            let config = ChainConfig::new(60, 30, 300 + seed, 0);
            let trace = run_chain(&data, StructureTag::Eei, &hyper, &init, &config).unwrap();
            // Average retained membership probabilities, then take MAP.
            let mut avg = DMatrix::zeros(60, 2);
            for p in &trace.probs {
                avg += p;
            }
            let labels: Vec<usize> = (0..60)
                .map(|i| if avg[(i, 0)] >= avg[(i, 1)] { 0 } else { 1 })
                .collect();
            if crate::evaluation::adjusted_rand_index(&labels, &truth).unwrap() == 1.0 {
                exact += 1;
            }
        }
        assert!(exact >= 19, "exact recovery in only {exact}/20 runs");
    }

    #[test]
    fn state_invariants_hold_after_iterations() {
        let data = planted_dataset(12, 25, true);
        let mut rng = RngStream::new(13);
        let init = bootstrap_kmeans_init(&data, 2, 10, &mut rng).unwrap();
        let hyper = default_hyperparameters(&data, 2, 75, &init).unwrap();
        for structure in [StructureTag::Eei, StructureTag::Eee, StructureTag::Vvv] {
            let config = ChainConfig::new(20, 10, 14, 0);
            let trace = run_chain(&data, structure, &hyper, &init, &config).unwrap();
            for s in &trace.snapshots {
                assert_relative_eq!(s.tau.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
                for theta in &s.theta {
                    for g in 0..theta.nrows() {
                        assert_relative_eq!(theta.row(g).sum(), 1.0, epsilon = 1e-10);
                    }
                }
                if let CovariancePayload::Vvv { sigmas } = &s.sigma {
                    for spd in sigmas {
                        assert!(spd.matrix().clone().cholesky().is_some());
                    }
                }
            }
        }
    }

    #[test]
    fn empty_cluster_reverts_to_prior() {
        // With every row in cluster 0, cluster 1's mean conditional under the
        // shared-diagonal structure is N(0, omega^delta * s2d0).
        let data = planted_dataset(15, 20, false);
        let (mut state, hyper) = fitted_state(&data, StructureTag::Eei);
        for z in &mut state.z {
            *z = 0;
        }
        state.sigma2_delta0 = 0.04;
        for d in &mut state.delta {
            *d = false;
        }
        let xbar = vec![0.0; data.q()];
        let mut rng = RngStream::new(16);
        let n_draws = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_draws {
            update_means(&mut state, &hyper, &xbar, &mut rng).unwrap();
            let v = state.mu[(0, 1)];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n_draws as f64;
        let var = sum_sq / n_draws as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "prior mean drift {mean}");
        assert_relative_eq!(var, 0.04, epsilon = 0.004);
    }
}
