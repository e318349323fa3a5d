//! Likelihoods, degrees of freedom, BIC/ICL scoring, the adjusted Rand
//! index, and the Brooks-Gelman multivariate convergence diagnostic.

use nalgebra::{DMatrix, DVector};

use crate::data::MixedDataset;
use crate::error::{Error, Result};
use crate::model::{CovariancePayload, StructureTag};
use crate::stochastic::logpdf_mvn;

/// Parameter view sufficient to evaluate the mixture likelihood.
#[derive(Debug, Clone, Copy)]
pub struct MixtureParams<'a> {
    pub tau: &'a [f64],
    /// q x G.
    pub mu: &'a DMatrix<f64>,
    pub sigma: &'a CovariancePayload,
    /// Per categorical variable: G x L_m.
    pub theta: &'a [DMatrix<f64>],
}

/// Fit criteria for one (structure, G) candidate.
#[derive(Debug, Clone)]
pub struct ModelScore {
    pub n_clusters: usize,
    pub structure: StructureTag,
    pub loglik_observed: f64,
    pub loglik_complete: f64,
    pub dof: usize,
    pub bic: f64,
    pub icl: f64,
    pub entropy_term: f64,
}

/// Per-row log of tau_g * f_g(x_i) for every cluster.
fn component_log_weights(
    dataset: &MixedDataset,
    params: &MixtureParams,
    spds: &[crate::stochastic::SpdMatrix],
    x: &DMatrix<f64>,
    i: usize,
) -> Result<Vec<f64>> {
    let n_clusters = params.tau.len();
    let u = x.row(i).transpose();
    let mut weights = Vec::with_capacity(n_clusters);
    for g in 0..n_clusters {
        let mut w = params.tau[g].max(1e-300).ln();
        let mu_g = DVector::from_column_slice(params.mu.column(g).as_slice());
        w += logpdf_mvn(&u, &mu_g, &spds[g]);
        for j in 0..dataset.n_categorical() {
            w += params.theta[j][(g, dataset.categorical_code(i, j) - 1)]
                .max(1e-300)
                .ln();
        }
        weights.push(w);
    }
    Ok(weights)
}

fn log_sum_exp(weights: &[f64]) -> f64 {
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    max + weights.iter().map(|w| (w - max).exp()).sum::<f64>().ln()
}

/// Marginal log-likelihood over cluster assignments; `x` supplies the
/// continuous matrix with the caller's chosen censored-cell substitution.
pub fn observed_loglik(
    dataset: &MixedDataset,
    params: &MixtureParams,
    x: &DMatrix<f64>,
) -> Result<f64> {
    let spds = params.sigma.per_cluster_spd(params.tau.len())?;
    let mut total = 0.0;
    for i in 0..dataset.n() {
        total += log_sum_exp(&component_log_weights(dataset, params, &spds, x, i)?);
    }
    Ok(total)
}

/// Log-likelihood at hard assignments `z_star`.
pub fn complete_loglik(
    dataset: &MixedDataset,
    params: &MixtureParams,
    x: &DMatrix<f64>,
    z_star: &[usize],
) -> Result<f64> {
    if z_star.len() != dataset.n() {
        return Err(Error::Validation("assignment length mismatch".into()));
    }
    let spds = params.sigma.per_cluster_spd(params.tau.len())?;
    let mut total = 0.0;
    for i in 0..dataset.n() {
        total += component_log_weights(dataset, params, &spds, x, i)?[z_star[i]];
    }
    Ok(total)
}

/// Free-parameter count: mixture weights, means, covariance entries, and
/// per-level categorical probabilities (one level redundant each).
pub fn degrees_of_freedom(
    structure: StructureTag,
    n_clusters: usize,
    q: usize,
    levels: &[usize],
) -> usize {
    let cat_free: usize = levels.iter().map(|&l| l - 1).sum();
    let weights = n_clusters - 1;
    match structure {
        StructureTag::Eei => weights + q + n_clusters * (q + cat_free),
        StructureTag::Eee => weights + q * (q + 1) / 2 + n_clusters * (q + cat_free),
        StructureTag::Vvv => weights + n_clusters * (q + q * (q + 1) / 2 + cat_free),
    }
}

/// BIC and ICL from the observed log-likelihood and plug-in membership
/// probabilities: BIC = -2 loglik + DF log n; ICL adds the assignment
/// entropy -sum z-hat log z-hat (0 log 0 := 0).
pub fn score_model(
    dataset: &MixedDataset,
    params: &MixtureParams,
    x: &DMatrix<f64>,
    posterior_probs: &DMatrix<f64>,
    z_star: &[usize],
) -> Result<ModelScore> {
    let structure = params.sigma.tag();
    let n_clusters = params.tau.len();
    let q = dataset.q();
    let loglik_observed = observed_loglik(dataset, params, x)?;
    let loglik_complete = complete_loglik(dataset, params, x, z_star)?;
    let dof = degrees_of_freedom(structure, n_clusters, q, dataset.levels());
    let bic = -2.0 * loglik_observed + dof as f64 * (dataset.n() as f64).ln();
    let mut entropy_term = 0.0;
    for i in 0..posterior_probs.nrows() {
        for g in 0..posterior_probs.ncols() {
            let p = posterior_probs[(i, g)];
            if p > 0.0 {
                entropy_term -= p * p.ln();
            }
        }
    }
    Ok(ModelScore {
        n_clusters,
        structure,
        loglik_observed,
        loglik_complete,
        dof,
        bic,
        icl: bic + entropy_term,
        entropy_term,
    })
}

/// Hubert-Arabie adjusted Rand index from the pair-counting contingency
/// table; 1 for identical partitions, ~0 at chance, negative below chance.
pub fn adjusted_rand_index(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::Validation("partition length mismatch".into()));
    }
    if labels_a.is_empty() {
        return Err(Error::Validation("empty partitions".into()));
    }
    let ka = labels_a.iter().max().unwrap() + 1;
    let kb = labels_b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        table[a][b] += 1;
    }
    let choose2 = |x: u64| -> f64 { (x * x.saturating_sub(1)) as f64 / 2.0 };
    let n = labels_a.len() as u64;
    let sum_cells: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = table
        .iter()
        .map(|row| choose2(row.iter().sum::<u64>()))
        .sum();
    let sum_cols: f64 = (0..kb)
        .map(|b| choose2(table.iter().map(|row| row[b]).sum::<u64>()))
        .sum();
    let expected = sum_rows * sum_cols / choose2(n);
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-300 {
        // Both partitions trivial (single cluster each): define as 1.
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / (max_index - expected))
}

/// Brooks-Gelman multivariate potential scale reduction factor.
#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub mpsrf: f64,
    pub n_iterations: usize,
    pub n_chains: usize,
    /// Per-parameter grand means across chains.
    pub parameter_means: Vec<f64>,
    /// Per-parameter pooled within-chain variances.
    pub within_variances: Vec<f64>,
}

/// MPSRF = (n-1)/n + ((m+1)/m) * lambda1, with lambda1 the top eigenvalue of
/// W^{-1} B/n computed from the within- and between-chain covariance of the
/// monitored parameter vector. Each chain matrix is n_it x d.
pub fn mpsrf(chains: &[DMatrix<f64>]) -> Result<ConvergenceReport> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::Diagnostic("need at least 2 chains".into()));
    }
    let n_it = chains[0].nrows();
    let d = chains[0].ncols();
    if n_it < 2 {
        return Err(Error::Diagnostic("need at least 2 retained iterations".into()));
    }
    for c in chains {
        if c.nrows() != n_it || c.ncols() != d {
            return Err(Error::Diagnostic("chain trace shapes differ".into()));
        }
    }

    let chain_means: Vec<DVector<f64>> = chains
        .iter()
        .map(|c| c.row_mean().transpose())
        .collect();
    let grand_mean: DVector<f64> =
        chain_means.iter().fold(DVector::zeros(d), |acc, v| acc + v) / m as f64;

    let mut within = DMatrix::zeros(d, d);
    for (c, mean) in chains.iter().zip(&chain_means) {
        for t in 0..n_it {
            let dev = c.row(t).transpose() - mean;
            within += &dev * dev.transpose();
        }
    }
    within /= (m * (n_it - 1)) as f64;

    // Between-chain covariance scaled as B/n.
    let mut between = DMatrix::zeros(d, d);
    for mean in &chain_means {
        let dev = mean - &grand_mean;
        between += &dev * dev.transpose();
    }
    between /= (m - 1) as f64;

    let lambda1 = top_generalized_eigenvalue(&within, &between)?;
    let mpsrf = (n_it as f64 - 1.0) / n_it as f64 + (m as f64 + 1.0) / m as f64 * lambda1;
    if !mpsrf.is_finite() || mpsrf <= 0.0 {
        return Err(Error::Diagnostic(format!("non-finite MPSRF {mpsrf}")));
    }
    Ok(ConvergenceReport {
        mpsrf,
        n_iterations: n_it,
        n_chains: m,
        parameter_means: grand_mean.iter().copied().collect(),
        within_variances: (0..d).map(|j| within[(j, j)]).collect(),
    })
}

/// Largest eigenvalue of W^{-1} B via the symmetric form
/// L^{-1} B L^{-T} with W = L L^T; W gets one ridge retry if singular.
fn top_generalized_eigenvalue(within: &DMatrix<f64>, between: &DMatrix<f64>) -> Result<f64> {
    let d = within.nrows();
    let chol = within.clone().cholesky().or_else(|| {
        let ridge = 1e-10 * (within.trace() / d as f64).max(1e-300);
        let mut w = within.clone();
        for j in 0..d {
            w[(j, j)] += ridge;
        }
        w.cholesky()
    });
    let chol = chol.ok_or_else(|| {
        Error::Diagnostic("within-chain covariance is singular even after ridge".into())
    })?;
    // Solve L X = B, then L Y^T = X^T, giving Y = L^{-1} B L^{-T}.
    let x = chol.l().solve_lower_triangular(between).ok_or_else(|| {
        Error::Diagnostic("triangular solve failed in MPSRF".into())
    })?;
    let y_t = chol
        .l()
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| Error::Diagnostic("triangular solve failed in MPSRF".into()))?;
    let symmetric = (&y_t + y_t.transpose()) * 0.5;
    let eigen = symmetric.symmetric_eigen();
    Ok(eigen.eigenvalues.iter().copied().fold(0.0, f64::max))
}
