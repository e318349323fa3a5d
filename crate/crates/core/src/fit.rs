//! End-to-end fitting pipeline: initialization, parallel chains, relabeling,
//! chain alignment, pooling, convergence diagnostics, and model scoring.

use nalgebra::DMatrix;

use crate::data::MixedDataset;
use crate::error::{Error, Result};
use crate::evaluation::{mpsrf, score_model, ConvergenceReport, MixtureParams, ModelScore};
use crate::gibbs::{run_chain, ChainConfig, ChainFailure, ChainTrace};
use crate::model::{
    bootstrap_kmeans_init, default_hyperparameters, CovariancePayload, StructureTag,
};
use crate::parallel::map_indexed;
use crate::postprocess::{
    alignment_permutation, apply_relabel, kl_relabel, pool_chains, summarize, FitResult,
};
use crate::stochastic::RngStream;

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub structure: StructureTag,
    pub n_clusters: usize,
    pub n_chains: usize,
    pub total_iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub k_percentile: usize,
    /// Bootstrap K-means resample count.
    pub b_resamples: usize,
    pub paper_literal_a10: bool,
}

impl FitConfig {
    /// Simulation-scale defaults: 4 chains of 500 iterations with 200
    /// burn-in, percentile 75, 50 initialization resamples.
    pub fn new(structure: StructureTag, n_clusters: usize, seed: u64) -> Self {
        Self {
            structure,
            n_clusters,
            n_chains: 4,
            total_iterations: 500,
            burn_in: 200,
            seed,
            k_percentile: 75,
            b_resamples: 50,
            paper_literal_a10: false,
        }
    }
}

#[derive(Debug)]
pub struct FitOutput {
    pub pooled: FitResult,
    pub failures: Vec<ChainFailure>,
    /// Pooling inclusion mask over the successful chains, in chain order.
    pub included: Vec<bool>,
    /// Present when at least two chains succeeded.
    pub convergence: Option<ConvergenceReport>,
    pub score: ModelScore,
    pub n_chains_run: usize,
}

/// Monitored parameter vector per retained iteration: all cluster means,
/// log of the covariance scale diagonal, and logit mixture weights.
fn monitor_matrix(trace: &ChainTrace) -> DMatrix<f64> {
    let t_total = trace.snapshots.len();
    let first = &trace.snapshots[0];
    let q = first.mu.nrows();
    let n_clusters = first.tau.len();
    let scale_dim = match &first.sigma {
        CovariancePayload::Eei { .. } | CovariancePayload::Eee { .. } => q,
        CovariancePayload::Vvv { .. } => q * n_clusters,
    };
    let d = q * n_clusters + scale_dim + n_clusters;
    let mut out = DMatrix::zeros(t_total, d);
    for (t, s) in trace.snapshots.iter().enumerate() {
        let mut col = 0;
        for g in 0..n_clusters {
            for m in 0..q {
                out[(t, col)] = s.mu[(m, g)];
                col += 1;
            }
        }
        match &s.sigma {
            CovariancePayload::Eei { variances } => {
                for &v in variances {
                    out[(t, col)] = v.max(1e-300).ln();
                    col += 1;
                }
            }
            CovariancePayload::Eee { sigma } => {
                for m in 0..q {
                    out[(t, col)] = sigma.matrix()[(m, m)].max(1e-300).ln();
                    col += 1;
                }
            }
            CovariancePayload::Vvv { sigmas } => {
                for spd in sigmas {
                    for m in 0..q {
                        out[(t, col)] = spd.matrix()[(m, m)].max(1e-300).ln();
                        col += 1;
                    }
                }
            }
        }
        for &tau in &s.tau {
            let p = tau.clamp(1e-12, 1.0 - 1e-12);
            out[(t, col)] = (p / (1.0 - p)).ln();
            col += 1;
        }
    }
    out
}

/// Fit one (structure, G) model. Chains run concurrently; each successful
/// chain is relabeled, summarized, aligned to the first chain, then pooled.
/// Fails only when every chain fails.
pub fn fit_model(dataset: &MixedDataset, config: &FitConfig) -> Result<FitOutput> {
    let mut init_rng = RngStream::with_stream(config.seed, u64::MAX);
    let init = bootstrap_kmeans_init(
        dataset,
        config.n_clusters,
        config.b_resamples,
        &mut init_rng,
    )?;
    let hyper = default_hyperparameters(dataset, config.n_clusters, config.k_percentile, &init)?;

    let chain_results = map_indexed(config.n_chains, |c| {
        let chain_config = ChainConfig {
            total_iterations: config.total_iterations,
            burn_in: config.burn_in,
            seed: config.seed,
            chain_id: c as u64,
            paper_literal_a10: config.paper_literal_a10,
        };
        run_chain(dataset, config.structure, &hyper, &init, &chain_config)
    });

    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for r in chain_results {
        match r {
            Ok(trace) => traces.push(trace),
            Err(f) => failures.push(f),
        }
    }
    if traces.is_empty() {
        let causes: Vec<String> = failures.iter().map(|f| f.to_string()).collect();
        return Err(Error::AllChainsFailed(causes.join("; ")));
    }

    // Within-chain relabeling, then summarize.
    let mut summaries = Vec::with_capacity(traces.len());
    let mut relabeled_traces = Vec::with_capacity(traces.len());
    for trace in &traces {
        let perms = kl_relabel(&trace.probs)?;
        let relabeled = apply_relabel(trace, &perms)?;
        summaries.push(summarize(dataset, &relabeled)?);
        relabeled_traces.push(relabeled);
    }

    // Cross-chain alignment to the first chain so pooled averages and the
    // between-chain diagnostic compare like clusters.
    let reference_labels = summaries[0].z_hat.clone();
    for idx in 1..summaries.len() {
        let perm = alignment_permutation(
            &summaries[idx].z_hat,
            &reference_labels,
            config.n_clusters,
        );
        if !perm.is_identity() {
            let per_iter = vec![perm.clone(); relabeled_traces[idx].snapshots.len()];
            relabeled_traces[idx] = apply_relabel(&relabeled_traces[idx], &per_iter)?;
            summaries[idx] = summarize(dataset, &relabeled_traces[idx])?;
        }
    }

    let convergence = if relabeled_traces.len() >= 2 {
        let monitors: Vec<DMatrix<f64>> = relabeled_traces.iter().map(monitor_matrix).collect();
        Some(mpsrf(&monitors)?)
    } else {
        None
    };

    let (mut pooled, included) = pool_chains(&summaries)?;
    let params = MixtureParams {
        tau: &pooled.tau_hat,
        mu: &pooled.mu_hat,
        sigma: &pooled.sigma_hat,
        theta: &pooled.theta_hat,
    };
    let score = score_model(
        dataset,
        &params,
        &pooled.imputed_mean,
        &pooled.posterior_probs,
        &pooled.z_hat,
    )?;
    pooled.diagnostics.insert("bic".into(), score.bic);
    pooled.diagnostics.insert("icl".into(), score.icl);
    pooled
        .diagnostics
        .insert("loglik_observed".into(), score.loglik_observed);
    if let Some(c) = &convergence {
        pooled.diagnostics.insert("mpsrf".into(), c.mpsrf);
    }
    pooled
        .diagnostics
        .insert("n_chain_failures".into(), failures.len() as f64);

    Ok(FitOutput {
        pooled,
        failures,
        included,
        convergence,
        score,
        n_chains_run: config.n_chains,
    })
}

/// One grid cell of a model search.
#[derive(Debug)]
pub struct SelectionEntry {
    pub n_clusters: usize,
    pub structure: StructureTag,
    pub score: Option<ModelScore>,
    pub mpsrf: Option<f64>,
    pub n_chain_failures: usize,
    pub error: Option<String>,
}

/// Fit every (G, structure) candidate and rank by ICL (ties by BIC);
/// failed fits sort last with their error recorded, never dropped.
pub fn model_select(
    dataset: &MixedDataset,
    g_grid: &[usize],
    structures: &[StructureTag],
    base: &FitConfig,
) -> Vec<SelectionEntry> {
    let mut entries = Vec::new();
    for &structure in structures {
        for &n_clusters in g_grid {
            let config = FitConfig {
                structure,
                n_clusters,
                ..base.clone()
            };
            match fit_model(dataset, &config) {
                Ok(out) => entries.push(SelectionEntry {
                    n_clusters,
                    structure,
                    score: Some(out.score),
                    mpsrf: out.convergence.as_ref().map(|c| c.mpsrf),
                    n_chain_failures: out.failures.len(),
                    error: None,
                }),
                Err(e) => entries.push(SelectionEntry {
                    n_clusters,
                    structure,
                    score: None,
                    mpsrf: None,
                    n_chain_failures: base.n_chains,
                    error: Some(e.to_string()),
                }),
            }
        }
    }
    entries.sort_by(|a, b| {
        let key = |e: &SelectionEntry| {
            e.score
                .as_ref()
                .map(|s| (s.icl, s.bic))
                .unwrap_or((f64::INFINITY, f64::INFINITY))
        };
        key(a).partial_cmp(&key(b)).unwrap()
    });
    entries
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::adjusted_rand_index;
    use crate::simgen::{generate, ScenarioSpec};

    fn desk_config(structure: StructureTag, n_clusters: usize, seed: u64) -> FitConfig {
        FitConfig {
            n_chains: 2,
            total_iterations: 120,
            burn_in: 50,
            b_resamples: 15,
            ..FitConfig::new(structure, n_clusters, seed)
        }
    }

    #[test]
    fn fit_recovers_planted_clusters() {
        let spec = ScenarioSpec::new(StructureTag::Eei, 400, 0, 11).unwrap();
        let (data, truth) = generate(&spec).unwrap();
        let out = fit_model(&data, &desk_config(StructureTag::Eei, 3, 21)).unwrap();
        assert!(out.failures.is_empty());
        let ari = adjusted_rand_index(&out.pooled.z_hat, &truth.labels).unwrap();
        assert!(ari > 0.8, "ARI {ari}");
        assert!(out.convergence.is_some());
        for w in &out.pooled.importance {
            assert!((0.0..=1.0).contains(w));
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let spec = ScenarioSpec::new(StructureTag::Eei, 200, 20, 12).unwrap();
        let (data, _) = generate(&spec).unwrap();
        let config = desk_config(StructureTag::Eei, 3, 22);
        let a = fit_model(&data, &config).unwrap();
        let b = fit_model(&data, &config).unwrap();
        assert_eq!(a.pooled.z_hat, b.pooled.z_hat);
        assert_eq!(a.pooled.tau_hat, b.pooled.tau_hat);
        assert_eq!(a.score.bic, b.score.bic);
    }

    #[test]
    fn single_cluster_fit() {
        let spec = ScenarioSpec::new(StructureTag::Eei, 150, 0, 13).unwrap();
        let (data, _) = generate(&spec).unwrap();
        let mut config = desk_config(StructureTag::Eei, 1, 23);
        config.n_chains = 1;
        let out = fit_model(&data, &config).unwrap();
        assert!(out.pooled.z_hat.iter().all(|&z| z == 0));
        assert!(out.convergence.is_none());
    }

    #[test]
    fn grid_of_one_ranks_first() {
        let spec = ScenarioSpec::new(StructureTag::Eei, 150, 0, 14).unwrap();
        let (data, _) = generate(&spec).unwrap();
        let entries = model_select(&data, &[2], &[StructureTag::Eei], &desk_config(StructureTag::Eei, 2, 24));
        assert_eq!(entries.len(), 1);
        assert!(entries[0].score.is_some());
        assert!(entries[0].error.is_none());
    }
}
