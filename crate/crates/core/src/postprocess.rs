//! Label-switching correction via KL-minimizing relabeling, posterior
//! summarization with MAP assignment, and multi-chain pooling.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::data::MixedDataset;
use crate::error::{Error, Result};
use crate::gibbs::{membership_probs, ChainTrace, IterationSnapshot};
use crate::model::{CovariancePayload, ModelState};
use crate::stochastic::SpdMatrix;

/// Cluster-label permutation: `mapping[j]` is the source column placed at j.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation(pub Vec<usize>);

impl Permutation {
    pub fn identity(n_clusters: usize) -> Self {
        Permutation((0..n_clusters).collect())
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(j, &a)| j == a)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0usize; self.0.len()];
        for (j, &a) in self.0.iter().enumerate() {
            inv[a] = j;
        }
        Permutation(inv)
    }

    fn validate(&self, n_clusters: usize) -> Result<()> {
        let mut seen = vec![false; n_clusters];
        if self.0.len() != n_clusters {
            return Err(Error::Validation("permutation length mismatch".into()));
        }
        for &a in &self.0 {
            if a >= n_clusters || seen[a] {
                return Err(Error::Validation("mapping is not a bijection".into()));
            }
            seen[a] = true;
        }
        Ok(())
    }
}

/// Relabeled pooled estimates and diagnostics of one (or several pooled)
/// chains.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub tau_hat: Vec<f64>,
    /// q x G posterior-mean cluster means.
    pub mu_hat: DMatrix<f64>,
    pub sigma_hat: CovariancePayload,
    /// Per categorical variable: G x L_m posterior-mean level probabilities.
    pub theta_hat: Vec<DMatrix<f64>>,
    /// MAP labels from the plug-in membership probabilities (ties to the
    /// lowest cluster index).
    pub z_hat: Vec<usize>,
    /// n x G plug-in membership probabilities at the averaged parameters.
    pub posterior_probs: DMatrix<f64>,
    /// Per-variable importance weights in [0, 1], length M.
    pub importance: Vec<f64>,
    /// Posterior-mean imputations for censored cells (observed cells as-is).
    pub imputed_mean: DMatrix<f64>,
    pub diagnostics: BTreeMap<String, f64>,
}

/// Stephens' coordinate descent: alternate between averaging the permuted
/// membership matrices into a reference Q-hat and re-choosing each
/// iteration's permutation to minimize the KL divergence to Q-hat. Exact at
/// every cluster count: exhaustive search below 8 clusters, optimal
/// assignment (the objective is column-separable) at 8 and above.
pub fn kl_relabel(probs: &[DMatrix<f64>]) -> Result<Vec<Permutation>> {
    if probs.is_empty() {
        return Err(Error::Validation("no membership matrices".into()));
    }
    let n = probs[0].nrows();
    let n_clusters = probs[0].ncols();
    for p in probs {
        if p.nrows() != n || p.ncols() != n_clusters {
            return Err(Error::Validation("membership matrix shape mismatch".into()));
        }
        for i in 0..n {
            if (p.row(i).sum() - 1.0).abs() > 1e-6 || p.row(i).iter().any(|&v| v < -1e-12) {
                return Err(Error::Validation(format!(
                    "membership row {i} is not a probability simplex"
                )));
            }
        }
    }

    let t_total = probs.len();
    let mut perms = vec![Permutation::identity(n_clusters); t_total];
    let mut last_objective = f64::INFINITY;
    for _pass in 0..100 {
        // Q-hat: average of the currently permuted matrices, clamped in log.
        let mut log_q: DMatrix<f64> = DMatrix::zeros(n, n_clusters);
        for (p, perm) in probs.iter().zip(&perms) {
            for i in 0..n {
                for j in 0..n_clusters {
                    log_q[(i, j)] += p[(i, perm.0[j])];
                }
            }
        }
        log_q
            .iter_mut()
            .for_each(|v| *v = (*v / t_total as f64).max(1e-12).ln());

        let mut objective = 0.0;
        for (p, perm) in probs.iter().zip(perms.iter_mut()) {
            // cost[a][b]: minus cross-entropy of source column a against
            // reference column b; the p log p part is permutation-invariant.
            let mut cost = DMatrix::zeros(n_clusters, n_clusters);
            let mut plogp = 0.0;
            for i in 0..n {
                for a in 0..n_clusters {
                    let v = p[(i, a)];
                    if v > 0.0 {
                        plogp += v * v.ln();
                    }
                    for b in 0..n_clusters {
                        cost[(a, b)] -= v * log_q[(i, b)];
                    }
                }
            }
            let best = if n_clusters < 8 {
                exhaustive_assignment(&cost)
            } else {
                min_cost_assignment(&cost)
            };
            objective += plogp + (0..n_clusters).map(|b| cost[(best[b], b)]).sum::<f64>();
            perm.0 = best;
        }

        if last_objective - objective < 1e-8 {
            break;
        }
        last_objective = objective;
    }

    // The optimum is unique only up to one common relabeling of every
    // iteration; anchor the first iteration at the identity.
    if !perms[0].is_identity() {
        let anchor = perms[0].inverse();
        for perm in &mut perms {
            perm.0 = anchor.0.iter().map(|&j| perm.0[j]).collect();
        }
    }
    Ok(perms)
}

/// Minimizing assignment by brute force over all permutations.
fn exhaustive_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n_clusters = cost.nrows();
    let mut best = (0..n_clusters).collect::<Vec<_>>();
    let mut best_cost = f64::INFINITY;
    let mut current = best.clone();
    permute_recurse(&mut current, 0, cost, &mut best, &mut best_cost);
    best
}

fn permute_recurse(
    current: &mut Vec<usize>,
    k: usize,
    cost: &DMatrix<f64>,
    best: &mut Vec<usize>,
    best_cost: &mut f64,
) {
    let n = current.len();
    if k == n {
        let total: f64 = (0..n).map(|b| cost[(current[b], b)]).sum();
        if total < *best_cost {
            *best_cost = total;
            best.clone_from(current);
        }
        return;
    }
    for i in k..n {
        current.swap(k, i);
        permute_recurse(current, k + 1, cost, best, best_cost);
        current.swap(k, i);
    }
}

/// Exact minimum-cost assignment via subset DP over used source rows:
/// O(2^G * G^2), exact for the cluster counts this crate supports.
pub(crate) fn min_cost_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let full = 1usize << n;
    // dp[mask]: min cost of filling the first popcount(mask) columns using
    // exactly the source rows in mask.
    let mut dp = vec![f64::INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    dp[0] = 0.0;
    for mask in 0..full - 1 {
        if !dp[mask].is_finite() {
            continue;
        }
        let b = (mask as u32).count_ones() as usize;
        for a in 0..n {
            if mask & (1 << a) == 0 {
                let next = mask | (1 << a);
                let c = dp[mask] + cost[(a, b)];
                if c < dp[next] {
                    dp[next] = c;
                    choice[next] = a;
                }
            }
        }
    }
    let mut mapping = vec![0usize; n];
    let mut mask = full - 1;
    while mask != 0 {
        let a = choice[mask];
        let b = (mask as u32).count_ones() as usize - 1;
        mapping[b] = a;
        mask &= !(1 << a);
    }
    mapping
}

fn permute_snapshot(s: &IterationSnapshot, perm: &Permutation) -> IterationSnapshot {
    let n_clusters = s.tau.len();
    let q = s.mu.nrows();
    let m_total = q + s.theta.len();
    let tau: Vec<f64> = perm.0.iter().map(|&a| s.tau[a]).collect();
    let mu = DMatrix::from_fn(q, n_clusters, |m, j| s.mu[(m, perm.0[j])]);
    let sigma = match &s.sigma {
        CovariancePayload::Vvv { sigmas } => CovariancePayload::Vvv {
            sigmas: perm.0.iter().map(|&a| sigmas[a].clone()).collect(),
        },
        label_free => label_free.clone(),
    };
    let theta: Vec<DMatrix<f64>> = s
        .theta
        .iter()
        .map(|t| DMatrix::from_fn(n_clusters, t.ncols(), |j, l| t[(perm.0[j], l)]))
        .collect();
    let mut delta = vec![false; m_total * n_clusters];
    for m in 0..m_total {
        for j in 0..n_clusters {
            delta[m * n_clusters + j] = s.delta[m * n_clusters + perm.0[j]];
        }
    }
    IterationSnapshot {
        tau,
        mu,
        sigma,
        theta,
        delta,
    }
}

/// Apply per-iteration permutations to every cluster-indexed dimension of a
/// trace (mixture weights, means, cluster-specific covariances, categorical
/// probabilities, indicators, and membership columns).
pub fn apply_relabel(trace: &ChainTrace, perms: &[Permutation]) -> Result<ChainTrace> {
    if perms.len() != trace.snapshots.len() {
        return Err(Error::Validation(
            "permutation count does not match trace length".into(),
        ));
    }
    let n_clusters = trace.snapshots[0].tau.len();
    for perm in perms {
        perm.validate(n_clusters)?;
    }
    let snapshots = trace
        .snapshots
        .iter()
        .zip(perms)
        .map(|(s, perm)| permute_snapshot(s, perm))
        .collect();
    let probs = trace
        .probs
        .iter()
        .zip(perms)
        .map(|(p, perm)| DMatrix::from_fn(p.nrows(), n_clusters, |i, j| p[(i, perm.0[j])]))
        .collect();
    Ok(ChainTrace {
        chain_id: trace.chain_id,
        snapshots,
        probs,
        imputed_mean: trace.imputed_mean.clone(),
    })
}

/// Posterior means over the retained iterations plus plug-in MAP labels.
pub fn summarize(dataset: &MixedDataset, trace: &ChainTrace) -> Result<FitResult> {
    if trace.snapshots.is_empty() {
        return Err(Error::Validation("empty trace".into()));
    }
    let t_total = trace.snapshots.len() as f64;
    let first = &trace.snapshots[0];
    let n_clusters = first.tau.len();
    let q = first.mu.nrows();
    let m_total = q + first.theta.len();

    let mut tau_hat = vec![0.0; n_clusters];
    let mut mu_hat = DMatrix::zeros(q, n_clusters);
    let mut theta_hat: Vec<DMatrix<f64>> = first
        .theta
        .iter()
        .map(|t| DMatrix::zeros(n_clusters, t.ncols()))
        .collect();
    let mut delta_sum = vec![0.0; m_total];
    let mut var_sum = vec![0.0; q];
    let mut cov_sum = DMatrix::zeros(q, q);
    let mut covs_sum = vec![DMatrix::zeros(q, q); n_clusters];

    for s in &trace.snapshots {
        for g in 0..n_clusters {
            tau_hat[g] += s.tau[g];
        }
        mu_hat += &s.mu;
        for (acc, t) in theta_hat.iter_mut().zip(&s.theta) {
            *acc += t;
        }
        for m in 0..m_total {
            for g in 0..n_clusters {
                if s.delta[m * n_clusters + g] {
                    delta_sum[m] += 1.0;
                }
            }
        }
        match &s.sigma {
            CovariancePayload::Eei { variances } => {
                for m in 0..q {
                    var_sum[m] += variances[m];
                }
            }
            CovariancePayload::Eee { sigma } => cov_sum += sigma.matrix(),
            CovariancePayload::Vvv { sigmas } => {
                for (acc, spd) in covs_sum.iter_mut().zip(sigmas) {
                    *acc += spd.matrix();
                }
            }
        }
    }

    for g in 0..n_clusters {
        tau_hat[g] /= t_total;
    }
    mu_hat /= t_total;
    for t in &mut theta_hat {
        *t /= t_total;
    }
    let importance: Vec<f64> = delta_sum
        .iter()
        .map(|s| s / (t_total * n_clusters as f64))
        .collect();
    let sigma_hat = match &first.sigma {
        CovariancePayload::Eei { .. } => CovariancePayload::Eei {
            variances: var_sum.iter().map(|v| v / t_total).collect(),
        },
        CovariancePayload::Eee { .. } => CovariancePayload::Eee {
            sigma: SpdMatrix::new(cov_sum / t_total, "sigma_mean")?,
        },
        CovariancePayload::Vvv { .. } => CovariancePayload::Vvv {
            sigmas: covs_sum
                .into_iter()
                .map(|c| SpdMatrix::new(c / t_total, "sigma_mean"))
                .collect::<Result<_>>()?,
        },
    };

    let plug_in = ModelState {
        tau: tau_hat.clone(),
        mu: mu_hat.clone(),
        sigma: sigma_hat.clone(),
        theta: theta_hat.clone(),
        z: vec![0; dataset.n()],
        delta: vec![true; m_total * n_clusters],
        sigma2_delta0: 1.0,
        p1: vec![0.5; q],
        p2: vec![0.5; m_total - q],
        x: trace.imputed_mean.clone(),
    };
    let posterior_probs = membership_probs(dataset, &plug_in)?;
    let z_hat = map_labels(&posterior_probs);

    Ok(FitResult {
        tau_hat,
        mu_hat,
        sigma_hat,
        theta_hat,
        z_hat,
        posterior_probs,
        importance,
        imputed_mean: trace.imputed_mean.clone(),
        diagnostics: BTreeMap::new(),
    })
}

/// Row-wise argmax with ties broken to the lowest cluster index.
pub fn map_labels(probs: &DMatrix<f64>) -> Vec<usize> {
    (0..probs.nrows())
        .map(|i| {
            let mut best = 0;
            for g in 1..probs.ncols() {
                if probs[(i, g)] > probs[(i, best)] {
                    best = g;
                }
            }
            best
        })
        .collect()
}

/// Align each chain to the first (reference) result by the label permutation
/// maximizing hard-label agreement, then average parameters and importance
/// weights. Chains whose ARI against the reference is negative are excluded
/// (recorded in the returned mask).
pub fn pool_chains(results: &[FitResult]) -> Result<(FitResult, Vec<bool>)> {
    if results.is_empty() {
        return Err(Error::Validation("no chains to pool".into()));
    }
    let reference = &results[0];
    let n_clusters = reference.tau_hat.len();
    let m_total = reference.importance.len();

    let mut included = vec![true; results.len()];
    let mut aligned: Vec<FitResult> = vec![reference.clone()];
    for (idx, r) in results.iter().enumerate().skip(1) {
        let ari = crate::evaluation::adjusted_rand_index(&r.z_hat, &reference.z_hat)?;
        if ari < 0.0 {
            eprintln!(
                "warning: chain result {idx} disagrees with the reference (ARI {ari:.3}); excluded from pooling"
            );
            included[idx] = false;
            continue;
        }
        let perm = alignment_permutation(&r.z_hat, &reference.z_hat, n_clusters);
        aligned.push(permute_result(r, &perm));
    }

    let k = aligned.len() as f64;
    let mut pooled = aligned[0].clone();
    for r in &aligned[1..] {
        for g in 0..n_clusters {
            pooled.tau_hat[g] += r.tau_hat[g];
        }
        pooled.mu_hat += &r.mu_hat;
        for (acc, t) in pooled.theta_hat.iter_mut().zip(&r.theta_hat) {
            *acc += t;
        }
        for m in 0..m_total {
            pooled.importance[m] += r.importance[m];
        }
        pooled.posterior_probs += &r.posterior_probs;
        pooled.imputed_mean += &r.imputed_mean;
        pooled.sigma_hat = add_payload(&pooled.sigma_hat, &r.sigma_hat)?;
    }
    for g in 0..n_clusters {
        pooled.tau_hat[g] /= k;
    }
    pooled.mu_hat /= k;
    for t in &mut pooled.theta_hat {
        *t /= k;
    }
    for m in 0..m_total {
        pooled.importance[m] /= k;
    }
    pooled.posterior_probs /= k;
    pooled.imputed_mean /= k;
    pooled.sigma_hat = scale_payload(&pooled.sigma_hat, 1.0 / k)?;
    pooled.z_hat = map_labels(&pooled.posterior_probs);
    Ok((pooled, included))
}

/// Label permutation aligning `labels` to `reference` by maximizing hard
/// agreement (the source column placed at j is the one best matching
/// reference cluster j).
pub fn alignment_permutation(
    labels: &[usize],
    reference: &[usize],
    n_clusters: usize,
) -> Permutation {
    let mut cost = DMatrix::zeros(n_clusters, n_clusters);
    for (za, zb) in labels.iter().zip(reference) {
        cost[(*za, *zb)] -= 1.0;
    }
    let mapping = if n_clusters < 8 {
        exhaustive_assignment(&cost)
    } else {
        min_cost_assignment(&cost)
    };
    Permutation(mapping)
}

pub(crate) fn permute_result(r: &FitResult, perm: &Permutation) -> FitResult {
    let n_clusters = r.tau_hat.len();
    let q = r.mu_hat.nrows();
    let inverse = perm.inverse();
    FitResult {
        tau_hat: perm.0.iter().map(|&a| r.tau_hat[a]).collect(),
        mu_hat: DMatrix::from_fn(q, n_clusters, |m, j| r.mu_hat[(m, perm.0[j])]),
        sigma_hat: match &r.sigma_hat {
            CovariancePayload::Vvv { sigmas } => CovariancePayload::Vvv {
                sigmas: perm.0.iter().map(|&a| sigmas[a].clone()).collect(),
            },
            label_free => label_free.clone(),
        },
        theta_hat: r
            .theta_hat
            .iter()
            .map(|t| DMatrix::from_fn(n_clusters, t.ncols(), |j, l| t[(perm.0[j], l)]))
            .collect(),
        z_hat: r.z_hat.iter().map(|&z| inverse.0[z]).collect(),
        posterior_probs: DMatrix::from_fn(r.posterior_probs.nrows(), n_clusters, |i, j| {
            r.posterior_probs[(i, perm.0[j])]
        }),
        importance: r.importance.clone(),
        imputed_mean: r.imputed_mean.clone(),
        diagnostics: r.diagnostics.clone(),
    }
}

fn add_payload(a: &CovariancePayload, b: &CovariancePayload) -> Result<CovariancePayload> {
    Ok(match (a, b) {
        (CovariancePayload::Eei { variances: va }, CovariancePayload::Eei { variances: vb }) => {
            CovariancePayload::Eei {
                variances: va.iter().zip(vb).map(|(x, y)| x + y).collect(),
            }
        }
        (CovariancePayload::Eee { sigma: sa }, CovariancePayload::Eee { sigma: sb }) => {
            CovariancePayload::Eee {
                sigma: SpdMatrix::new(sa.matrix() + sb.matrix(), "sigma_pool")?,
            }
        }
        (CovariancePayload::Vvv { sigmas: sa }, CovariancePayload::Vvv { sigmas: sb }) => {
            CovariancePayload::Vvv {
                sigmas: sa
                    .iter()
                    .zip(sb)
                    .map(|(x, y)| SpdMatrix::new(x.matrix() + y.matrix(), "sigma_pool"))
                    .collect::<Result<_>>()?,
            }
        }
        _ => {
            return Err(Error::Validation(
                "cannot pool results with different covariance structures".into(),
            ))
        }
    })
}

fn scale_payload(a: &CovariancePayload, factor: f64) -> Result<CovariancePayload> {
    Ok(match a {
        CovariancePayload::Eei { variances } => CovariancePayload::Eei {
            variances: variances.iter().map(|v| v * factor).collect(),
        },
        CovariancePayload::Eee { sigma } => CovariancePayload::Eee {
            sigma: SpdMatrix::new(sigma.matrix() * factor, "sigma_pool")?,
        },
        CovariancePayload::Vvv { sigmas } => CovariancePayload::Vvv {
            sigmas: sigmas
                .iter()
                .map(|s| SpdMatrix::new(s.matrix() * factor, "sigma_pool"))
                .collect::<Result<_>>()?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    /// Synthetic sharply-assigned membership matrices with an optional
    /// planted column permutation on chosen iterations.
    fn synthetic_probs(
        n: usize,
        n_clusters: usize,
        t_total: usize,
        swapped: &dyn Fn(usize) -> Option<Vec<usize>>,
        seed: u64,
    ) -> Vec<DMatrix<f64>> {
        let mut rng = crate::stochastic::RngStream::new(seed);
        let base: Vec<usize> = (0..n).map(|i| i % n_clusters).collect();
        (0..t_total)
            .map(|t| {
                let mut p = DMatrix::from_element(n, n_clusters, 0.0);
                for i in 0..n {
                    let noise: f64 = rng.gen::<f64>() * 0.05;
                    for g in 0..n_clusters {
                        p[(i, g)] = if g == base[i] {
                            1.0 - noise
                        } else {
                            noise / (n_clusters - 1) as f64
                        };
                    }
                }
                if let Some(perm) = swapped(t) {
                    DMatrix::from_fn(n, n_clusters, |i, j| p[(i, perm[j])])
                } else {
                    p
                }
            })
            .collect()
    }

    #[test]
    fn identity_fixed_point() {
        let probs = synthetic_probs(30, 3, 10, &|_| None, 1);
        let perms = kl_relabel(&probs).unwrap();
        assert!(perms.iter().all(|p| p.is_identity()));
    }

    #[test]
    fn planted_permutation_recovered() {
        for n_clusters in [2usize, 3, 4, 8] {
            let plant: Vec<usize> = (0..n_clusters).rev().collect();
            let plant_clone = plant.clone();
            let probs = synthetic_probs(
                40,
                n_clusters,
                12,
                &move |t| {
                    if t % 2 == 1 {
                        Some(plant_clone.clone())
                    } else {
                        None
                    }
                },
                2,
            );
            let perms = kl_relabel(&probs).unwrap();
            for (t, perm) in perms.iter().enumerate() {
                if t % 2 == 1 {
                    assert_eq!(perm.0, plant, "G={n_clusters}, t={t}");
                } else {
                    assert!(perm.is_identity(), "G={n_clusters}, t={t}");
                }
            }
        }
    }

    #[test]
    fn assignment_dp_matches_exhaustive() {
        let mut rng = crate::stochastic::RngStream::new(3);
        for _ in 0..20 {
            let n = 5;
            let cost = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>());
            let a = exhaustive_assignment(&cost);
            let b = min_cost_assignment(&cost);
            let cost_of = |m: &[usize]| -> f64 { (0..n).map(|j| cost[(m[j], j)]).sum() };
            assert_relative_eq!(cost_of(&a), cost_of(&b), epsilon = 1e-12);
        }
    }

    #[test]
    fn non_simplex_rows_rejected() {
        let mut p = DMatrix::from_element(4, 2, 0.5);
        p[(2, 0)] = 0.9; // row sums to 1.4
        assert!(kl_relabel(&[p]).is_err());
    }

    #[test]
    fn objective_nonincreasing() {
        // Re-running relabel on already-relabeled matrices cannot improve:
        // the first pass of the second run must immediately converge to
        // identity permutations.
        let plant = vec![1usize, 0];
        let plant_clone = plant.clone();
        let probs = synthetic_probs(
            25,
            2,
            8,
            &move |t| {
                if t < 4 {
                    Some(plant_clone.clone())
                } else {
                    None
                }
            },
            4,
        );
        let perms = kl_relabel(&probs).unwrap();
        let relabeled: Vec<DMatrix<f64>> = probs
            .iter()
            .zip(&perms)
            .map(|(p, perm)| DMatrix::from_fn(p.nrows(), 2, |i, j| p[(i, perm.0[j])]))
            .collect();
        let second = kl_relabel(&relabeled).unwrap();
        assert!(second.iter().all(|p| p.is_identity()));
    }

    #[test]
    fn permutation_inverse_round_trip() {
        let perm = Permutation(vec![2, 0, 1]);
        let inv = perm.inverse();
        for j in 0..3 {
            assert_eq!(inv.0[perm.0[j]], j);
        }
        assert!(perm.validate(3).is_ok());
        assert!(Permutation(vec![0, 0, 1]).validate(3).is_err());
    }
}
