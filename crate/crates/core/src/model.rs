//! Parameter containers, hyperparameter defaults, slab/spike variance-ratio
//! tuning, and bootstrap K-means initialization.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::MixedDataset;
use crate::error::{Error, Result};
use crate::stochastic::{RngStream, SpdMatrix};

/// Maximum supported cluster count; relabeling enumerates permutations and
/// the exact-assignment fallback is only exercised up to this size.
pub const MAX_CLUSTERS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StructureTag {
    /// Shared diagonal covariance.
    Eei,
    /// Shared full covariance.
    Eee,
    /// Cluster-specific full covariances.
    Vvv,
}

impl StructureTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            StructureTag::Eei => "EEI",
            StructureTag::Eee => "EEE",
            StructureTag::Vvv => "VVV",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EEI" => Ok(StructureTag::Eei),
            "EEE" => Ok(StructureTag::Eee),
            "VVV" => Ok(StructureTag::Vvv),
            other => Err(Error::Validation(format!(
                "unknown covariance structure `{other}` (expected EEI, EEE, or VVV)"
            ))),
        }
    }
}

impl std::fmt::Display for StructureTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Covariance payload under one of the three structures.
#[derive(Debug, Clone)]
pub enum CovariancePayload {
    Eei { variances: Vec<f64> },
    Eee { sigma: SpdMatrix },
    Vvv { sigmas: Vec<SpdMatrix> },
}

impl CovariancePayload {
    pub fn tag(&self) -> StructureTag {
        match self {
            CovariancePayload::Eei { .. } => StructureTag::Eei,
            CovariancePayload::Eee { .. } => StructureTag::Eee,
            CovariancePayload::Vvv { .. } => StructureTag::Vvv,
        }
    }

    /// Factored covariance for cluster `g`; EEI/EEE ignore `g`.
    pub fn cluster_spd(&self, g: usize) -> Result<SpdMatrix> {
        match self {
            CovariancePayload::Eei { variances } => {
                SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_row_slice(variances)), "sigma")
            }
            CovariancePayload::Eee { sigma } => Ok(sigma.clone()),
            CovariancePayload::Vvv { sigmas } => Ok(sigmas[g].clone()),
        }
    }

    /// One factored covariance per cluster, sharing work for EEI/EEE.
    pub fn per_cluster_spd(&self, n_clusters: usize) -> Result<Vec<SpdMatrix>> {
        match self {
            CovariancePayload::Vvv { sigmas } => Ok(sigmas.clone()),
            _ => {
                let shared = self.cluster_spd(0)?;
                Ok(vec![shared; n_clusters])
            }
        }
    }
}

/// Full parameter set of one Gibbs iteration, plus the working continuous
/// matrix with the current imputations substituted into censored cells.
#[derive(Debug, Clone)]
pub struct ModelState {
    /// Mixture weights, length G.
    pub tau: Vec<f64>,
    /// Cluster means, q x G.
    pub mu: DMatrix<f64>,
    pub sigma: CovariancePayload,
    /// Per categorical variable: G x L_m row-stochastic matrix.
    pub theta: Vec<DMatrix<f64>>,
    /// Hard cluster labels in 0..G (one-hot rows implied).
    pub z: Vec<usize>,
    /// Inclusion indicators, row-major M x G.
    pub delta: Vec<bool>,
    pub sigma2_delta0: f64,
    /// Continuous-variable inclusion probabilities, length q.
    pub p1: Vec<f64>,
    /// Categorical-variable inclusion probabilities, length M - q.
    pub p2: Vec<f64>,
    /// n x q continuous matrix; censored cells hold the current imputation.
    pub x: DMatrix<f64>,
}

impl ModelState {
    pub fn n_clusters(&self) -> usize {
        self.tau.len()
    }

    pub fn total_vars(&self) -> usize {
        self.mu.nrows() + self.theta.len()
    }

    pub fn delta_at(&self, m: usize, g: usize) -> bool {
        self.delta[m * self.n_clusters() + g]
    }

    pub fn set_delta(&mut self, m: usize, g: usize, value: bool) {
        let g_total = self.n_clusters();
        self.delta[m * g_total + g] = value;
    }

    /// Per-cluster member counts n_g.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_clusters()];
        for &g in &self.z {
            sizes[g] += 1;
        }
        sizes
    }
}

/// Fixed prior constants.
#[derive(Debug, Clone)]
pub struct Hyperparameters {
    pub n_clusters: usize,
    pub delta_dirichlet: Vec<f64>,
    /// Slab/spike variance ratio, > 1.
    pub omega: f64,
    pub k_percentile: usize,
    pub a_delta0: f64,
    pub b_delta0: f64,
    pub a_p1: f64,
    pub b_p1: f64,
    pub a_p2: f64,
    pub b_p2: f64,
    /// Per categorical variable: slab concentration (all ones).
    pub alpha_slab: Vec<Vec<f64>>,
    /// Per categorical variable: spike concentration (C/n times level counts).
    pub alpha_spike: Vec<Vec<f64>>,
    pub spike_concentration: f64,
    /// Shared-diagonal variance prior InvGamma(a, b).
    pub eei_a: f64,
    pub eei_b: f64,
    /// Shared-full-covariance prior IW(nu0, s0).
    pub eee_nu0: f64,
    pub eee_s0: DMatrix<f64>,
    /// Cluster-specific covariance priors IW(nu_g, s_g).
    pub vvv_nu: Vec<f64>,
    pub vvv_s: Vec<DMatrix<f64>>,
}

/// Initialization product of bootstrap K-means: labels, centroids, mixing
/// fractions, smoothed level frequencies, and empirical covariance summaries.
#[derive(Debug, Clone)]
pub struct InitResult {
    pub z0: Vec<usize>,
    /// q x G centroid matrix.
    pub mu0: DMatrix<f64>,
    pub tau0: Vec<f64>,
    /// Per categorical variable: G x L_m add-one-smoothed frequencies.
    pub theta0: Vec<DMatrix<f64>>,
    /// Pooled within-cluster diagonal variances, length q.
    pub variances0: Vec<f64>,
    /// Pooled within-cluster covariance.
    pub pooled_cov0: DMatrix<f64>,
    /// Per-cluster covariances (fall back to pooled when a cluster is tiny).
    pub cluster_covs0: Vec<DMatrix<f64>>,
}

impl InitResult {
    pub fn covariance_payload(&self, tag: StructureTag) -> Result<CovariancePayload> {
        match tag {
            StructureTag::Eei => Ok(CovariancePayload::Eei {
                variances: self.variances0.clone(),
            }),
            StructureTag::Eee => Ok(CovariancePayload::Eee {
                sigma: SpdMatrix::new(self.pooled_cov0.clone(), "sigma_init")?,
            }),
            StructureTag::Vvv => Ok(CovariancePayload::Vvv {
                sigmas: self
                    .cluster_covs0
                    .iter()
                    .map(|c| SpdMatrix::new(c.clone(), "sigma_init"))
                    .collect::<Result<_>>()?,
            }),
        }
    }
}

/// Defaults per the reference configuration: balanced Dirichlet weights,
/// unit-mean variance prior, empirical-covariance IW scale shrunk by G^{2/q},
/// all-ones slab, marginal-count spike, and the percentile-ratio omega rule.
pub fn default_hyperparameters(
    dataset: &MixedDataset,
    n_clusters: usize,
    k_percentile: usize,
    init: &InitResult,
) -> Result<Hyperparameters> {
    if n_clusters < 1 || n_clusters > MAX_CLUSTERS {
        return Err(Error::Validation(format!(
            "cluster count {n_clusters} outside 1..={MAX_CLUSTERS}"
        )));
    }
    if n_clusters > dataset.n() {
        return Err(Error::Validation(
            "cluster count exceeds observation count".into(),
        ));
    }
    if !(60..=90).contains(&k_percentile) {
        return Err(Error::Validation(format!(
            "k percentile {k_percentile} outside 60..=90"
        )));
    }
    let n = dataset.n();
    let q = dataset.q();
    let g_total = n_clusters as f64;

    // Empirical covariance of the continuous data, shrunk per cluster count.
    let emp_cov = empirical_covariance(dataset.continuous());
    let scale = emp_cov.clone() * (1.0 / g_total.powf(2.0 / q as f64));

    let spike_concentration = 1000.0;
    let mut alpha_slab = Vec::with_capacity(dataset.n_categorical());
    let mut alpha_spike = Vec::with_capacity(dataset.n_categorical());
    for (j, &l) in dataset.levels().iter().enumerate() {
        alpha_slab.push(vec![1.0; l]);
        let mut counts = vec![0.0; l];
        for i in 0..n {
            counts[dataset.categorical_code(i, j) - 1] += 1.0;
        }
        alpha_spike.push(
            counts
                .iter()
                .map(|c| spike_concentration / n as f64 * c)
                .collect(),
        );
    }

    Ok(Hyperparameters {
        n_clusters,
        delta_dirichlet: vec![1.0 / g_total; n_clusters],
        omega: compute_omega(&init.mu0, k_percentile)?,
        k_percentile,
        a_delta0: 2.0,
        b_delta0: 0.005,
        a_p1: 1.0,
        b_p1: 1.0,
        a_p2: 1.0,
        b_p2: 1.0,
        alpha_slab,
        alpha_spike,
        spike_concentration,
        eei_a: 2.0,
        eei_b: 1.0,
        eee_nu0: q as f64 + 2.0,
        eee_s0: scale.clone(),
        vvv_nu: vec![q as f64 + 2.0; n_clusters],
        vvv_s: vec![scale; n_clusters],
    })
}

/// Slab/spike variance ratio from the initial centroids: the squared ratio of
/// the mean of large |mu0| entries (at or above their k-th percentile) to the
/// mean of small ones (at or below the 25th), clamped to at least 1.0001.
/// A zero denominator falls back to 100 with a warning on stderr.
pub fn compute_omega(mu0: &DMatrix<f64>, k_percentile: usize) -> Result<f64> {
    if mu0.is_empty() {
        return Err(Error::Validation("empty centroid matrix".into()));
    }
    let mut magnitudes: Vec<f64> = mu0.iter().map(|v| v.abs()).collect();
    magnitudes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p_k = percentile(&magnitudes, k_percentile as f64);
    let p_25 = percentile(&magnitudes, 25.0);
    let top: Vec<f64> = magnitudes.iter().copied().filter(|&v| v >= p_k).collect();
    let bottom: Vec<f64> = magnitudes.iter().copied().filter(|&v| v <= p_25).collect();
    if top.is_empty() || bottom.is_empty() {
        return Err(Error::Validation(
            "centroid magnitudes leave a percentile band empty".into(),
        ));
    }
    let num = top.iter().sum::<f64>() / top.len() as f64;
    let den = bottom.iter().sum::<f64>() / bottom.len() as f64;
    if den == 0.0 {
        eprintln!("warning: zero lower-quartile centroid magnitude; using omega = 100");
        return Ok(100.0);
    }
    // Cap at 100: near-zero lower-quartile magnitudes blow the ratio far
    // past the regime where the slab/spike pair stays discriminating, and
    // an oversized ratio pushes every weight to 0 or 1.
    Ok(((num / den) * (num / den)).clamp(1.0001, 100.0))
}

/// Linear-interpolation percentile of sorted data, p in [0, 100].
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Sample covariance (n-1 denominator) of the rows of `x`.
pub fn empirical_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let q = x.ncols();
    let mean = x.row_mean();
    let mut cov = DMatrix::zeros(q, q);
    for i in 0..n {
        let d = x.row(i) - &mean;
        cov += d.transpose() * &d;
    }
    cov / (n as f64 - 1.0).max(1.0)
}

/// Bootstrap K-means on the continuous variables only: run K-means++/Lloyd on
/// `b_resamples` row resamples, keep the centroid set with the lowest full-data
/// within-cluster sum of squares, then assign every row to its nearest centroid.
pub fn bootstrap_kmeans_init(
    dataset: &MixedDataset,
    n_clusters: usize,
    b_resamples: usize,
    rng: &mut RngStream,
) -> Result<InitResult> {
    if b_resamples < 1 {
        return Err(Error::Validation("need at least one resample".into()));
    }
    if n_clusters < 1 || n_clusters > dataset.n() {
        return Err(Error::Validation(
            "cluster count must be in 1..=n".into(),
        ));
    }
    let x = dataset.continuous();
    let n = dataset.n();
    let q = dataset.q();

    let mut best_centroids: Option<Vec<DVector<f64>>> = None;
    let mut best_wss = f64::INFINITY;
    for _ in 0..b_resamples {
        let sample: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let centroids = kmeans(x, &sample, n_clusters, rng);
        let wss = within_ss(x, &centroids);
        if wss < best_wss {
            best_wss = wss;
            best_centroids = Some(centroids);
        }
    }
    let mut centroids = best_centroids.expect("b_resamples >= 1");

    let mut z0 = assign_nearest(x, &centroids);
    let mut sizes = label_counts(&z0, n_clusters);
    if sizes.iter().any(|&s| s == 0) {
        // One retry: re-seed each empty centroid at the point farthest from
        // its current centroid, then re-assign.
        for g in 0..n_clusters {
            if sizes[g] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = (x.row(a).transpose() - &centroids[z0[a]]).norm_squared();
                        let db = (x.row(b).transpose() - &centroids[z0[b]]).norm_squared();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[g] = x.row(far).transpose();
            }
        }
        z0 = assign_nearest(x, &centroids);
        sizes = label_counts(&z0, n_clusters);
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Validation(
                "initialization produced an empty cluster after one re-seed".into(),
            ));
        }
    }

    // Centroids from the final assignment (exact cluster means).
    let mut mu0 = DMatrix::zeros(q, n_clusters);
    for (i, &g) in z0.iter().enumerate() {
        for m in 0..q {
            mu0[(m, g)] += x[(i, m)];
        }
    }
    for g in 0..n_clusters {
        for m in 0..q {
            mu0[(m, g)] /= sizes[g] as f64;
        }
    }

    let tau0: Vec<f64> = sizes.iter().map(|&s| s as f64 / n as f64).collect();

    let mut theta0 = Vec::with_capacity(dataset.n_categorical());
    for (j, &l) in dataset.levels().iter().enumerate() {
        let mut freq = DMatrix::zeros(n_clusters, l);
        for i in 0..n {
            freq[(z0[i], dataset.categorical_code(i, j) - 1)] += 1.0;
        }
        for g in 0..n_clusters {
            let total = sizes[g] as f64 + l as f64;
            for lev in 0..l {
                freq[(g, lev)] = (freq[(g, lev)] + 1.0) / total;
            }
        }
        theta0.push(freq);
    }

    // Pooled within-cluster scatter; per-cluster covariance falls back to the
    // pooled one when a cluster is too small to be full rank.
    let mut pooled = DMatrix::zeros(q, q);
    let mut scatters = vec![DMatrix::zeros(q, q); n_clusters];
    for (i, &g) in z0.iter().enumerate() {
        let d = x.row(i).transpose() - mu0.column(g);
        let outer = &d * d.transpose();
        pooled += &outer;
        scatters[g] += &outer;
    }
    let pooled_cov0 = regularized(pooled / (n as f64 - n_clusters as f64).max(1.0));
    let cluster_covs0: Vec<DMatrix<f64>> = (0..n_clusters)
        .map(|g| {
            if sizes[g] > q + 1 {
                regularized(&scatters[g] / (sizes[g] as f64 - 1.0))
            } else {
                pooled_cov0.clone()
            }
        })
        .collect();
    let variances0: Vec<f64> = (0..q).map(|m| pooled_cov0[(m, m)]).collect();

    Ok(InitResult {
        z0,
        mu0,
        tau0,
        theta0,
        variances0,
        pooled_cov0,
        cluster_covs0,
    })
}

/// Ridge a covariance just enough that its Cholesky exists.
fn regularized(mut cov: DMatrix<f64>) -> DMatrix<f64> {
    let q = cov.nrows();
    if cov.clone().cholesky().is_none() {
        let ridge = 1e-6 * (cov.trace() / q as f64).max(1e-6);
        for m in 0..q {
            cov[(m, m)] += ridge;
        }
    }
    cov
}

fn kmeans(
    x: &DMatrix<f64>,
    rows: &[usize],
    n_clusters: usize,
    rng: &mut RngStream,
) -> Vec<DVector<f64>> {
    let mut centroids = kmeans_pp_seed(x, rows, n_clusters, rng);
    for _ in 0..100 {
        let mut sums = vec![DVector::zeros(x.ncols()); n_clusters];
        let mut counts = vec![0usize; n_clusters];
        for &i in rows {
            let g = nearest(&x.row(i).transpose(), &centroids);
            sums[g] += x.row(i).transpose();
            counts[g] += 1;
        }
        let mut moved = false;
        for g in 0..n_clusters {
            if counts[g] == 0 {
                continue;
            }
            let new = &sums[g] / counts[g] as f64;
            if (&new - &centroids[g]).norm_squared() > 1e-16 {
                moved = true;
            }
            centroids[g] = new;
        }
        if !moved {
            break;
        }
    }
    centroids
}

fn kmeans_pp_seed(
    x: &DMatrix<f64>,
    rows: &[usize],
    n_clusters: usize,
    rng: &mut RngStream,
) -> Vec<DVector<f64>> {
    let first = rows[rng.gen_range(0..rows.len())];
    let mut centroids = vec![x.row(first).transpose()];
    let mut d2: Vec<f64> = rows
        .iter()
        .map(|&i| (x.row(i).transpose() - &centroids[0]).norm_squared())
        .collect();
    while centroids.len() < n_clusters {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = rows.len() - 1;
            for (idx, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = idx;
                    break;
                }
                u -= w;
            }
            rows[chosen]
        } else {
            rows[rng.gen_range(0..rows.len())]
        };
        let c = x.row(next).transpose();
        for (idx, &i) in rows.iter().enumerate() {
            let d = (x.row(i).transpose() - &c).norm_squared();
            if d < d2[idx] {
                d2[idx] = d;
            }
        }
        centroids.push(c);
    }
    centroids
}

fn nearest(point: &DVector<f64>, centroids: &[DVector<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (g, c) in centroids.iter().enumerate() {
        let d = (point - c).norm_squared();
        if d < best_d {
            best_d = d;
            best = g;
        }
    }
    best
}

fn assign_nearest(x: &DMatrix<f64>, centroids: &[DVector<f64>]) -> Vec<usize> {
    (0..x.nrows())
        .map(|i| nearest(&x.row(i).transpose(), centroids))
        .collect()
}

fn within_ss(x: &DMatrix<f64>, centroids: &[DVector<f64>]) -> f64 {
    (0..x.nrows())
        .map(|i| {
            let p = x.row(i).transpose();
            (&p - &centroids[nearest(&p, centroids)]).norm_squared()
        })
        .sum()
}

fn label_counts(labels: &[usize], n_clusters: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_clusters];
    for &g in labels {
        counts[g] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ingest, IngestSpec};
    use approx::assert_relative_eq;

    fn blob_dataset(seed: u64, n_per: usize, centers: &[f64]) -> MixedDataset {
        let mut rng = RngStream::new(seed);
        let mut csv = String::from("x,c\n");
        for (k, &c) in centers.iter().enumerate() {
            for _ in 0..n_per {
                let draw: f64 = rng.sample(rand_distr::StandardNormal);
                let v = c + draw;
                csv.push_str(&format!("{v},{}\n", if k % 2 == 0 { "a" } else { "b" }));
            }
        }
        let spec = IngestSpec::parse("continuous=x\ncategorical=c\n").unwrap();
        ingest(csv.as_bytes(), &spec).unwrap()
    }

    #[test]
    fn omega_clamps_for_constant_magnitudes() {
        let mu0 = DMatrix::from_element(3, 2, 1.5);
        assert_relative_eq!(compute_omega(&mu0, 75).unwrap(), 1.0001);
        let mixed_signs = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, -1.0]);
        assert_relative_eq!(compute_omega(&mixed_signs, 75).unwrap(), 1.0001);
        // Near-zero lower quartile: capped instead of exploding.
        let extreme = DMatrix::from_row_slice(2, 2, &[0.001, 0.001, 5.0, 5.0]);
        assert_relative_eq!(compute_omega(&extreme, 75).unwrap(), 100.0);
    }

    #[test]
    fn omega_ratio_squared() {
        // 12 entries: bottom quartile mean 0.3, top (k=75) mean 3.0.
        let mut entries = vec![0.3; 3];
        entries.extend(vec![1.0; 6]);
        entries.extend(vec![3.0; 3]);
        let mu0 = DMatrix::from_row_slice(3, 4, &entries);
        let omega = compute_omega(&mu0, 75).unwrap();
        assert_relative_eq!(omega, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn omega_zero_denominator_falls_back() {
        let mu0 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 5.0, 5.0]);
        assert_relative_eq!(compute_omega(&mu0, 75).unwrap(), 100.0);
    }

    #[test]
    fn defaults_match_reference_values() {
        let data = blob_dataset(1, 30, &[-5.0, 5.0]);
        let mut rng = RngStream::new(2);
        let init = bootstrap_kmeans_init(&data, 3, 10, &mut rng).unwrap();
        let h = default_hyperparameters(&data, 3, 75, &init).unwrap();
        assert_eq!(h.delta_dirichlet, vec![1.0 / 3.0; 3]);
        assert_relative_eq!(h.eei_a, 2.0);
        assert_relative_eq!(h.eei_b, 1.0);
        assert_relative_eq!(h.vvv_nu[0], data.q() as f64 + 2.0);
        assert_relative_eq!(h.a_delta0, 2.0);
        assert_relative_eq!(h.b_delta0, 0.005);
        assert!(h.omega >= 1.0001);
        // Spike concentration reproduces (C/n) * counts.
        let n = data.n() as f64;
        let total: f64 = h.alpha_spike[0].iter().sum();
        assert_relative_eq!(total, 1000.0 / n * n, epsilon = 1e-9);
    }

    #[test]
    fn prior_scale_shrinks_with_cluster_count() {
        let data = blob_dataset(3, 40, &[-4.0, 4.0]);
        let mut rng = RngStream::new(4);
        let init1 = bootstrap_kmeans_init(&data, 1, 5, &mut rng).unwrap();
        let init4 = bootstrap_kmeans_init(&data, 4, 5, &mut rng).unwrap();
        let h1 = default_hyperparameters(&data, 1, 75, &init1).unwrap();
        let h4 = default_hyperparameters(&data, 4, 75, &init4).unwrap();
        let q = data.q() as f64;
        assert_relative_eq!(
            h4.vvv_s[0].trace(),
            h1.vvv_s[0].trace() / 4.0_f64.powf(2.0 / q),
            epsilon = 1e-10
        );
    }

    #[test]
    fn single_cluster_init_is_trivial() {
        let data = blob_dataset(5, 25, &[0.0, 2.0]);
        let mut rng = RngStream::new(6);
        let init = bootstrap_kmeans_init(&data, 1, 5, &mut rng).unwrap();
        assert!(init.z0.iter().all(|&g| g == 0));
        // Columns are standardized, so the single centroid is 0.
        assert!(init.mu0[(0, 0)].abs() < 1e-9);
        assert_relative_eq!(init.tau0[0], 1.0);
    }

    #[test]
    fn separated_blobs_recovered() {
        // Two 1-d blobs at +-5 raw; standardized they sit near +-1 with small
        // within-blob sd, so centroids in raw units come back near +-5.
        let data = blob_dataset(7, 200, &[-5.0, 5.0]);
        let mut rng = RngStream::new(8);
        let init = bootstrap_kmeans_init(&data, 2, 20, &mut rng).unwrap();
        let t = data.transforms()[0];
        let mut raw: Vec<f64> = (0..2).map(|g| t.invert(init.mu0[(0, g)])).collect();
        raw.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((raw[0] + 5.0).abs() < 0.2, "low centroid {}", raw[0]);
        assert!((raw[1] - 5.0).abs() < 0.2, "high centroid {}", raw[1]);
    }

    #[test]
    fn init_is_deterministic() {
        let data = blob_dataset(9, 50, &[-3.0, 3.0]);
        let a = bootstrap_kmeans_init(&data, 2, 10, &mut RngStream::new(11)).unwrap();
        let b = bootstrap_kmeans_init(&data, 2, 10, &mut RngStream::new(11)).unwrap();
        assert_eq!(a.z0, b.z0);
        assert_eq!(a.mu0, b.mu0);
    }

    #[test]
    fn init_satisfies_state_invariants() {
        let data = blob_dataset(13, 60, &[-4.0, 0.0, 4.0]);
        let mut rng = RngStream::new(14);
        let init = bootstrap_kmeans_init(&data, 3, 15, &mut rng).unwrap();
        assert_relative_eq!(init.tau0.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for theta in &init.theta0 {
            for g in 0..theta.nrows() {
                assert_relative_eq!(theta.row(g).sum(), 1.0, epsilon = 1e-12);
            }
        }
        for cov in &init.cluster_covs0 {
            assert!(cov.clone().cholesky().is_some());
        }
    }

    #[test]
    fn invalid_arguments_rejected() {
        let data = blob_dataset(15, 10, &[0.0, 1.0]);
        let mut rng = RngStream::new(16);
        assert!(bootstrap_kmeans_init(&data, 0, 5, &mut rng).is_err());
        assert!(bootstrap_kmeans_init(&data, 21, 5, &mut rng).is_err());
        let init = bootstrap_kmeans_init(&data, 2, 5, &mut rng).unwrap();
        assert!(default_hyperparameters(&data, 2, 50, &init).is_err());
        assert!(default_hyperparameters(&data, 13, 75, &init).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(percentile(&v, 0.0), 1.0);
        assert_relative_eq!(percentile(&v, 100.0), 4.0);
        assert_relative_eq!(percentile(&v, 50.0), 2.5);
    }

    #[test]
    fn rng_gen_range_smoke() {
        let mut rng = RngStream::new(1);
        for _ in 0..100 {
            let v = rng.gen_range(0..5);
            assert!(v < 5);
        }
    }
}
