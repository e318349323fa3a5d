//! Seedable random-variate generators and log-density evaluators for every
//! distribution the Gibbs sampler touches.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, ChiSquared, Distribution, Gamma, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// A reproducible random stream. Identical `(seed, stream)` pairs produce
/// identical draw sequences; distinct streams never share state.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a `(chain, purpose)` pair under a common seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// A validated symmetric positive-definite matrix with its Cholesky factor.
///
/// Construction symmetrizes benign round-off (relative asymmetry up to 1e-12)
/// and retries a failed factorization once with a diagonal jitter of
/// `1e-8 * trace / dim` before reporting the matrix as singular.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    matrix: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
}

impl SpdMatrix {
    pub fn new(matrix: DMatrix<f64>, role: &str) -> Result<Self> {
        let dim = matrix.nrows();
        if dim == 0 || matrix.ncols() != dim {
            return Err(Error::Parameter(format!(
                "matrix `{role}` must be square and non-empty"
            )));
        }
        let scale = matrix.amax().max(1.0);
        for i in 0..dim {
            for j in (i + 1)..dim {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Parameter(format!(
                        "matrix `{role}` is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        if let Some(chol) = sym.clone().cholesky() {
            return Ok(Self {
                matrix: sym,
                chol_lower: chol.l(),
            });
        }
        // One jitter retry before declaring the matrix singular.
        let jitter = 1e-8 * sym.trace() / dim as f64;
        let mut jittered = sym;
        for i in 0..dim {
            jittered[(i, i)] += jitter;
        }
        match jittered.clone().cholesky() {
            Some(chol) => Ok(Self {
                matrix: jittered,
                chol_lower: chol.l(),
            }),
            None => Err(Error::NotPositiveDefinite { role: role.into() }),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn chol_lower(&self) -> &DMatrix<f64> {
        &self.chol_lower
    }

    pub fn log_determinant(&self) -> f64 {
        2.0 * self.chol_lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let identity = DMatrix::identity(self.dim(), self.dim());
        let linv = self
            .chol_lower
            .clone()
            .solve_lower_triangular(&identity)
            .expect("Cholesky factor is invertible");
        linv.transpose() * linv
    }
}

/// Draw from N(mean, cov) via the lower Cholesky factor.
pub fn draw_mvn(mean: &DVector<f64>, cov: &SpdMatrix, rng: &mut RngStream) -> DVector<f64> {
    assert_eq!(cov.dim(), mean.len(), "mean/cov dimension mismatch");
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + cov.chol_lower() * z
}

/// Log-density of N(mean, cov) at `x`, evaluated through the Cholesky factor.
pub fn logpdf_mvn(x: &DVector<f64>, mean: &DVector<f64>, cov: &SpdMatrix) -> f64 {
    assert_eq!(x.len(), mean.len());
    assert_eq!(cov.dim(), mean.len());
    let diff = x - mean;
    let y = cov
        .chol_lower()
        .clone()
        .solve_lower_triangular(&diff)
        .expect("Cholesky factor is invertible");
    -0.5 * (mean.len() as f64 * LN_2PI + cov.log_determinant() + y.norm_squared())
}

/// Draw from the inverse Wishart with `df` degrees of freedom and scale
/// matrix `scale`, so that `E[draw] = scale / (df - dim - 1)`.
///
/// Sampling uses the Bartlett decomposition of the Wishart on the inverted
/// scale, followed by inversion.
pub fn draw_inverse_wishart(df: f64, scale: &SpdMatrix, rng: &mut RngStream) -> Result<SpdMatrix> {
    let dim = scale.dim();
    if df <= dim as f64 - 1.0 {
        return Err(Error::Parameter(format!(
            "inverse Wishart df {df} must exceed dim - 1 = {}",
            dim as f64 - 1.0
        )));
    }
    let wishart_scale = SpdMatrix::new(scale.inverse(), "inverse Wishart inverted scale")?;
    let mut bartlett = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let chi2 = ChiSquared::new(df - i as f64)
            .map_err(|e| Error::Parameter(format!("chi-squared df: {e}")))?;
        bartlett[(i, i)] = chi2.sample(&mut *rng).sqrt();
        for j in 0..i {
            bartlett[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let factor = wishart_scale.chol_lower() * bartlett;
    let wishart = &factor * factor.transpose();
    let wishart = SpdMatrix::new(wishart, "Wishart draw")?;
    SpdMatrix::new(wishart.inverse(), "inverse Wishart draw")
}

/// Draw from InvGamma(a, b) with mean `b / (a - 1)` for `a > 1`.
pub fn draw_inverse_gamma(a: f64, b: f64, rng: &mut RngStream) -> Result<f64> {
    if a <= 0.0 || b <= 0.0 {
        return Err(Error::Parameter(format!(
            "inverse gamma parameters must be positive, got a={a}, b={b}"
        )));
    }
    let gamma =
        Gamma::new(a, 1.0 / b).map_err(|e| Error::Parameter(format!("gamma shape: {e}")))?;
    Ok(1.0 / gamma.sample(&mut *rng))
}

/// Draw from Dir(alpha); the result is a simplex vector.
pub fn draw_dirichlet(alpha: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
    if alpha.is_empty() || alpha.iter().any(|&a| a <= 0.0) {
        return Err(Error::Parameter(
            "Dirichlet concentrations must be positive".into(),
        ));
    }
    let mut draws = Vec::with_capacity(alpha.len());
    for &a in alpha {
        let gamma =
            Gamma::new(a, 1.0).map_err(|e| Error::Parameter(format!("gamma shape: {e}")))?;
        draws.push(gamma.sample(&mut *rng));
    }
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 {
        // All gamma draws underflowed; fall back to the concentration weights.
        let total: f64 = alpha.iter().sum();
        return Ok(alpha.iter().map(|&a| a / total).collect());
    }
    for d in &mut draws {
        *d /= sum;
    }
    Ok(draws)
}

pub fn draw_beta(a: f64, b: f64, rng: &mut RngStream) -> Result<f64> {
    let beta =
        Beta::new(a, b).map_err(|e| Error::Parameter(format!("beta parameters: {e}")))?;
    Ok(beta.sample(&mut *rng))
}

/// Which side of the bound the truncated draw must fall on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationSide {
    /// Draw strictly below the bound.
    BelowBound,
    /// Draw strictly above the bound.
    AboveBound,
}

/// Draw from N(mu, sigma^2) truncated at `bound` on the requested side.
///
/// Moderate truncations use the inverse CDF; bounds more than 4 standard
/// deviations into the tail switch to one-sided exponential rejection, which
/// keeps precision where the inverse CDF degrades.
pub fn draw_truncated_normal(
    mu: f64,
    sigma: f64,
    bound: f64,
    side: TruncationSide,
    rng: &mut RngStream,
) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::Parameter(format!(
            "truncated normal sigma must be positive, got {sigma}"
        )));
    }
    // Reduce both sides to sampling z > a on the standard scale.
    let a = match side {
        TruncationSide::AboveBound => (bound - mu) / sigma,
        TruncationSide::BelowBound => (mu - bound) / sigma,
    };
    let z = sample_std_normal_above(a, rng)?;
    let value = match side {
        TruncationSide::AboveBound => mu + sigma * z,
        TruncationSide::BelowBound => mu - sigma * z,
    };
    Ok(value)
}

/// Sample z ~ N(0,1) conditioned on z > a.
fn sample_std_normal_above(a: f64, rng: &mut RngStream) -> Result<f64> {
    if a > 4.0 {
        // log of the tail mass 1 - Phi(a) ~ phi(a)/a.
        let log_mass = -0.5 * a * a - (a * (2.0 * std::f64::consts::PI).sqrt()).ln();
        if log_mass < 1e-300_f64.ln() {
            return Err(Error::TailUnderflow {
                mass: log_mass.exp(),
            });
        }
        // Robert's translated-exponential rejection sampler.
        let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
        loop {
            let u: f64 = rng.gen();
            let z = a - u.ln() / lambda;
            let accept: f64 = rng.gen();
            if accept <= (-(z - lambda) * (z - lambda) / 2.0).exp() {
                return Ok(z);
            }
        }
    }
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let lower = std_normal.cdf(a);
    let u: f64 = rng.gen();
    let p = lower + u * (1.0 - lower);
    Ok(std_normal.inverse_cdf(p.min(1.0 - f64::EPSILON)))
}

/// Draw an index with probability proportional to the (unnormalized) weights.
pub fn draw_categorical(weights: &[f64], rng: &mut RngStream) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return Ok(i);
        }
    }
    Ok(weights.len() - 1)
}

/// Log-density of the scalar normal N(mean, var) at `x`.
pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let diff = x - mean;
    -0.5 * (LN_2PI + var.ln() + diff * diff / var)
}

/// Log-density of Dir(alpha) at the simplex point `theta`.
pub fn log_dirichlet_pdf(theta: &[f64], alpha: &[f64]) -> f64 {
    debug_assert_eq!(theta.len(), alpha.len());
    let alpha_sum: f64 = alpha.iter().sum();
    let mut logp = ln_gamma(alpha_sum);
    for (&t, &a) in theta.iter().zip(alpha) {
        logp += (a - 1.0) * t.max(1e-300).ln() - ln_gamma(a);
    }
    logp
}
