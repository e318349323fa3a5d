//! Scenario generator: three-cluster mixed data under the three covariance
//! structures, with optional detection-limit censoring at planted fractions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::{CensorMark, MixedDataset};
use crate::error::{Error, Result};
use crate::model::StructureTag;
use crate::stochastic::{draw_categorical, draw_mvn, RngStream, SpdMatrix};

pub const SCENARIO_Q: usize = 7;
pub const SCENARIO_LEVELS: [usize; 7] = [2, 3, 4, 2, 3, 4, 4];
pub const SCENARIO_TAU: [f64; 3] = [0.5, 0.3, 0.2];

#[derive(Debug, Clone, Copy)]
pub struct ScenarioSpec {
    pub structure: StructureTag,
    pub n: usize,
    /// Censoring percentage: 0, 20, or 40.
    pub censor_level: u8,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(structure: StructureTag, n: usize, censor_level: u8, seed: u64) -> Result<Self> {
        if !matches!(censor_level, 0 | 20 | 40) {
            return Err(Error::Validation(format!(
                "censor level {censor_level} not one of 0, 20, 40"
            )));
        }
        if n < 10 {
            return Err(Error::Validation("scenario needs at least 10 rows".into()));
        }
        Ok(Self {
            structure,
            n,
            censor_level,
            seed,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PlantedTruth {
    pub labels: Vec<usize>,
    pub tau: [f64; 3],
    /// 7 x 3 cluster means on the raw scale.
    pub mu: DMatrix<f64>,
    /// One raw-scale covariance per cluster.
    pub sigmas: Vec<DMatrix<f64>>,
    /// Fixed level tables (3 x L) for the table-generated categorical
    /// variables; None for the two link-generated binaries.
    pub theta: Vec<Option<DMatrix<f64>>>,
    /// True-signal mask over all 14 variables (the weak continuous variable
    /// and all noise variables are false).
    pub dominant: Vec<bool>,
}

fn cluster_means() -> DMatrix<f64> {
    DMatrix::from_columns(&[
        DVector::from_row_slice(&[5.0, 6.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        DVector::from_row_slice(&[5.0, 0.0, 7.0, -3.0, -0.5, -0.2, 0.0]),
        DVector::from_row_slice(&[0.0, 6.0, 7.0, 3.0, 0.5, 0.2, 0.0]),
    ])
}

fn sigma_ind() -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(&[8.0, 4.0, 4.0, 4.0, 6.0, 6.0, 6.0]))
}

fn with_offdiag(diag: [f64; 7], off: f64) -> DMatrix<f64> {
    DMatrix::from_fn(7, 7, |i, j| if i == j { diag[i] } else { off })
}

fn sigma_cor1() -> DMatrix<f64> {
    with_offdiag([4.0, 8.0, 4.0, 4.0, 6.0, 8.0, 8.0], 1.0)
}

/// The printed explicit matrix (its diag-plus-ones shorthand disagrees at one
/// entry; the explicit matrix is taken as authoritative).
fn sigma_cor2() -> DMatrix<f64> {
    with_offdiag([4.0, 8.0, 8.0, 4.0, 6.0, 8.0, 10.0], 2.0)
}

fn cluster_covariances(structure: StructureTag) -> Vec<DMatrix<f64>> {
    match structure {
        StructureTag::Eei => vec![sigma_ind(); 3],
        StructureTag::Eee => vec![sigma_cor2(); 3],
        StructureTag::Vvv => vec![sigma_cor2(), sigma_ind(), sigma_cor1()],
    }
}

fn fixed_theta_tables() -> Vec<Option<DMatrix<f64>>> {
    let m3 = |rows: [[f64; 3]; 3]| {
        DMatrix::from_fn(3, 3, |g, l| rows[g][l])
    };
    let m4 = |rows: [[f64; 4]; 3]| {
        DMatrix::from_fn(3, 4, |g, l| rows[g][l])
    };
    vec![
        None, // binary from the logistic link on variables 3 and 4
        Some(m3([[0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.2, 0.2, 0.6]])),
        Some(m4([
            [0.5, 0.3, 0.1, 0.1],
            [0.1, 0.5, 0.3, 0.1],
            [0.1, 0.1, 0.5, 0.3],
        ])),
        None, // binary from the logistic link on variables 6 and 7
        Some(m3([[1.0 / 3.0; 3]; 3])),
        Some(m4([[0.25; 4]; 3])),
        Some(m4([[0.1, 0.2, 0.3, 0.4]; 3])),
    ]
}

fn dominant_mask() -> Vec<bool> {
    // Variables 1-4 continuous signal, 8-10 categorical signal; the weak
    // continuous variable (5) and all noise variables are excluded.
    (1..=14)
        .map(|v| matches!(v, 1..=4 | 8 | 9 | 10))
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Empirical censoring bounds for one column: (lower, upper) percentile pair
/// at 10/90 for 20% total censoring or 20/80 for 40%.
pub fn censoring_bounds(values: &[f64], censor_level: u8) -> Result<Option<(f64, f64)>> {
    match censor_level {
        0 => Ok(None),
        20 | 40 => {
            let lo_p = if censor_level == 20 { 10.0 } else { 20.0 };
            let mut sorted = values.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pct = |p: f64| -> f64 {
                let rank = p / 100.0 * (sorted.len() - 1) as f64;
                let lo = rank.floor() as usize;
                let hi = rank.ceil() as usize;
                let frac = rank - lo as f64;
                sorted[lo] * (1.0 - frac) + sorted[hi] * frac
            };
            Ok(Some((pct(lo_p), pct(100.0 - lo_p))))
        }
        other => Err(Error::Validation(format!("bad censor level {other}"))),
    }
}

/// Draw one scenario: labels from the planted mixture weights, the seven
/// continuous variables from the cluster's multivariate normal, the seven
/// categorical variables from the planted tables and logistic links, then
/// censor variables 3-5 at their empirical percentiles and standardize.
pub fn generate(spec: &ScenarioSpec) -> Result<(MixedDataset, PlantedTruth)> {
    let mut rng = RngStream::new(spec.seed);
    let n = spec.n;
    let mu = cluster_means();
    let sigmas = cluster_covariances(spec.structure);
    let spds: Vec<SpdMatrix> = sigmas
        .iter()
        .map(|s| SpdMatrix::new(s.clone(), "scenario_sigma"))
        .collect::<Result<_>>()?;
    let theta_tables = fixed_theta_tables();

    let labels: Vec<usize> = (0..n)
        .map(|_| draw_categorical(&SCENARIO_TAU, &mut rng))
        .collect::<Result<_>>()?;

    let mut continuous = DMatrix::zeros(n, SCENARIO_Q);
    for (i, &g) in labels.iter().enumerate() {
        let mu_g = DVector::from_column_slice(mu.column(g).as_slice());
        let row = draw_mvn(&mu_g, &spds[g], &mut rng);
        for m in 0..SCENARIO_Q {
            continuous[(i, m)] = row[m];
        }
    }

    let n_cat = SCENARIO_LEVELS.len();
    let mut categorical = vec![0usize; n * n_cat];
    for i in 0..n {
        let g = labels[i];
        for (j, table) in theta_tables.iter().enumerate() {
            let code = match table {
                Some(t) => {
                    let weights: Vec<f64> = t.row(g).iter().copied().collect();
                    draw_categorical(&weights, &mut rng)? + 1
                }
                None => {
                    // Logistic links on the raw continuous draws.
                    let p = if j == 0 {
                        sigmoid(0.1 * continuous[(i, 2)] + 0.5 * continuous[(i, 3)])
                    } else {
                        sigmoid(0.1 * continuous[(i, 5)] + 0.5 * continuous[(i, 6)])
                    };
                    if rng.gen::<f64>() < p {
                        2
                    } else {
                        1
                    }
                }
            };
            categorical[i * n_cat + j] = code;
        }
    }

    // Censor continuous variables 3-5 (0-based columns 2..=4) at their own
    // empirical percentiles; censored cells move to their bound.
    let mut marks = vec![CensorMark::Observed; n * SCENARIO_Q];
    for m in 2..=4 {
        let column: Vec<f64> = (0..n).map(|i| continuous[(i, m)]).collect();
        if let Some((lo, hi)) = censoring_bounds(&column, spec.censor_level)? {
            for i in 0..n {
                if continuous[(i, m)] < lo {
                    continuous[(i, m)] = lo;
                    marks[i * SCENARIO_Q + m] = CensorMark::LeftCensored { bound: lo };
                } else if continuous[(i, m)] > hi {
                    continuous[(i, m)] = hi;
                    marks[i * SCENARIO_Q + m] = CensorMark::RightCensored { bound: hi };
                }
            }
        }
    }

    let continuous_names: Vec<String> = (1..=SCENARIO_Q).map(|v| format!("X{v}")).collect();
    let categorical_names: Vec<String> =
        (SCENARIO_Q + 1..=SCENARIO_Q + n_cat).map(|v| format!("X{v}")).collect();
    let level_labels: Vec<Vec<String>> = SCENARIO_LEVELS
        .iter()
        .map(|&l| (1..=l).map(|v| v.to_string()).collect())
        .collect();

    let dataset = MixedDataset::from_raw(
        continuous,
        marks,
        categorical,
        SCENARIO_LEVELS.to_vec(),
        level_labels,
        continuous_names,
        categorical_names,
        &[false; SCENARIO_Q],
    )?;
    let truth = PlantedTruth {
        labels,
        tau: SCENARIO_TAU,
        mu,
        sigmas,
        theta: theta_tables,
        dominant: dominant_mask(),
    };
    Ok((dataset, truth))
}
