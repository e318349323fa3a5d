//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;

use bfmm::data::{ingest_path, IngestSpec, MixedDataset};
use bfmm::evaluation::adjusted_rand_index;
use bfmm::fit::{fit_model, model_select, FitConfig, FitOutput};
use bfmm::model::{CovariancePayload, StructureTag};
use bfmm::postprocess::FitResult;
use bfmm::simgen::{generate, ScenarioSpec};
use bfmm::{Error, Result};

use crate::output::{ensure_dir, file_sha256, sig6, write_manifest};

#[derive(Args)]
pub struct SimulateArgs {
    /// Scenario covariance structure: eei, eee, or vvv
    #[arg(long)]
    scenario: String,
    /// Censoring percentage: 0, 20, or 40
    #[arg(long, default_value_t = 0)]
    censor: u8,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let structure = StructureTag::parse(&args.scenario)?;
    let spec = ScenarioSpec::new(structure, args.n, args.censor, args.seed)?;
    let (dataset, truth) = generate(&spec)?;
    ensure_dir(&args.out)?;

    let data_path = args.out.join("data.csv");
    dataset.emit(std::fs::File::create(&data_path)?, b',')?;

    // Dataset-spec file so the fit/select commands can re-ingest the CSV.
    let mut spec_text = String::from("delimiter=,\n");
    writeln!(
        spec_text,
        "continuous={}",
        dataset.continuous_names().join(",")
    )
    .expect("string write");
    writeln!(
        spec_text,
        "categorical={}",
        dataset.categorical_names().join(",")
    )
    .expect("string write");
    std::fs::write(args.out.join("dataset.spec"), spec_text)?;

    let mut truth_writer = csv::Writer::from_path(args.out.join("truth.csv"))?;
    truth_writer.write_record(["row", "label"])?;
    for (i, &g) in truth.labels.iter().enumerate() {
        truth_writer.write_record([(i + 1).to_string(), (g + 1).to_string()])?;
    }
    truth_writer.flush()?;

    let mut var_writer = csv::Writer::from_path(args.out.join("variables.csv"))?;
    var_writer.write_record(["variable", "dominant"])?;
    for (name, &dom) in dataset
        .column_names()
        .iter()
        .zip(truth.dominant.iter())
    {
        var_writer.write_record([name.as_str(), if dom { "1" } else { "0" }])?;
    }
    var_writer.flush()?;

    write_manifest(
        &args.out,
        &[
            ("command", "simulate".into()),
            ("scenario", structure.as_str().to_lowercase()),
            ("censor", args.censor.to_string()),
            ("n", args.n.to_string()),
            ("seed", args.seed.to_string()),
            ("data_sha256", file_sha256(&data_path)?),
        ],
    )?;
    Ok(())
}

/// Flat key=value run-config file; explicit flags override file values.
fn load_config(path: Option<&Path>) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    if let Some(path) = path {
        for line in std::fs::read_to_string(path)?.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("bad config line: {line}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    Ok(map)
}

fn resolve<T: std::str::FromStr>(
    flag: Option<T>,
    cfg: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match cfg.get(key) {
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::Validation(format!("bad config value for {key}: {raw}"))),
        None => Ok(default),
    }
}

#[derive(Args)]
pub struct FitArgs {
    /// Dataset CSV
    #[arg(long)]
    data: PathBuf,
    /// Dataset-spec file declaring column roles and delimiter
    #[arg(long)]
    spec: PathBuf,
    /// Optional key=value run-config file (flags take precedence)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Covariance structure: eei, eee, or vvv
    #[arg(long)]
    structure: Option<String>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Burn-in iterations (default 200 at 500 iterations, otherwise half)
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Percentile for the slab/spike variance-ratio rule (60-90)
    #[arg(long)]
    k_percentile: Option<usize>,
    /// Bootstrap K-means resamples
    #[arg(long)]
    resamples: Option<usize>,
    /// Use the literal printed spike-variance rate (no 1/2 factor)
    #[arg(long, default_value_t = false)]
    literal_spike_rate: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

struct ResolvedFit {
    config: FitConfig,
    dataset: MixedDataset,
}

fn resolve_fit(args: &FitArgs, default_chains: usize) -> Result<ResolvedFit> {
    let cfg = load_config(args.config.as_deref())?;
    let structure_str = match &args.structure {
        Some(s) => s.clone(),
        None => cfg
            .get("structure")
            .cloned()
            .ok_or_else(|| Error::Validation("missing --structure".into()))?,
    };
    let structure = StructureTag::parse(&structure_str)?;
    let total_iterations = resolve(args.iterations, &cfg, "iterations", 500)?;
    let default_burn_in = if total_iterations == 500 {
        200
    } else {
        total_iterations / 2
    };
    let config = FitConfig {
        structure,
        n_clusters: resolve(args.clusters, &cfg, "clusters", 3)?,
        n_chains: resolve(args.chains, &cfg, "chains", default_chains)?,
        total_iterations,
        burn_in: resolve(args.burn_in, &cfg, "burn_in", default_burn_in)?,
        seed: resolve(args.seed, &cfg, "seed", 1)?,
        k_percentile: resolve(args.k_percentile, &cfg, "k_percentile", 75)?,
        b_resamples: resolve(args.resamples, &cfg, "resamples", 50)?,
        paper_literal_a10: args.literal_spike_rate,
    };
    let spec = IngestSpec::from_file(&args.spec)?;
    let dataset = ingest_path(&args.data, &spec)?;
    Ok(ResolvedFit { config, dataset })
}

fn write_fit_outputs(
    out_dir: &Path,
    dataset: &MixedDataset,
    output: &FitOutput,
) -> Result<()> {
    let pooled = &output.pooled;
    let n_clusters = pooled.tau_hat.len();

    let mut assignments = csv::Writer::from_path(out_dir.join("assignments.csv"))?;
    let mut header = vec!["row".to_string(), "assignment".to_string()];
    header.extend((1..=n_clusters).map(|g| format!("p{g}")));
    assignments.write_record(&header)?;
    for i in 0..dataset.n() {
        let mut record = vec![(i + 1).to_string(), (pooled.z_hat[i] + 1).to_string()];
        record.extend((0..n_clusters).map(|g| sig6(pooled.posterior_probs[(i, g)])));
        assignments.write_record(&record)?;
    }
    assignments.flush()?;

    let mut importance = csv::Writer::from_path(out_dir.join("importance.csv"))?;
    importance.write_record(["variable", "weight"])?;
    for (name, w) in dataset.column_names().iter().zip(&pooled.importance) {
        importance.write_record([name.as_str(), &sig6(*w)])?;
    }
    importance.flush()?;

    std::fs::write(out_dir.join("parameters.txt"), parameter_report(dataset, pooled))?;
    std::fs::write(out_dir.join("diagnostics.txt"), diagnostics_report(output))?;
    Ok(())
}

fn parameter_report(dataset: &MixedDataset, pooled: &FitResult) -> String {
    let n_clusters = pooled.tau_hat.len();
    let mut text = String::new();
    writeln!(
        text,
        "mixture_weights={}",
        pooled.tau_hat.iter().map(|v| sig6(*v)).collect::<Vec<_>>().join(",")
    )
    .expect("string write");
    for (m, name) in dataset.continuous_names().iter().enumerate() {
        let row: Vec<String> = (0..n_clusters).map(|g| sig6(pooled.mu_hat[(m, g)])).collect();
        writeln!(text, "mean[{name}]={}", row.join(",")).expect("string write");
    }
    match &pooled.sigma_hat {
        CovariancePayload::Eei { variances } => {
            for (name, v) in dataset.continuous_names().iter().zip(variances) {
                writeln!(text, "variance[{name}]={}", sig6(*v)).expect("string write");
            }
        }
        CovariancePayload::Eee { sigma } => {
            for (m, name) in dataset.continuous_names().iter().enumerate() {
                let row: Vec<String> = (0..dataset.q())
                    .map(|p| sig6(sigma.matrix()[(m, p)]))
                    .collect();
                writeln!(text, "covariance[{name}]={}", row.join(",")).expect("string write");
            }
        }
        CovariancePayload::Vvv { sigmas } => {
            for (g, spd) in sigmas.iter().enumerate() {
                for (m, name) in dataset.continuous_names().iter().enumerate() {
                    let row: Vec<String> = (0..dataset.q())
                        .map(|p| sig6(spd.matrix()[(m, p)]))
                        .collect();
                    writeln!(text, "covariance[cluster{}][{name}]={}", g + 1, row.join(","))
                        .expect("string write");
                }
            }
        }
    }
    for (j, name) in dataset.categorical_names().iter().enumerate() {
        for g in 0..n_clusters {
            let row: Vec<String> = (0..pooled.theta_hat[j].ncols())
                .map(|l| sig6(pooled.theta_hat[j][(g, l)]))
                .collect();
            writeln!(text, "levels[{name}][cluster{}]={}", g + 1, row.join(","))
                .expect("string write");
        }
    }
    text
}

fn diagnostics_report(output: &FitOutput) -> String {
    let mut text = String::new();
    writeln!(text, "structure={}", output.score.structure).expect("string write");
    writeln!(text, "clusters={}", output.score.n_clusters).expect("string write");
    writeln!(text, "loglik_observed={}", sig6(output.score.loglik_observed))
        .expect("string write");
    writeln!(text, "loglik_complete={}", sig6(output.score.loglik_complete))
        .expect("string write");
    writeln!(text, "degrees_of_freedom={}", output.score.dof).expect("string write");
    writeln!(text, "bic={}", sig6(output.score.bic)).expect("string write");
    writeln!(text, "icl={}", sig6(output.score.icl)).expect("string write");
    match &output.convergence {
        Some(c) => writeln!(text, "mpsrf={}", sig6(c.mpsrf)).expect("string write"),
        None => writeln!(text, "mpsrf=NA").expect("string write"),
    }
    writeln!(text, "chains_run={}", output.n_chains_run).expect("string write");
    writeln!(text, "chains_failed={}", output.failures.len()).expect("string write");
    for f in &output.failures {
        writeln!(text, "failure={f}").expect("string write");
    }
    for (idx, inc) in output.included.iter().enumerate() {
        if !inc {
            writeln!(text, "excluded_from_pooling=chain_result_{idx}").expect("string write");
        }
    }
    text
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let resolved = resolve_fit(args, 4)?;
    ensure_dir(&args.out)?;
    let output = fit_model(&resolved.dataset, &resolved.config)?;
    write_fit_outputs(&args.out, &resolved.dataset, &output)?;
    write_manifest(
        &args.out,
        &[
            ("command", "fit".into()),
            ("data", args.data.display().to_string()),
            ("data_sha256", file_sha256(&args.data)?),
            ("structure", resolved.config.structure.as_str().to_lowercase()),
            ("clusters", resolved.config.n_clusters.to_string()),
            ("chains", resolved.config.n_chains.to_string()),
            ("iterations", resolved.config.total_iterations.to_string()),
            ("burn_in", resolved.config.burn_in.to_string()),
            ("seed", resolved.config.seed.to_string()),
            ("k_percentile", resolved.config.k_percentile.to_string()),
            ("resamples", resolved.config.b_resamples.to_string()),
            (
                "literal_spike_rate",
                resolved.config.paper_literal_a10.to_string(),
            ),
        ],
    )?;
    println!(
        "fit complete: {} clusters, BIC {}, ICL {}, {} of {} chains failed",
        resolved.config.n_clusters,
        sig6(output.score.bic),
        sig6(output.score.icl),
        output.failures.len(),
        output.n_chains_run
    );
    Ok(())
}

#[derive(Args)]
pub struct SelectArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Comma-separated cluster-count grid, e.g. 2,3,4
    #[arg(long, default_value = "2,3,4")]
    cluster_grid: String,
    /// Comma-separated structures, e.g. eei,eee,vvv
    #[arg(long, default_value = "eei,eee,vvv")]
    structures: String,
}

pub fn select(args: &SelectArgs) -> Result<()> {
    // The grid entries override structure; a placeholder keeps the shared
    // config resolution happy when --structure is omitted.
    let fit_args = FitArgs {
        data: args.fit.data.clone(),
        spec: args.fit.spec.clone(),
        config: args.fit.config.clone(),
        structure: args.fit.structure.clone().or_else(|| Some("eei".into())),
        clusters: args.fit.clusters,
        chains: args.fit.chains,
        iterations: args.fit.iterations,
        burn_in: args.fit.burn_in,
        seed: args.fit.seed,
        k_percentile: args.fit.k_percentile,
        resamples: args.fit.resamples,
        literal_spike_rate: args.fit.literal_spike_rate,
        out: args.fit.out.clone(),
    };
    let resolved = resolve_fit(&fit_args, 4)?;

    let g_grid: Vec<usize> = args
        .cluster_grid
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Validation(format!("bad cluster count `{s}`")))
        })
        .collect::<Result<_>>()?;
    let structures: Vec<StructureTag> = args
        .structures
        .split(',')
        .map(|s| StructureTag::parse(s.trim()))
        .collect::<Result<_>>()?;
    if g_grid.is_empty() || structures.is_empty() {
        return Err(Error::Validation("empty model grid".into()));
    }

    ensure_dir(&args.fit.out)?;
    let entries = model_select(&resolved.dataset, &g_grid, &structures, &resolved.config);
    let mut writer = csv::Writer::from_path(args.fit.out.join("selection.csv"))?;
    writer.write_record(["structure", "clusters", "bic", "icl", "mpsrf", "chain_failures", "error"])?;
    for e in &entries {
        writer.write_record([
            e.structure.as_str().to_lowercase(),
            e.n_clusters.to_string(),
            e.score.as_ref().map(|s| sig6(s.bic)).unwrap_or_else(|| "NA".into()),
            e.score.as_ref().map(|s| sig6(s.icl)).unwrap_or_else(|| "NA".into()),
            e.mpsrf.map(sig6).unwrap_or_else(|| "NA".into()),
            e.n_chain_failures.to_string(),
            e.error.clone().unwrap_or_default(),
        ])?;
    }
    writer.flush()?;
    write_manifest(
        &args.fit.out,
        &[
            ("command", "select".into()),
            ("data", args.fit.data.display().to_string()),
            ("data_sha256", file_sha256(&args.fit.data)?),
            ("cluster_grid", args.cluster_grid.clone()),
            ("structures", args.structures.clone()),
            ("chains", resolved.config.n_chains.to_string()),
            ("iterations", resolved.config.total_iterations.to_string()),
            ("burn_in", resolved.config.burn_in.to_string()),
            ("seed", resolved.config.seed.to_string()),
        ],
    )?;
    if let Some(best) = entries.iter().find(|e| e.score.is_some()) {
        println!(
            "best by ICL: {} with {} clusters",
            best.structure, best.n_clusters
        );
    }
    Ok(())
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Assignments CSV (uses the `assignment` or `label` column)
    #[arg(long)]
    assignments: PathBuf,
    /// Reference labels CSV (same column convention)
    #[arg(long)]
    truth: PathBuf,
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h == "assignment" || h == "label")
        .ok_or_else(|| {
            Error::Validation(format!(
                "{}: no `assignment` or `label` column",
                path.display()
            ))
        })?;
    let mut labels = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let token = record.get(col).unwrap_or("").trim().to_string();
        let code = match token.parse::<usize>() {
            Ok(v) if v >= 1 => v - 1,
            _ => {
                let next = seen.len();
                *seen.entry(token.clone()).or_insert(next)
            }
        };
        let _ = row;
        labels.push(code);
    }
    if labels.is_empty() {
        return Err(Error::Validation(format!("{}: no rows", path.display())));
    }
    Ok(labels)
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let a = read_labels(&args.assignments)?;
    let b = read_labels(&args.truth)?;
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "row count mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let ari = adjusted_rand_index(&a, &b)?;
    println!("ari={}", sig6(ari));

    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(&b) {
        table[x][y] += 1;
    }
    println!("confusion (rows: assignments, columns: truth):");
    for (g, row) in table.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        println!("cluster{}: {}", g + 1, cells.join(","));
    }
    let mut sizes = vec![0usize; ka];
    for &x in &a {
        sizes[x] += 1;
    }
    let size_text: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
    println!("sizes={}", size_text.join(","));
    Ok(())
}
