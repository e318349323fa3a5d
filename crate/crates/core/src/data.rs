//! Mixed-type dataset representation, CSV ingestion with detection-limit
//! censor tokens, and per-column standardization.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Censoring status of one continuous cell. Bounds are stored in the same
/// (standardized) units as the continuous matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CensorMark {
    Observed,
    LeftCensored { bound: f64 },
    RightCensored { bound: f64 },
}

impl CensorMark {
    pub fn is_censored(&self) -> bool {
        !matches!(self, CensorMark::Observed)
    }

    pub fn bound(&self) -> Option<f64> {
        match *self {
            CensorMark::Observed => None,
            CensorMark::LeftCensored { bound } | CensorMark::RightCensored { bound } => Some(bound),
        }
    }
}

/// Invertible record of one continuous column's transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnTransform {
    pub original_mean: f64,
    pub original_sd: f64,
    pub log_transformed: bool,
}

impl ColumnTransform {
    /// Raw value to standardized units.
    pub fn apply(&self, raw: f64) -> f64 {
        let v = if self.log_transformed { raw.ln() } else { raw };
        (v - self.original_mean) / self.original_sd
    }

    /// Standardized units back to the raw scale.
    pub fn invert(&self, standardized: f64) -> f64 {
        let v = standardized * self.original_sd + self.original_mean;
        if self.log_transformed {
            v.exp()
        } else {
            v
        }
    }
}

/// Role of a CSV column during ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRole {
    Continuous,
    Categorical,
    Ignore,
}

/// Declares how to read a dataset: column roles, log-transform list, and
/// delimiter. Censor syntax is fixed: `<b` for left-, `>b` for right-censored.
#[derive(Debug, Clone)]
pub struct IngestSpec {
    pub roles: Vec<(String, ColumnRole)>,
    pub log_transform: Vec<String>,
    pub delimiter: u8,
}

impl IngestSpec {
    /// Parse the flat `key=value` dataset-spec format:
    ///
    /// ```text
    /// delimiter=,
    /// continuous=X1,X2,X3
    /// categorical=X8,X9
    /// ignore=id
    /// log_transform=X1
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut delimiter = b',';
        let mut roles = Vec::new();
        let mut log_transform = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("bad spec line: {line}")))?;
            let names = || {
                value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect::<Vec<_>>()
            };
            match key.trim() {
                "delimiter" => {
                    let v = value.trim();
                    if v.len() != 1 {
                        return Err(Error::Validation("delimiter must be one byte".into()));
                    }
                    delimiter = v.as_bytes()[0];
                }
                "continuous" => {
                    roles.extend(names().into_iter().map(|n| (n, ColumnRole::Continuous)))
                }
                "categorical" => {
                    roles.extend(names().into_iter().map(|n| (n, ColumnRole::Categorical)))
                }
                "ignore" => roles.extend(names().into_iter().map(|n| (n, ColumnRole::Ignore))),
                "log_transform" => log_transform.extend(names()),
                other => {
                    return Err(Error::Validation(format!("unknown spec key: {other}")));
                }
            }
        }
        if !roles.iter().any(|(_, r)| *r == ColumnRole::Continuous) {
            return Err(Error::Validation(
                "spec must declare at least one continuous column".into(),
            ));
        }
        Ok(Self {
            roles,
            log_transform,
            delimiter,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn role_of(&self, name: &str) -> Option<ColumnRole> {
        self.roles
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| *r)
    }
}

/// An immutable mixed-type dataset: standardized continuous columns with
/// per-cell censoring marks, plus integer-coded categorical columns.
#[derive(Debug, Clone)]
pub struct MixedDataset {
    n: usize,
    q: usize,
    /// n x q, standardized; censored cells sit at their bound.
    continuous: DMatrix<f64>,
    /// n x q, row-major.
    censor_marks: Vec<CensorMark>,
    /// n x (M - q), row-major, entries in 1..=levels[j].
    categorical: Vec<usize>,
    levels: Vec<usize>,
    /// Level code -> original label, per categorical variable.
    level_labels: Vec<Vec<String>>,
    continuous_names: Vec<String>,
    categorical_names: Vec<String>,
    transforms: Vec<ColumnTransform>,
}

impl MixedDataset {
    /// Build from raw-scale columns. Censor bounds in `marks` are given on the
    /// raw scale and are transformed along with the values; censored cells in
    /// `continuous_raw` must already sit at their bound.
    #[allow(clippy::too_many_arguments)]
    pub fn from_raw(
        continuous_raw: DMatrix<f64>,
        marks_raw: Vec<CensorMark>,
        categorical: Vec<usize>,
        levels: Vec<usize>,
        level_labels: Vec<Vec<String>>,
        continuous_names: Vec<String>,
        categorical_names: Vec<String>,
        log_flags: &[bool],
    ) -> Result<Self> {
        let n = continuous_raw.nrows();
        let q = continuous_raw.ncols();
        if n == 0 || q == 0 {
            return Err(Error::Validation("dataset is empty".into()));
        }
        if marks_raw.len() != n * q {
            return Err(Error::Validation("censor marks shape mismatch".into()));
        }
        for (j, &l) in levels.iter().enumerate() {
            if l < 2 {
                return Err(Error::Validation(format!(
                    "categorical column `{}` has fewer than 2 levels",
                    categorical_names[j]
                )));
            }
        }
        let mut continuous = DMatrix::zeros(n, q);
        let mut marks = vec![CensorMark::Observed; n * q];
        let mut transforms = Vec::with_capacity(q);
        for j in 0..q {
            let values: Vec<f64> = (0..n).map(|i| continuous_raw[(i, j)]).collect();
            let (standardized, transform) = standardize(&values, log_flags[j]).map_err(|e| {
                Error::Validation(format!("column `{}`: {e}", continuous_names[j]))
            })?;
            for i in 0..n {
                continuous[(i, j)] = standardized[i];
                marks[i * q + j] = match marks_raw[i * q + j] {
                    CensorMark::Observed => CensorMark::Observed,
                    CensorMark::LeftCensored { bound } => CensorMark::LeftCensored {
                        bound: transform.apply(bound),
                    },
                    CensorMark::RightCensored { bound } => CensorMark::RightCensored {
                        bound: transform.apply(bound),
                    },
                };
            }
            transforms.push(transform);
        }
        Ok(Self {
            n,
            q,
            continuous,
            censor_marks: marks,
            categorical,
            levels,
            level_labels,
            continuous_names,
            categorical_names,
            transforms,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_categorical(&self) -> usize {
        self.levels.len()
    }

    pub fn total_vars(&self) -> usize {
        self.q + self.levels.len()
    }

    pub fn continuous(&self) -> &DMatrix<f64> {
        &self.continuous
    }

    pub fn censor_mark(&self, i: usize, j: usize) -> CensorMark {
        self.censor_marks[i * self.q + j]
    }

    /// Row/column indices of all censored cells.
    pub fn censored_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for i in 0..self.n {
            for j in 0..self.q {
                if self.censor_mark(i, j).is_censored() {
                    cells.push((i, j));
                }
            }
        }
        cells
    }

    /// Level code (1-based) of categorical variable `j` for observation `i`.
    pub fn categorical_code(&self, i: usize, j: usize) -> usize {
        self.categorical[i * self.levels.len() + j]
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn level_labels(&self) -> &[Vec<String>] {
        &self.level_labels
    }

    pub fn continuous_names(&self) -> &[String] {
        &self.continuous_names
    }

    pub fn categorical_names(&self) -> &[String] {
        &self.categorical_names
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = self.continuous_names.clone();
        names.extend(self.categorical_names.iter().cloned());
        names
    }

    pub fn transforms(&self) -> &[ColumnTransform] {
        &self.transforms
    }

    /// Write the dataset back as CSV on the raw scale, reproducing the censor
    /// token syntax so that ingest(emit(d)) == d.
    pub fn emit<W: Write>(&self, writer: W, delimiter: u8) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .delimiter(delimiter)
            .from_writer(writer);
        out.write_record(self.column_names())?;
        for i in 0..self.n {
            let mut record: Vec<String> = Vec::with_capacity(self.total_vars());
            for j in 0..self.q {
                let t = &self.transforms[j];
                record.push(match self.censor_mark(i, j) {
                    CensorMark::Observed => format!("{}", t.invert(self.continuous[(i, j)])),
                    CensorMark::LeftCensored { bound } => format!("<{}", t.invert(bound)),
                    CensorMark::RightCensored { bound } => format!(">{}", t.invert(bound)),
                });
            }
            for j in 0..self.levels.len() {
                record.push(self.level_labels[j][self.categorical_code(i, j) - 1].clone());
            }
            out.write_record(&record)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Center and scale a column to mean 0, sd 1 (n-1 denominator). Censored
/// cells participate at their bound, which the caller has already substituted.
pub fn standardize(values: &[f64], log_flag: bool) -> Result<(Vec<f64>, ColumnTransform)> {
    if values.len() < 2 {
        return Err(Error::Validation(
            "standardization needs at least 2 values".into(),
        ));
    }
    let transformed: Vec<f64> = if log_flag {
        for &v in values {
            if v <= 0.0 {
                return Err(Error::Validation(
                    "log transform requires strictly positive values".into(),
                ));
            }
        }
        values.iter().map(|v| v.ln()).collect()
    } else {
        values.to_vec()
    };
    let n = transformed.len() as f64;
    let mean = transformed.iter().sum::<f64>() / n;
    let var = transformed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::Validation("column has zero variance".into()));
    }
    let sd = var.sqrt();
    let transform = ColumnTransform {
        original_mean: mean,
        original_sd: sd,
        log_transformed: log_flag,
    };
    Ok((
        transformed.iter().map(|v| (v - mean) / sd).collect(),
        transform,
    ))
}

/// Read a CSV source according to `spec`.
pub fn ingest<R: Read>(reader: R, spec: &IngestSpec) -> Result<MixedDataset> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter)
        .from_reader(reader);
    let headers: Vec<String> = csv_reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let mut cont_cols: Vec<(usize, String)> = Vec::new();
    let mut cat_cols: Vec<(usize, String)> = Vec::new();
    for (idx, name) in headers.iter().enumerate() {
        match spec.role_of(name) {
            Some(ColumnRole::Continuous) => cont_cols.push((idx, name.clone())),
            Some(ColumnRole::Categorical) => cat_cols.push((idx, name.clone())),
            Some(ColumnRole::Ignore) | None => {}
        }
    }
    for (name, _) in &spec.roles {
        if !headers.iter().any(|h| h == name) {
            return Err(Error::Validation(format!(
                "declared column `{name}` not found in header"
            )));
        }
    }
    if cont_cols.is_empty() {
        return Err(Error::Validation("no continuous columns in header".into()));
    }

    let q = cont_cols.len();
    let mut raw_values: Vec<f64> = Vec::new();
    let mut raw_marks: Vec<CensorMark> = Vec::new();
    let mut cat_tokens: Vec<Vec<String>> = vec![Vec::new(); cat_cols.len()];
    let mut n = 0usize;

    for (row_idx, record) in csv_reader.records().enumerate() {
        let record = record?;
        let row = row_idx + 2; // 1-based, after the header
        for (col_idx, name) in &cont_cols {
            let token = record.get(*col_idx).unwrap_or("").trim();
            if token.is_empty() {
                return Err(Error::Validation(format!(
                    "missing value at row {row}, column `{name}`; fully absent cells are not supported"
                )));
            }
            let (value, mark) = parse_continuous_token(token, row, name)?;
            raw_values.push(value);
            raw_marks.push(mark);
        }
        for (slot, (col_idx, name)) in cat_cols.iter().enumerate() {
            let token = record.get(*col_idx).unwrap_or("").trim();
            if token.is_empty() {
                return Err(Error::Validation(format!(
                    "missing value at row {row}, column `{name}`"
                )));
            }
            cat_tokens[slot].push(token.to_string());
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Validation("dataset is empty".into()));
    }

    // Map categorical labels to 1..L in first-appearance order, dropping none
    // (every mapped level has at least one observation by construction).
    let mut categorical = vec![0usize; n * cat_cols.len()];
    let mut levels = Vec::with_capacity(cat_cols.len());
    let mut level_labels = Vec::with_capacity(cat_cols.len());
    for (slot, (_, name)) in cat_cols.iter().enumerate() {
        let mut map: BTreeMap<&str, usize> = BTreeMap::new();
        let mut labels: Vec<String> = Vec::new();
        for (i, token) in cat_tokens[slot].iter().enumerate() {
            let code = *map.entry(token.as_str()).or_insert_with(|| {
                labels.push(token.clone());
                labels.len()
            });
            categorical[i * cat_cols.len() + slot] = code;
        }
        if labels.len() < 2 {
            return Err(Error::Validation(format!(
                "categorical column `{name}` has a single distinct level"
            )));
        }
        levels.push(labels.len());
        level_labels.push(labels);
    }

    let continuous_raw = DMatrix::from_fn(n, q, |i, j| raw_values[i * q + j]);
    let log_flags: Vec<bool> = cont_cols
        .iter()
        .map(|(_, name)| spec.log_transform.iter().any(|l| l == name))
        .collect();
    MixedDataset::from_raw(
        continuous_raw,
        raw_marks,
        categorical,
        levels,
        level_labels,
        cont_cols.into_iter().map(|(_, n)| n).collect(),
        cat_cols.into_iter().map(|(_, n)| n).collect(),
        &log_flags,
    )
}

pub fn ingest_path(data_path: &Path, spec: &IngestSpec) -> Result<MixedDataset> {
    ingest(std::fs::File::open(data_path)?, spec)
}

fn parse_continuous_token(token: &str, row: usize, column: &str) -> Result<(f64, CensorMark)> {
    let parse = |s: &str| {
        s.trim().parse::<f64>().map_err(|_| Error::Parse {
            row,
            column: column.into(),
            message: format!("unrecognized continuous token `{token}`"),
        })
    };
    if let Some(rest) = token.strip_prefix('<') {
        let bound = parse(rest)?;
        Ok((bound, CensorMark::LeftCensored { bound }))
    } else if let Some(rest) = token.strip_prefix('>') {
        let bound = parse(rest)?;
        Ok((bound, CensorMark::RightCensored { bound }))
    } else {
        Ok((parse(token)?, CensorMark::Observed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn simple_spec() -> IngestSpec {
        IngestSpec::parse("continuous=a,b\ncategorical=c\n").unwrap()
    }

    #[test]
    fn censor_token_parsing() {
        let csv = "a,b,c\n<0.5,1.0,x\n>10,2.0,y\n3.2,3.0,x\n";
        let d = ingest(csv.as_bytes(), &simple_spec()).unwrap();
        assert!(matches!(d.censor_mark(0, 0), CensorMark::LeftCensored { .. }));
        assert!(matches!(d.censor_mark(1, 0), CensorMark::RightCensored { .. }));
        assert_eq!(d.censor_mark(2, 0), CensorMark::Observed);
        // Bounds are standardized with the same transform as the values.
        let t = d.transforms()[0];
        assert_relative_eq!(
            d.censor_mark(0, 0).bound().unwrap(),
            t.apply(0.5),
            epsilon = 1e-12
        );
    }

    #[test]
    fn standardize_simple() {
        let (std, t) = standardize(&[1.0, 2.0, 3.0], false).unwrap();
        assert_eq!(std, vec![-1.0, 0.0, 1.0]);
        assert_relative_eq!(t.original_mean, 2.0);
        assert_relative_eq!(t.original_sd, 1.0);
    }

    #[test]
    fn standardize_log_composition() {
        let e = std::f64::consts::E;
        let (std, t) = standardize(&[1.0, e, e * e], true).unwrap();
        // log gives (0,1,2), centered and scaled by sd 1.
        assert_relative_eq!(std[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(std[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(std[2], 1.0, epsilon = 1e-12);
        assert!(t.log_transformed);
    }

    #[test]
    fn transform_round_trips() {
        let (std, t) = standardize(&[0.4, 1.7, 9.2, 3.3], false).unwrap();
        for (raw, s) in [0.4, 1.7, 9.2, 3.3].iter().zip(&std) {
            assert_relative_eq!(t.invert(*s), *raw, epsilon = 1e-10);
        }
    }

    #[test]
    fn standardize_rejects_zero_variance() {
        assert!(standardize(&[2.0, 2.0, 2.0], false).is_err());
    }

    #[test]
    fn column_means_are_centered() {
        let csv = "a,b,c\n1,4.5,x\n2,-3,y\n5,0.1,x\n9,2.2,y\n";
        let d = ingest(csv.as_bytes(), &simple_spec()).unwrap();
        for j in 0..d.q() {
            let mean: f64 = (0..d.n()).map(|i| d.continuous()[(i, j)]).sum::<f64>() / d.n() as f64;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn unknown_token_errors_with_location() {
        let csv = "a,b,c\n1.0,oops,x\n2.0,1.0,y\n";
        let err = ingest(csv.as_bytes(), &simple_spec()).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "b");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn single_level_categorical_rejected() {
        let csv = "a,b,c\n1,2,x\n3,4,x\n";
        assert!(ingest(csv.as_bytes(), &simple_spec()).is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        let csv = "a,b,c\n";
        assert!(ingest(csv.as_bytes(), &simple_spec()).is_err());
    }

    #[test]
    fn level_codes_are_first_appearance() {
        let csv = "a,b,c\n1,1,red\n2,2,blue\n3,3,red\n4,4,green\n";
        let d = ingest(csv.as_bytes(), &simple_spec()).unwrap();
        assert_eq!(d.levels(), &[3]);
        assert_eq!(d.categorical_code(0, 0), 1);
        assert_eq!(d.categorical_code(1, 0), 2);
        assert_eq!(d.categorical_code(2, 0), 1);
        assert_eq!(d.categorical_code(3, 0), 3);
        assert_eq!(d.level_labels()[0], vec!["red", "blue", "green"]);
    }

    #[test]
    fn ingest_emit_ingest_round_trip() {
        let csv = "a,b,c\n<0.5,1.25,x\n3.5,-2,y\n>7.25,0.5,x\n1.125,4,z\n";
        let spec = simple_spec();
        let d1 = ingest(csv.as_bytes(), &spec).unwrap();
        let mut buf = Vec::new();
        d1.emit(&mut buf, spec.delimiter).unwrap();
        let d2 = ingest(buf.as_slice(), &spec).unwrap();
        assert_eq!(d1.continuous(), d2.continuous());
        for i in 0..d1.n() {
            for j in 0..d1.q() {
                assert_eq!(d1.censor_mark(i, j), d2.censor_mark(i, j));
            }
        }
        assert_eq!(d1.levels(), d2.levels());
        assert_eq!(d1.level_labels(), d2.level_labels());
    }

    #[test]
    fn spec_file_parsing() {
        let spec = IngestSpec::parse(
            "delimiter=;\ncontinuous=x, y\ncategorical=z\nignore=id\nlog_transform=x\n",
        )
        .unwrap();
        assert_eq!(spec.delimiter, b';');
        assert_eq!(spec.roles.len(), 4);
        assert_eq!(spec.log_transform, vec!["x"]);
        assert!(IngestSpec::parse("categorical=z\n").is_err());
    }
}
