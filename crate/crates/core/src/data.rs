//! Observed-data records, the dataset container, validation and CSV I/O.
//!
//! One record is `(Y, A, C, R·L, R)`: outcome, binary treatment, fully
//! observed covariate, the partially observed confounder and its observation
//! indicator. A missing confounder is an explicit `None`, never a sentinel.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset has no complete cases (every record has r = 0)")]
    NoCompleteCases,
    #[error("dataset is empty")]
    Empty,
    #[error("missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fully observed part of a record, with the confounder supplied separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariates {
    pub y: f64,
    pub a: f64,
    pub c: f64,
    pub l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedRecord {
    pub y: f64,
    pub a: u8,
    pub c: f64,
    pub l: Option<f64>,
    pub r: u8,
}

impl ObservedRecord {
    pub fn complete(y: f64, a: u8, c: f64, l: f64) -> Self {
        Self { y, a, c, l: Some(l), r: 1 }
    }

    pub fn missing(y: f64, a: u8, c: f64) -> Self {
        Self { y, a, c, l: None, r: 0 }
    }

    pub fn is_complete(&self) -> bool {
        self.r == 1
    }

    pub fn treated(&self) -> bool {
        self.a == 1
    }

    pub fn a_f64(&self) -> f64 {
        f64::from(self.a)
    }

    /// Covariate values with the confounder set to `l`.
    pub fn with_l(&self, l: f64) -> Covariates {
        Covariates { y: self.y, a: self.a_f64(), c: self.c, l }
    }

    /// Covariate values using the observed confounder; `None` when missing.
    pub fn covariates(&self) -> Option<Covariates> {
        self.l.map(|l| self.with_l(l))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    ObservedWithoutValue,
    MissingWithValue,
    TreatmentNotBinary,
    IndicatorNotBinary,
    NonFinite,
    EmptyDataset,
    NoTreated,
    NoUntreated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Record index, or `None` for dataset-level violations.
    pub index: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            ViolationKind::ObservedWithoutValue => "r = 1 but l is absent",
            ViolationKind::MissingWithValue => "r = 0 but l is present",
            ViolationKind::TreatmentNotBinary => "a is not in {0,1}",
            ViolationKind::IndicatorNotBinary => "r is not in {0,1}",
            ViolationKind::NonFinite => "non-finite value",
            ViolationKind::EmptyDataset => "dataset is empty",
            ViolationKind::NoTreated => "no record with a = 1",
            ViolationKind::NoUntreated => "no record with a = 0",
        };
        match self.index {
            Some(i) => write!(f, "record {i}: {what}"),
            None => write!(f, "{what}"),
        }
    }
}

/// Immutable collection of observed records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    records: Vec<ObservedRecord>,
}

impl Dataset {
    pub fn new(records: Vec<ObservedRecord>) -> Self {
        Self { records }
    }

    /// Construct and reject any invariant violation.
    pub fn validated(records: Vec<ObservedRecord>) -> Result<Self, DataError> {
        let ds = Self::new(records);
        let report = ds.validate();
        if let Some(first) = report.first() {
            return Err(DataError::Invalid(format!("{first} ({} violation(s))", report.len())));
        }
        Ok(ds)
    }

    pub fn records(&self) -> &[ObservedRecord] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ObservedRecord> {
        self.records.iter()
    }

    pub fn n_complete(&self) -> usize {
        self.records.iter().filter(|r| r.is_complete()).count()
    }

    pub fn n_treated(&self) -> usize {
        self.records.iter().filter(|r| r.treated()).count()
    }

    pub fn all_observed(&self) -> bool {
        self.records.iter().all(|r| r.is_complete())
    }

    /// Empirical pr(A = 1).
    pub fn treated_fraction(&self) -> f64 {
        self.n_treated() as f64 / self.n() as f64
    }

    /// Every violated invariant; empty when the dataset is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (i, rec) in self.records.iter().enumerate() {
            let mut push = |kind| out.push(Violation { index: Some(i), kind });
            if rec.a > 1 {
                push(ViolationKind::TreatmentNotBinary);
            }
            if rec.r > 1 {
                push(ViolationKind::IndicatorNotBinary);
            }
            match (rec.r, rec.l) {
                (1, None) => push(ViolationKind::ObservedWithoutValue),
                (0, Some(_)) => push(ViolationKind::MissingWithValue),
                _ => {}
            }
            if !rec.y.is_finite() || !rec.c.is_finite() || rec.l.is_some_and(|l| !l.is_finite()) {
                push(ViolationKind::NonFinite);
            }
        }
        if self.records.is_empty() {
            out.push(Violation { index: None, kind: ViolationKind::EmptyDataset });
        } else {
            if !self.records.iter().any(|r| r.a == 1) {
                out.push(Violation { index: None, kind: ViolationKind::NoTreated });
            }
            if !self.records.iter().any(|r| r.a == 0) {
                out.push(Violation { index: None, kind: ViolationKind::NoUntreated });
            }
        }
        out
    }

    /// Records with r = 1, order preserved.
    pub fn complete_cases(&self) -> Result<Dataset, DataError> {
        let records: Vec<_> = self.records.iter().filter(|r| r.is_complete()).copied().collect();
        if records.is_empty() {
            return Err(DataError::NoCompleteCases);
        }
        Ok(Dataset::new(records))
    }

    /// Records picked by index (with repetition), e.g. a bootstrap resample.
    pub fn resample(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.records[i]).collect())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset, DataError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &'static str| {
            headers.iter().position(|h| h == name).ok_or(DataError::MissingColumn(name))
        };
        let (iy, ia, ic, il, ir) = (col("y")?, col("a")?, col("c")?, col("l")?, col("r")?);
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let err = |message: String| DataError::Parse { line, message };
            let field = |i: usize, name: &str| {
                row.get(i).ok_or_else(|| err(format!("missing field `{name}`")))
            };
            let real = |i: usize, name: &str| -> Result<f64, DataError> {
                let s = field(i, name)?;
                s.parse::<f64>().map_err(|_| err(format!("field `{name}`: cannot parse `{s}` as a number")))
            };
            let binary = |i: usize, name: &str| -> Result<u8, DataError> {
                let s = field(i, name)?;
                match s {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    _ => Err(err(format!("field `{name}`: expected 0 or 1, found `{s}`"))),
                }
            };
            let y = real(iy, "y")?;
            let a = binary(ia, "a")?;
            let c = real(ic, "c")?;
            let r = binary(ir, "r")?;
            let l_raw = field(il, "l")?;
            let l = if l_raw.is_empty() {
                None
            } else {
                Some(l_raw.parse::<f64>().map_err(|_| err(format!("field `l`: cannot parse `{l_raw}` as a number")))?)
            };
            match (r, l) {
                (1, None) => return Err(err("r = 1 but `l` is empty".into())),
                (0, Some(_)) => return Err(err("r = 0 but `l` is not empty".into())),
                _ => {}
            }
            records.push(ObservedRecord { y, a, c, l, r });
        }
        if records.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(Dataset::new(records))
    }

    pub fn read_csv_path<P: AsRef<Path>>(path: P) -> Result<Dataset, DataError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Writes the `y,a,c,l,r` schema; floats use shortest round-trip formatting.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["y", "a", "c", "l", "r"])?;
        for rec in &self.records {
            let l = rec.l.map(|v| v.to_string()).unwrap_or_default();
            wtr.write_record([rec.y.to_string(), rec.a.to_string(), rec.c.to_string(), l, rec.r.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl From<Vec<ObservedRecord>> for Dataset {
    fn from(records: Vec<ObservedRecord>) -> Self {
        Self::new(records)
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a ObservedRecord;
    type IntoIter = std::slice::Iter<'a, ObservedRecord>;
    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}
