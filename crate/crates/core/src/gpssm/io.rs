//! Model documents and transition CSV files.

use std::io;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{Dataset, GpssmModel, PhiRule, SquaredExpKernel};
use crate::error::{Error, Result};
use crate::json::{matrix_from_rows, matrix_rows, vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDocument {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDocument {
    #[serde(rename = "X")]
    pub x: Vec<Vec<f64>>,
    #[serde(rename = "U")]
    pub u: Vec<Vec<f64>>,
    #[serde(rename = "Xplus")]
    pub x_next: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "Q_diag")]
    pub q_diag: Vec<f64>,
    pub kernels: Vec<KernelDocument>,
    pub phi: f64,
    pub sigma_hat_diag: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<String>,
}

impl DatasetDocument {
    pub fn from_dataset(d: &Dataset) -> Self {
        Self {
            x: matrix_rows(d.states()),
            u: matrix_rows(d.inputs()),
            x_next: matrix_rows(d.successors()),
        }
    }

    pub fn to_dataset(&self, n: usize, m: usize) -> Result<Dataset> {
        Dataset::new(
            matrix_from_rows(&self.x, n, "dataset.X")?,
            matrix_from_rows(&self.u, m, "dataset.U")?,
            matrix_from_rows(&self.x_next, n, "dataset.Xplus")?,
        )
    }
}

impl ModelDocument {
    /// Embeds the training data unless `dataset_path` is given.
    pub fn from_model(model: &GpssmModel, rule: PhiRule, dataset_path: Option<String>) -> Self {
        let bounds = model.uncertainty_bounds(rule);
        let dataset = match dataset_path {
            Some(_) => None,
            None => Some(DatasetDocument::from_dataset(model.data())),
        };
        Self {
            n: model.state_dim(),
            m: model.input_dim(),
            a: matrix_rows(model.a()),
            b: matrix_rows(model.b()),
            q_diag: vector(model.q_diag()),
            kernels: model
                .kernels()
                .iter()
                .map(|k| KernelDocument {
                    signal_variance: k.signal_variance(),
                    lengthscales: k.lengthscales().to_vec(),
                })
                .collect(),
            phi: bounds.phi,
            sigma_hat_diag: vector(&bounds.sigma_hat),
            dataset,
            dataset_path,
        }
    }

    /// Rebuilds the model; a relative `dataset_path` is resolved against `base_dir`.
    pub fn to_model(&self, base_dir: &Path) -> Result<GpssmModel> {
        let data = match (&self.dataset, &self.dataset_path) {
            (Some(d), _) => d.to_dataset(self.n, self.m)?,
            (None, Some(p)) => {
                let path = base_dir.join(p);
                let file = std::fs::File::open(&path).map_err(|e| {
                    Error::Format(format!("cannot open dataset {}: {e}", path.display()))
                })?;
                read_transitions_csv(file)?
            }
            (None, None) => {
                return Err(Error::Format(
                    "model has neither dataset nor dataset_path".into(),
                ))
            }
        };
        if data.state_dim() != self.n || data.input_dim() != self.m {
            return Err(Error::Format(format!(
                "dataset is {}+{} dimensional, model declares n = {}, m = {}",
                data.state_dim(),
                data.input_dim(),
                self.n,
                self.m
            )));
        }
        let kernels = self
            .kernels
            .iter()
            .map(|k| SquaredExpKernel::new(k.signal_variance, k.lengthscales.clone()))
            .collect::<Result<Vec<_>>>()?;
        if self.q_diag.len() != self.n {
            return Err(Error::Format(format!(
                "Q_diag has {} entries, expected {}",
                self.q_diag.len(),
                self.n
            )));
        }
        GpssmModel::new(
            matrix_from_rows(&self.a, self.n, "A")?,
            matrix_from_rows(&self.b, self.m, "B")?,
            DVector::from_vec(self.q_diag.clone()),
            kernels,
            data,
        )
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Splits a header into the index ranges of the named groups, in order.
fn header_groups(headers: &csv::StringRecord, groups: &[&str]) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; groups.len()];
    let mut g = 0;
    for (col, h) in headers.iter().enumerate() {
        let h = h.trim();
        let matches = |prefix: &str| {
            h.strip_prefix(prefix)
                .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
        };
        while g < groups.len() && !matches(groups[g]) {
            g += 1;
        }
        if g == groups.len() {
            return Err(Error::Format(format!(
                "unexpected column `{h}` at position {}; expected header {}",
                col + 1,
                groups
                    .iter()
                    .map(|p| format!("{p}1..{p}N"))
                    .collect::<Vec<_>>()
                    .join(",")
            )));
        }
        counts[g] += 1;
        if h[groups[g].len()..] != counts[g].to_string() {
            return Err(Error::Format(format!("column `{h}` out of order")));
        }
    }
    Ok(counts)
}

fn parse_row(rec: &csv::StringRecord, line: usize) -> Result<Vec<f64>> {
    rec.iter()
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("line {line}: `{f}` is not a number")))
        })
        .collect()
}

/// Reads `x1..xn,u1..um,xp1..xpn` transition records.
pub fn read_transitions_csv<R: io::Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    // A column only matches a prefix followed by digits, so `xp1` is not read as a state.
    let counts = header_groups(&headers, &["x", "u", "xp"]).map_err(|e| {
        Error::Format(format!(
            "transition header must be x1..xn,u1..um,xp1..xpn ({e})"
        ))
    })?;
    let (n, m, np) = (counts[0], counts[1], counts[2]);
    if n == 0 || np != n {
        return Err(Error::Format(format!(
            "transition header has {n} state and {np} successor columns"
        )));
    }
    let mut records = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let row = parse_row(&rec, idx + 2)?;
        records.push((
            DVector::from_column_slice(&row[..n]),
            DVector::from_column_slice(&row[n..n + m]),
            DVector::from_column_slice(&row[n + m..]),
        ));
    }
    Dataset::from_transitions(&records)
}

/// Reads `k,x1..xn,u1..um` rows; each pair of rows with consecutive `k`
/// forms one transition.
pub fn read_trajectory_csv<R: io::Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    if headers.get(0).map(str::trim) != Some("k") {
        return Err(Error::Format(
            "trajectory header must start with `k`".into(),
        ));
    }
    let rest: csv::StringRecord = headers.iter().skip(1).collect();
    let counts = header_groups(&rest, &["x", "u"])?;
    let (n, m) = (counts[0], counts[1]);
    if n == 0 {
        return Err(Error::Format("trajectory has no state columns".into()));
    }
    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let row = parse_row(&rec, idx + 2)?;
        rows.push((row[0], row[1..].to_vec()));
    }
    let mut records = Vec::new();
    for w in rows.windows(2) {
        let ((k0, a), (k1, b)) = (&w[0], &w[1]);
        if *k1 == k0 + 1.0 {
            records.push((
                DVector::from_column_slice(&a[..n]),
                DVector::from_column_slice(&a[n..n + m]),
                DVector::from_column_slice(&b[..n]),
            ));
        }
    }
    Dataset::from_transitions(&records)
}

pub fn write_transitions_csv<W: io::Write>(data: &Dataset, writer: W) -> Result<()> {
    let (n, m) = (data.state_dim(), data.input_dim());
    let mut wtr = csv::Writer::from_writer(writer);
    let header: Vec<String> = (1..=n)
        .map(|i| format!("x{i}"))
        .chain((1..=m).map(|i| format!("u{i}")))
        .chain((1..=n).map(|i| format!("xp{i}")))
        .collect();
    wtr.write_record(&header).map_err(csv_error)?;
    for j in 0..data.len() {
        let row: Vec<String> = data
            .states()
            .row(j)
            .iter()
            .chain(data.inputs().row(j).iter())
            .chain(data.successors().row(j).iter())
            .map(|v| format!("{v:.16e}"))
            .collect();
        wtr.write_record(&row).map_err(csv_error)?;
    }
    wtr.flush()?;
    Ok(())
}

impl GpssmModel {
    pub fn to_document(&self, rule: PhiRule) -> ModelDocument {
        ModelDocument::from_model(self, rule, None)
    }

    pub fn from_document(doc: &ModelDocument, base_dir: &Path) -> Result<Self> {
        doc.to_model(base_dir)
    }
}
