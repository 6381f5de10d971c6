//! File formats: datasets as CSV (`y`, `x1..xp`), block structures and
//! population models as JSON.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{GlError, Result};
use crate::model::{BlockStructure, Dataset, PopulationModel};

pub fn ser_dvector<S: Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

/// Reads a CSV with a header row containing `y` and `x1..xp` (any order).
pub fn read_dataset_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let y_col = headers
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| GlError::InvalidInput("CSV header has no 'y' column".into()))?;
    let mut x_cols: Vec<(usize, usize)> = Vec::new();
    for (col, h) in headers.iter().enumerate() {
        if let Some(k) = h.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
            if k == 0 {
                return Err(GlError::InvalidInput("covariate columns are numbered from x1".into()));
            }
            x_cols.push((k, col));
        }
    }
    x_cols.sort();
    for (pos, &(k, _)) in x_cols.iter().enumerate() {
        if k != pos + 1 {
            return Err(GlError::InvalidInput(format!("covariate column x{} is missing", pos + 1)));
        }
    }
    let p = x_cols.len();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |col: usize| -> Result<f64> {
            let field = rec.get(col).unwrap_or("");
            field
                .parse::<f64>()
                .map_err(|_| GlError::InvalidInput(format!("row {}: cannot parse '{field}'", row + 1)))
        };
        ys.push(parse(y_col)?);
        for &(_, col) in &x_cols {
            xs.push(parse(col)?);
        }
    }
    let n = ys.len();
    Dataset::new(DMatrix::from_row_slice(n, p, &xs), DVector::from_vec(ys))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_csv(File::open(path)?)
}

pub fn write_dataset_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["y".to_string()];
    header.extend((1..=data.p()).map(|k| format!("x{k}")));
    wtr.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![format!("{:e}", data.y[i])];
        rec.extend((0..data.p()).map(|j| format!("{:e}", data.x[(i, j)])));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn load_blocks(path: &Path) -> Result<BlockStructure> {
    Ok(serde_json::from_reader(File::open(path)?)?)
}

/// On-disk population model: `sigma_xx` row-major, loadings, noise level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub sigma_xx: Vec<f64>,
    pub w: Vec<f64>,
    pub sigma: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<BlockStructure>,
}

impl ModelFile {
    pub fn from_model(model: &PopulationModel, blocks: Option<&BlockStructure>) -> Self {
        let p = model.dim();
        Self {
            sigma_xx: (0..p * p).map(|k| model.sigma_xx[(k / p, k % p)]).collect(),
            w: model.w.iter().copied().collect(),
            sigma: model.sigma,
            b: model.b,
            blocks: blocks.cloned(),
        }
    }

    pub fn to_model(&self) -> Result<PopulationModel> {
        let p = self.w.len();
        if self.sigma_xx.len() != p * p {
            return Err(GlError::DimensionMismatch {
                axis: "sigma_xx entries",
                expected: p * p,
                found: self.sigma_xx.len(),
            });
        }
        PopulationModel::new(
            DMatrix::from_row_slice(p, p, &self.sigma_xx),
            DVector::from_column_slice(&self.w),
            self.b,
            self.sigma,
        )
    }
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    Ok(serde_json::from_reader(File::open(path)?)?)
}
