use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{GlError, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// `exp(−b‖x − x'‖²)`.
    Gaussian { bandwidth: f64 },
    /// `xᵀx'`.
    Linear,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => Err(
                GlError::InvalidInput(format!("Gaussian bandwidth must be positive, got {bandwidth}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Gaussian { bandwidth } => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-bandwidth * d2).exp()
            }
            KernelSpec::Linear => x.iter().zip(y).map(|(a, b)| a * b).sum(),
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Gaussian { bandwidth } => write!(f, "gaussian:b={bandwidth}"),
            KernelSpec::Linear => write!(f, "linear"),
        }
    }
}

/// Parses `linear`, `gaussian:b=<bandwidth>` or `gaussian` (bandwidth 1).
impl FromStr for KernelSpec {
    type Err = GlError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let spec = if s.eq_ignore_ascii_case("linear") {
            KernelSpec::Linear
        } else if let Some(rest) = s.strip_prefix("gaussian") {
            let bandwidth = match rest.strip_prefix(':') {
                None if rest.is_empty() => 1.0,
                Some(arg) => arg
                    .strip_prefix("b=")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| GlError::InvalidInput(format!("bad Gaussian kernel argument '{arg}'")))?,
                None => return Err(GlError::InvalidInput(format!("unknown kernel '{s}'"))),
            };
            KernelSpec::Gaussian { bandwidth }
        } else {
            return Err(GlError::InvalidInput(format!("unknown kernel '{s}'")));
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn rows_of(x: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GlError::InvalidInput("kernel input contains non-finite values".into()));
    }
    Ok((0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect())
}

/// Dense Gram matrix of `spec` over the rows of `x`.
pub fn kernel_matrix(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let rows = rows_of(x)?;
    let n = rows.len();
    let mut k = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let v = spec.eval(&rows[a], &rows[b]);
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
    }
    Ok(k)
}

/// Pivoted incomplete Cholesky: `G` with `K ≈ GGᵀ`, stopping once every
/// residual diagonal entry is below `tol·max_diag`.
pub fn incomplete_cholesky(spec: &KernelSpec, x: &DMatrix<f64>, tol: f64, max_rank: usize) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let rows = rows_of(x)?;
    let n = rows.len();
    let mut diag: Vec<f64> = rows.iter().map(|r| spec.eval(r, r)).collect();
    let scale = diag.iter().copied().fold(0.0, f64::max);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let max_rank = max_rank.min(n);
    while cols.len() < max_rank {
        let (piv, &dmax) = diag
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty");
        if !(dmax > tol * scale) {
            break;
        }
        let root = dmax.sqrt();
        let mut col = vec![0.0; n];
        for i in 0..n {
            let mut v = spec.eval(&rows[i], &rows[piv]);
            for c in &cols {
                v -= c[i] * c[piv];
            }
            col[i] = v / root;
        }
        col[piv] = root;
        for i in 0..n {
            diag[i] = (diag[i] - col[i] * col[i]).max(0.0);
        }
        diag[piv] = 0.0;
        cols.push(col);
    }
    let r = cols.len();
    Ok(DMatrix::from_fn(n, r, |i, c| cols[c][i]))
}

/// Factor of a dense PSD kernel matrix by eigendecomposition, after the
/// PSD check `λ_min ≥ −1e-8·tr(K)/n`; small negative eigenvalues are floored.
pub fn dense_factor(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(GlError::DimensionMismatch {
            axis: "kernel matrix columns",
            expected: n,
            found: k.ncols(),
        });
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(GlError::InvalidInput("kernel matrix contains non-finite values".into()));
    }
    let mut k = k.clone();
    linalg::symmetrize(&mut k);
    let trace = k.trace();
    let eig = SymmetricEigen::new(k);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-8 * trace.abs() / n.max(1) as f64 {
        return Err(GlError::NotPositiveSemidefinite {
            what: "kernel matrix",
            min_eigenvalue: min,
        });
    }
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..n).filter(|&t| eig.eigenvalues[t] > 1e-14 * top).collect();
    Ok(DMatrix::from_fn(n, keep.len(), |i, c| {
        eig.eigenvectors[(i, keep[c])] * eig.eigenvalues[keep[c]].sqrt()
    }))
}

/// Subtracts column means (`ΠG`).
pub fn center_factor(g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.nrows() as f64;
    let mut out = g.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    out
}

pub(crate) fn center_vector(y: &DVector<f64>) -> DVector<f64> {
    let mean = y.mean();
    y.map(|v| v - mean)
}
