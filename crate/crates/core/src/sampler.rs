//! Seeded multivariate normal samples and their CSV form.

use crate::linalg::{cholesky, JitterPolicy, LinalgError};
use crate::models::{GraphModel, ModelSpec};
use crate::rng::{stream_rng, PolarNormal, Stream};
use nalgebra::DMatrix;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("need n >= 2 and k >= 2, got n = {n}, k = {k}")]
    TooSmall { n: usize, k: usize },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `n x k` observations, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    values: DMatrix<f64>,
    pub seed: Option<u64>,
    pub model_tag: Option<ModelSpec>,
    pub column_names: Option<Vec<String>>,
}

impl SampleMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self, SampleError> {
        let (n, k) = values.shape();
        if n < 2 || k < 2 {
            return Err(SampleError::TooSmall { n, k });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(SampleError::Parse {
                line: (pos % n) as u64 + 1,
                column: pos / n + 1,
                message: "non-finite value".into(),
            });
        }
        Ok(Self {
            values,
            seed: None,
            model_tag: None,
            column_names: None,
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.values.as_slice()[j * n..(j + 1) * n]
    }

    /// Reorders the columns: column `j` of the result is column `perm[j]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        let values = DMatrix::from_fn(self.n(), self.k(), |i, j| self.values[(i, perm[j])]);
        Self {
            values,
            seed: self.seed,
            model_tag: self.model_tag.clone(),
            column_names: self
                .column_names
                .as_ref()
                .map(|names| perm.iter().map(|&p| names[p].clone()).collect()),
        }
    }
}

/// Draws `n` rows `L z` with `L L^T = Sigma` and `z` standard normal
/// (polar transform on the ChaCha8 sampling stream of `seed`).
pub fn sample_mvn(model: &GraphModel, n: usize, seed: u64) -> Result<SampleMatrix, SampleError> {
    let k = model.k;
    if n < 2 || k < 2 {
        return Err(SampleError::TooSmall { n, k });
    }
    let chol = cholesky(&model.sigma, JitterPolicy::None)?;
    let l = chol.factor.as_matrix();
    let mut normal = PolarNormal::new(stream_rng(seed, Stream::Sample));
    let mut z = vec![0.0; k];
    let mut values = DMatrix::<f64>::zeros(n, k);
    for row in 0..n {
        normal.fill(&mut z);
        for i in 0..k {
            let mut acc = 0.0;
            for (m, zm) in z.iter().enumerate().take(i + 1) {
                acc += l[(i, m)] * zm;
            }
            values[(row, i)] = acc;
        }
    }
    let mut out = SampleMatrix::new(values)?;
    out.seed = Some(seed);
    Ok(out)
}

/// Subtracts column means; returns the centered matrix and the means.
pub fn center(x: &SampleMatrix) -> (SampleMatrix, Vec<f64>) {
    let n = x.n();
    let mut values = x.values.clone();
    let mut means = Vec::with_capacity(x.k());
    for mut col in values.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
        means.push(mean);
    }
    let centered = SampleMatrix {
        values,
        seed: x.seed,
        model_tag: x.model_tag.clone(),
        column_names: x.column_names.clone(),
    };
    (centered, means)
}

/// Reads comma-separated numeric rows. With `has_header`, the first row
/// supplies column names.
pub fn read_csv<R: Read>(reader: R, has_header: bool) -> Result<SampleMatrix, SampleError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let names = if has_header {
        let h = rdr.headers().map_err(|e| csv_error(&e))?;
        Some(h.iter().map(str::to_string).collect::<Vec<_>>())
    } else {
        None
    };
    let mut rows: Vec<f64> = Vec::new();
    let mut k: Option<usize> = names.as_ref().map(Vec::len);
    let mut n = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(&e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        match k {
            None => k = Some(rec.len()),
            Some(expected) if expected != rec.len() => {
                return Err(SampleError::Parse {
                    line,
                    column: rec.len().min(expected) + 1,
                    message: format!("expected {expected} fields, found {}", rec.len()),
                })
            }
            _ => {}
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| SampleError::Parse {
                line,
                column: c + 1,
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(SampleError::Parse {
                    line,
                    column: c + 1,
                    message: format!("non-finite value: {field:?}"),
                });
            }
            rows.push(v);
        }
        n += 1;
    }
    let k = k.unwrap_or(0);
    if n < 2 || k < 2 {
        return Err(SampleError::TooSmall { n, k });
    }
    let values = DMatrix::from_row_slice(n, k, &rows);
    let mut out = SampleMatrix::new(values)?;
    out.column_names = names;
    Ok(out)
}

fn csv_error(e: &csv::Error) -> SampleError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    SampleError::Parse {
        line,
        column: 0,
        message: e.to_string(),
    }
}

pub fn write_csv<W: Write>(x: &SampleMatrix, mut w: W, header: bool) -> Result<(), SampleError> {
    if header {
        let names: Vec<String> = match &x.column_names {
            Some(n) => n.clone(),
            None => (1..=x.k()).map(|j| format!("x{j}")).collect(),
        };
        writeln!(w, "{}", names.join(","))?;
    }
    let mut line = String::new();
    for i in 0..x.n() {
        line.clear();
        for j in 0..x.k() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&x.values[(i, j)].to_string());
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
