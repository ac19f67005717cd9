//! Covariance / precision designs with exact ground-truth edge sets.
//!
//! The true null proportion of a model is always counted from the support
//! of its precision matrix. The nominal value a design is usually labelled
//! with is kept alongside for table layout only.

use crate::linalg::{invert_spd, LinalgError, SymMatrix};
use crate::rng::{stream_rng, Stream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// |omega_ij| above this counts as an edge.
pub const EDGE_TOL: f64 = 1e-12;

/// Default bound for condition (C1) when none is configured.
pub const DEFAULT_C0: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DesignTag {
    BlockAR1,
    BlockEquicorr,
    Band,
    ErdosRenyi,
    /// Tridiagonal covariance (banded Sigma, dense precision).
    BandedCovariance,
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphModel {
    pub k: usize,
    pub sigma: SymMatrix,
    pub omega: SymMatrix,
    /// Pairs `(i, j)` with `i < j`, 0-based, in row-major order.
    pub edges: Vec<(usize, usize)>,
    pub pi0_true: f64,
    /// The value the design is labelled with in the literature, if any.
    pub pi0_nominal: Option<f64>,
    pub design_tag: DesignTag,
    pub c0_bound: f64,
    /// Diagonal shift applied by positive-definiteness repair (Erdős–Rényi).
    pub diagonal_shift: f64,
}

impl GraphModel {
    fn assemble(
        sigma: SymMatrix,
        omega: SymMatrix,
        design_tag: DesignTag,
        pi0_nominal: Option<f64>,
        diagonal_shift: f64,
    ) -> Self {
        let k = omega.dim();
        let edges = support_of(&omega);
        let pi0_true = if k < 2 {
            1.0
        } else {
            1.0 - edges.len() as f64 / n_pairs(k) as f64
        };
        let c0_bound = sigma
            .diagonal()
            .into_iter()
            .chain(omega.diagonal())
            .fold(f64::NEG_INFINITY, f64::max);
        Self {
            k,
            sigma,
            omega,
            edges,
            pi0_true,
            pi0_nominal,
            design_tag,
            c0_bound,
            diagonal_shift,
        }
    }

    pub fn n_pairs(&self) -> usize {
        n_pairs(self.k)
    }

    pub fn pi1_true(&self) -> f64 {
        1.0 - self.pi0_true
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.omega.get(i, j).abs() > EDGE_TOL && i != j
    }

    /// Whether `(C1)` holds for the configured constant.
    pub fn exceeds_c0(&self, c0: f64) -> bool {
        self.c0_bound > c0
    }
}

/// Number of unordered pairs, `k (k - 1) / 2`.
#[inline]
pub fn n_pairs(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

fn support_of(omega: &SymMatrix) -> Vec<(usize, usize)> {
    let k = omega.dim();
    let mut edges = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            if omega.get(i, j).abs() > EDGE_TOL {
                edges.push((i, j));
            }
        }
    }
    edges
}

fn check_blocks(k: usize, s: usize, rho: f64) -> Result<usize, ModelError> {
    if k < 2 {
        return Err(ModelError::InvalidSpec(format!("k must be >= 2, got {k}")));
    }
    if s == 0 || k % s != 0 {
        return Err(ModelError::InvalidSpec(format!(
            "block size {s} does not divide k = {k}"
        )));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(ModelError::InvalidSpec(format!(
            "rho must lie in (0, 1), got {rho}"
        )));
    }
    Ok(k / s)
}

fn block_nominal(k: usize, s: usize) -> f64 {
    1.0 - (s as f64 - 1.0) / (k as f64 - 1.0)
}

/// Block-diagonal Sigma with equicorrelated blocks of size `s`.
pub fn block_equicorr(k: usize, s: usize, rho: f64) -> Result<GraphModel, ModelError> {
    let b = check_blocks(k, s, rho)?;
    let sigma_block = SymMatrix::from_fn(s, |i, j| if i == j { 1.0 } else { rho });
    // (1 - rho) I + rho J  has inverse  a I - c J.
    let a = 1.0 / (1.0 - rho);
    let c = rho / ((1.0 - rho) * (1.0 + (s as f64 - 1.0) * rho));
    let omega_block = SymMatrix::from_fn(s, |i, j| if i == j { a - c } else { -c });
    let sigma = SymMatrix::block_diagonal(&vec![sigma_block; b]);
    let omega = SymMatrix::block_diagonal(&vec![omega_block; b]);
    Ok(GraphModel::assemble(
        sigma,
        omega,
        DesignTag::BlockEquicorr,
        Some(block_nominal(k, s)),
        0.0,
    ))
}

/// Block-diagonal Sigma with AR(1) blocks, `sigma_ij = rho^|i-j|` within a block.
/// The block precision is tridiagonal, so a block contributes `s - 1` edges.
pub fn block_ar1(k: usize, s: usize, rho: f64) -> Result<GraphModel, ModelError> {
    let b = check_blocks(k, s, rho)?;
    let sigma_block = SymMatrix::from_fn(s, |i, j| rho.powi((j - i) as i32));
    let omega_block = if s == 1 {
        SymMatrix::identity(1)
    } else {
        let d = 1.0 / (1.0 - rho * rho);
        SymMatrix::from_fn(s, |i, j| {
            if i == j {
                if i == 0 || i == s - 1 {
                    d
                } else {
                    (1.0 + rho * rho) * d
                }
            } else if j == i + 1 {
                -rho * d
            } else {
                0.0
            }
        })
    };
    let sigma = SymMatrix::block_diagonal(&vec![sigma_block; b]);
    let omega = SymMatrix::block_diagonal(&vec![omega_block; b]);
    Ok(GraphModel::assemble(
        sigma,
        omega,
        DesignTag::BlockAR1,
        Some(block_nominal(k, s)),
        0.0,
    ))
}

/// Band diagonals used by [`band_precision`]: offset 0, 1, 2.
pub const BAND_DIAGONALS: [f64; 3] = [1.0, 0.6, 0.3];

/// Banded precision with `omega_ij` given by [`BAND_DIAGONALS`] at offset
/// `|i - j|` and zero beyond.
pub fn band_precision(k: usize) -> Result<GraphModel, ModelError> {
    if k < 3 {
        return Err(ModelError::InvalidSpec(format!(
            "band graph needs k >= 3, got {k}"
        )));
    }
    let omega = SymMatrix::from_fn(k, |i, j| BAND_DIAGONALS.get(j - i).copied().unwrap_or(0.0));
    let sigma = invert_spd(&omega)?;
    Ok(GraphModel::assemble(
        sigma,
        omega,
        DesignTag::Band,
        Some(1.0 - 2.0 / k as f64),
        0.0,
    ))
}

/// Erdős–Rényi precision: `b_ij = u_ij * delta_ij` with
/// `delta_ij ~ Bernoulli(q)` and `u_ij ~ Unif(u_range)`, unit diagonal.
/// When `lambda_min(B) <= 0.05` the matrix is shifted to
/// `B + (|lambda_min| + 0.05) I` and rescaled to unit diagonal. Both steps
/// keep the zero pattern.
pub fn erdos_renyi_precision(
    k: usize,
    q: f64,
    u_range: [f64; 2],
    seed: u64,
) -> Result<GraphModel, ModelError> {
    if k < 2 {
        return Err(ModelError::InvalidSpec(format!("k must be >= 2, got {k}")));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(ModelError::InvalidSpec(format!(
            "q must lie in (0, 1), got {q}"
        )));
    }
    let [lo, hi] = u_range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(ModelError::InvalidSpec(format!(
            "u_range must satisfy lo < hi, got [{lo}, {hi}]"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Model);
    let mut upper = vec![0.0; n_pairs(k)];
    for v in upper.iter_mut() {
        let hit = rng.random::<f64>() < q;
        let u = rng.random_range(lo..hi);
        if hit {
            *v = u;
        }
    }
    let idx = |i: usize, j: usize| i * k - i * (i + 1) / 2 + (j - i - 1);
    let b = SymMatrix::from_fn(k, |i, j| if i == j { 1.0 } else { upper[idx(i, j)] });

    let (lambda_min, _) = b.eigen_extremes();
    let (omega, shift) = if lambda_min <= 0.05 {
        let shift = lambda_min.abs() + 0.05;
        let shifted = b.shifted(shift);
        let d: Vec<f64> = shifted.diagonal().iter().map(|v| v.sqrt()).collect();
        let rescaled = SymMatrix::from_fn(k, |i, j| {
            if i == j {
                1.0
            } else {
                shifted.get(i, j) / (d[i] * d[j])
            }
        });
        (rescaled, shift)
    } else {
        (b, 0.0)
    };
    let sigma = invert_spd(&omega)?;
    Ok(GraphModel::assemble(
        sigma,
        omega,
        DesignTag::ErdosRenyi,
        Some(1.0 - q),
        shift,
    ))
}

/// Tridiagonal covariance with unit diagonal and `offdiag` next to it.
/// Positive definite for `|offdiag| < 0.5`.
pub fn banded_covariance(k: usize, offdiag: f64) -> Result<GraphModel, ModelError> {
    if k < 2 {
        return Err(ModelError::InvalidSpec(format!("k must be >= 2, got {k}")));
    }
    if !(offdiag.abs() < 0.5) {
        return Err(ModelError::InvalidSpec(format!(
            "|offdiag| must be < 0.5, got {offdiag}"
        )));
    }
    let sigma = SymMatrix::from_fn(k, |i, j| match j - i {
        0 => 1.0,
        1 => offdiag,
        _ => 0.0,
    });
    let omega = invert_spd(&sigma)?;
    Ok(GraphModel::assemble(
        sigma,
        omega,
        DesignTag::BandedCovariance,
        None,
        0.0,
    ))
}

/// The divisor of `k` closest to the block size whose nominal edge
/// proportion `(s - 1) / (k - 1)` equals `1 - pi0_nominal`. Ties go to the
/// smaller block.
pub fn block_size_for_nominal(k: usize, pi0_nominal: f64) -> usize {
    let target = (1.0 - pi0_nominal) * (k as f64 - 1.0) + 1.0;
    (1..=k)
        .filter(|s| k % s == 0)
        .min_by(|a, b| {
            let da = (*a as f64 - target).abs();
            let db = (*b as f64 - target).abs();
            da.partial_cmp(&db).unwrap().then(a.cmp(b))
        })
        .unwrap_or(1)
}

/// JSON-serializable design description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub design_tag: DesignTag,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    /// Within-block correlation, or the off-diagonal of `BandedCovariance`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Band values by offset; defaults to [`BAND_DIAGONALS`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ModelSpec {
    pub fn block_ar1(k: usize, s: usize, rho: f64) -> Self {
        Self::blocks(DesignTag::BlockAR1, k, s, rho)
    }

    pub fn block_equicorr(k: usize, s: usize, rho: f64) -> Self {
        Self::blocks(DesignTag::BlockEquicorr, k, s, rho)
    }

    fn blocks(design_tag: DesignTag, k: usize, s: usize, rho: f64) -> Self {
        Self {
            design_tag,
            k,
            block_size: Some(s),
            rho: Some(rho),
            band: None,
            q: None,
            u_range: None,
            seed: None,
        }
    }

    pub fn band(k: usize) -> Self {
        Self {
            design_tag: DesignTag::Band,
            k,
            block_size: None,
            rho: None,
            band: None,
            q: None,
            u_range: None,
            seed: None,
        }
    }

    pub fn erdos_renyi(k: usize, q: f64, seed: u64) -> Self {
        Self {
            design_tag: DesignTag::ErdosRenyi,
            k,
            block_size: None,
            rho: None,
            band: None,
            q: Some(q),
            u_range: Some([0.4, 0.8]),
            seed: Some(seed),
        }
    }

    /// `q = min(0.05, 5 / k)`.
    pub fn erdos_renyi_default_q(k: usize) -> f64 {
        0.05f64.min(5.0 / k as f64)
    }

    fn missing(&self, field: &str) -> ModelError {
        ModelError::InvalidSpec(format!("{:?} requires field `{field}`", self.design_tag))
    }

    pub fn build(&self) -> Result<GraphModel, ModelError> {
        match self.design_tag {
            DesignTag::BlockAR1 | DesignTag::BlockEquicorr => {
                let s = self.block_size.ok_or_else(|| self.missing("block_size"))?;
                let rho = self.rho.ok_or_else(|| self.missing("rho"))?;
                if self.design_tag == DesignTag::BlockAR1 {
                    block_ar1(self.k, s, rho)
                } else {
                    block_equicorr(self.k, s, rho)
                }
            }
            DesignTag::Band => match &self.band {
                None => band_precision(self.k),
                Some(diags) if diags.as_slice() == BAND_DIAGONALS => band_precision(self.k),
                Some(diags) => custom_band(self.k, diags),
            },
            DesignTag::ErdosRenyi => {
                let q = self.q.ok_or_else(|| self.missing("q"))?;
                let u = self.u_range.unwrap_or([0.4, 0.8]);
                let seed = self.seed.ok_or_else(|| self.missing("seed"))?;
                erdos_renyi_precision(self.k, q, u, seed)
            }
            DesignTag::BandedCovariance => {
                let rho = self.rho.ok_or_else(|| self.missing("rho"))?;
                banded_covariance(self.k, rho)
            }
        }
    }
}

fn custom_band(k: usize, diags: &[f64]) -> Result<GraphModel, ModelError> {
    if k < 3 || diags.is_empty() || diags[0] <= 0.0 {
        return Err(ModelError::InvalidSpec(
            "band needs k >= 3 and a positive leading diagonal".into(),
        ));
    }
    let omega = SymMatrix::from_fn(k, |i, j| diags.get(j - i).copied().unwrap_or(0.0));
    let sigma = invert_spd(&omega)
        .map_err(|_| ModelError::InvalidSpec("band precision is not positive definite".into()))?;
    let nominal = 1.0 - 2.0 / k as f64;
    Ok(GraphModel::assemble(
        sigma,
        omega,
        DesignTag::Band,
        Some(nominal),
        0.0,
    ))
}

/// Advisory check of condition (C1) and of the dimension/sample-size rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C1Report {
    pub c0: f64,
    pub max_sigma_diag: f64,
    pub max_omega_diag: f64,
    pub sigma_within_c0: bool,
    pub omega_within_c0: bool,
    pub log_k_over_n: f64,
    pub log_k_over_sqrt_n: f64,
    /// Set when `log k / n > 0.1` or `log k / sqrt(n) > 1`.
    pub rate_flagged: bool,
}

impl C1Report {
    pub fn passes(&self) -> bool {
        self.sigma_within_c0 && self.omega_within_c0 && !self.rate_flagged
    }
}

pub fn validate_c1(model: &GraphModel, c0: f64, n: usize) -> C1Report {
    rate_report(
        model.k,
        n,
        c0,
        model.sigma.diagonal(),
        model.omega.diagonal(),
    )
}

/// Rate part of (C1) for data of unknown covariance.
pub fn rate_check(k: usize, n: usize) -> (f64, f64, bool) {
    let lk = (k as f64).ln();
    let a = lk / n as f64;
    let b = lk / (n as f64).sqrt();
    (a, b, a > 0.1 || b > 1.0)
}

fn rate_report(k: usize, n: usize, c0: f64, sd: Vec<f64>, od: Vec<f64>) -> C1Report {
    let max_sigma_diag = sd.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let max_omega_diag = od.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let (log_k_over_n, log_k_over_sqrt_n, rate_flagged) = rate_check(k, n);
    C1Report {
        c0,
        max_sigma_diag,
        max_omega_diag,
        sigma_within_c0: max_sigma_diag <= c0,
        omega_within_c0: max_omega_diag <= c0,
        log_k_over_n,
        log_k_over_sqrt_n,
        rate_flagged,
    }
}
