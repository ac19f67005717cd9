//! Covariance-form coordinate descent for the node-wise fits.
//!
//! Every node regresses one column of the same centered matrix on the rest,
//! so `G = X^T X / n` is formed once and each node works on a submatrix. The
//! gradient `D^T r / n = xty - G_sub beta` is updated in `O(k)` per move.

use super::{soft_threshold, LassoFit, RegressionError, ScaledLassoFit, SolverOptions};
use nalgebra::DMatrix;

pub(crate) struct NodeProblem {
    gram: DMatrix<f64>,
    xty: Vec<f64>,
    yty: f64,
}

impl NodeProblem {
    /// Node `i` of the full Gram matrix `g` (`k x k`, 1/n normalization).
    pub(crate) fn new(g: &DMatrix<f64>, i: usize) -> Self {
        let k = g.nrows();
        let others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        let gram = DMatrix::from_fn(k - 1, k - 1, |a, b| g[(others[a], others[b])]);
        let xty = others.iter().map(|&j| g[(j, i)]).collect();
        Self {
            gram,
            xty,
            yty: g[(i, i)],
        }
    }

    fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let mut g = self.xty.clone();
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                g.iter_mut()
                    .zip(self.gram.column(j).iter())
                    .for_each(|(gi, c)| *gi -= c * b);
            }
        }
        g
    }

    /// `||y - D beta||^2 / n`.
    pub(crate) fn rss(&self, beta: &[f64]) -> f64 {
        let g = self.gradient(beta);
        // y^T r / n - beta^T D^T r / n, which avoids forming beta^T G beta.
        let yr = self.yty - beta.iter().zip(&self.xty).map(|(b, x)| b * x).sum::<f64>();
        let br: f64 = beta.iter().zip(&g).map(|(b, gi)| b * gi).sum();
        (yr - br).max(0.0)
    }

    pub(crate) fn lasso(
        &self,
        lambda: f64,
        opts: &SolverOptions,
        init: Option<&[f64]>,
    ) -> LassoFit {
        let p = self.xty.len();
        let diag: Vec<f64> = (0..p).map(|j| self.gram[(j, j)]).collect();
        let kkt_tol = 10.0
            * opts.tol
            * diag
                .iter()
                .copied()
                .fold(0.0, f64::max)
                .max(f64::MIN_POSITIVE);
        let mut beta = init.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
        let mut grad = self.gradient(&beta);

        let sweep = |idx: &mut dyn Iterator<Item = usize>, beta: &mut [f64], grad: &mut [f64]| {
            let mut max_change = 0.0f64;
            for j in idx {
                let a = diag[j];
                if a == 0.0 {
                    beta[j] = 0.0;
                    continue;
                }
                let old = beta[j];
                let new = soft_threshold(grad[j] + a * old, lambda) / a;
                let delta = new - old;
                if delta != 0.0 {
                    grad.iter_mut()
                        .zip(self.gram.column(j).iter())
                        .for_each(|(g, c)| *g -= c * delta);
                    beta[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            max_change
        };

        let mut iterations = 0;
        let mut converged = false;
        let mut kkt = f64::INFINITY;
        while iterations < opts.max_iter {
            iterations += 1;
            let max_change = sweep(&mut (0..p), &mut beta, &mut grad);
            if max_change < opts.tol {
                // Refresh to drop accumulated rounding before the KKT gate.
                grad = self.gradient(&beta);
                kkt = super::kkt_from_gradient(&grad, lambda, &beta);
                if kkt <= kkt_tol {
                    converged = true;
                    break;
                }
            }
            let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
            while iterations < opts.max_iter {
                iterations += 1;
                if sweep(&mut active.iter().copied(), &mut beta, &mut grad) < opts.tol {
                    break;
                }
            }
        }
        if !converged {
            kkt = super::kkt_from_gradient(&self.gradient(&beta), lambda, &beta);
        }
        LassoFit {
            beta,
            lambda,
            iterations,
            converged,
            kkt,
        }
    }

    /// Same iteration as [`super::scaled_lasso_from`].
    pub(crate) fn scaled_lasso(
        &self,
        lambda0: f64,
        opts: &SolverOptions,
        init: Option<(&[f64], f64)>,
    ) -> Result<ScaledLassoFit, RegressionError> {
        let sd_y = self.yty.sqrt();
        let floor = 1e-12 * sd_y;
        if !(sd_y > 0.0) {
            return Err(RegressionError::DegenerateScale { sigma: sd_y, sd_y });
        }
        let mut sigma = sd_y;
        let mut beta: Option<Vec<f64>> = None;
        if let Some((b, s)) = init {
            if s.is_finite() && s > floor {
                sigma = s;
                beta = Some(b.to_vec());
            }
        }
        for outer in 1..=opts.max_outer_iter {
            let inner = SolverOptions {
                tol: opts.tol * sigma,
                ..*opts
            };
            let fit = self.lasso(sigma * lambda0, &inner, beta.as_deref());
            let sigma_new = self.rss(&fit.beta).sqrt();
            if sigma_new < floor {
                return Err(RegressionError::DegenerateScale {
                    sigma: sigma_new,
                    sd_y,
                });
            }
            let done = (sigma_new - sigma).abs() < opts.tol * sigma;
            beta = Some(fit.beta.clone());
            sigma = sigma_new;
            if done {
                return Ok(ScaledLassoFit {
                    fit,
                    sigma_hat: sigma,
                    outer_iterations: outer,
                });
            }
        }
        let mut fit = self.lasso(sigma * lambda0, opts, beta.as_deref());
        fit.converged = false;
        Err(RegressionError::DidNotConverge { fit: Box::new(fit) })
    }
}
