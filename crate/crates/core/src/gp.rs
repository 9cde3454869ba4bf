//! Exact Gaussian-process regression with an ARD squared-exponential kernel.
//!
//! Hyperparameters live in log space: `D` log length scales followed by the
//! log signal variance and the log noise variance. Fitting maximizes the log
//! marginal likelihood with Adam; prediction uses a cached Cholesky factor of
//! `K(X, X) + σ_n² I`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{cholesky, dot, CholeskyFactor, Matrix, NumericsError};

pub const CHECKPOINT_VERSION: u32 = 1;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no training data")]
    EmptyTrainingSet,
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("optimization diverged at iteration {iteration} (lml {lml})")]
    DivergedOptimization { iteration: usize, lml: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, GpError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

impl GpHyper {
    pub fn new(lengthscales: &[f64], signal_var: f64, noise_var: f64) -> Result<Self> {
        if lengthscales.iter().chain([&signal_var, &noise_var]).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(GpError::InvalidHyper(format!(
                "all hyperparameters must be positive: {lengthscales:?} {signal_var} {noise_var}"
            )));
        }
        Ok(GpHyper {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_signal_var: signal_var.ln(),
            log_noise_var: noise_var.ln(),
        })
    }

    /// Default starting point: unit length scales and signal variance,
    /// noise variance 0.05.
    pub fn initial(dim: usize) -> Self {
        GpHyper::new(&vec![1.0; dim], 1.0, 0.05).expect("constant defaults are valid")
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|v| v.exp()).collect()
    }

    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    /// `[log λ_1..log λ_D, log σ_p², log σ_n²]`
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_signal_var);
        v.push(self.log_noise_var);
        v
    }

    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.len() < 3 || v.iter().any(|x| !x.is_finite()) {
            return Err(GpError::InvalidHyper(format!("bad log-hyperparameter vector {v:?}")));
        }
        let d = v.len() - 2;
        Ok(GpHyper {
            log_lengthscales: v[..d].to_vec(),
            log_signal_var: v[d],
            log_noise_var: v[d + 1],
        })
    }

    fn inv_sq_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect()
    }
}

#[inline]
fn weighted_sq_dist(a: &[f64], b: &[f64], inv_sq: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((x, y), w) in a.iter().zip(b).zip(inv_sq) {
        let d = x - y;
        s += d * d * w;
    }
    s
}

/// `σ_p² exp(-½ Σ_d (x_d - x2_d)² / λ_d²)`
pub fn kernel_eval(x: &[f64], x2: &[f64], hyper: &GpHyper) -> Result<f64> {
    if x.len() != hyper.dim() || x2.len() != hyper.dim() {
        return Err(GpError::DimensionMismatch {
            expected: hyper.dim(),
            got: if x.len() != hyper.dim() { x.len() } else { x2.len() },
        });
    }
    Ok(hyper.signal_var() * (-0.5 * weighted_sq_dist(x, x2, &hyper.inv_sq_lengthscales())).exp())
}

/// Kernel matrix without the noise term.
pub fn gram(x: &Matrix, hyper: &GpHyper) -> Result<Matrix> {
    check_dim(x, hyper)?;
    let n = x.rows();
    let inv_sq = hyper.inv_sq_lengthscales();
    let sp = hyper.signal_var();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k.set(i, i, sp);
        for j in 0..i {
            let v = sp * (-0.5 * weighted_sq_dist(x.row(i), x.row(j), &inv_sq)).exp();
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    Ok(k)
}

fn check_dim(x: &Matrix, hyper: &GpHyper) -> Result<()> {
    if x.cols() != hyper.dim() {
        return Err(GpError::DimensionMismatch {
            expected: hyper.dim(),
            got: x.cols(),
        });
    }
    Ok(())
}

fn noisy_factor(x: &Matrix, hyper: &GpHyper) -> Result<(Matrix, CholeskyFactor)> {
    let kf = gram(x, hyper)?;
    let mut k = kf.clone();
    k.add_diagonal(hyper.noise_var());
    let chol = cholesky(&k, 0.0)?;
    Ok((kf, chol))
}

/// Log marginal likelihood and its gradient with respect to
/// [`GpHyper::to_vec`].
pub fn log_marginal_likelihood(x: &Matrix, y: &[f64], hyper: &GpHyper) -> Result<(f64, Vec<f64>)> {
    let n = x.rows();
    if n == 0 {
        return Err(GpError::EmptyTrainingSet);
    }
    if y.len() != n {
        return Err(GpError::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    let (kf, chol) = noisy_factor(x, hyper)?;
    let mut alpha = y.to_vec();
    chol.solve_lower_in_place(&mut alpha)?;
    let fit_term = dot(&alpha, &alpha);
    chol.solve_upper_in_place(&mut alpha)?;
    let lml = -0.5 * fit_term - 0.5 * chol.log_det() - 0.5 * n as f64 * LN_2PI;

    // W = α αᵀ - K⁻¹; dlml/dθ = ½ Σ_ij W_ij ∂K_ij/∂θ
    let kinv = chol.inverse();
    let d = hyper.dim();
    let inv_sq = hyper.inv_sq_lengthscales();
    let mut grad = vec![0.0; d + 2];
    let mut trace_w = 0.0;
    for i in 0..n {
        let xi = x.row(i);
        let wii = alpha[i] * alpha[i] - kinv.get(i, i);
        trace_w += wii;
        grad[d] += 0.5 * wii * kf.get(i, i);
        for j in 0..i {
            // symmetric pair counted twice
            let wk = (alpha[i] * alpha[j] - kinv.get(i, j)) * kf.get(i, j);
            grad[d] += wk;
            let xj = x.row(j);
            for k in 0..d {
                let diff = xi[k] - xj[k];
                grad[k] += wk * diff * diff * inv_sq[k];
            }
        }
    }
    grad[d + 1] = 0.5 * hyper.noise_var() * trace_w;
    Ok((lml, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Noise variance is optimized with the kernel parameters.
    Joint,
    /// Noise variance stays at its initial value.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpFitConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub lr: f64,
    pub noise_floor: f64,
    /// Training rows kept; larger sets are thinned uniformly in order.
    pub max_train: usize,
    /// Rows used while optimizing hyperparameters. The final model is
    /// always conditioned on all (up to `max_train`) rows.
    pub opt_subset: usize,
    pub noise_mode: NoiseMode,
    /// Box constraints on the lengthscales and signal variance, enforced
    /// in log space after every step.
    pub lengthscale_bounds: (f64, f64),
    pub signal_var_bounds: (f64, f64),
}

impl Default for GpFitConfig {
    fn default() -> Self {
        GpFitConfig {
            max_iters: 500,
            tol: 1e-5,
            lr: 0.05,
            noise_floor: 1e-6,
            max_train: 4096,
            opt_subset: 400,
            noise_mode: NoiseMode::Joint,
            lengthscale_bounds: (1e-3, 1e4),
            signal_var_bounds: (1e-4, 1e2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub iterations: usize,
    pub final_lml: f64,
    pub converged: bool,
    pub optimized_rows: usize,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    x: Matrix,
    y: Vec<f64>,
    hyper: GpHyper,
    chol: CholeskyFactor,
    alpha: Vec<f64>,
    pub fit_metadata: Option<FitMetadata>,
}

/// Row indices that keep every k-th row so at most `cap` remain, preserving
/// order.
pub fn uniform_subsample(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|i| i * n / cap).collect()
}

fn select_rows(x: &Matrix, y: &[f64], idx: &[usize]) -> (Matrix, Vec<f64>) {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| x.row(i)).collect();
    (Matrix::from_rows(&rows), idx.iter().map(|&i| y[i]).collect())
}

fn clamp_theta(theta: &mut [f64], cfg: &GpFitConfig) {
    let d = theta.len() - 2;
    let (l0, l1) = (cfg.lengthscale_bounds.0.ln(), cfg.lengthscale_bounds.1.ln());
    for v in &mut theta[..d] {
        *v = v.clamp(l0, l1);
    }
    theta[d] = theta[d].clamp(cfg.signal_var_bounds.0.ln(), cfg.signal_var_bounds.1.ln());
    theta[d + 1] = theta[d + 1].max(cfg.noise_floor.ln());
}

/// Maximizes the log marginal likelihood from `init` and conditions the
/// resulting model on the training data.
pub fn fit(x: &Matrix, y: &[f64], init: &GpHyper, cfg: &GpFitConfig) -> Result<GpModel> {
    if x.rows() == 0 {
        return Err(GpError::EmptyTrainingSet);
    }
    check_dim(x, init)?;
    if y.len() != x.rows() {
        return Err(GpError::DimensionMismatch {
            expected: x.rows(),
            got: y.len(),
        });
    }
    let keep = uniform_subsample(x.rows(), cfg.max_train);
    let (xt, yt) = select_rows(x, y, &keep);
    let opt_idx = uniform_subsample(xt.rows(), cfg.opt_subset.max(1));
    let (xo, yo) = select_rows(&xt, &yt, &opt_idx);

    let mut theta = init.to_vec();
    clamp_theta(&mut theta, cfg);
    let p = theta.len();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; p];
    let mut v = vec![0.0; p];
    let mut prev: Option<f64> = None;
    let mut iterations = 0;
    let mut converged = false;
    let mut last_lml = f64::NAN;
    for it in 0..cfg.max_iters {
        let hyper = GpHyper::from_vec(&theta)?;
        let (lml, mut grad) = log_marginal_likelihood(&xo, &yo, &hyper)?;
        if !lml.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(GpError::DivergedOptimization { iteration: it, lml });
        }
        last_lml = lml;
        iterations = it + 1;
        if let Some(pl) = prev {
            if (lml - pl).abs() < cfg.tol {
                converged = true;
                break;
            }
        }
        prev = Some(lml);
        if cfg.noise_mode == NoiseMode::Fixed {
            grad[p - 1] = 0.0;
        }
        let t = (it + 1) as i32;
        for k in 0..p {
            m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
            v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
            let mh = m[k] / (1.0 - b1.powi(t));
            let vh = v[k] / (1.0 - b2.powi(t));
            // ascent
            theta[k] += cfg.lr * mh / (vh.sqrt() + eps);
        }
        clamp_theta(&mut theta, cfg);
    }
    let hyper = GpHyper::from_vec(&theta)?;
    let mut model = GpModel::condition(xt, yt, hyper)?;
    model.fit_metadata = Some(FitMetadata {
        iterations,
        final_lml: last_lml,
        converged,
        optimized_rows: xo.rows(),
    });
    Ok(model)
}

fn gp_name() -> String {
    "gp".into()
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    #[serde(default = "gp_name")]
    estimator: String,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    log_hyper: GpHyper,
    fit_metadata: Option<FitMetadata>,
}

impl GpModel {
    /// Conditions on `(x, y)` with fixed hyperparameters.
    pub fn condition(x: Matrix, y: Vec<f64>, hyper: GpHyper) -> Result<GpModel> {
        if x.rows() == 0 {
            return Err(GpError::EmptyTrainingSet);
        }
        check_dim(&x, &hyper)?;
        if y.len() != x.rows() {
            return Err(GpError::DimensionMismatch {
                expected: x.rows(),
                got: y.len(),
            });
        }
        let (_, chol) = noisy_factor(&x, &hyper)?;
        let mut alpha = y.clone();
        chol.solve_lower_in_place(&mut alpha)?;
        chol.solve_upper_in_place(&mut alpha)?;
        Ok(GpModel {
            x,
            y,
            hyper,
            chol,
            alpha,
            fit_metadata: None,
        })
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn inputs(&self) -> &Matrix {
        &self.x
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn dim(&self) -> usize {
        self.hyper.dim()
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Posterior mean and variance of the latent function at `xstar`.
    pub fn predict(&self, xstar: &[f64]) -> Result<(f64, f64)> {
        if xstar.len() != self.dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.dim(),
                got: xstar.len(),
            });
        }
        let inv_sq = self.hyper.inv_sq_lengthscales();
        let sp = self.hyper.signal_var();
        let mut kstar: Vec<f64> = (0..self.x.rows())
            .map(|i| sp * (-0.5 * weighted_sq_dist(self.x.row(i), xstar, &inv_sq)).exp())
            .collect();
        let mu = dot(&kstar, &self.alpha);
        self.chol.solve_lower_in_place(&mut kstar)?;
        let sigma2 = (sp - dot(&kstar, &kstar)).max(0.0);
        Ok((mu, sigma2))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            estimator: gp_name(),
            d: self.dim(),
            n: self.len(),
            x: (0..self.len()).map(|i| self.x.row(i).to_vec()).collect(),
            y: self.y.clone(),
            log_hyper: self.hyper.clone(),
            fit_metadata: self.fit_metadata.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ck).map_err(|e| GpError::Format(e.to_string()))?)?;
        Ok(())
    }

    /// Loads a checkpoint and refactors the kernel matrix.
    pub fn load(path: &Path) -> Result<GpModel> {
        let ck: Checkpoint =
            serde_json::from_slice(&std::fs::read(path)?).map_err(|e| GpError::Format(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(GpError::Format(format!("unsupported format_version {}", ck.format_version)));
        }
        if ck.x.len() != ck.n || ck.y.len() != ck.n || ck.x.iter().any(|r| r.len() != ck.d) {
            return Err(GpError::Format("X/y do not match declared D and N".into()));
        }
        let mut model = GpModel::condition(Matrix::from_rows(&ck.x), ck.y, ck.log_hyper)?;
        model.fit_metadata = ck.fit_metadata;
        Ok(model)
    }
}
