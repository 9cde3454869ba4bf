//! Discriminative baselines: a small MLP and logistic regression, both
//! trained with binary cross-entropy and Adam.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnkernels::{AdamConfig, AdamState, LayerSpec, Mode, NnError, Sequential, Tensor};
use crate::numerics::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("training view is empty")]
    EmptyView,
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    DivergedTraining { epoch: usize, loss: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Mlp,
    Lr,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Mlp => "mlp",
            BaselineKind::Lr => "lr",
        }
    }

    fn layers(self, input_dim: usize, hidden: usize, dropout: f64) -> Vec<LayerSpec> {
        match self {
            BaselineKind::Lr => vec![
                LayerSpec::Dense {
                    in_size: input_dim,
                    out_size: 1,
                },
                LayerSpec::Sigmoid,
            ],
            BaselineKind::Mlp => {
                let mut v = Vec::new();
                let mut width = input_dim;
                for _ in 0..3 {
                    v.push(LayerSpec::Dense {
                        in_size: width,
                        out_size: hidden,
                    });
                    v.push(LayerSpec::Relu);
                    v.push(LayerSpec::Dropout { p: dropout });
                    width = hidden;
                }
                v.push(LayerSpec::Dense {
                    in_size: width,
                    out_size: 1,
                });
                v.push(LayerSpec::Sigmoid);
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub hidden: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 400,
            lr: 1e-3,
            weight_decay: 1e-5,
            dropout: 0.1,
            hidden: 32,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub format_version: u32,
    pub estimator: BaselineKind,
    pub input_dim: usize,
    pub net: Sequential,
    /// Mean training BCE per epoch.
    #[serde(default)]
    pub loss_history: Vec<f64>,
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn train_baseline(kind: BaselineKind, x: &Matrix, y: &[f64], cfg: &BaselineConfig) -> Result<BaselineModel> {
    let n = x.rows();
    if n == 0 {
        return Err(BaselineError::EmptyView);
    }
    if y.len() != n {
        return Err(BaselineError::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    let d = x.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Sequential::build(&kind.layers(d, cfg.hidden, cfg.dropout), &mut rng)?;
    let mut adam = AdamState::new(AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::with_lr(cfg.lr)
    });
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let b = idx.len();
            let mut data = Vec::with_capacity(b * d);
            for &i in idx {
                data.extend_from_slice(x.row(i));
            }
            let input = Tensor::new(&[b, d], data)?;
            let (out, caches) = net.forward(&input, Mode::Train, &mut rng)?;
            let mut grad = Tensor::zeros(&out.shape);
            for (k, &i) in idx.iter().enumerate() {
                let p = out.data[k];
                total += bce(p, y[i]);
                // dBCE/dp; the sigmoid backward multiplies by p(1-p) again.
                grad.data[k] = (p - y[i]) / (p * (1.0 - p)).max(1e-12) / b as f64;
            }
            let (_, grads) = net.backward(&caches, &grad)?;
            adam.step(&mut net.params_mut(), &grads)?;
        }
        let mean = total / n as f64;
        if !mean.is_finite() || !net.is_finite() {
            return Err(BaselineError::DivergedTraining { epoch, loss: mean });
        }
        history.push(mean);
    }
    Ok(BaselineModel {
        format_version: CHECKPOINT_VERSION,
        estimator: kind,
        input_dim: d,
        net,
        loss_history: history,
    })
}

impl BaselineModel {
    /// Output probability for one observation.
    pub fn predict(&self, o: &[f64]) -> Result<f64> {
        if o.len() != self.input_dim {
            return Err(BaselineError::DimensionMismatch {
                expected: self.input_dim,
                got: o.len(),
            });
        }
        let out = self.net.infer(&Tensor::new(&[1, o.len()], o.to_vec())?)?;
        Ok(out.data[0])
    }

    pub fn predict_batch(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.input_dim {
            return Err(BaselineError::DimensionMismatch {
                expected: self.input_dim,
                got: x.cols(),
            });
        }
        if x.rows() == 0 {
            return Ok(vec![]);
        }
        Ok(self.net.infer(&Tensor::new(&[x.rows(), x.cols()], x.data().to_vec())?)?.data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| BaselineError::Format(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: BaselineModel =
            serde_json::from_slice(&std::fs::read(path)?).map_err(|e| BaselineError::Format(e.to_string()))?;
        if m.format_version != CHECKPOINT_VERSION {
            return Err(BaselineError::Format(format!("unsupported format_version {}", m.format_version)));
        }
        Ok(m)
    }
}
