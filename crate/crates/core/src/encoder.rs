//! Convolutional autoencoder that embeds frames into a small latent vector.
//!
//! Four encoder blocks (conv → norm → relu → dropout → pool) shrink the
//! 64×64 frame to 4×4, a dense layer maps to the latent vector, and the
//! decoder mirrors the path with nearest-neighbour upsampling. Per-frame
//! reconstruction error on the training set is summarized so later frames
//! can be flagged when the model reconstructs them poorly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, FRAME_PIXELS, FRAME_SIZE};
use crate::nnkernels::{AdamConfig, AdamState, LayerSpec, Mode, NnError, Sequential, Tensor};

pub const DEFAULT_LATENT_DIM: usize = 12;
pub const MIN_TRAINING_FRAMES: usize = 16;
pub const CHECKPOINT_VERSION: u32 = 1;
const INFER_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("need at least {MIN_TRAINING_FRAMES} training frames, got {0}")]
    EmptyDataset(usize),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    DivergedTraining { epoch: usize, loss: f64 },
    #[error("reconstruction statistics unavailable; model was never trained")]
    StatsUnavailable,
    #[error("invalid autoencoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub latent_dim: usize,
    pub channels: [usize; 4],
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Outlier cut in standard deviations above the mean training loss.
    pub outlier_sigmas: f64,
    /// Stop when validation loss has not improved for this many epochs.
    /// Only used by [`train_autoencoder_validated`].
    pub early_stop_patience: Option<usize>,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            latent_dim: DEFAULT_LATENT_DIM,
            channels: [8, 16, 32, 64],
            dropout: 0.1,
            epochs: 400,
            lr: 0.01,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 0,
            outlier_sigmas: 3.0,
            early_stop_patience: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeModel {
    pub format_version: u32,
    pub latent_dim: usize,
    pub channels: [usize; 4],
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub train_loss_stats: Option<LossStats>,
    pub outlier_sigmas: f64,
    /// Mean per-frame MSE for each completed epoch (train mode).
    #[serde(default)]
    pub loss_history: Vec<f64>,
    /// Per-dimension mean and standard deviation of the bottleneck over the
    /// training frames; embeddings are reported in these units.
    #[serde(default)]
    pub latent_scale: Option<LatentScale>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentScale {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentScale {
    fn fit(rows: &[&[f64]]) -> LatentScale {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|k| {
                let v = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                v.sqrt().max(1e-9)
            })
            .collect();
        LatentScale { mean, std }
    }

    fn apply(&self, z: &[f64]) -> LatentVector {
        LatentVector(z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect())
    }
}

fn architecture(latent_dim: usize, ch: [usize; 4], dropout: f64) -> (Vec<LayerSpec>, Vec<LayerSpec>) {
    let mut enc = Vec::new();
    let mut in_ch = 1;
    for &c in &ch {
        enc.push(LayerSpec::Conv3x3 {
            in_channels: in_ch,
            out_channels: c,
        });
        enc.push(LayerSpec::ChannelNorm { channels: c });
        enc.push(LayerSpec::Relu);
        enc.push(LayerSpec::Dropout { p: dropout });
        enc.push(LayerSpec::MaxPool2x2);
        in_ch = c;
    }
    let side = FRAME_SIZE / 16;
    let flat = ch[3] * side * side;
    enc.push(LayerSpec::Dense {
        in_size: flat,
        out_size: latent_dim,
    });

    let mut dec = vec![
        LayerSpec::Dense {
            in_size: latent_dim,
            out_size: flat,
        },
        LayerSpec::Reshape {
            channels: ch[3],
            height: side,
            width: side,
        },
    ];
    let outs = [ch[2], ch[1], ch[0], 1];
    let mut in_ch = ch[3];
    for (i, &c) in outs.iter().enumerate() {
        dec.push(LayerSpec::Upsample2x2);
        dec.push(LayerSpec::Conv3x3 {
            in_channels: in_ch,
            out_channels: c,
        });
        if i + 1 < outs.len() {
            dec.push(LayerSpec::ChannelNorm { channels: c });
            dec.push(LayerSpec::Relu);
        } else {
            dec.push(LayerSpec::Sigmoid);
        }
        in_ch = c;
    }
    (enc, dec)
}

fn batch_tensor(frames: &[&Frame]) -> Tensor {
    let mut data = Vec::with_capacity(frames.len() * FRAME_PIXELS);
    for f in frames {
        f.extend_reals(&mut data);
    }
    Tensor {
        shape: vec![frames.len(), 1, FRAME_SIZE, FRAME_SIZE],
        data,
    }
}

fn per_frame_mse(recon: &[f64], input: &[f64]) -> f64 {
    recon.iter().zip(input).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / FRAME_PIXELS as f64
}

impl AeModel {
    pub fn untrained(cfg: &AeConfig) -> Result<AeModel> {
        if cfg.latent_dim == 0 || cfg.channels.contains(&0) {
            return Err(EncoderError::InvalidConfig(format!(
                "latent_dim {} channels {:?}",
                cfg.latent_dim, cfg.channels
            )));
        }
        let (enc, dec) = architecture(cfg.latent_dim, cfg.channels, cfg.dropout);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(AeModel {
            format_version: CHECKPOINT_VERSION,
            latent_dim: cfg.latent_dim,
            channels: cfg.channels,
            encoder: Sequential::build(&enc, &mut rng)?,
            decoder: Sequential::build(&dec, &mut rng)?,
            train_loss_stats: None,
            outlier_sigmas: cfg.outlier_sigmas,
            loss_history: vec![],
            latent_scale: None,
        })
    }

    pub fn encode(&self, frame: &Frame) -> Result<LatentVector> {
        Ok(self.encode_batch(std::slice::from_ref(frame))?.remove(0))
    }

    pub fn encode_batch(&self, frames: &[Frame]) -> Result<Vec<LatentVector>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(INFER_CHUNK) {
            let refs: Vec<&Frame> = chunk.iter().collect();
            let z = self.encoder.infer(&batch_tensor(&refs))?;
            out.extend(z.data.chunks(self.latent_dim).map(|c| self.scaled(c)));
        }
        Ok(out)
    }

    fn scaled(&self, z: &[f64]) -> LatentVector {
        match &self.latent_scale {
            Some(s) => s.apply(z),
            None => LatentVector(z.to_vec()),
        }
    }

    /// Decoder output for `frame` and its mean squared pixel error.
    pub fn reconstruct(&self, frame: &Frame) -> Result<(Frame, f64)> {
        let input = batch_tensor(&[frame]);
        let z = self.encoder.infer(&input)?;
        let recon = self.decoder.infer(&z)?;
        let loss = per_frame_mse(&recon.data, &input.data);
        let clamped: Vec<f64> = recon.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let out = Frame::from_reals(&clamped).map_err(|e| EncoderError::Format(e.to_string()))?;
        Ok((out, loss))
    }

    /// Reconstruction losses for many frames at once.
    pub fn reconstruction_losses(&self, frames: &[Frame]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(INFER_CHUNK) {
            let refs: Vec<&Frame> = chunk.iter().collect();
            let input = batch_tensor(&refs);
            let recon = self.decoder.infer(&self.encoder.infer(&input)?)?;
            out.extend(
                recon
                    .data
                    .chunks(FRAME_PIXELS)
                    .zip(input.data.chunks(FRAME_PIXELS))
                    .map(|(r, i)| per_frame_mse(r, i)),
            );
        }
        Ok(out)
    }

    /// Embedding and reconstruction loss from a single encoder pass.
    pub fn encode_with_loss(&self, frames: &[Frame]) -> Result<Vec<(LatentVector, f64)>> {
        Ok(self
            .raw_with_loss(frames)?
            .into_iter()
            .map(|(z, loss)| (self.scaled(&z), loss))
            .collect())
    }

    fn raw_with_loss(&self, frames: &[Frame]) -> Result<Vec<(Vec<f64>, f64)>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(INFER_CHUNK) {
            let refs: Vec<&Frame> = chunk.iter().collect();
            let input = batch_tensor(&refs);
            let z = self.encoder.infer(&input)?;
            let recon = self.decoder.infer(&z)?;
            for ((zc, r), i) in z
                .data
                .chunks(self.latent_dim)
                .zip(recon.data.chunks(FRAME_PIXELS))
                .zip(input.data.chunks(FRAME_PIXELS))
            {
                out.push((zc.to_vec(), per_frame_mse(r, i)));
            }
        }
        Ok(out)
    }

    pub fn reconstruction_unreliable(&self, loss: f64) -> Result<bool> {
        let stats = self.train_loss_stats.ok_or(EncoderError::StatsUnavailable)?;
        Ok(loss > stats.mean + self.outlier_sigmas * stats.std)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| EncoderError::Format(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<AeModel> {
        let bytes = std::fs::read(path)?;
        let model: AeModel = serde_json::from_slice(&bytes).map_err(|e| EncoderError::Format(e.to_string()))?;
        if model.format_version != CHECKPOINT_VERSION {
            return Err(EncoderError::Format(format!(
                "unsupported format_version {}",
                model.format_version
            )));
        }
        Ok(model)
    }

    fn refresh_stats(&mut self, frames: &[Frame]) -> Result<()> {
        let pass = self.raw_with_loss(frames)?;
        let rows: Vec<&[f64]> = pass.iter().map(|(z, _)| z.as_slice()).collect();
        self.latent_scale = Some(LatentScale::fit(&rows));
        let losses: Vec<f64> = pass.iter().map(|(_, l)| *l).collect();
        let n = losses.len() as f64;
        let mean = losses.iter().sum::<f64>() / n;
        let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
        self.train_loss_stats = Some(LossStats { mean, std: var.sqrt() });
        Ok(())
    }

    /// Runs one epoch over `frames` in shuffled mini-batches; returns the
    /// mean per-frame MSE seen during the epoch.
    fn train_epoch(&mut self, frames: &[Frame], cfg: &AeConfig, adam: &mut AdamState, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            // A one-frame batch has no spread for channel norm to estimate.
            if idx.len() < 2 {
                continue;
            }
            let refs: Vec<&Frame> = idx.iter().map(|&i| &frames[i]).collect();
            let input = batch_tensor(&refs);
            let (z, enc_caches) = self.encoder.forward(&input, Mode::Train, rng)?;
            let (recon, dec_caches) = self.decoder.forward(&z, Mode::Train, rng)?;
            let b = idx.len() as f64;
            let scale = 2.0 / (FRAME_PIXELS as f64 * b);
            let mut grad = Tensor::zeros(&recon.shape);
            let mut batch_loss = 0.0;
            for ((g, r), x) in grad.data.iter_mut().zip(&recon.data).zip(&input.data) {
                let d = r - x;
                batch_loss += d * d;
                *g = scale * d;
            }
            total += batch_loss / FRAME_PIXELS as f64;
            let (gz, mut dec_grads) = self.decoder.backward(&dec_caches, &grad)?;
            let (_, enc_grads) = self.encoder.backward(&enc_caches, &gz)?;
            let mut grads = enc_grads;
            grads.append(&mut dec_grads);
            self.encoder.update_running(&enc_caches);
            self.decoder.update_running(&dec_caches);
            let mut params = self.encoder.params_mut();
            params.extend(self.decoder.params_mut());
            adam.step(&mut params, &grads)?;
        }
        Ok(total / frames.len() as f64)
    }
}

/// Trains a fresh autoencoder on `frames`.
pub fn train_autoencoder(frames: &[Frame], cfg: &AeConfig) -> Result<AeModel> {
    let model = AeModel::untrained(cfg)?;
    fit(model, frames, None, cfg)
}

/// Trains with early stopping on `validation` when
/// `cfg.early_stop_patience` is set.
pub fn train_autoencoder_validated(frames: &[Frame], validation: &[Frame], cfg: &AeConfig) -> Result<AeModel> {
    let model = AeModel::untrained(cfg)?;
    fit(model, frames, Some(validation), cfg)
}

/// Continues training an existing model on new frames (warm start).
pub fn fine_tune(model: &AeModel, frames: &[Frame], cfg: &AeConfig) -> Result<AeModel> {
    if model.latent_dim != cfg.latent_dim || model.channels != cfg.channels {
        return Err(EncoderError::InvalidConfig(
            "fine-tuning config does not match model architecture".into(),
        ));
    }
    let mut m = model.clone();
    m.loss_history.clear();
    fit(m, frames, None, cfg)
}

fn fit(mut model: AeModel, frames: &[Frame], validation: Option<&[Frame]>, cfg: &AeConfig) -> Result<AeModel> {
    if frames.len() < MIN_TRAINING_FRAMES {
        return Err(EncoderError::EmptyDataset(frames.len()));
    }
    if cfg.epochs == 0 || cfg.lr <= 0.0 || cfg.batch_size < 2 {
        return Err(EncoderError::InvalidConfig(format!(
            "epochs {} lr {} batch {}",
            cfg.epochs, cfg.lr, cfg.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ae00);
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    let patience = validation.and(cfg.early_stop_patience);
    let mut best: Option<(f64, AeModel)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let loss = model.train_epoch(frames, cfg, &mut adam, &mut rng)?;
        if !loss.is_finite() || !model.encoder.is_finite() || !model.decoder.is_finite() {
            return Err(EncoderError::DivergedTraining { epoch, loss });
        }
        model.loss_history.push(loss);
        if let (Some(p), Some(val)) = (patience, validation) {
            let losses = model.reconstruction_losses(val)?;
            let vloss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            if best.as_ref().is_none_or(|(b, _)| vloss < *b) {
                best = Some((vloss, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= p {
                    let history = model.loss_history.clone();
                    model = best.take().map(|(_, m)| m).unwrap();
                    model.loss_history = history;
                    break;
                }
            }
        }
    }
    model.refresh_stats(frames)?;
    Ok(model)
}
