//! Risk estimators behind one interface, registered by name.
//!
//! `gp` reports the posterior mean and standard deviation; the `mlp` and `lr`
//! baselines report their output probability as the mean with zero sigma.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{train_baseline, BaselineConfig, BaselineError, BaselineKind, BaselineModel};
use crate::dataset::TrainingView;
use crate::gp::{self, GpError, GpFitConfig, GpHyper, GpModel};
use crate::riskcore::Observation;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("unknown estimator {0:?}; known: {1}")]
    UnknownEstimator(String, String),
    #[error("training view is empty")]
    EmptyView,
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mu: f64,
    pub sigma: f64,
}

pub trait RiskEstimator: Send + Sync {
    fn name(&self) -> &'static str;
    fn input_dim(&self) -> usize;
    fn predict(&self, o: &Observation) -> Result<Prediction>;
    fn save(&self, path: &Path) -> Result<()>;
    /// Short machine-readable description for model listings.
    fn summary(&self) -> serde_json::Value;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub gp: GpFitConfig,
    pub baseline: BaselineConfig,
}

impl Default for EstimatorConfig {
    /// GP bounds assume standardized latents: no dimension's lengthscale may
    /// exceed 1.65 standard deviations, and the prior standard deviation stays
    /// above `sqrt(0.5)`, so far-field queries score above the default
    /// threshold.
    fn default() -> Self {
        EstimatorConfig {
            gp: GpFitConfig {
                lengthscale_bounds: (1e-3, 1.65),
                signal_var_bounds: (0.5, 1e2),
                ..GpFitConfig::default()
            },
            baseline: BaselineConfig::default(),
        }
    }
}

pub struct GpEstimator(pub GpModel);

impl RiskEstimator for GpEstimator {
    fn name(&self) -> &'static str {
        "gp"
    }

    fn input_dim(&self) -> usize {
        self.0.dim()
    }

    fn predict(&self, o: &Observation) -> Result<Prediction> {
        let (mu, s2) = self.0.predict(o.as_slice())?;
        Ok(Prediction { mu, sigma: s2.sqrt() })
    }

    fn save(&self, path: &Path) -> Result<()> {
        Ok(self.0.save(path)?)
    }

    fn summary(&self) -> serde_json::Value {
        let h = self.0.hyper();
        serde_json::json!({
            "estimator": "gp",
            "n_train": self.0.len(),
            "lengthscales": h.lengthscales(),
            "signal_var": h.signal_var(),
            "noise_var": h.noise_var(),
        })
    }
}

pub struct BaselineEstimator(pub BaselineModel);

impl RiskEstimator for BaselineEstimator {
    fn name(&self) -> &'static str {
        self.0.estimator.name()
    }

    fn input_dim(&self) -> usize {
        self.0.input_dim
    }

    fn predict(&self, o: &Observation) -> Result<Prediction> {
        Ok(Prediction {
            mu: self.0.predict(o.as_slice())?,
            sigma: 0.0,
        })
    }

    fn save(&self, path: &Path) -> Result<()> {
        Ok(self.0.save(path)?)
    }

    fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "estimator": self.0.estimator.name(),
            "input_dim": self.0.input_dim,
            "final_loss": self.0.loss_history.last(),
        })
    }
}

pub type TrainFn = fn(&TrainingView, &EstimatorConfig) -> Result<Box<dyn RiskEstimator>>;
pub type LoadFn = fn(&Path) -> Result<Box<dyn RiskEstimator>>;

#[derive(Clone, Copy)]
pub struct EstimatorEntry {
    pub name: &'static str,
    pub description: &'static str,
    pub train: TrainFn,
    pub load: LoadFn,
}

fn train_gp(view: &TrainingView, cfg: &EstimatorConfig) -> Result<Box<dyn RiskEstimator>> {
    if view.is_empty() {
        return Err(EstimatorError::EmptyView);
    }
    let m = gp::fit(&view.x, &view.y, &GpHyper::initial(view.x.cols()), &cfg.gp)?;
    Ok(Box::new(GpEstimator(m)))
}

fn load_gp(path: &Path) -> Result<Box<dyn RiskEstimator>> {
    Ok(Box::new(GpEstimator(GpModel::load(path)?)))
}

fn train_with(kind: BaselineKind, view: &TrainingView, cfg: &EstimatorConfig) -> Result<Box<dyn RiskEstimator>> {
    if view.is_empty() {
        return Err(EstimatorError::EmptyView);
    }
    Ok(Box::new(BaselineEstimator(train_baseline(kind, &view.x, &view.y, &cfg.baseline)?)))
}

fn load_baseline(path: &Path) -> Result<Box<dyn RiskEstimator>> {
    Ok(Box::new(BaselineEstimator(BaselineModel::load(path)?)))
}

pub struct EstimatorRegistry {
    entries: BTreeMap<&'static str, EstimatorEntry>,
}

impl Default for EstimatorRegistry {
    fn default() -> Self {
        let mut r = EstimatorRegistry {
            entries: BTreeMap::new(),
        };
        r.register(EstimatorEntry {
            name: "gp",
            description: "exact GP regression with ARD squared-exponential kernel",
            train: train_gp,
            load: load_gp,
        });
        r.register(EstimatorEntry {
            name: "mlp",
            description: "MLP 3x32 with dropout, BCE",
            train: |v, c| train_with(BaselineKind::Mlp, v, c),
            load: load_baseline,
        });
        r.register(EstimatorEntry {
            name: "lr",
            description: "logistic regression, BCE",
            train: |v, c| train_with(BaselineKind::Lr, v, c),
            load: load_baseline,
        });
        r
    }
}

impl EstimatorRegistry {
    pub fn register(&mut self, entry: EstimatorEntry) {
        self.entries.insert(entry.name, entry);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&EstimatorEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| EstimatorError::UnknownEstimator(name.to_string(), self.names().join(", ")))
    }

    pub fn train(&self, name: &str, view: &TrainingView, cfg: &EstimatorConfig) -> Result<Box<dyn RiskEstimator>> {
        (self.get(name)?.train)(view, cfg)
    }

    pub fn load(&self, name: &str, path: &Path) -> Result<Box<dyn RiskEstimator>> {
        (self.get(name)?.load)(path)
    }

    /// Loads a checkpoint, dispatching on its `estimator` field.
    pub fn load_any(&self, path: &Path) -> Result<Box<dyn RiskEstimator>> {
        let bytes = std::fs::read(path)?;
        let v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| EstimatorError::Format(e.to_string()))?;
        let name = v
            .get("estimator")
            .and_then(|e| e.as_str())
            .ok_or_else(|| EstimatorError::Format(format!("{} has no estimator field", path.display())))?;
        self.load(name, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn view() -> TrainingView {
        let rows: Vec<[f64; 2]> = (0..20).map(|i| [i as f64 / 10.0, (i % 2) as f64]).collect();
        TrainingView {
            x: Matrix::from_rows(&rows),
            y: (0..20).map(|i| (i % 2) as f64).collect(),
            sources: vec![],
        }
    }

    fn cfg() -> EstimatorConfig {
        let mut c = EstimatorConfig::default();
        c.baseline.epochs = 5;
        c.gp.max_iters = 20;
        c
    }

    #[test]
    fn registry_trains_and_reloads_every_kind() {
        let reg = EstimatorRegistry::default();
        assert_eq!(reg.names(), vec!["gp", "lr", "mlp"]);
        let dir = tempfile::tempdir().unwrap();
        let o = Observation(vec![0.3, 1.0]);
        for name in reg.names() {
            let est = reg.train(name, &view(), &cfg()).unwrap();
            assert_eq!(est.name(), name);
            let p = est.predict(&o).unwrap();
            if name != "gp" {
                assert_eq!(p.sigma, 0.0);
            }
            let path = dir.path().join(format!("{name}.json"));
            est.save(&path).unwrap();
            let back = reg.load_any(&path).unwrap();
            assert_eq!(back.name(), name);
            assert_eq!(back.predict(&o).unwrap(), p);
        }
    }

    #[test]
    fn unknown_name_lists_known() {
        let reg = EstimatorRegistry::default();
        let err = reg.train("svm", &view(), &cfg()).err().unwrap().to_string();
        assert!(err.contains("svm") && err.contains("gp"));
    }
}
