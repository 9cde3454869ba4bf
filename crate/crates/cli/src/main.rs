//! `riskwatch`: batch entry points over a data directory.
//!
//! Layout under `--data-dir`:
//! - `episodes/{id}/`: generated or recorded episodes
//! - `checkpoints/{skill}/encoder.json`: trained autoencoder
//! - `checkpoints/{skill}/{estimator}/`: encoder + estimator bundle
//! - `reports/{skill}/...`: evaluation, aggregation and sweep reports

mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use riskwatch_core::dataset::{EpisodeRecord, EpisodeStore};
use riskwatch_core::encoder::AeModel;
use riskwatch_core::estimator::EstimatorRegistry;
use riskwatch_core::evalharness::{
    aggregation_study, deviation_sweep, encode_episodes, infer, report_metrics, write_report, Report,
};
use riskwatch_core::pipeline::{
    fault_free, load_bundle, save_bundle, test_episodes, train_encoder, train_estimator, training_episodes,
    PipelineConfig,
};
use riskwatch_core::riskcore::RiskModel;
use riskwatch_core::synthgen::{generate_suite, rotation_sweep, Profile, SWEEP_ANGLES};

use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "riskwatch", version, about = "Risk monitoring for robot skill executions")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Root of episodes, checkpoints and reports.
    #[arg(long, global = true, env = "RISKWATCH_DATA_DIR", default_value = "riskwatch-data")]
    data_dir: PathBuf,
    /// JSON training configuration; flags override its fields.
    #[arg(long, global = true, env = "RISKWATCH_CONFIG")]
    config: Option<PathBuf>,
    /// Risk threshold: frames with r > tau are flagged.
    #[arg(long, global = true, env = "RISKWATCH_TAU")]
    tau: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Seed for every random choice during training.
    #[arg(long, env = "RISKWATCH_SEED")]
    seed: u64,
    /// Autoencoder epochs.
    #[arg(long, env = "RISKWATCH_EPOCHS")]
    epochs: Option<usize>,
    /// Autoencoder learning rate.
    #[arg(long, env = "RISKWATCH_LR")]
    lr: Option<f64>,
    /// Cap on encoder training frames (0 keeps all).
    #[arg(long)]
    max_frames: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic episode suite into the episode store.
    Generate {
        /// `smoke` or `paper_mini`.
        #[arg(long, env = "RISKWATCH_PROFILE", default_value = "smoke")]
        profile: String,
        #[arg(long, env = "RISKWATCH_SEED")]
        seed: u64,
    },
    /// Train the autoencoder for each skill.
    TrainEncoder {
        /// Skills to train; all skills in the store when omitted.
        #[arg(long)]
        skill: Vec<String>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Fit a risk estimator on a trained encoder's latents.
    TrainRisk {
        /// Skills to train; all skills in the store when omitted.
        #[arg(long)]
        skill: Vec<String>,
        /// `gp`, `mlp` or `lr`.
        #[arg(long, default_value = "gp")]
        estimator: String,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score the test episodes and write reports.
    Evaluate {
        /// Skills to evaluate; all skills in the store when omitted.
        #[arg(long)]
        skill: Vec<String>,
        /// Which trained bundle to load: `gp`, `mlp` or `lr`.
        #[arg(long, default_value = "gp")]
        estimator: String,
        /// Report directory; defaults to `reports/{skill}/{estimator}` in the data dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean risk against peg rotation on generated pick-peg episodes.
    Sweep {
        /// Estimator fitted on the fault-free pick-peg training episodes.
        #[arg(long, default_value = "gp")]
        estimator: String,
        #[command(flatten)]
        train: TrainArgs,
        /// Report directory; defaults to `reports/pick_peg/sweep_{estimator}`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy as training episodes are added one at a time.
    Aggregate {
        #[arg(long, default_value = "pick_peg")]
        skill: String,
        #[arg(long, default_value = "gp")]
        estimator: String,
        /// Largest number of training episodes (demonstration first).
        #[arg(long, default_value_t = 4)]
        max_episodes: usize,
        #[command(flatten)]
        train: TrainArgs,
        /// Report directory; defaults to `reports/{skill}/aggregate_{estimator}`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score one stored episode and print one JSON verdict per line.
    Replay {
        /// Episode id in the store.
        #[arg(long)]
        episode: String,
        /// Which trained bundle of the episode's skill to load.
        #[arg(long, default_value = "gp")]
        estimator: String,
        /// Write the verdicts here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP session server.
    Serve {
        #[arg(long, env = "RISKWATCH_HOST", default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "RISKWATCH_PORT", default_value_t = riskwatch_service::DEFAULT_PORT)]
        port: u16,
        /// Estimator for imported checkpoints.
        #[arg(long, default_value = "gp")]
        estimator: String,
        /// Autoencoder epochs for retrain jobs that fine-tune the encoder.
        #[arg(long, env = "RISKWATCH_EPOCHS")]
        epochs: Option<usize>,
        #[arg(long, env = "RISKWATCH_LR")]
        lr: Option<f64>,
    },
}

struct Ctx {
    data: PathBuf,
    cfg: PipelineConfig,
    estimators: EstimatorRegistry,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| CliError::Config {
                    path: p.clone(),
                    reason: e.to_string(),
                })?;
                let bad = |e: serde_json::Error| CliError::Config {
                    path: p.clone(),
                    reason: e.to_string(),
                };
                let user: serde_json::Value = serde_json::from_slice(&bytes).map_err(bad)?;
                let mut merged = serde_json::to_value(PipelineConfig::default()).expect("config serializes");
                overlay(&mut merged, user);
                serde_json::from_value(merged).map_err(bad)?
            }
            None => PipelineConfig::default(),
        };
        if let Some(tau) = common.tau {
            if !(0.0..=1.0).contains(&tau) {
                return Err(CliError::Usage(format!("tau {tau} outside [0, 1]")));
            }
            cfg.tau = tau;
        }
        Ok(Ctx {
            data: common.data_dir.clone(),
            cfg,
            estimators: EstimatorRegistry::default(),
        })
    }

    fn apply(&mut self, t: &TrainArgs) {
        self.cfg.ae.seed = t.seed;
        self.cfg.estimator.baseline.seed = t.seed;
        if let Some(e) = t.epochs {
            self.cfg.ae.epochs = e;
        }
        if let Some(lr) = t.lr {
            self.cfg.ae.lr = lr;
        }
        if let Some(m) = t.max_frames {
            self.cfg.encoder_frames = m;
        }
    }

    fn store(&self) -> Result<EpisodeStore> {
        Ok(EpisodeStore::open(self.data.join("episodes"))?)
    }

    fn episodes(&self) -> Result<Vec<EpisodeRecord>> {
        let eps = self.store()?.load_all()?;
        if eps.is_empty() {
            return Err(CliError::NoEpisodes(self.data.join("episodes")));
        }
        Ok(eps)
    }

    fn skills(&self, requested: &[String], episodes: &[EpisodeRecord]) -> Result<Vec<String>> {
        let mut known: Vec<String> = episodes.iter().map(|e| e.skill.clone()).collect();
        known.sort();
        known.dedup();
        if requested.is_empty() {
            return Ok(known);
        }
        for s in requested {
            if !known.contains(s) {
                return Err(CliError::UnknownSkill(s.clone()));
            }
        }
        Ok(requested.to_vec())
    }

    fn encoder_path(&self, skill: &str) -> PathBuf {
        self.data.join("checkpoints").join(skill).join("encoder.json")
    }

    fn bundle_dir(&self, skill: &str, estimator: &str) -> PathBuf {
        self.data.join("checkpoints").join(skill).join(estimator)
    }

    fn load_encoder(&self, skill: &str) -> Result<Arc<AeModel>> {
        let p = self.encoder_path(skill);
        if !p.is_file() {
            return Err(CliError::MissingCheckpoint(p));
        }
        Ok(Arc::new(AeModel::load(&p).map_err(|e| CliError::Checkpoint {
            path: p.clone(),
            reason: e.to_string(),
        })?))
    }

    fn load_model(&self, skill: &str, estimator: &str) -> Result<RiskModel> {
        self.estimators.get(estimator)?;
        let dir = self.bundle_dir(skill, estimator);
        if !dir.join(riskwatch_core::pipeline::BUNDLE_MANIFEST).is_file() {
            return Err(CliError::MissingCheckpoint(dir));
        }
        let (_, mut model) = load_bundle(&dir, &self.estimators)?;
        model.tau = self.cfg.tau;
        Ok(model)
    }

    fn report_dir(&self, out: &Option<PathBuf>, skill: &str, name: &str, multi: bool) -> PathBuf {
        match out {
            Some(o) if multi => o.join(skill),
            Some(o) => o.clone(),
            None => self.data.join("reports").join(skill).join(name),
        }
    }
}

/// Recursively replaces fields of `base` with those present in `user`, so a
/// partial config keeps every unspecified default, nested ones included.
fn overlay(base: &mut serde_json::Value, user: serde_json::Value) {
    match (base, user) {
        (serde_json::Value::Object(b), serde_json::Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, u) => *b = u,
    }
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut ctx = Ctx::new(&cli.common)?;
    match cli.command {
        Command::Generate { profile, seed } => {
            let profile = Profile::parse(&profile).map_err(|e| CliError::Usage(e.to_string()))?;
            let suite = generate_suite(profile, seed)?;
            let store = ctx.store()?;
            for ep in &suite {
                store.save(ep)?;
            }
            println!("generated {} episodes in {}", suite.len(), store.root().display());
        }
        Command::TrainEncoder { skill, train } => {
            ctx.apply(&train);
            let episodes = ctx.episodes()?;
            for s in ctx.skills(&skill, &episodes)? {
                let training = training_episodes(&episodes, &s);
                if training.is_empty() {
                    return Err(CliError::NoTrainingEpisodes(s));
                }
                let ae = train_encoder(&training, &ctx.cfg)?;
                let p = ctx.encoder_path(&s);
                std::fs::create_dir_all(p.parent().expect("encoder path has a parent")).map_err(|e| {
                    CliError::Io {
                        path: p.clone(),
                        reason: e.to_string(),
                    }
                })?;
                ae.save(&p).map_err(|e| CliError::Checkpoint {
                    path: p.clone(),
                    reason: e.to_string(),
                })?;
                println!(
                    "{s}: encoder trained on {} episodes, final loss {:.6}; wrote {}",
                    training.len(),
                    ae.loss_history.last().copied().unwrap_or(f64::NAN),
                    p.display()
                );
            }
        }
        Command::TrainRisk { skill, estimator, train } => {
            ctx.apply(&train);
            ctx.estimators.get(&estimator)?;
            let episodes = ctx.episodes()?;
            for s in ctx.skills(&skill, &episodes)? {
                let ae = ctx.load_encoder(&s)?;
                let training = training_episodes(&episodes, &s);
                if training.is_empty() {
                    return Err(CliError::NoTrainingEpisodes(s));
                }
                let est = train_estimator(&ae, &training, &estimator, &ctx.cfg, &ctx.estimators)?;
                let model = RiskModel {
                    ae,
                    estimator: Arc::from(est),
                    tau: ctx.cfg.tau,
                };
                let dir = ctx.bundle_dir(&s, &estimator);
                let ids: Vec<String> = training.iter().map(|e| e.episode_id.clone()).collect();
                save_bundle(&dir, &s, &model, &ids)?;
                println!("{s}: {estimator} trained on {} episodes; wrote {}", ids.len(), dir.display());
            }
        }
        Command::Evaluate { skill, estimator, out } => {
            let episodes = ctx.episodes()?;
            let skills = ctx.skills(&skill, &episodes)?;
            let multi = skills.len() > 1;
            for s in &skills {
                let model = ctx.load_model(s, &estimator)?;
                let tests = test_episodes(&episodes, s);
                let encoded = encode_episodes(&model.ae, &tests)?;
                let outputs = infer(&model, &encoded)?;
                let metrics = report_metrics(&outputs)?;
                println!(
                    "{s}: {estimator} seen accuracy {:.3}, novel recall {:.3}, npv {:.3}",
                    metrics.seen.ratios.accuracy.unwrap_or(f64::NAN),
                    metrics.novel.ratios.recall.unwrap_or(f64::NAN),
                    metrics.seen.ratios.npv.unwrap_or(f64::NAN),
                );
                let report = Report {
                    format_version: riskwatch_core::evalharness::REPORT_VERSION,
                    skill: s.clone(),
                    estimator: estimator.clone(),
                    metrics: Some(metrics),
                    curve: None,
                    sweep: None,
                };
                print_written(&write_report(&report, &ctx.report_dir(&out, s, &estimator, multi))?);
            }
        }
        Command::Sweep { estimator, train, out } => {
            ctx.apply(&train);
            ctx.estimators.get(&estimator)?;
            let skill = "pick_peg";
            let episodes = ctx.episodes()?;
            let ae = ctx.load_encoder(skill)?;
            let training = training_episodes(&episodes, skill);
            let clean = fault_free(&training);
            if clean.is_empty() {
                return Err(CliError::NoTrainingEpisodes(skill.into()));
            }
            let est = train_estimator(&ae, &clean, &estimator, &ctx.cfg, &ctx.estimators)?;
            let model = RiskModel {
                ae,
                estimator: Arc::from(est),
                tau: ctx.cfg.tau,
            };
            let sweep_eps = rotation_sweep(train.seed, &SWEEP_ANGLES)?;
            let pairs: Vec<(f64, &EpisodeRecord)> = SWEEP_ANGLES.iter().copied().zip(sweep_eps.iter()).collect();
            let sweep = deviation_sweep(&model, &pairs)?;
            for p in &sweep.points {
                println!("angle {:>4.0}: mean r {:.4}", p.angle, p.mean_r);
            }
            match sweep.crossing_angle {
                Some(a) => println!("crosses tau {} at {a}", model.tau),
                None => println!("never crosses tau {}", model.tau),
            }
            let report = Report {
                format_version: riskwatch_core::evalharness::REPORT_VERSION,
                skill: skill.into(),
                estimator: estimator.clone(),
                metrics: None,
                curve: None,
                sweep: Some(sweep),
            };
            print_written(&write_report(&report, &ctx.report_dir(&out, skill, &format!("sweep_{estimator}"), false))?);
        }
        Command::Aggregate {
            skill,
            estimator,
            max_episodes,
            train,
            out,
        } => {
            ctx.apply(&train);
            ctx.estimators.get(&estimator)?;
            let episodes = ctx.episodes()?;
            ctx.skills(std::slice::from_ref(&skill), &episodes)?;
            let ae = ctx.load_encoder(&skill)?;
            let training = training_episodes(&episodes, &skill);
            let tests = test_episodes(&episodes, &skill);
            let curve = aggregation_study(
                &skill,
                &ae,
                &training,
                &tests,
                max_episodes,
                &estimator,
                &ctx.cfg.estimator,
                ctx.cfg.tau,
            )?;
            for p in &curve.points {
                println!(
                    "k={}: accuracy {:.3}, recall {:.3}, novel recall {:.3}",
                    p.num_training_episodes, p.accuracy, p.recall, p.novel_recall
                );
            }
            let report = Report {
                format_version: riskwatch_core::evalharness::REPORT_VERSION,
                skill: skill.clone(),
                estimator: estimator.clone(),
                metrics: None,
                curve: Some(curve),
                sweep: None,
            };
            print_written(&write_report(
                &report,
                &ctx.report_dir(&out, &skill, &format!("aggregate_{estimator}"), false),
            )?);
        }
        Command::Replay { episode, estimator, out } => {
            let ep = ctx.store()?.load(&episode)?;
            let model = ctx.load_model(&ep.skill, &estimator)?;
            let verdicts = model.evaluate_episode(&ep.frames)?;
            let mut text = String::new();
            for v in &verdicts {
                text.push_str(&serde_json::to_string(v).expect("verdict serializes"));
                text.push('\n');
            }
            match out {
                Some(p) => write_file(&p, text.as_bytes())?,
                None => print!("{text}"),
            }
            let flagged = verdicts.iter().filter(|v| v.flag).count();
            eprintln!("{episode}: {} frames, {flagged} flagged", verdicts.len());
        }
        Command::Serve {
            host,
            port,
            estimator,
            epochs,
            lr,
        } => {
            if let Some(e) = epochs {
                ctx.cfg.ae.epochs = e;
            }
            if let Some(lr) = lr {
                ctx.cfg.ae.lr = lr;
            }
            let mut config = riskwatch_service::ServiceConfig::new(&ctx.data);
            config.host = host;
            config.port = port;
            config.tau = ctx.cfg.tau;
            config.estimator = estimator;
            config.pipeline = ctx.cfg.clone();
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io {
                path: ctx.data.clone(),
                reason: e.to_string(),
            })?;
            eprintln!("serving {} on {}:{}", ctx.data.display(), config.host, config.port);
            rt.block_on(riskwatch_service::serve(config))?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, data: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Io {
            path: parent.to_path_buf(),
            reason: e.to_string(),
        })?;
    }
    std::fs::write(path, data).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::from(e.exit_code())
        }
    }
}
