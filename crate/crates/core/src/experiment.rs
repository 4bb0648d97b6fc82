//! Synthetic two-domain adaptation experiment.
//!
//! Source samples and target scans are drawn from the same street-scene
//! family; the source rendering carries a per-channel affine shift. The
//! experiment trains from one initialisation under four loss settings
//! (source only, scene alignment only, instance alignment only, both),
//! fine-tunes the full model on target priors, and scores every stage by
//! per-point mIoU on held-out labelled target scans.

use std::io::Write;

use crate::dataio::ClassTaxonomy;
use crate::evaluation::IouReport;
use crate::preseg::{presegment, PresegConfig};
use crate::projection::build_range_image;
use crate::synth::{generate_scan, generate_source, BeamModel, DomainShift, SceneFamily};
use crate::training::{
    discriminator_balanced_accuracy, evaluate, EvalScan, SourceExample, StepMetrics, TargetExample, TrainConfig, TrainError, Trainer,
};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub family: SceneFamily,
    pub source_shift: DomainShift,
    pub n_source: usize,
    pub n_target: usize,
    /// Held-out labelled target scans for mIoU.
    pub n_eval: usize,
    /// Held-out source samples and target scans for the discriminator test.
    pub n_holdout: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub steps: usize,
    pub fine_tune_steps: usize,
    pub preseg: PresegConfig,
    /// Also run the source-only, scene-only and instance-only settings.
    pub ablations: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunResult {
    pub name: String,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunResult>,
    /// Main discriminator balanced accuracy after full alignment.
    pub disc_balanced_accuracy: f64,
}

impl ExperimentReport {
    pub fn miou(&self, name: &str) -> Option<f64> {
        self.runs.iter().find(|r| r.name == name).map(|r| r.miou)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("data generation: {0}")]
    Data(String),
    #[error("metrics log: {0}")]
    Io(#[from] std::io::Error),
}

/// All prepared data for one experiment.
pub struct Dataset {
    pub source: Vec<SourceExample>,
    pub target: Vec<TargetExample>,
    pub eval: Vec<EvalScan>,
    pub holdout_source: Vec<SourceExample>,
    pub holdout_target: Vec<TargetExample>,
}

// disjoint seed ranges for the data splits
const SOURCE_BASE: u64 = 1 << 20;
const TARGET_BASE: u64 = 2 << 20;
const EVAL_BASE: u64 = 3 << 20;
const HOLD_SOURCE_BASE: u64 = 4 << 20;
const HOLD_TARGET_BASE: u64 = 5 << 20;

fn target_scan(cfg: &ExperimentConfig, seed: u64) -> Result<EvalScan, ExperimentError> {
    let spec = cfg.family.sample(seed);
    let scan = generate_scan(&spec, seed).map_err(|e| ExperimentError::Data(e.to_string()))?;
    let mut pre = cfg.preseg;
    pre.ransac.seed = seed;
    let (_, map) = presegment(&scan.cloud, &pre).map_err(|e| ExperimentError::Data(e.to_string()))?;
    let proj = cfg.family.beams.projection();
    let image = build_range_image(&scan.cloud, Some(&map), &proj);
    let example = TargetExample::new(&image, &map, cfg.train.range_scale);
    Ok(EvalScan {
        example,
        image,
        cloud: scan.cloud,
    })
}

fn source_sample(cfg: &ExperimentConfig, taxonomy: &ClassTaxonomy, seed: u64) -> Result<SourceExample, ExperimentError> {
    let mut spec = cfg.family.sample(seed);
    spec.shift = cfg.source_shift;
    let s = generate_source(&spec, seed).map_err(|e| ExperimentError::Data(e.to_string()))?;
    Ok(SourceExample::new(&s, taxonomy, cfg.train.range_scale))
}

impl Dataset {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        let tax = ClassTaxonomy::standard();
        let base = cfg.seed.wrapping_mul(0x9E37_79B9);
        let src = |b: u64, n: usize| -> Result<Vec<SourceExample>, ExperimentError> {
            (0..n as u64).map(|i| source_sample(cfg, &tax, base.wrapping_add(b + i))).collect()
        };
        let tgt = |b: u64, n: usize| -> Result<Vec<EvalScan>, ExperimentError> {
            (0..n as u64).map(|i| target_scan(cfg, base.wrapping_add(b + i))).collect()
        };
        Ok(Self {
            source: src(SOURCE_BASE, cfg.n_source)?,
            target: tgt(TARGET_BASE, cfg.n_target)?.into_iter().map(|s| s.example).collect(),
            eval: tgt(EVAL_BASE, cfg.n_eval)?,
            holdout_source: src(HOLD_SOURCE_BASE, cfg.n_holdout)?,
            holdout_target: tgt(HOLD_TARGET_BASE, cfg.n_holdout)?.into_iter().map(|s| s.example).collect(),
        })
    }
}

#[derive(serde::Serialize)]
struct StepLine<'a> {
    run: &'a str,
    #[serde(flatten)]
    metrics: &'a StepMetrics,
}

#[derive(serde::Serialize)]
struct ResultLine<'a> {
    run: &'a str,
    result: &'a RunResult,
}

fn score(name: &str, trainer: &Trainer, data: &Dataset, cfg: &ExperimentConfig) -> Result<RunResult, ExperimentError> {
    let cm = evaluate(trainer, &data.eval, &cfg.family.beams.projection())?;
    let IouReport { per_class, miou } = cm.miou().map_err(|e| ExperimentError::Data(e.to_string()))?;
    Ok(RunResult {
        name: name.to_string(),
        miou,
        per_class,
    })
}

fn adapt(name: &str, cfg: &ExperimentConfig, train: TrainConfig, data: &Dataset, log: &mut dyn Write) -> Result<Trainer, ExperimentError> {
    let mut trainer = Trainer::new(cfg.model, train);
    for step in 0..cfg.steps {
        let s = &data.source[step % data.source.len()];
        let t = &data.target[step % data.target.len()];
        let m = trainer.train_step(s, t)?;
        writeln!(log, "{}", serde_json::to_string(&StepLine { run: name, metrics: &m }).expect("serialize"))?;
    }
    Ok(trainer)
}

/// Run the experiment, writing one JSON line per step and per result.
pub fn run_experiment(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<ExperimentReport, ExperimentError> {
    let data = Dataset::generate(cfg)?;
    run_on(cfg, &data, log)
}

pub fn run_on(cfg: &ExperimentConfig, data: &Dataset, log: &mut dyn Write) -> Result<ExperimentReport, ExperimentError> {
    let mut runs = Vec::new();
    let mut settings = Vec::new();
    if cfg.ablations {
        settings.push(("source_only", 0.0, 0.0));
        settings.push(("sa_only", cfg.train.lambda_sa, 0.0));
        settings.push(("ia_only", 0.0, cfg.train.lambda_ia));
    }
    settings.push(("full", cfg.train.lambda_sa, cfg.train.lambda_ia));
    let mut full = None;
    for (name, sa, ia) in settings {
        let train = TrainConfig {
            lambda_sa: sa,
            lambda_ia: ia,
            ..cfg.train
        };
        let trainer = adapt(name, cfg, train, data, log)?;
        let r = score(name, &trainer, data, cfg)?;
        writeln!(log, "{}", serde_json::to_string(&ResultLine { run: name, result: &r }).expect("serialize"))?;
        runs.push(r);
        if name == "full" {
            full = Some(trainer);
        }
    }
    let mut trainer = full.expect("full run is always present");
    let acc = discriminator_balanced_accuracy(&trainer, &data.holdout_source, &data.holdout_target)?;
    writeln!(log, "{{\"run\":\"full\",\"disc_balanced_accuracy\":{}}}", serde_json::to_string(&acc).expect("serialize"))?;

    for step in 0..cfg.fine_tune_steps {
        let t = &data.target[step % data.target.len()];
        let m = trainer.fine_tune_step(t)?;
        writeln!(log, "{}", serde_json::to_string(&StepLine { run: "fine_tune", metrics: &m }).expect("serialize"))?;
    }
    let r = score("fine_tune", &trainer, data, cfg)?;
    writeln!(log, "{}", serde_json::to_string(&ResultLine { run: "fine_tune", result: &r }).expect("serialize"))?;
    runs.push(r);
    Ok(ExperimentReport {
        runs,
        disc_balanced_accuracy: acc,
    })
}

impl ExperimentConfig {
    /// The small setting used by the acceptance suite: 16×128 beams, the
    /// source's second range channel rescaled and offset.
    pub fn desk_scale(seed: u64) -> Self {
        let family = SceneFamily {
            beams: BeamModel {
                rings: 16,
                azimuths: 128,
                fov_up: 15f64.to_radians(),
                fov_down: 20f64.to_radians(),
                max_range: 40.0,
            },
            ..SceneFamily::default()
        };
        Self {
            seed,
            family,
            source_shift: DomainShift {
                scale: [1.0, 2.0, 1.0],
                offset: [0.0, 10.0, 0.0],
            },
            n_source: 200,
            n_target: 200,
            n_eval: 40,
            n_holdout: 40,
            model: ModelConfig {
                feature_dim: 8,
                knn: 4,
                enc1: 8,
                enc2: 16,
                disc_hidden: 256,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lambda_ce: 1.0,
                lambda_sa: 0.03,
                lambda_ia: 0.03,
                ce_literal_sum: false,
                lr_generator: 0.02,
                lr_discriminator: 3e-4,
                betas: (0.9, 0.999),
                eps: 1e-8,
                lr_fine_tune: 2.5e-4,
                range_scale: 20.0,
                seed,
            },
            steps: 1000,
            fine_tune_steps: 200,
            preseg: PresegConfig::default(),
            ablations: true,
        }
    }
}
