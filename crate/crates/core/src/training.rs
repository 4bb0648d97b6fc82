//! Alternating adversarial training, fine-tuning, optimizers and inference.
//!
//! One [`Trainer::train_step`] takes one source sample and one target scan:
//! a generator update (SGD) on `λ_CE·L_CE + λ_SA·L_SA,gen + λ_IA·L_IA,gen`
//! with the discriminators frozen, then a discriminator update (Adam) on
//! `L_SA,disc + L_IA,disc` using the features of the same forward pass,
//! detached from the generator.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::dataio::{ClassId, ClassTaxonomy, PointCloud, PriorCategory, SourceSample, CAR, IGNORE_ID};
use crate::evaluation::ConfusionMatrix;
use crate::losses::{self, CategoryTerm, LossError, PriorPixelSets, WeakLabelSpec};
use crate::model::{source_input, source_valid, DiscKind, Discriminators, GenOutput, Generator, ModelConfig, ModelError, NodeMasks};
use crate::params::{read_checkpoint, write_checkpoint, CheckpointError, ParamStore};
use crate::preseg::ComponentMap;
use crate::projection::{unproject_labels, ProjectionConfig, RangeImage};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite {what} at step {step} (log clamps so far: {clamps}, last grad norm: {grad_norm})")]
    NonFinite {
        what: String,
        step: usize,
        clamps: usize,
        grad_norm: f64,
    },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics log: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TrainConfig {
    pub lambda_ce: f64,
    pub lambda_sa: f64,
    pub lambda_ia: f64,
    pub ce_literal_sum: bool,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub lr_fine_tune: f64,
    pub range_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_sa: 0.001,
            lambda_ia: 0.001,
            ce_literal_sum: false,
            lr_generator: 2.5e-4,
            lr_discriminator: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            lr_fine_tune: 2.5e-4,
            range_scale: 50.0,
            seed: 0,
        }
    }
}

// ---- optimizers ------------------------------------------------------------------

fn check_shapes(params: &ParamStore, grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(TrainError::Optimizer(format!("{} grads for {} parameters", grads.len(), params.len())));
    }
    for (p, g) in params.tensors().iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Optimizer(format!("grad shape {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        check_shapes(params, grads)?;
        for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
            for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                *x -= self.lr * d;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, betas: (f64, f64), eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            betas,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        check_shapes(params, grads)?;
        if self.m.len() != grads.len() {
            return Err(TrainError::Optimizer("moment buffers do not match parameters".into()));
        }
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (x, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * d;
                v[j] = b2 * v[j] + (1.0 - b2) * d * d;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ---- prepared inputs ---------------------------------------------------------------

/// A source sample with everything a step needs precomputed.
#[derive(Debug, Clone)]
pub struct SourceExample {
    pub input: Tensor,
    pub masks: NodeMasks,
    pub labels: Vec<ClassId>,
    pub valid: Vec<bool>,
    pub priors: PriorPixelSets,
}

impl SourceExample {
    pub fn new(sample: &SourceSample, taxonomy: &ClassTaxonomy, range_scale: f64) -> Self {
        Self {
            input: source_input(sample, range_scale),
            masks: NodeMasks::from_label_regions(sample.height, sample.width, &sample.labels, taxonomy.ignore_id()),
            labels: sample.labels.clone(),
            valid: source_valid(sample),
            priors: PriorPixelSets::from_labels(&sample.labels, taxonomy),
        }
    }
}

/// A pre-segmented target range image.
#[derive(Debug, Clone)]
pub struct TargetExample {
    pub input: Tensor,
    pub masks: NodeMasks,
    pub valid: Vec<bool>,
    pub priors: PriorPixelSets,
}

impl TargetExample {
    pub fn new(img: &RangeImage, map: &ComponentMap, range_scale: f64) -> Self {
        Self {
            input: img.network_input(range_scale),
            masks: NodeMasks::from_range_image(img),
            valid: img.valid.clone(),
            priors: PriorPixelSets::from_range_image(img, map),
        }
    }
}

// ---- metrics -------------------------------------------------------------------------

/// One line of the metrics log.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct StepMetrics {
    pub stage: &'static str,
    pub step: usize,
    pub ce: f64,
    pub sa_gen: f64,
    pub sa_disc: f64,
    pub ia_gen: f64,
    pub ia_disc: f64,
    /// Main discriminator on source and target features (before its update).
    pub d_source: f64,
    pub d_target: f64,
    /// Per category (car, ground, wall): outputs and presence flags;
    /// outputs are 0.5 placeholders when a side is absent.
    pub d_cat_source: [f64; 3],
    pub d_cat_target: [f64; 3],
    pub y_source: [bool; 3],
    pub y_target: [bool; 3],
    pub weak_ground: f64,
    pub weak_wall: f64,
    pub car_ce: f64,
    pub gen_loss: f64,
    pub disc_loss: f64,
    pub gen_grad_norm: f64,
    pub disc_grad_norm: f64,
    pub clamps: usize,
}

impl StepMetrics {
    pub fn category_terms(&self) -> [CategoryTerm; 3] {
        std::array::from_fn(|e| CategoryTerm {
            d_source: self.d_cat_source[e],
            d_target: self.d_cat_target[e],
            y_source: self.y_source[e],
            y_target: self.y_target[e],
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

// ---- trainer ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminators: Discriminators,
    pub taxonomy: ClassTaxonomy,
    weak: WeakLabelSpec,
    adam: Adam,
    steps: usize,
    fine_tune_steps: usize,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(model, &mut rng);
        let discriminators = Discriminators::new(&model, &mut rng);
        let adam = Adam::new(&discriminators.params, config.lr_discriminator, config.betas, config.eps);
        let taxonomy = ClassTaxonomy::standard();
        Self {
            config,
            generator,
            discriminators,
            weak: WeakLabelSpec::from_taxonomy(&taxonomy),
            taxonomy,
            adam,
            steps: 0,
            fine_tune_steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn finite(&self, what: &str, v: f64, clamps: usize, grad_norm: f64) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(TrainError::NonFinite {
                what: what.to_string(),
                step: self.steps,
                clamps,
                grad_norm,
            })
        }
    }

    pub fn train_step(&mut self, src: &SourceExample, tgt: &TargetExample) -> Result<StepMetrics> {
        let mut m = StepMetrics {
            stage: "adapt",
            step: self.steps,
            ..StepMetrics::default()
        };
        let (fs, ft) = self.generator_step(src, tgt, &mut m)?;
        self.discriminator_step(src, tgt, fs, ft, &mut m)?;
        self.steps += 1;
        Ok(m)
    }

    /// Generator update with the discriminators frozen. Returns the source
    /// and target features `F` computed before the update.
    pub fn generator_step(&mut self, src: &SourceExample, tgt: &TargetExample, m: &mut StepMetrics) -> Result<(Tensor, Tensor)> {
        let cfg = self.config;
        let mut g = Graph::new();
        let gb = g.bind(&self.generator.params, true);
        let db = g.bind(&self.discriminators.params, false);
        let out_s = self.generator.forward(&mut g, &gb, &src.input, &src.masks)?;
        let out_t = self.generator.forward(&mut g, &gb, &tgt.input, &tgt.masks)?;
        let mut terms: Vec<Var> = Vec::new();
        if let Some(ce) = losses::ce_loss(&mut g, out_s.probs, &src.labels, IGNORE_ID, cfg.ce_literal_sum)? {
            m.ce = g.value(ce).item();
            terms.push(g.scale(ce, cfg.lambda_ce)?);
        }
        if cfg.lambda_sa > 0.0 {
            if let Some(dt) = self.discriminators.discriminate(&mut g, &db, DiscKind::Main, out_t.features, &tgt.valid)? {
                let l = losses::scene_gen_loss(&mut g, dt)?;
                terms.push(g.scale(l, cfg.lambda_sa)?);
            }
        }
        if cfg.lambda_ia > 0.0 {
            for e in PriorCategory::ALL {
                let px = tgt.priors.get(e);
                if let Some(dt) = self.discriminators.discriminate(&mut g, &db, DiscKind::Category(e), out_t.features, px)? {
                    let l = losses::neg_log(&mut g, dt)?;
                    terms.push(g.scale(l, cfg.lambda_ia)?);
                }
            }
        }
        if let Some(loss) = sum_terms(&mut g, &terms)? {
            m.gen_loss = g.value(loss).item();
            g.backward(loss)?;
            let grads = g.grads_of(&gb);
            m.gen_grad_norm = grad_norm(&grads);
            self.finite("generator loss", m.gen_loss, g.clamp_count(), m.gen_grad_norm)?;
            self.finite("generator gradient", m.gen_grad_norm, g.clamp_count(), m.gen_grad_norm)?;
            Sgd { lr: cfg.lr_generator }.step(&mut self.generator.params, &grads)?;
        }
        m.clamps = g.clamp_count();
        Ok((g.value(out_s.features).clone(), g.value(out_t.features).clone()))
    }

    /// Discriminator update on detached features, generator frozen.
    pub fn discriminator_step(&mut self, src: &SourceExample, tgt: &TargetExample, fs: Tensor, ft: Tensor, m: &mut StepMetrics) -> Result<()> {
        let mut g = Graph::new();
        let db = g.bind(&self.discriminators.params, true);
        let fs = g.constant(fs);
        let ft = g.constant(ft);
        let mut terms = Vec::new();
        let d = &self.discriminators;
        let ds = d.discriminate(&mut g, &db, DiscKind::Main, fs, &src.valid)?;
        let dt = d.discriminate(&mut g, &db, DiscKind::Main, ft, &tgt.valid)?;
        if let (Some(ds), Some(dt)) = (ds, dt) {
            m.d_source = g.value(ds).item();
            m.d_target = g.value(dt).item();
            let gen_part = losses::scene_gen_loss(&mut g, dt)?;
            m.sa_gen = g.value(gen_part).item();
            let l = losses::scene_disc_loss(&mut g, ds, dt)?;
            m.sa_disc = g.value(l).item();
            terms.push(l);
        }
        for e in PriorCategory::ALL {
            let i = e.index();
            m.d_cat_source[i] = 0.5;
            m.d_cat_target[i] = 0.5;
            if let Some(ds) = d.discriminate(&mut g, &db, DiscKind::Category(e), fs, src.priors.get(e))? {
                m.y_source[i] = true;
                m.d_cat_source[i] = g.value(ds).item();
                let l = losses::neg_log(&mut g, ds)?;
                m.ia_disc += g.value(l).item();
                terms.push(l);
            }
            if let Some(dt) = d.discriminate(&mut g, &db, DiscKind::Category(e), ft, tgt.priors.get(e))? {
                m.y_target[i] = true;
                m.d_cat_target[i] = g.value(dt).item();
                let gen_part = losses::neg_log(&mut g, dt)?;
                m.ia_gen += g.value(gen_part).item();
                let l = losses::neg_log_one_minus(&mut g, dt)?;
                m.ia_disc += g.value(l).item();
                terms.push(l);
            }
        }
        if let Some(loss) = sum_terms(&mut g, &terms)? {
            m.disc_loss = g.value(loss).item();
            g.backward(loss)?;
            let grads = g.grads_of(&db);
            m.disc_grad_norm = grad_norm(&grads);
            self.finite("discriminator loss", m.disc_loss, g.clamp_count(), m.disc_grad_norm)?;
            self.adam.step(&mut self.discriminators.params, &grads)?;
        }
        m.clamps += g.clamp_count();
        Ok(())
    }

    /// Generator update on target priors only: weak labels on ground and
    /// wall pixels plus cross-entropy towards car on car pixels.
    pub fn fine_tune_step(&mut self, tgt: &TargetExample) -> Result<StepMetrics> {
        let mut m = StepMetrics {
            stage: "fine_tune",
            step: self.fine_tune_steps,
            ..StepMetrics::default()
        };
        let mut g = Graph::new();
        let gb = g.bind(&self.generator.params, true);
        let out = self.generator.forward(&mut g, &gb, &tgt.input, &tgt.masks)?;
        let mut terms = Vec::new();
        for (e, slot) in [(PriorCategory::Ground, &mut m.weak_ground), (PriorCategory::Wall, &mut m.weak_wall)] {
            if let Some(l) = losses::weak_label_loss(&mut g, out.probs, tgt.priors.get(e), &self.weak, e)? {
                *slot = g.value(l).item();
                terms.push(l);
            }
        }
        let car_labels: Vec<ClassId> = tgt
            .priors
            .get(PriorCategory::Car)
            .iter()
            .map(|&c| if c { CAR } else { IGNORE_ID })
            .collect();
        if let Some(l) = losses::ce_loss(&mut g, out.probs, &car_labels, IGNORE_ID, false)? {
            m.car_ce = g.value(l).item();
            terms.push(l);
        }
        if let Some(loss) = sum_terms(&mut g, &terms)? {
            m.gen_loss = g.value(loss).item();
            g.backward(loss)?;
            let grads = g.grads_of(&gb);
            m.gen_grad_norm = grad_norm(&grads);
            self.finite("fine-tune loss", m.gen_loss, g.clamp_count(), m.gen_grad_norm)?;
            Sgd { lr: self.config.lr_fine_tune }.step(&mut self.generator.params, &grads)?;
        }
        m.clamps = g.clamp_count();
        self.fine_tune_steps += 1;
        Ok(m)
    }

    /// Generator forward with frozen parameters.
    pub fn infer(&self, input: &Tensor, masks: &NodeMasks) -> Result<(Graph, GenOutput)> {
        let mut g = Graph::new();
        let gb = g.bind(&self.generator.params, false);
        let out = self.generator.forward(&mut g, &gb, input, masks)?;
        Ok((g, out))
    }

    /// Per-pixel argmax classes.
    pub fn predict(&self, input: &Tensor, masks: &NodeMasks) -> Result<Vec<ClassId>> {
        let (g, out) = self.infer(input, masks)?;
        Ok(argmax_rows(g.value(out.probs)))
    }

    /// Main discriminator output on a feature map restricted to `valid`.
    pub fn main_discriminator(&self, input: &Tensor, masks: &NodeMasks, valid: &[bool]) -> Result<Option<f64>> {
        let (mut g, out) = self.infer(input, masks)?;
        let db = g.bind(&self.discriminators.params, false);
        let d = self.discriminators.discriminate(&mut g, &db, DiscKind::Main, out.features, valid)?;
        Ok(d.map(|d| g.value(d).item()))
    }

    /// Per-point predictions for a scan via its range image.
    pub fn predict_points(&self, tgt: &TargetExample, img: &RangeImage, cloud: &PointCloud, proj: &ProjectionConfig) -> Result<Vec<ClassId>> {
        let pixels = self.predict(&tgt.input, &tgt.masks)?;
        Ok(unproject_labels(img, &pixels, cloud, proj, IGNORE_ID))
    }

    pub fn save(&self, w: impl Write) -> Result<()> {
        write_checkpoint(w, &[("gen", &self.generator.params), ("disc", &self.discriminators.params)])?;
        Ok(())
    }

    pub fn load(&mut self, r: impl std::io::Read) -> Result<()> {
        read_checkpoint(r, &mut [("gen", &mut self.generator.params), ("disc", &mut self.discriminators.params)])?;
        Ok(())
    }
}

fn sum_terms(g: &mut Graph, terms: &[Var]) -> Result<Option<Var>> {
    let mut it = terms.iter();
    let Some(&first) = it.next() else { return Ok(None) };
    let mut acc = first;
    for &t in it {
        acc = g.add(acc, t)?;
    }
    Ok(Some(acc))
}

/// Row-wise argmax of `[n, C]`; ties resolve to the lower class.
pub fn argmax_rows(probs: &Tensor) -> Vec<ClassId> {
    let c = probs.shape()[1];
    probs
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// A labelled target scan ready for evaluation.
#[derive(Debug, Clone)]
pub struct EvalScan {
    pub example: TargetExample,
    pub image: RangeImage,
    pub cloud: PointCloud,
}

/// Confusion matrix of per-point predictions over labelled scans.
pub fn evaluate(trainer: &Trainer, scans: &[EvalScan], proj: &ProjectionConfig) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::for_taxonomy(&trainer.taxonomy);
    for s in scans {
        let pred = trainer.predict_points(&s.example, &s.image, &s.cloud, proj)?;
        let truth = s.cloud.labels.as_deref().unwrap_or(&[]);
        if truth.len() == pred.len() {
            cm.accumulate(truth, &pred).expect("labels validated");
        }
    }
    Ok(cm)
}

/// Balanced accuracy of the main discriminator (source = 1, target = 0,
/// threshold 0.5).
pub fn discriminator_balanced_accuracy(trainer: &Trainer, source: &[SourceExample], target: &[TargetExample]) -> Result<f64> {
    let mut hit_s = (0usize, 0usize);
    for s in source {
        if let Some(d) = trainer.main_discriminator(&s.input, &s.masks, &s.valid)? {
            hit_s.0 += (d > 0.5) as usize;
            hit_s.1 += 1;
        }
    }
    let mut hit_t = (0usize, 0usize);
    for t in target {
        if let Some(d) = trainer.main_discriminator(&t.input, &t.masks, &t.valid)? {
            hit_t.0 += (d < 0.5) as usize;
            hit_t.1 += 1;
        }
    }
    let rate = |(h, n): (usize, usize)| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(0.5 * (rate(hit_s) + rate(hit_t)))
}
