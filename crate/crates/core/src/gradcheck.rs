//! Finite-difference checks of every training loss through the whole
//! network (extractor, nodes, EdgeConv, expansion, head, discriminators)
//! with respect to model parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_many, Bound, GradCheckReport, Graph, Tensor, TensorError, Var};
use crate::dataio::{ClassTaxonomy, PriorCategory, IGNORE_ID, NUM_CLASSES};
use crate::losses::{self, PriorPixelSets, WeakLabelSpec};
use crate::model::{DiscKind, Discriminators, Generator, ModelConfig, NodeMasks};

pub const LOSS_NAMES: [&str; 4] = ["ce", "scene_adv", "instance_adv", "weak_label"];

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub loss: &'static str,
    pub report: GradCheckReport,
}

/// A random source/target pair on a small image.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub generator: Generator,
    pub discriminators: Discriminators,
    pub source_input: Tensor,
    pub source_labels: Vec<usize>,
    pub source_masks: NodeMasks,
    pub source_valid: Vec<bool>,
    pub source_priors: PriorPixelSets,
    pub target_input: Tensor,
    pub target_masks: NodeMasks,
    pub target_valid: Vec<bool>,
    pub target_priors: PriorPixelSets,
}

impl Fixture {
    /// `size × size` images (a multiple of 4), blocky random labels and
    /// components.
    pub fn random(seed: u64, size: usize, model: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(model, &mut rng);
        let discriminators = Discriminators::new(&model, &mut rng);
        let n = size * size;
        let input = |rng: &mut ChaCha8Rng| {
            Tensor::new(vec![3, size, size], (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect()).expect("shape")
        };
        let source_input = input(&mut rng);
        let target_input = input(&mut rng);
        let blocks = size / 2;
        let block_class: Vec<usize> = (0..blocks * blocks).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
        let block_comp: Vec<i64> = (0..blocks * blocks).map(|_| rng.random_range(0..4)).collect();
        let block = |k: usize| (k / size / 2) * blocks + (k % size) / 2;
        let source_labels: Vec<usize> = (0..n)
            .map(|k| if rng.random_bool(0.1) { IGNORE_ID } else { block_class[block(k)] })
            .collect();
        let target_valid: Vec<bool> = (0..n).map(|_| !rng.random_bool(0.1)).collect();
        let groups: Vec<i64> = (0..n).map(|k| if target_valid[k] { block_comp[block(k)] } else { -1 }).collect();
        // component 0 ground, 1 car, 2 wall, 3 unknown
        let category = |c: i64| match c {
            0 => Some(PriorCategory::Ground),
            1 => Some(PriorCategory::Car),
            2 => Some(PriorCategory::Wall),
            _ => None,
        };
        let target_priors = PriorPixelSets {
            sets: PriorCategory::ALL.map(|e| groups.iter().map(|&c| c >= 0 && category(c) == Some(e)).collect()),
        };
        let tax = ClassTaxonomy::standard();
        Self {
            source_masks: NodeMasks::from_label_regions(size, size, &source_labels, IGNORE_ID),
            source_valid: source_labels.iter().map(|&l| l != IGNORE_ID).collect(),
            source_priors: PriorPixelSets::from_labels(&source_labels, &tax),
            source_labels,
            source_input,
            target_input,
            target_masks: NodeMasks::from_groups(size, size, &groups),
            target_valid,
            target_priors,
            generator,
            discriminators,
        }
    }

    /// All generator tensors followed by all discriminator tensors.
    pub fn parameters(&self) -> Vec<Tensor> {
        let mut v = self.generator.params.tensors().to_vec();
        v.extend_from_slice(self.discriminators.params.tensors());
        v
    }

    fn split(&self, vars: &[Var]) -> (Bound, Bound) {
        let ng = self.generator.params.len();
        (Bound::from_vars(vars[..ng].to_vec()), Bound::from_vars(vars[ng..].to_vec()))
    }

    /// Evaluate loss `name` with parameters bound to `vars`.
    pub fn loss(&self, name: &str, g: &mut Graph, vars: &[Var]) -> Result<Var, TensorError> {
        let (gb, db) = self.split(vars);
        let gen = &self.generator;
        let disc = &self.discriminators;
        let wrap = |e: &dyn std::fmt::Display| TensorError::Invalid {
            op: "loss",
            msg: e.to_string(),
        };
        let fwd_s = |g: &mut Graph| gen.forward(g, &gb, &self.source_input, &self.source_masks).map_err(|e| wrap(&e));
        let fwd_t = |g: &mut Graph| gen.forward(g, &gb, &self.target_input, &self.target_masks).map_err(|e| wrap(&e));
        let present = |x: Option<Var>| x.ok_or_else(|| wrap(&"category absent"));
        let mut terms = Vec::new();
        match name {
            "ce" => {
                let s = fwd_s(g)?;
                terms.push(present(
                    losses::ce_loss(g, s.probs, &self.source_labels, IGNORE_ID, false).map_err(|e| wrap(&e))?,
                )?);
            }
            "scene_adv" => {
                let s = fwd_s(g)?;
                let t = fwd_t(g)?;
                let ds = present(disc.discriminate(g, &db, DiscKind::Main, s.features, &self.source_valid).map_err(|e| wrap(&e))?)?;
                let dt = present(disc.discriminate(g, &db, DiscKind::Main, t.features, &self.target_valid).map_err(|e| wrap(&e))?)?;
                terms.push(losses::scene_gen_loss(g, dt).map_err(|e| wrap(&e))?);
                terms.push(losses::scene_disc_loss(g, ds, dt).map_err(|e| wrap(&e))?);
            }
            "instance_adv" => {
                let s = fwd_s(g)?;
                let t = fwd_t(g)?;
                for e in PriorCategory::ALL {
                    let k = DiscKind::Category(e);
                    if let Some(dt) = disc.discriminate(g, &db, k, t.features, self.target_priors.get(e)).map_err(|e| wrap(&e))? {
                        terms.push(losses::neg_log(g, dt).map_err(|e| wrap(&e))?);
                        terms.push(losses::neg_log_one_minus(g, dt).map_err(|e| wrap(&e))?);
                    }
                    if let Some(ds) = disc.discriminate(g, &db, k, s.features, self.source_priors.get(e)).map_err(|e| wrap(&e))? {
                        terms.push(losses::neg_log(g, ds).map_err(|e| wrap(&e))?);
                    }
                }
            }
            "weak_label" => {
                let t = fwd_t(g)?;
                let spec = WeakLabelSpec::from_taxonomy(&ClassTaxonomy::standard());
                for e in [PriorCategory::Ground, PriorCategory::Wall] {
                    if let Some(l) = losses::weak_label_loss(g, t.probs, self.target_priors.get(e), &spec, e).map_err(|e| wrap(&e))? {
                        terms.push(l);
                    }
                }
            }
            other => return Err(wrap(&format!("unknown loss {other}"))),
        }
        let mut acc = *terms.first().ok_or_else(|| wrap(&"no loss terms"))?;
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(acc)
    }
}

/// Coordinates to probe: `per_tensor` from every parameter tensor.
pub fn sample_coords(params: &[Tensor], per_tensor: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut coords = Vec::new();
    for (t, p) in params.iter().enumerate() {
        let n = p.numel();
        let k = per_tensor.min(n);
        for j in rand::seq::index::sample(rng, n, k) {
            coords.push((t, j));
        }
    }
    coords
}

/// Check every loss on one random fixture.
pub fn check_all(seed: u64, size: usize, model: ModelConfig, per_tensor: usize, h: f64, tol: f64) -> Result<Vec<LossCheck>, TensorError> {
    let fx = Fixture::random(seed, size, model);
    let params = fx.parameters();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let mut out = Vec::new();
    for name in LOSS_NAMES {
        let coords = sample_coords(&params, per_tensor, &mut rng);
        let report = grad_check_many(|g, vs| fx.loss(name, g, vs), &params, &coords, h, tol)?;
        out.push(LossCheck { loss: name, report });
    }
    Ok(out)
}
