//! Training objectives: supervised cross-entropy, the scene and instance
//! adversarial losses split into generator and discriminator parts, and the
//! weak-label loss.
//!
//! Graph versions build differentiable scalars; the `*_losses` functions on
//! plain `f64` discriminator outputs are the closed forms used for
//! bookkeeping and identity checks.

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::dataio::{ClassId, ClassTaxonomy, PriorCategory};
use crate::preseg::ComponentMap;
use crate::projection::RangeImage;

/// Floor applied before every logarithm.
pub const P_MIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("discriminator output {value} outside (0, 1)")]
    OutOfRange { value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn check_prob(p: f64) -> Result<f64, LossError> {
    if p > 0.0 && p < 1.0 {
        Ok(p)
    } else {
        Err(LossError::OutOfRange { value: p })
    }
}

/// Pixels of each prior category in one image, indexed by
/// [`PriorCategory::index`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriorPixelSets {
    pub sets: [Vec<bool>; 3],
}

impl PriorPixelSets {
    pub fn get(&self, e: PriorCategory) -> &[bool] {
        &self.sets[e.index()]
    }

    /// `y^e`: whether category `e` has any pixel.
    pub fn present(&self, e: PriorCategory) -> bool {
        self.sets[e.index()].iter().any(|&p| p)
    }

    pub fn count(&self, e: PriorCategory) -> usize {
        self.sets[e.index()].iter().filter(|&&p| p).count()
    }

    /// Source side: ground-truth classes mapped to their prior category.
    pub fn from_labels(labels: &[ClassId], taxonomy: &ClassTaxonomy) -> Self {
        let sets = PriorCategory::ALL.map(|e| labels.iter().map(|&l| taxonomy.prior_of(l) == Some(e)).collect());
        Self { sets }
    }

    /// Target side: pixels whose pre-segmentation component carries tag `e`.
    pub fn from_range_image(img: &RangeImage, map: &ComponentMap) -> Self {
        let sets = PriorCategory::ALL.map(|e| {
            (0..img.len())
                .map(|k| {
                    img.valid[k]
                        && img.component_id[k] >= 0
                        && map.categories[img.component_id[k] as usize].prior() == Some(e)
                })
                .collect()
        });
        Self { sets }
    }
}

/// Allowed classes per prior category (`k_ic = 1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakLabelSpec {
    pub allowed: [Vec<ClassId>; 3],
    pub num_classes: usize,
}

impl WeakLabelSpec {
    pub fn from_taxonomy(t: &ClassTaxonomy) -> Self {
        Self {
            allowed: PriorCategory::ALL.map(|e| t.allowed(e).to_vec()),
            num_classes: t.num_classes(),
        }
    }

    /// 1 for forbidden classes of `e`, 0 for allowed.
    pub fn forbidden(&self, e: PriorCategory) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| if self.allowed[e.index()].contains(&c) { 0.0 } else { 1.0 })
            .collect()
    }
}

fn gather_rows(g: &mut Graph, probs: Var, rows: &[bool]) -> Result<Var, LossError> {
    Ok(g.gather_mask(probs, 0, rows)?)
}

/// Cross-entropy of `probs [HW, C]` against `labels` over the pixels where
/// `labels != ignore`. Normalized by the number of such pixels unless
/// `literal_sum`. `None` when no pixel is labelled.
pub fn ce_loss(g: &mut Graph, probs: Var, labels: &[ClassId], ignore: ClassId, literal_sum: bool) -> Result<Option<Var>, LossError> {
    let c = g.shape(probs)[1];
    if labels.len() != g.shape(probs)[0] {
        return Err(TensorError::Shape {
            op: "ce_loss",
            lhs: g.shape(probs).to_vec(),
            rhs: vec![labels.len()],
        }
        .into());
    }
    let valid: Vec<bool> = labels.iter().map(|&l| l != ignore).collect();
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Ok(None);
    }
    let mut onehot = vec![0.0; n * c];
    for (row, &l) in labels.iter().filter(|&&l| l != ignore).enumerate() {
        if l >= c {
            return Err(TensorError::Invalid {
                op: "ce_loss",
                msg: format!("label {} out of range for {} classes", l, c),
            }
            .into());
        }
        onehot[row * c + l] = 1.0;
    }
    let p = gather_rows(g, probs, &valid)?;
    let y = g.constant(Tensor::new(vec![n, c], onehot)?);
    let py = g.mul(p, y)?;
    // row sum = mean * C, then -log
    let pt = g.mean_pool(py, &[1])?;
    let pt = g.scale(pt, c as f64)?;
    let lp = g.log_clamped(pt, P_MIN)?;
    let total = if literal_sum { g.sum(lp)? } else { g.mean(lp)? };
    Ok(Some(g.neg(total)?))
}

/// Weak-label loss over the pixels `rows` of `probs [HW, C]`:
/// `-(1/n) sum log(1 - forbidden mass)`. `None` when `rows` is empty.
pub fn weak_label_loss(g: &mut Graph, probs: Var, rows: &[bool], spec: &WeakLabelSpec, e: PriorCategory) -> Result<Option<Var>, LossError> {
    let n = rows.iter().filter(|&&r| r).count();
    if n == 0 {
        return Ok(None);
    }
    let c = g.shape(probs)[1];
    let p = gather_rows(g, probs, rows)?;
    let k = g.constant(Tensor::new(vec![c], spec.forbidden(e))?);
    let masked = g.mul(p, k)?;
    let mass = g.mean_pool(masked, &[1])?;
    let mass = g.scale(mass, c as f64)?;
    let keep = g.one_minus(mass)?;
    let lp = g.log_clamped(keep, P_MIN)?;
    let m = g.mean(lp)?;
    Ok(Some(g.neg(m)?))
}

/// `-log(x)` with the usual floor.
pub fn neg_log(g: &mut Graph, x: Var) -> Result<Var, LossError> {
    let l = g.log_clamped(x, P_MIN)?;
    Ok(g.neg(l)?)
}

/// `-log(1 - x)` with the usual floor.
pub fn neg_log_one_minus(g: &mut Graph, x: Var) -> Result<Var, LossError> {
    let om = g.one_minus(x)?;
    neg_log(g, om)
}

/// Generator part of the scene loss, `-log D(F_T)`.
pub fn scene_gen_loss(g: &mut Graph, d_target: Var) -> Result<Var, LossError> {
    neg_log(g, d_target)
}

/// Discriminator part of the scene loss, `-log D(F_S) - log(1 - D(F_T))`.
pub fn scene_disc_loss(g: &mut Graph, d_source: Var, d_target: Var) -> Result<Var, LossError> {
    let a = neg_log(g, d_source)?;
    let b = neg_log_one_minus(g, d_target)?;
    Ok(g.add(a, b)?)
}

fn ln(p: f64) -> f64 {
    p.max(P_MIN).ln()
}

/// `(L_gen, L_disc)` of the scene adversarial loss.
pub fn scene_adv_losses(d_target: f64, d_source: f64) -> Result<(f64, f64), LossError> {
    let (t, s) = (check_prob(d_target)?, check_prob(d_source)?);
    Ok((-ln(t), -ln(s) - ln(1.0 - t)))
}

/// The scene loss as one expression.
pub fn scene_adv_total(d_target: f64, d_source: f64) -> Result<f64, LossError> {
    let (t, s) = (check_prob(d_target)?, check_prob(d_source)?);
    Ok(-ln(t) - ln(s) - ln(1.0 - t))
}

/// Per-category discriminator outputs and presence flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryTerm {
    pub d_source: f64,
    pub d_target: f64,
    pub y_source: bool,
    pub y_target: bool,
}

/// `(L_gen, L_disc)` of the instance adversarial loss; absent sides
/// contribute nothing and their outputs are not inspected.
pub fn instance_adv_losses(terms: &[CategoryTerm]) -> Result<(f64, f64), LossError> {
    let (mut gen, mut disc) = (0.0, 0.0);
    for t in terms {
        if t.y_target {
            let d = check_prob(t.d_target)?;
            gen -= ln(d);
            disc -= ln(1.0 - d);
        }
        if t.y_source {
            disc -= ln(check_prob(t.d_source)?);
        }
    }
    Ok((gen, disc))
}

/// The instance loss summed as one expression.
pub fn instance_adv_total(terms: &[CategoryTerm]) -> Result<f64, LossError> {
    let mut total = 0.0;
    for t in terms {
        let yt = if t.y_target { 1.0 } else { 0.0 };
        let ys = if t.y_source { 1.0 } else { 0.0 };
        let dt = if t.y_target { check_prob(t.d_target)? } else { 0.5 };
        let ds = if t.y_source { check_prob(t.d_source)? } else { 0.5 };
        total += -yt * ln(dt) - ys * ln(ds) - yt * ln(1.0 - dt);
    }
    Ok(total)
}

/// Closed-form weak-label loss on explicit per-pixel forbidden masses.
pub fn weak_label_value(forbidden_mass: &[f64]) -> f64 {
    let n = forbidden_mass.len() as f64;
    -forbidden_mass.iter().map(|&m| ln(1.0 - m)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const LN2: f64 = std::f64::consts::LN_2;

    fn probs(g: &mut Graph, rows: &[&[f64]]) -> Var {
        let c = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        g.constant(Tensor::new(vec![rows.len(), c], data).unwrap())
    }

    #[test]
    fn ce_hand_cases() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = ce_loss(&mut g, p, &[0, 1], 9, false).unwrap().unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let p = probs(&mut g, &[&[0.5, 0.5]]);
        let l = ce_loss(&mut g, p, &[1], 9, false).unwrap().unwrap();
        assert_abs_diff_eq!(g.value(l).item(), LN2, epsilon = 1e-15);

        let u = [1.0 / 6.0; 6];
        let p = probs(&mut g, &[&u, &u, &u]);
        let l = ce_loss(&mut g, p, &[0, 3, 5], 9, false).unwrap().unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 6f64.ln(), epsilon = 1e-14);
        let l = ce_loss(&mut g, p, &[0, 3, 5], 9, true).unwrap().unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 3.0 * 6f64.ln(), epsilon = 1e-13);
    }

    #[test]
    fn ce_ignores_and_clamps() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[&[1.0, 0.0], &[0.3, 0.7]]);
        let l = ce_loss(&mut g, p, &[9, 0], 9, false).unwrap().unwrap();
        assert_abs_diff_eq!(g.value(l).item(), -(0.3f64).ln(), epsilon = 1e-15);
        assert!(ce_loss(&mut g, p, &[9, 9], 9, false).unwrap().is_none());
        let before = g.clamp_count();
        let l = ce_loss(&mut g, p, &[1, 0], 9, false).unwrap().unwrap();
        assert_eq!(g.clamp_count(), before + 1);
        assert!(g.value(l).item().is_finite());
    }

    #[test]
    fn scene_identities() {
        let (gen, disc) = scene_adv_losses(0.5, 0.5).unwrap();
        assert_abs_diff_eq!(gen + disc, 3.0 * LN2, epsilon = 1e-12);
        assert!(scene_adv_losses(1.0 - 1e-15, 0.5).unwrap().0 < 1e-14);
        assert!(scene_adv_losses(1e-15, 1.0 - 1e-15).unwrap().1 < 1e-14);
        assert!(matches!(scene_adv_losses(1.0, 0.5), Err(LossError::OutOfRange { .. })));
        assert!(scene_adv_losses(0.5, f64::NAN).is_err());
    }

    #[test]
    fn instance_gating() {
        let off = CategoryTerm {
            d_source: 0.3,
            d_target: 0.7,
            y_source: false,
            y_target: false,
        };
        assert_eq!(instance_adv_losses(&[off; 3]).unwrap(), (0.0, 0.0));
        let half = CategoryTerm {
            d_source: 0.5,
            d_target: 0.5,
            y_source: true,
            y_target: true,
        };
        let (g, d) = instance_adv_losses(&[half, off, off]).unwrap();
        assert_abs_diff_eq!(g + d, 3.0 * LN2, epsilon = 1e-12);
        let src_only = CategoryTerm {
            y_source: true,
            ..off
        };
        let (g, d) = instance_adv_losses(&[src_only]).unwrap();
        assert_eq!(g, 0.0);
        assert_abs_diff_eq!(d, -(0.3f64).ln(), epsilon = 1e-15);
    }

    #[test]
    fn weak_hand_cases() {
        let spec = WeakLabelSpec::from_taxonomy(&ClassTaxonomy::standard());
        let mut g = Graph::new();
        // ground allows road, sidewalk, terrain (0, 1, 4)
        let p = probs(&mut g, &[&[0.2, 0.3, 0.0, 0.0, 0.5, 0.0], &[0.25, 0.0, 0.25, 0.25, 0.25, 0.0]]);
        let l = weak_label_loss(&mut g, p, &[true, false], &spec, PriorCategory::Ground).unwrap().unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let l = weak_label_loss(&mut g, p, &[false, true], &spec, PriorCategory::Ground).unwrap().unwrap();
        assert_abs_diff_eq!(g.value(l).item(), LN2, epsilon = 1e-12);
        let l = weak_label_loss(&mut g, p, &[true, true], &spec, PriorCategory::Ground).unwrap().unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 0.5 * LN2, epsilon = 1e-12);
        assert!(weak_label_loss(&mut g, p, &[false, false], &spec, PriorCategory::Ground).unwrap().is_none());
        assert_abs_diff_eq!(weak_label_value(&[0.5, 0.0]), 0.5 * LN2, epsilon = 1e-15);
    }

    #[test]
    fn graph_and_closed_forms_agree() {
        let mut g = Graph::new();
        let dt = g.constant(Tensor::scalar(0.3));
        let ds = g.constant(Tensor::scalar(0.8));
        let lg = scene_gen_loss(&mut g, dt).unwrap();
        let ld = scene_disc_loss(&mut g, ds, dt).unwrap();
        let (cg, cd) = scene_adv_losses(0.3, 0.8).unwrap();
        assert_abs_diff_eq!(g.value(lg).item(), cg, epsilon = 1e-15);
        assert_abs_diff_eq!(g.value(ld).item(), cd, epsilon = 1e-15);
        assert_abs_diff_eq!(cg + cd, scene_adv_total(0.3, 0.8).unwrap(), epsilon = 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dist(c: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.01f64..1.0, c).prop_map(|v| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
        }

        proptest! {
            #[test]
            fn losses_non_negative(p in dist(6), label in 0usize..6, dt in 0.001f64..0.999, ds in 0.001f64..0.999) {
                let mut g = Graph::new();
                let pv = g.constant(Tensor::new(vec![1, 6], p.clone()).unwrap());
                let l = ce_loss(&mut g, pv, &[label], 9, false).unwrap().unwrap();
                prop_assert!(g.value(l).item() >= 0.0);
                let spec = WeakLabelSpec::from_taxonomy(&ClassTaxonomy::standard());
                for e in PriorCategory::ALL {
                    let l = weak_label_loss(&mut g, pv, &[true], &spec, e).unwrap().unwrap();
                    prop_assert!(g.value(l).item() >= 0.0);
                }
                let (a, b) = scene_adv_losses(dt, ds).unwrap();
                prop_assert!(a >= 0.0 && b >= 0.0);
            }

            #[test]
            fn weak_only_sees_forbidden_mass(p in dist(6), split in 0.0f64..1.0) {
                let spec = WeakLabelSpec::from_taxonomy(&ClassTaxonomy::standard());
                // move mass between road and terrain, both allowed for ground
                let mut q = p.clone();
                let pool = q[0] + q[4];
                q[0] = pool * split;
                q[4] = pool - q[0];
                let mut g = Graph::new();
                let pv = g.constant(Tensor::new(vec![1, 6], p).unwrap());
                let qv = g.constant(Tensor::new(vec![1, 6], q).unwrap());
                let a = weak_label_loss(&mut g, pv, &[true], &spec, PriorCategory::Ground).unwrap().unwrap();
                let b = weak_label_loss(&mut g, qv, &[true], &spec, PriorCategory::Ground).unwrap().unwrap();
                prop_assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);
            }

            #[test]
            fn instance_split_resums(ds in proptest::collection::vec(0.001f64..0.999, 6), ys in proptest::collection::vec(any::<bool>(), 6)) {
                let terms: Vec<CategoryTerm> = (0..3).map(|e| CategoryTerm {
                    d_source: ds[2 * e],
                    d_target: ds[2 * e + 1],
                    y_source: ys[2 * e],
                    y_target: ys[2 * e + 1],
                }).collect();
                let (a, b) = instance_adv_losses(&terms).unwrap();
                prop_assert!((a + b - instance_adv_total(&terms).unwrap()).abs() <= 1e-12);
            }
        }
    }
}
