//! Segmentation network and discriminators.
//!
//! The generator is a small encoder-decoder producing per-pixel features
//! `F^pixel [d, H, W]`, followed by instance-wise relationship extraction:
//! node descriptors pooled over instance masks, a KNN EdgeConv over the
//! descriptors, and expansion of the enhanced descriptors back onto their
//! pixels. The concatenation `F = F^pixel ‖ F^node` feeds a 1×1 softmax head
//! and the discriminators.
//!
//! Flattened layouts used throughout: `F` is `[2d, H*W]` and class
//! probabilities are `[H*W, C]` (pixel-major, row `v*W + u`).

use rand::Rng;

use crate::autodiff::{Bound, Graph, Tensor, TensorError, Var};
use crate::dataio::{ClassId, PriorCategory, SourceSample, IGNORE_ID, NUM_CLASSES};
use crate::params::{ParamId, ParamStore};
use crate::projection::RangeImage;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("node {0} has an empty mask")]
    EmptyNode(usize),
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct ModelConfig {
    /// Output channels of the pixel feature extractor.
    pub feature_dim: usize,
    /// Neighbours per node in the EdgeConv graph.
    pub knn: usize,
    pub enc1: usize,
    pub enc2: usize,
    pub disc_hidden: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            knn: 4,
            enc1: 8,
            enc2: 16,
            disc_hidden: 256,
            num_classes: NUM_CLASSES,
        }
    }
}

// ---- node masks --------------------------------------------------------------

/// Disjoint instance masks over an `H×W` image, stored as a per-pixel node
/// index (`-1` = no node).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeMasks {
    pub height: usize,
    pub width: usize,
    pub assignment: Vec<i64>,
    pub sizes: Vec<usize>,
}

impl NodeMasks {
    /// Relabel arbitrary non-negative group ids densely in order of first
    /// appearance; negative ids are left unassigned.
    pub fn from_groups(height: usize, width: usize, group: &[i64]) -> Self {
        let mut remap = std::collections::HashMap::new();
        let mut sizes = Vec::new();
        let assignment = group
            .iter()
            .map(|&g| {
                if g < 0 {
                    return -1;
                }
                let id = *remap.entry(g).or_insert_with(|| {
                    sizes.push(0);
                    sizes.len() - 1
                });
                sizes[id] += 1;
                id as i64
            })
            .collect();
        Self {
            height,
            width,
            assignment,
            sizes,
        }
    }

    /// Explicit boolean masks; must be pairwise disjoint.
    pub fn from_masks(height: usize, width: usize, masks: &[Vec<bool>]) -> Result<Self> {
        let mut assignment = vec![-1i64; height * width];
        let mut sizes = Vec::with_capacity(masks.len());
        for (i, m) in masks.iter().enumerate() {
            if m.len() != height * width {
                return Err(ModelError::Shape(format!("mask {} has {} pixels, image has {}", i, m.len(), height * width)));
            }
            let mut size = 0;
            for (k, &on) in m.iter().enumerate() {
                if on {
                    if assignment[k] >= 0 {
                        return Err(ModelError::Shape(format!("masks {} and {} overlap", assignment[k], i)));
                    }
                    assignment[k] = i as i64;
                    size += 1;
                }
            }
            sizes.push(size);
        }
        Ok(Self {
            height,
            width,
            assignment,
            sizes,
        })
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn mask(&self, node: usize) -> Vec<bool> {
        self.assignment.iter().map(|&a| a == node as i64).collect()
    }

    /// Target nodes: one per pre-segmentation component visible in the image.
    pub fn from_range_image(img: &RangeImage) -> Self {
        let group: Vec<i64> = (0..img.len())
            .map(|k| if img.valid[k] { img.component_id[k] } else { -1 })
            .collect();
        Self::from_groups(img.height, img.width, &group)
    }

    /// Source nodes: 8-connected regions of equal ground-truth class.
    pub fn from_label_regions(height: usize, width: usize, labels: &[ClassId], ignore: ClassId) -> Self {
        let mut region = vec![-1i64; labels.len()];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..labels.len() {
            if labels[start] == ignore || region[start] >= 0 {
                continue;
            }
            region[start] = next;
            stack.push(start);
            while let Some(k) = stack.pop() {
                let (v, u) = ((k / width) as i64, (k % width) as i64);
                for dv in -1..=1 {
                    for du in -1..=1 {
                        let (nv, nu) = (v + dv, u + du);
                        if nv < 0 || nu < 0 || nv >= height as i64 || nu >= width as i64 {
                            continue;
                        }
                        let nk = nv as usize * width + nu as usize;
                        if region[nk] < 0 && labels[nk] == labels[start] {
                            region[nk] = next;
                            stack.push(nk);
                        }
                    }
                }
            }
            next += 1;
        }
        Self::from_groups(height, width, &region)
    }
}

/// Nodes built for one image.
#[derive(Debug, Clone)]
pub struct NodeSet {
    pub masks: NodeMasks,
    /// `P [n, d]`, or `None` when there are no nodes.
    pub descriptors: Option<Var>,
    /// `P' [n, d]`.
    pub enhanced: Option<Var>,
    /// Out-neighbours of each node.
    pub edges: Vec<Vec<usize>>,
}

/// `k` nearest neighbours of each row of `points [n, d]` by Euclidean
/// distance, excluding self, ties to the lower index.
pub fn knn(points: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let (n, d) = (points.shape()[0], points.shape()[1]);
    let x = points.data();
    (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let dist: f64 = (0..d).map(|c| (x[i * d + c] - x[j * d + c]).powi(2)).sum();
                    (dist, j)
                })
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

fn edge_key(edges: &[Vec<usize>]) -> u64 {
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};
    let mut h = DefaultHasher::new();
    edges.hash(&mut h);
    h.finish()
}

// ---- network input -------------------------------------------------------------

/// `[3, H, W]` input for a source sample, with ranges divided by `range_scale`.
pub fn source_input(sample: &SourceSample, range_scale: f64) -> Tensor {
    let n = sample.height * sample.width;
    let mut data = vec![0.0; 3 * n];
    for k in 0..n {
        for c in 0..3 {
            let v = sample.image[3 * k + c];
            data[c * n + k] = if c < 2 { v / range_scale } else { v };
        }
    }
    Tensor::new(vec![3, sample.height, sample.width], data).expect("shape")
}

/// Source pixels that belong to a scene (labelled, not ignore).
pub fn source_valid(sample: &SourceSample) -> Vec<bool> {
    sample.labels.iter().map(|&l| l != IGNORE_ID).collect()
}

// ---- generator -----------------------------------------------------------------

#[derive(Debug, Clone)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

fn conv_layer(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> ConvLayer {
    ConvLayer {
        w: store.add_he(format!("{}.w", name), &[cout, cin, 3, 3], cin * 9, rng),
        b: store.add_zeros(format!("{}.b", name), &[cout, 1, 1]),
    }
}

fn linear(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Linear {
    Linear {
        w: store.add_he(format!("{}.w", name), &[din, dout], din, rng),
        b: store.add_zeros(format!("{}.b", name), &[dout]),
    }
}

fn apply_conv(g: &mut Graph, b: &Bound, l: &ConvLayer, x: Var, relu: bool) -> Result<Var> {
    let y = g.conv2d(x, b.var(l.w))?;
    let y = g.add(y, b.var(l.b))?;
    Ok(if relu { g.relu(y)? } else { y })
}

fn apply_linear(g: &mut Graph, b: &Bound, l: &Linear, x: Var) -> Result<Var> {
    let y = g.matmul(x, b.var(l.w))?;
    Ok(g.add(y, b.var(l.b))?)
}

/// The pixel feature extractor: two conv+relu+pool stages, a bottleneck,
/// two upsample+conv stages with skip connections from the encoder.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    enc1: ConvLayer,
    enc2: ConvLayer,
    bottleneck: ConvLayer,
    dec2: ConvLayer,
    dec1: ConvLayer,
}

/// Forward values of one generator pass.
#[derive(Debug, Clone)]
pub struct GenOutput {
    /// `F^pixel [d, H, W]`.
    pub pixel: Var,
    /// `F [2d, H*W]`.
    pub features: Var,
    /// Class probabilities `[H*W, C]`.
    pub probs: Var,
    pub nodes: NodeSet,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: ModelConfig,
    pub params: ParamStore,
    extractor: FeatureExtractor,
    node_linear: Linear,
    edge: Linear,
    head: Linear,
}

impl Generator {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Self {
        let mut p = ParamStore::new();
        let (c1, c2, d) = (config.enc1, config.enc2, config.feature_dim);
        let extractor = FeatureExtractor {
            enc1: conv_layer(&mut p, "enc1", 3, c1, rng),
            enc2: conv_layer(&mut p, "enc2", c1, c2, rng),
            bottleneck: conv_layer(&mut p, "bottleneck", c2, c2, rng),
            dec2: conv_layer(&mut p, "dec2", 2 * c2, c2, rng),
            dec1: conv_layer(&mut p, "dec1", c2 + c1, d, rng),
        };
        let node_linear = linear(&mut p, "node", d, d, rng);
        let edge = linear(&mut p, "edge", 2 * d, d, rng);
        let head = linear(&mut p, "head", 2 * d, config.num_classes, rng);
        Self {
            config,
            params: p,
            extractor,
            node_linear,
            edge,
            head,
        }
    }

    /// Head parameters (for tests that pin the classifier).
    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head.w, self.head.b)
    }

    pub fn feature_bias_id(&self) -> ParamId {
        self.extractor.dec1.b
    }

    /// `[3, H, W] -> F^pixel [d, H, W]`; `H` and `W` must be multiples of 4.
    pub fn extract_pixel_features(&self, g: &mut Graph, b: &Bound, input: Var) -> Result<Var> {
        let s = g.shape(input).to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] % 4 != 0 || s[2] % 4 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(ModelError::Shape(format!(
                "extractor needs [3, H, W] with H, W positive multiples of 4, got {:?}",
                s
            )));
        }
        let e = &self.extractor;
        let e1 = apply_conv(g, b, &e.enc1, input, true)?;
        let p1 = g.max_pool2d(e1)?;
        let e2 = apply_conv(g, b, &e.enc2, p1, true)?;
        let p2 = g.max_pool2d(e2)?;
        let bt = apply_conv(g, b, &e.bottleneck, p2, true)?;
        let u2 = g.upsample2x(bt)?;
        let c2 = g.concat(&[u2, e2], 0)?;
        let d2 = apply_conv(g, b, &e.dec2, c2, true)?;
        let u1 = g.upsample2x(d2)?;
        let c1 = g.concat(&[u1, e1], 0)?;
        apply_conv(g, b, &e.dec1, c1, false)
    }

    /// Node descriptors `P [n, d]`: mean of `F^pixel` over each mask, then a
    /// linear layer.
    pub fn construct_nodes(&self, g: &mut Graph, b: &Bound, pixel: Var, masks: &NodeMasks) -> Result<Var> {
        let d = self.config.feature_dim;
        let flat = self.flatten(g, pixel, masks)?;
        let mut rows = Vec::with_capacity(masks.len());
        for (i, &size) in masks.sizes.iter().enumerate() {
            if size == 0 {
                return Err(ModelError::EmptyNode(i));
            }
            let sel = g.gather_mask(flat, 1, &masks.mask(i))?;
            let m = g.mean_pool(sel, &[1])?;
            rows.push(g.reshape(m, &[1, d])?);
        }
        if rows.is_empty() {
            return Err(ModelError::Shape("no nodes".into()));
        }
        let pooled = g.concat(&rows, 0)?;
        apply_linear(g, b, &self.node_linear, pooled)
    }

    /// EdgeConv: `P'_i = max_j relu(W [P_i, P_j - P_i] + b)` over the KNN
    /// neighbours of `i`; a lone node uses itself with a zero difference.
    pub fn edge_conv(&self, g: &mut Graph, b: &Bound, p: Var) -> Result<(Var, Vec<Vec<usize>>)> {
        let (n, d) = (g.shape(p)[0], g.shape(p)[1]);
        let k = self.config.knn.min(n.saturating_sub(1));
        let edges = knn(g.value(p), k);
        g.record_branch(edge_key(&edges));
        let per = k.max(1);
        let mut si = vec![0.0; n * per * n];
        let mut sj = vec![0.0; n * per * n];
        for i in 0..n {
            for s in 0..per {
                let row = i * per + s;
                let j = if k == 0 { i } else { edges[i][s] };
                si[row * n + i] = 1.0;
                sj[row * n + j] = 1.0;
            }
        }
        let si = g.constant(Tensor::new(vec![n * per, n], si)?);
        let sj = g.constant(Tensor::new(vec![n * per, n], sj)?);
        let xi = g.matmul(si, p)?;
        let xj = g.matmul(sj, p)?;
        let diff = g.sub(xj, xi)?;
        let e = g.concat(&[xi, diff], 1)?;
        let h = apply_linear(g, b, &self.edge, e)?;
        let h = g.relu(h)?;
        let h = g.reshape(h, &[n, per, d])?;
        let out = g.max_reduce(h, &[1])?;
        Ok((out, edges))
    }

    /// `F = [F^pixel ; F^node]` as `[2d, H*W]`; `F^node` carries `P'_i` on the
    /// pixels of mask `i` and zeros elsewhere.
    pub fn expand_and_concat(&self, g: &mut Graph, pixel: Var, enhanced: Option<Var>, masks: &NodeMasks) -> Result<Var> {
        let d = self.config.feature_dim;
        let flat = self.flatten(g, pixel, masks)?;
        let hw = masks.assignment.len();
        let node = match enhanced {
            Some(pe) => {
                let n = masks.len();
                let mut a = vec![0.0; n * hw];
                for (k, &id) in masks.assignment.iter().enumerate() {
                    if id >= 0 {
                        a[id as usize * hw + k] = 1.0;
                    }
                }
                let a = g.constant(Tensor::new(vec![n, hw], a)?);
                let pt = g.transpose(pe)?;
                g.matmul(pt, a)?
            }
            None => g.constant(Tensor::zeros(&[d, hw])),
        };
        Ok(g.concat(&[flat, node], 0)?)
    }

    /// 1×1 linear head and softmax: `F [2d, HW] -> P [HW, C]`.
    pub fn segment(&self, g: &mut Graph, b: &Bound, features: Var) -> Result<Var> {
        let ft = g.transpose(features)?;
        let logits = apply_linear(g, b, &self.head, ft)?;
        Ok(g.softmax(logits)?)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, input: &Tensor, masks: &NodeMasks) -> Result<GenOutput> {
        let x = g.constant(input.clone());
        self.forward_var(g, b, x, masks)
    }

    /// As [`Generator::forward`] with the input already on the graph.
    pub fn forward_var(&self, g: &mut Graph, b: &Bound, x: Var, masks: &NodeMasks) -> Result<GenOutput> {
        let pixel = self.extract_pixel_features(g, b, x)?;
        let (descriptors, enhanced, edges) = if masks.is_empty() {
            (None, None, Vec::new())
        } else {
            let p = self.construct_nodes(g, b, pixel, masks)?;
            let (pe, edges) = self.edge_conv(g, b, p)?;
            (Some(p), Some(pe), edges)
        };
        let features = self.expand_and_concat(g, pixel, enhanced, masks)?;
        let probs = self.segment(g, b, features)?;
        Ok(GenOutput {
            pixel,
            features,
            probs,
            nodes: NodeSet {
                masks: masks.clone(),
                descriptors,
                enhanced,
                edges,
            },
        })
    }

    fn flatten(&self, g: &mut Graph, pixel: Var, masks: &NodeMasks) -> Result<Var> {
        let s = g.shape(pixel).to_vec();
        if s.len() != 3 || s[1] != masks.height || s[2] != masks.width {
            return Err(ModelError::Shape(format!(
                "masks are {}x{}, features {:?}",
                masks.height, masks.width, s
            )));
        }
        Ok(g.reshape(pixel, &[s[0], s[1] * s[2]])?)
    }
}

// ---- discriminators ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscKind {
    Main,
    Category(PriorCategory),
}

impl DiscKind {
    pub const ALL: [DiscKind; 4] = [
        DiscKind::Main,
        DiscKind::Category(PriorCategory::Car),
        DiscKind::Category(PriorCategory::Ground),
        DiscKind::Category(PriorCategory::Wall),
    ];

    fn slot(self) -> usize {
        match self {
            DiscKind::Main => 0,
            DiscKind::Category(e) => 1 + e.index(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DiscKind::Main => "main",
            DiscKind::Category(e) => e.name(),
        }
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    hidden: Linear,
    out: Linear,
}

/// The scene discriminator and one per prior category, each an MLP
/// `2d -> hidden -> 1` with a sigmoid output (1 = source, 0 = target).
#[derive(Debug, Clone)]
pub struct Discriminators {
    pub params: ParamStore,
    nets: Vec<Mlp>,
}

impl Discriminators {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut p = ParamStore::new();
        let din = 2 * config.feature_dim;
        let nets = DiscKind::ALL
            .iter()
            .map(|k| Mlp {
                hidden: linear(&mut p, &format!("{}.hidden", k.name()), din, config.disc_hidden, rng),
                out: linear(&mut p, &format!("{}.out", k.name()), config.disc_hidden, 1, rng),
            })
            .collect();
        Self { params: p, nets }
    }

    /// Mean of `F [2d, HW]` over `pixels`, then the MLP. `None` when no pixel
    /// is selected (category absent).
    pub fn discriminate(&self, g: &mut Graph, b: &Bound, which: DiscKind, features: Var, pixels: &[bool]) -> Result<Option<Var>> {
        if !pixels.iter().any(|&p| p) {
            return Ok(None);
        }
        let c = g.shape(features)[0];
        let sel = g.gather_mask(features, 1, pixels)?;
        let pooled = g.mean_pool(sel, &[1])?;
        let x = g.reshape(pooled, &[1, c])?;
        let net = &self.nets[which.slot()];
        let h = apply_linear(g, b, &net.hidden, x)?;
        let h = g.relu(h)?;
        let o = apply_linear(g, b, &net.out, h)?;
        let o = g.sigmoid(o)?;
        Ok(Some(g.reshape(o, &[])?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            knn: 3,
            enc1: 4,
            enc2: 4,
            disc_hidden: 8,
            num_classes: 6,
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn extractor_keeps_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gen = Generator::new(small(), &mut rng);
        let mut g = Graph::new();
        let b = g.bind(&gen.params, false);
        let x = g.constant(Tensor::zeros(&[3, 8, 8]));
        let f = gen.extract_pixel_features(&mut g, &b, x).unwrap();
        assert_eq!(g.shape(f), &[4, 8, 8]);
        assert!(g.value(f).data().iter().all(|v| v.is_finite()));
        let x = g.constant(Tensor::zeros(&[3, 6, 8]));
        assert!(matches!(gen.extract_pixel_features(&mut g, &b, x), Err(ModelError::Shape(_))));
    }

    #[test]
    fn extractor_full_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gen = Generator::new(ModelConfig::default(), &mut rng);
        let mut g = Graph::new();
        let b = g.bind(&gen.params, false);
        let x = g.constant(rand_tensor(&mut rng, &[3, 64, 2048]));
        let f = gen.extract_pixel_features(&mut g, &b, x).unwrap();
        assert_eq!(g.shape(f), &[16, 64, 2048]);
    }

    #[test]
    fn node_descriptors_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gen = Generator::new(small(), &mut rng);
        let (h, w, d) = (4, 4, 4);
        let pixel = rand_tensor(&mut rng, &[d, h, w]);
        let group: Vec<i64> = (0..h * w).map(|_| rng.random_range(-1..3)).collect();
        let masks = NodeMasks::from_groups(h, w, &group);
        let mut g = Graph::new();
        let b = g.bind(&gen.params, false);
        let pv = g.constant(pixel.clone());
        let p = gen.construct_nodes(&mut g, &b, pv, &masks).unwrap();
        let wt = gen.params.get(gen.node_linear.w);
        let bias = gen.params.get(gen.node_linear.b);
        for i in 0..masks.len() {
            let mut mean = vec![0.0; d];
            for k in 0..h * w {
                if masks.assignment[k] == i as i64 {
                    for c in 0..d {
                        mean[c] += pixel.data()[c * h * w + k] / masks.sizes[i] as f64;
                    }
                }
            }
            for o in 0..d {
                let want: f64 = bias.data()[o] + (0..d).map(|c| mean[c] * wt.data()[c * d + o]).sum::<f64>();
                assert_relative_eq!(g.value(p).data()[i * d + o], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_pixel_and_identical_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = Generator::new(small(), &mut rng);
        let mut pixel = Tensor::zeros(&[4, 2, 2]);
        for c in 0..4 {
            pixel.data_mut()[c * 4] = c as f64;
            pixel.data_mut()[c * 4 + 3] = c as f64;
        }
        let masks = NodeMasks::from_groups(2, 2, &[0, -1, -1, 1]);
        let mut g = Graph::new();
        let b = g.bind(&gen.params, false);
        let pv = g.constant(pixel);
        let p = gen.construct_nodes(&mut g, &b, pv, &masks).unwrap();
        let v = g.value(p).data();
        assert_eq!(&v[0..4], &v[4..8]);
        let empty = NodeMasks {
            height: 2,
            width: 2,
            assignment: vec![-1; 4],
            sizes: vec![0],
        };
        assert!(matches!(gen.construct_nodes(&mut g, &b, pv, &empty), Err(ModelError::EmptyNode(0))));
    }

    #[test]
    fn knn_matches_all_pairs_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = rand_tensor(&mut rng, &[6, 4]);
        let nb = knn(&pts, 3);
        for i in 0..6 {
            let mut all: Vec<(f64, usize)> = Vec::new();
            for j in 0..6 {
                if j != i {
                    let d: f64 = (0..4).map(|c| (pts.data()[i * 4 + c] - pts.data()[j * 4 + c]).powi(2)).sum();
                    all.push((d, j));
                }
            }
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all.iter().take(3).map(|x| x.1).collect();
            assert_eq!(nb[i], want);
        }
        let two = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(knn(&two, 1), vec![vec![1], vec![0]]);
        let tie = Tensor::new(vec![3, 1], vec![0.0, 1.0, -1.0]).unwrap();
        assert_eq!(knn(&tie, 1)[0], vec![1]);
    }

    fn edge_oracle(gen: &Generator, p: &Tensor, edges: &[Vec<usize>]) -> Vec<f64> {
        let d = p.shape()[1];
        let w = gen.params.get(gen.edge.w).data();
        let b = gen.params.get(gen.edge.b).data();
        let mut out = Vec::new();
        for (i, nb) in edges.iter().enumerate() {
            let nb: Vec<usize> = if nb.is_empty() { vec![i] } else { nb.clone() };
            for o in 0..d {
                let mut best = f64::NEG_INFINITY;
                for &j in &nb {
                    let mut s = b[o];
                    for c in 0..d {
                        let pi = p.data()[i * d + c];
                        let pj = p.data()[j * d + c];
                        s += w[c * d + o] * pi + w[(d + c) * d + o] * (pj - pi);
                    }
                    best = best.max(s.max(0.0));
                }
                out.push(best);
            }
        }
        out
    }

    #[test]
    fn edge_conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen = Generator::new(small(), &mut rng);
        for n in [1usize, 2, 6] {
            let p = rand_tensor(&mut rng, &[n, 4]);
            let mut g = Graph::new();
            let b = g.bind(&gen.params, false);
            let pv = g.constant(p.clone());
            let (out, edges) = gen.edge_conv(&mut g, &b, pv).unwrap();
            let k = 3.min(n - 1);
            assert!(edges.iter().all(|e| e.len() == k));
            let want = edge_oracle(&gen, &p, &edges);
            for (a, b) in g.value(out).data().iter().zip(&want) {
                assert_relative_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn expand_matches_scatter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gen = Generator::new(small(), &mut rng);
        let (h, w, d) = (4, 4, 4);
        let pixel = rand_tensor(&mut rng, &[d, h, w]);
        let group: Vec<i64> = (0..h * w).map(|_| rng.random_range(-1..3)).collect();
        let masks = NodeMasks::from_groups(h, w, &group);
        let pe = rand_tensor(&mut rng, &[masks.len(), d]);
        let mut g = Graph::new();
        let pv = g.constant(pixel.clone());
        let pev = g.constant(pe.clone());
        let f = gen.expand_and_concat(&mut g, pv, Some(pev), &masks).unwrap();
        let fv = g.value(f);
        assert_eq!(fv.shape(), &[2 * d, h * w]);
        for k in 0..h * w {
            for c in 0..d {
                assert_eq!(fv.data()[c * h * w + k], pixel.data()[c * h * w + k]);
                let want = match masks.assignment[k] {
                    -1 => 0.0,
                    i => pe.data()[i as usize * d + c],
                };
                assert_eq!(fv.data()[(d + c) * h * w + k], want);
            }
        }
        let none = NodeMasks::from_groups(h, w, &vec![-1; h * w]);
        let f = gen.expand_and_concat(&mut g, pv, None, &none).unwrap();
        assert!(g.value(f).data()[d * h * w..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut gen = Generator::new(small(), &mut rng);
        let f = rand_tensor(&mut rng, &[8, 16]);
        let mut g = Graph::new();
        let b = g.bind(&gen.params, false);
        let fv = g.constant(f.clone());
        let p = gen.segment(&mut g, &b, fv).unwrap();
        for row in g.value(p).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let (hw, hb) = gen.head_ids();
        gen.params.get_mut(hw).data_mut().iter_mut().for_each(|v| *v = 0.0);
        gen.params.get_mut(hb).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let b = g.bind(&gen.params, false);
        let fv = g.constant(f);
        let p = gen.segment(&mut g, &b, fv).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn discriminator_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = small();
        let mut disc = Discriminators::new(&cfg, &mut rng);
        let f = rand_tensor(&mut rng, &[8, 16]);
        let all = vec![true; 16];
        let mut g = Graph::new();
        let b = g.bind(&disc.params, false);
        let fv = g.constant(f.clone());
        for k in DiscKind::ALL {
            let o = disc.discriminate(&mut g, &b, k, fv, &all).unwrap().unwrap();
            let v = g.value(o).item();
            assert!(v > 0.0 && v < 1.0);
        }
        assert!(disc
            .discriminate(&mut g, &b, DiscKind::Main, fv, &[false; 16])
            .unwrap()
            .is_none());
        disc.params.tensors_mut().iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let mut g = Graph::new();
        let b = g.bind(&disc.params, false);
        let fv = g.constant(f);
        let o = disc.discriminate(&mut g, &b, DiscKind::Main, fv, &all).unwrap().unwrap();
        assert_eq!(g.value(o).item(), 0.5);
    }

    #[test]
    fn label_regions_are_eight_connected() {
        // class 1 touches diagonally, class 0 splits into two pieces
        let labels = vec![1, 0, 6, 0, 1, 6, 6, 6, 0];
        let m = NodeMasks::from_label_regions(3, 3, &labels, 6);
        assert_eq!(m.len(), 3);
        assert_eq!(m.assignment[0], m.assignment[4]);
        assert_ne!(m.assignment[1], m.assignment[8]);
        assert_eq!(m.assignment[2], -1);
    }

    #[test]
    fn end_to_end_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gen = Generator::new(small(), &mut rng);
        let x = rand_tensor(&mut rng, &[3, 8, 8]);
        let group: Vec<i64> = (0..64).map(|k| (k % 8 / 3) as i64).collect();
        let masks = NodeMasks::from_groups(8, 8, &group);
        let f = |g: &mut Graph, vs: &[Var]| -> std::result::Result<Var, TensorError> {
            let b = g.bind(&gen.params, false);
            let out = gen.forward_var(g, &b, vs[0], &masks).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => TensorError::Invalid { op: "model", msg: other.to_string() },
            })?;
            let l = g.log_clamped(out.probs, 1e-12)?;
            g.mean(l)
        };
        let coords: Vec<(usize, usize)> = (0..192).step_by(5).map(|j| (0, j)).collect();
        let r = grad_check_many(f, &[x], &coords, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{:?}", r);
    }
}
