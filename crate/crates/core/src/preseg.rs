//! Training-free pre-segmentation: RANSAC ground plane, adaptive-distance
//! connected components for the rest, and rule-based prior categories.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{Point, PointCloud, PriorCategory};

/// Height above ground (meters) at which a point counts toward the car rule.
pub const CAR_MIN_ELEVATION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PresegError {
    #[error("need at least 3 points to fit a plane, got {0}")]
    TooFewPoints(usize),
    #[error("no candidate plane within {max_tilt_deg:.2} degrees of horizontal")]
    NoGround { max_tilt_deg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Meters.
    pub inlier_threshold: f64,
    /// Radians from the `+z` axis.
    pub max_tilt: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_threshold: 0.15,
            max_tilt: 8f64.to_radians(),
            seed: 0,
        }
    }
}

/// Plane `normal . p = offset` with `normal.z > 0`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroundModel {
    pub normal: [f64; 3],
    pub offset: f64,
    pub inlier_threshold: f64,
}

impl GroundModel {
    /// Signed height of `p` above the plane.
    pub fn height(&self, p: &Point) -> f64 {
        dot(self.normal, p.xyz()) - self.offset
    }

    pub fn is_inlier(&self, p: &Point) -> bool {
        self.height(p).abs() <= self.inlier_threshold
    }

    /// Angle between the normal and `+z`.
    pub fn tilt(&self) -> f64 {
        self.normal[2].clamp(-1.0, 1.0).acos()
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Plane through three points, oriented upward; `None` if collinear.
fn plane_through(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> Option<([f64; 3], f64)> {
    let n = cross(sub(b, a), sub(c, a));
    let len = dot(n, n).sqrt();
    if !(len > 1e-12) {
        return None;
    }
    let sign = if n[2] < 0.0 { -1.0 } else { 1.0 };
    let n = [sign * n[0] / len, sign * n[1] / len, sign * n[2] / len];
    Some((n, dot(n, a)))
}

/// RANSAC over 3-point samples. Candidates tilted more than `max_tilt` are
/// discarded; the first candidate with the most inliers wins.
pub fn fit_ground(cloud: &PointCloud, cfg: &RansacConfig) -> Result<GroundModel, PresegError> {
    let n = cloud.len();
    if n < 3 {
        return Err(PresegError::TooFewPoints(n));
    }
    let pts: Vec<[f64; 3]> = cloud.points.iter().map(Point::xyz).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, [f64; 3], f64)> = None;
    for _ in 0..cfg.iterations {
        let s = rand::seq::index::sample(&mut rng, n, 3);
        let Some((normal, offset)) = plane_through(pts[s.index(0)], pts[s.index(1)], pts[s.index(2)]) else {
            continue;
        };
        if normal[2].clamp(-1.0, 1.0).acos() > cfg.max_tilt {
            continue;
        }
        let count = pts
            .iter()
            .filter(|p| (dot(normal, **p) - offset).abs() <= cfg.inlier_threshold)
            .count();
        if best.map_or(true, |(c, _, _)| count > c) {
            best = Some((count, normal, offset));
        }
    }
    match best {
        Some((_, normal, offset)) => Ok(GroundModel {
            normal,
            offset,
            inlier_threshold: cfg.inlier_threshold,
        }),
        None => Err(PresegError::NoGround {
            max_tilt_deg: cfg.max_tilt.to_degrees(),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ClusterConfig {
    /// Base connection distance `t0` (meters).
    pub base_threshold: f64,
    /// Range coefficient `alpha` (radians): threshold grows by `alpha * r`.
    pub range_coeff: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            base_threshold: 0.5,
            range_coeff: 0.01,
        }
    }
}

impl ClusterConfig {
    /// Connection distance for a pair with sensor ranges `ra`, `rb`.
    pub fn threshold(&self, ra: f64, rb: f64) -> f64 {
        self.base_threshold + self.range_coeff * ra.min(rb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentCategory {
    Car,
    Ground,
    Wall,
    Unknown,
}

impl ComponentCategory {
    pub fn prior(self) -> Option<PriorCategory> {
        match self {
            ComponentCategory::Car => Some(PriorCategory::Car),
            ComponentCategory::Ground => Some(PriorCategory::Ground),
            ComponentCategory::Wall => Some(PriorCategory::Wall),
            ComponentCategory::Unknown => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ComponentCategory::Car => "car",
            ComponentCategory::Ground => "ground",
            ComponentCategory::Wall => "wall",
            ComponentCategory::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ComponentStats {
    pub count: usize,
    pub centroid: [f64; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Covariance eigenvalues, largest first.
    pub eigenvalues: [f64; 3],
    /// Points at least [`CAR_MIN_ELEVATION`] above ground.
    pub elevated_count: usize,
}

impl ComponentStats {
    pub fn extent(&self) -> [f64; 3] {
        sub(self.max, self.min)
    }

    fn from_points<'a>(points: impl Iterator<Item = &'a Point>, ground: Option<&GroundModel>) -> Self {
        let pts: Vec<&Point> = points.collect();
        let count = pts.len();
        let mut centroid = [0.0; 3];
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in &pts {
            let q = p.xyz();
            for d in 0..3 {
                centroid[d] += q[d];
                min[d] = min[d].min(q[d]);
                max[d] = max[d].max(q[d]);
            }
        }
        centroid.iter_mut().for_each(|c| *c /= count.max(1) as f64);
        let mut cov = Matrix3::<f64>::zeros();
        for p in &pts {
            let q = sub(p.xyz(), centroid);
            for a in 0..3 {
                for b in 0..3 {
                    cov[(a, b)] += q[a] * q[b];
                }
            }
        }
        cov /= count.max(1) as f64;
        let mut eigenvalues: [f64; 3] = SymmetricEigen::new(cov).eigenvalues.into();
        eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let elevated_count = pts
            .iter()
            .filter(|p| ground.map_or(p.z, |g| g.height(p)) >= CAR_MIN_ELEVATION)
            .count();
        Self {
            count,
            centroid,
            min,
            max,
            eigenvalues,
            elevated_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMap {
    /// Per point, dense in `0..K`, `-1` if unassigned.
    pub component_id: Vec<i64>,
    pub categories: Vec<ComponentCategory>,
    pub stats: Vec<ComponentStats>,
    pub ground_component: Option<usize>,
}

impl ComponentMap {
    /// Build from per-point ids (dense, `-1` unassigned), computing stats.
    /// Every category starts as unknown, except the ground component.
    pub fn from_assignment(cloud: &PointCloud, component_id: Vec<i64>, ground_component: Option<usize>, ground: Option<&GroundModel>) -> Self {
        let k = component_id.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &c) in component_id.iter().enumerate() {
            if c >= 0 {
                members[c as usize].push(i);
            }
        }
        let stats = members
            .iter()
            .map(|m| ComponentStats::from_points(m.iter().map(|&i| &cloud.points[i]), ground))
            .collect();
        let categories = (0..k)
            .map(|c| {
                if Some(c) == ground_component {
                    ComponentCategory::Ground
                } else {
                    ComponentCategory::Unknown
                }
            })
            .collect();
        Self {
            component_id,
            categories,
            stats,
            ground_component,
        }
    }

    pub fn num_components(&self) -> usize {
        self.stats.len()
    }

    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.component_id.len())
            .filter(|&i| self.component_id[i] == c as i64)
            .collect()
    }

    /// Category of the component a point belongs to.
    pub fn point_category(&self, i: usize) -> ComponentCategory {
        match self.component_id[i] {
            c if c >= 0 => self.categories[c as usize],
            _ => ComponentCategory::Unknown,
        }
    }

    /// Text sidecar: one line per component.
    pub fn describe(&self) -> String {
        let mut s = String::from("# id category count cx cy cz ex ey ez l1 l2 l3\n");
        for (c, (cat, st)) in self.categories.iter().zip(&self.stats).enumerate() {
            let e = st.extent();
            s.push_str(&format!(
                "{} {} {} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4} {:.6} {:.6} {:.6}\n",
                c,
                cat.name(),
                st.count,
                st.centroid[0],
                st.centroid[1],
                st.centroid[2],
                e[0],
                e[1],
                e[2],
                st.eigenvalues[0],
                st.eigenvalues[1],
                st.eigenvalues[2]
            ));
        }
        s
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so the result does not depend on union order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Ground inliers become component 0; every other point is grouped by
/// single linkage with the adaptive threshold `t0 + alpha * min(r_p, r_q)`.
/// Non-ground components are numbered by their lowest point index.
pub fn cluster_components(cloud: &PointCloud, ground: &GroundModel, cfg: &ClusterConfig) -> ComponentMap {
    let n = cloud.len();
    let is_ground: Vec<bool> = cloud.points.iter().map(|p| ground.is_inlier(p)).collect();
    let rest: Vec<usize> = (0..n).filter(|&i| !is_ground[i]).collect();
    let ranges: Vec<f64> = cloud.points.iter().map(Point::range).collect();

    let mut ds = DisjointSet::new(rest.len());
    if !rest.is_empty() {
        let r_max = rest.iter().map(|&i| ranges[i]).fold(0.0, f64::max);
        let cell = cfg.threshold(r_max, r_max).max(1e-9);
        let key = |p: &Point| -> (i64, i64, i64) {
            (
                (p.x / cell).floor() as i64,
                (p.y / cell).floor() as i64,
                (p.z / cell).floor() as i64,
            )
        };
        let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (slot, &i) in rest.iter().enumerate() {
            grid.entry(key(&cloud.points[i])).or_default().push(slot);
        }
        for (slot, &i) in rest.iter().enumerate() {
            let p = &cloud.points[i];
            let (kx, ky, kz) = key(p);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(cellpts) = grid.get(&(kx + dx, ky + dy, kz + dz)) else { continue };
                        for &other in cellpts {
                            if other <= slot {
                                continue;
                            }
                            let j = rest[other];
                            let q = &cloud.points[j];
                            let d2 = (p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2);
                            let t = cfg.threshold(ranges[i], ranges[j]);
                            if d2 <= t * t {
                                ds.union(slot, other);
                            }
                        }
                    }
                }
            }
        }
    }

    let has_ground = is_ground.iter().any(|&g| g);
    let mut ids = vec![-1i64; n];
    let mut next = 0i64;
    if has_ground {
        for i in 0..n {
            if is_ground[i] {
                ids[i] = 0;
            }
        }
        next = 1;
    }
    let mut root_id: HashMap<usize, i64> = HashMap::new();
    for (slot, &i) in rest.iter().enumerate() {
        let root = ds.find(slot);
        let id = *root_id.entry(root).or_insert_with(|| {
            next += 1;
            next - 1
        });
        ids[i] = id;
    }
    ComponentMap::from_assignment(cloud, ids, has_ground.then_some(0), Some(ground))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CategoryConfig {
    /// Vertical extent (meters) that makes a wall.
    pub wall_min_height: f64,
    /// Largest covariance eigenvalue (m^2) that makes a wall.
    pub wall_min_spread: f64,
    /// Car bounding box: length, width, height (meters).
    pub car_box: [f64; 3],
    pub car_min_points: usize,
}

impl Default for CategoryConfig {
    fn default() -> Self {
        Self {
            wall_min_height: 2.5,
            wall_min_spread: 4.0,
            car_box: [6.0, 3.0, 2.5],
            car_min_points: 20,
        }
    }
}

/// Rule precedence: ground, then car, then wall, else unknown.
pub fn categorize(stats: &ComponentStats, is_ground: bool, cfg: &CategoryConfig) -> ComponentCategory {
    if is_ground {
        return ComponentCategory::Ground;
    }
    let e = stats.extent();
    let (long, short) = if e[0] >= e[1] { (e[0], e[1]) } else { (e[1], e[0]) };
    let fits_car = long <= cfg.car_box[0] && short <= cfg.car_box[1] && e[2] <= cfg.car_box[2];
    if fits_car && stats.elevated_count >= cfg.car_min_points {
        return ComponentCategory::Car;
    }
    if e[2] >= cfg.wall_min_height || stats.eigenvalues[0] >= cfg.wall_min_spread {
        return ComponentCategory::Wall;
    }
    ComponentCategory::Unknown
}

pub fn assign_prior_categories(mut map: ComponentMap, cfg: &CategoryConfig) -> ComponentMap {
    map.categories = map
        .stats
        .iter()
        .enumerate()
        .map(|(c, st)| categorize(st, map.ground_component == Some(c), cfg))
        .collect();
    map
}

/// Configuration for the whole pre-segmentation pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct PresegConfig {
    pub ransac: RansacConfig,
    pub cluster: ClusterConfig,
    pub category: CategoryConfig,
}

/// Ground fit, clustering and categorisation in one call.
pub fn presegment(cloud: &PointCloud, cfg: &PresegConfig) -> Result<(GroundModel, ComponentMap), PresegError> {
    let ground = fit_ground(cloud, &cfg.ransac)?;
    let map = cluster_components(cloud, &ground, &cfg.cluster);
    Ok((ground, assign_prior_categories(map, &cfg.category)))
}
