//! Spherical projection of LiDAR points onto a `V x U` range image.
//!
//! Column from azimuth, row from elevation:
//!
//! ```text
//! u = floor(1/2 * (1 - atan2(y, x) / pi) * U)
//! v = floor((1 - (asin(z / r) + f_down) / f) * V)
//! ```
//!
//! where `f = f_up + f_down` is the vertical field of view. Points whose
//! unfloored `v` falls outside `[0, V)` are out of the field of view.

use std::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::dataio::{ClassId, PointCloud};
use crate::preseg::ComponentMap;

pub const RANGE_IMAGE_MAGIC: &[u8; 4] = b"RIMG";
/// range, intensity, point index, component id, valid.
pub const RANGE_IMAGE_PLANES: u32 = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProjectionError {
    #[error("point at the sensor origin has no direction")]
    DegeneratePoint,
    #[error("invalid projection config: {0}")]
    Config(String),
    #[error("{0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ProjectionConfig {
    /// Image width `U` (azimuth bins).
    pub width: usize,
    /// Image height `V` (elevation bins).
    pub height: usize,
    /// Radians above the horizontal.
    pub fov_up: f64,
    /// Radians below the horizontal.
    pub fov_down: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            width: 2048,
            height: 64,
            fov_up: 3f64.to_radians(),
            fov_down: 25f64.to_radians(),
        }
    }
}

impl ProjectionConfig {
    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }

    pub fn validate(&self) -> Result<(), ProjectionError> {
        if self.width == 0 || self.height == 0 {
            return Err(ProjectionError::Config("image dimensions must be at least 1".into()));
        }
        if self.fov_down < 0.0 || !(self.fov() > 0.0) {
            return Err(ProjectionError::Config(format!(
                "need fov_down >= 0 and fov > 0, got up={} down={}",
                self.fov_up, self.fov_down
            )));
        }
        Ok(())
    }

    /// Number of pixels.
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Azimuth and elevation (radians) of a pixel center.
    pub fn pixel_center_angles(&self, u: usize, v: usize) -> (f64, f64) {
        let azimuth = PI * (1.0 - 2.0 * (u as f64 + 0.5) / self.width as f64);
        let elevation = (1.0 - (v as f64 + 0.5) / self.height as f64) * self.fov() - self.fov_down;
        (azimuth, elevation)
    }

    /// Unit direction through a pixel center.
    pub fn pixel_ray(&self, u: usize, v: usize) -> [f64; 3] {
        let (az, el) = self.pixel_center_angles(u, v);
        [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
    }

    pub fn azimuth_extent(&self) -> f64 {
        2.0 * PI / self.width as f64
    }

    pub fn elevation_extent(&self) -> f64 {
        self.fov() / self.height as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pixel {
    pub u: usize,
    pub v: usize,
}

/// Unfloored `(u, v)` image coordinates.
pub fn continuous_coords(p: [f64; 3], cfg: &ProjectionConfig) -> Result<(f64, f64), ProjectionError> {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if !(r > 0.0) {
        return Err(ProjectionError::DegeneratePoint);
    }
    let u = 0.5 * (1.0 - p[1].atan2(p[0]) / PI) * cfg.width as f64;
    let v = (1.0 - ((p[2] / r).asin() + cfg.fov_down) / cfg.fov()) * cfg.height as f64;
    Ok((u, v))
}

/// Pixel of a point, or `None` when it is outside the vertical field of view.
pub fn project_point(p: [f64; 3], cfg: &ProjectionConfig) -> Result<Option<Pixel>, ProjectionError> {
    let (u, v) = continuous_coords(p, cfg)?;
    if !(0.0..cfg.height as f64).contains(&v) {
        return Ok(None);
    }
    let u = (u.floor().max(0.0) as usize).min(cfg.width - 1);
    let v = (v.floor() as usize).min(cfg.height - 1);
    Ok(Some(Pixel { u, v }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub width: usize,
    pub height: usize,
    /// Meters, `0` where empty.
    pub range: Vec<f64>,
    pub intensity: Vec<f64>,
    /// Backpointer into the cloud, `-1` where empty.
    pub point_index: Vec<i64>,
    /// Component of the backpointed point, `-1` where empty or unknown.
    pub component_id: Vec<i64>,
    pub valid: Vec<bool>,
}

impl RangeImage {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            range: vec![0.0; n],
            intensity: vec![0.0; n],
            point_index: vec![-1; n],
            component_id: vec![-1; n],
            valid: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Network input `[3, V, U]` with channels `(r, r, i)`; ranges are divided
    /// by `range_scale`. Empty pixels are zero.
    pub fn network_input(&self, range_scale: f64) -> Tensor {
        let n = self.len();
        let mut data = vec![0.0; 3 * n];
        for k in 0..n {
            let r = self.range[k] / range_scale;
            data[k] = r;
            data[n + k] = r;
            data[2 * n + k] = self.intensity[k];
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("shape")
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(16 + n * 8 * RANGE_IMAGE_PLANES as usize);
        out.extend_from_slice(RANGE_IMAGE_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&RANGE_IMAGE_PLANES.to_le_bytes());
        let planes: [Box<dyn Fn(usize) -> f64 + '_>; 5] = [
            Box::new(|k| self.range[k]),
            Box::new(|k| self.intensity[k]),
            Box::new(|k| self.point_index[k] as f64),
            Box::new(|k| self.component_id[k] as f64),
            Box::new(|k| if self.valid[k] { 1.0 } else { 0.0 }),
        ];
        for plane in planes.iter() {
            for k in 0..n {
                out.extend_from_slice(&plane(k).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProjectionError> {
        if bytes.len() < 16 || &bytes[0..4] != RANGE_IMAGE_MAGIC {
            return Err(ProjectionError::Format("not a range image (bad magic)".into()));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
        let (height, width, planes) = (word(1), word(2), word(3));
        let n = width * height;
        if planes != RANGE_IMAGE_PLANES as usize || bytes.len() != 16 + planes * n * 8 {
            return Err(ProjectionError::Format(format!(
                "{}x{} image with {} planes needs {} bytes, found {}",
                height,
                width,
                planes,
                16 + planes * n * 8,
                bytes.len()
            )));
        }
        let plane = |p: usize| -> Vec<f64> {
            bytes[16 + p * n * 8..16 + (p + 1) * n * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        };
        Ok(Self {
            width,
            height,
            range: plane(0),
            intensity: plane(1),
            point_index: plane(2).into_iter().map(|v| v as i64).collect(),
            component_id: plane(3).into_iter().map(|v| v as i64).collect(),
            valid: plane(4).into_iter().map(|v| v != 0.0).collect(),
        })
    }
}

/// Project every point; on collisions the nearest point wins (lower index
/// on exact ties). Points at the origin are skipped.
pub fn build_range_image(cloud: &PointCloud, components: Option<&ComponentMap>, cfg: &ProjectionConfig) -> RangeImage {
    let mut img = RangeImage::empty(cfg.width, cfg.height);
    for (idx, p) in cloud.points.iter().enumerate() {
        let Ok(Some(px)) = project_point(p.xyz(), cfg) else { continue };
        let k = img.index(px.u, px.v);
        let r = p.range();
        if img.valid[k] && img.range[k] <= r {
            continue;
        }
        img.valid[k] = true;
        img.range[k] = r;
        img.intensity[k] = p.i;
        img.point_index[k] = idx as i64;
        img.component_id[k] = components.map(|c| c.component_id[idx]).unwrap_or(-1);
    }
    img
}

/// Per-point labels from per-pixel labels.
///
/// In-view points take the label of their pixel, whether or not they won
/// it. Out-of-view points take the label of the valid pixel in their column
/// nearest to their unfloored row; with no valid pixel (or no direction)
/// they get `ignore_id`.
pub fn unproject_labels(
    img: &RangeImage,
    pixel_labels: &[ClassId],
    cloud: &PointCloud,
    cfg: &ProjectionConfig,
    ignore_id: ClassId,
) -> Vec<ClassId> {
    debug_assert_eq!(pixel_labels.len(), img.len());
    cloud
        .points
        .iter()
        .map(|p| {
            let Ok((u, v)) = continuous_coords(p.xyz(), cfg) else {
                return ignore_id;
            };
            let col = (u.floor().max(0.0) as usize).min(cfg.width - 1);
            if (0.0..cfg.height as f64).contains(&v) {
                let row = (v.floor() as usize).min(cfg.height - 1);
                return pixel_labels[img.index(col, row)];
            }
            (0..img.height)
                .filter(|&row| img.valid[img.index(col, row)])
                .min_by(|&a, &b| {
                    let da = (a as f64 + 0.5 - v).abs();
                    let db = (b as f64 + 0.5 - v).abs();
                    da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                })
                .map(|row| pixel_labels[img.index(col, row)])
                .unwrap_or(ignore_id)
        })
        .collect()
}
