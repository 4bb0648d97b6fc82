//! Browser bindings: render a synthetic scan as a range image, show its
//! pre-segmentation, and project single points.

use wasm_bindgen::prelude::*;

use udma::preseg::{presegment, ComponentCategory, ComponentMap, PresegConfig};
use udma::projection::{build_range_image, project_point, ProjectionConfig, RangeImage};
use udma::synth::{generate_scan, BeamModel, SceneFamily};

/// A rendered scan: the range image plus its components.
#[wasm_bindgen]
pub struct Scene {
    image: RangeImage,
    map: ComponentMap,
    points: usize,
    tilt_deg: f64,
}

fn category_rgb(c: ComponentCategory) -> [u8; 3] {
    match c {
        ComponentCategory::Ground => [140, 110, 80],
        ComponentCategory::Car => [235, 70, 60],
        ComponentCategory::Wall => [80, 150, 230],
        ComponentCategory::Unknown => [170, 170, 170],
    }
}

fn rgba(image: &RangeImage, color: impl Fn(usize) -> [u8; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * image.len());
    for k in 0..image.len() {
        let [r, g, b] = if image.valid[k] { color(k) } else { [12, 12, 16] };
        out.extend_from_slice(&[r, g, b, 255]);
    }
    out
}

#[wasm_bindgen]
impl Scene {
    /// Sample a street scene from `seed` and scan it with `rings` x `azimuths`
    /// beams.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, rings: usize, azimuths: usize) -> Result<Scene, JsError> {
        let rings = rings.clamp(4, 128);
        let azimuths = azimuths.clamp(16, 4096);
        let family = SceneFamily {
            beams: BeamModel {
                rings,
                azimuths,
                ..SceneFamily::default().beams
            },
            ..SceneFamily::default()
        };
        let spec = family.sample(seed);
        let scan = generate_scan(&spec, seed).map_err(|e| JsError::new(&e.to_string()))?;
        let mut cfg = PresegConfig::default();
        cfg.ransac.seed = seed;
        let (ground, map) = presegment(&scan.cloud, &cfg).map_err(|e| JsError::new(&e.to_string()))?;
        let image = build_range_image(&scan.cloud, Some(&map), &family.beams.projection());
        Ok(Scene {
            image,
            map,
            points: scan.cloud.len(),
            tilt_deg: ground.tilt().to_degrees(),
        })
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    /// Range channel as RGBA, near is bright.
    pub fn range_rgba(&self) -> Vec<u8> {
        let max = self.image.range.iter().copied().fold(0.0f64, f64::max).max(1e-9);
        rgba(&self.image, |k| {
            let t = 1.0 - self.image.range[k] / max;
            let g = (40.0 + 215.0 * t * t) as u8;
            [g, g, g]
        })
    }

    /// Pixels colored by prior category.
    pub fn category_rgba(&self) -> Vec<u8> {
        rgba(&self.image, |k| {
            let c = self.image.component_id[k];
            if c < 0 {
                category_rgb(ComponentCategory::Unknown)
            } else {
                category_rgb(self.map.categories[c as usize])
            }
        })
    }

    /// Pixels colored by component id.
    pub fn component_rgba(&self) -> Vec<u8> {
        rgba(&self.image, |k| {
            let c = self.image.component_id[k];
            if c < 0 {
                return [60, 60, 60];
            }
            if self.map.ground_component == Some(c as usize) {
                return [90, 75, 60];
            }
            let h = (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            [(64 + (h >> 56) % 192) as u8, (64 + (h >> 40) % 192) as u8, (64 + (h >> 24) % 192) as u8]
        })
    }

    /// Component and category under pixel `(u, v)`, as text.
    pub fn describe_pixel(&self, u: usize, v: usize) -> String {
        if u >= self.image.width || v >= self.image.height {
            return String::new();
        }
        let k = self.image.index(u, v);
        if !self.image.valid[k] {
            return format!("({u}, {v}): no return");
        }
        let c = self.image.component_id[k];
        let cat = if c < 0 { "unassigned" } else { self.map.categories[c as usize].name() };
        format!("({u}, {v}): range {:.2} m, component {c}, {cat}", self.image.range[k])
    }

    /// One-line summary of the pre-segmentation.
    pub fn summary(&self) -> String {
        let mut counts = [0usize; 4];
        for &c in &self.map.categories {
            counts[match c {
                ComponentCategory::Ground => 0,
                ComponentCategory::Car => 1,
                ComponentCategory::Wall => 2,
                ComponentCategory::Unknown => 3,
            }] += 1;
        }
        format!(
            "{} points, {} valid pixels, ground tilt {:.2} deg; components: {} ground, {} car, {} wall, {} unknown",
            self.points,
            self.image.valid_count(),
            self.tilt_deg,
            counts[0],
            counts[1],
            counts[2],
            counts[3]
        )
    }
}

/// Pixel `[u, v]` of a point under a `width x height` projection, or an
/// empty array when it falls outside the vertical field of view.
#[wasm_bindgen]
pub fn project(x: f64, y: f64, z: f64, width: usize, height: usize, fov_up_deg: f64, fov_down_deg: f64) -> Result<Vec<u32>, JsError> {
    let cfg = ProjectionConfig {
        width,
        height,
        fov_up: fov_up_deg.to_radians(),
        fov_down: fov_down_deg.to_radians(),
    };
    cfg.validate().map_err(|e| JsError::new(&e.to_string()))?;
    match project_point([x, y, z], &cfg).map_err(|e| JsError::new(&e.to_string()))? {
        Some(p) => Ok(vec![p.u as u32, p.v as u32]),
        None => Ok(Vec::new()),
    }
}
