//! Point clouds, labels, source samples and their on-disk formats.
//!
//! * Scan: little-endian `f32` records `(x, y, z, i)`, 16 bytes per point.
//! * Label: little-endian `u32` per point (or pixel); the lower 16 bits are
//!   the raw semantic id, mapped to a train id through a [`LabelMap`].
//! * Source sample: `u32 height, u32 width`, then `height*width*3`
//!   little-endian `f32` channel values in HWC order. Its labels live in a
//!   separate label file with one record per pixel.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub use crate::config::{load_config, parse_config, ConfigError, RunConfig};

pub type ClassId = usize;

pub const ROAD: ClassId = 0;
pub const SIDEWALK: ClassId = 1;
pub const BUILDING: ClassId = 2;
pub const VEGETATION: ClassId = 3;
pub const TERRAIN: ClassId = 4;
pub const CAR: ClassId = 5;
pub const NUM_CLASSES: usize = 6;
/// One past the last class, so `C + 1` sized arrays can hold it.
pub const IGNORE_ID: ClassId = NUM_CLASSES;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("invalid data: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Coarse tag used by pre-segmentation and instance alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorCategory {
    Car,
    Ground,
    Wall,
}

impl PriorCategory {
    pub const ALL: [PriorCategory; 3] = [PriorCategory::Car, PriorCategory::Ground, PriorCategory::Wall];

    pub fn index(self) -> usize {
        match self {
            PriorCategory::Car => 0,
            PriorCategory::Ground => 1,
            PriorCategory::Wall => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PriorCategory::Car => "car",
            PriorCategory::Ground => "ground",
            PriorCategory::Wall => "wall",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTaxonomy {
    classes: Vec<(String, ClassId)>,
    priors: Vec<(PriorCategory, Vec<ClassId>)>,
    ignore_id: ClassId,
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        Self::standard()
    }
}

impl ClassTaxonomy {
    /// The six evaluation classes with car / ground / wall priors.
    pub fn standard() -> Self {
        let names = ["road", "sidewalk", "building", "vegetation", "terrain", "car"];
        Self {
            classes: names.iter().enumerate().map(|(i, n)| (n.to_string(), i)).collect(),
            priors: vec![
                (PriorCategory::Car, vec![CAR]),
                (PriorCategory::Ground, vec![ROAD, SIDEWALK, TERRAIN]),
                (PriorCategory::Wall, vec![BUILDING, VEGETATION]),
            ],
            ignore_id: IGNORE_ID,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn ignore_id(&self) -> ClassId {
        self.ignore_id
    }

    pub fn classes(&self) -> &[(String, ClassId)] {
        &self.classes
    }

    pub fn class_name(&self, id: ClassId) -> &str {
        self.classes
            .iter()
            .find(|(_, c)| *c == id)
            .map(|(n, _)| n.as_str())
            .unwrap_or("ignore")
    }

    pub fn class_id(&self, name: &str) -> Option<ClassId> {
        self.classes.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    /// Classes a prior category may contain.
    pub fn allowed(&self, prior: PriorCategory) -> &[ClassId] {
        self.priors
            .iter()
            .find(|(p, _)| *p == prior)
            .map(|(_, c)| c.as_slice())
            .unwrap_or(&[])
    }

    pub fn prior_of(&self, class: ClassId) -> Option<PriorCategory> {
        self.priors
            .iter()
            .find(|(_, cs)| cs.contains(&class))
            .map(|(p, _)| *p)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for name in ["road", "sidewalk", "building", "vegetation", "terrain", "car"] {
            if self.class_id(name).is_none() {
                return Err(DataError::Invalid(format!("taxonomy lacks class {}", name)));
            }
        }
        let mut seen = Vec::new();
        for (_, cs) in &self.priors {
            for c in cs {
                if seen.contains(c) {
                    return Err(DataError::Invalid(format!("class {} is in two prior categories", c)));
                }
                seen.push(*c);
            }
        }
        if self.ignore_id < self.num_classes() {
            return Err(DataError::Invalid("ignore id collides with a class id".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Reflectance in `[0, 1]`.
    pub i: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, i: f64) -> Self {
        Self { x, y, z, i }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Distance from the sensor origin.
    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.i.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub labels: Option<Vec<ClassId>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points, labels: None }
    }

    pub fn with_labels(points: Vec<Point>, labels: Vec<ClassId>) -> Result<Self, DataError> {
        let cloud = Self {
            points,
            labels: Some(labels),
        };
        cloud.validate(IGNORE_ID + 1)?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Check finiteness and label bounds (`label < limit`).
    pub fn validate(&self, limit: ClassId) -> Result<(), DataError> {
        if let Some(i) = self.points.iter().position(|p| !p.is_finite()) {
            return Err(DataError::Invalid(format!("point {} is not finite", i)));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(DataError::Invalid(format!(
                    "{} labels for {} points",
                    labels.len(),
                    self.points.len()
                )));
            }
            if let Some(l) = labels.iter().find(|&&l| l >= limit) {
                return Err(DataError::Invalid(format!("label {} out of range", l)));
            }
        }
        Ok(())
    }
}

/// A labelled source-domain image, `height x width x 3`, stored HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub labels: Vec<ClassId>,
}

impl SourceSample {
    pub fn new(height: usize, width: usize, image: Vec<f64>, labels: Vec<ClassId>) -> Result<Self, DataError> {
        if image.len() != height * width * 3 || labels.len() != height * width {
            return Err(DataError::Invalid(format!(
                "source sample {}x{} has {} channel values and {} labels",
                height,
                width,
                image.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > IGNORE_ID) {
            return Err(DataError::Invalid(format!("source label {} out of range", l)));
        }
        Ok(Self {
            height,
            width,
            image,
            labels,
        })
    }

    pub fn channel(&self, row: usize, col: usize, c: usize) -> f64 {
        self.image[(row * self.width + col) * 3 + c]
    }
}

/// Raw semantic id -> train id. Unmapped ids become the ignore id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    table: BTreeMap<u32, ClassId>,
    ignore_id: ClassId,
}

impl Default for LabelMap {
    fn default() -> Self {
        Self::semantic_kitti()
    }
}

impl LabelMap {
    pub fn new(table: BTreeMap<u32, ClassId>, ignore_id: ClassId) -> Self {
        Self { table, ignore_id }
    }

    /// SemanticKITTI raw ids for the six evaluation classes.
    pub fn semantic_kitti() -> Self {
        let table = [(40, ROAD), (48, SIDEWALK), (50, BUILDING), (70, VEGETATION), (72, TERRAIN), (10, CAR)]
            .into_iter()
            .collect();
        Self {
            table,
            ignore_id: IGNORE_ID,
        }
    }

    pub fn map(&self, raw: u32) -> ClassId {
        self.table.get(&(raw & 0xFFFF)).copied().unwrap_or(self.ignore_id)
    }

    /// Smallest raw id mapping to `train`; `0` for the ignore id.
    pub fn raw_of(&self, train: ClassId) -> u32 {
        self.table
            .iter()
            .find(|(_, &t)| t == train)
            .map(|(&r, _)| r)
            .unwrap_or(0)
    }

    pub fn insert(&mut self, raw: u32, train: ClassId) {
        self.table.insert(raw & 0xFFFF, train);
    }
}

// ---- scans ---------------------------------------------------------------

pub fn decode_scan(bytes: &[u8]) -> Result<PointCloud, String> {
    if bytes.len() % 16 != 0 {
        return Err(format!("{} bytes is not a multiple of the 16-byte point record", bytes.len()));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            Point::new(f(0), f(1), f(2), f(3))
        })
        .collect();
    Ok(PointCloud::new(points))
}

pub fn encode_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.i] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_scan(path: impl AsRef<Path>) -> Result<PointCloud, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_scan(&bytes).map_err(|msg| DataError::Format {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn write_scan(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, encode_scan(cloud)).map_err(io_err(path))
}

// ---- labels ----------------------------------------------------------------

pub fn decode_labels(bytes: &[u8], n_points: usize, map: &LabelMap) -> Result<Vec<ClassId>, String> {
    if bytes.len() % 4 != 0 || bytes.len() / 4 != n_points {
        return Err(format!(
            "expected {} label records, found {} bytes ({} records)",
            n_points,
            bytes.len(),
            bytes.len() / 4
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| map.map(u32::from_le_bytes(b.try_into().unwrap())))
        .collect())
}

pub fn encode_labels(labels: &[ClassId], map: &LabelMap) -> Vec<u8> {
    labels.iter().flat_map(|&l| map.raw_of(l).to_le_bytes()).collect()
}

pub fn read_labels(path: impl AsRef<Path>, n_points: usize, map: &LabelMap) -> Result<Vec<ClassId>, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_labels(&bytes, n_points, map).map_err(|msg| DataError::Format {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[ClassId], map: &LabelMap) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, encode_labels(labels, map)).map_err(io_err(path))
}

// ---- source samples ----------------------------------------------------------

pub fn encode_source_image(sample: &SourceSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + sample.image.len() * 4);
    out.extend_from_slice(&(sample.height as u32).to_le_bytes());
    out.extend_from_slice(&(sample.width as u32).to_le_bytes());
    for &v in &sample.image {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn read_source(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>, map: &LabelMap) -> Result<SourceSample, DataError> {
    let path = image_path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let fmt = |msg: String| DataError::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 8 {
        return Err(fmt(format!("{} bytes is too short for the header", bytes.len())));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != h * w * 12 {
        return Err(fmt(format!("{}x{}x3 image needs {} bytes, found {}", h, w, h * w * 12, body.len())));
    }
    let image = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let labels = read_labels(label_path, h * w, map)?;
    SourceSample::new(h, w, image, labels)
}

pub fn write_source(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>, sample: &SourceSample, map: &LabelMap) -> Result<(), DataError> {
    let path = image_path.as_ref();
    fs::write(path, encode_source_image(sample)).map_err(io_err(path))?;
    write_labels(label_path, &sample.labels, map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_point_scan() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 0.0, 0.0, 0.5, 0.0, 1.0, 0.0, 0.2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes.len(), 32);
        let cloud = decode_scan(&bytes).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points[0], Point::new(1.0, 0.0, 0.0, 0.5));
        assert_eq!(cloud.points[1], Point::new(0.0, 1.0, 0.0, 0.2f32 as f64));
    }

    #[test]
    fn empty_and_malformed_scans() {
        assert_eq!(decode_scan(&[]).unwrap().len(), 0);
        let err = decode_scan(&[0u8; 17]).unwrap_err();
        assert!(err.contains("17"), "{}", err);
    }

    #[test]
    fn scan_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, [0u8; 17]).unwrap();
        assert!(matches!(read_scan(&p), Err(DataError::Format { .. })));
        assert!(matches!(read_scan(dir.path().join("missing.bin")), Err(DataError::Io { .. })));
    }

    #[test]
    fn label_remapping() {
        let map = LabelMap::semantic_kitti();
        let bytes = 40u32.to_le_bytes();
        assert_eq!(decode_labels(&bytes, 1, &map).unwrap(), vec![ROAD]);
        let bytes = 999u32.to_le_bytes();
        assert_eq!(decode_labels(&bytes, 1, &map).unwrap(), vec![IGNORE_ID]);
        // instance id in the upper half is dropped
        let bytes = ((7u32 << 16) | 10).to_le_bytes();
        assert_eq!(decode_labels(&bytes, 1, &map).unwrap(), vec![CAR]);
    }

    #[test]
    fn label_count_mismatch() {
        let map = LabelMap::semantic_kitti();
        let bytes: Vec<u8> = [40u32, 48].iter().flat_map(|v| v.to_le_bytes()).collect();
        let err = decode_labels(&bytes, 3, &map).unwrap_err();
        assert!(err.contains('3') && err.contains('2'), "{}", err);
    }

    #[test]
    fn taxonomy_priors() {
        let t = ClassTaxonomy::standard();
        t.validate().unwrap();
        assert_eq!(t.allowed(PriorCategory::Ground), &[ROAD, SIDEWALK, TERRAIN]);
        assert_eq!(t.allowed(PriorCategory::Wall), &[BUILDING, VEGETATION]);
        assert_eq!(t.allowed(PriorCategory::Car), &[CAR]);
        assert_eq!(t.ignore_id(), t.num_classes());
    }

    #[test]
    fn source_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = LabelMap::semantic_kitti();
        let s = SourceSample::new(2, 3, (0..18).map(|v| v as f64 * 0.25).collect(), vec![0, 1, 2, 3, 4, IGNORE_ID]).unwrap();
        let (a, b) = (dir.path().join("x.src"), dir.path().join("x.label"));
        write_source(&a, &b, &s, &map).unwrap();
        assert_eq!(read_source(&a, &b, &map).unwrap(), s);
    }

    proptest! {
        #[test]
        fn scan_round_trip(raw in proptest::collection::vec((-100f32..100.0, -100f32..100.0, -10f32..10.0, 0f32..1.0), 0..64)) {
            let cloud = PointCloud::new(raw.iter().map(|&(x, y, z, i)| Point::new(x as f64, y as f64, z as f64, i as f64)).collect());
            let back = decode_scan(&encode_scan(&cloud)).unwrap();
            prop_assert_eq!(back, cloud);
        }

        #[test]
        fn label_map_is_total(raw in any::<u32>()) {
            let map = LabelMap::semantic_kitti();
            let t = map.map(raw);
            prop_assert!(t < NUM_CLASSES || t == IGNORE_ID);
        }
    }
}
