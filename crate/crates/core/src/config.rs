//! Run configuration: a flat `key = value` text file.
//!
//! Blank lines and `#` comments are ignored, keys may appear in any order
//! and at most once, and unset keys keep their defaults. Angles are given
//! in degrees. See the README for the full key table.

use std::path::Path;

use crate::model::ModelConfig;
use crate::preseg::{CategoryConfig, ClusterConfig, PresegConfig, RansacConfig};
use crate::projection::ProjectionConfig;
use crate::training::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { key: String, line: usize },
    #[error("line {line}: `{key}` cannot parse `{value}`")]
    Parse { key: String, value: String, line: usize },
    #[error("`{key}` = {value} is out of range (must be {range})")]
    Range { key: String, value: String, range: String },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunConfig {
    pub seed: u64,

    pub range_width: usize,
    pub range_height: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    /// Ranges are divided by this before entering the network.
    pub range_scale: f64,

    pub ransac_iterations: usize,
    pub ransac_threshold: f64,
    pub ransac_max_tilt_deg: f64,
    pub cluster_base: f64,
    pub cluster_range_coeff: f64,
    pub wall_min_height: f64,
    pub wall_min_spread: f64,
    pub car_max_length: f64,
    pub car_max_width: f64,
    pub car_max_height: f64,
    pub car_min_points: usize,

    pub feature_dim: usize,
    pub knn: usize,
    pub disc_hidden: usize,

    pub lambda_ce: f64,
    pub lambda_sa: f64,
    pub lambda_ia: f64,
    pub ce_literal_sum: bool,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub train_steps: usize,
    pub fine_tune_steps: usize,
    /// Learning rate of the fine-tuning stage.
    pub lr_fine_tune: f64,

    pub source_dir: String,
    pub target_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            range_width: 2048,
            range_height: 64,
            fov_up_deg: 3.0,
            fov_down_deg: 25.0,
            range_scale: 50.0,
            ransac_iterations: 200,
            ransac_threshold: 0.15,
            ransac_max_tilt_deg: 8.0,
            cluster_base: 0.5,
            cluster_range_coeff: 0.01,
            wall_min_height: 2.5,
            wall_min_spread: 4.0,
            car_max_length: 6.0,
            car_max_width: 3.0,
            car_max_height: 2.5,
            car_min_points: 20,
            feature_dim: 16,
            knn: 4,
            disc_hidden: 256,
            lambda_ce: 1.0,
            lambda_sa: 0.001,
            lambda_ia: 0.001,
            ce_literal_sum: false,
            lr_generator: 2.5e-4,
            lr_discriminator: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            train_steps: 1000,
            fine_tune_steps: 200,
            lr_fine_tune: 2.5e-4,
            source_dir: String::new(),
            target_dir: String::new(),
        }
    }
}

fn range_err(key: &str, value: impl ToString, range: &str) -> ConfigError {
    ConfigError::Range {
        key: key.to_string(),
        value: value.to_string(),
        range: range.to_string(),
    }
}

impl RunConfig {
    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            width: self.range_width,
            height: self.range_height,
            fov_up: self.fov_up_deg.to_radians(),
            fov_down: self.fov_down_deg.to_radians(),
        }
    }

    pub fn preseg(&self) -> PresegConfig {
        PresegConfig {
            ransac: RansacConfig {
                iterations: self.ransac_iterations,
                inlier_threshold: self.ransac_threshold,
                max_tilt: self.ransac_max_tilt_deg.to_radians(),
                seed: self.seed,
            },
            cluster: ClusterConfig {
                base_threshold: self.cluster_base,
                range_coeff: self.cluster_range_coeff,
            },
            category: CategoryConfig {
                wall_min_height: self.wall_min_height,
                wall_min_spread: self.wall_min_spread,
                car_box: [self.car_max_length, self.car_max_width, self.car_max_height],
                car_min_points: self.car_min_points,
            },
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            knn: self.knn,
            disc_hidden: self.disc_hidden,
            ..ModelConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lambda_ce: self.lambda_ce,
            lambda_sa: self.lambda_sa,
            lambda_ia: self.lambda_ia,
            ce_literal_sum: self.ce_literal_sum,
            lr_generator: self.lr_generator,
            lr_discriminator: self.lr_discriminator,
            betas: (self.adam_beta1, self.adam_beta2),
            eps: self.adam_eps,
            lr_fine_tune: self.lr_fine_tune,
            range_scale: self.range_scale,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let pos_usize = [
            ("range_width", self.range_width),
            ("range_height", self.range_height),
            ("ransac_iterations", self.ransac_iterations),
            ("feature_dim", self.feature_dim),
            ("knn", self.knn),
            ("disc_hidden", self.disc_hidden),
        ];
        for (k, v) in pos_usize {
            if v < 1 {
                return Err(range_err(k, v, ">= 1"));
            }
        }
        let positive = [
            ("range_scale", self.range_scale),
            ("ransac_threshold", self.ransac_threshold),
            ("cluster_base", self.cluster_base),
            ("wall_min_height", self.wall_min_height),
            ("wall_min_spread", self.wall_min_spread),
            ("car_max_length", self.car_max_length),
            ("car_max_width", self.car_max_width),
            ("car_max_height", self.car_max_height),
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("lr_fine_tune", self.lr_fine_tune),
            ("adam_eps", self.adam_eps),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(range_err(k, v, "finite and > 0"));
            }
        }
        let non_negative = [
            ("cluster_range_coeff", self.cluster_range_coeff),
            ("lambda_ce", self.lambda_ce),
            ("lambda_sa", self.lambda_sa),
            ("lambda_ia", self.lambda_ia),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(range_err(k, v, "finite and >= 0"));
            }
        }
        for (k, v) in [("fov_up_deg", self.fov_up_deg), ("fov_down_deg", self.fov_down_deg)] {
            if !(-90.0..=90.0).contains(&v) {
                return Err(range_err(k, v, "in [-90, 90] degrees"));
            }
        }
        if !(self.fov_up_deg + self.fov_down_deg > 0.0) {
            return Err(range_err("fov_up_deg", self.fov_up_deg, "such that fov_up_deg + fov_down_deg > 0"));
        }
        if !(0.0..90.0).contains(&self.ransac_max_tilt_deg) {
            return Err(range_err("ransac_max_tilt_deg", self.ransac_max_tilt_deg, "in [0, 90) degrees"));
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(range_err(k, v, "in [0, 1)"));
            }
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Parse {
        key: key.to_string(),
        value: value.to_string(),
        line,
    })
}

/// Parse configuration text; see the module docs for the format.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut c = RunConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Duplicate {
                key: key.to_string(),
                line,
            });
        }
        macro_rules! set {
            ($($name:ident),* ; $($s:ident),*) => {
                match key {
                    $(stringify!($name) => c.$name = parse(key, value, line)?,)*
                    $(stringify!($s) => c.$s = value.trim_matches('"').to_string(),)*
                    _ => {
                        return Err(ConfigError::UnknownKey {
                            key: key.to_string(),
                            line,
                        })
                    }
                }
            };
        }
        set!(
            seed, range_width, range_height, fov_up_deg, fov_down_deg, range_scale,
            ransac_iterations, ransac_threshold, ransac_max_tilt_deg, cluster_base,
            cluster_range_coeff, wall_min_height, wall_min_spread, car_max_length,
            car_max_width, car_max_height, car_min_points, feature_dim, knn, disc_hidden,
            lambda_ce, lambda_sa, lambda_ia, ce_literal_sum, lr_generator, lr_discriminator,
            adam_beta1, adam_beta2, adam_eps, train_steps, fine_tune_steps, lr_fine_tune;
            source_dir, target_dir
        );
    }
    c.validate()?;
    Ok(c)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}
