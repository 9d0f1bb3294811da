//! Run configuration: a plain `key = value` file with `#` comments.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read config: {0}")]
    Io(String),
}

/// Every tunable of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // front end
    pub feature_cap: usize,
    pub fast_threshold: u8,
    pub feature_max_range: f64,
    pub max_hamming: u32,
    pub match_ratio: f64,
    pub min_matches: usize,
    pub intensity_cap: f64,
    pub gain_equalization: bool,
    // mapping
    pub ba_window: usize,
    pub plane_per_sector: usize,
    pub ground_voxel: f64,
    pub height_prior: f64,
    pub ransac_iterations: usize,
    pub ransac_seed: u64,
    pub local_map_radius: f64,
    pub use_intensity_odometry: bool,
    pub use_ba: bool,
    // pose graph
    pub kf_dist: f64,
    pub kf_angle: f64,
    pub kf_min_matches: usize,
    pub loop_gap: usize,
    pub loop_sim_threshold: f64,
    pub loop_min_inliers: usize,
    pub loop_max_residual: f64,
    pub vocabulary: Option<PathBuf>,
    // drift injected into the keyframe stream (evaluation aid)
    pub drift_trans_per_scan: f64,
    pub drift_yaw_per_scan: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            feature_cap: 200,
            fast_threshold: 20,
            feature_max_range: 10.0,
            max_hamming: 64,
            match_ratio: 0.8,
            min_matches: 8,
            intensity_cap: 512.0,
            gain_equalization: false,
            ba_window: 5,
            plane_per_sector: 20,
            ground_voxel: 0.4,
            height_prior: -0.5,
            ransac_iterations: 100,
            ransac_seed: 42,
            local_map_radius: 100.0,
            use_intensity_odometry: true,
            use_ba: true,
            kf_dist: 1.0,
            kf_angle: 0.2,
            kf_min_matches: 50,
            loop_gap: 50,
            loop_sim_threshold: 0.15,
            loop_min_inliers: 25,
            loop_max_residual: 0.3,
            vocabulary: None,
            drift_trans_per_scan: 0.0,
            drift_yaw_per_scan: 0.0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse::<T>().map_err(|_| ConfigError::Parse {
        line,
        message: format!("`{key}`: cannot parse `{v}`"),
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::Parse {
            line,
            message: format!("`{key}`: expected a boolean, got `{v}`"),
        }),
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Parse {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            cfg.set(line, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "feature_cap" => self.feature_cap = parse_num(line, key, v)?,
            "fast_threshold" => self.fast_threshold = parse_num(line, key, v)?,
            "feature_max_range" => self.feature_max_range = parse_num(line, key, v)?,
            "max_hamming" => self.max_hamming = parse_num(line, key, v)?,
            "match_ratio" => self.match_ratio = parse_num(line, key, v)?,
            "min_matches" => self.min_matches = parse_num(line, key, v)?,
            "intensity_cap" => self.intensity_cap = parse_num(line, key, v)?,
            "gain_equalization" => self.gain_equalization = parse_bool(line, key, v)?,
            "ba_window" => self.ba_window = parse_num(line, key, v)?,
            "plane_per_sector" => self.plane_per_sector = parse_num(line, key, v)?,
            "ground_voxel" => self.ground_voxel = parse_num(line, key, v)?,
            "height_prior" => self.height_prior = parse_num(line, key, v)?,
            "ransac_iterations" => self.ransac_iterations = parse_num(line, key, v)?,
            "ransac_seed" => self.ransac_seed = parse_num(line, key, v)?,
            "local_map_radius" => self.local_map_radius = parse_num(line, key, v)?,
            "use_intensity_odometry" => self.use_intensity_odometry = parse_bool(line, key, v)?,
            "use_ba" => self.use_ba = parse_bool(line, key, v)?,
            "kf_dist" => self.kf_dist = parse_num(line, key, v)?,
            "kf_angle" => self.kf_angle = parse_num(line, key, v)?,
            "kf_min_matches" => self.kf_min_matches = parse_num(line, key, v)?,
            "loop_gap" => self.loop_gap = parse_num(line, key, v)?,
            "loop_sim_threshold" => self.loop_sim_threshold = parse_num(line, key, v)?,
            "loop_min_inliers" => self.loop_min_inliers = parse_num(line, key, v)?,
            "loop_max_residual" => self.loop_max_residual = parse_num(line, key, v)?,
            "vocabulary" => {
                self.vocabulary = if v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "drift_trans_per_scan" => self.drift_trans_per_scan = parse_num(line, key, v)?,
            "drift_yaw_per_scan" => self.drift_yaw_per_scan = parse_num(line, key, v)?,
            _ => {
                return Err(ConfigError::Parse {
                    line,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| {
            Err(ConfigError::Invalid {
                key: key.into(),
                message: message.into(),
            })
        };
        let positive = [
            ("match_ratio", self.match_ratio),
            ("feature_max_range", self.feature_max_range),
            ("intensity_cap", self.intensity_cap),
            ("ground_voxel", self.ground_voxel),
            ("local_map_radius", self.local_map_radius),
            ("kf_dist", self.kf_dist),
            ("kf_angle", self.kf_angle),
            ("loop_sim_threshold", self.loop_sim_threshold),
            ("loop_max_residual", self.loop_max_residual),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return bad(k, "must be positive");
            }
        }
        let counts = [
            ("feature_cap", self.feature_cap),
            ("max_hamming", self.max_hamming as usize),
            ("min_matches", self.min_matches),
            ("ba_window", self.ba_window),
            ("plane_per_sector", self.plane_per_sector),
            ("ransac_iterations", self.ransac_iterations),
            ("kf_min_matches", self.kf_min_matches),
            ("loop_gap", self.loop_gap),
            ("loop_min_inliers", self.loop_min_inliers),
            ("fast_threshold", self.fast_threshold as usize),
        ];
        for (k, v) in counts {
            if v == 0 {
                return bad(k, "must be positive");
            }
        }
        if self.min_matches < 3 {
            return bad("min_matches", "must be at least 3");
        }
        if self.feature_cap < self.min_matches {
            return bad("feature_cap", "must be at least min_matches");
        }
        if self.match_ratio > 1.0 {
            return bad("match_ratio", "must not exceed 1");
        }
        if !self.height_prior.is_finite()
            || !self.drift_trans_per_scan.is_finite()
            || !self.drift_yaw_per_scan.is_finite()
        {
            return bad("height_prior", "must be finite");
        }
        Ok(())
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config, ConfigError> {
    Config::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
        assert_eq!(
            Config::parse("# only a comment\n\n").unwrap(),
            Config::default()
        );
    }

    #[test]
    fn feature_cap_is_parsed() {
        let c = Config::parse("feature_cap = 200\n").unwrap();
        assert_eq!(c.feature_cap, 200);
        let c = Config::parse("feature_cap = 150 # fewer\nkf_dist=2.5").unwrap();
        assert_eq!(c.feature_cap, 150);
        assert_eq!(c.kf_dist, 2.5);
    }

    #[test]
    fn bad_value_names_line() {
        let e = Config::parse("kf_dist = 1\nfeature_cap = banana\n").unwrap_err();
        match e {
            ConfigError::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("feature_cap"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let e = Config::parse("featur_cap = 3").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 1, .. }));
        assert!(Config::parse("no equals sign").is_err());
    }

    #[test]
    fn invariants_enforced() {
        assert!(matches!(
            Config::parse("feature_cap = 5"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            Config::parse("kf_dist = -1"),
            Err(ConfigError::Invalid { .. })
        ));
        let c = Config::parse("vocabulary = /tmp/v.ivoc\nuse_ba = false").unwrap();
        assert_eq!(c.vocabulary, Some(PathBuf::from("/tmp/v.ivoc")));
        assert!(!c.use_ba);
    }
}
