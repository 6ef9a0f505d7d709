//! Run configuration: one TOML file, overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use waterbird_core::augment::OversamplePolicy;
use waterbird_core::dataset::SplitRatios;
use waterbird_core::eval::EvalConfig;
use waterbird_core::merge::MergeParams;
use waterbird_core::oracle::OracleConfig;
use waterbird_core::tiler::TilePlan;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Output root; every command reads and writes beneath it.
    pub out: PathBuf,
    /// Survey rasters. The image id is the file stem; a world file next to
    /// the raster (`.wld`, or `.pgw`/`.jgw`/`.tfw` style) georeferences it.
    pub images: Vec<PathBuf>,
    /// Annotation CSV (`image_id,class_name,x_min,y_min,x_max,y_max`).
    pub annotations: Option<PathBuf>,
    /// Taxonomy TOML; the built-in taxonomy when absent.
    pub taxonomy: Option<PathBuf>,
    pub mission_id: String,
    pub tile: TilePlan,
    pub split: SplitConfig,
    pub augment: AugmentConfig,
    pub oracle: OracleSection,
    pub merge: MergeParams,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            images: Vec::new(),
            annotations: None,
            taxonomy: None,
            mission_id: "mission".into(),
            tile: TilePlan::default(),
            split: SplitConfig::default(),
            augment: AugmentConfig::default(),
            oracle: OracleSection::default(),
            merge: MergeParams::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: SplitRatios,
    /// Keep all tiles of a source image in the same subset.
    pub by_image: bool,
}

/// Oversampling policy minus the seed, which comes from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub dominance_threshold: f64,
    pub ops: Vec<waterbird_core::augment::AugmentKind>,
    pub max_brightness_delta: f64,
    pub contrast_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let p = OversamplePolicy::default();
        Self {
            dominance_threshold: p.dominance_threshold,
            ops: p.ops,
            max_brightness_delta: p.max_brightness_delta,
            contrast_range: p.contrast_range,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub jitter: f64,
    pub drop_rate: f64,
    pub spurious_rate: f64,
    pub misclass_rate: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            jitter: 0.0,
            drop_rate: 0.0,
            spurious_rate: 0.0,
            misclass_rate: 0.0,
        }
    }
}

/// Values given on the command line; `None` means "not given".
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::input(format!("invalid config {origin}: {e}")))
    }

    /// Defaults, then the file (if any), then command-line overrides.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::input(format!("cannot read config {}: {e}", p.display())))?;
                let mut cfg = Self::from_toml_str(&text, &p.display().to_string())?;
                // relative paths in the file are relative to the file
                let base = p.parent().unwrap_or(Path::new(""));
                cfg.rebase(base);
                cfg
            }
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        self.images.iter_mut().for_each(fix);
        if let Some(p) = self.annotations.as_mut() {
            fix(p);
        }
        if let Some(p) = self.taxonomy.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.tile.validate().map_err(CliError::input)?;
        self.split.ratios.validate().map_err(CliError::input)?;
        self.augment_policy().validate().map_err(CliError::input)?;
        self.oracle_config().validate().map_err(CliError::input)?;
        self.eval.validate().map_err(CliError::input)?;
        let m = &self.merge;
        for (name, v) in [
            ("merge.iou_threshold", m.iou_threshold),
            ("merge.mission_iou_threshold", m.mission_iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CliError::input(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !m.score_floor.is_finite() {
            return Err(CliError::input("merge.score_floor must be finite"));
        }
        Ok(())
    }

    pub fn augment_policy(&self) -> OversamplePolicy {
        OversamplePolicy {
            dominance_threshold: self.augment.dominance_threshold,
            ops: self.augment.ops.clone(),
            seed: self.seed,
            max_brightness_delta: self.augment.max_brightness_delta,
            contrast_range: self.augment.contrast_range,
        }
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            jitter: self.oracle.jitter,
            drop_rate: self.oracle.drop_rate,
            spurious_rate: self.oracle.spurious_rate,
            misclass_rate: self.oracle.misclass_rate,
            seed: self.seed,
        }
    }

    pub fn out_path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }
}
