//! Perturbation oracle: a seeded stand-in for a trained detector that emits
//! the ground truth with controlled jitter, drops, spurious boxes and label
//! swaps.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detections::WireDetection;
use crate::manifest::TileRecord;
use crate::seed::rng_for;
use crate::taxonomy::ClassTaxonomy;
use crate::BBox;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid oracle config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Maximum per-coordinate box perturbation in pixels.
    pub jitter: f64,
    pub drop_rate: f64,
    /// Probability of one false detection per tile.
    pub spurious_rate: f64,
    pub misclass_rate: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            jitter: 0.0,
            drop_rate: 0.0,
            spurious_rate: 0.0,
            misclass_rate: 0.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        for (name, v) in [
            ("drop_rate", self.drop_rate),
            ("spurious_rate", self.spurious_rate),
            ("misclass_rate", self.misclass_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(OracleError::InvalidConfig(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(OracleError::InvalidConfig(format!("jitter {} must be >= 0", self.jitter)));
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        self.jitter == 0.0
            && self.drop_rate == 0.0
            && self.spurious_rate == 0.0
            && self.misclass_rate == 0.0
    }
}

const SPURIOUS_MIN: f64 = 8.0;
const SPURIOUS_MAX: f64 = 60.0;

fn jittered(bbox: &BBox, frame: &BBox, jitter: f64, rng: &mut impl Rng) -> BBox {
    if jitter == 0.0 {
        return *bbox;
    }
    let mut c = bbox.coords();
    for v in &mut c {
        *v += rng.gen_range(-jitter..=jitter);
    }
    let x0 = c[0].min(c[2]).max(frame.x_min());
    let x1 = c[0].max(c[2]).min(frame.x_max());
    let y0 = c[1].min(c[3]).max(frame.y_min());
    let y1 = c[1].max(c[3]).min(frame.y_max());
    BBox::new(x0, y0, x1, y1).unwrap_or(*bbox)
}

fn detect_tile(tile: &TileRecord, cfg: &OracleConfig, taxonomy: &ClassTaxonomy) -> Vec<WireDetection> {
    let mut rng = rng_for(cfg.seed, &["oracle", &tile.tile_id]);
    let classes = taxonomy.trained_classes();
    let frame = tile.frame();
    let noiseless = cfg.is_noiseless();
    let mut out = Vec::new();
    let emit = |out: &mut Vec<WireDetection>, class: &str, b: &BBox, score: f64| {
        out.push(WireDetection {
            tile_id: tile.tile_id.clone(),
            class: class.to_string(),
            x_min: b.x_min(),
            y_min: b.y_min(),
            x_max: b.x_max(),
            y_max: b.y_max(),
            score,
        })
    };
    for ann in &tile.annotations {
        // every draw happens regardless of outcome so streams stay aligned
        let dropped = rng.gen_bool(cfg.drop_rate);
        let swap = rng.gen_bool(cfg.misclass_rate);
        let pick = rng.gen_range(0..classes.len().max(2) - 1);
        let score = if noiseless { 1.0 } else { rng.gen_range(0.51..=1.0) };
        let b = jittered(&ann.bbox, &frame, cfg.jitter, &mut rng);
        if dropped {
            continue;
        }
        let class = if swap && classes.len() > 1 {
            let own = taxonomy.index_of(&ann.class).unwrap_or(usize::MAX);
            // uniform over the other classes
            let j = if pick >= own { pick + 1 } else { pick };
            classes[j.min(classes.len() - 1)].as_str()
        } else {
            ann.class.as_str()
        };
        emit(&mut out, class, &b, score);
    }
    if rng.gen_bool(cfg.spurious_rate) {
        let w = rng.gen_range(SPURIOUS_MIN..=SPURIOUS_MAX).min(frame.width());
        let h = rng.gen_range(SPURIOUS_MIN..=SPURIOUS_MAX).min(frame.height());
        let x = rng.gen_range(0.0..=frame.width() - w);
        let y = rng.gen_range(0.0..=frame.height() - h);
        let class = &classes[rng.gen_range(0..classes.len())];
        let score = rng.gen_range(0.0..=0.7);
        let b = BBox::from_xywh(x, y, w, h).expect("spurious box has positive size");
        emit(&mut out, class, &b, score);
    }
    out
}

/// Detections for every tile, in tile order. Each tile draws from its own
/// stream so output is independent of scheduling.
pub fn oracle_detect(
    tiles: &[TileRecord],
    cfg: &OracleConfig,
    taxonomy: &ClassTaxonomy,
) -> Result<Vec<WireDetection>, OracleError> {
    cfg.validate()?;
    let per_tile: Vec<Vec<WireDetection>> = tiles
        .par_iter()
        .map(|t| detect_tile(t, cfg, taxonomy))
        .collect();
    Ok(per_tile.into_iter().flatten().collect())
}
