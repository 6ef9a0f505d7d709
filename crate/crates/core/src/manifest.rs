//! Tiles manifest: the JSON contract between the tiler, the augmentor, the
//! detector bridge, merge-count and the evaluator.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentationOp;
use crate::dataset::LabeledBox;
use crate::tiler::TilePlan;
use crate::{Affine, BBox};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("failed to read manifest {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("duplicate tile id {0:?} in manifest")]
    DuplicateTile(String),
    #[error("tile {tile:?} references unknown image {image:?}")]
    UnknownImage { tile: String, image: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
}

/// Where an augmented tile came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_tile: String,
    pub op: AugmentationOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub tile_id: String,
    pub image_id: String,
    /// Tile origin in source-image pixels.
    pub offset_x: u32,
    pub offset_y: u32,
    pub width: u32,
    pub height: u32,
    /// Retained annotations in tile coordinates.
    pub annotations: Vec<LabeledBox>,
    /// Set when no annotation survived clipping.
    pub background: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<Provenance>,
}

impl TileRecord {
    /// Tile frame → source-image frame.
    pub fn to_source(&self) -> Affine {
        let shift = Affine::translation(self.offset_x as f64, self.offset_y as f64);
        match &self.augmentation {
            None => shift,
            Some(p) => {
                // augmented pixels were produced by `op` from a tile of the
                // original (pre-op) size; undo the op first
                let (w, h) = p.op.source_size(self.width, self.height);
                let forward = p.op.transform(w, h);
                let undo = forward.invert().expect("augmentation ops are invertible");
                undo.then(&shift)
            }
        }
    }

    /// The tile window in source-image pixels.
    pub fn window(&self) -> BBox {
        let (w, h) = match &self.augmentation {
            Some(p) => p.op.source_size(self.width, self.height),
            None => (self.width, self.height),
        };
        BBox::from_xywh(
            self.offset_x as f64,
            self.offset_y as f64,
            w as f64,
            h as f64,
        )
        .expect("tiles have positive size")
    }

    pub fn frame(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64).expect("tiles have positive size")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilesManifest {
    pub plan: TilePlan,
    pub images: Vec<ImageEntry>,
    pub tiles: Vec<TileRecord>,
}

impl TilesManifest {
    pub fn new(plan: TilePlan) -> Self {
        Self {
            plan,
            images: Vec::new(),
            tiles: Vec::new(),
        }
    }

    pub fn from_json_str(text: &str, origin: &str) -> Result<Self, ManifestError> {
        let m: Self = serde_json::from_str(text).map_err(|source| ManifestError::Json {
            path: origin.to_string(),
            source,
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        std::fs::write(path, self.to_json_string()).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.tiles {
            if !seen.insert(t.tile_id.as_str()) {
                return Err(ManifestError::DuplicateTile(t.tile_id.clone()));
            }
            if self.image(&t.image_id).is_none() {
                return Err(ManifestError::UnknownImage {
                    tile: t.tile_id.clone(),
                    image: t.image_id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn tile_index(&self) -> HashMap<&str, &TileRecord> {
        self.tiles.iter().map(|t| (t.tile_id.as_str(), t)).collect()
    }

    /// Copy restricted to the given tile ids (image entries kept only when referenced).
    pub fn subset<S: AsRef<str>>(&self, tile_ids: &[S]) -> Self {
        let keep: std::collections::HashSet<&str> = tile_ids.iter().map(AsRef::as_ref).collect();
        let tiles: Vec<TileRecord> = self
            .tiles
            .iter()
            .filter(|t| keep.contains(t.tile_id.as_str()))
            .cloned()
            .collect();
        let images = self
            .images
            .iter()
            .filter(|i| tiles.iter().any(|t| t.image_id == i.image_id))
            .cloned()
            .collect();
        Self {
            plan: self.plan,
            images,
            tiles,
        }
    }
}
