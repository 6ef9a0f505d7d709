//! Minority-class oversampling with geometric and photometric augmentation.

use image::{DynamicImage, ImageBuffer, Pixel, Primitive};
use num_traits::{NumCast, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledBox;
use crate::geometry::GeometryError;
use crate::manifest::{Provenance, TileRecord, TilesManifest};
use crate::seed::rng_for;
use crate::taxonomy::ClassTaxonomy;
use crate::Affine;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("rotate_90 needs a square tile, got {width}x{height}")]
    NonSquareRotation { width: u32, height: u32 },
    #[error("invalid oversampling policy: {0}")]
    InvalidPolicy(String),
    #[error("unsupported pixel format {0:?}")]
    UnsupportedPixelFormat(image::ColorType),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    HorizontalMirror,
    VerticalMirror,
    #[serde(rename = "rotate_90")]
    Rotate90,
    BrightnessContrast,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::HorizontalMirror,
        AugmentKind::VerticalMirror,
        AugmentKind::Rotate90,
        AugmentKind::BrightnessContrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::HorizontalMirror => "horizontal_mirror",
            AugmentKind::VerticalMirror => "vertical_mirror",
            AugmentKind::Rotate90 => "rotate_90",
            AugmentKind::BrightnessContrast => "brightness_contrast",
        }
    }
}

/// A concrete augmentation with its parameters resolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationOp {
    HorizontalMirror,
    VerticalMirror,
    /// Clockwise quarter turn.
    #[serde(rename = "rotate_90")]
    Rotate90,
    /// `v' = clamp((v − ½)·factor + ½ + delta)` on intensities normalized to `[0, 1]`.
    BrightnessContrast { delta: f64, factor: f64 },
}

impl AugmentationOp {
    pub fn kind(&self) -> AugmentKind {
        match self {
            AugmentationOp::HorizontalMirror => AugmentKind::HorizontalMirror,
            AugmentationOp::VerticalMirror => AugmentKind::VerticalMirror,
            AugmentationOp::Rotate90 => AugmentKind::Rotate90,
            AugmentationOp::BrightnessContrast { .. } => AugmentKind::BrightnessContrast,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }

    /// Box transform for a `width × height` input tile.
    pub fn transform(&self, width: u32, height: u32) -> Affine {
        match self {
            AugmentationOp::HorizontalMirror => Affine::mirror_horizontal(width as f64),
            AugmentationOp::VerticalMirror => Affine::mirror_vertical(height as f64),
            AugmentationOp::Rotate90 => Affine::rotate_90_cw(height as f64),
            AugmentationOp::BrightnessContrast { .. } => Affine::identity(),
        }
    }

    /// Input tile size that produces an output of `width × height`.
    pub fn source_size(&self, width: u32, height: u32) -> (u32, u32) {
        match self {
            AugmentationOp::Rotate90 => (height, width),
            _ => (width, height),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OversamplePolicy {
    /// A tile qualifies when its minority share is strictly above this.
    pub dominance_threshold: f64,
    /// One augmented copy per listed op for every qualifying tile.
    pub ops: Vec<AugmentKind>,
    pub seed: u64,
    /// Brightness offsets are drawn from `[-max_brightness_delta, max_brightness_delta]`.
    pub max_brightness_delta: f64,
    /// Contrast factors are drawn from this closed range.
    pub contrast_range: [f64; 2],
}

impl Default for OversamplePolicy {
    fn default() -> Self {
        Self {
            dominance_threshold: 0.8,
            ops: AugmentKind::ALL.to_vec(),
            seed: 0,
            max_brightness_delta: 0.2,
            contrast_range: [0.8, 1.2],
        }
    }
}

impl OversamplePolicy {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.dominance_threshold > 0.0 && self.dominance_threshold <= 1.0) {
            return Err(AugmentError::InvalidPolicy(format!(
                "dominance_threshold {} must be in (0, 1]",
                self.dominance_threshold
            )));
        }
        if !(self.max_brightness_delta >= 0.0) {
            return Err(AugmentError::InvalidPolicy(
                "max_brightness_delta must be non-negative".into(),
            ));
        }
        let [lo, hi] = self.contrast_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(AugmentError::InvalidPolicy(format!(
                "contrast_range [{lo}, {hi}] must be positive and ordered"
            )));
        }
        Ok(())
    }

    /// Resolves `kind` for a tile; photometric parameters come from a stream
    /// keyed by (seed, tile id, op), independent of processing order.
    pub fn resolve(&self, kind: AugmentKind, tile_id: &str) -> AugmentationOp {
        match kind {
            AugmentKind::HorizontalMirror => AugmentationOp::HorizontalMirror,
            AugmentKind::VerticalMirror => AugmentationOp::VerticalMirror,
            AugmentKind::Rotate90 => AugmentationOp::Rotate90,
            AugmentKind::BrightnessContrast => {
                let mut rng = rng_for(self.seed, &["augment", tile_id, kind.name()]);
                let d = self.max_brightness_delta;
                let delta = if d > 0.0 { rng.gen_range(-d..=d) } else { 0.0 };
                let [lo, hi] = self.contrast_range;
                let factor = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                AugmentationOp::BrightnessContrast { delta, factor }
            }
        }
    }
}

/// Share of a tile's annotations that belong to minority classes; `None`
/// for tiles without annotations.
pub fn minority_share(tile: &TileRecord, taxonomy: &ClassTaxonomy) -> Option<f64> {
    if tile.annotations.is_empty() {
        return None;
    }
    let minority = tile
        .annotations
        .iter()
        .filter(|a| taxonomy.is_minority(&a.class))
        .count();
    Some(minority as f64 / tile.annotations.len() as f64)
}

/// Tiles whose minority share is strictly above the dominance threshold.
pub fn select_minority_tiles<'a>(
    tiles: &'a [TileRecord],
    taxonomy: &ClassTaxonomy,
    policy: &OversamplePolicy,
) -> Vec<&'a str> {
    tiles
        .iter()
        .filter(|t| minority_share(t, taxonomy).is_some_and(|s| s > policy.dominance_threshold))
        .map(|t| t.tile_id.as_str())
        .collect()
}

/// Applies `op` to the boxes of a `width × height` tile.
pub fn augment_boxes(
    annotations: &[LabeledBox],
    width: u32,
    height: u32,
    op: &AugmentationOp,
) -> Result<Vec<LabeledBox>, AugmentError> {
    if matches!(op, AugmentationOp::Rotate90) && width != height {
        return Err(AugmentError::NonSquareRotation { width, height });
    }
    let t = op.transform(width, height);
    annotations
        .iter()
        .map(|a| Ok(LabeledBox::new(a.class.clone(), t.apply_box(&a.bbox)?)))
        .collect()
}

/// Applies `op` to tile pixels and boxes together.
pub fn augment_tile(
    pixels: &DynamicImage,
    annotations: &[LabeledBox],
    op: &AugmentationOp,
) -> Result<(DynamicImage, Vec<LabeledBox>), AugmentError> {
    let (w, h) = (pixels.width(), pixels.height());
    let boxes = augment_boxes(annotations, w, h, op)?;
    let out = match *op {
        AugmentationOp::HorizontalMirror => pixels.fliph(),
        AugmentationOp::VerticalMirror => pixels.flipv(),
        AugmentationOp::Rotate90 => pixels.rotate90(),
        AugmentationOp::BrightnessContrast { delta, factor } => {
            brightness_contrast(pixels, delta, factor)?
        }
    };
    Ok((out, boxes))
}

pub fn brightness_contrast(
    pixels: &DynamicImage,
    delta: f64,
    factor: f64,
) -> Result<DynamicImage, AugmentError> {
    let mut out = pixels.clone();
    if delta == 0.0 && factor == 1.0 {
        return Ok(out);
    }
    match &mut out {
        DynamicImage::ImageLuma8(b) => adjust(b, delta, factor),
        DynamicImage::ImageLumaA8(b) => adjust(b, delta, factor),
        DynamicImage::ImageRgb8(b) => adjust(b, delta, factor),
        DynamicImage::ImageRgba8(b) => adjust(b, delta, factor),
        DynamicImage::ImageLuma16(b) => adjust(b, delta, factor),
        DynamicImage::ImageLumaA16(b) => adjust(b, delta, factor),
        DynamicImage::ImageRgb16(b) => adjust(b, delta, factor),
        DynamicImage::ImageRgba16(b) => adjust(b, delta, factor),
        DynamicImage::ImageRgb32F(b) => adjust(b, delta, factor),
        DynamicImage::ImageRgba32F(b) => adjust(b, delta, factor),
        other => return Err(AugmentError::UnsupportedPixelFormat(other.color())),
    }
    Ok(out)
}

fn adjust<P: Pixel>(buf: &mut ImageBuffer<P, Vec<P::Subpixel>>, delta: f64, factor: f64) {
    let max = P::Subpixel::DEFAULT_MAX_VALUE.to_f64().unwrap_or(1.0);
    let integral = max > 1.0;
    let color = P::CHANNEL_COUNT as usize - P::HAS_ALPHA as usize;
    for px in buf.pixels_mut() {
        for c in &mut px.channels_mut()[..color] {
            let v = c.to_f64().unwrap_or(0.0) / max;
            let v = ((v - 0.5) * factor + 0.5 + delta).clamp(0.0, 1.0) * max;
            let v = if integral { v.round() } else { v };
            *c = <P::Subpixel as NumCast>::from(v).unwrap_or(*c);
        }
    }
}

/// Work item: produce `record` by applying `op` to `source_tile`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentJob {
    pub source_tile: String,
    pub op: AugmentationOp,
    pub record: TileRecord,
}

pub fn augmented_tile_id(tile_id: &str, op: &AugmentationOp) -> String {
    format!("{tile_id}~{}", op.name())
}

/// Extends a training manifest with one augmented copy per configured op
/// for every qualifying tile. Original records are kept in place; new ones
/// follow in (tile, op) order.
pub fn build_augmented_set(
    train: &TilesManifest,
    taxonomy: &ClassTaxonomy,
    policy: &OversamplePolicy,
) -> Result<(TilesManifest, Vec<AugmentJob>), AugmentError> {
    policy.validate()?;
    let index = train.tile_index();
    let mut jobs = Vec::new();
    for tile_id in select_minority_tiles(&train.tiles, taxonomy, policy) {
        let source = index[tile_id];
        for &kind in &policy.ops {
            let op = policy.resolve(kind, tile_id);
            let annotations = augment_boxes(&source.annotations, source.width, source.height, &op)?;
            let (width, height) = match op {
                AugmentationOp::Rotate90 => (source.height, source.width),
                _ => (source.width, source.height),
            };
            let record = TileRecord {
                tile_id: augmented_tile_id(tile_id, &op),
                image_id: source.image_id.clone(),
                offset_x: source.offset_x,
                offset_y: source.offset_y,
                width,
                height,
                background: annotations.is_empty(),
                annotations,
                augmentation: Some(Provenance {
                    source_tile: tile_id.to_string(),
                    op,
                }),
            };
            jobs.push(AugmentJob {
                source_tile: tile_id.to_string(),
                op,
                record,
            });
        }
    }
    let mut out = train.clone();
    out.tiles.extend(jobs.iter().map(|j| j.record.clone()));
    Ok((out, jobs))
}
