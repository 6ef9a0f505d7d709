//! Overlapping sliding-window tiling of survey frames.
//!
//! Windows advance by the stride along each axis; the last window on an axis
//! is pulled back to end exactly at the image edge, so no tile is padded.
//! Annotations crossing a window edge are kept only when strictly more than
//! `retention_threshold` of their area lies inside the window.

use std::path::Path;

use image::{DynamicImage, GenericImageView};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Annotation, LabeledBox, SurveyImage};
use crate::manifest::{ImageEntry, TileRecord, TilesManifest};
use crate::BBox;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("invalid tile plan: {0}")]
    InvalidPlan(String),
    #[error("image {image_id} is {width}x{height}, smaller than a {tile_width}x{tile_height} tile")]
    ImageSmallerThanTile {
        image_id: String,
        width: u32,
        height: u32,
        tile_width: u32,
        tile_height: u32,
    },
    #[error("failed to decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("image {image_id}: raster is {actual:?} but metadata says {expected:?}")]
    DimensionMismatch {
        image_id: String,
        expected: (u32, u32),
        actual: (u32, u32),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilePlan {
    pub tile_width: u32,
    pub tile_height: u32,
    pub stride_x: u32,
    pub stride_y: u32,
    pub retention_threshold: f64,
}

impl Default for TilePlan {
    fn default() -> Self {
        Self {
            tile_width: 640,
            tile_height: 640,
            stride_x: 400,
            stride_y: 400,
            retention_threshold: 0.8,
        }
    }
}

impl TilePlan {
    pub fn validate(&self) -> Result<(), TileError> {
        if self.tile_width == 0 || self.tile_height == 0 {
            return Err(TileError::InvalidPlan("tile size must be positive".into()));
        }
        if self.stride_x == 0 || self.stride_x > self.tile_width {
            return Err(TileError::InvalidPlan(format!(
                "stride_x {} must be in 1..={}",
                self.stride_x, self.tile_width
            )));
        }
        if self.stride_y == 0 || self.stride_y > self.tile_height {
            return Err(TileError::InvalidPlan(format!(
                "stride_y {} must be in 1..={}",
                self.stride_y, self.tile_height
            )));
        }
        if !(self.retention_threshold > 0.0 && self.retention_threshold <= 1.0) {
            return Err(TileError::InvalidPlan(format!(
                "retention_threshold {} must be in (0, 1]",
                self.retention_threshold
            )));
        }
        Ok(())
    }

    /// Largest box extent guaranteed to fit whole inside some tile.
    pub fn containment_margin(&self) -> (u32, u32) {
        (
            self.tile_width - self.stride_x,
            self.tile_height - self.stride_y,
        )
    }
}

/// Window origins along one axis: `0, stride, 2·stride, …` while the window
/// stays inside, then `dim − tile` for the edge window.
pub fn axis_offsets(dim: u32, tile: u32, stride: u32) -> Vec<u32> {
    debug_assert!(tile <= dim && stride > 0);
    let last = dim - tile;
    let mut offsets: Vec<u32> = (0..)
        .map(|k: u32| k * stride)
        .take_while(|&o| o < last)
        .collect();
    offsets.push(last);
    offsets
}

/// Tile origins for a `width × height` frame, row-major (y outer, x inner).
pub fn plan_tiles(
    image_id: &str,
    width: u32,
    height: u32,
    plan: &TilePlan,
) -> Result<Vec<(u32, u32)>, TileError> {
    plan.validate()?;
    if width < plan.tile_width || height < plan.tile_height {
        return Err(TileError::ImageSmallerThanTile {
            image_id: image_id.to_string(),
            width,
            height,
            tile_width: plan.tile_width,
            tile_height: plan.tile_height,
        });
    }
    let xs = axis_offsets(width, plan.tile_width, plan.stride_x);
    let ys = axis_offsets(height, plan.tile_height, plan.stride_y);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect())
}

pub fn tile_id(image_id: &str, x: u32, y: u32) -> String {
    format!("{image_id}_{x}_{y}")
}

/// Keeps boxes with more than `retention_threshold` of their area inside
/// `window`, clips them to it and shifts them into window coordinates.
pub fn clip_annotations(
    window: &BBox,
    annotations: &[LabeledBox],
    retention_threshold: f64,
) -> Vec<LabeledBox> {
    annotations
        .iter()
        .filter_map(|ann| {
            let inside = window.intersect(&ann.bbox)?;
            if inside.area() / ann.bbox.area() > retention_threshold {
                Some(LabeledBox::new(
                    ann.class.clone(),
                    inside.translate(-window.x_min(), -window.y_min()),
                ))
            } else {
                None
            }
        })
        .collect()
}

/// Tile records for one image, without touching pixels.
pub fn tile_records(
    image_id: &str,
    width: u32,
    height: u32,
    annotations: &[LabeledBox],
    plan: &TilePlan,
) -> Result<Vec<TileRecord>, TileError> {
    let offsets = plan_tiles(image_id, width, height, plan)?;
    Ok(offsets
        .into_par_iter()
        .map(|(x, y)| {
            let window = BBox::from_xywh(
                x as f64,
                y as f64,
                plan.tile_width as f64,
                plan.tile_height as f64,
            )
            .expect("positive tile size");
            let kept = clip_annotations(&window, annotations, plan.retention_threshold);
            TileRecord {
                tile_id: tile_id(image_id, x, y),
                image_id: image_id.to_string(),
                offset_x: x,
                offset_y: y,
                width: plan.tile_width,
                height: plan.tile_height,
                background: kept.is_empty(),
                annotations: kept,
                augmentation: None,
            }
        })
        .collect())
}

pub fn decode_image(path: &Path) -> Result<DynamicImage, TileError> {
    image::open(path).map_err(|e| TileError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Reads only the header to get the raster size.
pub fn probe_dimensions(path: &Path) -> Result<(u32, u32), TileError> {
    image::image_dimensions(path).map_err(|e| TileError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// A cropped tile with its record.
pub struct Tile {
    pub record: TileRecord,
    pub pixels: DynamicImage,
}

/// Crops every planned tile out of `pixels` (exact copies, no resampling).
pub fn extract_tiles(
    pixels: &DynamicImage,
    image: &SurveyImage,
    annotations: &[Annotation],
    plan: &TilePlan,
) -> Result<Vec<Tile>, TileError> {
    let actual = pixels.dimensions();
    if actual != (image.width, image.height) {
        return Err(TileError::DimensionMismatch {
            image_id: image.image_id.clone(),
            expected: (image.width, image.height),
            actual,
        });
    }
    let labeled: Vec<LabeledBox> = annotations.iter().map(Annotation::labeled).collect();
    let records = tile_records(&image.image_id, image.width, image.height, &labeled, plan)?;
    Ok(records
        .into_par_iter()
        .map(|record| {
            let pixels =
                pixels.crop_imm(record.offset_x, record.offset_y, record.width, record.height);
            Tile { record, pixels }
        })
        .collect())
}

/// Assembles a manifest from per-image records, in image order.
pub fn build_manifest(
    plan: TilePlan,
    per_image: impl IntoIterator<Item = (ImageEntry, Vec<TileRecord>)>,
) -> TilesManifest {
    let mut manifest = TilesManifest::new(plan);
    for (entry, records) in per_image {
        manifest.images.push(entry);
        manifest.tiles.extend(records);
    }
    manifest
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn offsets_full_frame() {
        let xs = axis_offsets(8192, 640, 400);
        let expected: Vec<u32> = (0..19).map(|k| k * 400).chain([7552]).collect();
        assert_eq!(xs, expected);
        assert_eq!(xs.len(), 20);
        let ys = axis_offsets(5460, 640, 400);
        assert_eq!(ys.len(), 14);
        assert_eq!(ys[12], 4800);
        assert_eq!(*ys.last().unwrap(), 4820);
        let plan = TilePlan::default();
        assert_eq!(plan_tiles("f", 8192, 5460, &plan).unwrap().len(), 280);
    }

    #[test]
    fn offsets_small_cases() {
        assert_eq!(axis_offsets(640, 640, 400), vec![0]);
        assert_eq!(axis_offsets(1000, 640, 400), vec![0, 360]);
        assert_eq!(axis_offsets(1040, 640, 400), vec![0, 400]);
        assert_eq!(axis_offsets(641, 640, 400), vec![0, 1]);
        assert_eq!(
            plan_tiles("i", 640, 640, &TilePlan::default()).unwrap(),
            vec![(0, 0)]
        );
    }

    /// Brute-force coverage: every pixel index along the axis lies in some window.
    fn covers(dim: u32, tile: u32, offsets: &[u32]) -> bool {
        (0..dim).all(|p| offsets.iter().any(|&o| p >= o && p < o + tile))
    }

    #[test]
    fn offsets_cover_axis() {
        for dim in [640u32, 700, 1000, 1040, 1041, 5460, 8192] {
            let offs = axis_offsets(dim, 640, 400);
            assert!(covers(dim, 640, &offs), "dim {dim}");
            assert!(offs.windows(2).all(|w| w[0] < w[1]));
            assert!(offs.iter().all(|&o| o + 640 <= dim));
        }
        // {0, 360} is the clamped grid for a 1000 px axis
        assert!(covers(1000, 640, &[0, 360]));
        assert!(!covers(1000, 640, &[0]));
    }

    #[test]
    fn rejects_small_images_and_bad_plans() {
        assert!(matches!(
            plan_tiles("i", 639, 800, &TilePlan::default()),
            Err(TileError::ImageSmallerThanTile { .. })
        ));
        let bad = TilePlan {
            stride_x: 700,
            ..TilePlan::default()
        };
        assert!(matches!(bad.validate(), Err(TileError::InvalidPlan(_))));
        let bad = TilePlan {
            retention_threshold: 0.0,
            ..TilePlan::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clip_rule() {
        let window = b(100.0, 100.0, 740.0, 740.0);
        let inside = LabeledBox::new("Mixed Egret", b(200.0, 200.0, 220.0, 230.0));
        let got = clip_annotations(&window, std::slice::from_ref(&inside), 0.8);
        assert_eq!(got, vec![LabeledBox::new("Mixed Egret", b(100.0, 100.0, 120.0, 130.0))]);

        // exactly 80 % inside → dropped
        let eighty = LabeledBox::new("Other", b(98.0, 200.0, 108.0, 210.0));
        assert!(clip_annotations(&window, &[eighty], 0.8).is_empty());

        // 9 of 10 columns inside → kept and clipped to 9×10
        let ninety = LabeledBox::new("Other", b(99.0, 200.0, 109.0, 210.0));
        let got = clip_annotations(&window, &[ninety], 0.8);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].bbox, b(0.0, 100.0, 9.0, 110.0));

        let outside = LabeledBox::new("Other", b(0.0, 0.0, 50.0, 50.0));
        assert!(clip_annotations(&window, &[outside], 0.8).is_empty());
    }

    #[test]
    fn records_flag_background_tiles() {
        let anns = vec![LabeledBox::new("Other", b(10.0, 10.0, 30.0, 30.0))];
        let recs = tile_records("im", 1000, 640, &anns, &TilePlan::default()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].tile_id, "im_0_0");
        assert!(!recs[0].background);
        assert_eq!(recs[1].tile_id, "im_360_0");
        assert!(recs[1].background);
    }

    fn survey(w: u32, h: u32) -> SurveyImage {
        SurveyImage {
            image_id: "s".into(),
            path: "s.png".into(),
            width: w,
            height: h,
            georeference: None,
        }
    }

    #[test]
    fn extraction_copies_pixels() {
        let plain = DynamicImage::ImageLuma8(GrayImage::from_pixel(1000, 700, Luma([77])));
        let tiles = extract_tiles(&plain, &survey(1000, 700), &[], &TilePlan::default()).unwrap();
        assert_eq!(tiles.len(), 4);
        for t in &tiles {
            assert_eq!(t.pixels.dimensions(), (640, 640));
            assert!(t.pixels.to_luma8().pixels().all(|p| p.0[0] == 77));
        }

        let mut marked = GrayImage::new(1000, 700);
        marked.put_pixel(500, 300, Luma([255]));
        let marked = DynamicImage::ImageLuma8(marked);
        let tiles = extract_tiles(&marked, &survey(1000, 700), &[], &TilePlan::default()).unwrap();
        for t in &tiles {
            let win = t.record.window();
            let contains = 500.0 >= win.x_min()
                && 500.0 < win.x_max()
                && 300.0 >= win.y_min()
                && 300.0 < win.y_max();
            let hits = t.pixels.to_luma8().pixels().filter(|p| p.0[0] == 255).count();
            assert_eq!(hits, usize::from(contains), "{}", t.record.tile_id);
            if contains {
                let lx = 500 - t.record.offset_x;
                let ly = 300 - t.record.offset_y;
                assert_eq!(t.pixels.to_luma8().get_pixel(lx, ly).0[0], 255);
            }
        }
    }

    #[test]
    fn extraction_checks_dimensions() {
        let img = DynamicImage::ImageLuma8(GrayImage::new(800, 800));
        assert!(matches!(
            extract_tiles(&img, &survey(900, 800), &[], &TilePlan::default()),
            Err(TileError::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn small_boxes_fully_contained_somewhere(
            w in 640u32..3000, h in 640u32..3000,
            fx in 0.0..1.0f64, fy in 0.0..1.0f64,
            bw in 1.0..=240.0f64, bh in 1.0..=240.0f64,
        ) {
            let plan = TilePlan::default();
            let bw = bw.min(w as f64);
            let bh = bh.min(h as f64);
            let x = fx * (w as f64 - bw);
            let y = fy * (h as f64 - bh);
            let bx = BBox::from_xywh(x, y, bw, bh).unwrap();
            let offsets = plan_tiles("p", w, h, &plan).unwrap();
            let found = offsets.iter().any(|&(ox, oy)| {
                BBox::from_xywh(ox as f64, oy as f64, 640.0, 640.0).unwrap().contains(&bx)
            });
            prop_assert!(found, "{:?} in {}x{}", bx, w, h);
        }

        #[test]
        fn clipped_boxes_stay_in_tile_and_map_back(
            x in -50.0..700.0f64, y in -50.0..700.0f64,
            bw in 1.0..300.0f64, bh in 1.0..300.0f64,
            ox in 0u32..400, oy in 0u32..400,
        ) {
            let window = BBox::from_xywh(ox as f64, oy as f64, 640.0, 640.0).unwrap();
            let ann = LabeledBox::new("Other", BBox::from_xywh(x, y, bw, bh).unwrap());
            let frame = BBox::new(0.0, 0.0, 640.0, 640.0).unwrap();
            for kept in clip_annotations(&window, std::slice::from_ref(&ann), 0.8) {
                prop_assert!(frame.contains(&kept.bbox));
                let back = kept.bbox.translate(ox as f64, oy as f64);
                prop_assert_eq!(Some(back), window.intersect(&ann.bbox));
            }
        }

        #[test]
        fn interior_boxes_are_all_kept(
            boxes in proptest::collection::vec((0.0..500.0f64, 0.0..500.0f64, 1.0..140.0f64, 1.0..140.0f64), 0..30)
        ) {
            let window = BBox::new(0.0, 0.0, 640.0, 640.0).unwrap();
            let anns: Vec<LabeledBox> = boxes.iter()
                .map(|&(x, y, w, h)| LabeledBox::new("Other", BBox::from_xywh(x, y, w, h).unwrap()))
                .collect();
            prop_assert_eq!(clip_annotations(&window, &anns, 0.8).len(), anns.len());
        }
    }
}
