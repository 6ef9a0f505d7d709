//! Back-projection of per-tile detections, cross-tile de-duplication with
//! greedy NMS, and per-class counting for images and whole missions.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detections::{Detection, Frame};
use crate::geometry::GeometryError;
use crate::manifest::TilesManifest;
use crate::taxonomy::ClassTaxonomy;
use crate::{Affine, BBox};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("detection references unknown tile {0:?}")]
    UnknownTile(String),
    #[error("detections mix {0:?} and {1:?} frames")]
    MixedFrames(Frame, Frame),
    #[error("expected {expected:?}-frame detections, got {actual:?}")]
    WrongFrame { expected: Frame, actual: Frame },
    #[error("image {0:?} has no georeference")]
    MissingGeoreference(String),
    #[error("detection on tile {tile:?} lies outside image {image:?}")]
    OutsideImage { tile: String, image: String },
    #[error("malformed world file: {0}")]
    WorldFile(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Thresholds used when merging and counting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeParams {
    /// A detection is suppressed when its IoU with a kept one is strictly above this.
    pub iou_threshold: f64,
    /// Separate knob for world-frame merging across images.
    pub mission_iou_threshold: f64,
    pub class_aware: bool,
    /// Detections scoring at or above this are counted.
    pub score_floor: f64,
}

impl Default for MergeParams {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            mission_iou_threshold: 0.5,
            class_aware: true,
            score_floor: 0.5,
        }
    }
}

/// Maps tile-frame detections into their source images' pixel frame,
/// grouped by image id. Boxes are clipped to the image bounds.
pub fn back_project(
    detections: &[Detection],
    manifest: &TilesManifest,
) -> Result<BTreeMap<String, Vec<Detection>>, MergeError> {
    let tiles = manifest.tile_index();
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        if d.frame != Frame::Tile {
            return Err(MergeError::WrongFrame {
                expected: Frame::Tile,
                actual: d.frame,
            });
        }
        let tile = tiles
            .get(d.provenance.as_str())
            .ok_or_else(|| MergeError::UnknownTile(d.provenance.clone()))?;
        let mapped = tile.to_source().apply_box(&d.bbox)?;
        let bounds = manifest
            .image(&tile.image_id)
            .map(|img| {
                BBox::new(0.0, 0.0, img.width as f64, img.height as f64)
                    .expect("manifest images have positive size")
            })
            .unwrap_or_else(|| tile.window());
        let bbox = if bounds.contains(&mapped) {
            mapped
        } else {
            bounds
                .intersect(&mapped)
                .ok_or_else(|| MergeError::OutsideImage {
                    tile: tile.tile_id.clone(),
                    image: tile.image_id.clone(),
                })?
        };
        out.entry(tile.image_id.clone()).or_default().push(Detection {
            bbox,
            frame: Frame::Image,
            ..d.clone()
        });
    }
    Ok(out)
}

/// Ranking used by NMS: score descending, then provenance, box coordinates
/// and class ascending.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.provenance.cmp(&b.provenance))
        .then_with(|| a.bbox.lexicographic_cmp(&b.bbox))
        .then_with(|| a.class.cmp(&b.class))
}

pub fn check_single_frame(detections: &[Detection]) -> Result<Option<Frame>, MergeError> {
    let Some(first) = detections.first() else {
        return Ok(None);
    };
    match detections.iter().find(|d| d.frame != first.frame) {
        Some(other) => Err(MergeError::MixedFrames(first.frame, other.frame)),
        None => Ok(Some(first.frame)),
    }
}

/// Uniform grid over kept boxes so each candidate is only compared against
/// kept boxes that can overlap it.
struct KeptIndex {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
    // boxes spanning too many cells to register individually
    oversized: Vec<usize>,
}

const MAX_CELLS_PER_AXIS: i64 = 16;

impl KeptIndex {
    fn new(boxes: &[&BBox]) -> Self {
        let mut extents: Vec<f64> = boxes.iter().map(|b| b.width().max(b.height())).collect();
        let cell = if extents.is_empty() {
            1.0
        } else {
            let mid = extents.len() / 2;
            let (_, median, _) = extents.select_nth_unstable_by(mid, f64::total_cmp);
            *median * 2.0
        };
        Self {
            cell,
            cells: HashMap::new(),
            oversized: Vec::new(),
        }
    }

    fn span(&self, b: &BBox) -> Option<(i64, i64, i64, i64)> {
        let x0 = (b.x_min() / self.cell).floor();
        let y0 = (b.y_min() / self.cell).floor();
        let x1 = (b.x_max() / self.cell).floor();
        let y1 = (b.y_max() / self.cell).floor();
        let fits = |v: f64| v.abs() < 1e15;
        if !(fits(x0) && fits(y0) && fits(x1) && fits(y1)) {
            return None;
        }
        let (x0, y0, x1, y1) = (x0 as i64, y0 as i64, x1 as i64, y1 as i64);
        if x1 - x0 >= MAX_CELLS_PER_AXIS || y1 - y0 >= MAX_CELLS_PER_AXIS {
            return None;
        }
        Some((x0, y0, x1, y1))
    }

    fn insert(&mut self, idx: usize, b: &BBox) {
        match self.span(b) {
            Some((x0, y0, x1, y1)) => {
                for cx in x0..=x1 {
                    for cy in y0..=y1 {
                        self.cells.entry((cx, cy)).or_default().push(idx);
                    }
                }
            }
            None => self.oversized.push(idx),
        }
    }

    /// Calls `f` on every kept index that may overlap `b` until it returns true.
    fn any(&self, b: &BBox, mut f: impl FnMut(usize) -> bool) -> bool {
        if self.oversized.iter().any(|&i| f(i)) {
            return true;
        }
        match self.span(b) {
            Some((x0, y0, x1, y1)) => {
                for cx in x0..=x1 {
                    for cy in y0..=y1 {
                        if let Some(v) = self.cells.get(&(cx, cy)) {
                            if v.iter().any(|&i| f(i)) {
                                return true;
                            }
                        }
                    }
                }
                false
            }
            None => self.cells.values().flatten().any(|&i| f(i)),
        }
    }
}

fn greedy_suppress(sorted: &[&Detection], iou_threshold: f64) -> Vec<usize> {
    let boxes: Vec<&BBox> = sorted.iter().map(|d| &d.bbox).collect();
    let mut index = KeptIndex::new(&boxes);
    let mut kept = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let suppressed = index.any(b, |k| boxes[k].iou(b) > iou_threshold);
        if !suppressed {
            index.insert(i, b);
            kept.push(i);
        }
    }
    kept
}

/// Greedy non-maximum suppression.
///
/// Detections are visited in [`rank_order`]; each is kept unless a kept
/// detection (of the same class when `class_aware`) overlaps it with IoU
/// strictly above `iou_threshold`. The result is in rank order.
pub fn nms(
    detections: &[Detection],
    iou_threshold: f64,
    class_aware: bool,
) -> Result<Vec<Detection>, MergeError> {
    check_single_frame(detections)?;
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| rank_order(a, b));
    let mut kept: Vec<Detection> = if class_aware {
        let mut groups: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
        for d in &sorted {
            groups.entry(d.class.as_str()).or_default().push(d);
        }
        groups
            .values()
            .flat_map(|g| {
                greedy_suppress(g, iou_threshold)
                    .into_iter()
                    .map(|i| g[i].clone())
                    .collect::<Vec<_>>()
            })
            .collect()
    } else {
        greedy_suppress(&sorted, iou_threshold)
            .into_iter()
            .map(|i| sorted[i].clone())
            .collect()
    };
    kept.sort_by(rank_order);
    Ok(kept)
}

/// Per-class counts for an image or a mission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub scope: String,
    pub counts: IndexMap<String, usize>,
    pub total: usize,
    pub nms_iou_threshold: f64,
    pub class_aware: bool,
    pub score_floor: f64,
}

impl CountReport {
    pub fn get(&self, class: &str) -> usize {
        self.counts.get(class).copied().unwrap_or(0)
    }

    /// `scope,class,count` rows (no header).
    pub fn csv_rows(&self) -> Vec<[String; 3]> {
        self.counts
            .iter()
            .map(|(c, n)| [self.scope.clone(), c.clone(), n.to_string()])
            .collect()
    }
}

/// Counts detections scoring at or above `params.score_floor`, per class.
pub fn count(
    scope: &str,
    detections: &[Detection],
    taxonomy: &ClassTaxonomy,
    params: &MergeParams,
    nms_iou_threshold: f64,
) -> CountReport {
    let mut counts: IndexMap<String, usize> = taxonomy
        .trained_classes()
        .iter()
        .map(|c| (c.clone(), 0))
        .collect();
    for d in detections.iter().filter(|d| d.score >= params.score_floor) {
        *counts.entry(d.class.clone()).or_insert(0) += 1;
    }
    CountReport {
        scope: scope.to_string(),
        total: counts.values().sum(),
        counts,
        nms_iou_threshold,
        class_aware: params.class_aware,
        score_floor: params.score_floor,
    }
}

/// NMS within one image followed by counting.
pub fn merge_image(
    image_id: &str,
    detections: &[Detection],
    taxonomy: &ClassTaxonomy,
    params: &MergeParams,
) -> Result<(Vec<Detection>, CountReport), MergeError> {
    let kept = nms(detections, params.iou_threshold, params.class_aware)?;
    let report = count(image_id, &kept, taxonomy, params, params.iou_threshold);
    Ok((kept, report))
}

/// Maps each image's detections to the world frame through its
/// georeference, runs NMS across the whole mission and counts.
pub fn merge_mission(
    mission_id: &str,
    per_image: &BTreeMap<String, Vec<Detection>>,
    georeferences: &BTreeMap<String, Affine>,
    taxonomy: &ClassTaxonomy,
    params: &MergeParams,
) -> Result<(Vec<Detection>, CountReport), MergeError> {
    let mut world = Vec::new();
    for (image_id, dets) in per_image {
        let geo = georeferences
            .get(image_id)
            .ok_or_else(|| MergeError::MissingGeoreference(image_id.clone()))?;
        for d in dets {
            if d.frame != Frame::Image {
                return Err(MergeError::WrongFrame {
                    expected: Frame::Image,
                    actual: d.frame,
                });
            }
            world.push(Detection {
                bbox: geo.apply_box(&d.bbox)?,
                frame: Frame::World,
                ..d.clone()
            });
        }
    }
    let kept = nms(&world, params.mission_iou_threshold, params.class_aware)?;
    let report = count(
        mission_id,
        &kept,
        taxonomy,
        params,
        params.mission_iou_threshold,
    );
    Ok((kept, report))
}

/// Parses a six-line world file (`A D B E C F`) into the image → world map
/// for continuous pixel-corner coordinates. World files reference the
/// centre of the top-left pixel, hence the half-pixel shift.
pub fn parse_world_file(text: &str) -> Result<Affine, MergeError> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| MergeError::WorldFile(format!("{t:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    let [a, d, b, e, c, f] = values[..] else {
        return Err(MergeError::WorldFile(format!(
            "expected 6 coefficients, found {}",
            values.len()
        )));
    };
    let t = Affine::new(a, b, c - 0.5 * a - 0.5 * b, d, e, f - 0.5 * d - 0.5 * e);
    if !t.is_invertible() {
        return Err(GeometryError::NonInvertibleTransform(t.determinant()).into());
    }
    Ok(t)
}

pub fn format_world_file(t: &Affine) -> String {
    let c = t.c + 0.5 * t.a + 0.5 * t.b;
    let f = t.f + 0.5 * t.d + 0.5 * t.e;
    format!("{}\n{}\n{}\n{}\n{}\n{}\n", t.a, t.d, t.b, t.e, c, f)
}
