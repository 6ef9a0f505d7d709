//! Detections and their JSON-lines wire formats.
//!
//! Detector output arrives one object per line in tile coordinates:
//!
//! ```text
//! {"tile_id": "img_400_0", "class": "Mixed Egret", "x_min": 1.0, "y_min": 2.0, "x_max": 30.0, "y_max": 41.5, "score": 0.93}
//! ```
//!
//! Merged detections (image or world frame) are written with an explicit
//! `frame` tag and `source` id instead of `tile_id`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::ClassTaxonomy;
use crate::BBox;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("detections line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coordinate space a detection's box lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Tile,
    Image,
    World,
}

/// A scored, class-labeled box.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class: String,
    pub bbox: BBox,
    pub score: f64,
    pub frame: Frame,
    /// Tile id the detection was produced on.
    pub provenance: String,
}

impl Detection {
    pub fn new(
        class: impl Into<String>,
        bbox: BBox,
        score: f64,
        frame: Frame,
        provenance: impl Into<String>,
    ) -> Result<Self, String> {
        if !(0.0..=1.0).contains(&score) {
            return Err(format!("score {score} outside [0, 1]"));
        }
        Ok(Self {
            class: class.into(),
            bbox,
            score,
            frame,
            provenance: provenance.into(),
        })
    }
}

/// Detector wire record (tile frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireDetection {
    pub tile_id: String,
    pub class: String,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
}

impl WireDetection {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            tile_id: d.provenance.clone(),
            class: d.class.clone(),
            x_min: d.bbox.x_min(),
            y_min: d.bbox.y_min(),
            x_max: d.bbox.x_max(),
            y_max: d.bbox.y_max(),
            score: d.score,
        }
    }
}

/// Merged-detection record (image or world frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramedRecord {
    pub frame: Frame,
    /// Image id (image frame) or mission id (world frame).
    pub source: String,
    pub tile_id: String,
    pub class: String,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReject {
    pub line: usize,
    pub tile_id: String,
    pub class: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedDetections {
    pub detections: Vec<Detection>,
    pub rejects: Vec<DetectionReject>,
}

fn malformed(line: usize, message: impl ToString) -> WireError {
    WireError::Malformed {
        line,
        message: message.to_string(),
    }
}

/// Parses the tile-frame wire format. Blank lines are skipped; schema or
/// geometry violations are fatal; class names the taxonomy cannot fold go
/// to the rejects list.
pub fn read_wire_detections<R: BufRead>(
    reader: R,
    taxonomy: &ClassTaxonomy,
) -> Result<ParsedDetections, WireError> {
    let mut out = ParsedDetections::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: WireDetection =
            serde_json::from_str(&line).map_err(|e| malformed(line_no, e))?;
        let bbox = BBox::new(rec.x_min, rec.y_min, rec.x_max, rec.y_max)
            .map_err(|e| malformed(line_no, e))?;
        let Some(class) = taxonomy.fold(&rec.class) else {
            out.rejects.push(DetectionReject {
                line: line_no,
                tile_id: rec.tile_id,
                class: rec.class,
                reason: "unknown class".into(),
            });
            continue;
        };
        let det = Detection::new(class, bbox, rec.score, Frame::Tile, rec.tile_id)
            .map_err(|e| malformed(line_no, e))?;
        out.detections.push(det);
    }
    Ok(out)
}

pub fn write_wire_detections<W: Write>(mut w: W, detections: &[WireDetection]) -> std::io::Result<()> {
    for d in detections {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_framed<W: Write>(mut w: W, source: &str, detections: &[Detection]) -> std::io::Result<()> {
    for d in detections {
        let rec = FramedRecord {
            frame: d.frame,
            source: source.to_string(),
            tile_id: d.provenance.clone(),
            class: d.class.clone(),
            x_min: d.bbox.x_min(),
            y_min: d.bbox.y_min(),
            x_max: d.bbox.x_max(),
            y_max: d.bbox.y_max(),
            score: d.score,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads merged records back as `(source, detection)` pairs.
pub fn read_framed<R: BufRead>(reader: R) -> Result<Vec<(String, Detection)>, WireError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FramedRecord = serde_json::from_str(&line).map_err(|e| malformed(line_no, e))?;
        let bbox = BBox::new(rec.x_min, rec.y_min, rec.x_max, rec.y_max)
            .map_err(|e| malformed(line_no, e))?;
        let det = Detection::new(rec.class, bbox, rec.score, rec.frame, rec.tile_id)
            .map_err(|e| malformed(line_no, e))?;
        out.push((rec.source, det));
    }
    Ok(out)
}
