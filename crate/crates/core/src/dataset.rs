//! Annotation ingestion, dataset splitting and class histograms.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::PathBuf;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;
use crate::taxonomy::ClassTaxonomy;
use crate::{Affine, BBox};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("annotation CSV line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// A class-labeled box in some frame (image, tile).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class: String,
    pub bbox: BBox,
}

impl LabeledBox {
    pub fn new(class: impl Into<String>, bbox: BBox) -> Self {
        Self {
            class: class.into(),
            bbox,
        }
    }
}

/// Human annotation of one bird in a source image, in source pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub class: String,
    pub bbox: BBox,
}

impl Annotation {
    pub fn labeled(&self) -> LabeledBox {
        LabeledBox::new(self.class.clone(), self.bbox)
    }
}

/// A high-resolution survey frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyImage {
    pub image_id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    /// Image → world mapping, when the frame is georeferenced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub georeference: Option<Affine>,
}

impl SurveyImage {
    pub fn bounds(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64)
            .expect("survey image has positive dimensions")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    UnknownClass { name: String },
    OutOfBounds { width: u32, height: u32 },
}

/// A row that parsed but could not be admitted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotationReject {
    pub line: u64,
    pub image_id: String,
    pub class_name: String,
    pub bbox: BBox,
    #[serde(flatten)]
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedAnnotations {
    pub by_image: BTreeMap<String, Vec<Annotation>>,
    pub rejects: Vec<AnnotationReject>,
}

impl LoadedAnnotations {
    pub fn total(&self) -> usize {
        self.by_image.values().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Annotation> {
        self.by_image.values().flatten()
    }
}

#[derive(Debug, Deserialize)]
struct AnnotationRow {
    image_id: String,
    class_name: String,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

/// Reads `image_id,class_name,x_min,y_min,x_max,y_max` rows.
///
/// Class names are folded through the taxonomy. Unknown classes and boxes
/// outside the known image dimensions (`image_sizes`, when given) go to the
/// rejects list; malformed rows abort with the offending line number.
pub fn load_annotations<R: Read>(
    reader: R,
    taxonomy: &ClassTaxonomy,
    image_sizes: Option<&BTreeMap<String, (u32, u32)>>,
) -> Result<LoadedAnnotations, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DatasetError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut out = LoadedAnnotations::default();
    for record in rdr.records() {
        let record = record.map_err(|e| DatasetError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: AnnotationRow =
            record
                .deserialize(Some(&headers))
                .map_err(|e| DatasetError::Parse {
                    line,
                    message: e.to_string(),
                })?;
        let bbox = BBox::new(row.x_min, row.y_min, row.x_max, row.y_max).map_err(|e| {
            DatasetError::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let Some(class) = taxonomy.fold(&row.class_name) else {
            out.rejects.push(AnnotationReject {
                line,
                image_id: row.image_id,
                class_name: row.class_name.clone(),
                bbox,
                reason: RejectReason::UnknownClass {
                    name: row.class_name,
                },
            });
            continue;
        };
        if let Some(&(width, height)) = image_sizes.and_then(|m| m.get(&row.image_id)) {
            let frame = BBox::new(0.0, 0.0, width as f64, height as f64)
                .expect("image sizes are positive");
            if !frame.contains(&bbox) {
                out.rejects.push(AnnotationReject {
                    line,
                    image_id: row.image_id,
                    class_name: row.class_name,
                    bbox,
                    reason: RejectReason::OutOfBounds { width, height },
                });
                continue;
            }
        }
        out.by_image
            .entry(row.image_id.clone())
            .or_default()
            .push(Annotation {
                image_id: row.image_id,
                class: class.to_string(),
                bbox,
            });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            validation: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let r = self.as_array();
        let sum: f64 = r.iter().sum();
        if r.iter().any(|&v| !(v > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::BadRatios(r));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items; remainders tie toward
    /// the earlier bucket, so training wins ties.
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let r = self.as_array();
        let quotas = r.map(|v| v * n as f64);
        // guards against 69.99999999 style products
        let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
        let assigned: usize = counts.iter().sum();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - counts[a] as f64;
            let fb = quotas[b] - counts[b] as f64;
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }
}

/// Disjoint train / validation / test partition of tile ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn subset(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "validation" | "val" => Some(&self.validation),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Seeded random partition. The input order does not matter: ids are
/// de-duplicated and sorted before the shuffle.
pub fn split_dataset<S: AsRef<str>>(
    ids: &[S],
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    ratios.validate()?;
    let mut keys: Vec<&str> = ids.iter().map(AsRef::as_ref).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.shuffle(&mut rng_for(seed, &["split"]));
    let [n_train, n_val, _] = ratios.apportion(keys.len());
    let sorted = |slice: &[&str]| {
        let mut v: Vec<String> = slice.iter().map(|s| s.to_string()).collect();
        v.sort();
        v
    };
    Ok(DatasetSplit {
        seed,
        train: sorted(&keys[..n_train]),
        validation: sorted(&keys[n_train..n_train + n_val]),
        test: sorted(&keys[n_train + n_val..]),
    })
}

/// Splits at group level (e.g. source image) and expands back to items, so
/// all tiles of one image land in the same subset.
pub fn split_by_group(
    items: &[(String, String)],
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    let groups: BTreeSet<&str> = items.iter().map(|(_, g)| g.as_str()).collect();
    let groups: Vec<&str> = groups.into_iter().collect();
    let by_group = split_dataset(&groups, ratios, seed)?;
    let expand = |names: &[String]| {
        let set: BTreeSet<&str> = names.iter().map(String::as_str).collect();
        let mut v: Vec<String> = items
            .iter()
            .filter(|(_, g)| set.contains(g.as_str()))
            .map(|(id, _)| id.clone())
            .collect();
        v.sort();
        v.dedup();
        v
    };
    Ok(DatasetSplit {
        seed,
        train: expand(&by_group.train),
        validation: expand(&by_group.validation),
        test: expand(&by_group.test),
    })
}

/// Per-class counts in taxonomy order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: IndexMap<String, usize>,
}

impl ClassHistogram {
    pub fn zeros(taxonomy: &ClassTaxonomy) -> Self {
        Self {
            counts: taxonomy
                .trained_classes()
                .iter()
                .map(|c| (c.clone(), 0))
                .collect(),
        }
    }

    pub fn get(&self, class: &str) -> usize {
        self.counts.get(class).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn add(&mut self, class: &str) {
        *self.counts.entry(class.to_string()).or_insert(0) += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        for (k, v) in &other.counts {
            *self.counts.entry(k.clone()).or_insert(0) += v;
        }
    }
}

/// Counts annotations per trained class; classes outside the taxonomy are
/// appended after the taxonomy's own classes.
pub fn class_histogram<'a, I>(classes: I, taxonomy: &ClassTaxonomy) -> ClassHistogram
where
    I: IntoIterator<Item = &'a str>,
{
    let mut h = ClassHistogram::zeros(taxonomy);
    for c in classes {
        h.add(c);
    }
    h
}
