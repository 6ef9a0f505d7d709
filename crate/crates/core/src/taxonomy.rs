//! Waterbird class taxonomy: annotated (raw) classes folded onto the classes
//! a detector is trained on, plus the minority set used for oversampling.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Catch-all trained class for birds outside the surveyed species list.
pub const OTHER: &str = "Other";

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("failed to read taxonomy file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse taxonomy: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("failed to serialize taxonomy: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("duplicate class name or abbreviation {0:?}")]
    Duplicate(String),
    #[error("raw class {raw:?} maps to {target:?}, which is not a trained class")]
    UnknownTarget { raw: String, target: String },
    #[error("minority class {0:?} is not a trained class")]
    UnknownMinority(String),
    #[error("taxonomy has no trained classes")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawClass {
    pub name: String,
    pub abbreviation: String,
    /// Trained class this raw class is folded into.
    pub trained: String,
}

/// On-disk layout of a taxonomy file (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaxonomyFile {
    trained: Vec<String>,
    minority: Vec<String>,
    raw: Vec<RawClass>,
}

/// Validated class taxonomy.
#[derive(Debug, Clone)]
pub struct ClassTaxonomy {
    raw: Vec<RawClass>,
    trained: Vec<String>,
    minority: BTreeSet<usize>,
    /// Lower-cased raw name / abbreviation / trained name → trained index.
    lookup: HashMap<String, usize>,
}

// (name, abbreviation, trained class); the first 15 rows are the surveyed
// classes and train under their own name.
const BUILTIN_RAW: [(&str, &str, &str); 24] = [
    ("Mixed Tern Adult", "MTRNA", "Mixed Tern Adult"),
    ("Laughing Gull Adult", "LAGUA", "Laughing Gull Adult"),
    ("Brown Pelican Adult", "BRPEA", "Brown Pelican Adult"),
    ("White Ibis Adult", "WHIBA", "White Ibis Adult"),
    ("Reddish Egret Adult", "REEGA", "Reddish Egret Adult"),
    ("Black Skimmer Adult", "BLSKA", "Black Skimmer Adult"),
    ("Cattle Egret Adult", "CAEGA", "Cattle Egret Adult"),
    (
        "Black-crowned Night Heron Adult",
        "BCNHA",
        "Black-crowned Night Heron Adult",
    ),
    ("Tri-colored Heron Adult", "TRHEA", "Tri-colored Heron Adult"),
    ("Mixed Egret", "MEGRT", "Mixed Egret"),
    ("Great Blue Heron Adult", "GBHEA", "Great Blue Heron Adult"),
    ("Roseate Spoonbill Adult", "ROSPA", "Roseate Spoonbill Adult"),
    ("Brown Pelican Chick", "BRPEC", "Brown Pelican Chick"),
    ("Mixed Tern Flying", "MTRNF", "Mixed Tern Flying"),
    ("Laughing Gull Flying", "LAGUF", "Laughing Gull Flying"),
    ("Great Egret Adult", "GREGA", OTHER),
    ("Great Egret Flying", "GREGF", OTHER),
    ("Brown Pelican Juvenile", "BRPEJ", OTHER),
    ("Brown Pelican Wings Spread", "BRPEW", OTHER),
    ("Double-crested Cormorant Adult", "DCCOA", OTHER),
    ("Great Blue Heron Chick", "GBHEC", OTHER),
    ("White Ibis Juvenile", "WHIBJ", OTHER),
    ("Other Bird", "OTHRA", OTHER),
    ("Unidentified Bird", "UNKNA", OTHER),
];

const BUILTIN_MINORITY: [&str; 7] = [
    "Brown Pelican Adult",
    "White Ibis Adult",
    "Reddish Egret Adult",
    "Tri-colored Heron Adult",
    "Great Blue Heron Adult",
    "Roseate Spoonbill Adult",
    "Brown Pelican Chick",
];

impl ClassTaxonomy {
    /// The surveyed-island taxonomy: 24 annotated classes, 16 trained classes.
    pub fn builtin() -> Self {
        let mut trained: Vec<String> = BUILTIN_RAW[..15]
            .iter()
            .map(|(name, _, _)| name.to_string())
            .collect();
        trained.push(OTHER.to_string());
        let raw = BUILTIN_RAW
            .iter()
            .map(|(name, abbreviation, target)| RawClass {
                name: name.to_string(),
                abbreviation: abbreviation.to_string(),
                trained: target.to_string(),
            })
            .collect();
        let minority = BUILTIN_MINORITY.iter().map(|s| s.to_string()).collect();
        Self::from_parts(raw, trained, minority).expect("builtin taxonomy is consistent")
    }

    pub fn from_parts(
        raw: Vec<RawClass>,
        trained: Vec<String>,
        minority: Vec<String>,
    ) -> Result<Self, TaxonomyError> {
        if trained.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        let mut lookup = HashMap::new();
        for (i, name) in trained.iter().enumerate() {
            if lookup.insert(name.to_lowercase(), i).is_some() {
                return Err(TaxonomyError::Duplicate(name.clone()));
            }
        }
        for rc in &raw {
            let target = lookup
                .get(&rc.trained.to_lowercase())
                .copied()
                .filter(|&i| trained[i] == rc.trained)
                .ok_or_else(|| TaxonomyError::UnknownTarget {
                    raw: rc.name.clone(),
                    target: rc.trained.clone(),
                })?;
            for key in [&rc.name, &rc.abbreviation] {
                match lookup.insert(key.to_lowercase(), target) {
                    // A raw class may share its name with the class it trains as.
                    Some(prev) if prev != target || key != &trained[target] => {
                        return Err(TaxonomyError::Duplicate(key.clone()))
                    }
                    _ => {}
                }
            }
        }
        let mut minority_idx = BTreeSet::new();
        for m in &minority {
            let i = trained
                .iter()
                .position(|t| t == m)
                .ok_or_else(|| TaxonomyError::UnknownMinority(m.clone()))?;
            minority_idx.insert(i);
        }
        Ok(Self {
            raw,
            trained,
            minority: minority_idx,
            lookup,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile = toml::from_str(text)?;
        Self::from_parts(file.raw, file.trained, file.minority)
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, TaxonomyError> {
        let file = TaxonomyFile {
            trained: self.trained.clone(),
            minority: self.minority_classes().map(str::to_string).collect(),
            raw: self.raw.clone(),
        };
        Ok(toml::to_string_pretty(&file)?)
    }

    pub fn raw_classes(&self) -> &[RawClass] {
        &self.raw
    }

    pub fn trained_classes(&self) -> &[String] {
        &self.trained
    }

    pub fn len(&self) -> usize {
        self.trained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trained.is_empty()
    }

    /// Folds a raw class name, abbreviation, or trained class name
    /// (case-insensitive) onto its trained class.
    pub fn fold(&self, name: &str) -> Option<&str> {
        self.fold_index(name).map(|i| self.trained[i].as_str())
    }

    pub fn fold_index(&self, name: &str) -> Option<usize> {
        self.lookup.get(&name.trim().to_lowercase()).copied()
    }

    /// Position of an exact trained class name.
    pub fn index_of(&self, trained_name: &str) -> Option<usize> {
        self.trained.iter().position(|t| t == trained_name)
    }

    pub fn is_minority(&self, trained_name: &str) -> bool {
        self.index_of(trained_name)
            .is_some_and(|i| self.minority.contains(&i))
    }

    pub fn minority_classes(&self) -> impl Iterator<Item = &str> {
        self.minority.iter().map(|&i| self.trained[i].as_str())
    }
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        Self::builtin()
    }
}
