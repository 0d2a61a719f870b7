//! Synthetic retrieval dataset: records, manifest I/O, generation and splits.

mod backgrounds;
mod build;
mod split;
pub mod sprites;
pub mod trajectory;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use backgrounds::{procedural_background, BackgroundSource};
pub use build::{build_dataset, realize_manifest_record, DatasetConfig};
pub use split::{split_dataset, SplitRatios};

use crate::blur_synth::BBox;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "dataset.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    TestQuery,
    TestDatabase,
    Distractor,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::Val,
        Split::TestQuery,
        Split::TestDatabase,
        Split::Distractor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestQuery => "test-query",
            Split::TestDatabase => "test-database",
            Split::Distractor => "distractor",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

/// One manifest line. Field names are the on-disk schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub path: String,
    pub object_id: u64,
    pub category_id: u32,
    pub trajectory_id: u64,
    pub bs: f64,
    pub bl: u8,
    pub bbox: [f64; 4],
    pub is_sharp: bool,
    pub split: Split,
}

impl ImageRecord {
    pub fn bbox(&self) -> BBox {
        BBox::from_array(self.bbox)
    }
}

/// Provenance written next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub seed: u64,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    /// Record ids are line indices.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads `manifest.jsonl` from a dataset directory (or a direct file path).
    /// The seed comes from `dataset.json` when present.
    pub fn load(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let reader = std::io::BufReader::new(std::fs::File::open(&file).map_err(|e| Error::io(&file, e))?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(&file, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ImageRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
                what: "manifest",
                detail: format!("line {}: {e}", i + 1),
            })?;
            records.push(rec);
        }
        let meta_path = root.join(META_FILE);
        let seed = if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            serde_json::from_str::<DatasetMeta>(&text)?.seed
        } else {
            0
        };
        Ok(DatasetManifest { root, seed, records })
    }

    /// Record counts per blur level, per split.
    pub fn blur_histogram(&self) -> BTreeMap<Split, BTreeMap<u8, usize>> {
        let mut out: BTreeMap<Split, BTreeMap<u8, usize>> = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.split).or_default().entry(r.bl).or_default() += 1;
        }
        out
    }

    /// Checks the split invariants: disjoint object sets across
    /// train/val/test and disjoint query/database trajectories.
    pub fn validate(&self) -> Result<()> {
        use std::collections::{HashMap, HashSet};
        let mut object_group: HashMap<u64, u8> = HashMap::new();
        let mut query_traj = HashSet::new();
        let mut db_traj = HashSet::new();
        for r in &self.records {
            if r.bl < 1 {
                return Err(Error::Format {
                    what: "manifest",
                    detail: format!("{}: blur level {} < 1", r.path, r.bl),
                });
            }
            let group = match r.split {
                Split::Train => 0,
                Split::Val => 1,
                Split::TestQuery | Split::TestDatabase => 2,
                Split::Distractor => 3,
            };
            if let Some(&g) = object_group.get(&r.object_id) {
                if g != group {
                    return Err(Error::Format {
                        what: "manifest",
                        detail: format!("object {} appears in two splits", r.object_id),
                    });
                }
            }
            object_group.insert(r.object_id, group);
            match r.split {
                Split::TestQuery => query_traj.insert(r.trajectory_id),
                Split::TestDatabase => db_traj.insert(r.trajectory_id),
                _ => false,
            };
        }
        if let Some(t) = query_traj.intersection(&db_traj).next() {
            return Err(Error::Format {
                what: "manifest",
                detail: format!("trajectory {t} is in both query and database"),
            });
        }
        Ok(())
    }
}
