//! Dataset manifests.
//!
//! A manifest is a tab-separated text file:
//!
//! ```text
//! webseg-manifest	1	classes=5
//! image	tag	split	truth
//! images/00000.png	3	attention-train	truth/00000.png
//! images/00001.png	1	eval	-
//! ```
//!
//! Paths are relative to the manifest's directory. Ground-truth references
//! are private to this crate: only the evaluation code reads them, and each
//! read is counted so tests can audit that training never does.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io;
use crate::pseudo_label::Provenance;
use crate::tensor::{FeatureMap, LabelImage};

const MANIFEST_TAG: &str = "webseg-manifest";
const MANIFEST_VERSION: u32 = 1;
const HEADER: &str = "image\ttag\tsplit\ttruth";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    AttentionTrain,
    FinetunePool,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::AttentionTrain, Split::FinetunePool, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::AttentionTrain => "attention-train",
            Split::FinetunePool => "finetune-pool",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub image: PathBuf,
    pub tag: u32,
    pub split: Split,
    truth: Option<PathBuf>,
}

impl Record {
    pub fn new(image: impl Into<PathBuf>, tag: u32, split: Split, truth: Option<PathBuf>) -> Self {
        Self {
            image: image.into(),
            tag,
            split,
            truth,
        }
    }

    pub fn has_truth(&self) -> bool {
        self.truth.is_some()
    }
}

/// Counts ground-truth file reads.
#[derive(Debug, Default)]
pub struct TruthAudit {
    reads: AtomicUsize,
}

impl TruthAudit {
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    root: PathBuf,
    records: Vec<Record>,
    class_count: usize,
    audit: Arc<TruthAudit>,
}

/// An image loaded for training or inference, tied to its record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub image: FeatureMap,
    pub tag: u32,
}

impl DatasetManifest {
    /// `root` is the directory relative paths resolve against.
    pub fn new(root: impl Into<PathBuf>, class_count: usize, records: Vec<Record>) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::config("a manifest needs at least one class"));
        }
        for (i, r) in records.iter().enumerate() {
            if r.tag == 0 || r.tag as usize > class_count {
                return Err(Error::config(format!(
                    "record {i}: tag {} outside 1..={class_count}",
                    r.tag
                )));
            }
        }
        Ok(Self {
            root: root.into(),
            records,
            class_count,
            audit: Arc::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Ground-truth reads made through this manifest or any clone of it.
    pub fn truth_reads(&self) -> usize {
        self.audit.reads()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.records[index].image)
    }

    /// A manifest holding only the given records, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            root: self.root.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            class_count: self.class_count,
            audit: Arc::clone(&self.audit),
        }
    }

    pub fn load_image(&self, index: usize) -> Result<Sample> {
        Ok(Sample {
            index,
            image: io::load_image(&self.image_path(index))?,
            tag: self.records[index].tag,
        })
    }

    /// Loads the images of `indices` in parallel, preserving order.
    pub fn load_samples(&self, indices: &[usize]) -> Result<Vec<Sample>> {
        indices.par_iter().map(|&i| self.load_image(i)).collect()
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.load_samples(&self.indices(split))
    }

    pub(crate) fn read_truth(&self, index: usize) -> Result<LabelImage> {
        let rel = self.records[index].truth.as_ref().ok_or_else(|| {
            Error::usage(format!(
                "record {} ({}) has no ground truth",
                index,
                self.records[index].image.display()
            ))
        })?;
        self.audit.reads.fetch_add(1, Ordering::SeqCst);
        io::load_mask(&self.root.join(rel))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_TAG}\t{MANIFEST_VERSION}\tclasses={}\n{HEADER}\n", self.class_count);
        for r in &self.records {
            let truth = r.truth.as_ref().map_or("-".to_string(), |p| p.display().to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.image.display(),
                r.tag,
                r.split.as_str(),
                truth
            ));
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.split_inclusive('\n');
        let mut offset = 0;
        let bad = |offset: usize, msg: String| Error::parse("manifest", offset, msg);

        let first = lines.next().ok_or_else(|| bad(0, "empty manifest".into()))?;
        let fields: Vec<&str> = first.trim_end().split('\t').collect();
        if fields.len() != 3 || fields[0] != MANIFEST_TAG {
            return Err(bad(0, format!("expected '{MANIFEST_TAG}<TAB>version<TAB>classes=K'")));
        }
        if fields[1] != MANIFEST_VERSION.to_string() {
            return Err(bad(0, format!("unsupported manifest version {}", fields[1])));
        }
        let class_count: usize = fields[2]
            .strip_prefix("classes=")
            .and_then(|k| k.parse().ok())
            .ok_or_else(|| bad(0, format!("bad class count field '{}'", fields[2])))?;
        offset += first.len();

        let header = lines.next().ok_or_else(|| bad(offset, "missing header line".into()))?;
        if header.trim_end() != HEADER {
            return Err(bad(offset, format!("expected header '{HEADER}'")));
        }
        offset += header.len();

        let mut records = Vec::new();
        for line in lines {
            let trimmed = line.trim_end_matches(['\n', '\r']);
            if trimmed.is_empty() {
                offset += line.len();
                continue;
            }
            let f: Vec<&str> = trimmed.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(offset, format!("expected 4 fields, found {}", f.len())));
            }
            let tag = f[1]
                .parse()
                .map_err(|_| bad(offset + f[0].len() + 1, format!("bad tag '{}'", f[1])))?;
            let split = Split::parse(f[2])
                .ok_or_else(|| bad(offset + f[0].len() + f[1].len() + 2, format!("unknown split '{}'", f[2])))?;
            let truth = (f[3] != "-").then(|| PathBuf::from(f[3]));
            records.push(Record::new(f[0], tag, split, truth));
            offset += line.len();
        }
        Self::new(root, class_count, records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_text(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_text(path, &self.to_text())
    }
}

const PAIRS_TAG: &str = "webseg-pairs";
const PAIRS_VERSION: u32 = 1;
const PAIRS_HEADER: &str = "image\tmask\ttag\tprovenance";

/// One segmenter training example on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub tag: u32,
    pub provenance: Provenance,
}

/// Image and pseudo-mask pairs for segmenter training, stored as
///
/// ```text
/// webseg-pairs	1
/// image	mask	tag	provenance
/// /data/images/00003.png	masks/00003.png	2	attention
/// ```
///
/// Relative paths resolve against the file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct PairList {
    pub root: PathBuf,
    pub entries: Vec<PairEntry>,
}

impl PairList {
    pub fn to_text(&self) -> String {
        let mut out = format!("{PAIRS_TAG}\t{PAIRS_VERSION}\n{PAIRS_HEADER}\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.image.display(),
                e.mask.display(),
                e.tag,
                e.provenance.as_str()
            ));
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let bad = |offset: usize, msg: String| Error::parse("pair list", offset, msg);
        let mut lines = text.split_inclusive('\n');
        let first = lines.next().unwrap_or("");
        if first.trim_end() != format!("{PAIRS_TAG}\t{PAIRS_VERSION}") {
            return Err(bad(0, format!("expected '{PAIRS_TAG}<TAB>{PAIRS_VERSION}'")));
        }
        let mut offset = first.len();
        let header = lines.next().unwrap_or("");
        if header.trim_end() != PAIRS_HEADER {
            return Err(bad(offset, format!("expected header '{PAIRS_HEADER}'")));
        }
        offset += header.len();
        let mut entries = Vec::new();
        for line in lines {
            let trimmed = line.trim_end_matches(['\n', '\r']);
            if !trimmed.is_empty() {
                let f: Vec<&str> = trimmed.split('\t').collect();
                if f.len() != 4 {
                    return Err(bad(offset, format!("expected 4 fields, found {}", f.len())));
                }
                let tag = f[2].parse().map_err(|_| bad(offset, format!("bad tag '{}'", f[2])))?;
                let provenance = Provenance::parse(f[3])
                    .ok_or_else(|| bad(offset, format!("unknown provenance '{}'", f[3])))?;
                entries.push(PairEntry {
                    image: f[0].into(),
                    mask: f[1].into(),
                    tag,
                    provenance,
                });
            }
            offset += line.len();
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&io::read_text(path)?, root)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_text(path, &self.to_text())
    }

    /// Loads every image and mask, in parallel and in order.
    pub fn load_examples(&self) -> Result<Vec<(FeatureMap, LabelImage)>> {
        self.entries
            .par_iter()
            .map(|e| {
                let image = io::load_image(&self.root.join(&e.image))?;
                let mask = io::load_mask(&self.root.join(&e.mask))?;
                if (mask.height(), mask.width()) != (image.height(), image.width()) {
                    return Err(Error::usage(format!(
                        "mask {} does not match its image size",
                        e.mask.display()
                    )));
                }
                Ok((image, mask))
            })
            .collect()
    }
}
