//! Dataset directories: `*.wlb` bundles plus a tab-separated `index.tsv`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{read_bundle, FeatError, FeatureBundle, Severity};

pub const INDEX_FILE: &str = "index.tsv";
const HEADER: &str = "utterance_id\tfilename\tscene_id\tlistener_id\tseverity\tsplit";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub utterance_id: String,
    pub filename: String,
    pub scene_id: String,
    pub listener_id: String,
    pub severity: Severity,
    pub split: String,
}

pub fn write_index(path: &Path, entries: &[IndexEntry]) -> Result<(), FeatError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{HEADER}")?;
    for e in entries {
        writeln!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.utterance_id, e.filename, e.scene_id, e.listener_id, e.severity, e.split
        )?;
    }
    Ok(())
}

pub fn read_index(path: &Path) -> Result<Vec<IndexEntry>, FeatError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim_end() != HEADER {
        return Err(FeatError::Validation(format!("{}: unexpected index header", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(FeatError::Validation(format!(
                    "{} line {}: expected 6 columns, got {}",
                    path.display(),
                    i + 2,
                    cols.len()
                )));
            }
            Ok(IndexEntry {
                utterance_id: cols[0].to_owned(),
                filename: cols[1].to_owned(),
                scene_id: cols[2].to_owned(),
                listener_id: cols[3].to_owned(),
                severity: cols[4].parse()?,
                split: cols[5].to_owned(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<IndexEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, FeatError> {
        let entries = read_index(&root.join(INDEX_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn bundle_path(&self, entry: &IndexEntry) -> PathBuf {
        self.root.join(&entry.filename)
    }

    /// Reads one bundle; index metadata must agree with the bundle's own.
    pub fn load(&self, entry: &IndexEntry) -> Result<FeatureBundle, FeatError> {
        let b = read_bundle(&self.bundle_path(entry))?;
        if b.utterance_id != entry.utterance_id || b.scene_id != entry.scene_id {
            return Err(FeatError::Validation(format!(
                "index entry {} disagrees with bundle {}/{}",
                entry.utterance_id, b.utterance_id, b.scene_id
            )));
        }
        Ok(b)
    }

    pub fn select_split(&self, split: Option<&str>) -> Vec<&IndexEntry> {
        self.entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .collect()
    }

    /// Every file the dataset consists of, in a fixed order.
    pub fn files(&self) -> Vec<PathBuf> {
        let mut files = vec![self.root.join(INDEX_FILE)];
        files.extend(self.entries.iter().map(|e| self.bundle_path(e)));
        files
    }
}
