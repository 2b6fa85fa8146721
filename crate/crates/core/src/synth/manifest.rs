use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Pose;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Composite,
    BackgroundOnly,
}

/// One line of the manifest. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    /// Empty for background-only records.
    pub user_id: String,
    pub pose: Pose,
    pub split: Split,
    pub source: Source,
}

impl ManifestRecord {
    pub fn new(
        id: impl Into<String>,
        user_id: impl Into<String>,
        pose: Pose,
        split: Split,
        source: Source,
    ) -> Self {
        let id = id.into();
        Self {
            image_path: format!("images/{id}.png"),
            mask_path: format!("masks/{id}.png"),
            id,
            user_id: user_id.into(),
            pose,
            split,
            source,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// One JSON object per line, LF terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, line)| {
                serde_json::from_str(line)
                    .map_err(|e| Error::Data(format!("manifest line {}: {e}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Unique ids and user-disjoint splits.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate manifest id {}", r.id)));
            }
        }
        let train = self.users(Split::Train);
        if let Some(u) = self.users(Split::Val).intersection(&train).next() {
            return Err(Error::Data(format!("user {u} appears in both splits")));
        }
        Ok(())
    }

    /// Checks that every referenced file exists under `base`.
    pub fn check_paths(&self, base: &Path) -> Result<()> {
        for r in &self.records {
            for p in [&r.image_path, &r.mask_path] {
                if !base.join(p).is_file() {
                    return Err(Error::Data(format!("record {}: missing {p}", r.id)));
                }
            }
        }
        Ok(())
    }

    /// Non-empty user ids present in `split`.
    pub fn users(&self, split: Split) -> BTreeSet<String> {
        self.records
            .iter()
            .filter(|r| r.split == split && !r.user_id.is_empty())
            .map(|r| r.user_id.clone())
            .collect()
    }

    pub fn count(&self, source: Source, split: Option<Split>) -> usize {
        self.records
            .iter()
            .filter(|r| r.source == source && split.map_or(true, |s| r.split == s))
            .count()
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}
