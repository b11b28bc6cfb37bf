//! `manifest.csv` (`index,volume_path,landmarks_path,split`) and loading of
//! the volumes it lists. Paths are relative to the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::volumes::{read_landmarks, read_volume, LandmarkSet, Volume, VolumeError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub volume_path: PathBuf,
    pub landmarks_path: PathBuf,
    pub split: Split,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("manifest has no {0} entries")]
    EmptySplit(Split),
    #[error("{path}: {source}")]
    Volume { path: String, source: VolumeError },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

/// One loaded volume with its ground-truth landmarks.
#[derive(Clone, Debug)]
pub struct Case {
    pub index: usize,
    pub volume: Volume,
    pub landmarks: LandmarkSet,
}

impl Manifest {
    pub fn new(root: PathBuf, entries: Vec<ManifestEntry>) -> Self {
        Self { root, entries }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,volume_path,landmarks_path,split\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.index,
                e.volume_path.display(),
                e.landmarks_path.display(),
                e.split
            ));
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path)
            .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line.trim() != "index,volume_path,landmarks_path,split" {
                    return Err(DatasetError::Parse { line: 1, msg: format!("unexpected header `{line}`") });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(DatasetError::Parse { line: i + 1, msg: format!("expected 4 fields, got {}", f.len()) });
            }
            let index = f[0]
                .parse()
                .map_err(|_| DatasetError::Parse { line: i + 1, msg: format!("bad index `{}`", f[0]) })?;
            let split = f[3].parse().map_err(|msg| DatasetError::Parse { line: i + 1, msg })?;
            entries.push(ManifestEntry {
                index,
                volume_path: PathBuf::from(f[1]),
                landmarks_path: PathBuf::from(f[2]),
                split,
            });
        }
        Ok(Self { root, entries })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_entry(&self, e: &ManifestEntry) -> Result<Case, DatasetError> {
        let vp = self.root.join(&e.volume_path);
        let lp = self.root.join(&e.landmarks_path);
        let volume = read_volume(&vp).map_err(|source| DatasetError::Volume { path: vp.display().to_string(), source })?;
        let landmarks =
            read_landmarks(&lp).map_err(|source| DatasetError::Volume { path: lp.display().to_string(), source })?;
        Ok(Case { index: e.index, volume, landmarks })
    }

    /// Loads every case of `split`, in manifest order.
    pub fn load(&self, split: Split) -> Result<Vec<Case>, DatasetError> {
        let cases: Vec<Case> = self.split(split).map(|e| self.load_entry(e)).collect::<Result<_, _>>()?;
        if cases.is_empty() {
            return Err(DatasetError::EmptySplit(split));
        }
        Ok(cases)
    }
}
