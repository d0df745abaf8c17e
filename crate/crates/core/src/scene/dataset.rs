//! Labeled / unlabeled / validation dataset manifests.
//!
//! A manifest is a text file with one `<split> <path>` line per frame file;
//! paths are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::frame::{read_frame, write_frame, Modality, PointCloudFrame};
use super::synth::{generate_scene, SceneSpec};
use crate::error::{ensure, Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    LabeledTrain,
    UnlabeledTrain,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::LabeledTrain => "labeled_train",
            Split::UnlabeledTrain => "unlabeled_train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled_train" => Ok(Split::LabeledTrain),
            "unlabeled_train" => Ok(Split::UnlabeledTrain),
            "val" => Ok(Split::Val),
            other => Err(Error::Validation(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// A lidar/radar pair sharing a frame id.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub lidar: PointCloudFrame,
    pub radar: PointCloudFrame,
}

impl FramePair {
    pub fn frame_id(&self) -> u32 {
        self.radar.frame_id
    }

    pub fn labels(&self) -> Option<&[crate::boxes::Box3D]> {
        self.radar.labels.as_deref()
    }

    pub fn stripped(&self) -> FramePair {
        FramePair {
            lidar: self.lidar.stripped(),
            radar: self.radar.stripped(),
        }
    }
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {}\n", e.split, e.path.display()))
            .collect()
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (split, path) = line.split_once(' ').ok_or_else(|| {
                Error::Validation(format!(
                    "manifest line {}: expected `<split> <path>`",
                    lineno + 1
                ))
            })?;
            entries.push(ManifestEntry {
                split: split.parse()?,
                path: PathBuf::from(path.trim()),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_NAME);
        fs::write(&path, self.to_text())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(format!("reading {}", path.display()), e)
            }
        })?;
        Self::parse(path.parent().unwrap_or(Path::new(".")), &text)
    }

    /// Read every pair of a split, ordered by frame id.
    pub fn load_split(&self, split: Split) -> Result<Vec<FramePair>> {
        let mut lidar = BTreeMap::new();
        let mut radar = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            let f = read_frame(&self.root.join(&e.path))?;
            let slot = match f.modality {
                Modality::Lidar => &mut lidar,
                Modality::Radar => &mut radar,
            };
            ensure!(
                slot.insert(f.frame_id, f).is_none(),
                Validation,
                "duplicate frame in split {split}"
            );
        }
        ensure!(
            lidar.keys().eq(radar.keys()),
            Validation,
            "split {split} has unpaired lidar/radar frames"
        );
        Ok(lidar
            .into_values()
            .zip(radar.into_values())
            .map(|(lidar, radar)| FramePair { lidar, radar })
            .collect())
    }
}

/// Generate pairs in memory: labeled ids first, then unlabeled, then validation.
///
/// Unlabeled pairs have their labels removed.
pub fn generate_pairs(
    n_labeled: usize,
    n_unlabeled: usize,
    n_val: usize,
    spec: &SceneSpec,
) -> Result<Vec<(Split, FramePair)>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(n_labeled + n_unlabeled + n_val);
    let splits = std::iter::repeat_n(Split::LabeledTrain, n_labeled)
        .chain(std::iter::repeat_n(Split::UnlabeledTrain, n_unlabeled))
        .chain(std::iter::repeat_n(Split::Val, n_val));
    for (id, split) in splits.enumerate() {
        let scene = generate_scene(spec, id as u32)?;
        let pair = FramePair {
            lidar: scene.lidar,
            radar: scene.radar,
        };
        let pair = if split == Split::UnlabeledTrain {
            pair.stripped()
        } else {
            pair
        };
        out.push((split, pair));
    }
    Ok(out)
}

/// Generate and write a dataset under `out_dir`, returning its manifest.
pub fn make_dataset(
    n_labeled: usize,
    n_unlabeled: usize,
    n_val: usize,
    spec: &SceneSpec,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir)
        .map_err(|e| Error::io(format!("creating {}", frames_dir.display()), e))?;
    let mut entries = Vec::new();
    for (split, pair) in generate_pairs(n_labeled, n_unlabeled, n_val, spec)? {
        for frame in [&pair.lidar, &pair.radar] {
            let kind = match frame.modality {
                Modality::Lidar => "lidar",
                Modality::Radar => "radar",
            };
            let rel = PathBuf::from("frames").join(format!("{:06}_{kind}.bin", frame.frame_id));
            write_frame(frame, &out_dir.join(&rel))?;
            entries.push(ManifestEntry { split, path: rel });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_tags_round_trip() {
        for s in [Split::LabeledTrain, Split::UnlabeledTrain, Split::Val] {
            assert_eq!(s.to_string().parse::<Split>().unwrap(), s);
        }
        assert!("train".parse::<Split>().is_err());
    }

    #[test]
    fn manifest_parse_rejects_garbage() {
        assert!(DatasetManifest::parse(Path::new("."), "val\n").is_err());
        let m = DatasetManifest::parse(Path::new("."), "# c\nval a.bin\n\nlabeled_train b.bin\n")
            .unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.count(Split::Val), 1);
    }
}
