use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gaze::{load_gaze_csv, GazeTrajectory};
use super::ppm::{load_ppm, ImageSample};
use crate::error::{config_err, data_err, Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest row. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub image: String,
    pub gaze: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// On-disk index of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub classes: Vec<String>,
    pub image_extent: [usize; 2],
    pub gaze_extent: [f64; 2],
    pub samples: Vec<SampleEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: ImageSample,
    pub gaze: GazeTrajectory,
    pub label: usize,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Parses and validates a manifest; referenced files must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.classes.is_empty() {
            return Err(data_err!("manifest declares no classes"));
        }
        if self.image_extent.contains(&0) || !self.gaze_extent.iter().all(|v| *v > 0.0) {
            return Err(data_err!("manifest extents must be positive"));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.classes.len() {
                return Err(data_err!(
                    "sample {i} has label {} but only {} classes are declared",
                    s.label,
                    self.classes.len()
                ));
            }
            for rel in [&s.image, &s.gaze] {
                let p = self.root.join(rel);
                if !p.is_file() {
                    return Err(Error::io(
                        &p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by manifest"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Copy of this manifest keeping only samples accepted by `keep`.
    pub fn filtered(&self, keep: impl Fn(&SampleEntry) -> bool) -> Self {
        DatasetManifest {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn with_split(&self, split: Split) -> Self {
        self.filtered(|s| s.split == Some(split))
    }

    pub fn has_split_tags(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.split.is_some())
    }

    /// Decodes one sample. The image must match `image_extent`.
    pub fn load_sample(&self, entry: &SampleEntry) -> Result<LabeledSample> {
        let image = load_ppm(self.resolve(&entry.image))?;
        if [image.width(), image.height()] != self.image_extent {
            return Err(data_err!(
                "{} is {}x{}, manifest declares {}x{}",
                entry.image,
                image.width(),
                image.height(),
                self.image_extent[0],
                self.image_extent[1]
            ));
        }
        let gaze = load_gaze_csv(self.resolve(&entry.gaze), self.gaze_extent)?;
        Ok(LabeledSample {
            image,
            gaze,
            label: entry.label,
        })
    }

    /// Per-class sample counts, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// Stratified random split: within every class, `round(n · test / (train + test))`
/// samples go to the second manifest and the rest to the first. Sample order
/// inside each output follows the input manifest.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratio: (usize, usize),
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let (train, test) = ratio;
    if train == 0 {
        return Err(config_err!("split ratio {train}:{test} needs a positive train part"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; manifest.samples.len()];
    for (label, mut idx) in by_class {
        let n = idx.len();
        if n < train + test {
            log::warn!(
                "class {label} has {n} samples, fewer than the {train}:{test} ratio needs; splitting best-effort"
            );
        }
        let n_test = ((n * test) as f64 / (train + test) as f64).round() as usize;
        idx.shuffle(&mut rng);
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }
    let pick = |want_test: bool, tag: Split| DatasetManifest {
        samples: manifest
            .samples
            .iter()
            .zip(&is_test)
            .filter(|(_, t)| **t == want_test)
            .map(|(s, _)| SampleEntry {
                split: Some(tag),
                ..s.clone()
            })
            .collect(),
        ..manifest.clone()
    };
    Ok((pick(false, Split::Train), pick(true, Split::Test)))
}
