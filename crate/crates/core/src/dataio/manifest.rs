use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::formats::{decode_f32, encode_f32, read_pgm, write_pgm, GrayImage};
use super::{ClassMap, DataError, Dataset, Sample};
use crate::numkit::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DataError::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub label: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub generator: serde_json::Value,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl LoadedDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

fn label_raster(map: &ClassMap) -> GrayImage {
    GrayImage::new(map.height(), map.width(), map.data().to_vec()).expect("consistent label map")
}

/// Writes every sample as PGM rasters (multi-channel images as DLF1) plus
/// `manifest.json`. Output bytes depend only on the inputs.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    data: &Dataset,
    classes: usize,
    generator: serde_json::Value,
) -> Result<Manifest, DataError> {
    let dir = dir.as_ref();
    let first = data
        .train
        .first()
        .or(data.test.first())
        .ok_or_else(|| DataError::BadDims("empty dataset".into()))?;
    let (height, width, channels) = (first.height(), first.width(), first.channels());
    let mut entries = Vec::new();
    for (split, samples) in [(Split::Train, &data.train), (Split::Test, &data.test)] {
        if samples.is_empty() {
            continue;
        }
        fs::create_dir_all(dir.join(split.as_str()))?;
        for (i, s) in samples.iter().enumerate() {
            s.validate()?;
            if (s.height(), s.width(), s.channels()) != (height, width, channels) {
                return Err(DataError::ShapeMismatch(format!("{} sample {i} differs in shape", split.as_str())));
            }
            let rel = |stem: &str, ext: &str| format!("{}/{stem}_{i:04}.{ext}", split.as_str());
            let image = if channels == 1 {
                let p = rel("img", "pgm");
                write_pgm(dir.join(&p), &GrayImage::from_unit(height, width, s.image.data())?)?;
                p
            } else {
                let p = rel("img", "dlf1");
                fs::write(dir.join(&p), encode_f32(&s.image))?;
                p
            };
            let label = rel("lbl", "pgm");
            write_pgm(dir.join(&label), &label_raster(&s.label))?;
            let clean = rel("clean", "pgm");
            write_pgm(dir.join(&clean), &label_raster(&s.clean_label))?;
            let noise = rel("noise", "pgm");
            let noise_bytes = s.noise_mask.iter().map(|&b| b as u8).collect();
            write_pgm(dir.join(&noise), &GrayImage::new(height, width, noise_bytes)?)?;
            entries.push(ManifestEntry {
                image,
                label,
                split,
                clean_label: Some(clean),
                noise_mask: Some(noise),
            });
        }
    }
    let manifest = Manifest {
        height,
        width,
        classes,
        channels,
        entries,
        generator,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

fn read_labels(path: PathBuf, h: usize, w: usize, classes: usize) -> Result<ClassMap, DataError> {
    let img = read_pgm(&path)?;
    if (img.height, img.width) != (h, w) {
        return Err(DataError::ShapeMismatch(format!("{}: {}x{} vs header {h}x{w}", path.display(), img.height, img.width)));
    }
    if let Some(&bad) = img.data.iter().find(|&&c| c as usize >= classes) {
        return Err(DataError::Manifest(format!("{}: class {bad} >= {classes}", path.display())));
    }
    ClassMap::new(h, w, img.data)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LoadedDataset, DataError> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let (h, w, c) = (manifest.height, manifest.width, manifest.channels);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &manifest.entries {
        let image = if e.image.ends_with(".dlf1") {
            decode_f32(&fs::read(dir.join(&e.image))?)?
        } else {
            let img = read_pgm(dir.join(&e.image))?;
            if (img.height, img.width) != (h, w) {
                return Err(DataError::ShapeMismatch(format!("{}: size disagrees with header", e.image)));
            }
            Tensor::new(vec![1, h, w], img.to_unit())?
        };
        if image.shape() != [c, h, w] {
            return Err(DataError::ShapeMismatch(format!("{}: shape {:?}", e.image, image.shape())));
        }
        let label = read_labels(dir.join(&e.label), h, w, manifest.classes)?;
        let clean_label = match &e.clean_label {
            Some(p) => read_labels(dir.join(p), h, w, manifest.classes)?,
            None => label.clone(),
        };
        let noise_mask = label.data().iter().zip(clean_label.data()).map(|(a, b)| a != b).collect();
        let sample = Sample {
            image,
            label,
            clean_label,
            noise_mask,
        };
        match e.split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    Ok(LoadedDataset { manifest, train, test })
}
