//! Synthetic data, label noise, and the on-disk formats (PGM, DLF1, manifest).

mod formats;
mod manifest;
mod synth;

pub use formats::{
    decode_f32, decode_f64, decode_pgm, encode_f32, encode_f64, encode_pgm, read_f32, read_pgm, write_f32,
    write_pgm, GrayImage,
};
pub use manifest::{load_dataset, write_dataset, LoadedDataset, Manifest, ManifestEntry, Split};
pub use synth::{
    boundary_band, gaussian_blur, gen_synthetic, gen_synthetic_with, generate_dataset, inject_noise,
    inject_noise_with, Dataset, DatasetConfig, NoiseConfig, NoiseMode, SynthConfig,
};

use crate::numkit::{NumError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad dimensions: {0}")]
    BadDims(String),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("unsupported maxval {0} (only 255)")]
    BadMaxval(u32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-pixel class indices of one `height × width` image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, DataError> {
        if data.len() != height * width {
            return Err(DataError::ShapeMismatch(format!(
                "{}x{} label map with {} values",
                height,
                width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// `true` where some in-image 4-neighbour carries a different class.
    pub fn edge_map(&self) -> Vec<bool> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let c = self.data[y * w + x];
                out[y * w + x] = (y > 0 && self.data[(y - 1) * w + x] != c)
                    || (y + 1 < h && self.data[(y + 1) * w + x] != c)
                    || (x > 0 && self.data[y * w + x - 1] != c)
                    || (x + 1 < w && self.data[y * w + x + 1] != c);
            }
        }
        out
    }

    /// Binary mask of one class.
    pub fn mask_of(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&c| c == class).collect()
    }
}

/// One training/evaluation image with its given (possibly noisy) label and
/// the generator's clean ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(channels, H, W)` intensities in `[0, 1]`.
    pub image: Tensor,
    pub label: ClassMap,
    pub clean_label: ClassMap,
    /// `true` exactly where `label != clean_label`.
    pub noise_mask: Vec<bool>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.label.height()
    }

    pub fn width(&self) -> usize {
        self.label.width()
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    /// Channel-mean intensity map.
    pub fn gray(&self) -> Vec<f64> {
        let (c, n) = (self.channels(), self.label.len());
        let d = self.image.data();
        (0..n).map(|k| (0..c).map(|ch| d[ch * n + k]).sum::<f64>() / c as f64).collect()
    }

    /// Checks the shape and noise-mask invariants.
    pub fn validate(&self) -> Result<(), DataError> {
        let (h, w) = (self.height(), self.width());
        let s = self.image.shape();
        if s.len() != 3 || s[1] != h || s[2] != w {
            return Err(DataError::ShapeMismatch(format!("image {s:?} for {h}x{w} label")));
        }
        if self.clean_label.height() != h || self.clean_label.width() != w || self.noise_mask.len() != h * w {
            return Err(DataError::ShapeMismatch("label / clean label / noise mask disagree".into()));
        }
        let consistent = (0..h * w).all(|k| self.noise_mask[k] == (self.label.data[k] != self.clean_label.data[k]));
        if !consistent {
            return Err(DataError::ShapeMismatch("noise mask disagrees with label vs clean label".into()));
        }
        Ok(())
    }
}
