//! Run directory layout and the metrics table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Evaluation, TrainError};
use crate::confidence::ConfidenceMap;
use crate::dataio::write_f32;
use crate::numkit::Tensor;
use crate::segmodel::Checkpoint;

pub const METRICS_HEADER: &str = "t,phase,loss,Dice,mIoU,HD95,ASD,mean_omega_clean,mean_omega_noisy,L_W,\
steps,flag_precision,noise_rate,noisy_Dice,checksum_in,checksum_out";

/// One line of `metrics.csv`. Fields that do not apply to a phase are NaN
/// (or `None`) and written as empty cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: usize,
    pub phase: String,
    #[serde(with = "nan_as_null")]
    pub loss: f64,
    #[serde(with = "nan_as_null")]
    pub dice: f64,
    #[serde(with = "nan_as_null")]
    pub miou: f64,
    #[serde(with = "nan_as_null")]
    pub hd95: f64,
    #[serde(with = "nan_as_null")]
    pub asd: f64,
    #[serde(with = "nan_as_null")]
    pub mean_omega_clean: f64,
    #[serde(with = "nan_as_null")]
    pub mean_omega_noisy: f64,
    #[serde(with = "nan_as_null")]
    pub l_w: f64,
    pub steps: u64,
    #[serde(with = "nan_as_null")]
    pub flag_precision: f64,
    #[serde(with = "nan_as_null")]
    pub noise_rate: f64,
    #[serde(with = "nan_as_null")]
    pub noisy_dice: f64,
    pub checksum_in: Option<u64>,
    pub checksum_out: Option<u64>,
}

impl MetricsRow {
    pub fn new(t: usize, phase: &str) -> Self {
        Self {
            t,
            phase: phase.to_string(),
            loss: f64::NAN,
            dice: f64::NAN,
            miou: f64::NAN,
            hd95: f64::NAN,
            asd: f64::NAN,
            mean_omega_clean: f64::NAN,
            mean_omega_noisy: f64::NAN,
            l_w: f64::NAN,
            steps: 0,
            flag_precision: f64::NAN,
            noise_rate: f64::NAN,
            noisy_dice: f64::NAN,
            checksum_in: None,
            checksum_out: None,
        }
    }

    pub fn set_metrics(&mut self, ev: &Evaluation) {
        self.dice = ev.clean.dice;
        self.miou = ev.clean.miou;
        self.hd95 = ev.clean.hd95;
        self.asd = ev.clean.asd;
        self.noisy_dice = ev.noisy_dice;
    }

    pub fn to_csv(&self) -> String {
        let num = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };
        let sum = |v: Option<u64>| v.map(|c| format!("{c:016x}")).unwrap_or_default();
        [
            self.t.to_string(),
            self.phase.clone(),
            num(self.loss),
            num(self.dice),
            num(self.miou),
            num(self.hd95),
            num(self.asd),
            num(self.mean_omega_clean),
            num(self.mean_omega_noisy),
            num(self.l_w),
            self.steps.to_string(),
            num(self.flag_precision),
            num(self.noise_rate),
            num(self.noisy_dice),
            sum(self.checksum_in),
            sum(self.checksum_out),
        ]
        .join(",")
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

/// JSON has no NaN; inapplicable cells travel as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// An output directory: `config.json`, `metrics.csv`,
/// `checkpoints/t####.ckpt` and `omega/t####_img####.dlf1`.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

const ARTIFACTS: [&str; 4] = ["config.json", "metrics.csv", "checkpoints", "omega"];

impl RunDir {
    /// Opens `root` for a fresh run. A non-empty directory is refused unless
    /// `force`, in which case only the artifacts a run writes are removed.
    pub fn create(root: impl AsRef<Path>, force: bool) -> Result<Self, TrainError> {
        let root = root.as_ref().to_path_buf();
        if root.exists() {
            let non_empty = fs::read_dir(&root)?.next().is_some();
            if non_empty && !force {
                return Err(TrainError::Config(format!(
                    "output directory {} is not empty (use --force to overwrite)",
                    root.display()
                )));
            }
            for name in ARTIFACTS {
                let p = root.join(name);
                if p.is_dir() {
                    fs::remove_dir_all(&p)?;
                } else if p.exists() {
                    fs::remove_file(&p)?;
                }
            }
        }
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    /// Reuses an existing run directory (resuming).
    pub fn open(root: impl AsRef<Path>) -> Self {
        Self {
            root: root.as_ref().to_path_buf(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write_config(&self, echo: &serde_json::Value) -> Result<(), TrainError> {
        let mut text = serde_json::to_string_pretty(echo)?;
        text.push('\n');
        fs::write(self.root.join("config.json"), text)?;
        Ok(())
    }

    pub fn write_metrics(&self, rows: &[MetricsRow]) -> Result<(), TrainError> {
        fs::write(self.root.join("metrics.csv"), metrics_csv(rows))?;
        Ok(())
    }

    pub fn checkpoint_path(&self, t: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("t{t:04}.ckpt"))
    }

    pub fn write_checkpoint(&self, t: usize, ck: &Checkpoint) -> Result<(), TrainError> {
        fs::create_dir_all(self.root.join("checkpoints"))?;
        ck.write(self.checkpoint_path(t))?;
        Ok(())
    }

    pub fn write_omega(&self, t: usize, image: usize, map: &ConfidenceMap) -> Result<(), TrainError> {
        let dir = self.root.join("omega");
        fs::create_dir_all(&dir)?;
        let t_map = Tensor::new(vec![map.height, map.width], map.omega.clone())?;
        write_f32(dir.join(format!("t{t:04}_img{image:04}.dlf1")), &t_map)?;
        Ok(())
    }

    /// Latest `checkpoints/t####.ckpt`, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>, TrainError> {
        let dir = self.root.join("checkpoints");
        if !dir.is_dir() {
            return Ok(None);
        }
        let mut best: Option<(usize, PathBuf)> = None;
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let t = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix('t')?.strip_suffix(".ckpt")?.parse::<usize>().ok());
            if let Some(t) = t {
                if best.as_ref().is_none_or(|(b, _)| t > *b) {
                    best = Some((t, path));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }
}
