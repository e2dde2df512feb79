use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SceneSpec;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::losses::KdConfig;
use crate::quant::ConvertOptions;
use crate::tensor::AdamWConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Images generated; splits are drawn from these ids.
    pub total_images: usize,
    pub train: usize,
    pub val: usize,
    pub calibration: usize,
    pub scene: SceneSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            total_images: 2628,
            train: 2000,
            val: 500,
            calibration: 128,
            scene: SceneSpec::long_tail(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Epochs without a validation mAP50 improvement before stopping.
    pub patience: usize,
    pub teacher_batch: usize,
    pub student_batch: usize,
    pub teacher_lr: f64,
    pub student_lr: f64,
    pub grad_clip: f64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            warmup_epochs: 3,
            patience: 30,
            teacher_batch: 32,
            student_batch: 64,
            teacher_lr: 0.00283,
            student_lr: 0.004,
            grad_clip: 10.0,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub convert: ConvertOptions,
    /// Also convert and evaluate the primary models with the percentile policy.
    pub compare_percentile: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            convert: ConvertOptions::default(),
            compare_percentile: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Threshold for the reported precision/recall/FAR.
    pub conf_threshold: f64,
    /// Threshold for detections entering the AP computation.
    pub decode_threshold: f64,
    pub iou_nms: f64,
    pub throughput_iterations: usize,
    pub throughput_warmup: usize,
    pub recall_tolerance: f64,
    /// Pool member-class detections for group AP instead of averaging.
    pub pooled_groups: bool,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.25,
            decode_threshold: 0.001,
            iou_nms: 0.7,
            throughput_iterations: 1000,
            throughput_warmup: 50,
            recall_tolerance: 0.02,
            pooled_groups: false,
            batch: 50,
        }
    }
}

fn default_teacher() -> DetectorConfig {
    DetectorConfig::teacher(5)
}

fn default_student() -> DetectorConfig {
    DetectorConfig::student(5)
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_threads() -> usize {
    1
}

/// Every knob of a protocol run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_teacher")]
    pub teacher: DetectorConfig,
    #[serde(default = "default_student")]
    pub student: DetectorConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub kd: KdConfig,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: default_out_dir(),
            threads: 1,
            dataset: DatasetConfig::default(),
            teacher: default_teacher(),
            student: default_student(),
            training: TrainingConfig::default(),
            kd: KdConfig::default(),
            quant: QuantConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// 200 images, 3 epochs, short throughput loop.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.out_dir = PathBuf::from("runs/smoke");
        c.dataset.total_images = 200;
        c.dataset.train = 140;
        c.dataset.val = 40;
        c.dataset.calibration = 20;
        c.training.epochs = 3;
        c.training.warmup_epochs = 1;
        c.training.patience = 3;
        c.eval.throughput_iterations = 20;
        c.eval.throughput_warmup = 2;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.teacher.validate()?;
        self.student.validate()?;
        self.dataset.scene.validate()?;
        self.kd.validate()?;
        let (t, s) = (&self.teacher, &self.student);
        let k = self.dataset.scene.num_classes();
        if t.num_classes != k || s.num_classes != k {
            return bad(format!("detectors must predict the dataset's {k} classes"));
        }
        if t.input_size != s.input_size || t.grid != s.grid || t.input_size != self.dataset.scene.image_size {
            return bad("teacher, student and dataset must share input size and grid".into());
        }
        if t.width_mult < s.width_mult || t.depth < s.depth {
            return bad("teacher width and depth must be at least the student's".into());
        }
        let d = &self.dataset;
        if d.train == 0 || d.val == 0 || d.calibration == 0 {
            return bad("train, val and calibration splits must be non-empty".into());
        }
        if d.train + d.val + d.calibration > d.total_images {
            return bad(format!(
                "splits {}+{}+{} exceed {} images",
                d.train, d.val, d.calibration, d.total_images
            ));
        }
        let tr = &self.training;
        if tr.epochs <= tr.warmup_epochs {
            return bad(format!("epochs ({}) must exceed warmup epochs ({})", tr.epochs, tr.warmup_epochs));
        }
        if tr.teacher_batch == 0 || tr.student_batch == 0 || tr.patience == 0 {
            return bad("batch sizes and patience must be positive".into());
        }
        for lr in [tr.teacher_lr, tr.student_lr] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("learning rate {lr} must be positive"));
            }
        }
        if !(tr.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        let e = &self.eval;
        for (name, v) in [
            ("conf_threshold", e.conf_threshold),
            ("decode_threshold", e.decode_threshold),
            ("iou_nms", e.iou_nms),
            ("recall_tolerance", e.recall_tolerance),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if e.throughput_iterations == 0 || e.batch == 0 {
            return bad("throughput iterations and eval batch must be positive".into());
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 over everything except the output location and thread count.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.threads = 1;
        crate::sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    /// Form B: full task weight, every other knob identical.
    pub fn kd_form_b(&self) -> KdConfig {
        KdConfig {
            alpha: 1.0,
            ..self.kd
        }
    }
}

/// Independent 64-bit seed for a named purpose.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let h = crate::sha256(format!("{seed}:{label}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        RunConfig::smoke().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(err.is_config());
        let err = RunConfig::from_toml("[training]\nepochz = 2\n").unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn digest_ignores_location() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "/elsewhere".into();
        b.threads = 4;
        assert_eq!(a.digest(), b.digest());
        b.seed = 7;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn form_b_changes_only_alpha() {
        let c = RunConfig::default();
        let b = c.kd_form_b();
        assert_eq!(b.alpha, 1.0);
        assert_eq!(KdConfig { alpha: c.kd.alpha, ..b }, c.kd);
    }

    #[test]
    fn invalid_configs() {
        let mut c = RunConfig::default();
        c.training.warmup_epochs = 30;
        assert!(c.validate().unwrap_err().is_config());
        let mut c = RunConfig::default();
        c.dataset.train = 3000;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.teacher.width_mult = 0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(3, "x"), derive_seed(3, "x"));
    }
}
