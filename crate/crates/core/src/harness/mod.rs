//! Protocol orchestration: data generation, teacher then student training,
//! calibration, INT8 conversion, evaluation at both precisions and report
//! emission, with a hash-checked ledger that makes every stage resumable.

pub mod config;
pub mod eval;
pub mod tables;
pub mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{generate, make_splits_counts, Dataset, SplitManifest};
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, ImageEval, PrecisionLevel};
use crate::quant::{calibrate, report_csv, CalibrationTable, ConvertOptions, QuantModel, ScalePolicy};
use crate::tensor::{load_checkpoint, save_checkpoint};

pub use config::{derive_seed, RunConfig};
use eval::{build_report, collect_fp32, collect_int8, matched_recall_comparison, measure_fps, MatchedRecall};
use tables::{emit_tables, ReportSet, DIRECT, KD_A, KD_B, PERCENTILE_SUFFIX, TEACHER};
use train::{epochs_csv, steps_csv, train_model, Objective, TeacherCache, TrainJob};

/// Every model trained by the protocol, in training order.
pub const MODELS: [&str; 4] = [TEACHER, DIRECT, KD_A, KD_B];
/// Models whose percentile-policy conversion is also evaluated.
pub const PRIMARY: [&str; 3] = [TEACHER, DIRECT, KD_A];

pub const LEDGER_FILE: &str = "ledger.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainTeacher,
    TrainDirect,
    TrainKdA,
    TrainKdB,
    Calibrate,
    Quantize,
    EvaluateFp32,
    EvaluateInt8,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::GenData,
        Stage::TrainTeacher,
        Stage::TrainDirect,
        Stage::TrainKdA,
        Stage::TrainKdB,
        Stage::Calibrate,
        Stage::Quantize,
        Stage::EvaluateFp32,
        Stage::EvaluateInt8,
        Stage::Report,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainTeacher => "train-teacher",
            Stage::TrainDirect => "train-direct",
            Stage::TrainKdA => "train-kd-a",
            Stage::TrainKdB => "train-kd-b",
            Stage::Calibrate => "calibrate",
            Stage::Quantize => "quantize",
            Stage::EvaluateFp32 => "evaluate-fp32",
            Stage::EvaluateInt8 => "evaluate-int8",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn requires(&self) -> &'static [Stage] {
        use Stage::*;
        match self {
            GenData => &[],
            TrainTeacher => &[GenData],
            TrainDirect | TrainKdA | TrainKdB => &[GenData, TrainTeacher],
            Calibrate => &[GenData, TrainTeacher, TrainDirect, TrainKdA, TrainKdB],
            Quantize => &[Calibrate],
            EvaluateFp32 => &[GenData, TrainTeacher, TrainDirect, TrainKdA, TrainKdB],
            EvaluateInt8 => &[GenData, Calibrate, Quantize],
            Report => &[EvaluateFp32, EvaluateInt8],
        }
    }

    /// Training stage of a model id.
    pub fn training(model: &str) -> Option<Stage> {
        match model {
            TEACHER => Some(Stage::TrainTeacher),
            DIRECT => Some(Stage::TrainDirect),
            KD_A => Some(Stage::TrainKdA),
            KD_B => Some(Stage::TrainKdB),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Completed stage: outputs with their content hashes and wall time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub duration_secs: f64,
    /// Path relative to the run directory → SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

/// Headline metrics of one report, mirrored into the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub map50: f64,
    pub map50_95: f64,
    pub precision: f64,
    pub recall: f64,
    pub far: f64,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentLedger {
    pub run_id: String,
    pub config_digest: String,
    pub stages: BTreeMap<Stage, StageRecord>,
    /// Model id → checkpoint SHA-256.
    pub checkpoints: BTreeMap<String, String>,
    /// `<model>/<precision>` → metrics.
    pub metrics: BTreeMap<String, MetricSummary>,
}

impl ExperimentLedger {
    pub fn new(config: &RunConfig) -> Self {
        let digest = config.digest();
        Self {
            run_id: format!("run-{}-seed{}", &digest[..12], config.seed),
            config_digest: digest,
            stages: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn total_secs(&self) -> f64 {
        self.stages.values().map(|s| s.duration_secs).sum()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn report_file(model: &str, level: PrecisionLevel) -> String {
    format!("reports/{model}_{level}.json")
}

fn matched_file(level: PrecisionLevel) -> String {
    format!("reports/matched_recall_{level}.json")
}

/// A run directory bound to a config.
#[derive(Debug)]
pub struct Protocol {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub ledger: ExperimentLedger,
    /// Print one line per stage to stderr.
    pub verbose: bool,
}

impl Protocol {
    /// Opens `config.out_dir`. An existing ledger is kept when its config
    /// digest matches; a mismatch is refused.
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.out_dir.clone();
        std::fs::create_dir_all(&dir)?;
        let ledger_path = dir.join(LEDGER_FILE);
        let ledger = if ledger_path.exists() {
            let l = ExperimentLedger::load(&ledger_path)?;
            if l.config_digest != config.digest() {
                return Err(Error::Config(format!(
                    "{} belongs to config {}, not {}; refusing to mix runs",
                    ledger_path.display(),
                    l.config_digest,
                    config.digest()
                )));
            }
            l
        } else {
            ExperimentLedger::new(&config)
        };
        std::fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
        let p = Self {
            config,
            dir,
            ledger,
            verbose: false,
        };
        p.save()?;
        Ok(p)
    }

    /// Opens with an empty ledger, discarding earlier progress in the directory.
    pub fn fresh(config: RunConfig) -> Result<Self> {
        let ledger_path = config.out_dir.join(LEDGER_FILE);
        if ledger_path.exists() {
            std::fs::remove_file(&ledger_path)?;
        }
        Self::open(config)
    }

    fn save(&self) -> Result<()> {
        self.ledger.save(&self.dir.join(LEDGER_FILE))
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// True when the stage is recorded and every artifact still hashes to
    /// its recorded value.
    pub fn is_complete(&self, stage: Stage) -> bool {
        let Some(rec) = self.ledger.stages.get(&stage) else {
            return false;
        };
        rec.artifacts.iter().all(|(rel, sha)| {
            std::fs::read(self.path(rel)).map(|b| crate::sha256_hex(&b) == *sha).unwrap_or(false)
        })
    }

    fn require(&self, stage: Stage) -> Result<()> {
        for dep in stage.requires() {
            if !self.is_complete(*dep) {
                return Err(Error::Contract(format!(
                    "stage `{stage}` needs `{dep}` to be complete with intact artifacts"
                )));
            }
        }
        Ok(())
    }

    /// Runs one stage after checking its preconditions and records it.
    /// Stages downstream of it are invalidated.
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let wrap = |e: Error| Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        };
        self.require(stage).map_err(wrap)?;
        if self.verbose {
            eprintln!("[{}] {stage}: start", self.ledger.run_id);
        }
        let start = Instant::now();
        let mut out = Outputs::default();
        let res = match stage {
            Stage::GenData => self.gen_data(&mut out),
            Stage::TrainTeacher => self.train(TEACHER, &mut out),
            Stage::TrainDirect => self.train(DIRECT, &mut out),
            Stage::TrainKdA => self.train(KD_A, &mut out),
            Stage::TrainKdB => self.train(KD_B, &mut out),
            Stage::Calibrate => self.calibrate(&mut out),
            Stage::Quantize => self.quantize(&mut out),
            Stage::EvaluateFp32 => self.evaluate(PrecisionLevel::Fp32, &mut out),
            Stage::EvaluateInt8 => self.evaluate(PrecisionLevel::Int8, &mut out),
            Stage::Report => self.report(&mut out),
        };
        res.map_err(wrap)?;
        let downstream: Vec<Stage> = Stage::ALL
            .into_iter()
            .filter(|s| *s != stage && self.depends_on(*s, stage))
            .collect();
        for s in downstream {
            self.ledger.stages.remove(&s);
        }
        let mut artifacts = BTreeMap::new();
        for rel in out.files {
            let sha = crate::sha256_hex(&std::fs::read(self.path(&rel)).map_err(|e| wrap(e.into()))?);
            if let Some(model) = out.checkpoints.get(&rel) {
                self.ledger.checkpoints.insert(model.clone(), sha.clone());
            }
            artifacts.insert(rel, sha);
        }
        self.ledger.metrics.extend(out.metrics);
        let secs = start.elapsed().as_secs_f64();
        self.ledger.stages.insert(
            stage,
            StageRecord {
                stage,
                duration_secs: secs,
                artifacts,
            },
        );
        self.save().map_err(wrap)?;
        if self.verbose {
            eprintln!("[{}] {stage}: done in {secs:.1}s", self.ledger.run_id);
        }
        Ok(())
    }

    fn depends_on(&self, s: Stage, on: Stage) -> bool {
        s.requires().iter().any(|d| *d == on || self.depends_on(*d, on))
    }

    /// Runs every stage that is not already complete, in protocol order.
    pub fn run_remaining(&mut self) -> Result<&ExperimentLedger> {
        for stage in Stage::ALL {
            if !self.is_complete(stage) {
                self.run_stage(stage)?;
            } else if self.verbose {
                eprintln!("[{}] {stage}: already complete, skipped", self.ledger.run_id);
            }
        }
        Ok(&self.ledger)
    }

    fn load_data(&self) -> Result<(Dataset, SplitManifest)> {
        let data = Dataset::load(&self.path("data/dataset.bin"))?;
        let splits = SplitManifest::from_json(&std::fs::read_to_string(self.path("data/splits.json"))?)?;
        Ok((data, splits))
    }

    pub fn load_model(&self, model: &str) -> Result<DetectorModel<f32>> {
        let cfg = if model == TEACHER { &self.config.teacher } else { &self.config.student };
        DetectorModel::from_checkpoint(cfg, load_checkpoint(&self.path(&format!("models/{model}.ckpt")))?)
    }

    fn gen_data(&self, out: &mut Outputs) -> Result<()> {
        let d = &self.config.dataset;
        let seed = self.config.seed;
        let data = generate(&d.scene, d.total_images, derive_seed(seed, "dataset"))?;
        let splits = make_splits_counts(
            d.total_images,
            [d.train, d.val, d.calibration],
            derive_seed(seed, "splits"),
            derive_seed(seed, "calibration"),
        )?;
        std::fs::create_dir_all(self.path("data"))?;
        data.save(&self.path("data/dataset.bin"))?;
        std::fs::write(self.path("data/splits.json"), splits.to_json()?)?;
        let counts = data.class_counts();
        std::fs::write(
            self.path("data/class_counts.json"),
            serde_json::to_string_pretty(&d.scene.class_names().into_iter().zip(counts).collect::<BTreeMap<_, _>>())?,
        )?;
        out.files.extend(["data/dataset.bin", "data/splits.json", "data/class_counts.json"].map(String::from));
        Ok(())
    }

    fn train(&self, model: &str, out: &mut Outputs) -> Result<()> {
        let (data, splits) = self.load_data()?;
        let c = &self.config;
        let teacher_cache;
        let (cfg, job) = if model == TEACHER {
            (
                &c.teacher,
                TrainJob {
                    data: &data,
                    train: &splits.train,
                    val: &splits.val,
                    batch: c.training.teacher_batch,
                    base_lr: c.training.teacher_lr,
                    init_seed: derive_seed(c.seed, "teacher-init"),
                    shuffle_seed: derive_seed(c.seed, "teacher-shuffle"),
                    objective: Objective::Task,
                    teacher: None,
                },
            )
        } else {
            // teacher first; the checkpoint is loaded (and hash-checked by
            // the stage precondition) even for the direct student
            let teacher = self.load_model(TEACHER)?;
            let objective = match model {
                DIRECT => Objective::Task,
                KD_A => Objective::Distill(c.kd),
                KD_B => Objective::Distill(c.kd_form_b()),
                other => return Err(Error::Contract(format!("unknown model `{other}`"))),
            };
            teacher_cache = match objective {
                Objective::Distill(_) => Some(TeacherCache::build(&teacher, &data, &splits.train, c.eval.batch)?),
                Objective::Task => None,
            };
            (
                &c.student,
                TrainJob {
                    data: &data,
                    train: &splits.train,
                    val: &splits.val,
                    batch: c.training.student_batch,
                    base_lr: c.training.student_lr,
                    init_seed: derive_seed(c.seed, "student-init"),
                    shuffle_seed: derive_seed(c.seed, "student-shuffle"),
                    objective,
                    teacher: teacher_cache.as_ref(),
                },
            )
        };
        let outcome = train_model(cfg, &job, &c.training, &c.eval)?;
        for dir in ["models", "logs"] {
            std::fs::create_dir_all(self.path(dir))?;
        }
        let ckpt = format!("models/{model}.ckpt");
        save_checkpoint(&self.path(&ckpt), &outcome.model.to_checkpoint())?;
        let steps = format!("logs/{model}_steps.csv");
        let epochs = format!("logs/{model}_epochs.csv");
        std::fs::write(self.path(&steps), steps_csv(&outcome.steps))?;
        std::fs::write(self.path(&epochs), epochs_csv(&outcome.epochs))?;
        let summary = format!("logs/{model}_summary.json");
        std::fs::write(
            self.path(&summary),
            serde_json::to_string_pretty(&serde_json::json!({
                "model": model,
                "params": outcome.model.param_count(),
                "best_epoch": outcome.best_epoch,
                "best_val_map50": outcome.best_val_map50,
                "epochs_run": outcome.epochs_run,
                "stopped_early": outcome.stopped_early,
                "steps": outcome.steps.len(),
            }))?,
        )?;
        out.checkpoints.insert(ckpt.clone(), model.to_string());
        out.files.extend([ckpt, steps, epochs, summary]);
        Ok(())
    }

    fn calibrate(&self, out: &mut Outputs) -> Result<()> {
        let (data, splits) = self.load_data()?;
        check_calibration_split(&splits)?;
        let batches = splits
            .calibration
            .chunks(self.config.eval.batch)
            .map(|c| data.batch(c))
            .collect::<Result<Vec<_>>>()?;
        std::fs::create_dir_all(self.path("calib"))?;
        for m in MODELS {
            // the percentile pass records min/max as well, so one table
            // serves both policies
            let table = calibrate(&self.load_model(m)?, &batches, ScalePolicy::Percentile999)?;
            let rel = format!("calib/{m}.json");
            std::fs::write(self.path(&rel), serde_json::to_vec(&table)?)?;
            out.files.push(rel);
        }
        std::fs::write(self.path("calib/split.json"), serde_json::to_string_pretty(&splits.calibration)?)?;
        out.files.push("calib/split.json".into());
        Ok(())
    }

    fn load_table(&self, model: &str) -> Result<CalibrationTable> {
        Ok(serde_json::from_slice(&std::fs::read(self.path(&format!("calib/{model}.json")))?)?)
    }

    fn quantize(&self, out: &mut Outputs) -> Result<()> {
        let (_, splits) = self.load_data()?;
        let recorded: Vec<u32> = serde_json::from_slice(&std::fs::read(self.path("calib/split.json"))?)?;
        if recorded != splits.calibration {
            return Err(Error::Contract("calibration stats were not taken on the designated split".into()));
        }
        std::fs::create_dir_all(self.path("quant"))?;
        let opts = self.config.quant.convert;
        let mut jobs: Vec<(String, &str, ConvertOptions)> = MODELS.iter().map(|m| (m.to_string(), *m, opts)).collect();
        if self.config.quant.compare_percentile {
            let p = ConvertOptions {
                policy: ScalePolicy::Percentile999,
                ..opts
            };
            jobs.extend(PRIMARY.iter().map(|m| (format!("{m}{PERCENTILE_SUFFIX}"), *m, p)));
        }
        for (id, base, options) in jobs {
            let model = self.load_model(base)?;
            let q = QuantModel::convert(&model, &self.load_table(base)?, options)?;
            let rel = format!("quant/{id}.q8");
            q.save(&self.path(&rel))?;
            let layers = format!("quant/{id}_layers.csv");
            std::fs::write(self.path(&layers), report_csv(&q.conversion_report(&model)))?;
            out.files.extend([rel, layers]);
        }
        Ok(())
    }

    fn evaluate(&self, level: PrecisionLevel, out: &mut Outputs) -> Result<()> {
        let (data, splits) = self.load_data()?;
        let e = &self.config.eval;
        let scene = &self.config.dataset.scene;
        std::fs::create_dir_all(self.path("reports"))?;
        let mut images: BTreeMap<String, Vec<ImageEval>> = BTreeMap::new();
        let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
        let ids: Vec<String> = match level {
            PrecisionLevel::Fp32 => MODELS.iter().map(|m| m.to_string()).collect(),
            PrecisionLevel::Int8 => {
                let mut v: Vec<String> = MODELS.iter().map(|m| m.to_string()).collect();
                if self.config.quant.compare_percentile {
                    v.extend(PRIMARY.iter().map(|m| format!("{m}{PERCENTILE_SUFFIX}")));
                }
                v
            }
        };
        for id in ids {
            let (imgs, fps) = match level {
                PrecisionLevel::Fp32 => {
                    let model = self.load_model(&id)?;
                    let imgs = collect_fp32(&model, &data, &splits.val, e)?;
                    let fps = measure_fps(&data, &splits.val, e, |x| Ok(model.predict(x)?.0))?;
                    (imgs, fps)
                }
                PrecisionLevel::Int8 => {
                    let base = id.trim_end_matches(PERCENTILE_SUFFIX);
                    let cfg = if base == TEACHER { &self.config.teacher } else { &self.config.student };
                    let q = QuantModel::load(&self.path(&format!("quant/{id}.q8")), cfg)?;
                    let imgs = collect_int8(&q, &data, &splits.val, e)?;
                    let fps = measure_fps(&data, &splits.val, e, |x| q.forward(x))?;
                    (imgs, fps)
                }
            };
            let r = build_report(&id, level, &imgs, scene, e, fps)?;
            let rel = report_file(&id, level);
            std::fs::write(self.path(&rel), r.to_json()?)?;
            out.metrics.insert(
                format!("{id}/{level}"),
                MetricSummary {
                    map50: r.map50,
                    map50_95: r.map50_95,
                    precision: r.precision,
                    recall: r.recall,
                    far: r.far,
                    fps: r.fps,
                },
            );
            out.files.push(rel);
            images.insert(id.clone(), imgs);
            reports.insert(id, r);
        }
        let reference = &reports[DIRECT];
        let mut matched: Vec<MatchedRecall> = Vec::new();
        for subject in [DIRECT, KD_A, KD_B] {
            matched.push(matched_recall_comparison(reference, subject, &images[subject], e.recall_tolerance)?);
        }
        let rel = matched_file(level);
        std::fs::write(self.path(&rel), serde_json::to_string_pretty(&matched)?)?;
        out.files.push(rel);
        Ok(())
    }

    /// Collects every report and matched-recall record on disk.
    pub fn report_set(&self) -> Result<ReportSet> {
        let mut set = ReportSet {
            config_digest: self.ledger.config_digest.clone(),
            checkpoints: self.ledger.checkpoints.clone(),
            kd_alpha: self.config.kd.alpha,
            kd_b_alpha: self.config.kd_form_b().alpha,
            ..Default::default()
        };
        set.params.insert(TEACHER.into(), self.config.teacher.param_count()?);
        for m in [DIRECT, KD_A, KD_B] {
            set.params.insert(m.into(), self.config.student.param_count()?);
        }
        let dir = self.path("reports");
        if dir.exists() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            entries.sort();
            for p in entries {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                if !name.ends_with(".json") {
                    continue;
                }
                let text = std::fs::read_to_string(&p)?;
                if name.starts_with("matched_recall_") {
                    set.matched_recall.extend(serde_json::from_str::<Vec<MatchedRecall>>(&text)?);
                } else {
                    set.insert(EvalReport::from_json(&text)?);
                }
            }
        }
        Ok(set)
    }

    fn report(&self, out: &mut Outputs) -> Result<()> {
        let set = self.report_set()?;
        for p in emit_tables(&set, &self.path("tables"))? {
            let rel = p.strip_prefix(&self.dir).expect("inside run dir").to_string_lossy().into_owned();
            out.files.push(rel);
        }
        Ok(())
    }
}

#[derive(Default)]
struct Outputs {
    files: Vec<String>,
    checkpoints: BTreeMap<String, String>,
    metrics: BTreeMap<String, MetricSummary>,
}

/// The calibration split must be non-empty and disjoint from train and val.
pub fn check_calibration_split(splits: &SplitManifest) -> Result<()> {
    splits.validate()?;
    if splits.calibration.is_empty() {
        return Err(Error::Calibration("calibration split is empty".into()));
    }
    let used: std::collections::HashSet<u32> = splits.train.iter().chain(&splits.val).copied().collect();
    if let Some(id) = splits.calibration.iter().find(|id| used.contains(id)) {
        return Err(Error::Contract(format!("calibration image {id} also appears in train/val")));
    }
    Ok(())
}

/// Runs the whole protocol from scratch in `config.out_dir`.
pub fn run_protocol(config: RunConfig, verbose: bool) -> Result<ExperimentLedger> {
    let mut p = Protocol::fresh(config)?;
    p.verbose = verbose;
    p.run_remaining()?;
    Ok(p.ledger)
}

/// Continues the run whose ledger is at `ledger_path`, skipping stages whose
/// artifacts still match their hashes. `config` defaults to the one stored
/// beside the ledger; either way its digest must match the ledger's.
pub fn resume(ledger_path: &Path, config: Option<RunConfig>, verbose: bool) -> Result<ExperimentLedger> {
    let ledger = ExperimentLedger::load(ledger_path)?;
    let dir = ledger_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut config = match config {
        Some(c) => c,
        None => RunConfig::load(&dir.join(CONFIG_FILE))?,
    };
    if config.digest() != ledger.config_digest {
        return Err(Error::Config(format!(
            "config digest {} does not match ledger {}; refusing to resume",
            config.digest(),
            ledger.config_digest
        )));
    }
    config.out_dir = dir;
    let mut p = Protocol::open(config)?;
    p.verbose = verbose;
    p.run_remaining()?;
    Ok(p.ledger)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.as_str()));
        }
        assert!("train".parse::<Stage>().unwrap_err().is_config());
    }

    #[test]
    fn stage_dependencies_follow_protocol_order() {
        for (i, s) in Stage::ALL.iter().enumerate() {
            for d in s.requires() {
                assert!(Stage::ALL.iter().position(|x| x == d).unwrap() < i);
            }
        }
        assert!(Stage::TrainKdA.requires().contains(&Stage::TrainTeacher));
        assert!(Stage::TrainDirect.requires().contains(&Stage::TrainTeacher));
        assert_eq!(Stage::training(KD_B), Some(Stage::TrainKdB));
    }

    #[test]
    fn student_stage_refuses_without_teacher() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::smoke();
        c.out_dir = dir.path().to_path_buf();
        let mut p = Protocol::open(c).unwrap();
        let err = p.run_stage(Stage::TrainKdA).unwrap_err();
        assert!(err.to_string().contains("needs `gen-data`"), "{err}");
        p.run_stage(Stage::GenData).unwrap();
        assert!(p.is_complete(Stage::GenData));
        for s in [Stage::TrainDirect, Stage::TrainKdA, Stage::TrainKdB] {
            let err = p.run_stage(s).unwrap_err();
            assert!(err.to_string().contains("needs `train-teacher`"), "{err}");
        }
        // a tampered artifact voids completion
        std::fs::write(dir.path().join("data/splits.json"), "{}").unwrap();
        assert!(!p.is_complete(Stage::GenData));
    }

    #[test]
    fn calibration_overlap_rejected() {
        let mut s = make_splits_counts(20, [10, 5, 5], 1, 2).unwrap();
        check_calibration_split(&s).unwrap();
        s.calibration.push(s.train[0]);
        assert!(check_calibration_split(&s).is_err());
        s.calibration.clear();
        assert!(check_calibration_split(&s).is_err());
    }

    #[test]
    fn open_refuses_other_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::smoke();
        c.out_dir = dir.path().to_path_buf();
        Protocol::open(c.clone()).unwrap();
        c.seed += 1;
        assert!(Protocol::open(c.clone()).unwrap_err().is_config());
        // a fresh start discards the old ledger instead
        Protocol::fresh(c).unwrap();
    }
}
