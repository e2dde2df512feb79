use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::detector::{build_model, encode_targets, DetectorModel, Targets};
use crate::error::{Error, Result};
use crate::losses::{
    class_logit_rows, combine, combined_loss, feature_kd_loss, logit_kd_loss, task_loss, FeatureProjection, KdConfig,
    LossBreakdown,
};
use crate::tensor::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig, Graph, Tensor};

use super::config::{EvalConfig, TrainingConfig};
use super::eval::validation_map50;

/// What a student optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Ground-truth task loss only.
    Task,
    Distill(KdConfig),
}

impl Objective {
    /// Weights used for the logged breakdown; the task objective is `α = 1`.
    pub fn weights(&self) -> KdConfig {
        match self {
            Objective::Task => KdConfig {
                alpha: 1.0,
                beta: 0.0,
                gamma: 0.0,
                ..KdConfig::default()
            },
            Objective::Distill(c) => *c,
        }
    }
}

/// Frozen teacher outputs for every training image, computed once.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    pub num_classes: usize,
    /// `cells · K` class logits per image.
    pub logits: Vec<Vec<f32>>,
    /// `C_T · G · G` final-stage features per image.
    pub features: Vec<Vec<f32>>,
    pub feature_shape: [usize; 3],
    index: std::collections::HashMap<u32, usize>,
}

impl TeacherCache {
    pub fn build(teacher: &DetectorModel<f32>, data: &Dataset, ids: &[u32], batch: usize) -> Result<Self> {
        let k = teacher.config().num_classes;
        let mut logits = Vec::with_capacity(ids.len());
        let mut features = Vec::with_capacity(ids.len());
        let mut feature_shape = [0; 3];
        for chunk in ids.chunks(batch.max(1)) {
            let (raw, feat) = teacher.predict(&data.batch(chunk)?)?;
            let mut g = Graph::<f32>::inference();
            let r = g.input(raw)?;
            let rows = class_logit_rows(&mut g, r, teacher.config())?;
            let rows = g.value(rows).data();
            let per_rows = rows.len() / chunk.len();
            logits.extend(rows.chunks(per_rows).map(<[f32]>::to_vec));
            let fs = feat.shape();
            feature_shape = [fs[1], fs[2], fs[3]];
            features.extend(feat.data().chunks(fs[1] * fs[2] * fs[3]).map(<[f32]>::to_vec));
        }
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(Self {
            num_classes: k,
            logits,
            features,
            feature_shape,
            index,
        })
    }

    /// Teacher logit rows `[B·cells, K]` and features `[B, C_T, G, G]`.
    pub fn batch(&self, ids: &[u32]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut l = Vec::new();
        let mut f = Vec::new();
        for id in ids {
            let i = *self
                .index
                .get(id)
                .ok_or_else(|| Error::Contract(format!("image {id} is not in the teacher cache")))?;
            l.extend_from_slice(&self.logits[i]);
            f.extend_from_slice(&self.features[i]);
        }
        let rows = l.len() / self.num_classes;
        let [c, h, w] = self.feature_shape;
        Ok((
            Tensor::new(vec![rows, self.num_classes], l)?,
            Tensor::new(vec![ids.len(), c, h, w], f)?,
        ))
    }
}

/// One optimizer step's record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Total as evaluated in the graph (single precision).
    pub graph_total: f64,
    pub grad_norm: f64,
}

/// A student or teacher plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: DetectorModel<f32>,
    pub projection: Option<FeatureProjection<f32>>,
    pub objective: Objective,
    optimizer: AdamW<f32>,
    proj_optimizer: Option<AdamW<f32>>,
    grad_clip: f64,
    steps: usize,
}

impl Trainer {
    /// `teacher_channels` is needed only for distillation, where a 1×1
    /// projection is added when the feature widths differ.
    pub fn new(
        model: DetectorModel<f32>,
        objective: Objective,
        teacher_channels: Option<usize>,
        optimizer: AdamWConfig,
        grad_clip: f64,
        projection_seed: u64,
    ) -> Result<Self> {
        let projection = match (objective, teacher_channels) {
            (Objective::Distill(_), Some(ct)) => {
                FeatureProjection::for_channels(model.config().feature_channels(), ct, projection_seed)
            }
            (Objective::Distill(_), None) => {
                return Err(Error::Contract("distillation needs the teacher's feature width".into()))
            }
            (Objective::Task, _) => None,
        };
        Ok(Self {
            optimizer: AdamW::new(optimizer, model.params()),
            proj_optimizer: projection.as_ref().map(|p| AdamW::new(optimizer, p.params())),
            model,
            projection,
            objective,
            grad_clip,
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Forward, backward, clip and AdamW update on one batch.
    pub fn step(
        &mut self,
        images: Tensor<f32>,
        targets: &[Targets],
        teacher: Option<(&Tensor<f32>, &Tensor<f32>)>,
        lr: f64,
    ) -> Result<(LossBreakdown, f64, f64)> {
        let cfg = self.model.config().clone();
        let mut g = Graph::<f32>::new();
        let x = g.input(images)?;
        let out = self.model.forward(&mut g, x)?;
        let task = task_loss(&mut g, out.raw, targets, &cfg)?.total;
        let (total, logit_kd, feature_kd) = match self.objective {
            Objective::Task => (task, None, None),
            Objective::Distill(kd) => {
                let (t_logits, t_feat) =
                    teacher.ok_or_else(|| Error::Contract("distillation step without teacher outputs".into()))?;
                let mut rows = class_logit_rows(&mut g, out.raw, &cfg)?;
                let mut t_rows = t_logits.clone();
                if kd.foreground_only_logit_kd {
                    let cells = cfg.grid * cfg.grid;
                    let pos: Vec<usize> = targets
                        .iter()
                        .enumerate()
                        .flat_map(|(b, t)| t.positives().into_iter().map(move |c| b * cells + c))
                        .collect();
                    rows = g.gather_rows(rows, &pos)?;
                    let k = cfg.num_classes;
                    let picked: Vec<f32> =
                        pos.iter().flat_map(|&r| t_logits.data()[r * k..(r + 1) * k].iter().copied()).collect();
                    t_rows = Tensor::new(vec![pos.len(), k], picked)?;
                }
                let lk = if t_rows.numel() == 0 {
                    g.constant(&[1], vec![0.0])?
                } else {
                    logit_kd_loss(&mut g, rows, &t_rows, kd.temperature, kd.kl_direction)?
                };
                let fk = feature_kd_loss(&mut g, out.features, t_feat, self.projection.as_ref())?;
                (combine(&mut g, task, lk, fk, &kd)?, Some(lk), Some(fk))
            }
        };
        let graph_total = g.scalar(total) as f64;
        if !graph_total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let breakdown = combined_loss(
            g.scalar(task) as f64,
            logit_kd.map_or(0.0, |v| g.scalar(v) as f64),
            feature_kd.map_or(0.0, |v| g.scalar(v) as f64),
            &self.objective.weights(),
        );
        let grads = g.backward(total)?;
        self.model.params_mut().load_grads(&grads);
        let norm = match self.projection.as_mut() {
            Some(p) => {
                p.params_mut().load_grads(&grads);
                clip_grad_norm(&mut [self.model.params_mut(), p.params_mut()], self.grad_clip)
            }
            None => clip_grad_norm(&mut [self.model.params_mut()], self.grad_clip),
        };
        self.optimizer.step(self.model.params_mut(), lr)?;
        if let (Some(p), Some(o)) = (self.projection.as_mut(), self.proj_optimizer.as_mut()) {
            o.step(p.params_mut(), lr)?;
        }
        self.model.params_mut().clear_grads();
        if let Some(p) = self.projection.as_mut() {
            p.params_mut().clear_grads();
        }
        self.steps += 1;
        Ok((breakdown, graph_total, norm))
    }
}

/// Inputs of one training run.
pub struct TrainJob<'a> {
    pub data: &'a Dataset,
    pub train: &'a [u32],
    pub val: &'a [u32],
    pub batch: usize,
    pub base_lr: f64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub objective: Objective,
    pub teacher: Option<&'a TeacherCache>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub val_map50: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: DetectorModel<f32>,
    pub best_epoch: usize,
    pub best_val_map50: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Warmup plus cosine schedule, per-epoch shuffling, early stopping on
/// validation mAP50 after `patience` epochs without improvement.
pub fn train_model(
    config: &crate::detector::DetectorConfig,
    job: &TrainJob<'_>,
    training: &TrainingConfig,
    eval: &EvalConfig,
) -> Result<TrainOutcome> {
    if job.train.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    let model = build_model::<f32>(config, job.init_seed)?;
    let teacher_channels = job.teacher.map(|t| t.feature_shape[0]);
    if matches!(job.objective, Objective::Distill(_)) && job.teacher.is_none() {
        return Err(Error::Contract("distillation requires a trained teacher".into()));
    }
    let mut trainer = Trainer::new(
        model,
        job.objective,
        teacher_channels,
        training.optimizer,
        training.grad_clip,
        job.init_seed ^ 0x9e37_79b9_7f4a_7c15,
    )?;
    let targets: std::collections::HashMap<u32, Targets> = job
        .train
        .iter()
        .map(|&id| Ok((id, encode_targets(&job.data.image(id)?.annotations, config)?)))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(job.shuffle_seed);
    let mut order = job.train.to_vec();
    let mut best = trainer.model.clone();
    let (mut best_epoch, mut best_map) = (0, f64::NEG_INFINITY);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..training.epochs {
        let lr = cosine_lr(epoch, training.epochs, job.base_lr, training.warmup_epochs)?;
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(job.batch) {
            let images = job.data.batch(chunk)?;
            let tgt: Vec<Targets> = chunk.iter().map(|id| targets[id].clone()).collect();
            let teacher = job.teacher.map(|t| t.batch(chunk)).transpose()?;
            let (loss, graph_total, grad_norm) =
                trainer.step(images, &tgt, teacher.as_ref().map(|(l, f)| (l, f)), lr)?;
            steps.push(StepRecord {
                step: trainer.steps() - 1,
                epoch,
                lr,
                loss,
                graph_total,
                grad_norm,
            });
            sum += loss.total;
            n += 1;
        }
        let val_map50 = validation_map50(&trainer.model, job.data, job.val, eval)?;
        epochs.push(EpochRecord {
            epoch,
            lr,
            mean_total: sum / n as f64,
            val_map50,
        });
        if val_map50 > best_map {
            best_map = val_map50;
            best_epoch = epoch;
            best.params_mut().copy_values_from(trainer.model.params())?;
        } else if epoch - best_epoch >= training.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        best_val_map50: best_map,
        epochs_run: epochs.len(),
        stopped_early,
        steps,
        epochs,
    })
}

/// `step,epoch,lr,task,logit_kd,feature_kd,total,graph_total,grad_norm`;
/// floats use shortest round-trip formatting.
pub fn steps_csv(steps: &[StepRecord]) -> String {
    let mut s = String::from("step,epoch,lr,task,logit_kd,feature_kd,total,graph_total,grad_norm\n");
    for r in steps {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.step, r.epoch, r.lr, r.loss.task, r.loss.logit_kd, r.loss.feature_kd, r.loss.total, r.graph_total, r.grad_norm
        )
        .unwrap();
    }
    s
}

pub fn epochs_csv(epochs: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,mean_total,val_map50\n");
    for e in epochs {
        writeln!(s, "{},{},{},{}", e.epoch, e.lr, e.mean_total, e.val_map50).unwrap();
    }
    s
}
