//! Detection task loss and the distillation objective
//! `α·task + β·T²·KL(tempered logits) + γ·‖proj(F_S) − F_T‖²`.
//!
//! Teacher quantities always enter the student graph as constants, so no
//! gradient can reach teacher parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, Targets, BOX_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Argument order of the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(σ(z_S/T) ‖ σ(z_T/T))`
    StudentFirst,
    /// `KL(σ(z_T/T) ‖ σ(z_S/T))`
    TeacherFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub kl_direction: KlDirection,
    pub foreground_only_logit_kd: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self::form_a()
    }
}

impl KdConfig {
    /// Task-dampened preset: α = 0.5, β = 0.3, γ = 0.02, T = 10.
    pub fn form_a() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.3,
            gamma: 0.02,
            temperature: 10.0,
            kl_direction: KlDirection::StudentFirst,
            foreground_only_logit_kd: false,
        }
    }

    /// Same as [`KdConfig::form_a`] with full task weight.
    pub fn form_b() -> Self {
        Self {
            alpha: 1.0,
            ..Self::form_a()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Scalar loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub task: f64,
    pub logit_kd: f64,
    pub feature_kd: f64,
}

pub fn combined_loss(task: f64, logit_kd: f64, feature_kd: f64, cfg: &KdConfig) -> LossBreakdown {
    LossBreakdown {
        total: cfg.alpha * task + cfg.beta * logit_kd + cfg.gamma * feature_kd,
        task,
        logit_kd,
        feature_kd,
    }
}

/// Differentiable counterpart of [`combined_loss`].
pub fn combine<T: Real>(g: &mut Graph<T>, task: Var, logit_kd: Var, feature_kd: Var, cfg: &KdConfig) -> Result<Var> {
    let a = g.scale(task, T::lit(cfg.alpha))?;
    let b = g.scale(logit_kd, T::lit(cfg.beta))?;
    let c = g.scale(feature_kd, T::lit(cfg.gamma))?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// Graph handles of the task loss and its sub-terms.
#[derive(Debug, Clone, Copy)]
pub struct TaskLoss {
    pub total: Var,
    pub objectness: Var,
    pub classification: Var,
    pub box_regression: Var,
}

/// `[B, K+5, G, G]` head output to `[B·G·G, K]` class-logit rows.
pub fn class_logit_rows<T: Real>(g: &mut Graph<T>, raw: Var, config: &DetectorConfig) -> Result<Var> {
    let rows = g.nchw_to_rows(raw)?;
    g.slice_cols(rows, 0, config.num_classes)
}

/// Objectness BCE averaged over every cell, plus class cross-entropy and a
/// GIoU box loss averaged over positive cells. Without positives the latter
/// two are exact zeros.
pub fn task_loss<T: Real>(
    g: &mut Graph<T>,
    raw: Var,
    targets: &[Targets],
    config: &DetectorConfig,
) -> Result<TaskLoss> {
    let (grid, k) = (config.grid, config.num_classes);
    let cells = grid * grid;
    let s = g.shape(raw).to_vec();
    if s.len() != 4 || s[0] != targets.len() || s[1] != config.outputs_per_cell() || s[2] != grid || s[3] != grid {
        return Err(Error::dim(
            "task_loss",
            format!("prediction {s:?} for {} target grids", targets.len()),
        ));
    }
    if targets.iter().any(|t| t.grid != grid) {
        return Err(Error::dim("task_loss", "target grid size differs from config"));
    }
    let n = targets.len() * cells;
    let rows = g.nchw_to_rows(raw)?;

    let obj_logits = g.slice_cols(rows, k, k + 1)?;
    let obj_targets: Vec<T> = targets
        .iter()
        .flat_map(|t| t.objectness.iter().map(|&v| T::lit(v as f64)))
        .collect();
    let y = g.constant(&[n, 1], obj_targets)?;
    let sp = g.softplus(obj_logits)?;
    let yx = g.mul(y, obj_logits)?;
    let bce = g.sub(sp, yx)?;
    let objectness = g.mean(bce)?;

    let mut positives = Vec::new();
    let mut classes = Vec::new();
    let mut gt_boxes = Vec::new();
    for (img, t) in targets.iter().enumerate() {
        for cell in t.positives() {
            positives.push((img * cells + cell, cell));
            classes.push(t.class_ids[cell].expect("positive cell has a class"));
            gt_boxes.push(t.boxes[cell].expect("positive cell has a box"));
        }
    }

    let (classification, box_regression) = if positives.is_empty() {
        (g.constant(&[1], vec![T::zero()])?, g.constant(&[1], vec![T::zero()])?)
    } else {
        let p = positives.len();
        let idx: Vec<usize> = positives.iter().map(|&(r, _)| r).collect();

        let cls = g.slice_cols(rows, 0, k)?;
        let cls_p = g.gather_rows(cls, &idx)?;
        let ls = g.log_softmax(cls_p)?;
        let mut onehot = vec![T::zero(); p * k];
        for (i, &c) in classes.iter().enumerate() {
            onehot[i * k + c] = T::one();
        }
        let onehot = g.constant(&[p, k], onehot)?;
        let picked = g.mul(onehot, ls)?;
        let ce_sum = g.sum(picked)?;
        let classification = g.scale(ce_sum, T::lit(-1.0 / p as f64))?;

        let deltas = g.slice_cols(rows, k + 1, k + 1 + BOX_CHANNELS)?;
        let dp = g.gather_rows(deltas, &idx)?;
        let col = |f: fn(&BoxInfo) -> f64| -> Vec<T> {
            positives
                .iter()
                .zip(&gt_boxes)
                .map(|(&(_, cell), b)| T::lit(f(&BoxInfo::new(cell, grid, b))))
                .collect()
        };
        let cell_x = g.constant(&[p, 1], col(|b| b.col))?;
        let cell_y = g.constant(&[p, 1], col(|b| b.row))?;
        let gx1 = g.constant(&[p, 1], col(|b| b.x1))?;
        let gy1 = g.constant(&[p, 1], col(|b| b.y1))?;
        let gx2 = g.constant(&[p, 1], col(|b| b.x2))?;
        let gy2 = g.constant(&[p, 1], col(|b| b.y2))?;
        let garea = g.constant(&[p, 1], col(|b| (b.x2 - b.x1) * (b.y2 - b.y1)))?;
        let cell_size = T::lit(config.cell_size() as f64);

        let tx = g.slice_cols(dp, 0, 1)?;
        let ty = g.slice_cols(dp, 1, 2)?;
        let tw = g.slice_cols(dp, 2, 3)?;
        let th = g.slice_cols(dp, 3, 4)?;
        let sx = g.sigmoid(tx)?;
        let sy = g.sigmoid(ty)?;
        let cx = g.add(sx, cell_x)?;
        let cx = g.scale(cx, cell_size)?;
        let cy = g.add(sy, cell_y)?;
        let cy = g.scale(cy, cell_size)?;
        let ew = g.exp(tw)?;
        let pw = g.scale(ew, cell_size)?;
        let eh = g.exp(th)?;
        let ph = g.scale(eh, cell_size)?;
        let half_w = g.scale(pw, T::lit(0.5))?;
        let half_h = g.scale(ph, T::lit(0.5))?;
        let px1 = g.sub(cx, half_w)?;
        let px2 = g.add(cx, half_w)?;
        let py1 = g.sub(cy, half_h)?;
        let py2 = g.add(cy, half_h)?;

        let ix1 = g.maximum(px1, gx1)?;
        let ix2 = g.minimum(px2, gx2)?;
        let iy1 = g.maximum(py1, gy1)?;
        let iy2 = g.minimum(py2, gy2)?;
        let iw = g.sub(ix2, ix1)?;
        let iw = g.relu(iw)?;
        let ih = g.sub(iy2, iy1)?;
        let ih = g.relu(ih)?;
        let inter = g.mul(iw, ih)?;
        let parea = g.mul(pw, ph)?;
        let both = g.add(parea, garea)?;
        let union = g.sub(both, inter)?;
        let iou = g.div(inter, union)?;

        let ex1 = g.minimum(px1, gx1)?;
        let ex2 = g.maximum(px2, gx2)?;
        let ey1 = g.minimum(py1, gy1)?;
        let ey2 = g.maximum(py2, gy2)?;
        let ew = g.sub(ex2, ex1)?;
        let eh = g.sub(ey2, ey1)?;
        let enclose = g.mul(ew, eh)?;
        let slack = g.sub(enclose, union)?;
        let penalty = g.div(slack, enclose)?;
        let giou = g.sub(iou, penalty)?;
        let mean_giou = g.mean(giou)?;
        let neg = g.scale(mean_giou, -T::one())?;
        (classification, g.offset(neg, T::one())?)
    };

    let oc = g.add(objectness, classification)?;
    let total = g.add(oc, box_regression)?;
    Ok(TaskLoss {
        total,
        objectness,
        classification,
        box_regression,
    })
}

struct BoxInfo {
    col: f64,
    row: f64,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoxInfo {
    fn new(cell: usize, grid: usize, b: &crate::detector::BBox) -> Self {
        Self {
            col: (cell % grid) as f64,
            row: (cell / grid) as f64,
            x1: b.x_min as f64,
            y1: b.y_min as f64,
            x2: b.x_max as f64,
            y2: b.y_max as f64,
        }
    }
}

/// Row-wise log-softmax of `logits · (1/T)`, with the same arithmetic as the
/// graph's `scale` followed by `log_softmax`.
fn tempered_log_softmax<T: Real>(logits: &[T], classes: usize, temperature: T) -> Vec<T> {
    let factor = T::one() / temperature;
    let mut out: Vec<T> = logits.iter().map(|&v| v * factor).collect();
    for row in out.chunks_mut(classes) {
        let max = row
            .iter()
            .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    out
}

/// `T² · mean over rows of KL` between tempered class distributions. The
/// teacher side is a constant. Log-probabilities come from a log-softmax, so
/// saturated distributions never produce `log 0`.
pub fn logit_kd_loss<T: Real>(
    g: &mut Graph<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    temperature: f64,
    direction: KlDirection,
) -> Result<Var> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let s = g.shape(student_logits).to_vec();
    if s != teacher_logits.shape() {
        return Err(Error::dim(
            "logit_kd_loss",
            format!("student {s:?} vs teacher {:?}", teacher_logits.shape()),
        ));
    }
    let classes = *s.last().expect("non-empty shape");
    let rows = teacher_logits.numel() / classes;
    let t = T::lit(temperature);
    let lt = tempered_log_softmax(teacher_logits.data(), classes, t);

    let zs = g.scale(student_logits, T::one() / t)?;
    let ls = g.log_softmax(zs)?;
    let term = match direction {
        KlDirection::StudentFirst => {
            let lt = g.constant(&s, lt)?;
            let ps = g.exp(ls)?;
            let diff = g.sub(ls, lt)?;
            g.mul(ps, diff)?
        }
        KlDirection::TeacherFirst => {
            let pt: Vec<T> = lt.iter().map(|v| v.exp()).collect();
            let pt = g.constant(&s, pt)?;
            let lt = g.constant(&s, lt)?;
            let diff = g.sub(lt, ls)?;
            g.mul(pt, diff)?
        }
    };
    let total = g.sum(term)?;
    g.scale(total, T::lit(temperature * temperature / rows as f64))
}

/// Evaluates [`logit_kd_loss`] on plain tensors.
pub fn logit_kd_value<T: Real>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    temperature: f64,
    direction: KlDirection,
) -> Result<T> {
    let mut g = Graph::inference();
    let s = g.input(student_logits.clone())?;
    let l = logit_kd_loss(&mut g, s, teacher_logits, temperature, direction)?;
    Ok(g.scalar(l))
}

/// Learned 1×1 map from student to teacher feature channels.
#[derive(Debug, Clone)]
pub struct FeatureProjection<T: Real = f32> {
    params: ParamStore<T>,
}

impl<T: Real> FeatureProjection<T> {
    /// `None` when channel counts already agree (identity projection).
    pub fn for_channels(student_channels: usize, teacher_channels: usize, seed: u64) -> Option<Self> {
        if student_channels == teacher_channels {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / student_channels as f64).sqrt();
        let w: Vec<T> = (0..teacher_channels * student_channels)
            .map(|_| T::lit(rng.random_range(-bound..bound) as f32 as f64))
            .collect();
        let mut params = ParamStore::new();
        params.push(
            "kd.proj.weight",
            Tensor::new(vec![teacher_channels, student_channels, 1, 1], w).expect("shape matches"),
        );
        params.push("kd.proj.bias", Tensor::zeros(&[teacher_channels]));
        Some(Self { params })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn apply(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let w = g.param(&self.params, 0)?;
        let b = g.param(&self.params, 1)?;
        g.conv2d(features, w, Some(b), 1, 0)
    }
}

/// Mean squared difference between (projected) student features and the
/// teacher features.
pub fn feature_kd_loss<T: Real>(
    g: &mut Graph<T>,
    student_features: Var,
    teacher_features: &Tensor<T>,
    projection: Option<&FeatureProjection<T>>,
) -> Result<Var> {
    let ss = g.shape(student_features).to_vec();
    let ts = teacher_features.shape();
    if ss.len() != 4 || ts.len() != 4 || ss[0] != ts[0] || ss[2] != ts[2] || ss[3] != ts[3] {
        return Err(Error::dim(
            "feature_kd_loss",
            format!("student {ss:?} vs teacher {ts:?}"),
        ));
    }
    let projected = match projection {
        Some(p) => p.apply(g, student_features)?,
        None => student_features,
    };
    if g.shape(projected) != ts {
        return Err(Error::dim(
            "feature_kd_loss",
            format!("projected student {:?} vs teacher {ts:?}", g.shape(projected)),
        ));
    }
    let t = g.input(teacher_features.clone())?;
    let d = g.sub(projected, t)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{encode_targets, Annotation, BBox, RawPrediction};
    use rand::Rng;

    fn t2(rows: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, data.len() / rows], data.to_vec()).unwrap()
    }

    #[test]
    fn combined_weights() {
        let b = combined_loss(1.0, 2.0, 3.0, &KdConfig::form_a());
        assert!((b.total - 1.16).abs() < 1e-12);
        let direct = KdConfig {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            ..KdConfig::form_a()
        };
        assert_eq!(combined_loss(0.734, 5.0, 9.0, &direct).total, 0.734);
        assert!((combined_loss(1.0, 1.0, 1.0, &KdConfig::form_b()).total - 1.32).abs() < 1e-12);
    }

    #[test]
    fn form_b_differs_only_in_alpha() {
        let (a, b) = (KdConfig::form_a(), KdConfig::form_b());
        assert_eq!(b.alpha, 1.0);
        assert_eq!(KdConfig { alpha: a.alpha, ..b }, a);
        assert_eq!((a.alpha, a.beta, a.gamma, a.temperature), (0.5, 0.3, 0.02, 10.0));
    }

    #[test]
    fn config_validation() {
        assert!(KdConfig::form_a().validate().is_ok());
        assert!(KdConfig { alpha: 1.5, ..KdConfig::form_a() }.validate().is_err());
        assert!(KdConfig { temperature: 0.0, ..KdConfig::form_a() }.validate().is_err());
    }

    #[test]
    fn kl_zero_for_identical_logits() {
        let z = t2(3, &[1.0, -2.0, 0.5, 3.0, 3.0, 3.0, 10.0, -10.0, 0.0]);
        for dir in [KlDirection::StudentFirst, KlDirection::TeacherFirst] {
            for t in [0.5, 1.0, 10.0] {
                assert_eq!(logit_kd_value(&z, &z, t, dir).unwrap(), 0.0);
            }
        }
        let zf = z.cast::<f32>();
        assert_eq!(logit_kd_value(&zf, &zf, 10.0, KlDirection::StudentFirst).unwrap(), 0.0);
    }

    #[test]
    fn kl_two_class_closed_form() {
        // KL([σ(1), σ(-1)] ‖ [σ(-1), σ(1)]) = (2σ(1) − 1) · 2 = tanh(1/2) · 2 … evaluated directly:
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        let q = 1.0 - p;
        let expect = p * (p / q).ln() + q * (q / p).ln();
        assert!((expect - 0.462_117_157_260_009_7).abs() < 1e-15);
        let s = t2(1, &[1.0, 0.0]);
        let t = t2(1, &[0.0, 1.0]);
        let got = logit_kd_value(&s, &t, 1.0, KlDirection::StudentFirst).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_bad_temperature_and_shapes() {
        let s = t2(1, &[1.0, 0.0]);
        assert!(matches!(
            logit_kd_value(&s, &s, 0.0, KlDirection::StudentFirst),
            Err(Error::Parameter(_))
        ));
        let t = t2(1, &[1.0, 0.0, 2.0]);
        assert!(matches!(
            logit_kd_value(&s, &t, 1.0, KlDirection::StudentFirst),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn kl_non_negative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let rows = rng.random_range(1..5);
            let k = rng.random_range(2..8);
            let scale = [0.1, 1.0, 10.0, 100.0][rng.random_range(0..4)];
            let mut draw = || (0..rows * k).map(|_| rng.random_range(-scale..scale)).collect::<Vec<f64>>();
            let (a, b) = (draw(), draw());
            let (a, b) = (t2(rows, &a), t2(rows, &b));
            let t = [1.0, 2.0, 10.0][rng.random_range(0..3)];
            for dir in [KlDirection::StudentFirst, KlDirection::TeacherFirst] {
                assert!(logit_kd_value(&a, &b, t, dir).unwrap() >= -1e-9);
            }
        }
    }

    #[test]
    fn kl_vanishes_with_temperature() {
        let s = t2(1, &[2.0, -1.0, 0.5, 4.0]);
        let t = t2(1, &[-3.0, 1.0, 2.0, 0.0]);
        let kl: Vec<f64> = [1.0, 2.0, 5.0, 10.0, 50.0, 100.0]
            .iter()
            .map(|&temp| logit_kd_value(&s, &t, temp, KlDirection::StudentFirst).unwrap() / (temp * temp))
            .collect();
        for w in kl[1..].windows(2) {
            assert!(w[1] < w[0], "{kl:?}");
        }
        assert!(kl[5] < 1e-3);
    }

    #[test]
    fn feature_loss_values() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::new(vec![1, 1, 2, 2], vec![0.5, 1.5, -2.0, 3.0]).unwrap();
        let s = g.input(t.clone()).unwrap();
        let l = feature_kd_loss(&mut g, s, &t, None).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let shifted = Tensor::new(vec![1, 1, 2, 2], vec![1.5, 2.5, -1.0, 4.0]).unwrap();
        let s = g.input(shifted).unwrap();
        let l = feature_kd_loss(&mut g, s, &t, None).unwrap();
        assert_eq!(g.scalar(l), 1.0);
    }

    #[test]
    fn feature_loss_random_pair_matches_scalar_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (a, b) = (draw(2 * 3 * 4 * 4), draw(2 * 3 * 4 * 4));
        let expect = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        let mut g = Graph::<f64>::new();
        let s = g.input(Tensor::new(vec![2, 3, 4, 4], a).unwrap()).unwrap();
        let l = feature_kd_loss(&mut g, s, &Tensor::new(vec![2, 3, 4, 4], b).unwrap(), None).unwrap();
        assert!((g.scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn feature_loss_spatial_mismatch() {
        let mut g = Graph::<f32>::new();
        let s = g.input(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        assert!(matches!(
            feature_kd_loss(&mut g, s, &Tensor::zeros(&[1, 2, 2, 2]), None),
            Err(Error::Dimension { .. })
        ));
        let proj = FeatureProjection::<f32>::for_channels(2, 5, 0).unwrap();
        let l = feature_kd_loss(&mut g, s, &Tensor::zeros(&[1, 5, 4, 4]), Some(&proj));
        assert!(l.is_ok());
        assert!(FeatureProjection::<f32>::for_channels(4, 4, 0).is_none());
    }

    fn raw_tensor(preds: &[RawPrediction], cfg: &DetectorConfig) -> Tensor<f64> {
        let (k, c, cells) = (cfg.num_classes, cfg.outputs_per_cell(), cfg.grid * cfg.grid);
        let mut d = vec![0.0; preds.len() * c * cells];
        for (n, p) in preds.iter().enumerate() {
            for cell in 0..cells {
                for j in 0..k {
                    d[(n * c + j) * cells + cell] = p.class_logits[cell * k + j] as f64;
                }
                d[(n * c + k) * cells + cell] = p.objectness[cell] as f64;
                for j in 0..4 {
                    d[(n * c + k + 1 + j) * cells + cell] = p.box_deltas[cell * 4 + j] as f64;
                }
            }
        }
        Tensor::new(vec![preds.len(), c, cfg.grid, cfg.grid], d).unwrap()
    }

    fn eval_task(raw: Tensor<f64>, targets: &[Targets], cfg: &DetectorConfig) -> [f64; 4] {
        let mut g = Graph::new();
        let r = g.input(raw).unwrap();
        let l = task_loss(&mut g, r, targets, cfg).unwrap();
        [g.scalar(l.total), g.scalar(l.objectness), g.scalar(l.classification), g.scalar(l.box_regression)]
    }

    #[test]
    fn saturated_perfect_prediction_has_tiny_loss() {
        let cfg = DetectorConfig::student(5);
        let gt = [
            Annotation { bbox: BBox::new(3.0, 4.0, 20.0, 15.0), class_id: 0 },
            Annotation { bbox: BBox::new(40.0, 30.0, 47.0, 50.0), class_id: 3 },
        ];
        let t = encode_targets(&gt, &cfg).unwrap();
        let pred = t.ideal_prediction(5, 20.0);
        let [total, ..] = eval_task(raw_tensor(&[pred], &cfg), &[t], &cfg);
        assert!(total <= 1e-3, "{total}");
    }

    #[test]
    fn empty_scene_with_negative_objectness() {
        let cfg = DetectorConfig::student(5);
        let t = encode_targets(&[], &cfg).unwrap();
        let pred = t.ideal_prediction(5, 20.0);
        let [total, _, cls, bx] = eval_task(raw_tensor(&[pred], &cfg), &[t], &cfg);
        assert!(total <= 1e-3);
        assert_eq!((cls, bx), (0.0, 0.0));
    }

    /// Independent scalar recomputation of the three task sub-terms.
    fn task_oracle(preds: &[RawPrediction], targets: &[Targets], cfg: &DetectorConfig) -> [f64; 3] {
        let k = cfg.num_classes;
        let cs = cfg.cell_size() as f64;
        let (mut bce, mut n) = (0.0, 0.0);
        let (mut ce, mut giou_loss, mut p) = (0.0, 0.0, 0.0);
        for (pred, t) in preds.iter().zip(targets) {
            for cell in 0..cfg.grid * cfg.grid {
                let x = pred.objectness[cell] as f64;
                let y = t.objectness[cell] as f64;
                let prob = 1.0 / (1.0 + (-x).exp());
                bce += -(y * prob.ln() + (1.0 - y) * (1.0 - prob).ln());
                n += 1.0;
                let Some(c) = t.class_ids[cell] else { continue };
                p += 1.0;
                let logits: Vec<f64> = pred.class_logits[cell * k..(cell + 1) * k].iter().map(|&v| v as f64).collect();
                let z: f64 = logits.iter().map(|v| v.exp()).sum();
                ce += -(logits[c].exp() / z).ln();
                let d: Vec<f64> = pred.box_deltas[cell * 4..cell * 4 + 4].iter().map(|&v| v as f64).collect();
                let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
                let cx = ((cell % cfg.grid) as f64 + sig(d[0])) * cs;
                let cy = ((cell / cfg.grid) as f64 + sig(d[1])) * cs;
                let (w, h) = (d[2].exp() * cs, d[3].exp() * cs);
                let (a1, b1, a2, b2) = (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
                let gb = t.boxes[cell].unwrap();
                let (g1, h1, g2, h2) = (gb.x_min as f64, gb.y_min as f64, gb.x_max as f64, gb.y_max as f64);
                let inter = (a2.min(g2) - a1.max(g1)).max(0.0) * (b2.min(h2) - b1.max(h1)).max(0.0);
                let union = w * h + (g2 - g1) * (h2 - h1) - inter;
                let enc = (a2.max(g2) - a1.min(g1)) * (b2.max(h2) - b1.min(h1));
                giou_loss += 1.0 - (inter / union - (enc - union) / enc);
            }
        }
        [bce / n, if p > 0.0 { ce / p } else { 0.0 }, if p > 0.0 { giou_loss / p } else { 0.0 }]
    }

    #[test]
    fn random_prediction_matches_scalar_oracle() {
        let cfg = DetectorConfig::student(5);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let mut preds = Vec::new();
            let mut targets = Vec::new();
            for _ in 0..2 {
                let gt: Vec<Annotation> = (0..rng.random_range(0..6))
                    .map(|_| {
                        let (x, y) = (rng.random_range(0.0..50.0f32), rng.random_range(0.0..50.0f32));
                        let (w, h) = (rng.random_range(2.0..14.0f32), rng.random_range(2.0..14.0f32));
                        Annotation { bbox: BBox::new(x, y, x + w, y + h), class_id: rng.random_range(0..5) }
                    })
                    .collect();
                targets.push(encode_targets(&gt, &cfg).unwrap());
                let mut r = |n: usize| (0..n).map(|_| rng.random_range(-3.0..3.0f32)).collect::<Vec<f32>>();
                preds.push(RawPrediction {
                    grid: 8,
                    num_classes: 5,
                    class_logits: r(64 * 5),
                    objectness: r(64),
                    box_deltas: r(64 * 4),
                });
            }
            let [total, obj, cls, bx] = eval_task(raw_tensor(&preds, &cfg), &targets, &cfg);
            let [o_obj, o_cls, o_box] = task_oracle(&preds, &targets, &cfg);
            assert!((obj - o_obj).abs() < 1e-10, "{obj} vs {o_obj}");
            assert!((cls - o_cls).abs() < 1e-10, "{cls} vs {o_cls}");
            assert!((bx - o_box).abs() < 1e-10, "{bx} vs {o_box}");
            assert!((total - (o_obj + o_cls + o_box)).abs() < 1e-10);
            assert!(obj >= 0.0 && cls >= 0.0 && bx >= 0.0);
        }
    }
}
