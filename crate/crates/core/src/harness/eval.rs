use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SceneSpec};
use crate::detector::{decode, DetectorConfig, DetectorModel, RawPrediction};
use crate::error::{Error, Result};
use crate::metrics::{
    group_map, group_map_pooled, map_range, match_recall, mean_defined, precision_recall_at, throughput, EvalReport,
    ImageEval, PrecisionLevel, RecallMatch,
};
use crate::quant::QuantModel;
use crate::tensor::Tensor;

use super::config::EvalConfig;

/// Text stored with every report describing the confidence score.
pub const CONFIDENCE_DEFINITION: &str = "sigmoid(objectness) * max softmax(class logits)";

/// IoU at which precision, recall and matched recall are computed.
pub const MATCH_IOU: f64 = 0.5;

/// Decodes every image in `ids` through `forward`, batch by batch, keeping
/// detections down to `conf_threshold`.
pub fn collect_with(
    config: &DetectorConfig,
    data: &Dataset,
    ids: &[u32],
    batch: usize,
    conf_threshold: f64,
    iou_nms: f64,
    mut forward: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Vec<ImageEval>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(batch.max(1)) {
        let raw = forward(&data.batch(chunk)?)?;
        let preds = RawPrediction::from_head_output(&raw, config)?;
        for (id, pred) in chunk.iter().zip(&preds) {
            out.push(ImageEval {
                detections: decode(pred, config, conf_threshold as f32, iou_nms),
                ground_truth: data.image(*id)?.annotations.clone(),
            });
        }
    }
    Ok(out)
}

pub fn collect_fp32(model: &DetectorModel<f32>, data: &Dataset, ids: &[u32], eval: &EvalConfig) -> Result<Vec<ImageEval>> {
    collect_with(model.config(), data, ids, eval.batch, eval.decode_threshold, eval.iou_nms, |x| {
        Ok(model.predict(x)?.0)
    })
}

pub fn collect_int8(model: &QuantModel, data: &Dataset, ids: &[u32], eval: &EvalConfig) -> Result<Vec<ImageEval>> {
    collect_with(&model.config, data, ids, eval.batch, eval.decode_threshold, eval.iou_nms, |x| {
        model.forward(x)
    })
}

/// mAP50 of an FP32 model; the early-stopping signal.
pub fn validation_map50(model: &DetectorModel<f32>, data: &Dataset, ids: &[u32], eval: &EvalConfig) -> Result<f64> {
    let images = collect_fp32(model, data, ids, eval)?;
    Ok(map_range(&images, model.config().num_classes)?.map50)
}

/// Single-image frames per second of `forward` on the first id of `ids`.
pub fn measure_fps(
    data: &Dataset,
    ids: &[u32],
    eval: &EvalConfig,
    mut forward: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<f64> {
    let id = *ids
        .first()
        .ok_or_else(|| Error::Evaluation("throughput needs at least one image".into()))?;
    let image = data.batch(&[id])?;
    throughput(
        || forward(&image).map(|_| ()),
        eval.throughput_warmup,
        eval.throughput_iterations,
    )
}

/// Assembles and validates one report.
pub fn build_report(
    model: &str,
    level: PrecisionLevel,
    images: &[ImageEval],
    scene: &SceneSpec,
    eval: &EvalConfig,
    fps: f64,
) -> Result<EvalReport> {
    let k = scene.num_classes();
    let summary = map_range(images, k)?;
    let pr = precision_recall_at(images, eval.conf_threshold, MATCH_IOU);
    let names = scene.class_names();
    let per_class_ap50: BTreeMap<String, Option<f64>> =
        names.iter().cloned().zip(summary.per_class_ap50.iter().copied()).collect();
    let groups = SceneSpec::vru_groups();
    let per_group_ap50 = if eval.pooled_groups {
        group_map_pooled(images, &groups, k)?
    } else {
        group_map(&summary.per_class_ap50, &groups)?
    };
    let vru_avg_ap50 = mean_defined(per_group_ap50.values());
    let report = EvalReport {
        model: model.to_string(),
        precision_level: level,
        map50: summary.map50,
        map50_95: summary.map50_95,
        precision: pr.precision,
        recall: pr.recall,
        far: pr.far,
        per_class_ap50,
        per_group_ap50,
        vru_avg_ap50,
        fps,
        fps_simulated: true,
        confidence_threshold: eval.conf_threshold,
        iou_nms: eval.iou_nms,
        confidence_definition: CONFIDENCE_DEFINITION.into(),
        num_images: images.len(),
    };
    report.validate()?;
    Ok(report)
}

/// Precision of a subject model at the threshold where its recall matches a
/// reference report's recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedRecall {
    pub precision_level: PrecisionLevel,
    pub reference: String,
    pub reference_precision: f64,
    pub reference_recall: f64,
    pub subject: String,
    pub result: RecallMatch,
    /// Subject precision minus reference precision; `None` when unreachable.
    pub precision_delta: Option<f64>,
}

pub fn matched_recall_comparison(
    reference: &EvalReport,
    subject: &str,
    subject_images: &[ImageEval],
    tolerance: f64,
) -> Result<MatchedRecall> {
    if !reference.recall.is_finite() {
        return Err(Error::Evaluation(format!("{} has no recall value", reference.model)));
    }
    let result = match_recall(
        subject_images,
        reference.recall,
        tolerance,
        MATCH_IOU,
        Some(reference.confidence_threshold),
    )?;
    Ok(MatchedRecall {
        precision_level: reference.precision_level,
        reference: reference.model.clone(),
        reference_precision: reference.precision,
        reference_recall: reference.recall,
        subject: subject.to_string(),
        precision_delta: result.precision.map(|p| p - reference.precision),
        result,
    })
}
