use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionLevel {
    Fp32,
    Int8,
}

impl PrecisionLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            PrecisionLevel::Fp32 => "fp32",
            PrecisionLevel::Int8 => "int8",
        }
    }
}

impl std::fmt::Display for PrecisionLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Evaluation of one model at one precision level on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub model: String,
    pub precision_level: PrecisionLevel,
    pub map50: f64,
    pub map50_95: f64,
    pub precision: f64,
    pub recall: f64,
    /// `1 − precision`.
    pub far: f64,
    /// Class name → AP50; `null` when the class has no ground truth.
    pub per_class_ap50: BTreeMap<String, Option<f64>>,
    pub per_group_ap50: BTreeMap<String, Option<f64>>,
    pub vru_avg_ap50: Option<f64>,
    pub fps: f64,
    /// Throughput comes from the CPU simulation, not an accelerator.
    pub fps_simulated: bool,
    pub confidence_threshold: f64,
    pub iou_nms: f64,
    pub confidence_definition: String,
    pub num_images: usize,
}

impl EvalReport {
    /// FAR identity, rate ranges and mAP ordering.
    pub fn validate(&self) -> Result<()> {
        if self.far != 1.0 - self.precision {
            return Err(Error::Evaluation(format!(
                "{}: far {} is not 1 − precision {}",
                self.model, self.far, self.precision
            )));
        }
        let mut rates = vec![
            ("map50", self.map50),
            ("map50_95", self.map50_95),
            ("precision", self.precision),
            ("recall", self.recall),
            ("far", self.far),
        ];
        rates.extend(self.per_class_ap50.iter().filter_map(|(k, v)| v.map(|v| (k.as_str(), v))));
        rates.extend(self.per_group_ap50.iter().filter_map(|(k, v)| v.map(|v| (k.as_str(), v))));
        for (name, v) in rates {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Evaluation(format!("{}: {name} = {v} outside [0, 1]", self.model)));
            }
        }
        if self.map50_95 > self.map50 + 1e-12 {
            return Err(Error::Evaluation(format!(
                "{}: mAP50-95 {} exceeds mAP50 {}",
                self.model, self.map50_95, self.map50
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }

    pub fn csv_header() -> &'static str {
        "model,precision_level,map50,map50_95,precision,recall,far,vru_avg_ap50,fps"
    }

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            self.model,
            self.precision_level,
            self.map50,
            self.map50_95,
            self.precision,
            self.recall,
            self.far,
            self.vru_avg_ap50.map_or(String::new(), |v| v.to_string()),
            self.fps
        )
        .unwrap();
        s
    }
}

/// Change of mAP50 from FP32 to INT8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub delta_map: f64,
    /// `None` when the FP32 mAP50 is zero.
    pub delta_pct: Option<f64>,
}

/// `100 · (new − base) / base`; `None` when `base` is zero.
pub fn pct_change(new: f64, base: f64) -> Option<f64> {
    (base != 0.0).then(|| 100.0 * (new - base) / base)
}

pub fn degradation(fp32: &EvalReport, int8: &EvalReport) -> Result<Degradation> {
    if fp32.model != int8.model || fp32.num_images != int8.num_images {
        return Err(Error::Evaluation(format!(
            "degradation compares {} ({} images) against {} ({} images)",
            fp32.model, fp32.num_images, int8.model, int8.num_images
        )));
    }
    Ok(degradation_of(fp32.map50, int8.map50))
}

pub fn degradation_of(fp32_map50: f64, int8_map50: f64) -> Degradation {
    let delta_map = int8_map50 - fp32_map50;
    Degradation {
        delta_map,
        delta_pct: pct_change(int8_map50, fp32_map50),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn report(model: &str, level: PrecisionLevel, map50: f64, precision: f64) -> EvalReport {
        EvalReport {
            model: model.into(),
            precision_level: level,
            map50,
            map50_95: map50 / 2.0,
            precision,
            recall: 0.5,
            far: 1.0 - precision,
            per_class_ap50: BTreeMap::from([("vehicle".into(), Some(0.7)), ("rare".into(), None)]),
            per_group_ap50: BTreeMap::new(),
            vru_avg_ap50: None,
            fps: 100.0,
            fps_simulated: true,
            confidence_threshold: 0.25,
            iou_nms: 0.7,
            confidence_definition: "sigmoid(objectness) * max softmax(class)".into(),
            num_images: 10,
        }
    }

    #[test]
    fn degradation_cells() {
        let d = degradation_of(0.595, 0.456);
        assert!((d.delta_map + 0.139).abs() < 1e-12);
        assert_eq!(format!("{:.1}", d.delta_pct.unwrap()), "-23.4");
        let d = degradation_of(0.532, 0.502);
        assert!((d.delta_map + 0.030).abs() < 1e-12);
        assert_eq!(format!("{:.1}", d.delta_pct.unwrap()), "-5.6");
        let d = degradation_of(0.5, 0.5);
        assert_eq!((d.delta_map, d.delta_pct), (0.0, Some(0.0)));
        assert_eq!(degradation_of(0.0, 0.1).delta_pct, None);
    }

    #[test]
    fn degradation_requires_same_model() {
        let a = report("teacher", PrecisionLevel::Fp32, 0.5, 0.6);
        let b = report("student", PrecisionLevel::Int8, 0.4, 0.6);
        assert!(degradation(&a, &b).is_err());
        assert!(degradation(&a, &report("teacher", PrecisionLevel::Int8, 0.4, 0.6)).is_ok());
    }

    #[test]
    fn validation() {
        let r = report("m", PrecisionLevel::Fp32, 0.5, 0.748);
        r.validate().unwrap();
        assert!((r.far - 0.252).abs() < 1e-12);
        let mut bad = r.clone();
        bad.far = 0.25;
        assert!(bad.validate().is_err());
        let mut bad = r.clone();
        bad.map50_95 = 0.6;
        assert!(bad.validate().is_err());
        let mut bad = r.clone();
        bad.recall = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn json_round_trip_keeps_far_identity() {
        let r = report("m", PrecisionLevel::Int8, 0.5, 0.1 + 0.2);
        let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_json().unwrap().contains("\"rare\": null"));
    }
}
