//! Symmetric INT8 post-training quantization.
//!
//! Activation ranges are collected at named sites (`input`, `<layer>.pre`,
//! `<layer>.act`) over a calibration split, turned into per-tensor scales,
//! and used by an integer-only forward pass with 32-bit accumulation.

mod model;

pub use model::{report_csv, silu_lut, silu_requant, ConvertOptions, LayerReport, QuantLayer, QuantModel, QCHECKPOINT_VERSION};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Largest representable magnitude; −128 is never produced.
pub const QMAX: i32 = 127;
/// Bins of the `|x|` histogram used by the percentile policy.
pub const HISTOGRAM_BINS: usize = 2048;
/// Site name of the network input.
pub const INPUT_SITE: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePolicy {
    /// `max(|min|, |max|) / 127`.
    Minmax,
    /// 99.9th percentile of `|x|`, divided by 127.
    Percentile999,
}

/// `|x|` histogram over `[0, range]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub range: f64,
    pub bins: Vec<u64>,
}

impl Histogram {
    fn new(range: f64) -> Self {
        Self {
            range,
            bins: vec![0; HISTOGRAM_BINS],
        }
    }

    fn add(&mut self, v: f64) {
        let a = v.abs();
        let idx = if self.range > 0.0 {
            ((a / self.range * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
        } else {
            0
        };
        self.bins[idx] += 1;
    }

    /// Upper edge of the first bin whose cumulative count reaches `q`.
    pub fn quantile(&self, q: f64) -> f64 {
        let total: u64 = self.bins.iter().sum();
        let need = ((q * total as f64).ceil() as u64).max(1);
        let mut acc = 0u64;
        for (i, &c) in self.bins.iter().enumerate() {
            acc += c;
            if acc >= need {
                return (i + 1) as f64 * self.range / HISTOGRAM_BINS as f64;
            }
        }
        self.range
    }
}

/// Range statistics of one activation site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub min: f64,
    pub max: f64,
    pub count: u64,
    pub histogram: Option<Histogram>,
}

impl Default for CalibrationStats {
    fn default() -> Self {
        Self::new()
    }
}

impl CalibrationStats {
    pub fn new() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            count: 0,
            histogram: None,
        }
    }

    pub fn observe(&mut self, values: &[f32]) {
        for &v in values {
            let v = v as f64;
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.count += values.len() as u64;
    }

    /// Associative merge of two partial records.
    pub fn merge(&mut self, other: &CalibrationStats) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
        match (&mut self.histogram, &other.histogram) {
            (Some(a), Some(b)) if a.range == b.range => {
                for (x, y) in a.bins.iter_mut().zip(&b.bins) {
                    *x += y;
                }
            }
            (None, Some(b)) => self.histogram = Some(b.clone()),
            _ => {}
        }
    }

    pub fn abs_max(&self) -> f64 {
        self.min.abs().max(self.max.abs())
    }
}

/// Stats keyed by site name.
pub type CalibrationTable = BTreeMap<String, CalibrationStats>;

/// Symmetric quantization parameters; zero point is always 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
}

impl QuantParams {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Parameter(format!("scale must be positive, got {scale}")));
        }
        Ok(Self { scale })
    }

    pub fn zero_point(&self) -> i32 {
        0
    }

    pub fn bits(&self) -> u32 {
        8
    }

    /// Largest representable magnitude, `127 · scale`.
    pub fn range(&self) -> f64 {
        QMAX as f64 * self.scale
    }
}

pub fn derive_scale(stats: &CalibrationStats, policy: ScalePolicy) -> Result<QuantParams> {
    if stats.count == 0 {
        return Err(Error::Calibration("no samples observed".into()));
    }
    if !stats.min.is_finite() || !stats.max.is_finite() || stats.min > stats.max {
        return Err(Error::Calibration(format!(
            "non-finite or inverted range [{}, {}]",
            stats.min, stats.max
        )));
    }
    let bound = match policy {
        ScalePolicy::Minmax => stats.abs_max(),
        ScalePolicy::Percentile999 => match &stats.histogram {
            Some(h) => h.quantile(0.999),
            None => {
                return Err(Error::Calibration(
                    "percentile policy needs a histogram".into(),
                ))
            }
        },
    };
    if bound == 0.0 {
        return QuantParams::new(1.0);
    }
    QuantParams::new(bound / QMAX as f64)
}

/// `clamp(round_half_even(x / scale), −127, 127)`.
pub fn quantize_value(x: f64, scale: f64) -> i8 {
    (x / scale).round_ties_even().clamp(-(QMAX as f64), QMAX as f64) as i8
}

pub fn quantize_tensor(x: &Tensor<f32>, qp: QuantParams) -> Vec<i8> {
    x.data().iter().map(|&v| quantize_value(v as f64, qp.scale)).collect()
}

pub fn dequantize(q: &[i8], qp: QuantParams) -> Vec<f64> {
    q.iter().map(|&v| v as f64 * qp.scale).collect()
}

/// Runs the FP32 model image by image over `batches` and records ranges at
/// every site. The percentile policy takes a second pass to fill histograms
/// over the first pass's `|x|` range.
pub fn calibrate(
    model: &DetectorModel<f32>,
    batches: &[Tensor<f32>],
    policy: ScalePolicy,
) -> Result<CalibrationTable> {
    if batches.iter().all(|b| b.shape().first().copied().unwrap_or(0) == 0) {
        return Err(Error::Calibration("calibration set is empty".into()));
    }
    let mut table = CalibrationTable::new();
    for_each_site(model, batches, |site, values| {
        table.entry(site.to_string()).or_default().observe(values);
    })?;
    if policy == ScalePolicy::Percentile999 {
        let mut hists: BTreeMap<String, Histogram> = table
            .iter()
            .map(|(k, s)| (k.clone(), Histogram::new(s.abs_max())))
            .collect();
        for_each_site(model, batches, |site, values| {
            let h = hists.get_mut(site).expect("site seen in first pass");
            for &v in values {
                h.add(v as f64);
            }
        })?;
        for (k, h) in hists {
            table.get_mut(&k).expect("same sites").histogram = Some(h);
        }
    }
    Ok(table)
}

fn for_each_site(
    model: &DetectorModel<f32>,
    batches: &[Tensor<f32>],
    mut visit: impl FnMut(&str, &[f32]),
) -> Result<()> {
    for batch in batches {
        let s = batch.shape();
        if s.len() != 4 {
            return Err(Error::dim("calibrate", format!("batch shape {s:?}")));
        }
        let per = s[1] * s[2] * s[3];
        for img in batch.data().chunks(per) {
            let image = Tensor::new(vec![1, s[1], s[2], s[3]], img.to_vec())?;
            visit(INPUT_SITE, image.data());
            let mut g = Graph::inference();
            let x = g.input(image)?;
            let out = model.forward(&mut g, x)?;
            for (name, var) in &out.sites {
                visit(name, g.value(*var).data());
            }
        }
    }
    Ok(())
}

/// Site names the conversion needs for `model`, in evaluation order.
pub fn required_sites(model: &DetectorModel<f32>) -> Vec<String> {
    let mut v = vec![INPUT_SITE.to_string()];
    for l in model.layers() {
        v.push(format!("{}.pre", l.name));
        if l.activation {
            v.push(format!("{}.act", l.name));
        }
    }
    v
}
