//! Integer-only detector inference.
//!
//! Per conv layer: `acc = Σ q_w·q_x + q_b` in `i32` (bias at scale
//! `s_w·s_x`), requantized to the layer's pre-activation scale, mapped through
//! a 256-entry SiLU table to the activation scale, then max-pooled directly on
//! the INT8 codes. The last layer's codes are dequantized to real outputs.
//!
//! Quantized checkpoint layout (little-endian):
//!
//! ```text
//! magic "KDLABQ8\0", version u32, config hash [u8; 32]
//! per_channel u8, quantize_head u8, policy u8, input_scale f64, layers u32
//! per layer:
//!   name_len u32, name
//!   weights u32 + i8 × n, weight_scales u32 + f64 × n, bias u32 + i32 × n
//!   pre_scale f64, has_act u8, act_scale f64
//!   has_float u8 [, weights u32 + f32 × n, bias u32 + f32 × n]
//! ```

use std::fmt::Write as _;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{derive_scale, quantize_value, CalibrationTable, ScalePolicy, INPUT_SITE, QMAX};
use crate::detector::{DetectorConfig, DetectorModel, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const QCHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"KDLABQ8\0";

/// Upper bound on the products summed into one `i32` accumulator.
const MAX_ACC_TERMS: usize = (1usize << 31) / (QMAX as usize * QMAX as usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertOptions {
    pub policy: ScalePolicy,
    /// One weight scale per output channel instead of per tensor.
    pub per_channel: bool,
    /// Run the final 1×1 head conv in INT8; otherwise it runs in FP32 on the
    /// dequantized head features.
    pub quantize_head: bool,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            policy: ScalePolicy::Minmax,
            per_channel: false,
            quantize_head: true,
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Dequantize at `pre_scale`, apply SiLU, requantize at `act_scale`.
pub fn silu_requant(q: i8, pre_scale: f64, act_scale: f64) -> i8 {
    quantize_value(silu(q as f64 * pre_scale), act_scale)
}

/// Table indexed by `q + 128`.
pub fn silu_lut(pre_scale: f64, act_scale: f64) -> Vec<i8> {
    (0..256)
        .map(|i| silu_requant((i as i32 - 128) as i8, pre_scale, act_scale))
        .collect()
}

fn tensor_scale(values: &[f32]) -> f64 {
    let m = values.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    if m == 0.0 {
        1.0
    } else {
        m / QMAX as f64
    }
}

/// One quantized convolution with optional SiLU and 2×2 max pool.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub spec: LayerSpec,
    /// `[out, in, k, k]` codes.
    pub weights: Vec<i8>,
    /// One entry, or one per output channel.
    pub weight_scales: Vec<f64>,
    /// Bias codes at scale `weight_scale · input_scale`.
    pub bias: Vec<i32>,
    pub input_scale: f64,
    pub pre_scale: f64,
    pub act_scale: Option<f64>,
    lut: Option<Vec<i8>>,
    float: Option<(Vec<f32>, Vec<f32>)>,
}

impl QuantLayer {
    pub fn new(
        spec: LayerSpec,
        weights: &[f32],
        bias: &[f32],
        input_scale: f64,
        pre_scale: f64,
        act_scale: Option<f64>,
        per_channel: bool,
    ) -> Result<Self> {
        let fan_in = spec.in_ch * spec.kernel * spec.kernel;
        if fan_in > MAX_ACC_TERMS {
            return Err(Error::Contract(format!(
                "layer {}: {fan_in} accumulation terms exceed the i32 bound {MAX_ACC_TERMS}",
                spec.name
            )));
        }
        if weights.len() != spec.out_ch * fan_in || bias.len() != spec.out_ch {
            return Err(Error::dim(
                "quant.layer",
                format!("{}: {} weights, {} biases", spec.name, weights.len(), bias.len()),
            ));
        }
        if spec.activation != act_scale.is_some() {
            return Err(Error::Contract(format!(
                "layer {}: activation scale presence must match the activation flag",
                spec.name
            )));
        }
        let weight_scales: Vec<f64> = if per_channel {
            weights.chunks(fan_in).map(tensor_scale).collect()
        } else {
            vec![tensor_scale(weights)]
        };
        let ws = |o: usize| weight_scales[if per_channel { o } else { 0 }];
        let q: Vec<i8> = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| quantize_value(w as f64, ws(i / fan_in)))
            .collect();
        let bias_q = bias
            .iter()
            .enumerate()
            .map(|(o, &b)| {
                (b as f64 / (ws(o) * input_scale))
                    .round_ties_even()
                    .clamp(i32::MIN as f64, i32::MAX as f64) as i32
            })
            .collect();
        Ok(Self {
            lut: act_scale.map(|a| silu_lut(pre_scale, a)),
            spec,
            weights: q,
            weight_scales,
            bias: bias_q,
            input_scale,
            pre_scale,
            act_scale,
            float: None,
        })
    }

    pub fn weight_scale(&self, out_channel: usize) -> f64 {
        if self.weight_scales.len() == 1 {
            self.weight_scales[0]
        } else {
            self.weight_scales[out_channel]
        }
    }

    /// Scale of this layer's INT8 output codes.
    pub fn output_scale(&self) -> f64 {
        self.act_scale.unwrap_or(self.pre_scale)
    }

    pub fn dequantized_weights(&self) -> Vec<f64> {
        let fan_in = self.spec.in_ch * self.spec.kernel * self.spec.kernel;
        self.weights
            .iter()
            .enumerate()
            .map(|(i, &q)| q as f64 * self.weight_scale(i / fan_in))
            .collect()
    }

    pub fn dequantized_bias(&self) -> Vec<f64> {
        self.bias
            .iter()
            .enumerate()
            .map(|(o, &b)| b as f64 * self.weight_scale(o) * self.input_scale)
            .collect()
    }

    pub fn is_float(&self) -> bool {
        self.float.is_some()
    }

    /// `i32` accumulators `[out, h, w]` including the bias.
    pub fn accumulate(&self, x: &[i8], h: usize, w: usize) -> Result<Vec<i32>> {
        let s = &self.spec;
        if x.len() != s.in_ch * h * w {
            return Err(Error::dim(
                "quant.accumulate",
                format!("{}: input of {} codes for [{}, {h}, {w}]", s.name, x.len(), s.in_ch),
            ));
        }
        // products of codes and their sums are integers far below 2^53, so
        // the f64 product is exact
        let cols: Vec<f64> = im2col(x, s.in_ch, h, w, s.kernel, s.pad);
        let wf: Vec<f64> = self.weights.iter().map(|&q| q as f64).collect();
        let hw = h * w;
        let fan_in = s.in_ch * s.kernel * s.kernel;
        let mut prod = vec![0f64; s.out_ch * hw];
        f64::gemm(s.out_ch, fan_in, hw, &wf, false, &cols, false, &mut prod, false);
        let mut acc = Vec::with_capacity(prod.len());
        for (i, &p) in prod.iter().enumerate() {
            let v = p as i64 + self.bias[i / hw] as i64;
            acc.push(i32::try_from(v).map_err(|_| {
                Error::Contract(format!("layer {}: accumulator {v} overflows i32", s.name))
            })?);
        }
        Ok(acc)
    }

    /// INT8 codes after requantization, activation table and pooling.
    pub fn forward(&self, x: &[i8], h: usize, w: usize) -> Result<(Vec<i8>, usize, usize)> {
        let acc = self.accumulate(x, h, w)?;
        let hw = h * w;
        let mult: Vec<f64> = (0..self.spec.out_ch)
            .map(|o| self.weight_scale(o) * self.input_scale / self.pre_scale)
            .collect();
        let mut out: Vec<i8> = acc
            .iter()
            .enumerate()
            .map(|(i, &a)| quantize_value(a as f64 * mult[i / hw], 1.0))
            .collect();
        if let Some(lut) = &self.lut {
            for v in out.iter_mut() {
                *v = lut[(*v as i32 + 128) as usize];
            }
        }
        if self.spec.pool {
            Ok(max_pool2_i8(&out, self.spec.out_ch, h, w))
        } else {
            Ok((out, h, w))
        }
    }

    /// FP32 evaluation on dequantized input, used when the head stays in
    /// floating point.
    fn forward_float(&self, x: &[i8], h: usize, w: usize) -> Vec<f32> {
        let (wf, bf) = self.float.as_ref().expect("float layer");
        let s = &self.spec;
        let xs: Vec<f32> = x.iter().map(|&q| (q as f64 * self.input_scale) as f32).collect();
        let cols: Vec<f32> = im2col(&xs, s.in_ch, h, w, s.kernel, s.pad);
        let hw = h * w;
        let fan_in = s.in_ch * s.kernel * s.kernel;
        let mut out = vec![0f32; s.out_ch * hw];
        for o in 0..s.out_ch {
            for p in 0..hw {
                let mut a = bf[o];
                for kk in 0..fan_in {
                    a += wf[o * fan_in + kk] * cols[kk * hw + p];
                }
                out[o * hw + p] = a;
            }
        }
        out
    }
}

fn im2col<X: Copy + Default + Into<C>, C: Copy + Default>(
    x: &[X],
    ch: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> Vec<C> {
    let hw = h * w;
    let mut cols = vec![C::default(); ch * k * k * hw];
    for c in 0..ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row * hw + oy * w + ox] = x[c * hw + iy as usize * w + ix as usize].into();
                    }
                }
            }
        }
    }
    cols
}

fn max_pool2_i8(x: &[i8], ch: usize, h: usize, w: usize) -> (Vec<i8>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0i8; ch * oh * ow];
    for c in 0..ch {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| x[c * h * w + (2 * y + dy) * w + 2 * xx + dx];
                out[(c * oh + y) * ow + xx] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
            }
        }
    }
    (out, oh, ow)
}

/// Per-layer line of the conversion report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    /// Largest weight scale of the layer (the only one when per-tensor).
    pub weight_scale: f64,
    pub activation_scale: f64,
    pub max_weight_error: f64,
}

/// Converted detector: INT8 weights, activation scales and the source config.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub config: DetectorConfig,
    pub options: ConvertOptions,
    pub input_scale: f64,
    pub layers: Vec<QuantLayer>,
}

impl QuantModel {
    /// Assigns scales from `stats` and quantizes every conv layer.
    pub fn convert(model: &DetectorModel<f32>, stats: &CalibrationTable, options: ConvertOptions) -> Result<Self> {
        let scale = |site: String| -> Result<f64> {
            let s = stats.get(&site).ok_or(Error::MissingSite(site))?;
            Ok(derive_scale(s, options.policy)?.scale)
        };
        let input_scale = scale(INPUT_SITE.to_string())?;
        let mut x_scale = input_scale;
        let mut layers = Vec::with_capacity(model.layers().len());
        let last = model.layers().len() - 1;
        for (i, spec) in model.layers().iter().enumerate() {
            let pre = scale(format!("{}.pre", spec.name))?;
            let act = if spec.activation {
                Some(scale(format!("{}.act", spec.name))?)
            } else {
                None
            };
            let (w, b) = model.layer_weights(i);
            let mut layer = QuantLayer::new(spec.clone(), w.data(), b.data(), x_scale, pre, act, options.per_channel)?;
            if i == last && !options.quantize_head {
                layer.float = Some((w.data().to_vec(), b.data().to_vec()));
            }
            x_scale = layer.output_scale();
            layers.push(layer);
        }
        Ok(Self {
            config: model.config().clone(),
            options,
            input_scale,
            layers,
        })
    }

    pub fn conversion_report(&self, model: &DetectorModel<f32>) -> Vec<LayerReport> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (w, _) = model.layer_weights(i);
                let max_weight_error = l
                    .dequantized_weights()
                    .iter()
                    .zip(w.data())
                    .fold(0.0f64, |m, (&q, &f)| m.max((q - f as f64).abs()));
                LayerReport {
                    layer: l.spec.name.clone(),
                    weight_scale: l.weight_scales.iter().cloned().fold(0.0, f64::max),
                    activation_scale: l.output_scale(),
                    max_weight_error,
                }
            })
            .collect()
    }

    /// Head output `[B, K + 5, G, G]` from integer inference.
    pub fn forward(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.input_size || s[3] != c.input_size {
            return Err(Error::dim(
                "quant.forward",
                format!("images {s:?}, expected [B, {}, {}, {}]", c.in_channels, c.input_size, c.input_size),
            ));
        }
        let per = s[1] * s[2] * s[3];
        let mut out = Vec::new();
        for img in images.data().chunks(per) {
            out.extend(self.forward_image(img)?);
        }
        Tensor::new(vec![s[0], c.outputs_per_cell(), c.grid, c.grid], out)
    }

    fn forward_image(&self, img: &[f32]) -> Result<Vec<f32>> {
        let mut x: Vec<i8> = img.iter().map(|&v| quantize_value(v as f64, self.input_scale)).collect();
        let (mut h, mut w) = (self.config.input_size, self.config.input_size);
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            (x, h, w) = layer.forward(&x, h, w)?;
        }
        let head = &self.layers[last];
        if head.is_float() {
            return Ok(head.forward_float(&x, h, w));
        }
        let (q, _, _) = head.forward(&x, h, w)?;
        let s = head.output_scale();
        Ok(q.iter().map(|&v| (v as f64 * s) as f32).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(QCHECKPOINT_VERSION).unwrap();
        out.extend_from_slice(&self.config.digest());
        out.write_u8(self.options.per_channel as u8).unwrap();
        out.write_u8(self.options.quantize_head as u8).unwrap();
        out.write_u8(match self.options.policy {
            ScalePolicy::Minmax => 0,
            ScalePolicy::Percentile999 => 1,
        })
        .unwrap();
        out.write_f64::<LittleEndian>(self.input_scale).unwrap();
        out.write_u32::<LittleEndian>(self.layers.len() as u32).unwrap();
        for l in &self.layers {
            out.write_u32::<LittleEndian>(l.spec.name.len() as u32).unwrap();
            out.write_all(l.spec.name.as_bytes()).unwrap();
            out.write_u32::<LittleEndian>(l.weights.len() as u32).unwrap();
            for &q in &l.weights {
                out.write_i8(q).unwrap();
            }
            out.write_u32::<LittleEndian>(l.weight_scales.len() as u32).unwrap();
            for &s in &l.weight_scales {
                out.write_f64::<LittleEndian>(s).unwrap();
            }
            out.write_u32::<LittleEndian>(l.bias.len() as u32).unwrap();
            for &b in &l.bias {
                out.write_i32::<LittleEndian>(b).unwrap();
            }
            out.write_f64::<LittleEndian>(l.pre_scale).unwrap();
            out.write_u8(l.act_scale.is_some() as u8).unwrap();
            out.write_f64::<LittleEndian>(l.act_scale.unwrap_or(0.0)).unwrap();
            match &l.float {
                Some((w, b)) => {
                    out.write_u8(1).unwrap();
                    for v in [w, b] {
                        out.write_u32::<LittleEndian>(v.len() as u32).unwrap();
                        for &f in v {
                            out.write_f32::<LittleEndian>(f).unwrap();
                        }
                    }
                }
                None => out.write_u8(0).unwrap(),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], config: &DetectorConfig) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("quantized checkpoint: {what}"));
        let mut r = Cursor::new(bytes);
        let trunc = |_| bad("truncated");
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != QCHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest).map_err(trunc)?;
        if digest != config.digest() {
            return Err(bad("written for a different model config"));
        }
        let per_channel = r.read_u8().map_err(trunc)? != 0;
        let quantize_head = r.read_u8().map_err(trunc)? != 0;
        let policy = match r.read_u8().map_err(trunc)? {
            0 => ScalePolicy::Minmax,
            1 => ScalePolicy::Percentile999,
            _ => return Err(bad("unknown policy")),
        };
        let input_scale = r.read_f64::<LittleEndian>().map_err(trunc)?;
        let specs = config.layers()?;
        let n = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        if n != specs.len() {
            return Err(bad("layer count does not match config"));
        }
        let mut layers = Vec::with_capacity(n);
        let mut x_scale = input_scale;
        let limit = bytes.len();
        let read_len = |r: &mut Cursor<&[u8]>| -> Result<usize> {
            let n = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            if n > limit {
                return Err(bad("length exceeds file size"));
            }
            Ok(n)
        };
        for spec in specs {
            let name_len = read_len(&mut r)?;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(trunc)?;
            if name != spec.name.as_bytes() {
                return Err(bad("layer names do not match config"));
            }
            let nw = read_len(&mut r)?;
            if nw != spec.out_ch * spec.in_ch * spec.kernel * spec.kernel {
                return Err(bad("weight count does not match config"));
            }
            let mut weights = vec![0i8; nw];
            r.read_i8_into(&mut weights).map_err(trunc)?;
            let ns = read_len(&mut r)?;
            if ns != 1 && ns != spec.out_ch {
                return Err(bad("bad weight scale count"));
            }
            let mut weight_scales = vec![0f64; ns];
            r.read_f64_into::<LittleEndian>(&mut weight_scales).map_err(trunc)?;
            let nb = read_len(&mut r)?;
            if nb != spec.out_ch {
                return Err(bad("bias count does not match config"));
            }
            let mut bias = vec![0i32; nb];
            r.read_i32_into::<LittleEndian>(&mut bias).map_err(trunc)?;
            let pre_scale = r.read_f64::<LittleEndian>().map_err(trunc)?;
            let has_act = r.read_u8().map_err(trunc)? != 0;
            let act = r.read_f64::<LittleEndian>().map_err(trunc)?;
            let act_scale = has_act.then_some(act);
            if has_act != spec.activation {
                return Err(bad("activation flag does not match config"));
            }
            let float = if r.read_u8().map_err(trunc)? != 0 {
                let mut parts = Vec::new();
                for _ in 0..2 {
                    let m = read_len(&mut r)?;
                    let mut v = vec![0f32; m];
                    r.read_f32_into::<LittleEndian>(&mut v).map_err(trunc)?;
                    parts.push(v);
                }
                let b = parts.pop().expect("two parts");
                let w = parts.pop().expect("two parts");
                if w.len() != nw || b.len() != nb {
                    return Err(bad("float head size does not match config"));
                }
                Some((w, b))
            } else {
                None
            };
            let scales_ok = weight_scales.iter().chain([&pre_scale]).all(|s| *s > 0.0 && s.is_finite())
                && act_scale.is_none_or(|a| a > 0.0 && a.is_finite());
            if !scales_ok {
                return Err(bad("non-positive scale"));
            }
            let layer = QuantLayer {
                lut: act_scale.map(|a| silu_lut(pre_scale, a)),
                spec,
                weights,
                weight_scales,
                bias,
                input_scale: x_scale,
                pre_scale,
                act_scale,
                float,
            };
            x_scale = layer.output_scale();
            layers.push(layer);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config: config.clone(),
            options: ConvertOptions {
                policy,
                per_channel,
                quantize_head,
            },
            input_scale,
            layers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, config: &DetectorConfig) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, config)
    }
}

/// CSV with header `layer,weight_scale,activation_scale,max_abs_dw`.
pub fn report_csv(report: &[LayerReport]) -> String {
    let mut s = String::from("layer,weight_scale,activation_scale,max_abs_dw\n");
    for r in report {
        writeln!(
            s,
            "{},{:e},{:e},{:e}",
            r.layer, r.weight_scale, r.activation_scale, r.max_weight_error
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(in_ch: usize, out_ch: usize, kernel: usize, activation: bool, pool: bool) -> LayerSpec {
        LayerSpec {
            name: "l".into(),
            in_ch,
            out_ch,
            kernel,
            pad: kernel / 2,
            activation,
            pool,
        }
    }

    #[test]
    fn lut_equals_direct_path() {
        for (pre, act) in [(0.05, 0.03), (0.1, 0.1), (1.0 / 127.0, 0.004)] {
            let lut = silu_lut(pre, act);
            for q in -127i32..=127 {
                assert_eq!(lut[(q + 128) as usize], silu_requant(q as i8, pre, act));
            }
        }
    }

    #[test]
    fn accumulate_matches_naive_sum() {
        let sp = spec(2, 3, 1, false, false);
        let w = [0.25f32, -0.5, 1.0, 0.75, -1.0, 0.0];
        let b = [0.125f32, -0.03125, 0.0];
        let layer = QuantLayer::new(sp, &w, &b, 1.0 / 8.0, 0.01, None, false).unwrap();
        let x: Vec<i8> = vec![1, -2, 3, 4, 0, -5, 7, 6];
        let got = layer.accumulate(&x, 2, 2).unwrap();
        let wq = &layer.weights;
        for o in 0..3 {
            for p in 0..4 {
                let expect = layer.bias[o] + wq[2 * o] as i32 * x[p] as i32 + wq[2 * o + 1] as i32 * x[4 + p] as i32;
                assert_eq!(got[o * 4 + p], expect);
            }
        }
    }

    #[test]
    fn integer_path_matches_float_on_exact_values() {
        // Scales are powers of two; weights, inputs and biases sit on the grid.
        let sp = spec(2, 2, 1, false, false);
        let sw = 1.0 / 64.0;
        let w = [127.0 * sw, -32.0 * sw, 16.0 * sw, 8.0 * sw].map(|v| v as f32);
        let sx = 1.0 / 16.0;
        let b = [3.0 * sw * sx, -5.0 * sw * sx].map(|v| v as f32);
        let layer = QuantLayer::new(sp, &w, &b, sx, sw * sx, None, false).unwrap();
        assert_eq!(layer.weight_scales, vec![127.0 * sw / 127.0]);
        let xq: Vec<i8> = vec![0, 1, 0, -1, 1, 2, -1, 0];
        let (out, _, _) = layer.forward(&xq, 2, 2).unwrap();
        for o in 0..2 {
            for p in 0..4 {
                let xf = |c: usize| xq[c * 4 + p] as f32 * sx as f32;
                let f = b[o] + w[2 * o] * xf(0) + w[2 * o + 1] * xf(1);
                let d = out[o * 4 + p] as f64 * layer.pre_scale;
                assert_eq!(d, f as f64, "o={o} p={p}");
            }
        }
    }

    #[test]
    fn accumulator_bound_is_enforced() {
        let sp = spec(MAX_ACC_TERMS + 1, 1, 1, false, false);
        let w = vec![0.0f32; MAX_ACC_TERMS + 1];
        assert!(matches!(
            QuantLayer::new(sp, &w, &[0.0], 1.0, 1.0, None, false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pool_on_codes() {
        let (out, h, w) = max_pool2_i8(&[1, -2, 3, 4, 5, 6, -7, 8, 0, 0, 0, 0, -1, -1, -1, -1], 1, 4, 4);
        assert_eq!((h, w), (2, 2));
        assert_eq!(out, vec![6, 8, 0, 0]);
    }

    #[test]
    fn weight_rounding_bound() {
        let sp = spec(3, 4, 3, true, true);
        let w: Vec<f32> = (0..108).map(|i| ((i * 37 % 101) as f32 - 50.0) / 37.0).collect();
        for per_channel in [false, true] {
            let l = QuantLayer::new(sp.clone(), &w, &[0.0; 4], 0.1, 0.1, Some(0.1), per_channel).unwrap();
            for (i, (q, f)) in l.dequantized_weights().iter().zip(&w).enumerate() {
                assert!((q - *f as f64).abs() <= l.weight_scale(i / 27) / 2.0 + 1e-12);
            }
            assert!(l.weights.iter().all(|&q| (-127..=127).contains(&q)));
        }
    }
}
