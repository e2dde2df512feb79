//! Anchor-free single-scale grid detector.
//!
//! The backbone is a stack of `conv3x3 → SiLU (→ 2×2 max pool)` blocks; the
//! first `log2(input_size / grid)` blocks pool so the final feature map lands
//! on the prediction grid. The head is `conv3x3 → SiLU → conv1x1` producing,
//! per cell, `num_classes` class logits, one objectness logit and four box
//! deltas `(tx, ty, tw, th)`.

mod boxes;
mod decode;

pub use boxes::{Annotation, BBox, Detection};
pub use decode::{decode, encode_targets, nms, RawPrediction, Targets};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Graph, ParamStore, Real, Tensor, Var};

/// Number of box regression channels per cell.
pub const BOX_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    /// Prediction cells per side.
    pub grid: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Channels of the stem before width scaling.
    pub base_channels: usize,
    pub width_mult: f64,
    /// Backbone blocks after the stem.
    pub depth: usize,
    pub head_channels: usize,
}

impl DetectorConfig {
    pub fn teacher(num_classes: usize) -> Self {
        Self {
            input_size: 64,
            grid: 8,
            num_classes,
            in_channels: 3,
            base_channels: 8,
            width_mult: 2.0,
            depth: 4,
            head_channels: 64,
        }
    }

    pub fn student(num_classes: usize) -> Self {
        Self {
            input_size: 64,
            grid: 8,
            num_classes,
            in_channels: 3,
            base_channels: 8,
            width_mult: 1.0,
            depth: 2,
            head_channels: 96,
        }
    }

    pub fn cell_size(&self) -> f32 {
        (self.input_size / self.grid) as f32
    }

    pub fn outputs_per_cell(&self) -> usize {
        self.num_classes + 1 + BOX_CHANNELS
    }

    fn downsamples(&self) -> Result<usize> {
        if self.grid == 0 || self.input_size == 0 || self.input_size % self.grid != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of grid {}",
                self.input_size, self.grid
            )));
        }
        let ratio = self.input_size / self.grid;
        if !ratio.is_power_of_two() {
            return Err(Error::Config(format!(
                "input/grid ratio {ratio} must be a power of two"
            )));
        }
        Ok(ratio.trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let downs = self.downsamples()?;
        if self.num_classes == 0 || self.in_channels == 0 || self.base_channels == 0 || self.head_channels == 0 {
            return Err(Error::Config("class, channel and head counts must be positive".into()));
        }
        if !(self.width_mult > 0.0) || !self.width_mult.is_finite() {
            return Err(Error::Config(format!("width_mult must be positive, got {}", self.width_mult)));
        }
        if self.depth + 1 < downs {
            return Err(Error::Config(format!(
                "depth {} too shallow: {} pooling blocks needed to reach grid {}",
                self.depth, downs, self.grid
            )));
        }
        if self.stage_channels(0) == 0 {
            return Err(Error::Config("width_mult rounds channels to zero".into()));
        }
        Ok(())
    }

    fn stage_channels(&self, block: usize) -> usize {
        let downs = self.downsamples().unwrap_or(1).max(1);
        let doublings = block.min(downs - 1) as i32;
        (self.base_channels as f64 * self.width_mult * 2f64.powi(doublings)).round() as usize
    }

    /// Ordered conv layers of the network.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let downs = self.downsamples()?;
        let mut layers = Vec::new();
        let mut in_ch = self.in_channels;
        for block in 0..=self.depth {
            let out_ch = self.stage_channels(block);
            layers.push(LayerSpec {
                name: if block == 0 { "stem".into() } else { format!("block{block}") },
                in_ch,
                out_ch,
                kernel: 3,
                pad: 1,
                activation: true,
                pool: block < downs,
            });
            in_ch = out_ch;
        }
        layers.push(LayerSpec {
            name: "head.conv".into(),
            in_ch,
            out_ch: self.head_channels,
            kernel: 3,
            pad: 1,
            activation: true,
            pool: false,
        });
        layers.push(LayerSpec {
            name: "head.out".into(),
            in_ch: self.head_channels,
            out_ch: self.outputs_per_cell(),
            kernel: 1,
            pad: 0,
            activation: false,
            pool: false,
        });
        Ok(layers)
    }

    /// Index of the last backbone layer, whose output is the feature map.
    pub fn feature_layer(&self) -> usize {
        self.depth
    }

    /// Channels of the backbone feature map.
    pub fn feature_channels(&self) -> usize {
        self.stage_channels(self.depth)
    }

    /// Exact trainable parameter count, from the layer table.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layers()?.iter().map(LayerSpec::param_count).sum())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        crate::sha256(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// One convolution plus its optional activation and pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub pad: usize,
    pub activation: bool,
    pub pool: bool,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Head output `[B, K + 5, G, G]`.
    pub raw: Var,
    /// Final backbone stage `[B, C, G, G]`.
    pub features: Var,
    /// Named activation sites in evaluation order (`<layer>.pre` before the
    /// activation, `<layer>.act` after it).
    pub sites: Vec<(String, Var)>,
}

#[derive(Debug, Clone)]
pub struct DetectorModel<T: Real = f32> {
    config: DetectorConfig,
    layers: Vec<LayerSpec>,
    params: ParamStore<T>,
}

/// Kaiming-uniform fan-in initialization, zero biases.
pub fn build_model<T: Real>(config: &DetectorConfig, seed: u64) -> Result<DetectorModel<T>> {
    let layers = config.layers()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for layer in &layers {
        let fan_in = layer.in_ch * layer.kernel * layer.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = layer.out_ch * fan_in;
        let w: Vec<T> = (0..n)
            .map(|_| T::lit(rng.random_range(-bound..bound) as f32 as f64))
            .collect();
        params.push(
            format!("{}.weight", layer.name),
            Tensor::new(layer.weight_shape().to_vec(), w)?,
        );
        params.push(format!("{}.bias", layer.name), Tensor::zeros(&[layer.out_ch]));
    }
    Ok(DetectorModel {
        config: config.clone(),
        layers,
        params,
    })
}

impl<T: Real> DetectorModel<T> {
    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn layer_weights(&self, layer: usize) -> (&Tensor<T>, &Tensor<T>) {
        (self.params.get(2 * layer), self.params.get(2 * layer + 1))
    }

    pub fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<ForwardOutput> {
        let s = g.shape(images);
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.input_size || s[3] != c.input_size {
            return Err(Error::dim(
                "detector.forward",
                format!(
                    "images {s:?}, expected [B, {}, {}, {}]",
                    c.in_channels, c.input_size, c.input_size
                ),
            ));
        }
        let mut x = images;
        let mut features = None;
        let mut sites = Vec::with_capacity(2 * self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(&self.params, 2 * i)?;
            let b = g.param(&self.params, 2 * i + 1)?;
            x = g.conv2d(x, w, Some(b), 1, layer.pad)?;
            sites.push((format!("{}.pre", layer.name), x));
            if layer.activation {
                x = g.silu(x)?;
                sites.push((format!("{}.act", layer.name), x));
            }
            if layer.pool {
                x = g.max_pool2(x)?;
            }
            if i == self.config.feature_layer() {
                features = Some(x);
            }
        }
        Ok(ForwardOutput {
            raw: x,
            features: features.expect("feature layer is part of the backbone"),
            sites,
        })
    }

    /// Forward pass without gradient bookkeeping; returns `(raw, features)`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::inference();
        let x = g.input(images.clone())?;
        let out = self.forward(&mut g, x)?;
        Ok((g.value(out.raw).clone(), g.value(out.features).clone()))
    }

    pub fn cast<U: Real>(&self) -> DetectorModel<U> {
        DetectorModel {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.cast(),
        }
    }
}

impl DetectorModel<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_digest: self.config.digest(),
            params: self.params.duplicate(),
        }
    }

    pub fn from_checkpoint(config: &DetectorConfig, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.config_digest != config.digest() {
            return Err(Error::Format("checkpoint was written for a different model config".into()));
        }
        let template = build_model::<f32>(config, 0)?;
        if template.params.names() != ckpt.params.names()
            || template
                .params
                .tensors()
                .iter()
                .zip(ckpt.params.tensors())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Format("checkpoint parameter layout does not match config".into()));
        }
        Ok(Self {
            config: config.clone(),
            layers: template.layers,
            params: ckpt.params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_student_ratio_near_3_9() {
        let t = DetectorConfig::teacher(5).param_count().unwrap() as f64;
        let s = DetectorConfig::student(5).param_count().unwrap() as f64;
        let ratio = t / s;
        assert!((ratio - 3.9).abs() <= 0.39, "ratio {ratio}");
    }

    #[test]
    fn reported_count_matches_built_model() {
        for cfg in [DetectorConfig::teacher(5), DetectorConfig::student(5)] {
            let m = build_model::<f32>(&cfg, 3).unwrap();
            assert_eq!(m.param_count(), cfg.param_count().unwrap());
        }
    }

    #[test]
    fn analytic_student_count() {
        // stem 3->8, block1 8->16, block2 16->32, head 32->96 (3x3), out 96->10 (1x1)
        let expect = (3 * 9 * 8 + 8) + (8 * 9 * 16 + 16) + (16 * 9 * 32 + 32) + (32 * 9 * 96 + 96) + (96 * 10 + 10);
        assert_eq!(DetectorConfig::student(5).param_count().unwrap(), expect);
    }

    #[test]
    fn doubling_width_grows_superlinearly() {
        let base = DetectorConfig::student(5);
        let mut wide = base.clone();
        wide.width_mult = 2.0;
        let (a, b) = (base.param_count().unwrap(), wide.param_count().unwrap());
        assert!(b > 2 * a, "{a} -> {b}");
        // backbone-only check: conv weights scale ~4x
        let bb = |c: &DetectorConfig| -> usize {
            c.layers().unwrap()[..=c.depth].iter().map(LayerSpec::param_count).sum()
        };
        assert!(bb(&wide) as f64 > 3.0 * bb(&base) as f64);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = DetectorConfig::student(5);
        let a = build_model::<f32>(&cfg, 11).unwrap();
        let b = build_model::<f32>(&cfg, 11).unwrap();
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
        let c = build_model::<f32>(&cfg, 12).unwrap();
        assert_ne!(a.to_checkpoint().to_bytes(), c.to_checkpoint().to_bytes());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = DetectorConfig::student(5);
        c.grid = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = DetectorConfig::student(5);
        c.depth = 1;
        assert!(c.validate().is_err());
        let mut c = DetectorConfig::student(5);
        c.num_classes = 0;
        assert!(c.validate().is_err());
        assert!(build_model::<f32>(&c, 0).is_err());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = DetectorConfig::student(5);
        let m = build_model::<f32>(&cfg, 1).unwrap();
        let mut img = Tensor::zeros(&[2, 3, 64, 64]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 31) % 97) as f32 / 97.0;
        }
        let (raw, feat) = m.predict(&img).unwrap();
        assert_eq!(raw.shape(), &[2, 10, 8, 8]);
        assert_eq!(feat.shape(), &[2, 32, 8, 8]);
        let (raw2, _) = m.predict(&img).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&raw), bits(&raw2));
    }

    #[test]
    fn zero_image_gives_finite_output() {
        let m = build_model::<f32>(&DetectorConfig::teacher(5), 5).unwrap();
        let (raw, feat) = m.predict(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert!(raw.is_finite() && feat.is_finite());
        assert_eq!(feat.shape(), &[1, 32 * 2, 8, 8]);
    }

    #[test]
    fn wrong_input_size_is_dimension_error() {
        let m = build_model::<f32>(&DetectorConfig::student(5), 1).unwrap();
        assert!(matches!(
            m.predict(&Tensor::zeros(&[1, 3, 32, 32])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_restores_model() {
        let cfg = DetectorConfig::student(5);
        let m = build_model::<f32>(&cfg, 9).unwrap();
        let back = DetectorModel::from_checkpoint(&cfg, Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes(), m.to_checkpoint().to_bytes());
        let other = DetectorConfig::teacher(5);
        assert!(DetectorModel::from_checkpoint(&other, m.to_checkpoint()).is_err());
    }
}
