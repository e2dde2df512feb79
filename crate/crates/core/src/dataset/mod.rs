//! Seeded synthetic long-tail detection scenes.
//!
//! Each image is rendered from its own ChaCha stream `(seed, image id)`, so
//! output does not depend on generation order. Objects are filled shapes
//! whose classes differ in outline, aspect and tint but overlap enough under
//! noise to leave soft inter-class similarity for a teacher to express.
//!
//! Dataset file layout (little-endian):
//!
//! ```text
//! magic "KDLABDS\0", version u32, spec hash [u8; 32], seed u64
//! spec_len u32, spec JSON
//! image_size u32, channels u32, count u32
//! per image: id u32, pixels f32 × channels·size², annotations u32,
//!            per annotation: class u32, x_min y_min x_max y_max f32
//! ```

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{Annotation, BBox};
use crate::error::{Error, Result};
use crate::metrics::GroupMapping;
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"KDLABDS\0";
const CHANNELS: usize = 3;
/// Minimum distance of an object center from the image border, in pixels.
const EDGE_MARGIN: f32 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rectangle,
    /// Superellipse `|u|⁴ + |v|⁴ ≤ 1`.
    RoundedRect,
    Ellipse,
    /// Ellipse with a hollow core.
    Ring,
    Diamond,
}

impl Shape {
    /// Membership of normalized coordinates `(u, v) ∈ [−1, 1]²`.
    fn contains(&self, u: f32, v: f32) -> bool {
        match self {
            Shape::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::RoundedRect => u.powi(4) + v.powi(4) <= 1.0,
            Shape::Ellipse => u * u + v * v <= 1.0,
            Shape::Ring => {
                let r = u * u + v * v;
                (0.4..=1.0).contains(&r)
            }
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

/// Appearance of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStyle {
    pub name: String,
    pub shape: Shape,
    /// Box width range in pixels.
    pub width: [f32; 2],
    pub height: [f32; 2],
    /// Mean RGB tint.
    pub color: [f32; 3],
    /// Uniform per-channel jitter around `color`.
    pub color_jitter: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Per-class relative instance frequency.
    pub class_weights: Vec<f64>,
    pub objects_per_image: [usize; 2],
    pub palette: Vec<ClassStyle>,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Cell size used to keep object centers in distinct cells.
    pub cell: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::long_tail()
    }
}

impl SceneSpec {
    /// Five classes with instance ratios 714:91:7:5:3.
    pub fn long_tail() -> Self {
        let style = |name: &str, shape, width, height, color| ClassStyle {
            name: name.into(),
            shape,
            width,
            height,
            color,
            color_jitter: 0.15,
        };
        Self {
            image_size: 64,
            class_weights: vec![714.0, 91.0, 7.0, 5.0, 3.0],
            objects_per_image: [1, 5],
            palette: vec![
                style("vehicle", Shape::Rectangle, [11.0, 20.0], [7.0, 12.0], [0.25, 0.45, 0.85]),
                style("pedestrian", Shape::Ellipse, [4.0, 8.0], [10.0, 18.0], [0.85, 0.55, 0.35]),
                style("bicycle", Shape::Ring, [8.0, 14.0], [7.0, 11.0], [0.45, 0.8, 0.4]),
                style("rider", Shape::RoundedRect, [5.0, 9.0], [10.0, 17.0], [0.75, 0.6, 0.4]),
                style("motorcycle", Shape::RoundedRect, [10.0, 16.0], [7.0, 11.0], [0.4, 0.5, 0.75]),
            ],
            noise: 0.08,
            cell: 8,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.palette.iter().map(|s| s.name.clone()).collect()
    }

    /// Pedestrian, cyclist (rider + bicycle) and motorcyclist (rider +
    /// motorcycle) analogues; rider belongs to two groups.
    pub fn vru_groups() -> GroupMapping {
        GroupMapping {
            groups: vec![
                ("pedestrian".into(), vec![1]),
                ("cyclist".into(), vec![3, 2]),
                ("motorcyclist".into(), vec![3, 4]),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.class_weights.is_empty() || self.class_weights.len() != self.palette.len() {
            return bad(format!(
                "{} class weights for {} palette entries",
                self.class_weights.len(),
                self.palette.len()
            ));
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return bad("class weights must be positive".into());
        }
        if self.cell == 0 || self.image_size % self.cell != 0 {
            return bad(format!("cell {} must divide image size {}", self.cell, self.image_size));
        }
        let cells = (self.image_size / self.cell).pow(2);
        let [lo, hi] = self.objects_per_image;
        if lo > hi || hi > cells {
            return bad(format!("objects per image [{lo}, {hi}] infeasible for {cells} cells"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise must be non-negative".into());
        }
        let limit = self.image_size as f32 - 2.0 * EDGE_MARGIN;
        for s in &self.palette {
            for [a, b] in [s.width, s.height] {
                if !(a > 0.0 && a <= b) {
                    return bad(format!("class {}: size range [{a}, {b}] invalid", s.name));
                }
                if b > limit {
                    return bad(format!("class {}: objects up to {b}px exceed the {}px image", s.name, self.image_size));
                }
            }
        }
        Ok(())
    }

    /// True when some class has at most 1% of the largest weight.
    pub fn has_minority_class(&self) -> bool {
        let max = self.class_weights.iter().cloned().fold(0.0, f64::max);
        self.class_weights.iter().any(|&w| w <= 0.01 * max)
    }

    pub fn digest(&self) -> [u8; 32] {
        crate::sha256(&serde_json::to_vec(self).expect("spec serializes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: u32,
    /// `[3, size, size]`, values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub seed: u64,
    pub images: Vec<LabeledImage>,
}

/// Renders `count` scenes; image `i` depends only on `(spec, seed, i)`.
pub fn generate(spec: &SceneSpec, count: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("image count must be at least 1".into()));
    }
    let images = (0..count as u32).map(|id| render(spec, seed, id)).collect();
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        images,
    })
}

fn render(spec: &SceneSpec, seed: u64, id: u32) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    let size = spec.image_size;
    let classes = WeightedIndex::new(&spec.class_weights).expect("weights validated");
    let noise = Normal::new(0.0, spec.noise).expect("noise validated");

    let base: f32 = rng.random_range(0.25..0.6);
    let tilt: [f32; 2] = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
    let mut pixels = vec![0f32; CHANNELS * size * size];
    for y in 0..size {
        for x in 0..size {
            let g = base + tilt[0] * (x as f32 / size as f32 - 0.5) + tilt[1] * (y as f32 / size as f32 - 0.5);
            for c in 0..CHANNELS {
                pixels[(c * size + y) * size + x] = g;
            }
        }
    }

    let per_side = size / spec.cell;
    let mut cells: Vec<usize> = (0..per_side * per_side).collect();
    cells.shuffle(&mut rng);
    let n = rng.random_range(spec.objects_per_image[0]..=spec.objects_per_image[1]);
    let mut annotations = Vec::with_capacity(n);
    for &cell in &cells[..n] {
        let class_id = classes.sample(&mut rng);
        let style = &spec.palette[class_id];
        let (col, row) = ((cell % per_side) as f32, (cell / per_side) as f32);
        let cs = spec.cell as f32;
        let lim = size as f32 - EDGE_MARGIN;
        let cx = rng.random_range((col * cs + 0.5).max(EDGE_MARGIN)..((col + 1.0) * cs - 0.5).min(lim));
        let cy = rng.random_range((row * cs + 0.5).max(EDGE_MARGIN)..((row + 1.0) * cs - 0.5).min(lim));
        let w = rng.random_range(style.width[0]..=style.width[1]).min(2.0 * cx.min(size as f32 - cx));
        let h = rng.random_range(style.height[0]..=style.height[1]).min(2.0 * cy.min(size as f32 - cy));
        let bbox = BBox::from_center(cx, cy, w, h);
        let color: Vec<f32> = style
            .color
            .iter()
            .map(|&c| (c + rng.random_range(-style.color_jitter..=style.color_jitter)).clamp(0.0, 1.0))
            .collect();
        let (x0, x1) = (bbox.x_min.floor().max(0.0) as usize, (bbox.x_max.ceil() as usize).min(size));
        let (y0, y1) = (bbox.y_min.floor().max(0.0) as usize, (bbox.y_max.ceil() as usize).min(size));
        for y in y0..y1 {
            for x in x0..x1 {
                let u = (x as f32 + 0.5 - cx) / (w / 2.0);
                let v = (y as f32 + 0.5 - cy) / (h / 2.0);
                if style.shape.contains(u, v) {
                    for c in 0..CHANNELS {
                        pixels[(c * size + y) * size + x] = color[c];
                    }
                }
            }
        }
        annotations.push(Annotation { bbox, class_id });
    }
    if spec.noise > 0.0 {
        for p in pixels.iter_mut() {
            *p += noise.sample(&mut rng) as f32;
        }
    }
    for p in pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    LabeledImage { id, pixels, annotations }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Instances per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.num_classes()];
        for img in &self.images {
            for a in &img.annotations {
                counts[a.class_id] += 1;
            }
        }
        counts
    }

    pub fn image(&self, id: u32) -> Result<&LabeledImage> {
        self.images
            .get(id as usize)
            .filter(|i| i.id == id)
            .ok_or_else(|| Error::Contract(format!("image id {id} not in dataset")))
    }

    /// `[B, 3, size, size]` batch of the given ids.
    pub fn batch(&self, ids: &[u32]) -> Result<Tensor<f32>> {
        let s = self.spec.image_size;
        let mut data = Vec::with_capacity(ids.len() * CHANNELS * s * s);
        for &id in ids {
            data.extend_from_slice(&self.image(id)?.pixels);
        }
        Tensor::new(vec![ids.len(), CHANNELS, s, s], data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(DATASET_VERSION).unwrap();
        out.extend_from_slice(&self.spec.digest());
        out.write_u64::<LittleEndian>(self.seed).unwrap();
        let spec = serde_json::to_vec(&self.spec).expect("spec serializes");
        out.write_u32::<LittleEndian>(spec.len() as u32).unwrap();
        out.write_all(&spec).unwrap();
        out.write_u32::<LittleEndian>(self.spec.image_size as u32).unwrap();
        out.write_u32::<LittleEndian>(CHANNELS as u32).unwrap();
        out.write_u32::<LittleEndian>(self.images.len() as u32).unwrap();
        for img in &self.images {
            out.write_u32::<LittleEndian>(img.id).unwrap();
            for &p in &img.pixels {
                out.write_f32::<LittleEndian>(p).unwrap();
            }
            out.write_u32::<LittleEndian>(img.annotations.len() as u32).unwrap();
            for a in &img.annotations {
                out.write_u32::<LittleEndian>(a.class_id as u32).unwrap();
                for v in [a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max] {
                    out.write_f32::<LittleEndian>(v).unwrap();
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("dataset: {what}"));
        let trunc = |_| bad("truncated");
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != DATASET_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest).map_err(trunc)?;
        let seed = r.read_u64::<LittleEndian>().map_err(trunc)?;
        let spec_len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        if spec_len > bytes.len() {
            return Err(bad("spec length exceeds file"));
        }
        let mut spec_bytes = vec![0u8; spec_len];
        r.read_exact(&mut spec_bytes).map_err(trunc)?;
        let spec: SceneSpec = serde_json::from_slice(&spec_bytes).map_err(|_| bad("unreadable spec"))?;
        if spec.digest() != digest {
            return Err(bad("spec hash mismatch"));
        }
        let size = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let channels = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        if size != spec.image_size || channels != CHANNELS {
            return Err(bad("image geometry does not match spec"));
        }
        let count = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let per = channels * size * size;
        if count.saturating_mul(per * 4) > bytes.len() {
            return Err(bad("image count exceeds file"));
        }
        let mut images = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.read_u32::<LittleEndian>().map_err(trunc)?;
            let mut pixels = vec![0f32; per];
            r.read_f32_into::<LittleEndian>(&mut pixels).map_err(trunc)?;
            let n = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            if n > bytes.len() {
                return Err(bad("annotation count exceeds file"));
            }
            let mut annotations = Vec::with_capacity(n);
            for _ in 0..n {
                let class_id = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
                let mut b = [0f32; 4];
                r.read_f32_into::<LittleEndian>(&mut b).map_err(trunc)?;
                if class_id >= spec.num_classes() {
                    return Err(bad("class id out of range"));
                }
                annotations.push(Annotation {
                    bbox: BBox::new(b[0], b[1], b[2], b[3]),
                    class_id,
                });
            }
            images.push(LabeledImage { id, pixels, annotations });
        }
        if r.position() as usize != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { spec, seed, images })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Image ids of each split plus the seeds that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub calibration: Vec<u32>,
    pub seed: u64,
    pub calibration_seed: u64,
}

impl SplitManifest {
    /// Fails when any id appears in two splits (or twice in one).
    pub fn validate(&self) -> Result<()> {
        let mut all: Vec<u32> = self.train.iter().chain(&self.val).chain(&self.calibration).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != n {
            return Err(Error::Contract("split manifest has overlapping ids".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

/// Fractional split sizes, rounded to the nearest image.
pub fn make_splits(num_images: usize, fractions: [f64; 3], seed: u64, calibration_seed: u64) -> Result<SplitManifest> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || fractions.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to at most 1")));
    }
    let [t, v, c] = fractions.map(|f| (f * num_images as f64).round() as usize);
    make_splits_counts(num_images, [t, v, c], seed, calibration_seed)
}

/// Train and val are the head of a seeded shuffle; calibration is drawn with
/// its own seed from the remainder only.
pub fn make_splits_counts(num_images: usize, counts: [usize; 3], seed: u64, calibration_seed: u64) -> Result<SplitManifest> {
    let [t, v, c] = counts;
    if t + v + c > num_images {
        return Err(Error::Config(format!("splits {t}+{v}+{c} exceed {num_images} images")));
    }
    let mut ids: Vec<u32> = (0..num_images as u32).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest = ids.split_off(t + v);
    let val = ids.split_off(t);
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(calibration_seed));
    rest.truncate(c);
    let m = SplitManifest {
        train: ids,
        val,
        calibration: rest,
        seed,
        calibration_seed,
    };
    m.validate()?;
    Ok(m)
}
