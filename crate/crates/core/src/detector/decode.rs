use super::{Annotation, BBox, Detection, DetectorConfig, BOX_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp on the in-cell center fraction so its logit stays finite.
const CENTER_EPS: f32 = 1e-6;

/// Per-image head output, cell-major (`cell = row · grid + col`).
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub grid: usize,
    pub num_classes: usize,
    /// `grid² × num_classes`
    pub class_logits: Vec<f32>,
    /// `grid²`
    pub objectness: Vec<f32>,
    /// `grid² × 4`: `(tx, ty, tw, th)`
    pub box_deltas: Vec<f32>,
}

impl RawPrediction {
    /// Splits a `[B, K + 5, G, G]` head tensor into per-image predictions.
    pub fn from_head_output(raw: &Tensor<f32>, config: &DetectorConfig) -> Result<Vec<RawPrediction>> {
        let (g, k) = (config.grid, config.num_classes);
        let c = config.outputs_per_cell();
        let s = raw.shape();
        if s.len() != 4 || s[1] != c || s[2] != g || s[3] != g {
            return Err(Error::dim(
                "RawPrediction",
                format!("head output {s:?}, expected [B, {c}, {g}, {g}]"),
            ));
        }
        let cells = g * g;
        let d = raw.data();
        Ok((0..s[0])
            .map(|n| {
                let at = |ch: usize, cell: usize| d[(n * c + ch) * cells + cell];
                let mut p = RawPrediction {
                    grid: g,
                    num_classes: k,
                    class_logits: Vec::with_capacity(cells * k),
                    objectness: Vec::with_capacity(cells),
                    box_deltas: Vec::with_capacity(cells * BOX_CHANNELS),
                };
                for cell in 0..cells {
                    p.class_logits.extend((0..k).map(|ch| at(ch, cell)));
                    p.objectness.push(at(k, cell));
                    p.box_deltas.extend((0..BOX_CHANNELS).map(|j| at(k + 1 + j, cell)));
                }
                p
            })
            .collect())
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Box for a cell from its deltas: center `(col + σ(tx), row + σ(ty))` cells,
/// size `(e^tw, e^th)` cells.
pub(crate) fn cell_box(deltas: &[f32], cell: usize, grid: usize, cell_size: f32) -> BBox {
    let (row, col) = ((cell / grid) as f32, (cell % grid) as f32);
    let cx = (col + sigmoid(deltas[0])) * cell_size;
    let cy = (row + sigmoid(deltas[1])) * cell_size;
    let w = deltas[2].exp() * cell_size;
    let h = deltas[3].exp() * cell_size;
    BBox::from_center(cx, cy, w, h)
}

/// Per-class greedy suppression. Output is sorted by confidence, highest
/// first; ties keep input order.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Confidence is `σ(objectness) · max softmax(class_logits)`.
pub fn decode(
    pred: &RawPrediction,
    config: &DetectorConfig,
    conf_threshold: f32,
    iou_nms: f64,
) -> Vec<Detection> {
    let k = pred.num_classes;
    let size = config.input_size as f32;
    let cell_size = config.cell_size();
    let mut dets = Vec::new();
    for cell in 0..pred.cells() {
        let obj = sigmoid(pred.objectness[cell]);
        let logits = &pred.class_logits[cell * k..(cell + 1) * k];
        let (best, max) = logits
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        let denom: f32 = logits.iter().map(|&v| (v - max).exp()).sum();
        let confidence = obj / denom;
        if !(confidence > 0.0) || confidence < conf_threshold {
            continue;
        }
        let b = cell_box(&pred.box_deltas[cell * BOX_CHANNELS..(cell + 1) * BOX_CHANNELS], cell, pred.grid, cell_size);
        let bbox = BBox::new(
            b.x_min.clamp(0.0, size),
            b.y_min.clamp(0.0, size),
            b.x_max.clamp(0.0, size),
            b.y_max.clamp(0.0, size),
        );
        if !bbox.is_valid() {
            continue;
        }
        dets.push(Detection {
            bbox,
            class_id: best,
            confidence: confidence.clamp(0.0, 1.0),
        });
    }
    nms(dets, iou_nms)
}

/// Training targets on the prediction grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub grid: usize,
    /// 1 at cells owning an object, else 0.
    pub objectness: Vec<f32>,
    pub class_ids: Vec<Option<usize>>,
    pub boxes: Vec<Option<BBox>>,
    /// Encoded `(tx, ty, tw, th)` per cell; zero at negative cells.
    pub deltas: Vec<f32>,
    /// Objects dropped because a larger one already owned their cell.
    pub collisions: usize,
}

impl Targets {
    pub fn positives(&self) -> Vec<usize> {
        (0..self.objectness.len())
            .filter(|&c| self.objectness[c] > 0.0)
            .collect()
    }

    /// Prediction that decodes exactly to these targets: saturated objectness
    /// and class logits of ±`margin`, box deltas copied.
    pub fn ideal_prediction(&self, num_classes: usize, margin: f32) -> RawPrediction {
        let cells = self.grid * self.grid;
        let mut class_logits = vec![-margin; cells * num_classes];
        for (cell, cls) in self.class_ids.iter().enumerate() {
            if let Some(c) = cls {
                class_logits[cell * num_classes + c] = margin;
            }
        }
        RawPrediction {
            grid: self.grid,
            num_classes,
            class_logits,
            objectness: self
                .objectness
                .iter()
                .map(|&o| if o > 0.0 { margin } else { -margin })
                .collect(),
            box_deltas: self.deltas.clone(),
        }
    }
}

/// Assigns each object to the cell containing its center. When two centers
/// share a cell the larger box wins and the collision is counted.
pub fn encode_targets(ground_truth: &[Annotation], config: &DetectorConfig) -> Result<Targets> {
    let g = config.grid;
    let cells = g * g;
    let size = config.input_size as f32;
    let cell_size = config.cell_size();
    let mut t = Targets {
        grid: g,
        objectness: vec![0.0; cells],
        class_ids: vec![None; cells],
        boxes: vec![None; cells],
        deltas: vec![0.0; cells * BOX_CHANNELS],
        collisions: 0,
    };
    for ann in ground_truth {
        let b = ann.bbox;
        if !b.is_valid() || b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > size || b.y_max > size {
            return Err(Error::Parameter(format!("box {b:?} outside {size}x{size} image")));
        }
        if ann.class_id >= config.num_classes {
            return Err(Error::Parameter(format!(
                "class {} out of range for {} classes",
                ann.class_id, config.num_classes
            )));
        }
        let (cx, cy) = b.center();
        let col = ((cx / cell_size).floor() as usize).min(g - 1);
        let row = ((cy / cell_size).floor() as usize).min(g - 1);
        let cell = row * g + col;
        if let Some(existing) = t.boxes[cell] {
            t.collisions += 1;
            if existing.area() >= b.area() {
                continue;
            }
        }
        let fx = (cx / cell_size - col as f32).clamp(CENTER_EPS, 1.0 - CENTER_EPS);
        let fy = (cy / cell_size - row as f32).clamp(CENTER_EPS, 1.0 - CENTER_EPS);
        t.objectness[cell] = 1.0;
        t.class_ids[cell] = Some(ann.class_id);
        t.boxes[cell] = Some(b);
        let d = &mut t.deltas[cell * BOX_CHANNELS..(cell + 1) * BOX_CHANNELS];
        d[0] = (fx / (1.0 - fx)).ln();
        d[1] = (fy / (1.0 - fy)).ln();
        d[2] = (b.width() / cell_size).ln();
        d[3] = (b.height() / cell_size).ln();
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> DetectorConfig {
        DetectorConfig::student(5)
    }

    fn det(x: f32, y: f32, w: f32, class_id: usize, confidence: f32) -> Detection {
        Detection {
            bbox: BBox::new(x, y, x + w, y + w),
            class_id,
            confidence,
        }
    }

    #[test]
    fn all_negative_objectness_decodes_to_nothing() {
        let c = cfg();
        let cells = 64;
        let p = RawPrediction {
            grid: 8,
            num_classes: 5,
            class_logits: vec![0.0; cells * 5],
            objectness: vec![-1e6; cells],
            box_deltas: vec![0.0; cells * 4],
        };
        assert!(decode(&p, &c, 0.001, 0.7).is_empty());
        assert!(decode(&p, &c, 0.0, 0.7).is_empty());
    }

    #[test]
    fn identical_boxes_keep_the_higher_confidence() {
        let out = nms(vec![det(0.0, 0.0, 10.0, 1, 0.8), det(0.0, 0.0, 10.0, 1, 0.9)], 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.9);
    }

    #[test]
    fn nms_is_per_class() {
        let out = nms(vec![det(0.0, 0.0, 10.0, 1, 0.8), det(0.0, 0.0, 10.0, 2, 0.9)], 0.5);
        assert_eq!(out.len(), 2);
    }

    /// Greedy NMS is the unique subset S with: d ∈ S iff no member of S that
    /// ranks above d (same class) overlaps it beyond the threshold. Searched
    /// over all 2^n subsets.
    fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<usize> {
        let n = dets.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
        let rank: Vec<usize> = {
            let mut r = vec![0; n];
            for (pos, &i) in order.iter().enumerate() {
                r[i] = pos;
            }
            r
        };
        let mut found = Vec::new();
        for mask in 0u32..(1 << n) {
            let inside = |i: usize| mask & (1 << i) != 0;
            let consistent = (0..n).all(|i| {
                let blocked = (0..n).any(|j| {
                    inside(j)
                        && rank[j] < rank[i]
                        && dets[j].class_id == dets[i].class_id
                        && dets[j].bbox.iou(&dets[i].bbox) > thr
                });
                inside(i) == !blocked
            });
            if consistent {
                found.push(mask);
            }
        }
        assert_eq!(found.len(), 1, "fixed point must be unique");
        let mut kept: Vec<usize> = (0..n).filter(|&i| found[0] & (1 << i) != 0).collect();
        kept.sort_by_key(|&i| rank[i]);
        kept
    }

    #[test]
    fn crafted_three_box_chain() {
        // A overlaps B, B overlaps C, A does not overlap C: A and C survive.
        let dets = vec![
            Detection { bbox: BBox::new(0.0, 0.0, 10.0, 10.0), class_id: 0, confidence: 0.9 },
            Detection { bbox: BBox::new(4.0, 0.0, 14.0, 10.0), class_id: 0, confidence: 0.8 },
            Detection { bbox: BBox::new(8.0, 0.0, 18.0, 10.0), class_id: 0, confidence: 0.7 },
        ];
        let out = nms(dets.clone(), 0.3);
        let expect: Vec<Detection> = nms_oracle(&dets, 0.3).into_iter().map(|i| dets[i]).collect();
        assert_eq!(out, expect);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].confidence, 0.7);
    }

    proptest! {
        #[test]
        fn nms_matches_exhaustive_oracle(
            raw in proptest::collection::vec((0.0f32..20.0, 0.0f32..20.0, 2.0f32..12.0, 0usize..2, 0.0f32..1.0), 1..8),
            thr in 0.1f64..0.9,
        ) {
            let dets: Vec<Detection> = raw.iter().map(|&(x, y, w, c, s)| det(x, y, w, c, s)).collect();
            let got = nms(dets.clone(), thr);
            let expect: Vec<Detection> = nms_oracle(&dets, thr).into_iter().map(|i| dets[i]).collect();
            prop_assert_eq!(&got, &expect);
            for (i, a) in got.iter().enumerate() {
                for b in &got[i + 1..] {
                    prop_assert!(a.class_id != b.class_id || a.bbox.iou(&b.bbox) <= thr);
                }
            }
        }
    }

    #[test]
    fn centered_box_owns_cell_4_4() {
        let t = encode_targets(
            &[Annotation { bbox: BBox::new(26.0, 26.0, 38.0, 38.0), class_id: 2 }],
            &cfg(),
        )
        .unwrap();
        assert_eq!(t.positives(), vec![4 * 8 + 4]);
        assert_eq!(t.class_ids[36], Some(2));
    }

    #[test]
    fn empty_image_has_zero_targets() {
        let t = encode_targets(&[], &cfg()).unwrap();
        assert!(t.objectness.iter().all(|&v| v == 0.0));
        assert!(t.deltas.iter().all(|&v| v == 0.0));
        assert!(t.positives().is_empty());
    }

    #[test]
    fn center_collision_keeps_larger_and_counts() {
        let small = Annotation { bbox: BBox::new(10.0, 10.0, 14.0, 14.0), class_id: 0 };
        let large = Annotation { bbox: BBox::new(5.0, 5.0, 19.0, 19.0), class_id: 3 };
        for order in [[small, large], [large, small]] {
            let t = encode_targets(&order, &cfg()).unwrap();
            assert_eq!(t.collisions, 1);
            assert_eq!(t.positives().len(), 1);
            assert_eq!(t.class_ids[t.positives()[0]], Some(3));
        }
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        let a = Annotation { bbox: BBox::new(60.0, 10.0, 70.0, 20.0), class_id: 0 };
        assert!(encode_targets(&[a], &cfg()).is_err());
    }

    #[test]
    fn head_output_split_layout() {
        let c = cfg();
        let ch = c.outputs_per_cell();
        let data: Vec<f32> = (0..ch * 64).map(|v| v as f32).collect();
        let raw = Tensor::new(vec![1, ch, 8, 8], data).unwrap();
        let p = &RawPrediction::from_head_output(&raw, &c).unwrap()[0];
        // cell 3: class ch j at j*64+3, objectness at 5*64+3, box at (6+j)*64+3
        assert_eq!(&p.class_logits[15..20], &[3.0, 67.0, 131.0, 195.0, 259.0]);
        assert_eq!(p.objectness[3], 323.0);
        assert_eq!(&p.box_deltas[12..16], &[387.0, 451.0, 515.0, 579.0]);
    }

    fn scene() -> impl Strategy<Value = Vec<Annotation>> {
        proptest::collection::vec((0.0f32..60.0, 0.0f32..60.0, 1.0f32..30.0, 1.0f32..30.0, 0usize..5), 0..12)
            .prop_map(|objs| {
                objs.into_iter()
                    .map(|(x, y, w, h, c)| Annotation {
                        bbox: BBox::new(x, y, (x + w).min(64.0), (y + h).min(64.0)),
                        class_id: c,
                    })
                    .collect()
            })
    }

    proptest! {
        #[test]
        fn decode_encode_round_trip(gt in scene()) {
            let c = cfg();
            let t = encode_targets(&gt, &c).unwrap();
            let pred = t.ideal_prediction(c.num_classes, 30.0);
            let dets = decode(&pred, &c, 0.5, 1.01);
            prop_assert_eq!(dets.len(), t.positives().len());
            for cell in t.positives() {
                let want = t.boxes[cell].unwrap();
                let hit = dets.iter().find(|d| {
                    let (cx, cy) = d.bbox.center();
                    ((cy / 8.0) as usize).min(7) * 8 + ((cx / 8.0) as usize).min(7) == cell
                });
                let d = hit.expect("every positive cell decodes");
                prop_assert_eq!(Some(d.class_id), t.class_ids[cell]);
                for (a, b) in [
                    (d.bbox.x_min, want.x_min), (d.bbox.y_min, want.y_min),
                    (d.bbox.x_max, want.x_max), (d.bbox.y_max, want.y_max),
                ] {
                    let scale = b.abs().max(want.width()).max(want.height());
                    prop_assert!((a - b).abs() <= 1e-5 * scale, "{} vs {}", a, b);
                }
            }
        }
    }
}
