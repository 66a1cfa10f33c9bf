//! Score-map SoftNMS, structural NMS over decoded segments, and the full
//! inference pipeline that chains them with top-K decoding.

use serde::{Deserialize, Serialize};

use crate::encoding::{decode, PredictionMaps};
use crate::error::{Error, Result};
use crate::geometry::{struct_distance, LineSegment, Size};
use crate::tensor::{max_pool2d_forward, PoolGeometry, Tensor};

/// Side of the square frame in which structural distances are measured.
pub const EVAL_FRAME: f64 = 128.0;

/// Maps image pixel coordinates into the 128×128 evaluation frame.
pub fn to_eval_frame(seg: &LineSegment, image_size: Size) -> LineSegment {
    let (kx, ky) = (EVAL_FRAME / image_size.width as f64, EVAL_FRAME / image_size.height as f64);
    seg.map_points(|p| crate::geometry::Point::new(p.x * kx, p.y * ky))
}

/// Scored segments for one image, always sorted by descending score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    segments: Vec<LineSegment>,
    pub image_size: Size,
}

impl DetectionSet {
    /// Sorts `segments` by descending score; equal scores keep their order.
    pub fn new(mut segments: Vec<LineSegment>, image_size: Size) -> Self {
        segments.sort_by(|a, b| b.score.total_cmp(&a.score));
        Self { segments, image_size }
    }

    pub(crate) fn from_sorted(segments: Vec<LineSegment>, image_size: Size) -> Self {
        debug_assert!(segments.windows(2).all(|w| w[0].score >= w[1].score));
        Self { segments, image_size }
    }

    pub fn empty(image_size: Size) -> Self {
        Self { segments: Vec::new(), image_size }
    }

    pub fn segments(&self) -> &[LineSegment] {
        &self.segments
    }

    pub fn into_segments(self) -> Vec<LineSegment> {
        self.segments
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LineSegment> {
        self.segments.iter()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Keeps detections scoring at least `floor`.
    pub fn above(mut self, floor: f64) -> Self {
        self.segments.retain(|s| s.score >= floor);
        self
    }
}

/// Keeps cells equal to their 3×3 neighbourhood maximum and multiplies every
/// other cell by `delta`.
pub fn soft_nms(scores: &[f64], map_size: Size, delta: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Config(format!("SoftNMS delta {delta} outside [0, 1]")));
    }
    if scores.len() != map_size.area() {
        return Err(Error::shape("soft_nms", format!("{} scores for a {map_size:?} map", scores.len())));
    }
    if scores.is_empty() {
        return Ok(Vec::new());
    }
    let t = Tensor::new(vec![1, 1, map_size.height, map_size.width], scores.to_vec())?;
    let pooled = max_pool2d_forward(&t, PoolGeometry::NEIGHBORHOOD3)?;
    Ok(scores.iter().zip(pooled.data()).map(|(&c, &m)| if c == m { c } else { delta * c }).collect())
}

/// Greedy structural NMS: walking in score order, a segment survives iff its
/// structural distance to every survivor so far is at least `tau`. Distances
/// are taken on the coordinates as given.
pub fn struct_nms(dets: &DetectionSet, tau: f64) -> DetectionSet {
    let mut kept: Vec<LineSegment> = Vec::with_capacity(dets.len());
    for seg in dets.iter() {
        if kept.iter().all(|k| struct_distance(k, seg) >= tau) {
            kept.push(*seg);
        }
    }
    DetectionSet::from_sorted(kept, dets.image_size)
}

/// Structural NMS with `tau` measured in the 128×128 evaluation frame.
pub fn struct_nms_eval_frame(dets: &DetectionSet, tau: f64) -> DetectionSet {
    let framed: Vec<LineSegment> = dets.iter().map(|s| to_eval_frame(s, dets.image_size)).collect();
    let mut kept_framed: Vec<LineSegment> = Vec::with_capacity(dets.len());
    let mut kept = Vec::with_capacity(dets.len());
    for (seg, f) in dets.iter().zip(&framed) {
        if kept_framed.iter().all(|k| struct_distance(k, f) >= tau) {
            kept_framed.push(*f);
            kept.push(*seg);
        }
    }
    DetectionSet::from_sorted(kept, dets.image_size)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// SoftNMS attenuation of non-maximal cells; 0 gives hard NMS.
    pub delta: f64,
    /// StructNMS threshold in the evaluation frame; 0 disables it.
    pub tau: f64,
    pub top_k: usize,
    pub score_floor: f64,
    /// Apply the score floor before StructNMS (otherwise after).
    pub floor_before_struct_nms: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { delta: 0.8, tau: 2.0, top_k: 300, score_floor: 0.25, floor_before_struct_nms: true }
    }
}

impl PipelineConfig {
    /// Unfiltered output for precision/recall sweeps.
    pub fn for_evaluation(self) -> Self {
        Self { score_floor: 0.0, ..self }
    }
}

/// SoftNMS → top-K decode → score floor → StructNMS.
pub fn pipeline(preds: &PredictionMaps, stride: f64, image_size: Size, cfg: &PipelineConfig) -> Result<DetectionSet> {
    preds.validate()?;
    if preds.map_size.area() == 0 {
        return Ok(DetectionSet::empty(image_size));
    }
    let suppressed = PredictionMaps { center: soft_nms(&preds.center, preds.map_size, cfg.delta)?, ..preds.clone() };
    let mut dets = decode(&suppressed, stride, image_size, cfg.top_k)?;
    if cfg.floor_before_struct_nms {
        dets = dets.above(cfg.score_floor);
    }
    if cfg.tau > 0.0 {
        dets = struct_nms_eval_frame(&dets, cfg.tau);
    }
    if !cfg.floor_before_struct_nms {
        dets = dets.above(cfg.score_floor);
    }
    Ok(dets)
}
