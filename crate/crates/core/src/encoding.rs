//! Ground-truth target maps and decoding of predicted maps into segments.
//!
//! A segment with center `p` lands in cell `⌊p/s⌋` of the map grid. That cell
//! stores the sub-cell offset `p/s - ⌊p/s⌋`, the length divided by the image
//! diagonal, and the angle divided by π, so decoding is exact whenever no two
//! centers share a cell.

use std::cmp::Ordering;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{from_cla_unchecked, ClaRep, LineSegment, Point, Size};
use crate::postprocess::DetectionSet;

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    pub map_size: Size,
    pub image_size: Size,
    /// Image pixels per map cell.
    pub stride: f64,
    /// H×W, 1 at cells holding a segment center.
    pub center: Vec<f64>,
    /// 2×H×W, channel 0 = x offset, channel 1 = y offset, both in [0, 1).
    pub offset: Vec<f64>,
    /// H×W, length / image diagonal, in (0, 1].
    pub length: Vec<f64>,
    /// H×W, angle / π, in [0, 1).
    pub angle: Vec<f64>,
    /// H×W, identical to `center`; kept separate for masking regression losses.
    pub mask: Vec<f64>,
}

impl TargetMaps {
    pub fn zeros(image_size: Size, map_size: Size) -> Result<Self> {
        let stride = stride_for(image_size, map_size)?;
        let n = map_size.area();
        Ok(Self {
            map_size,
            image_size,
            stride,
            center: vec![0.0; n],
            offset: vec![0.0; 2 * n],
            length: vec![0.0; n],
            angle: vec![0.0; n],
            mask: vec![0.0; n],
        })
    }

    pub fn positives(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }
}

/// Image pixels per cell; the map must divide the image evenly with the same
/// factor on both axes.
pub fn stride_for(image_size: Size, map_size: Size) -> Result<f64> {
    if map_size.area() == 0
        || !image_size.height.is_multiple_of(map_size.height)
        || !image_size.width.is_multiple_of(map_size.width)
        || image_size.height / map_size.height != image_size.width / map_size.width
    {
        return Err(Error::Config(format!(
            "map {}x{} does not evenly divide image {}x{}",
            map_size.height, map_size.width, image_size.height, image_size.width
        )));
    }
    Ok((image_size.height / map_size.height) as f64)
}

/// Orders collision candidates: longer wins, then lexicographically smaller
/// coordinates, so the result does not depend on input order.
fn beats(a: &LineSegment, b: &LineSegment) -> bool {
    match a.length().total_cmp(&b.length()) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => {
            let (ca, cb) = (a.coords(), b.coords());
            ca.iter().zip(&cb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()) == Some(Ordering::Less)
        }
    }
}

pub fn encode(segments: &[LineSegment], image_size: Size, map_size: Size) -> Result<TargetMaps> {
    let mut maps = TargetMaps::zeros(image_size, map_size)?;
    let s = maps.stride;
    let diag = image_size.diagonal();
    let n = map_size.area();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut reps = Vec::with_capacity(segments.len());
    for (idx, seg) in segments.iter().enumerate() {
        let rep = seg.to_cla()?;
        let c = rep.center;
        if !(c.x >= 0.0 && c.y >= 0.0 && c.x < image_size.width as f64 && c.y < image_size.height as f64) {
            return Err(Error::CenterOutsideImage {
                x: c.x,
                y: c.y,
                width: image_size.width,
                height: image_size.height,
            });
        }
        let (gx, gy) = (c.x / s, c.y / s);
        let col = (gx.floor() as usize).min(map_size.width - 1);
        let row = (gy.floor() as usize).min(map_size.height - 1);
        let cell = row * map_size.width + col;
        reps.push((rep, gx - col as f64, gy - row as f64));
        match owner[cell] {
            Some(prev) if !beats(seg, &segments[prev]) => {}
            _ => owner[cell] = Some(idx),
        }
    }
    for (cell, idx) in owner.iter().enumerate() {
        let Some(idx) = *idx else { continue };
        let (rep, ox, oy) = reps[idx];
        maps.center[cell] = 1.0;
        maps.mask[cell] = 1.0;
        maps.offset[cell] = ox;
        maps.offset[n + cell] = oy;
        maps.length[cell] = rep.length / diag;
        maps.angle[cell] = rep.angle / PI;
    }
    Ok(maps)
}

/// Activated per-cell predictions for one image: center scores in [0, 1],
/// offsets, normalized lengths and normalized angles.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMaps {
    pub map_size: Size,
    pub center: Vec<f64>,
    /// 2×H×W (x channel, then y channel).
    pub offset: Vec<f64>,
    pub length: Vec<f64>,
    pub angle: Vec<f64>,
}

impl PredictionMaps {
    /// Exact predictions reproducing a set of targets.
    pub fn from_targets(t: &TargetMaps) -> Self {
        Self {
            map_size: t.map_size,
            center: t.center.clone(),
            offset: t.offset.clone(),
            length: t.length.clone(),
            angle: t.angle.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.map_size.area();
        if self.center.len() != n || self.offset.len() != 2 * n || self.length.len() != n || self.angle.len() != n {
            return Err(Error::shape("decode", format!("prediction maps disagree with grid {:?}", self.map_size)));
        }
        Ok(())
    }
}

/// Indices of the `k` largest scores in descending order (ties: lower index first).
pub(crate) fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Segment predicted at one cell.
pub fn decode_cell(maps: &PredictionMaps, cell: usize, stride: f64, image_size: Size) -> LineSegment {
    let w = maps.map_size.width;
    let n = maps.map_size.area();
    let (row, col) = (cell / w, cell % w);
    let center = Point::new((col as f64 + maps.offset[cell]) * stride, (row as f64 + maps.offset[n + cell]) * stride);
    let rep = ClaRep { center, length: maps.length[cell] * image_size.diagonal(), angle: maps.angle[cell] * PI };
    from_cla_unchecked(&rep, maps.center[cell])
}

/// Segments at the `k` highest-scoring cells, sorted by descending score.
pub fn decode(maps: &PredictionMaps, stride: f64, image_size: Size, k: usize) -> Result<DetectionSet> {
    maps.validate()?;
    if k == 0 {
        return Err(Error::Config("top-k must be at least 1".into()));
    }
    let segments = top_k(&maps.center, k).into_iter().map(|cell| decode_cell(maps, cell, stride, image_size)).collect();
    Ok(DetectionSet::from_sorted(segments, image_size))
}
