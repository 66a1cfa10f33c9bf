//! Training losses, recorded on a [`Tape`] so they differentiate end to end.

use serde::{Deserialize, Serialize};

use crate::encoding::TargetMaps;
use crate::error::{Error, Result};
use crate::model::HeadOutputs;
use crate::tensor::{Tape, Tensor, Var};

/// Denominator of the masked regression losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Mean over cells holding a segment center.
    #[default]
    PerPositive,
    /// Mean over all map cells.
    PerPixel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub center: f64,
    pub offset: f64,
    pub length: f64,
    pub angle: f64,
    /// Focal exponent.
    pub beta: f64,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            center: 1.0,
            offset: 0.25,
            length: 3.0,
            angle: 1.0,
            beta: 5.0,
            normalization: Normalization::PerPositive,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.center, self.offset, self.length, self.angle, self.beta];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {all:?}")));
        }
        Ok(())
    }
}

/// Repeats a per-cell map across `channels` channels, as a 1×C×H×W constant.
fn broadcast(tape: &mut Tape, map: &[f64], channels: usize, shape: &[usize]) -> Result<Var> {
    let data: Vec<f64> = (0..channels).flat_map(|_| map.iter().copied()).collect();
    Ok(tape.constant(Tensor::new(shape.to_vec(), data)?))
}

fn check_single(tape: &Tape, v: Var, channels: usize, cells: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(v);
    if s.len() != 4 || s[0] != 1 || s[1] != channels || s[2] * s[3] != cells {
        return Err(Error::shape(op, format!("prediction {s:?} for {cells} target cells")));
    }
    Ok(())
}

/// Two-branch focal loss on 1×2×H×W logits (channel 1 = foreground), averaged
/// over all H·W cells.
pub fn focal_loss(tape: &mut Tape, target: &[f64], logits: Var, beta: f64) -> Result<Var> {
    check_single(tape, logits, 2, target.len(), "focal_loss")?;
    let shape = tape.shape(logits).to_vec();
    let half = [1, 1, shape[2], shape[3]];
    let lp = tape.log_softmax_channels(logits)?;
    let lp_bg = tape.slice_channels(lp, 0, 1)?;
    let lp_fg = tape.slice_channels(lp, 1, 1)?;
    let pos_mask = broadcast(tape, target, 1, &half)?;
    let neg: Vec<f64> = target.iter().map(|c| 1.0 - c).collect();
    let neg_mask = broadcast(tape, &neg, 1, &half)?;

    // (1 - p)^β = exp(β·log p_bg) and p^β = exp(β·log p_fg).
    let scaled = tape.scale(lp_bg, beta);
    let w_pos = tape.exp(scaled);
    let scaled = tape.scale(lp_fg, beta);
    let w_neg = tape.exp(scaled);
    let pos = tape.mul(w_pos, lp_fg)?;
    let pos = tape.mul(pos, pos_mask)?;
    let neg = tape.mul(w_neg, lp_bg)?;
    let neg = tape.mul(neg, neg_mask)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0 / target.len() as f64))
}

fn masked_mean(tape: &mut Tape, per_cell: Var, mask: &[f64], channels: usize, norm: Normalization) -> Result<Var> {
    let shape = tape.shape(per_cell).to_vec();
    let m = broadcast(tape, mask, channels, &shape)?;
    let masked = tape.mul(per_cell, m)?;
    let total = tape.sum(masked);
    let denom = match norm {
        Normalization::PerPositive => mask.iter().filter(|&&v| v > 0.0).count().max(1),
        Normalization::PerPixel => mask.len(),
    };
    Ok(tape.scale(total, 1.0 / denom as f64))
}

/// Squared ℓ2 offset error summed over the x and y channels and averaged over
/// positive cells. An all-zero mask gives 0.
pub fn offset_loss(tape: &mut Tape, target: &[f64], pred: Var, mask: &[f64], norm: Normalization) -> Result<Var> {
    check_single(tape, pred, 2, mask.len(), "offset_loss")?;
    if target.len() != 2 * mask.len() {
        return Err(Error::shape("offset_loss", format!("{} targets for {} cells", target.len(), mask.len())));
    }
    let shape = tape.shape(pred).to_vec();
    let t = tape.constant(Tensor::new(shape, target.to_vec())?);
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    masked_mean(tape, sq, mask, 2, norm)
}

/// Masked ℓ1 loss on a single-channel map (length or angle).
pub fn l1_map_loss(tape: &mut Tape, target: &[f64], pred: Var, mask: &[f64], norm: Normalization) -> Result<Var> {
    check_single(tape, pred, 1, mask.len(), "l1_map_loss")?;
    if target.len() != mask.len() {
        return Err(Error::shape("l1_map_loss", format!("{} targets for {} cells", target.len(), mask.len())));
    }
    let shape = tape.shape(pred).to_vec();
    let t = tape.constant(Tensor::new(shape, target.to_vec())?);
    let diff = tape.sub(pred, t)?;
    let abs = tape.abs(diff);
    masked_mean(tape, abs, mask, 1, norm)
}

/// The weighted total and its four components.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub center: Var,
    pub offset: Var,
    pub length: Var,
    pub angle: Var,
    pub total: Var,
}

/// Scalar values of a [`LossTerms`], in the order center, offset, length,
/// angle, total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub center: f64,
    pub offset: f64,
    pub length: f64,
    pub angle: f64,
    pub total: f64,
}

impl LossValues {
    pub fn read(tape: &Tape, t: &LossTerms) -> Self {
        let v = |x: Var| tape.value(x).item();
        Self { center: v(t.center), offset: v(t.offset), length: v(t.length), angle: v(t.angle), total: v(t.total) }
    }

    pub fn add_scaled(&mut self, other: &LossValues, k: f64) {
        self.center += k * other.center;
        self.offset += k * other.offset;
        self.length += k * other.length;
        self.angle += k * other.angle;
        self.total += k * other.total;
    }
}

/// λ_C·L_C + λ_O·L_O + λ_l·L_l + λ_α·L_α for a single image.
pub fn total_loss(tape: &mut Tape, maps: &TargetMaps, preds: &HeadOutputs, w: &LossWeights) -> Result<LossTerms> {
    w.validate()?;
    let norm = w.normalization;
    let center = focal_loss(tape, &maps.center, preds.center, w.beta)?;
    let offset = offset_loss(tape, &maps.offset, preds.offset, &maps.mask, norm)?;
    let length = l1_map_loss(tape, &maps.length, preds.length, &maps.mask, norm)?;
    let angle = l1_map_loss(tape, &maps.angle, preds.angle, &maps.mask, norm)?;
    let mut total = tape.scale(center, w.center);
    for (term, lambda) in [(offset, w.offset), (length, w.length), (angle, w.angle)] {
        let scaled = tape.scale(term, lambda);
        total = tape.add(total, scaled)?;
    }
    Ok(LossTerms { center, offset, length, angle, total })
}
