//! Structural AP, heatmap AP and precision-recall curves.
//!
//! Predictions of all images are pooled and sorted by score. Matching happens
//! inside each image: walking its predictions by descending score, each claims
//! the nearest still-unmatched ground-truth segment within ε, otherwise it is a
//! false positive. Precision/recall points are taken at the end of every group
//! of equal scores, so ties never depend on input order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{struct_distance, LineSegment, Size};
use crate::postprocess::{to_eval_frame, DetectionSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub pr: Vec<PrPoint>,
}

/// Area under the right-max interpolated precision envelope, with the curve
/// padded by (recall 0, precision 0) and (recall 1, precision 0).
pub fn average_precision(points: &[PrPoint]) -> f64 {
    let mut rec = Vec::with_capacity(points.len() + 2);
    let mut prec = Vec::with_capacity(points.len() + 2);
    rec.push(0.0);
    prec.push(0.0);
    for p in points {
        rec.push(p.recall);
        prec.push(p.precision);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (0..rec.len() - 1).filter(|&i| rec[i + 1] != rec[i]).map(|i| (rec[i + 1] - rec[i]) * prec[i + 1]).sum()
}

/// Pooled (score, is-true-positive) pairs into PR points at each distinct score.
fn pr_curve(mut scored: Vec<(f64, bool)>, positives: usize) -> Vec<PrPoint> {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    if positives == 0 {
        return points;
    }
    let mut tp = 0usize;
    for (k, &(score, hit)) in scored.iter().enumerate() {
        tp += hit as usize;
        if scored.get(k + 1).is_none_or(|n| n.0 != score) {
            points.push(PrPoint {
                threshold: score,
                precision: tp as f64 / (k + 1) as f64,
                recall: tp as f64 / positives as f64,
            });
        }
    }
    points
}

/// Matches of one image's score-sorted predictions: `Some(gt index)` for
/// true positives.
pub fn match_image(preds: &[LineSegment], gts: &[LineSegment], eps: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, g)| (j, struct_distance(p, g)))
                .filter(|&(_, d)| d < eps)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            best.map(|(j, _)| {
                taken[j] = true;
                j
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SapResult {
    pub ap: f64,
    pub pr: Vec<PrPoint>,
    /// Per image, per prediction (in score order): the matched GT index.
    pub matches: Vec<Vec<Option<usize>>>,
}

/// sAP^ε on segments already expressed in the 128×128 evaluation frame.
/// Each image's predictions must be sorted by descending score.
pub fn sap_framed(preds: &[Vec<LineSegment>], gts: &[Vec<LineSegment>], eps: f64) -> Result<SapResult> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("sAP threshold must be positive, got {eps}")));
    }
    if preds.len() != gts.len() {
        return Err(Error::Config(format!("{} prediction sets for {} images", preds.len(), gts.len())));
    }
    let matches: Vec<Vec<Option<usize>>> = preds.iter().zip(gts).map(|(p, g)| match_image(p, g, eps)).collect();
    let scored =
        preds.iter().zip(&matches).flat_map(|(p, m)| p.iter().zip(m).map(|(s, m)| (s.score, m.is_some()))).collect();
    let pr = pr_curve(scored, gts.iter().map(Vec::len).sum());
    Ok(SapResult { ap: average_precision(&pr), pr, matches })
}

/// sAP^ε with predictions and ground truth in image pixels; both are mapped
/// into the evaluation frame using each detection set's image size.
pub fn sap(preds: &[DetectionSet], gts: &[Vec<LineSegment>], eps: f64) -> Result<SapResult> {
    let framed_preds: Vec<Vec<LineSegment>> =
        preds.iter().map(|d| d.iter().map(|s| to_eval_frame(s, d.image_size)).collect()).collect();
    let framed_gts: Vec<Vec<LineSegment>> =
        preds.iter().zip(gts).map(|(d, g)| g.iter().map(|s| to_eval_frame(s, d.image_size)).collect()).collect();
    sap_framed(&framed_preds, &framed_gts, eps)
}

/// Reference sAP: enumerates every injective partial assignment of
/// predictions to ground truth within ε and keeps the one in which every
/// prediction holds the nearest segment left over by higher-scoring ones;
/// AP is then integrated over a sweep of all score thresholds.
pub fn sap_bruteforce(preds: &[Vec<LineSegment>], gts: &[Vec<LineSegment>], eps: f64) -> f64 {
    let mut matched_scores: Vec<(f64, bool)> = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let mut found = None;
        let mut assign = vec![None; p.len()];
        enumerate(p, g, eps, 0, &mut assign, &mut vec![false; g.len()], &mut |a| {
            if consistent(p, g, eps, a) {
                assert!(found.is_none(), "greedy assignment must be unique");
                found = Some(a.to_vec());
            }
        });
        let found = found.expect("the greedy assignment always exists");
        matched_scores.extend(p.iter().zip(&found).map(|(s, m)| (s.score, m.is_some())));
    }
    let positives: usize = gts.iter().map(Vec::len).sum();
    if positives == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = matched_scores.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let sweep: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let kept = matched_scores.iter().filter(|s| s.0 >= t).count();
            let tp = matched_scores.iter().filter(|s| s.0 >= t && s.1).count();
            (tp as f64 / positives as f64, tp as f64 / kept as f64)
        })
        .collect();
    let mut levels: Vec<f64> = sweep.iter().map(|s| s.0).collect();
    levels.push(1.0);
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &r in &levels {
        if r == prev {
            continue;
        }
        let best = sweep.iter().filter(|s| s.0 >= r).map(|s| s.1).fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    ap
}

fn enumerate(
    p: &[LineSegment],
    g: &[LineSegment],
    eps: f64,
    i: usize,
    assign: &mut Vec<Option<usize>>,
    used: &mut Vec<bool>,
    visit: &mut dyn FnMut(&[Option<usize>]),
) {
    if i == p.len() {
        visit(assign);
        return;
    }
    assign[i] = None;
    enumerate(p, g, eps, i + 1, assign, used, visit);
    for j in 0..g.len() {
        if !used[j] && struct_distance(&p[i], &g[j]) < eps {
            used[j] = true;
            assign[i] = Some(j);
            enumerate(p, g, eps, i + 1, assign, used, visit);
            used[j] = false;
        }
    }
    assign[i] = None;
}

fn consistent(p: &[LineSegment], g: &[LineSegment], eps: f64, a: &[Option<usize>]) -> bool {
    (0..p.len()).all(|i| {
        let free: Vec<usize> = (0..g.len()).filter(|j| !a[..i].contains(&Some(*j))).collect();
        let d = |j: usize| struct_distance(&p[i], &g[j]);
        match a[i] {
            None => free.iter().all(|&j| d(j) >= eps),
            Some(j) => free.iter().all(|&k| d(k) > d(j) || (d(k) == d(j) && k >= j)),
        }
    })
}

/// Pixels whose coverage by a 1 px wide anti-aliased stroke is at least ½.
pub fn rasterize(segments: &[LineSegment], size: Size) -> Vec<bool> {
    let mut out = vec![false; size.area()];
    for s in segments {
        rasterize_into(s, size, &mut out, &mut |_| {});
    }
    out
}

fn rasterize_into(seg: &LineSegment, size: Size, out: &mut [bool], on_new: &mut dyn FnMut(usize)) {
    let (a, b) = (seg.left(), seg.right());
    let len = seg.length();
    if len == 0.0 || size.area() == 0 {
        return;
    }
    let (ux, uy) = ((b.x - a.x) / len, (b.y - a.y) / len);
    let overlap = |lo: f64, hi: f64, c: f64| ((c + 0.5).min(hi) - (c - 0.5).max(lo)).clamp(0.0, 1.0);
    let clampi = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
    let x0 = clampi((a.x.min(b.x) - 1.0).floor(), size.width);
    let x1 = clampi((a.x.max(b.x) + 1.0).ceil(), size.width);
    let y0 = clampi((a.y.min(b.y) - 1.0).floor(), size.height);
    let y1 = clampi((a.y.max(b.y) + 1.0).ceil(), size.height);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 - a.x, y as f64 - a.y);
            let t = px * ux + py * uy;
            let d = -px * uy + py * ux;
            let idx = y * size.width + x;
            if !out[idx] && overlap(-0.5, 0.5, d) * overlap(0.0, len, t) >= 0.5 {
                out[idx] = true;
                on_new(idx);
            }
        }
    }
}

fn neighbours(idx: usize, size: Size) -> impl Iterator<Item = usize> {
    let (x, y) = ((idx % size.width) as isize, (idx / size.width) as isize);
    (-1..=1)
        .flat_map(move |dy| (-1..=1).map(move |dx| (x + dx, y + dy)))
        .filter(move |&(nx, ny)| nx >= 0 && ny >= 0 && (nx as usize) < size.width && (ny as usize) < size.height)
        .map(move |(nx, ny)| ny as usize * size.width + nx as usize)
}

/// 3×3 dilation of a binary raster.
pub fn dilate(raster: &[bool], size: Size) -> Vec<bool> {
    let mut out = vec![false; raster.len()];
    for (i, _) in raster.iter().enumerate().filter(|(_, &on)| on) {
        for n in neighbours(i, size) {
            out[n] = true;
        }
    }
    out
}

/// Heatmap AP: rasterized predictions above each score threshold against the
/// rasterized ground truth, with a 1 px tolerance on both sides. Pixel counts
/// are pooled over images.
pub fn ap_heat(preds: &[DetectionSet], gts: &[Vec<LineSegment>]) -> Result<ApResult> {
    if preds.len() != gts.len() {
        return Err(Error::Config(format!("{} prediction sets for {} images", preds.len(), gts.len())));
    }
    struct State {
        size: Size,
        gt: Vec<bool>,
        gt_dilated: Vec<bool>,
        pred: Vec<bool>,
        pred_dilated: Vec<bool>,
    }
    let mut states: Vec<State> = preds
        .iter()
        .zip(gts)
        .map(|(d, g)| {
            let gt = rasterize(g, d.image_size);
            let gt_dilated = dilate(&gt, d.image_size);
            State {
                size: d.image_size,
                gt,
                gt_dilated,
                pred: vec![false; d.image_size.area()],
                pred_dilated: vec![false; d.image_size.area()],
            }
        })
        .collect();
    let gt_pixels: usize = states.iter().map(|s| s.gt.iter().filter(|&&v| v).count()).sum();
    let mut order: Vec<(f64, usize, usize)> =
        preds.iter().enumerate().flat_map(|(i, d)| d.iter().enumerate().map(move |(k, s)| (s.score, i, k))).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let (mut pred_pixels, mut pred_hits, mut gt_hits) = (0usize, 0usize, 0usize);
    let mut pr = Vec::new();
    for (n, &(score, img, k)) in order.iter().enumerate() {
        let st = &mut states[img];
        let mut fresh = Vec::new();
        rasterize_into(&preds[img].segments()[k], st.size, &mut st.pred, &mut |idx| fresh.push(idx));
        for idx in fresh {
            pred_pixels += 1;
            pred_hits += st.gt_dilated[idx] as usize;
            for nb in neighbours(idx, st.size) {
                if !st.pred_dilated[nb] {
                    st.pred_dilated[nb] = true;
                    gt_hits += st.gt[nb] as usize;
                }
            }
        }
        let group_ends = order.get(n + 1).is_none_or(|next| next.0 != score);
        if group_ends && gt_pixels > 0 {
            let precision = if pred_pixels == 0 { 0.0 } else { pred_hits as f64 / pred_pixels as f64 };
            pr.push(PrPoint { threshold: score, precision, recall: gt_hits as f64 / gt_pixels as f64 });
        }
    }
    Ok(ApResult { ap: average_precision(&pr), pr })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub sap_thresholds: Vec<f64>,
    pub heatmap: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sap_thresholds: vec![5.0, 10.0, 15.0], heatmap: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub metric: String,
    pub ap: f64,
    pub points: Vec<PrPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub ground_truth: usize,
    pub predictions: usize,
    /// sAP keyed by metric name, e.g. "sAP10".
    pub sap: BTreeMap<String, f64>,
    pub ap_heat: Option<f64>,
    pub curves: Vec<Curve>,
    /// Per image matches at the middle sAP threshold.
    pub matches: Vec<Vec<Option<usize>>>,
}

impl EvalReport {
    pub fn sap_at(&self, eps: f64) -> Option<f64> {
        self.sap.get(&sap_name(eps)).copied()
    }
}

pub fn sap_name(eps: f64) -> String {
    format!("sAP{eps}")
}

pub fn report(preds: &[DetectionSet], gts: &[Vec<LineSegment>], config: &EvalConfig) -> Result<EvalReport> {
    let mut sap_values = BTreeMap::new();
    let mut curves = Vec::new();
    let mut matches = Vec::new();
    let mid = config.sap_thresholds.len() / 2;
    for (i, &eps) in config.sap_thresholds.iter().enumerate() {
        let r = sap(preds, gts, eps)?;
        sap_values.insert(sap_name(eps), r.ap);
        curves.push(Curve { metric: sap_name(eps), ap: r.ap, points: r.pr });
        if i == mid {
            matches = r.matches;
        }
    }
    let ap_heat = if config.heatmap {
        let h = ap_heat(preds, gts)?;
        curves.push(Curve { metric: "APH".into(), ap: h.ap, points: h.pr });
        Some(h.ap)
    } else {
        None
    };
    Ok(EvalReport {
        images: preds.len(),
        ground_truth: gts.iter().map(Vec::len).sum(),
        predictions: preds.iter().map(DetectionSet::len).sum(),
        sap: sap_values,
        ap_heat,
        curves,
        matches,
    })
}

pub fn emit_json(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(path, e))
}

pub fn emit_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = String::from("metric,threshold,precision,recall\n");
    for c in &report.curves {
        for p in &c.points {
            let _ = writeln!(out, "{},{},{},{}", c.metric, p.threshold, p.precision, p.recall);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Precision-recall curves as a standalone SVG line plot.
pub fn emit_svg(report: &EvalReport, path: &Path) -> Result<()> {
    const W: f64 = 480.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let (pw, ph) = (W - 2.0 * M, H - 2.0 * M);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(svg, "<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(svg, "<rect x=\"{M}\" y=\"{M}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>");
    for t in 0..=10 {
        let f = t as f64 / 10.0;
        let (x, y) = (M + f * pw, M + (1.0 - f) * ph);
        let _ = writeln!(svg, "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"#ddd\"/>", M, M + ph);
        let _ = writeln!(svg, "<line x1=\"{M}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>", M + pw);
        if t % 2 == 0 {
            let _ = writeln!(svg, "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{f:.1}</text>", M + ph + 16.0);
            let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{f:.1}</text>", M - 6.0, y + 4.0);
        }
    }
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">Recall</text>", M + pw / 2.0, H - 10.0);
    let _ = writeln!(
        svg,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">Precision</text>",
        M + ph / 2.0,
        M + ph / 2.0
    );
    for (i, c) in report.curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> =
            c.points.iter().map(|p| format!("{:.2},{:.2}", M + p.recall * pw, M + (1.0 - p.precision) * ph)).collect();
        if !pts.is_empty() {
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                pts.join(" ")
            );
        }
        let ly = M + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            M + pw - 120.0,
            ly - 4.0,
            M + pw - 100.0,
            ly - 4.0
        );
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{ly}\">{} = {:.3}</text>", M + pw - 95.0, c.metric, c.ap);
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}
