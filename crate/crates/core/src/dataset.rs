//! Synthetic wireframe scenes, dataset files, and training batches.
//!
//! On disk a dataset is a directory of 8-bit binary PGM images, one
//! `annotations.jsonl` file with a `{"image": name, "lines": [[x1, y1, x2, y2], ...]}`
//! record per image, and an optional `manifest.json`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{random_expand, random_geo};
use crate::encoding::{encode, TargetMaps};
use crate::error::{Error, Result};
use crate::geometry::{fold_angle, struct_distance, LineSegment, Point, Size};
use crate::image::Image;
use crate::tensor::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Spread of near-axis angles, in degrees.
const AXIS_SIGMA_DEG: f64 = 5.0;
const LINE_ATTEMPTS: usize = 2000;
const SCENE_ATTEMPTS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub name: String,
    pub image: Image,
    pub segments: Vec<LineSegment>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn image_size(&self) -> Option<Size> {
        self.scenes.first().map(|s| s.image.size)
    }

    /// Splits off the last `fraction` of scenes.
    pub fn split(mut self, fraction: f64) -> (Dataset, Dataset) {
        let n_tail = ((self.scenes.len() as f64) * fraction).round() as usize;
        let tail = self.scenes.split_off(self.scenes.len() - n_tail.min(self.scenes.len()));
        (self, Dataset { scenes: tail })
    }

    /// Angles of every annotated segment, in [0, π).
    pub fn angles(&self) -> Vec<f64> {
        self.scenes.iter().flat_map(|s| s.segments.iter()).filter_map(|s| s.to_cla().ok().map(|r| r.angle)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_images: usize,
    pub image_size: usize,
    /// Inclusive range of segments per scene.
    pub lines: (usize, usize),
    /// Probability that a segment's angle is drawn near 0 or π/2.
    pub axis_bias: f64,
    pub min_length: f64,
    /// Upper length bound as a fraction of the image side.
    pub max_length_fraction: f64,
    /// Lower bound on pairwise structural distance between segments.
    pub min_separation: f64,
    /// Centers fall in distinct cells of this size, so encodings up to this
    /// stride never collide.
    pub center_cell: usize,
    pub line_width: f64,
    pub noise_sigma: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 100,
            image_size: 64,
            lines: (3, 8),
            axis_bias: 0.8,
            min_length: 6.0,
            max_length_fraction: 0.6,
            min_separation: 8.0,
            center_cell: 4,
            line_width: 1.5,
            noise_sigma: 0.05,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.axis_bias) {
            return Err(Error::Config(format!("axis_bias {} outside [0, 1]", self.axis_bias)));
        }
        if self.lines.0 > self.lines.1 {
            return Err(Error::Config(format!("empty line range {:?}", self.lines)));
        }
        if self.image_size < 8 || self.center_cell == 0 {
            return Err(Error::Config("image_size must be at least 8 and center_cell positive".into()));
        }
        let max_len = self.max_length_fraction * (self.image_size - 1) as f64;
        if !(self.min_length > 0.0 && self.min_length <= max_len) {
            return Err(Error::Config(format!("length range [{}, {max_len}] is empty", self.min_length)));
        }
        Ok(())
    }
}

/// Angle in [0, π): near an axis with probability `axis_bias`, else uniform.
pub fn sample_angle<R: Rng + ?Sized>(rng: &mut R, axis_bias: f64) -> f64 {
    if rng.random::<f64>() < axis_bias {
        let base = if rng.random::<bool>() { 0.0 } else { PI / 2.0 };
        let jitter = Normal::new(0.0, AXIS_SIGMA_DEG.to_radians()).expect("positive sigma");
        fold_angle(base + jitter.sample(rng))
    } else {
        rng.random_range(0.0..PI)
    }
}

fn sample_segment<R: Rng + ?Sized>(rng: &mut R, cfg: &GeneratorConfig) -> Option<LineSegment> {
    let side = (cfg.image_size - 1) as f64;
    let angle = sample_angle(rng, cfg.axis_bias);
    let length = rng.random_range(cfg.min_length..=cfg.max_length_fraction * side);
    let (dx, dy) = (0.5 * length * angle.cos(), 0.5 * length * angle.sin());
    let (hx, hy) = (dx.abs(), dy.abs());
    if 2.0 * hx > side || 2.0 * hy > side {
        return None;
    }
    let cx = rng.random_range(hx..=side - hx);
    let cy = rng.random_range(hy..=side - hy);
    LineSegment::new(Point::new(cx - dx, cy - dy), Point::new(cx + dx, cy + dy)).ok()
}

fn center_cell(seg: &LineSegment, cell: usize) -> (usize, usize) {
    let c = seg.midpoint();
    ((c.x / cell as f64).floor() as usize, (c.y / cell as f64).floor() as usize)
}

fn place_segments<R: Rng + ?Sized>(rng: &mut R, cfg: &GeneratorConfig, m: usize) -> Option<Vec<LineSegment>> {
    let size = Size::square(cfg.image_size);
    let mut segs: Vec<LineSegment> = Vec::with_capacity(m);
    let mut attempts = 0;
    while segs.len() < m {
        attempts += 1;
        if attempts > LINE_ATTEMPTS {
            return None;
        }
        let Some(s) = sample_segment(rng, cfg) else { continue };
        let cell = center_cell(&s, cfg.center_cell);
        let ok = s.within(size)
            && segs
                .iter()
                .all(|o| struct_distance(o, &s) >= cfg.min_separation && center_cell(o, cfg.center_cell) != cell);
        if ok {
            segs.push(s);
        }
    }
    Some(segs)
}

/// Anti-aliased segment of width `width`: pixel coverage is the product of
/// the lateral overlap of the pixel with the stroke and the longitudinal
/// overlap with the segment's extent. Composites `intensity` over `image`.
pub fn draw_segment(image: &mut Image, seg: &LineSegment, width: f64, intensity: f64) {
    let (a, b) = (seg.left(), seg.right());
    let len = seg.length();
    let (ux, uy) = ((b.x - a.x) / len, (b.y - a.y) / len);
    let reach = 0.5 * width + 1.0;
    let (w, h) = (image.size.width as f64, image.size.height as f64);
    let x0 = (a.x.min(b.x) - reach).floor().max(0.0) as usize;
    let x1 = (a.x.max(b.x) + reach).ceil().min(w - 1.0) as usize;
    let y0 = (a.y.min(b.y) - reach).floor().max(0.0) as usize;
    let y1 = (a.y.max(b.y) + reach).ceil().min(h - 1.0) as usize;
    let overlap = |lo: f64, hi: f64, c: f64| ((c + 0.5).min(hi) - (c - 0.5).max(lo)).clamp(0.0, 1.0);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 - a.x, y as f64 - a.y);
            let t = px * ux + py * uy;
            let d = -px * uy + py * ux;
            let cov = overlap(-0.5 * width, 0.5 * width, d) * overlap(0.0, len, t);
            if cov > 0.0 {
                let v = &mut image.data[y * image.size.width + x];
                *v = *v * (1.0 - cov) + intensity * cov;
            }
        }
    }
}

/// Renders one scene from its own RNG stream.
pub fn generate_scene(cfg: &GeneratorConfig, index: usize) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let m = rng.random_range(cfg.lines.0..=cfg.lines.1);
    let segments = (0..SCENE_ATTEMPTS).find_map(|_| place_segments(&mut rng, cfg, m)).ok_or_else(|| {
        Error::Infeasible(format!(
            "could not place {m} segments with separation {} in a {}px image",
            cfg.min_separation, cfg.image_size
        ))
    })?;
    let size = Size::square(cfg.image_size);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut image = Image::new(size, (0..size.area()).map(|_| 0.2 + noise.sample(&mut rng)).collect())?;
    for s in &segments {
        let intensity = rng.random_range(0.6..=1.0);
        draw_segment(&mut image, s, cfg.line_width, intensity);
    }
    for v in &mut image.data {
        *v = v.clamp(0.0, 1.0);
    }
    let scene = Scene { name: format!("img_{index:05}.pgm"), image, segments };
    check_scene(&scene, cfg)?;
    Ok(scene)
}

fn check_scene(scene: &Scene, cfg: &GeneratorConfig) -> Result<()> {
    for (i, s) in scene.segments.iter().enumerate() {
        let ok = s.within(scene.image.size)
            && s.length() >= cfg.min_length
            && scene.segments[..i].iter().all(|o| struct_distance(o, s) >= cfg.min_separation);
        if !ok {
            return Err(Error::Infeasible(format!("scene {} violates its invariants", scene.name)));
        }
    }
    Ok(())
}

/// Generates `cfg.n_images` scenes in parallel; the result depends only on `cfg`.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let scenes = (0..cfg.n_images).into_par_iter().map(|i| generate_scene(cfg, i)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { scenes })
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    image: String,
    lines: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub image_size: Option<Size>,
    pub total_lines: usize,
    pub generator: Option<GeneratorConfig>,
}

pub fn save(dataset: &Dataset, dir: &Path, generator: Option<&GeneratorConfig>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    dataset.scenes.par_iter().try_for_each(|s| s.image.write_pgm(&dir.join(&s.name)))?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let mut out = String::new();
    for s in &dataset.scenes {
        let rec = AnnotationRecord { image: s.name.clone(), lines: s.segments.iter().map(|l| l.coords()).collect() };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    fs::write(&ann_path, out).map_err(|e| Error::io(&ann_path, e))?;
    let manifest = Manifest {
        count: dataset.len(),
        image_size: dataset.image_size(),
        total_lines: dataset.scenes.iter().map(|s| s.segments.len()).sum(),
        generator: generator.cloned(),
    };
    let man_path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&man_path).map_err(|e| Error::io(&man_path, e))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes()).map_err(|e| Error::io(&man_path, e))
}

/// Reads the annotation records of a dataset directory, keyed by image name.
pub fn read_annotations(dir: &Path) -> Result<BTreeMap<String, Vec<LineSegment>>> {
    let path = dir.join(ANNOTATIONS_FILE);
    let mut map = BTreeMap::new();
    if !path.exists() {
        return Ok(map);
    }
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    for (no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Format { what: "annotations", path: path.clone(), detail };
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", no + 1)))?;
        let segs = rec
            .lines
            .iter()
            .map(|&[x1, y1, x2, y2]| LineSegment::from_coords(x1, y1, x2, y2))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| bad(format!("line {} ({}): {e}", no + 1, rec.image)))?;
        map.insert(rec.image, segs);
    }
    Ok(map)
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every PGM image of `dir` with its annotation. Segments must have
/// positive length and lie inside the image; all images must share one size.
pub fn load(dir: &Path) -> Result<Dataset> {
    let mut annotations = read_annotations(dir)?;
    let files = pgm_files(dir)?;
    let mut scenes = Vec::with_capacity(files.len());
    for path in &files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let segments = annotations.remove(&name).ok_or_else(|| Error::MissingAnnotation(path.clone()))?;
        scenes.push((name, path.clone(), segments));
    }
    if let Some(name) = annotations.keys().next() {
        return Err(Error::io(
            dir.join(name),
            std::io::Error::new(std::io::ErrorKind::NotFound, "annotated image is missing"),
        ));
    }
    let scenes = scenes
        .into_par_iter()
        .map(|(name, path, segments)| {
            let image = Image::read_pgm(&path)?;
            if let Some(s) = segments.iter().find(|s| !s.within(image.size)) {
                return Err(Error::Format {
                    what: "annotations",
                    path: path.clone(),
                    detail: format!(
                        "segment {:?} lies outside the {}x{} image",
                        s.coords(),
                        image.size.width,
                        image.size.height
                    ),
                });
            }
            Ok(Scene { name, image, segments })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = scenes.first() {
        if let Some(odd) = scenes.iter().find(|s| s.image.size != first.image.size) {
            return Err(Error::Format {
                what: "dataset",
                path: dir.join(&odd.name),
                detail: format!("size {:?} differs from {:?}", odd.image.size, first.image.size),
            });
        }
    }
    Ok(Dataset { scenes })
}

/// Counts of segment angles in `bins` equal bins over [0°, 180°).
pub fn angle_histogram(angles: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &a in angles {
        let b = ((a / PI) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Probability of the shrink-into-canvas step.
    pub expand_probability: f64,
    /// Range of k / image side for the expansion.
    pub expand_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, expand_probability: 0.5, expand_range: (0.5, 1.0) }
    }
}

pub struct Batch {
    /// Dataset indices of the batch members.
    pub indices: Vec<usize>,
    pub input: Tensor,
    pub targets: Vec<TargetMaps>,
}

/// Builds one training sample; `seed` drives its augmentation.
pub fn prepare_sample(scene: &Scene, map_size: Size, aug: &AugmentConfig, seed: u64) -> Result<(Image, TargetMaps)> {
    let (image, segments) = if aug.enabled {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (im, segs) = random_geo(&scene.image, &scene.segments, &mut rng);
        if rng.random::<f64>() < aug.expand_probability {
            random_expand(&im, &segs, &mut rng, aug.expand_range)?
        } else {
            (im, segs)
        }
    } else {
        (scene.image.clone(), scene.segments.clone())
    };
    let maps = encode(&segments, image.size, map_size)?;
    Ok((image, maps))
}

/// Per-epoch batch plan: a shuffled order and one augmentation seed per sample.
#[derive(Clone, Debug)]
pub struct EpochPlan {
    pub order: Vec<usize>,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
}

impl EpochPlan {
    pub fn new<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let seeds = (0..n).map(|_| rng.random()).collect();
        Ok(Self { order, seeds, batch_size })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn make_batch(&self, dataset: &Dataset, b: usize, map_size: Size, aug: &AugmentConfig) -> Result<Batch> {
        let lo = b * self.batch_size;
        let hi = (lo + self.batch_size).min(self.order.len());
        let samples = (lo..hi)
            .into_par_iter()
            .map(|j| prepare_sample(&dataset.scenes[self.order[j]], map_size, aug, self.seeds[j]))
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<&Image> = samples.iter().map(|(im, _)| im).collect();
        let input = Image::batch_tensor(&images)?;
        let targets = samples.into_iter().map(|(_, t)| t).collect();
        Ok(Batch { indices: self.order[lo..hi].to_vec(), input, targets })
    }
}

/// Batches of one epoch in order, the final short batch included.
pub fn batches<'a, R: Rng + ?Sized>(
    dataset: &'a Dataset,
    batch_size: usize,
    map_size: Size,
    aug: AugmentConfig,
    rng: &mut R,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let plan = EpochPlan::new(dataset.len(), batch_size, rng)?;
    Ok((0..plan.num_batches()).map(move |b| plan.make_batch(dataset, b, map_size, &aug)))
}

/// Background producer feeding a bounded queue of two batches.
pub struct BatchQueue {
    rx: Receiver<Result<Batch>>,
    handle: Option<JoinHandle<()>>,
}

impl BatchQueue {
    pub const CAPACITY: usize = 2;

    pub fn spawn(dataset: Arc<Dataset>, plan: EpochPlan, map_size: Size, aug: AugmentConfig) -> Self {
        let (tx, rx) = sync_channel(Self::CAPACITY);
        let handle = std::thread::spawn(move || {
            for b in 0..plan.num_batches() {
                let batch = plan.make_batch(&dataset, b, map_size, &aug);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        Self { rx, handle: Some(handle) }
    }
}

impl Iterator for BatchQueue {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for BatchQueue {
    fn drop(&mut self) {
        // Dropping the receiver makes a producer blocked on a full queue exit.
        if let Some(h) = self.handle.take() {
            drop(std::mem::replace(&mut self.rx, sync_channel(0).1));
            let _ = h.join();
        }
    }
}
