//! Training loop: dataset → model → losses → AdamW with a two-step learning
//! rate schedule, CSV logs, best-checkpoint selection and exact resume.
//!
//! Files written to the output directory:
//! `run.json`, `train_log.csv`, `best.ckpt`/`best.json`, `last.ckpt`/`last.json`
//! and the resume state `state.ckpt`/`state.json`.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AugmentConfig, Batch, BatchQueue, Dataset, EpochPlan};
use crate::error::{Error, Result};
use crate::evaluation::{report, EvalConfig, EvalReport};
use crate::image::Image;
use crate::losses::{total_loss, LossValues, LossWeights};
use crate::model::{BackboneConfig, Model, Preset};
use crate::postprocess::{pipeline, DetectionSet, PipelineConfig};
use crate::tensor::{adam_step, read_tensors, write_tensors, AdamConfig, AdamState, Tape, Tensor};

pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
const RUN_FILE: &str = "run.json";
const STATE_FILE: &str = "state.json";
const MOMENTS_FILE: &str = "state.ckpt";
/// Separates the data-order stream from the weight-initialization seed.
const DATA_SEED_SALT: u64 = 0x5eed_da7a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Scales trunk and head widths of the preset.
    pub width_multiplier: f64,
    /// Overrides the head width after scaling.
    pub head_channels: Option<usize>,
    pub stride: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epoch fractions after which the learning rate drops ×0.1.
    pub lr_decay_at: Vec<f64>,
    pub loss: LossWeights,
    pub postprocess: PipelineConfig,
    pub seed: u64,
    /// Share of the data directory held out for validation.
    pub val_fraction: f64,
    /// Validate every this many epochs (and always after the last).
    pub eval_interval: usize,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Hg1D2,
            width_multiplier: 1.0,
            head_channels: None,
            stride: 1,
            epochs: 60,
            batch_size: 8,
            lr: 4e-4,
            weight_decay: 1e-4,
            lr_decay_at: vec![240.0 / 300.0, 280.0 / 300.0],
            loss: LossWeights::default(),
            postprocess: PipelineConfig::default(),
            seed: 0,
            val_fraction: 0.1,
            eval_interval: 5,
            augment: AugmentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "run config",
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn backbone(&self) -> BackboneConfig {
        let mut cfg = BackboneConfig::preset(self.preset).with_width_multiplier(self.width_multiplier);
        if let Some(h) = self.head_channels {
            cfg.head_channels = h;
        }
        cfg.stride = self.stride;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("epochs, batch_size and eval_interval must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("bad optimizer settings lr={} wd={}", self.lr, self.weight_decay)));
        }
        if self.lr_decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("lr_decay_at {:?} outside [0, 1]", self.lr_decay_at)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    /// Last epoch (1-based) before each decay; 240 and 280 for 300 epochs.
    pub fn decay_epochs(&self) -> Vec<usize> {
        self.lr_decay_at.iter().map(|f| (f * self.epochs as f64).round() as usize).collect()
    }

    /// Learning rate of a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs().iter().filter(|&&m| epoch > m).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-image loss components over the epoch.
    pub loss: LossValues,
    pub val_sap10: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainState {
    epochs_done: usize,
    adam_step: u64,
    best_sap10: Option<f64>,
    best_epoch: Option<usize>,
    history: Vec<EpochRecord>,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct TrainOptions {
    /// Continue from the state in the output directory.
    pub resume: bool,
    /// Stop after this many total epochs, leaving a resumable state.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_sap10: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DATA_SEED_SALT);
    rng.set_stream(epoch as u64);
    rng
}

/// Forward and backward over one batch; gradients (mean over images) are
/// left in the model's parameter store. Returns the mean loss values.
pub fn accumulate_batch(model: &mut Model, batch: &Batch, weights: &LossWeights) -> Result<LossValues> {
    let n = batch.targets.len();
    let shape = batch.input.shape().to_vec();
    let per_image = shape[1] * shape[2] * shape[3];
    let mut mean = LossValues::default();
    // Images are processed in chunks of the pool size and their gradients
    // summed in batch order, so results do not depend on the thread count.
    let chunk = rayon::current_num_threads().max(1);
    for lo in (0..n).step_by(chunk) {
        let hi = (lo + chunk).min(n);
        let tapes = (lo..hi)
            .into_par_iter()
            .map(|i| {
                let data = batch.input.data()[i * per_image..(i + 1) * per_image].to_vec();
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::new(vec![1, shape[1], shape[2], shape[3]], data)?);
                let out = model.forward(&mut tape, x)?;
                let terms = total_loss(&mut tape, &batch.targets[i], &out, weights)?;
                let values = LossValues::read(&tape, &terms);
                if values.total.is_finite() {
                    tape.backward(terms.total)?;
                }
                Ok((tape, values))
            })
            .collect::<Result<Vec<_>>>()?;
        for (tape, values) in tapes {
            mean.add_scaled(&values, 1.0 / n as f64);
            if values.total.is_finite() {
                tape.accumulate_into(model.params_mut(), 1.0 / n as f64);
            }
        }
    }
    Ok(mean)
}

/// Detections for every scene, in dataset order.
pub fn predict_dataset(model: &Model, dataset: &Dataset, cfg: &PipelineConfig) -> Result<Vec<DetectionSet>> {
    let stride = model.config().stride as f64;
    dataset
        .scenes
        .par_iter()
        .map(|scene| {
            let input = Image::batch_tensor(&[&scene.image])?;
            let maps = model.predict(&input)?;
            pipeline(&maps[0], stride, scene.image.size, cfg)
        })
        .collect()
}

pub fn evaluate_model(model: &Model, dataset: &Dataset, cfg: &PipelineConfig, eval: &EvalConfig) -> Result<EvalReport> {
    let preds = predict_dataset(model, dataset, &cfg.for_evaluation())?;
    let gts: Vec<_> = dataset.scenes.iter().map(|s| s.segments.clone()).collect();
    report(&preds, &gts, eval)
}

pub fn evaluate_checkpoint(
    checkpoint: &Path,
    dataset: &Dataset,
    cfg: &PipelineConfig,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    evaluate_model(&Model::load(checkpoint)?, dataset, cfg, eval)
}

fn val_sap10(model: &Model, val: &Dataset, cfg: &PipelineConfig) -> Result<f64> {
    let eval = EvalConfig { sap_thresholds: vec![10.0], heatmap: false };
    Ok(evaluate_model(model, val, cfg, &eval)?.sap_at(10.0).unwrap_or(0.0))
}

fn write_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,lr,center,offset,length,angle,total,val_sap10\n");
    for r in history {
        let l = r.loss;
        let sap = r.val_sap10.map(|v| v.to_string()).unwrap_or_default();
        out +=
            &format!("{},{},{},{},{},{},{},{}\n", r.epoch, r.lr, l.center, l.offset, l.length, l.angle, l.total, sap);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn save_moments(path: &Path, model: &Model, adam: &AdamState) -> Result<()> {
    let params = model.params();
    let tensors: Vec<(String, Tensor)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, (name, t))| {
            let m = Tensor::new(t.shape().to_vec(), adam.first_moment[i].clone()).expect("moment shape");
            let v = Tensor::new(t.shape().to_vec(), adam.second_moment[i].clone()).expect("moment shape");
            [(format!("m.{name}"), m), (format!("v.{name}"), v)]
        })
        .collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensors(BufWriter::new(file), tensors.iter().map(|(n, t)| (n.as_str(), t))).map_err(|e| Error::io(path, e))
}

fn load_moments(path: &Path, model: &Model, adam: &mut AdamState) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let tensors = read_tensors(std::io::BufReader::new(file), path)?;
    let find = |name: String, len: usize| -> Result<Vec<f64>> {
        let t = tensors.iter().find(|(n, _)| *n == name).map(|(_, t)| t);
        match t {
            Some(t) if t.numel() == len => Ok(t.data().to_vec()),
            _ => Err(Error::Format {
                what: "optimizer state",
                path: path.to_path_buf(),
                detail: format!("bad `{name}`"),
            }),
        }
    };
    for (i, (name, t)) in model.params().iter().enumerate() {
        adam.first_moment[i] = find(format!("m.{name}"), t.numel())?;
        adam.second_moment[i] = find(format!("v.{name}"), t.numel())?;
    }
    Ok(())
}

/// Trains on `train`, validating on `val` when it is non-empty.
pub fn train_on(
    run: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    out: &Path,
    opts: TrainOptions,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    run.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let image_size = train.image_size().expect("non-empty");
    let backbone = run.backbone();
    let map_size = backbone.map_size(image_size);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (best_path, last_path) = (out.join(BEST_CHECKPOINT), out.join(LAST_CHECKPOINT));
    let state_path = out.join(STATE_FILE);

    let mut model = Model::build(backbone, run.seed)?;
    let adam_cfg = AdamConfig { lr: run.lr, weight_decay: run.weight_decay, ..AdamConfig::default() };
    let mut adam = AdamState::new(model.params(), adam_cfg);
    let mut state =
        TrainState { epochs_done: 0, adam_step: 0, best_sap10: None, best_epoch: None, history: Vec::new() };
    if opts.resume {
        let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        state = serde_json::from_str(&text)?;
        let saved: RunConfig = serde_json::from_str(
            &fs::read_to_string(out.join(RUN_FILE)).map_err(|e| Error::io(out.join(RUN_FILE), e))?,
        )?;
        if saved != *run {
            return Err(Error::Config("run config differs from the one being resumed".into()));
        }
        model = Model::load(&last_path)?;
        load_moments(&out.join(MOMENTS_FILE), &model, &mut adam)?;
        adam.step = state.adam_step;
    } else {
        write_json(&out.join(RUN_FILE), run)?;
    }

    let shared = Arc::new(train.clone());
    let end = opts.stop_after.unwrap_or(run.epochs).min(run.epochs);
    for epoch in state.epochs_done + 1..=end {
        let lr = run.lr_at(epoch);
        adam.set_lr(lr);
        let plan = EpochPlan::new(train.len(), run.batch_size, &mut epoch_rng(run.seed, epoch))?;
        let n_batches = plan.num_batches();
        let mut loss = LossValues::default();
        for (b, batch) in BatchQueue::spawn(Arc::clone(&shared), plan, map_size, run.augment).enumerate() {
            let batch = batch?;
            let values = accumulate_batch(&mut model, &batch, &run.loss)?;
            if !values.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            adam_step(model.params_mut(), &mut adam)?;
            loss.add_scaled(&values, 1.0 / n_batches as f64);
        }
        let validate = !val.is_empty() && (epoch % run.eval_interval == 0 || epoch == run.epochs);
        let val_sap10 = if validate { Some(val_sap10(&model, val, &run.postprocess)?) } else { None };
        let record = EpochRecord { epoch, lr, loss, val_sap10 };
        model.save(&last_path)?;
        let improved = match (val_sap10, state.best_sap10) {
            (Some(v), Some(best)) => v > best,
            (Some(_), None) => true,
            (None, _) => val.is_empty(),
        };
        if improved {
            model.save(&best_path)?;
            state.best_sap10 = val_sap10;
            state.best_epoch = Some(epoch);
        }
        state.history.push(record);
        state.epochs_done = epoch;
        state.adam_step = adam.step;
        save_moments(&out.join(MOMENTS_FILE), &model, &adam)?;
        write_json(&state_path, &state)?;
        write_log(&out.join(LOG_FILE), &state.history)?;
        on_epoch(&record);
    }
    Ok(TrainSummary {
        history: state.history,
        best_sap10: state.best_sap10,
        best_epoch: state.best_epoch,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

/// Loads `data_dir`, splits off the validation share and trains.
pub fn train(
    run: &RunConfig,
    data_dir: &Path,
    out: &Path,
    opts: TrainOptions,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    run.validate()?;
    let (train, val) = crate::dataset::load(data_dir)?.split(run.val_fraction);
    train_on(run, &train, &val, out, opts, on_epoch)
}
