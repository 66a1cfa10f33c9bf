use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use fclip::dataset::{self, angle_histogram, GeneratorConfig};
use fclip::encoding::{encode, PredictionMaps};
use fclip::evaluation::{emit_csv, emit_json, emit_svg, sap, EvalConfig};
use fclip::geometry::LineSegment;
use fclip::image::Image;
use fclip::model::Model;
use fclip::postprocess::{pipeline, soft_nms, struct_nms_eval_frame, PipelineConfig};
use fclip::trainer::{self, evaluate_checkpoint, predict_dataset, RunConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "fclip", version, about = "Fully convolutional line segment detection")]
struct Cli {
    /// Worker threads (default: FCLIP_THREADS, else all logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Segments per image, as MIN-MAX or a single count.
        #[arg(long, default_value = "3-8", value_parser = parse_range)]
        lines: (usize, usize),
        #[arg(long, default_value_t = 0.8)]
        axis_bias: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue an interrupted run in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Detect segments in one PGM image; prints JSON lines.
    Infer {
        #[arg(long, required_unless_present = "oracle_maps")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        delta: f64,
        #[arg(long, default_value_t = 2.0)]
        tau: f64,
        #[arg(long, default_value_t = 300)]
        k: usize,
        #[arg(long, default_value_t = 0.25)]
        score_floor: f64,
        /// Test hook: replace the network output by maps encoded from the
        /// image's ground truth in this dataset directory.
        #[arg(long, hide = true)]
        oracle_maps: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes report.json, pr.csv and pr.svg.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-stage latency; CSV on stdout, table on stderr.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        repeat: usize,
    },
    /// Angle histogram of a dataset's annotations.
    Hist {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare NMS variants on a trained checkpoint; CSV on stdout.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["nms"])]
        grid: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    match s.split_once('-') {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

const HIST_BINS: usize = 36;

#[derive(Serialize)]
struct Detection {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("FCLIP_THREADS") {
        Ok(v) => Ok(Some(v.parse().with_context(|| format!("FCLIP_THREADS={v} is not a count"))?)),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Gen { seed, n, size, lines, axis_bias, out } => {
            let cfg = GeneratorConfig { seed, n_images: n, image_size: size, lines, axis_bias, ..Default::default() };
            let data = dataset::generate(&cfg)?;
            dataset::save(&data, &out, Some(&cfg))?;
            eprintln!("wrote {} images to {}", data.len(), out.display());
        }
        Command::Train { config, data, out, resume } => {
            let run = RunConfig::from_file(&config)?;
            let start = Instant::now();
            let summary = trainer::train(&run, &data, &out, TrainOptions { resume, stop_after: None }, &mut |r| {
                let sap = r.val_sap10.map(|v| format!(" val sAP10 {v:.4}")).unwrap_or_default();
                eprintln!(
                    "epoch {:>3} lr {:.1e} loss {:.5} (C {:.5} O {:.5} l {:.5} a {:.5}){sap} [{:.0}s]",
                    r.epoch,
                    r.lr,
                    r.loss.total,
                    r.loss.center,
                    r.loss.offset,
                    r.loss.length,
                    r.loss.angle,
                    start.elapsed().as_secs_f64()
                );
            })?;
            match (summary.best_epoch, summary.best_sap10) {
                (Some(e), Some(s)) => eprintln!("best val sAP10 {s:.4} at epoch {e}"),
                _ => eprintln!("no validation split; best checkpoint is the last epoch"),
            }
        }
        Command::Infer { ckpt, image, delta, tau, k, score_floor, oracle_maps } => {
            let cfg = PipelineConfig { delta, tau, top_k: k, score_floor, ..PipelineConfig::default() };
            infer(ckpt.as_deref(), &image, &cfg, oracle_maps.as_deref())?;
        }
        Command::Eval { ckpt, data, out } => {
            let ds = dataset::load(&data)?;
            let report = evaluate_checkpoint(&ckpt, &ds, &PipelineConfig::default(), &EvalConfig::default())?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            emit_json(&report, &out.join("report.json"))?;
            emit_csv(&report, &out.join("pr.csv"))?;
            emit_svg(&report, &out.join("pr.svg"))?;
            for (name, v) in &report.sap {
                println!("{name} {v:.4}");
            }
            if let Some(h) = report.ap_heat {
                println!("APH {h:.4}");
            }
        }
        Command::Bench { ckpt, data, batch, repeat } => bench(&ckpt, &data, batch, repeat)?,
        Command::Hist { data, out } => {
            let ds = dataset::load(&data)?;
            let counts = angle_histogram(&ds.angles(), HIST_BINS);
            let total: usize = counts.iter().sum();
            let mut csv = String::from("bin_start_deg,bin_end_deg,count,fraction\n");
            let width = 180.0 / HIST_BINS as f64;
            for (i, c) in counts.iter().enumerate() {
                let frac = if total == 0 { 0.0 } else { *c as f64 / total as f64 };
                csv += &format!("{},{},{c},{frac}\n", i as f64 * width, (i + 1) as f64 * width);
            }
            fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Ablate { config, grid: _, ckpt, data } => ablate(&config, &ckpt, &data)?,
    }
    Ok(())
}

fn infer(ckpt: Option<&Path>, image: &Path, cfg: &PipelineConfig, oracle: Option<&Path>) -> Result<()> {
    let im = Image::read_pgm(image)?;
    let (maps, stride) = match oracle {
        Some(dir) => {
            let name = image.file_name().and_then(|n| n.to_str()).context("image path has no file name")?;
            let annotations = dataset::read_annotations(dir)?;
            let segs =
                annotations.get(name).with_context(|| format!("{name} is not annotated in {}", dir.display()))?;
            let stride = match ckpt {
                Some(c) => Model::load(c)?.config().stride,
                None => 1,
            };
            let map_size = fclip::geometry::Size::new(im.size.height / stride, im.size.width / stride);
            (PredictionMaps::from_targets(&encode(segs, im.size, map_size)?), stride)
        }
        None => {
            let model = Model::load(ckpt.context("--ckpt is required")?)?;
            let maps = model.predict(&Image::batch_tensor(&[&im])?)?;
            (maps.into_iter().next().context("empty prediction")?, model.config().stride)
        }
    };
    let dets = pipeline(&maps, stride as f64, im.size, cfg)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for d in dets.iter() {
        let [x1, y1, x2, y2] = d.coords();
        writeln!(out, "{}", serde_json::to_string(&Detection { x1, y1, x2, y2, score: d.score })?)?;
    }
    Ok(())
}

fn bench(ckpt: &Path, data: &Path, batch: usize, repeat: usize) -> Result<()> {
    if batch == 0 || repeat == 0 {
        bail!("--batch and --repeat must be positive");
    }
    let model = Model::load(ckpt)?;
    let ds = dataset::load(data)?;
    if ds.is_empty() {
        bail!("{} holds no images", data.display());
    }
    let cfg = PipelineConfig::default();
    let stride = model.config().stride as f64;
    let images: Vec<&Image> = (0..batch).map(|i| &ds.scenes[i % ds.len()].image).collect();
    let input = Image::batch_tensor(&images)?;
    let size = images[0].size;
    let mut totals: BTreeMap<&str, f64> = BTreeMap::new();
    let mut add = |stage: &'static str, t: Instant| *totals.entry(stage).or_default() += t.elapsed().as_secs_f64();
    for _ in 0..repeat {
        let t = Instant::now();
        let maps = model.predict(&input)?;
        add("1 forward", t);
        for m in &maps {
            let t = Instant::now();
            let center = soft_nms(&m.center, m.map_size, cfg.delta)?;
            add("2 soft_nms", t);
            let t = Instant::now();
            let suppressed = PredictionMaps { center, ..m.clone() };
            let dets = fclip::encoding::decode(&suppressed, stride, size, cfg.top_k)?.above(cfg.score_floor);
            add("3 decode", t);
            let t = Instant::now();
            let kept = struct_nms_eval_frame(&dets, cfg.tau);
            add("4 struct_nms", t);
            std::hint::black_box(kept);
        }
    }
    let images_run = (batch * repeat) as f64;
    let total: f64 = totals.values().sum();
    println!("stage,batch,ms_per_batch,ms_per_image,images_per_s");
    eprintln!("{:<12} {:>14} {:>14} {:>10}", "stage", "ms/batch", "ms/image", "img/s");
    for (stage, secs) in
        totals.iter().map(|(k, v)| (k.split_once(' ').map_or(*k, |p| p.1), *v)).chain([("total", total)])
    {
        let per_image = secs / images_run * 1e3;
        let per_batch = secs / repeat as f64 * 1e3;
        println!("{stage},{batch},{per_batch},{per_image},{}", 1e3 / per_image);
        eprintln!("{stage:<12} {per_batch:>14.3} {per_image:>14.3} {:>10.1}", 1e3 / per_image);
    }
    Ok(())
}

fn ablate(config: &Path, ckpt: &Path, data: &Path) -> Result<()> {
    let run = RunConfig::from_file(config)?;
    let model = Model::load(ckpt)?;
    let ds = dataset::load(data)?;
    let gts: Vec<Vec<LineSegment>> = ds.scenes.iter().map(|s| s.segments.clone()).collect();
    let base = run.postprocess.for_evaluation();
    let rows = [
        ("hard_nms", PipelineConfig { delta: 0.0, tau: 0.0, ..base }),
        ("soft_nms", PipelineConfig { tau: 0.0, ..base }),
        ("hard_nms+struct_nms", PipelineConfig { delta: 0.0, ..base }),
        ("soft_nms+struct_nms", base),
    ];
    println!("variant,delta,tau,sAP5,sAP10,sAP15");
    eprintln!("{:<22} {:>5} {:>5} {:>7} {:>7} {:>7}", "variant", "delta", "tau", "sAP5", "sAP10", "sAP15");
    for (name, cfg) in rows {
        let preds = predict_dataset(&model, &ds, &cfg)?;
        let s: Vec<f64> =
            [5.0, 10.0, 15.0].iter().map(|&e| sap(&preds, &gts, e).map(|r| r.ap)).collect::<Result<_, _>>()?;
        println!("{name},{},{},{},{},{}", cfg.delta, cfg.tau, s[0], s[1], s[2]);
        eprintln!(
            "{name:<22} {:>5} {:>5} {:>7.2} {:>7.2} {:>7.2}",
            cfg.delta,
            cfg.tau,
            100.0 * s[0],
            100.0 * s[1],
            100.0 * s[2]
        );
    }
    Ok(())
}
