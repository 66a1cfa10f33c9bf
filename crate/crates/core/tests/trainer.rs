use fclip::dataset::*;
use fclip::geometry::*;
use fclip::model::*;
use fclip::tensor::*;
use fclip::trainer::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;

fn tiny_run() -> RunConfig {
    RunConfig {
        width_multiplier: 0.125,
        epochs: 3,
        batch_size: 4,
        lr: 2e-3,
        eval_interval: 1,
        augment: AugmentConfig { enabled: true, ..AugmentConfig::default() },
        ..RunConfig::default()
    }
}

fn tiny_data(n: usize, seed: u64) -> Dataset {
    generate(&GeneratorConfig { seed, n_images: n, image_size: 32, lines: (2, 4), ..Default::default() }).unwrap()
}

#[test]
fn schedule_scales_with_epoch_count() {
    let long = RunConfig { epochs: 300, ..RunConfig::default() };
    assert_eq!(long.decay_epochs(), vec![240, 280]);
    let desk = RunConfig::default();
    assert_eq!(desk.decay_epochs(), vec![48, 56]);
    assert_eq!(desk.lr, 4e-4);
    assert_eq!(desk.lr_at(48), 4e-4);
    assert!((desk.lr_at(49) - 4e-5).abs() < 1e-20);
    assert!((desk.lr_at(60) - 4e-6).abs() < 1e-20);
}

#[test]
fn unknown_config_fields_are_rejected() {
    assert!(serde_json::from_str::<RunConfig>(r#"{"epochs": 3, "lr": 1e-3}"#).is_ok());
    assert!(serde_json::from_str::<RunConfig>(r#"{"epoch": 3}"#).is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.json");
    fs::write(&p, r#"{"batch_size": 0}"#).unwrap();
    assert!(RunConfig::from_file(&p).is_err());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let run = tiny_run();
    let data = tiny_data(12, 3);
    let (train, val) = data.split(0.25);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let full = train_on(&run, &train, &val, a.path(), TrainOptions::default(), &mut |_| {}).unwrap();
    let stop = TrainOptions { stop_after: Some(1), ..Default::default() };
    train_on(&run, &train, &val, b.path(), stop, &mut |_| {}).unwrap();
    let resumed =
        train_on(&run, &train, &val, b.path(), TrainOptions { resume: true, ..Default::default() }, &mut |_| {})
            .unwrap();
    assert_eq!(full.history, resumed.history);
    for name in [LAST_CHECKPOINT, BEST_CHECKPOINT] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
    assert_eq!(fs::read(a.path().join(LOG_FILE)).unwrap(), fs::read(b.path().join(LOG_FILE)).unwrap());
}

#[test]
fn log_has_one_row_per_epoch() {
    let run = RunConfig { epochs: 2, ..tiny_run() };
    let dir = tempfile::tempdir().unwrap();
    let mut seen = Vec::new();
    let s = train_on(&run, &tiny_data(8, 1), &Dataset::default(), dir.path(), TrainOptions::default(), &mut |r| {
        seen.push(r.epoch)
    })
    .unwrap();
    assert_eq!(seen, vec![1, 2]);
    assert_eq!(s.best_epoch, Some(2));
    let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,lr,center,offset,length,angle,total,val_sap10");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,0.002,") && lines[1].ends_with(','));
    assert!(Model::load(&s.best_checkpoint).is_ok());
}

#[test]
fn overfits_four_images() {
    let data = tiny_data(4, 9);
    let run = RunConfig { augment: AugmentConfig { enabled: false, ..AugmentConfig::default() }, ..tiny_run() };
    let mut model = Model::build(run.backbone(), 0).unwrap();
    let mut adam = AdamState::new(model.params(), AdamConfig { lr: 2e-3, ..AdamConfig::default() });
    let plan = EpochPlan::new(4, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let batch = plan.make_batch(&data, 0, Size::square(32), &run.augment).unwrap();
    let initial = accumulate_batch(&mut model, &batch, &run.loss).unwrap().total;
    adam_step(model.params_mut(), &mut adam).unwrap();
    let mut last = initial;
    for _ in 1..500 {
        last = accumulate_batch(&mut model, &batch, &run.loss).unwrap().total;
        adam_step(model.params_mut(), &mut adam).unwrap();
        if last < 0.01 * initial {
            break;
        }
    }
    assert!(last < 0.01 * initial, "loss {initial} -> {last}");
}
