use std::f64::consts::PI;

use fclip::augment::{Expansion, GeoTransform};
use fclip::dataset::{draw_segment, generate_scene, sample_angle, GeneratorConfig};
use fclip::encoding::{decode, encode, PredictionMaps, TargetMaps};
use fclip::geometry::{struct_distance, LineSegment, Size};
use fclip::image::Image;
use fclip::losses::{total_loss, LossWeights};
use fclip::model::{BackboneConfig, BlockKind, Model, Preset};
use fclip::postprocess::{pipeline, soft_nms, struct_nms, DetectionSet, PipelineConfig};
use fclip::tensor::{ConvGeometry, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene_cfg(seed: u64, size: usize) -> GeneratorConfig {
    GeneratorConfig { seed, image_size: size, lines: (1, 8), ..GeneratorConfig::default() }
}

fn distinct_cells(segs: &[LineSegment], stride: f64) -> bool {
    let mut cells: Vec<(i64, i64)> = segs
        .iter()
        .map(|s| {
            let c = s.midpoint();
            ((c.x / stride).floor() as i64, (c.y / stride).floor() as i64)
        })
        .collect();
    cells.sort_unstable();
    cells.windows(2).all(|w| w[0] != w[1])
}

/// Every decoded segment is within 1e-9 of a distinct target segment.
fn assert_round_trip(segs: &[LineSegment], size: Size, stride: usize) -> Result<(), TestCaseError> {
    let map = Size::new(size.height / stride, size.width / stride);
    let maps = encode(segs, size, map).unwrap();
    let dets = decode(&PredictionMaps::from_targets(&maps), stride as f64, size, segs.len().max(1)).unwrap();
    let found: Vec<&LineSegment> = dets.iter().filter(|d| d.score > 0.5).collect();
    prop_assert_eq!(found.len(), segs.len());
    for g in segs {
        let best = found.iter().map(|d| endpoint_error(d, g)).fold(f64::INFINITY, f64::min);
        prop_assert!(best < 1e-9, "segment {:?} recovered with error {}", g.coords(), best);
    }
    Ok(())
}

fn endpoint_error(a: &LineSegment, b: &LineSegment) -> f64 {
    let (p, q) = (a.coords(), b.coords());
    p.iter().zip(&q).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_target_invariants(m: &TargetMaps) -> Result<(), TestCaseError> {
    let n = m.map_size.area();
    for i in 0..n {
        prop_assert_eq!(m.center[i], m.mask[i]);
        if m.mask[i] == 0.0 {
            prop_assert!(m.offset[i] == 0.0 && m.offset[n + i] == 0.0 && m.length[i] == 0.0 && m.angle[i] == 0.0);
        } else {
            prop_assert!((0.0..1.0).contains(&m.offset[i]) && (0.0..1.0).contains(&m.offset[n + i]));
            prop_assert!(m.length[i] > 0.0 && m.length[i] <= 1.0);
            prop_assert!((0.0..1.0).contains(&m.angle[i]));
        }
    }
    Ok(())
}

fn arb_segments(side: f64, max: usize) -> impl Strategy<Value = Vec<LineSegment>> {
    prop::collection::vec((0.0..side, 0.0..side, 0.0..side, 0.0..side, 0.0..1.0f64), 0..max).prop_map(|v| {
        v.into_iter()
            .filter_map(|(a, b, c, d, s)| LineSegment::from_coords(a, b, c, d).ok().map(|l| l.with_score(s)))
            .collect()
    })
}

/// Direct greedy StructNMS written against indices.
fn struct_nms_reference(segs: &[LineSegment], tau: f64) -> Vec<LineSegment> {
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.sort_by(|&a, &b| segs[b].score.total_cmp(&segs[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let mut ok = true;
        for &j in &kept {
            if struct_distance(&segs[i], &segs[j]) < tau {
                ok = false;
                break;
            }
        }
        if ok {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| segs[i]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoded_maps_satisfy_target_invariants(segs in arb_segments(31.0, 12), stride in prop::sample::select(vec![1usize, 2, 4])) {
        let size = Size::square(32);
        let maps = encode(&segs, size, Size::square(32 / stride)).unwrap();
        check_target_invariants(&maps)?;
    }

    #[test]
    fn encode_ignores_input_order(segs in arb_segments(15.0, 10), seed in any::<u64>()) {
        // A 16 px image at stride 4 forces many collisions.
        let size = Size::square(16);
        let mut shuffled = segs.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(encode(&segs, size, Size::square(4)).unwrap(), encode(&shuffled, size, Size::square(4)).unwrap());
    }

    #[test]
    fn generated_scenes_round_trip(seed in any::<u64>(), index in 0usize..1000, stride in prop::sample::select(vec![1usize, 2, 4])) {
        let scene = generate_scene(&scene_cfg(seed, 64), index).unwrap();
        assert_round_trip(&scene.segments, scene.image.size, stride)?;
    }

    #[test]
    fn augmentation_commutes_with_round_trip(seed in any::<u64>(), t in 0usize..6, k in 32usize..=64, x0 in 0usize..32, y0 in 0usize..32) {
        let scene = generate_scene(&scene_cfg(seed, 64), 0).unwrap();
        let (im, segs) = GeoTransform::ALL[t].apply(&scene.image, &scene.segments);
        let e = Expansion { k, x0: x0.min(64 - k), y0: y0.min(64 - k) };
        let (im, segs) = e.apply(&im, &segs).unwrap();
        prop_assert_eq!(segs.len(), scene.segments.len());
        prop_assume!(distinct_cells(&segs, 1.0));
        assert_round_trip(&segs, im.size, 1)?;
    }

    #[test]
    fn struct_nms_is_greedy_separated_and_idempotent(segs in arb_segments(20.0, 25), tau in 0.5..40.0f64) {
        let dets = DetectionSet::new(segs.clone(), Size::square(32));
        let out = struct_nms(&dets, tau);
        let reference = struct_nms_reference(&segs, tau);
        prop_assert_eq!(out.segments(), reference.as_slice());
        for (i, a) in out.iter().enumerate() {
            prop_assert!(segs.contains(a));
            for b in &out.segments()[..i] {
                prop_assert!(struct_distance(a, b) >= tau);
            }
        }
        prop_assert_eq!(struct_nms(&out, tau), out);
    }

    #[test]
    fn soft_nms_never_raises_and_fixes_maxima(data in prop::collection::vec(0.0..1.0f64, 48), delta in 0.0..=1.0f64) {
        let size = Size::new(6, 8);
        let out = soft_nms(&data, size, delta).unwrap();
        let twice = soft_nms(&out, size, delta).unwrap();
        for i in 0..data.len() {
            prop_assert!(out[i] <= data[i]);
            if out[i] == data[i] && data[i] > 0.0 && delta < 1.0 {
                // A kept positive cell is a local maximum and stays one.
                prop_assert_eq!(twice[i], out[i]);
            }
        }
        if delta == 0.0 {
            prop_assert_eq!(twice, out);
        }
    }

    #[test]
    fn pipeline_output_is_a_decoded_subset(data in prop::collection::vec(0.0..1.0f64, 6 * 16 * 16), tau in 0.0..20.0f64) {
        let map = Size::square(16);
        let n = map.area();
        let preds = PredictionMaps {
            map_size: map,
            center: data[..n].to_vec(),
            offset: data[n..3 * n].to_vec(),
            length: data[3 * n..4 * n].iter().map(|v| v * 0.5 + 0.05).collect(),
            angle: data[4 * n..5 * n].to_vec(),
        };
        let size = Size::square(64);
        let cfg = PipelineConfig { tau, top_k: 50, score_floor: 0.1, ..PipelineConfig::default() };
        let out = pipeline(&preds, 4.0, size, &cfg).unwrap();
        let suppressed = PredictionMaps { center: soft_nms(&preds.center, map, cfg.delta).unwrap(), ..preds.clone() };
        let all = decode(&suppressed, 4.0, size, cfg.top_k).unwrap();
        prop_assert!(out.len() <= cfg.top_k);
        for d in out.iter() {
            prop_assert!(d.score >= cfg.score_floor);
            prop_assert!(all.iter().any(|a| a == d));
        }
        prop_assert!(out.segments().windows(2).all(|w| w[0].score >= w[1].score));
    }
}

#[test]
fn uniform_angles_pass_chi_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bins = 18;
    let n = 10_000;
    let mut counts = vec![0usize; bins];
    for _ in 0..n {
        let a = sample_angle(&mut rng, 0.0);
        assert!((0.0..PI).contains(&a));
        counts[((a / PI * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let expected = n as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99th percentile of χ² with 17 degrees of freedom.
    assert!(chi2 < 33.409, "χ² = {chi2} for {counts:?}");
}

#[test]
fn axis_bias_one_concentrates_near_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let ten = 10f64.to_radians();
    let near = (0..n)
        .map(|_| sample_angle(&mut rng, 1.0))
        .filter(|&a| a < ten || a > PI - ten || (a - PI / 2.0).abs() < ten)
        .count();
    assert!(near as f64 / n as f64 > 0.95, "{near} of {n}");
}

#[test]
fn generated_scenes_satisfy_their_invariants() {
    for index in 0..200 {
        let cfg = scene_cfg(3, 64);
        let s = generate_scene(&cfg, index).unwrap();
        assert!((1..=8).contains(&s.segments.len()));
        for (i, a) in s.segments.iter().enumerate() {
            assert!(a.within(s.image.size) && a.length() >= 6.0);
            for b in &s.segments[..i] {
                assert!(struct_distance(a, b) >= 8.0);
            }
        }
        assert!(distinct_cells(&s.segments, 4.0));
    }
}

fn tiny_config(kind: BlockKind) -> BackboneConfig {
    BackboneConfig { base_channels: 4, head_channels: 4, block_kind: kind, ..BackboneConfig::preset(Preset::Hg1D2) }
}

#[test]
fn every_head_parameter_receives_gradient() {
    let scene = generate_scene(&scene_cfg(1, 32), 0).unwrap();
    let model = Model::build(tiny_config(BlockKind::Standard), 2).unwrap();
    let maps = encode(&scene.segments, scene.image.size, scene.image.size).unwrap();
    assert!(maps.positives() >= 1);
    let mut tape = Tape::new();
    let x = tape.constant(Image::batch_tensor(&[&scene.image]).unwrap());
    let out = model.forward(&mut tape, x).unwrap();
    let loss = total_loss(&mut tape, &maps, &out, &LossWeights::default()).unwrap();
    tape.backward(loss.total).unwrap();
    let grads: std::collections::HashMap<_, _> = tape.param_grads().collect();
    let mut heads = 0;
    for (name, _) in model.params().iter() {
        if !name.starts_with("head.") {
            continue;
        }
        heads += 1;
        let id = model.params().find(name).unwrap();
        let g = grads.get(&id).unwrap_or_else(|| panic!("{name} is not on the tape"));
        assert!(g.iter().all(|v| v.is_finite()), "{name}");
        assert!(g.iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
    assert_eq!(heads, 4 * 6);
}

#[test]
fn forward_is_deterministic_and_map_sized() {
    for preset in [Preset::Hg1D2, Preset::Hg1D3, Preset::Hg1] {
        let cfg = BackboneConfig { base_channels: 2, head_channels: 2, ..BackboneConfig::preset(preset) };
        let model = Model::build(cfg, 0).unwrap();
        let input = Tensor::full(vec![1, 1, 32, 32], 0.3);
        let a = model.predict(&input).unwrap();
        let b = model.predict(&input).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].map_size, Size::square(32));
    }
}

/// Peak |activation| of a 1-input-channel copy of `branch` on `image`,
/// averaged over output channels.
fn branch_peak(model: &Model, branch: &str, image: &Image, horizontal: bool) -> f64 {
    let params = model.params();
    let w = params.get(params.find(&format!("stem.block.{branch}.weight")).unwrap());
    let [o, c, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    // The same image on every input channel.
    let input: Vec<f64> = (0..c).flat_map(|_| image.data.iter().copied()).collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, c, image.size.height, image.size.width], input).unwrap());
    let wv = tape.constant(w.clone());
    let pad = if horizontal { (0, kw / 2) } else { (kh / 2, 0) };
    let y = tape.conv2d(x, wv, None, ConvGeometry { stride: (1, 1), padding: pad }).unwrap();
    let plane = image.size.area();
    let data = tape.value(y).data();
    (0..o).map(|k| data[k * plane..(k + 1) * plane].iter().fold(0.0f64, |m, v| m.max(v.abs()))).sum::<f64>() / o as f64
}

#[test]
fn line_block_branches_prefer_their_axis() {
    let size = Size::square(33);
    let line = |x1, y1, x2, y2| {
        let mut im = Image::filled(size, 0.0);
        draw_segment(&mut im, &LineSegment::from_coords(x1, y1, x2, y2).unwrap(), 1.0, 1.0);
        im
    };
    let horizontal = line(4.0, 16.0, 28.0, 16.0);
    let vertical = line(16.0, 4.0, 16.0, 28.0);
    let diagonal = line(7.5, 7.5, 24.5, 24.5);
    let (mut h_on, mut h_diag, mut v_on, mut v_diag) = (0.0, 0.0, 0.0, 0.0);
    for seed in 0..100 {
        let model =
            Model::build(BackboneConfig { base_channels: 8, ..tiny_config(BlockKind::LineBlock) }, seed).unwrap();
        h_on += branch_peak(&model, "h", &horizontal, true);
        h_diag += branch_peak(&model, "h", &diagonal, true);
        v_on += branch_peak(&model, "v", &vertical, false);
        v_diag += branch_peak(&model, "v", &diagonal, false);
    }
    assert!(h_on > 1.2 * h_diag, "1×5 branch: {h_on} vs {h_diag}");
    assert!(v_on > 1.2 * v_diag, "5×1 branch: {v_on} vs {v_diag}");
}
