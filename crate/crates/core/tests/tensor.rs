use fclip::tensor::*;
use fclip::Error;
use std::path::Path;
fn vector(values: &[f64]) -> Tensor {
    Tensor::new(vec![values.len()], values.to_vec()).unwrap().with_requires_grad(true)
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(vector(&[1.0, -2.0, 3.0]));
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn sigmoid_gradient_at_zero_is_a_quarter() {
    let mut tape = Tape::new();
    let x = tape.leaf(vector(&[0.0, 0.0]));
    let s = tape.sigmoid(x);
    let loss = tape.sum(s);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.25, 0.25]);
}

#[test]
fn backward_twice_without_reset_fails() {
    let mut tape = Tape::new();
    let x = tape.leaf(vector(&[1.0]));
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
    tape.reset();
    tape.backward(loss).unwrap();
}

#[test]
fn non_scalar_and_detached_losses_are_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(vector(&[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    let c = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let loss = tape.sum(c);
    assert!(matches!(tape.backward(loss), Err(Error::DetachedGraph)));
}

#[test]
fn shared_input_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(vector(&[3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn abs_uses_zero_subgradient_at_kink() {
    let mut tape = Tape::new();
    let x = tape.leaf(vector(&[-1.0, 0.0, 2.0]));
    let a = tape.abs(x);
    let loss = tape.sum(a);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn mismatched_shapes_are_descriptive() {
    let mut tape = Tape::new();
    let a = tape.leaf(vector(&[1.0, 2.0]));
    let b = tape.leaf(vector(&[1.0]));
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2]") && err.contains("[1]"), "{err}");
}

#[test]
fn neighbourhood_pool_matches_direct_scan() {
    let data: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64).collect();
    let t = Tensor::new(vec![1, 1, 5, 5], data.clone()).unwrap();
    let pooled = max_pool2d_forward(&t, PoolGeometry::NEIGHBORHOOD3).unwrap();
    for y in 0..5i32 {
        for x in 0..5i32 {
            let mut best = f64::NEG_INFINITY;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if (0..5).contains(&yy) && (0..5).contains(&xx) {
                        best = best.max(data[(yy * 5 + xx) as usize]);
                    }
                }
            }
            assert_eq!(pooled.data()[(y * 5 + x) as usize], best);
        }
    }
}

fn upsample(t: Tensor) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(t);
    let y = tape.upsample2x(x).unwrap();
    tape.value(y).clone()
}

#[test]
fn upsample_of_constant_is_constant() {
    let t = Tensor::full(vec![1, 2, 3, 4], 2.5);
    let up = upsample(t);
    assert_eq!(up.shape(), &[1, 2, 6, 8]);
    assert!(up.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
}

#[test]
fn upsample_interpolates_quarter_steps() {
    let t = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 4.0]).unwrap();
    let up = upsample(t);
    assert_eq!(up.data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let t = Tensor::new(vec![1, 3, 2], vec![1.0, -2.0, 0.5, 3.0, 100.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(t);
    let (p, lp) = (tape.softmax_channels(x).unwrap(), tape.log_softmax_channels(x).unwrap());
    let (p, lp) = (tape.value(p).data(), tape.value(lp).data());
    for i in 0..2 {
        let s: f64 = (0..3).map(|c| p[c * 2 + i]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    for (a, b) in p.iter().zip(lp) {
        assert!((a.ln() - b).abs() < 1e-9 || *a == 0.0);
    }
}

fn single(value: f64) -> (Parameters, ParamId) {
    let mut p = Parameters::new();
    let id = p.insert("w", Tensor::new(vec![1], vec![value]).unwrap());
    (p, id)
}

#[test]
fn first_step_moves_by_learning_rate() {
    let (mut p, id) = single(1.0);
    let mut st = AdamState::new(&p, AdamConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() });
    p.get_mut(id).accumulate_grad(&[1.0], 1.0);
    adam_step(&mut p, &mut st).unwrap();
    assert!((p.get(id).item() - 0.9).abs() < 1e-6);
    assert!(p.get(id).grad().is_none());
    assert_eq!(st.step, 1);
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let (mut p, id) = single(2.5);
    let mut st = AdamState::new(&p, AdamConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() });
    p.get_mut(id).accumulate_grad(&[0.0], 1.0);
    adam_step(&mut p, &mut st).unwrap();
    assert_eq!(p.get(id).item(), 2.5);
}

#[test]
fn descends_a_quadratic() {
    let (mut p, id) = single(0.0);
    let mut st = AdamState::new(&p, AdamConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() });
    for _ in 0..50 {
        let w = p.get(id).item();
        p.get_mut(id).accumulate_grad(&[2.0 * (w - 3.0)], 1.0);
        adam_step(&mut p, &mut st).unwrap();
    }
    assert!((p.get(id).item() - 3.0).abs() < 0.2, "w = {}", p.get(id).item());
}

#[test]
fn nan_gradient_names_the_parameter() {
    let (mut p, id) = single(1.0);
    let mut st = AdamState::new(&p, AdamConfig::default());
    p.get_mut(id).accumulate_grad(&[f64::NAN], 1.0);
    let err = adam_step(&mut p, &mut st).unwrap_err();
    assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "w"));
    assert_eq!(p.get(id).item(), 1.0);
    assert_eq!(st.step, 0);
}

#[test]
fn decoupled_decay_shrinks_weights() {
    let (mut p, id) = single(1.0);
    let mut st = AdamState::new(&p, AdamConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() });
    p.get_mut(id).accumulate_grad(&[0.0], 1.0);
    adam_step(&mut p, &mut st).unwrap();
    assert!((p.get(id).item() - 0.95).abs() < 1e-12);
}

#[test]
fn header_is_bit_exact() {
    let t = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
    let mut buf = Vec::new();
    write_tensors(&mut buf, [("ab", &t)].into_iter()).unwrap();
    let mut expected = b"FCLIPTNS".to_vec();
    expected.extend(1u32.to_le_bytes());
    expected.extend(1u64.to_le_bytes());
    expected.extend(2u32.to_le_bytes());
    expected.extend(b"ab");
    expected.extend(1u32.to_le_bytes());
    expected.extend(2u64.to_le_bytes());
    expected.extend(1.0f64.to_le_bytes());
    expected.extend((-0.5f64).to_le_bytes());
    assert_eq!(buf, expected);
}

#[test]
fn round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    let mut p = Parameters::new();
    p.insert("conv.weight", Tensor::new(vec![2, 1, 1, 2], vec![0.1, 0.2, 0.3, f64::MIN_POSITIVE]).unwrap());
    p.insert("conv.bias", Tensor::new(vec![2], vec![-1.0, 1e300]).unwrap());
    save_parameters(&path, &p).unwrap();
    assert_eq!(load_parameters(&path).unwrap(), p);
}

#[test]
fn truncated_files_are_rejected() {
    let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let mut buf = Vec::new();
    write_tensors(&mut buf, [("x", &t)].into_iter()).unwrap();
    buf.truncate(buf.len() - 4);
    assert!(read_tensors(&buf[..], Path::new("mem")).is_err());
    assert!(read_tensors(&b"NOTMAGIC"[..], Path::new("mem")).is_err());
}
