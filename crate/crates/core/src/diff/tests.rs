use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    // keep away from the relu / clamp kinks
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.5);
        if rng.gen_bool(0.5) { v } else { -v }
    })
    .unwrap()
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(0.2..2.0)).unwrap()
}

/// Random linear functional `sum(y * w)` so every output coordinate matters.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = random_tensor(&mut rng, tape.value(y).shape());
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check<F>(name: &str, params: &[Tensor], seed: u64, mut f: F)
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, Error>,
{
    let report = finite_difference_check(
        |tape, vars| {
            let y = f(tape, vars)?;
            probe(tape, y, seed)
        },
        params,
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{name}: max relative error {}", report.max_rel_error);
}

fn check_all_primitives(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..4);
    let k = rng.gen_range(1..4);
    let n = rng.gen_range(1..4);
    let a = random_tensor(&mut rng, &[m, k]);
    let b = random_tensor(&mut rng, &[k, n]);
    let c = random_tensor(&mut rng, &[m, k]);
    let p = positive_tensor(&mut rng, &[m, k]);

    check("matmul", &[a.clone(), b.clone()], seed, |t, v| t.matmul(v[0], v[1]));
    check("transpose", &[a.clone()], seed, |t, v| t.transpose(v[0]));
    check("add", &[a.clone(), c.clone()], seed, |t, v| t.add(v[0], v[1]));
    check("sub", &[a.clone(), c.clone()], seed, |t, v| t.sub(v[0], v[1]));
    check("mul", &[a.clone(), c.clone()], seed, |t, v| t.mul(v[0], v[1]));
    check("scale", &[a.clone()], seed, |t, v| t.scale(v[0], -1.7));
    check("add_scalar", &[a.clone()], seed, |t, v| t.add_scalar(v[0], 0.3));
    check("tanh", &[a.clone()], seed, |t, v| t.tanh(v[0]));
    check("sigmoid", &[a.clone()], seed, |t, v| t.sigmoid(v[0]));
    check("relu", &[a.clone()], seed, |t, v| t.relu(v[0]));
    check("log", &[p.clone()], seed, |t, v| t.log(v[0]));
    check("exp", &[a.clone()], seed, |t, v| t.exp(v[0]));
    check("clamp_min", &[a.clone()], seed, |t, v| t.clamp_min(v[0], 0.0));
    check("softmax_lastdim", &[a.clone()], seed, |t, v| t.softmax_lastdim(v[0]));
    check("sum_axis", &[a.clone()], seed, |t, v| t.sum_axis(v[0], 1));
    check("mean_axis", &[a.clone()], seed, |t, v| t.mean_axis(v[0], 0));
    check("reshape", &[a.clone()], seed, |t, v| t.reshape(v[0], &[m * k]));
    check("concat", &[a.clone(), c.clone()], seed, |t, v| t.concat(&[v[0], v[1]], 1));
    check("slice", &[a.clone()], seed, |t, v| t.slice(v[0], 1, k - 1, 1));
    check("l2_normalize_eps", &[a.clone()], seed, |t, v| t.l2_normalize_eps(v[0], 1e-12));

    let row = random_tensor(&mut rng, &[k]);
    check("broadcast_mul", &[a.clone(), row.clone()], seed, |t, v| t.broadcast_mul(v[0], v[1], &[0]));
    check("broadcast_add", &[a.clone(), row.clone()], seed, |t, v| t.broadcast_add(v[0], v[1], &[0]));
    check("expand", &[row.clone()], seed, |t, v| t.expand(v[0], &[m, k], &[0]));

    // fresh generator per evaluation, so every evaluation sees the same mask
    check("dropout", &[a.clone()], seed, |t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        t.dropout(v[0], 0.3, &mut r)
    });

    let bn_in = random_tensor(&mut rng, &[3, 2, 2]);
    check("batch_norm", &[bn_in], seed, |t, v| Ok(t.batch_norm(v[0], 1e-5)?.0));

    let (h, w, ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(1..3));
    let x2 = random_tensor(&mut rng, &[2, h, w, ci]);
    let k2 = random_tensor(&mut rng, &[3, 3, ci, co]);
    check("conv2d", &[x2, k2], seed, |t, v| t.conv2d(v[0], v[1]));

    let x3 = random_tensor(&mut rng, &[1, 2, h, w, ci]);
    let k3 = random_tensor(&mut rng, &[3, 3, 3, ci, co]);
    check("conv3d", &[x3, k3], seed, |t, v| t.conv3d(v[0], v[1]));

    let xp = random_tensor(&mut rng, &[1, 2, 2, 4, ci]);
    check("avg_pool3d", &[xp], seed, |t, v| t.avg_pool3d(v[0], [2, 1, 2]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_primitive_matches_central_differences(seed in any::<u64>()) {
        check_all_primitives(seed);
    }

    #[test]
    fn softmax_rows_are_positive_and_sum_to_one(values in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
        let mut tape = Tape::new();
        let n = values.len();
        let x = tape.constant(Tensor::new(&[1, n], values).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        let s: f64 = tape.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-9);
        prop_assert!(tape.value(y).data().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn l2_normalize_is_unit_for_large_inputs(values in proptest::collection::vec(-10.0f64..10.0, 2..16)) {
        prop_assume!(values.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&values).unwrap());
        let y = tape.l2_normalize_eps(x, 1e-12).unwrap();
        let norm = tape.value(y).frobenius_norm();
        prop_assert!(norm <= 1.0 && norm >= 1.0 - 1e-6);
    }
}

#[test]
fn matmul_identity_is_noop() {
    let mut tape = Tape::new();
    let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0).unwrap();
    let i3 = tape.constant(Tensor::identity(3));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i3, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn sigmoid_at_zero_is_half() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0));
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(y).item(), 0.5);
}

#[test]
fn softmax_of_constant_logits_is_uniform() {
    let mut tape = Tape::new();
    for c in [-3.0, 0.0, 7.5] {
        let x = tape.constant(Tensor::vector(&[c; 4]).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64).unwrap());
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn gradient_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(&[1.0, 2.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn fd_sum_of_squares_at_three() {
    let report = finite_difference_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        },
        &[Tensor::vector(&[3.0]).unwrap()],
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
}

#[test]
fn fd_sigmoid_at_zero_matches_quarter() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0));
    let y = tape.sigmoid(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 0.25);
    let report = finite_difference_check(|t, v| t.sigmoid(v[0]), &[Tensor::scalar(0.0)], 1e-5, None).unwrap();
    assert!(report.max_rel_error < 1e-10);
}

#[test]
fn fd_rejects_nondeterministic_functions() {
    let mut calls = 0u32;
    let err = finite_difference_check(
        |t, v| {
            calls += 1;
            t.scale(v[0], calls as f64)
        },
        &[Tensor::scalar(1.0)],
        1e-5,
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonDeterministic { .. }));
}

#[test]
fn fd_rejects_nonpositive_step() {
    assert!(finite_difference_check(|t, v| t.sum(v[0]), &[Tensor::scalar(1.0)], 0.0, None).is_err());
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b).unwrap_err() {
        Error::ShapeMismatch { op, shapes } => {
            assert_eq!(op, "matmul");
            assert!(shapes.contains("[2, 3]"));
        }
        e => panic!("unexpected {e:?}"),
    }
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.add(a, c).is_err());
}

#[test]
fn non_finite_outputs_are_rejected() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[2]));
    assert_eq!(tape.log(z).unwrap_err(), Error::NonFinite { op: "log" });
    let big = tape.constant(Tensor::full(&[1], 1000.0));
    assert!(tape.exp(big).is_err());
}

#[test]
fn backward_rejects_foreign_or_non_scalar_roots() {
    let mut other = Tape::new();
    let foreign = other.param(Tensor::scalar(1.0));
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert_eq!(tape.backward(foreign).unwrap_err(), Error::InvalidRoot);
    assert_eq!(tape.backward(x).unwrap_err(), Error::InvalidRoot);
}

#[test]
fn untracked_leaves_get_no_gradient_and_unused_params_get_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(&[1.0, 2.0]).unwrap());
    let unused = tape.param(Tensor::vector(&[5.0]).unwrap());
    let c = tape.constant(Tensor::vector(&[3.0, 4.0]).unwrap());
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    assert!(g.get(c).is_none());
    assert_eq!(g.get(unused).unwrap().data(), &[0.0]);
    assert_eq!(g.len(), 2);
}

#[test]
fn l2_normalize_zero_vector_is_finite() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[4]));
    let y = tape.l2_normalize_eps(x, 1e-12).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 4]);
    let s = tape.sum(y).unwrap();
    assert!(tape.backward(s).is_ok());
}

#[test]
fn backward_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let a = tape.param(random_tensor(&mut rng, &[3, 5]));
        let b = tape.param(random_tensor(&mut rng, &[5, 2]));
        let y = tape.matmul(a, b).unwrap();
        let y = tape.tanh(y).unwrap();
        let y = tape.softmax_lastdim(y).unwrap();
        let y = tape.log(y).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        let mut bits: Vec<u64> = g.get(a).unwrap().data().iter().map(|v| v.to_bits()).collect();
        bits.extend(g.get(b).unwrap().data().iter().map(|v| v.to_bits()));
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn dropout_scales_survivors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1000], 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = tape.dropout(x, 0.3, &mut rng).unwrap();
    let vals = tape.value(y).data();
    let kept = vals.iter().filter(|&&v| v != 0.0).count();
    assert!((600..800).contains(&kept), "{kept}");
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-15));
    assert!(tape.dropout(x, 1.0, &mut rng).is_err());
}

#[test]
fn concat_and_slice_round_trip() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64).unwrap());
    let b = tape.constant(Tensor::from_fn(&[2, 1, 3], |i| 100.0 + i as f64).unwrap());
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 3, 3]);
    let back = tape.slice(c, 1, 2, 1).unwrap();
    assert_eq!(tape.value(back).data(), tape.value(b).data());
    let front = tape.slice(c, 1, 0, 2).unwrap();
    assert_eq!(tape.value(front).data(), tape.value(a).data());
}
