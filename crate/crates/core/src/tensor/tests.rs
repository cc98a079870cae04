use std::sync::Arc;

use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::ops::*;
use super::*;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct cross-correlation with bounds checks instead of a padded buffer.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (h, wd, cin) = x.dims3().unwrap();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let r = (k / 2) as isize;
    Tensor::from_fn(&[h, wd, cout], |i| {
        let co = i % cout;
        let px = (i / cout) % wd;
        let py = i / cout / wd;
        let mut acc = b.data()[co];
        for ci in 0..cin {
            for ki in 0..k {
                for kj in 0..k {
                    let sy = py as isize + ki as isize - r;
                    let sx = px as isize + kj as isize - r;
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                        acc += x.at(&[sy as usize, sx as usize, ci]) * w.at(&[co, ci, ki, kj]);
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn conv2d_degenerate_1x1() {
    let x = Tensor::new(vec![1, 1, 1], vec![3.0f32]).unwrap();
    let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0f32]).unwrap();
    let b = Tensor::new(vec![1], vec![0.5f32]).unwrap();
    assert_eq!(conv2d(&x, &w, &b, 0).unwrap().data(), &[6.5]);
}

#[test]
fn conv2d_zero_weight_annihilates() {
    let x = rand_tensor(&[5, 4, 3], 1);
    let out = conv2d(&x, &Tensor::zeros(&[2, 3, 3, 3]), &Tensor::zeros(&[2]), 1).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_ones_window_sum() {
    let x = Tensor::full(&[3, 3, 1], 1.0f32);
    let out = conv2d(&x, &Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1]), 1).unwrap();
    assert_eq!(out.at(&[1, 1, 0]), 9.0);
    assert_eq!(out.at(&[0, 0, 0]), 4.0);
}

#[test]
fn conv2d_matches_direct_oracle() {
    let x = rand_tensor(&[6, 5, 3], 2);
    let w = rand_tensor(&[4, 3, 3, 3], 3);
    let b = rand_tensor(&[4], 4);
    let out = conv2d(&x, &w, &b, 1).unwrap();
    assert!(out.max_abs_diff(&conv_oracle(&x, &w, &b)).unwrap() < 1e-12);
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let x = rand_tensor(&[4, 7, 3], 5);
    let mut w = Tensor::<f64>::zeros(&[3, 3, 3, 3]);
    for c in 0..3 {
        w.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
    }
    let out = conv2d(&x, &w, &Tensor::zeros(&[3]), 1).unwrap();
    assert_eq!(out, x);
}

#[test]
fn conv2d_rejects_channel_mismatch_and_bad_padding() {
    let x = rand_tensor(&[4, 4, 2], 0);
    let w = rand_tensor(&[1, 3, 3, 3], 0);
    assert!(matches!(
        conv2d(&x, &w, &Tensor::zeros(&[1]), 1),
        Err(TensorError::ShapeMismatch { .. })
    ));
    let w = rand_tensor(&[1, 2, 3, 3], 0);
    assert!(conv2d(&x, &w, &Tensor::zeros(&[1]), 0).is_err());
}

#[test]
fn depthwise_delta_and_zero() {
    let x = rand_tensor(&[5, 5, 4], 6);
    let mut w = Tensor::<f64>::zeros(&[4, 3, 3]);
    for c in 0..4 {
        w.data_mut()[c * 9 + 4] = 1.0;
    }
    assert_eq!(depthwise_conv2d(&x, &w, 1).unwrap(), x);
    let z = depthwise_conv2d(&x, &Tensor::zeros(&[4, 3, 3]), 1).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
    assert!(depthwise_conv2d(&x, &Tensor::zeros(&[3, 3, 3]), 1).is_err());
}

#[test]
fn depthwise_is_independent_per_channel() {
    let x = rand_tensor(&[6, 5, 2], 7);
    let w = rand_tensor(&[2, 3, 3], 8);
    let out = depthwise_conv2d(&x, &w, 1).unwrap();
    for c in 0..2 {
        let xc = Tensor::from_fn(&[6, 5, 1], |i| x.data()[i * 2 + c]);
        let wc = Tensor::from_fn(&[1, 1, 3, 3], |i| w.data()[c * 9 + i]);
        let single = conv_oracle(&xc, &wc, &Tensor::zeros(&[1]));
        for (i, &v) in single.data().iter().enumerate() {
            assert!((out.data()[i * 2 + c] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn dense_examples() {
    let x = rand_tensor(&[2, 3, 4], 9);
    let mut eye = Tensor::<f64>::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    assert_eq!(dense(&x, &eye, &Tensor::zeros(&[4])).unwrap(), x);

    let b = rand_tensor(&[3], 10);
    let out = dense(&Tensor::zeros(&[5, 2]), &rand_tensor(&[2, 3], 11), &b).unwrap();
    for r in 0..5 {
        assert_eq!(&out.data()[r * 3..r * 3 + 3], b.data());
    }

    let x = Tensor::new(vec![1, 2], vec![1.0f32, 2.0]).unwrap();
    let w = Tensor::new(vec![2, 1], vec![1.0f32, 1.0]).unwrap();
    let b = Tensor::new(vec![1], vec![0.5f32]).unwrap();
    assert_eq!(dense(&x, &w, &b).unwrap().data(), &[3.5]);

    assert!(dense(&x, &Tensor::zeros(&[3, 1]), &b).is_err());
}

#[test]
fn unfold_examples() {
    let x = Tensor::new(vec![1, 1, 1], vec![7.0f32]).unwrap();
    let u = unfold(&x, 3).unwrap();
    assert_eq!(u.shape(), &[1, 1, 9]);
    for (i, &v) in u.data().iter().enumerate() {
        assert_eq!(v, if i == 4 { 7.0 } else { 0.0 });
    }
    let x = rand_tensor(&[3, 4, 2], 12);
    assert_eq!(unfold(&x, 1).unwrap(), x);
}

#[test]
fn unfold_matches_padded_gather() {
    let x = rand_tensor(&[2, 2, 3], 13);
    let u = unfold(&x, 3).unwrap();
    // Explicitly zero-padded 4x4 copy.
    let mut padded = vec![0.0; 4 * 4 * 3];
    for y in 0..2 {
        for xx in 0..2 {
            for c in 0..3 {
                padded[((y + 1) * 4 + xx + 1) * 3 + c] = x.at(&[y, xx, c]);
            }
        }
    }
    for y in 0..2 {
        for xx in 0..2 {
            for c in 0..3 {
                for ki in 0..3 {
                    for kj in 0..3 {
                        let expect = padded[((y + ki) * 4 + xx + kj) * 3 + c];
                        assert_eq!(u.at(&[y, xx, c * 9 + ki * 3 + kj]), expect);
                    }
                }
            }
        }
    }
}

#[test]
fn unfold_dot_kernel_equals_depthwise() {
    let x = rand_tensor(&[7, 6, 3], 14).cast::<f32>();
    let w = rand_tensor(&[3, 3, 3], 15).cast::<f32>();
    let conv = depthwise_conv2d(&x, &w, 1).unwrap();
    let u = unfold(&x, 3).unwrap();
    for y in 0..7 {
        for xx in 0..6 {
            for c in 0..3 {
                let dotv: f32 = (0..9).map(|t| u.at(&[y, xx, c * 9 + t]) * w.data()[c * 9 + t]).sum();
                assert!((dotv - conv.at(&[y, xx, c])).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn nearest_sample_examples() {
    let x = rand_tensor(&[3, 2, 2], 16);
    assert_eq!(nearest_sample(&x, 1.0, 1.0).unwrap(), x);

    let one = Tensor::new(vec![1, 1, 2], vec![1.5f32, -2.0]).unwrap();
    let up = nearest_sample(&one, 3.0, 3.0).unwrap();
    assert_eq!(up.shape(), &[3, 3, 2]);
    assert!(up.data().chunks(2).all(|p| p == [1.5, -2.0]));

    let x = rand_tensor(&[2, 2, 1], 17);
    let up = nearest_sample(&x, 2.5, 2.5).unwrap();
    assert_eq!(up.shape(), &[5, 5, 1]);
    for y in 0..5 {
        for xx in 0..5 {
            let (sy, sx) = ((y as f64 / 2.5).floor() as usize, (xx as f64 / 2.5).floor() as usize);
            assert_eq!(up.at(&[y, xx, 0]), x.at(&[sy, sx, 0]));
        }
    }
}

#[test]
fn pixel_shuffle_examples() {
    let x = rand_tensor(&[2, 3, 4], 18);
    assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    assert_eq!(pixel_unshuffle(&x, 1).unwrap(), x);

    let x = Tensor::new(vec![1, 1, 4], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
    let y = pixel_shuffle(&x, 2).unwrap();
    assert_eq!(y.shape(), &[2, 2, 1]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);

    assert!(pixel_shuffle(&Tensor::<f32>::zeros(&[2, 2, 3]), 2).is_err());
    assert!(pixel_unshuffle(&Tensor::<f32>::zeros(&[3, 2, 1]), 2).is_err());
}

#[test]
fn pixel_shuffle_routes_one_hot_channels() {
    for s in 1..=3usize {
        let c = 2;
        for ch in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let mut x = Tensor::<f32>::zeros(&[1, 1, c * s * s]);
                    x.data_mut()[ch * s * s + i * s + j] = 1.0;
                    let y = pixel_shuffle(&x, s).unwrap();
                    for yy in 0..s {
                        for xx in 0..s {
                            for cc in 0..c {
                                let lit = (yy, xx, cc) == (i, j, ch);
                                assert_eq!(y.at(&[yy, xx, cc]), if lit { 1.0 } else { 0.0 });
                            }
                        }
                    }
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn shuffle_unshuffle_bijection(s in 1usize..=4, h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
        let x = rand_tensor(&[h, w, c * s * s], seed).cast::<f32>();
        let y = pixel_shuffle(&x, s).unwrap();
        prop_assert_eq!(&pixel_unshuffle(&y, s).unwrap(), &x);
        let z = rand_tensor(&[h * s, w * s, c], seed ^ 1).cast::<f32>();
        prop_assert_eq!(&pixel_shuffle(&pixel_unshuffle(&z, s).unwrap(), s).unwrap(), &z);
    }

    #[test]
    fn l1_nonnegative_and_zero_iff_equal(seed in any::<u64>(), n in 1usize..20) {
        let a = rand_tensor(&[n], seed);
        let b = rand_tensor(&[n], seed.wrapping_add(1));
        prop_assert!(l1_loss(&a, &b).unwrap().item().unwrap() > 0.0);
        prop_assert_eq!(l1_loss(&a, &a).unwrap().item().unwrap(), 0.0);
    }
}

#[test]
fn l1_examples() {
    let x = rand_tensor(&[2, 2], 19);
    assert_eq!(l1_loss(&x, &x).unwrap().item().unwrap(), 0.0);
    let a = Tensor::new(vec![1], vec![0.0f32]).unwrap();
    let b = Tensor::new(vec![1], vec![1.0f32]).unwrap();
    assert_eq!(l1_loss(&a, &b).unwrap().item().unwrap(), 1.0);
    let a = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let b = Tensor::new(vec![2, 2], vec![0.25, 1.0, 1.0, -0.75]).unwrap();
    let expect = (0.25 + 2.0 + 1.0 + 0.75) / 4.0;
    assert_eq!(l1_loss(&a, &b).unwrap().item().unwrap(), expect);
    assert!(l1_loss(&a, &Tensor::zeros(&[4])).is_err());
}

#[test]
fn elementwise_ops() {
    let a = Tensor::new(vec![3], vec![1.0f64, -2.0, 3.0]).unwrap();
    let b = Tensor::new(vec![3], vec![0.5f64, 0.5, -1.0]).unwrap();
    assert_eq!(add(&a, &b).unwrap().data(), &[1.5, -1.5, 2.0]);
    assert_eq!(sub(&a, &b).unwrap().data(), &[0.5, -2.5, 4.0]);
    assert_eq!(mul(&a, &b).unwrap().data(), &[0.5, -1.0, -3.0]);
    assert_eq!(relu(&a).data(), &[1.0, 0.0, 3.0]);
    assert!(add(&a, &Tensor::zeros(&[2])).is_err());
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Eager;
    let a = g.constant(Tensor::new(vec![1], vec![f32::MAX]).unwrap());
    let err = g.add(&a, &a).unwrap_err();
    assert_eq!(err, TensorError::NonFinite { op: "add" });
}

// ---------------------------------------------------------------------------
// reverse mode

#[test]
fn linear_gradient_equals_input() {
    let mut params = ParameterSet::<f64>::new();
    let w = params.register("w", rand_tensor(&[5], 20)).unwrap();
    let x = rand_tensor(&[5], 21);
    let mut tape = Tape::new();
    let wv = tape.param(&params, w);
    let xv = tape.constant(x.clone());
    let prod = tape.mul(&wv, &xv).unwrap();
    let loss = tape.sum(&prod).unwrap();
    tape.backward(loss, &mut params).unwrap();
    assert_eq!(params.get(w).grad, x);

    // Second call accumulates.
    tape.backward(loss, &mut params).unwrap();
    assert_eq!(params.get(w).grad, ops::scale(&x, 2.0));
    params.zero_grad();
    assert!(params.get(w).grad.data().iter().all(|&g| g == 0.0));
}

#[test]
fn detached_values_get_no_gradient() {
    let mut params = ParameterSet::<f64>::new();
    let w = params.register("w", rand_tensor(&[4], 22)).unwrap();
    let mut tape = Tape::new();
    let wv = tape.param(&params, w);
    let frozen = tape.detach(wv);
    let sq = tape.mul(&frozen, &frozen).unwrap();
    let loss = tape.sum(&sq).unwrap();
    let report = tape.backward(loss, &mut params).unwrap();
    assert!(report.visited.is_empty());
    assert!(params.get(w).grad.data().iter().all(|&g| g == 0.0));
}

#[test]
fn backward_errors() {
    let mut params = ParameterSet::<f64>::new();
    let tape = Tape::<f64>::new();
    assert!(matches!(tape.backward(Var(0), &mut params), Err(TensorError::EmptyTape)));
    let w = params.register("w", rand_tensor(&[3], 0)).unwrap();
    let mut tape = Tape::new();
    let wv = tape.param(&params, w);
    assert!(matches!(tape.backward(wv, &mut params), Err(TensorError::NotScalar(_))));
    let loss = tape.sum(&wv).unwrap();
    assert!(matches!(
        tape.backward(loss, &mut ParameterSet::new()),
        Err(TensorError::ParameterSetMismatch)
    ));
}

#[test]
fn backward_visits_in_reverse_recording_order() {
    let mut params = ParameterSet::<f64>::new();
    let w = params.register("w", rand_tensor(&[2, 2], 23)).unwrap();
    let b = params.register("b", rand_tensor(&[2], 24)).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&[3, 2], 25));
    let wv = tape.param(&params, w);
    let bv = tape.param(&params, b);
    let h = tape.dense(&x, &wv, &bv).unwrap();
    let r = tape.relu(&h).unwrap();
    let h2 = tape.dense(&r, &wv, &bv).unwrap();
    let loss = tape.sum(&h2).unwrap();
    let report = tape.backward(loss, &mut params).unwrap();
    assert!(report.visited.windows(2).all(|p| p[0] > p[1]));
    assert_eq!(report.visited.first(), Some(&loss.index()));
}

#[test]
fn duplicate_parameter_names_rejected() {
    let mut params = ParameterSet::<f32>::new();
    params.register("a", Tensor::zeros(&[1])).unwrap();
    assert!(params.register("a", Tensor::zeros(&[1])).is_err());
}

/// Central-difference check of `loss(params)` for every parameter element.
fn check_gradients(params: &mut ParameterSet<f64>, build: impl Fn(&mut Tape<f64>, &ParameterSet<f64>) -> Var) {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    params.zero_grad();
    tape.backward(loss, params).unwrap();
    let analytic: Vec<Tensor<f64>> = params.iter().map(|p| p.grad.clone()).collect();
    let h = 1e-5;
    let eval = |params: &ParameterSet<f64>| {
        let mut t = Tape::new();
        let l = build(&mut t, params);
        t.value(&l).item().unwrap()
    };
    for pi in 0..params.len() {
        for e in 0..analytic[pi].len() {
            let id = params.ids().nth(pi).unwrap();
            let orig = params.value(id).data()[e];
            params.get_mut(id).value.data_mut()[e] = orig + h;
            let up = eval(params);
            params.get_mut(id).value.data_mut()[e] = orig - h;
            let down = eval(params);
            params.get_mut(id).value.data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = analytic[pi].data()[e];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
            assert!(rel < 1e-5, "param {} elem {e}: fd {fd} ad {ad}", params.get(id).name);
        }
    }
}

/// Smooth scalar readout so kinks only come from the op under test.
fn readout(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let shape = tape.value(&v).shape().to_vec();
    let probe = tape.constant(rand_tensor(&shape, seed));
    let prod = tape.mul(&v, &probe).unwrap();
    tape.sum(&prod).unwrap()
}

#[test]
fn conv2d_gradients() {
    let mut params = ParameterSet::new();
    let x = params.register("x", rand_tensor(&[4, 5, 2], 30)).unwrap();
    let w = params.register("w", rand_tensor(&[3, 2, 3, 3], 31)).unwrap();
    let b = params.register("b", rand_tensor(&[3], 32)).unwrap();
    check_gradients(&mut params, |t, p| {
        let (xv, wv, bv) = (t.param(p, x), t.param(p, w), t.param(p, b));
        let y = t.conv2d(&xv, &wv, &bv, 1).unwrap();
        readout(t, y, 33)
    });
}

#[test]
fn depthwise_and_grouped_gradients() {
    let mut params = ParameterSet::new();
    let x = params.register("x", rand_tensor(&[4, 3, 2], 34)).unwrap();
    let w = params.register("w", rand_tensor(&[2, 3, 3], 35)).unwrap();
    let k = params.register("k", rand_tensor(&[4, 9, 2], 36)).unwrap();
    check_gradients(&mut params, |t, p| {
        let (xv, wv, kv) = (t.param(p, x), t.param(p, w), t.param(p, k));
        let y = t.depthwise_conv2d(&xv, &wv, 1).unwrap();
        let z = t.grouped_depthwise(&y, &kv).unwrap();
        let z = t.pixel_shuffle(&z, 2).unwrap();
        readout(t, z, 37)
    });
}

#[test]
fn dense_unfold_apply_gradients() {
    let mut params = ParameterSet::new();
    let x = params.register("x", rand_tensor(&[3, 3, 2], 38)).unwrap();
    let w = params.register("w", rand_tensor(&[2, 3], 39)).unwrap();
    let b = params.register("b", rand_tensor(&[3], 40)).unwrap();
    let k = params.register("k", rand_tensor(&[2, 9, 3], 41)).unwrap();
    let plan = Arc::new(ApplyPlan {
        out_shape: [2, 3],
        source: vec![0, 4, 8, 2, 2, 7],
        kernel: vec![0, 1, 1, 0, 1, 0],
    });
    check_gradients(&mut params, |t, p| {
        let (xv, wv, bv, kv) = (t.param(p, x), t.param(p, w), t.param(p, b), t.param(p, k));
        let f = t.dense(&xv, &wv, &bv).unwrap();
        let u = t.unfold(&f, 3).unwrap();
        let y = t.kernel_apply(&u, &kv, plan.clone()).unwrap();
        let g = t.gather_rows(&y, Arc::from(vec![5usize, 0, 0, 3])).unwrap();
        let r = t.reshape(&g, &[2, 2, 3]).unwrap();
        readout(t, r, 42)
    });
}

#[test]
fn elementwise_and_loss_gradients() {
    let mut params = ParameterSet::new();
    let a = params.register("a", rand_tensor(&[6], 43)).unwrap();
    let b = params.register("b", rand_tensor(&[6], 44)).unwrap();
    let target = rand_tensor(&[6], 45).map(|v| v * 10.0);
    check_gradients(&mut params, |t, p| {
        let (av, bv) = (t.param(p, a), t.param(p, b));
        let m = t.mul(&av, &bv).unwrap();
        let s = t.sub(&m, &av).unwrap();
        let r = t.relu(&s).unwrap();
        let q = t.add(&r, &bv).unwrap();
        let q = t.scale(&q, 0.5).unwrap();
        let tv = t.constant(target.clone());
        t.l1_loss(&q, &tv).unwrap()
    });
}

// ---------------------------------------------------------------------------
// Adam

#[test]
fn adam_first_step_magnitude_is_lr() {
    let mut params = ParameterSet::<f32>::new();
    let id = params.register("p", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
    params.get_mut(id).grad = Tensor::new(vec![3], vec![0.3, -4.0, 1e-3]).unwrap();
    let before = params.value(id).clone();
    let mut state = AdamState::new(&params);
    adam_step(&mut params, &mut state, 0.01, &AdamConfig::default()).unwrap();
    for (a, b) in before.data().iter().zip(params.value(id).data()) {
        assert!(((a - b).abs() - 0.01).abs() < 1e-5);
    }
    assert_eq!(state.step, 1);
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut params = ParameterSet::<f32>::new();
    let id = params.register("p", Tensor::new(vec![2], vec![0.25, -3.0]).unwrap()).unwrap();
    let before = params.value(id).clone();
    let mut state = AdamState::new(&params);
    adam_step(&mut params, &mut state, 0.1, &AdamConfig::default()).unwrap();
    assert_eq!(params.value(id), &before);
}

#[test]
fn adam_quadratic_trajectory_matches_scalar_reference() {
    // Hand-rolled scalar Adam on f(θ) = θ², θ0 = 1, lr = 0.1.
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
    let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut reference = Vec::new();
    for t in 1..=3 {
        let g = 2.0 * theta;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        theta -= lr * mh / (vh.sqrt() + eps);
        reference.push(theta);
    }

    let mut params = ParameterSet::<f32>::new();
    let id = params.register("theta", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    let mut state = AdamState::new(&params);
    for expect in reference {
        params.zero_grad();
        let mut tape = Tape::new();
        let th = tape.param(&params, id);
        let sq = tape.mul(&th, &th).unwrap();
        let loss = tape.sum(&sq).unwrap();
        tape.backward(loss, &mut params).unwrap();
        adam_step(&mut params, &mut state, lr, &AdamConfig::default()).unwrap();
        assert!((params.value(id).data()[0] as f64 - expect).abs() < 1e-6);
    }
}

#[test]
fn adam_state_mismatch_rejected() {
    let mut params = ParameterSet::<f32>::new();
    params.register("a", Tensor::zeros(&[2])).unwrap();
    let mut state = AdamState::new(&ParameterSet::<f32>::new());
    assert!(adam_step(&mut params, &mut state, 0.1, &AdamConfig::default()).is_err());
}
