use super::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Central finite differences against tape gradients for every element
/// of every input, with h = 1e-4 in 64-bit arithmetic. The error metric
/// is relative with a small absolute floor so near-zero gradients do not
/// blow up the ratio.
fn check_gradients<F>(inputs: &[Array], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let h = 1e-4;
    for (k, base) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).unwrap();
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, a)| {
                        let mut a = a.clone();
                        if j == k {
                            a.data_mut()[i] += delta;
                        }
                        tape.leaf(a, false)
                    })
                    .collect();
                let out = build(&mut tape, &vars);
                tape.value(out).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let got = g.data()[i];
            let denom = got.abs().max(fd.abs()).max(1e-3);
            let rel = (got - fd).abs() / denom;
            assert!(
                rel < 1e-4,
                "gradient mismatch input {k} element {i}: tape {got} fd {fd} rel {rel}"
            );
        }
    }
}

fn random_array(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn identity_kernel_conv_is_identity() {
    let mut tape = Tape::new();
    let input = tape.leaf(
        Array::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap(),
        false,
    );
    let kernel = tape.leaf(Array::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), false);
    let out = tape.conv2d(input, kernel, 0, 1).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 3, 3]);
    assert_eq!(tape.value(out).data(), tape.value(input).data());
}

#[test]
fn second_difference_of_ramp_is_zero() {
    // Linear ramp along x; the [1, -2, 1] kernel annihilates affine data.
    let mut tape = Tape::new();
    let data: Vec<f64> = (0..9).flat_map(|y| (0..9).map(move |x| 2.0 * x as f64 + y as f64)).collect();
    let input = tape.leaf(Array::new(vec![1, 9, 9], data).unwrap(), false);
    let kernel = tape.leaf(Array::new(vec![1, 1, 1, 3], vec![1.0, -2.0, 1.0]).unwrap(), false);
    let out = tape.conv2d(input, kernel, 0, 1).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 9, 7]);
    for v in tape.value(out).data() {
        assert!(v.abs() < 1e-12);
    }
}

#[test]
fn conv_channel_mismatch_is_shape_error() {
    let mut tape = Tape::new();
    let input = tape.leaf(Array::zeros(vec![3, 9, 9]), false);
    let kernel = tape.leaf(Array::zeros(vec![4, 2, 3, 3]), false);
    assert!(matches!(tape.conv2d(input, kernel, 1, 1), Err(Error::Shape(_))));
}

#[test]
fn silu_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array::vector(vec![0.0]), false);
    let y = tape.silu(x).unwrap();
    assert_eq!(tape.value(y).item(), 0.0);
}

#[test]
fn add_zeros_is_identity() {
    let mut tape = Tape::new();
    let a = tape.leaf(Array::vector(vec![1.5, -2.0, 0.25]), false);
    let z = tape.leaf(Array::zeros(vec![3]), false);
    let out = tape.add(a, z).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(a).data());
}

#[test]
fn mul_gradients_follow_product_rule() {
    let mut tape = Tape::new();
    let a = tape.leaf(Array::scalar(2.0), true);
    let b = tape.leaf(Array::scalar(3.0), true);
    let p = tape.mul(a, b).unwrap();
    let loss = tape.sum(p).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap().item(), 3.0);
    assert_eq!(grads.get(b).unwrap().item(), 2.0);
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array::vector(vec![1.0, 0.0]), false);
    assert!(matches!(tape.log(x), Err(Error::Domain(_))));
}

#[test]
fn linear_identity_and_zero_weight() {
    let mut tape = Tape::new();
    let eye = Array::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let w = tape.leaf(eye, false);
    let x = tape.leaf(Array::vector(vec![4.0, -1.0, 2.5]), false);
    let b0 = tape.leaf(Array::zeros(vec![3]), false);
    let y = tape.linear(w, x, b0).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0, -1.0, 2.5]);

    let wz = tape.leaf(Array::zeros(vec![2, 3]), false);
    let bias = tape.leaf(Array::vector(vec![7.0, -3.0]), false);
    let y2 = tape.linear(wz, x, bias).unwrap();
    assert_eq!(tape.value(y2).data(), &[7.0, -3.0]);
}

#[test]
fn linear_matches_dot_product_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = random_array(&mut rng, vec![10, 5], -1.0, 1.0);
    let x = random_array(&mut rng, vec![5], -1.0, 1.0);
    let b = random_array(&mut rng, vec![10], -1.0, 1.0);
    let mut tape = Tape::new();
    let (wv, xv, bv) = (tape.leaf(w.clone(), false), tape.leaf(x.clone(), false), tape.leaf(b.clone(), false));
    let y = tape.linear(wv, xv, bv).unwrap();
    for o in 0..10 {
        let mut want = b.data()[o];
        for i in 0..5 {
            want += w.data()[o * 5 + i] * x.data()[i];
        }
        assert!((tape.value(y).data()[o] - want).abs() < 1e-12);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array::zeros(vec![2, 3]), true);
    let loss = tape.sum(x).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|v| *v == 1.0));
}

#[test]
fn backward_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array::vector(vec![1.0, 2.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array::vector(vec![1.0, 2.0]), true);
    assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
}

#[test]
fn foreign_var_is_graph_error() {
    let mut tape_a = Tape::new();
    let mut tape_b = Tape::new();
    let x = tape_a.leaf(Array::scalar(1.0), true);
    let _ = tape_b.leaf(Array::scalar(1.0), true);
    assert!(matches!(tape_b.backward(x), Err(Error::Graph(_))));
    assert!(matches!(tape_b.sum(x), Err(Error::Graph(_))));
}

#[test]
fn unused_arrays_get_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array::vector(vec![1.0, 2.0]), true);
    let unused = tape.leaf(Array::vector(vec![5.0]), true);
    let loss = tape.sum(x).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(unused).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn gradients_are_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random_array(&mut rng, vec![2, 5, 5], -1.0, 1.0);
    let kernel = random_array(&mut rng, vec![3, 2, 3, 3], -1.0, 1.0);
    let run = || {
        let mut tape = Tape::new();
        let iv = tape.leaf(input.clone(), true);
        let kv = tape.leaf(kernel.clone(), true);
        let conv = tape.conv2d(iv, kv, 1, 1).unwrap();
        let act = tape.silu(conv).unwrap();
        let loss = tape.sum(act).unwrap();
        let grads = tape.backward(loss).unwrap();
        (
            grads.get(iv).unwrap().data().to_vec(),
            grads.get(kv).unwrap().data().to_vec(),
        )
    };
    let (gi1, gk1) = run();
    let (gi2, gk2) = run();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&gi1), bits(&gi2));
    assert_eq!(bits(&gk1), bits(&gk2));
}

#[test]
fn finite_differences_agree_for_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        // Binary elementwise ops including broadcasts.
        let a = random_array(&mut rng, vec![2, 3, 3], -2.0, 2.0);
        let b = random_array(&mut rng, vec![2, 3, 3], 0.5, 2.5);
        let c = random_array(&mut rng, vec![2], -1.0, 1.0);
        check_gradients(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(s, v[1]).unwrap();
            let m = t.mul(d, v[0]).unwrap();
            let q = t.div(m, v[1]).unwrap();
            t.sum(q).unwrap()
        });
        check_gradients(&[a.clone(), c.clone()], |t, v| {
            let m = t.mul(v[0], v[1]).unwrap();
            let s = t.add(m, v[1]).unwrap();
            t.sum(s).unwrap()
        });

        // Unary chain: silu, exp, log, neg, scale, relu, clip, normcdf.
        let x = random_array(&mut rng, vec![7], -2.0, 2.0);
        check_gradients(&[x.clone()], |t, v| {
            let s = t.silu(v[0]).unwrap();
            let e = t.exp(s).unwrap();
            let l = t.log(e).unwrap();
            let n = t.neg(l).unwrap();
            let sc = t.scale(n, 0.7).unwrap();
            let cdf = t.normcdf(sc).unwrap();
            t.sum(cdf).unwrap()
        });
        // Keep values away from the relu kink at 0 and the clip kinks at
        // 0.2 and 1.5, where the subgradient choice makes finite
        // differences disagree.
        let y = Array::vector(
            [-1.3, -0.4, 0.1, 0.5, 1.0, 1.7, 2.2]
                .iter()
                .map(|v| v + rng.random_range(-0.01..0.01))
                .collect(),
        );
        check_gradients(&[y], |t, v| {
            let r = t.relu(v[0]).unwrap();
            let cl = t.clip(r, 0.2, 1.5).unwrap();
            t.sum(cl).unwrap()
        });

        // Convolution w.r.t. input and kernels.
        let input = random_array(&mut rng, vec![2, 4, 4], -1.0, 1.0);
        let kernel = random_array(&mut rng, vec![2, 2, 3, 3], -1.0, 1.0);
        check_gradients(&[input, kernel], |t, v| {
            let conv = t.conv2d(v[0], v[1], 1, 2).unwrap();
            let act = t.silu(conv).unwrap();
            t.sum(act).unwrap()
        });

        // Linear in all three arguments.
        let w = random_array(&mut rng, vec![4, 3], -1.0, 1.0);
        let xv = random_array(&mut rng, vec![3], -1.0, 1.0);
        let bia = random_array(&mut rng, vec![4], -1.0, 1.0);
        check_gradients(&[w, xv, bia], |t, v| {
            let y = t.linear(v[0], v[1], v[2]).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum(sq).unwrap()
        });

        // Concat, upsample, reshape, mean.
        let p = random_array(&mut rng, vec![1, 2, 2], -1.0, 1.0);
        let q = random_array(&mut rng, vec![1, 2, 2], -1.0, 1.0);
        check_gradients(&[p, q], |t, v| {
            let cat = t.concat(v[0], v[1]).unwrap();
            let up = t.upsample_nearest(cat, 3, 3).unwrap();
            let flat = t.reshape(up, vec![18]).unwrap();
            let sq = t.mul(flat, flat).unwrap();
            t.mean(sq).unwrap()
        });
    }
}

#[test]
fn same_padding_preserves_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in [1usize, 3, 5] {
        let input = random_array(&mut rng, vec![2, 9, 9], -1.0, 1.0);
        let kernel = random_array(&mut rng, vec![3, 2, k, k], -1.0, 1.0);
        let mut tape = Tape::new();
        let iv = tape.leaf(input, false);
        let kv = tape.leaf(kernel, false);
        let out = tape.conv2d(iv, kv, (k - 1) / 2, 1).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 9, 9]);
    }
}

#[test]
fn long_elementwise_chains_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random_array(&mut rng, vec![16], -10.0, 10.0);
    let mut tape = Tape::new();
    let leaf = tape.leaf(x, true);
    let mut cur = leaf;
    for i in 0..64 {
        cur = match i % 4 {
            0 => tape.silu(cur).unwrap(),
            1 => tape.scale(cur, 0.9).unwrap(),
            2 => tape.add(cur, leaf).unwrap(),
            _ => tape.normcdf(cur).unwrap(),
        };
    }
    let loss = tape.sum(cur).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(leaf).unwrap().all_finite());
}

#[test]
fn clip_gradient_zero_outside_range() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array::vector(vec![-6.0, 0.0, 6.0]), true);
    let c = tape.clip(x, -5.0, 5.0).unwrap();
    assert_eq!(tape.value(c).data(), &[-5.0, 0.0, 5.0]);
    let loss = tape.sum(c).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array::vector(vec![0.0, 1.0, -1.0]), true);
    let r = tape.relu(x).unwrap();
    let loss = tape.sum(r).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn normal_cdf_matches_high_precision_reference() {
    // Reference values computed with 40-digit arithmetic.
    let cases = [
        (-8.0, 6.22096057427178412e-16),
        (-5.0, 2.86651571879193912e-7),
        (-3.0, 1.34989803163009453e-3),
        (-1.0, 0.158655253931457051),
        (-0.5, 0.308537538725986896),
        (-0.1, 0.460172162722971016),
        (0.0, 0.5),
        (0.1, 0.539827837277028984),
        (0.5, 0.691462461274013104),
        (1.0, 0.841344746068542949),
        (2.0, 0.977249868051820793),
        (3.5, 0.999767370920964475),
        (6.0, 0.999999999013412355),
    ];
    for (x, want) in cases {
        assert!(
            (normal_cdf(x) - want).abs() < 1e-12,
            "normal_cdf({x}) = {} want {}",
            normal_cdf(x),
            want
        );
    }
}
