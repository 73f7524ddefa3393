use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// Pushes values away from a kink at `at` so central differences stay on one side.
fn avoid(mut x: Tensor, at: f64, gap: f64) -> Tensor {
    for v in x.data_mut() {
        if (*v - at).abs() < gap {
            *v = at + if *v >= at { gap } else { -gap };
        }
    }
    x
}

/// Max relative error between tape gradients and central differences of
/// `sum(build(inputs) * w)` for a fixed random weighting `w`.
fn grad_error(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let weights = |g: &mut Graph, out: Var| {
        let shape = g.shape(out).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        random(&mut rng, &shape)
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let w = weights(&mut g, out);
        g.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let w = weights(&mut g, out);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum_all(prod).unwrap();
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let fd = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                eval(&xs)
            },
            &inputs[i],
            DEFAULT_STEP,
        );
        let zero = Tensor::zeros(inputs[i].shape());
        let ad = g.grad(v).unwrap_or(&zero);
        worst = worst.max(max_relative_error(ad, &fd));
    }
    worst
}

const ELEMENTARY_TOL: f64 = 1e-5;

fn sweep(mut make: impl FnMut(&mut ChaCha8Rng) -> f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..20 {
        let err = make(&mut rng);
        assert!(err < ELEMENTARY_TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let x = t(&[3, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
    let mut k = Tensor::zeros(&[3, 3, 1, 1]);
    k.data_mut()[4] = 1.0;
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k));
    let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_all_ones_counts_neighbours() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[4, 4, 1], 1.0));
    let k = g.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
    let y = g.conv2d(x, k, None, 1, 1).unwrap();
    let expected = [
        4.0, 6.0, 6.0, 4.0, //
        6.0, 9.0, 9.0, 6.0, //
        6.0, 9.0, 9.0, 6.0, //
        4.0, 6.0, 6.0, 4.0,
    ];
    assert_eq!(g.value(y).data(), &expected);
}

#[test]
fn conv2d_shape_law_and_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[8, 8, 2]));
    let k = g.constant(Tensor::zeros(&[3, 3, 2, 5]));
    let b = g.constant(Tensor::zeros(&[5]));
    let y = g.conv2d(x, k, Some(b), 1, 1).unwrap();
    assert_eq!(g.shape(y), &[8, 8, 5]);
    let y2 = g.conv2d(x, k, None, 2, 1).unwrap();
    assert_eq!(g.shape(y2), &[4, 4, 5]);

    let bad = g.constant(Tensor::zeros(&[3, 3, 3, 5]));
    assert!(matches!(g.conv2d(x, bad, None, 1, 1), Err(Error::ShapeMismatch { .. })));
    assert!(matches!(g.conv2d(x, k, None, 0, 1), Err(Error::InvalidArgument { .. })));
    let bad_bias = g.constant(Tensor::zeros(&[4]));
    assert!(g.conv2d(x, k, Some(bad_bias), 1, 1).is_err());
}

#[test]
fn conv_transpose_doubles_extent() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 2, 3]));
    let k = g.constant(Tensor::full(&[3, 3, 4, 3], 0.5));
    let y = g.conv_transpose2d(x, k).unwrap();
    assert_eq!(g.shape(y), &[4, 4, 4]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let bad = g.constant(Tensor::zeros(&[3, 3, 4, 2]));
    assert!(g.conv_transpose2d(x, bad).is_err());
}

#[test]
fn conv_transpose_single_pixel_scatter() {
    // One input pixel at (0, 0): output (oy, ox) = 2*0 + ky - 1, so tap (ky, kx)
    // lands on (ky - 1, kx - 1); only taps with ky, kx >= 1 survive the crop.
    let v = 1.5;
    let k: Vec<f64> = (1..=9).map(f64::from).collect();
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 1], &[v]));
    let kv = g.constant(t(&[3, 3, 1, 1], &k));
    let y = g.conv_transpose2d(x, kv).unwrap();
    let expected = [v * k[4], v * k[5], v * k[7], v * k[8]];
    assert_eq!(g.value(y).data(), &expected);
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.maxpool2d(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let vals = [
        1.0, 5.0, 2.0, 0.0, //
        3.0, 4.0, 8.0, 7.0, //
        -1.0, -2.0, 6.0, 6.5, //
        -3.0, -0.5, 6.4, 6.2,
    ];
    let x4 = g.constant(t(&[4, 4, 1], &vals));
    let y4 = g.maxpool2d(x4).unwrap();
    assert_eq!(g.value(y4).data(), &[5.0, 8.0, -0.5, 6.5]);

    let odd = g.constant(Tensor::zeros(&[3, 4, 1]));
    assert!(g.maxpool2d(odd).is_err());
}

#[test]
fn maxpool_tie_routes_to_first_element() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[2, 2, 1], 0.7));
    let y = g.maxpool2d(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.7]);
    let l = g.sum_all(y).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn activation_values() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[-2.0, 3.0]));
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 3.0]);
    let z = g.constant(t(&[2], &[0.0, 1.0]));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).data()[0], 0.5);
    assert!((g.value(s).data()[1] - 0.7310585786).abs() < 1e-10);
    let c = g.constant(t(&[3], &[-3.0, 0.25, 1.5]));
    let cl = g.activation(c, Activation::ClampUnit).unwrap();
    assert_eq!(g.value(cl).data(), &[-1.0, 0.25, 1.0]);
    let sp = g.activation(z, Activation::Softplus).unwrap();
    assert!((g.value(sp).data()[0] - core::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn relu_and_clamp_derivatives_at_edges() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = g.relu(x).unwrap();
    let l = g.sum_all(r).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[4], &[-2.0, -0.5, 0.5, 2.0]));
    let c = g.activation(x, Activation::ClampUnit).unwrap();
    let l = g.sum_all(c).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[0.0, 0.0]));
    let sa = g.softmax_axis(a, 0).unwrap();
    assert_eq!(g.value(sa).data(), &[0.5, 0.5]);
    let b = g.constant(t(&[2], &[1000.0, 1000.0]));
    let sb = g.softmax_axis(b, 0).unwrap();
    assert_eq!(g.value(sb).data(), &[0.5, 0.5]);
    let c = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let sc = g.softmax_axis(c, 0).unwrap();
    for (got, want) in g.value(sc).data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
        assert!((got - want).abs() < 1e-8);
    }
    assert!(matches!(g.softmax_axis(c, 1), Err(Error::InvalidAxis { .. })));
}

#[test]
fn reduce_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let s = g.reduce(a, Reduction::Sum, &[0]).unwrap();
    assert_eq!(g.value(s).data(), &[6.0]);
    assert!(g.value(s).is_scalar());
    let ones = g.constant(Tensor::full(&[2, 2], 1.0));
    let m = g.reduce(ones, Reduction::Mean, &[0, 1]).unwrap();
    assert_eq!(g.value(m).data(), &[1.0]);

    let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let rows = g.reduce(x, Reduction::Sum, &[1]).unwrap();
    assert_eq!(g.value(rows).data(), &[6.0, 15.0]);
    let cols = g.reduce(x, Reduction::Mean, &[0]).unwrap();
    assert_eq!(g.value(cols).data(), &[2.5, 3.5, 4.5]);
    assert!(matches!(g.reduce(x, Reduction::Sum, &[2]), Err(Error::InvalidAxis { .. })));
    assert!(g.reduce(x, Reduction::Sum, &[1, 1]).is_err());

    let mut g = Graph::new();
    let v = g.param(Tensor::full(&[5], 3.0));
    let m = g.mean_all(v).unwrap();
    g.backward(m).unwrap();
    assert!(g.grad(v).unwrap().data().iter().all(|&d| (d - 0.2).abs() < 1e-15));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[2.0, 3.0]));
    let zero = g.constant(Tensor::zeros(&[2]));
    let y = g.constant(t(&[2], &[4.0, 5.0]));
    let a = g.add(x, zero).unwrap();
    assert_eq!(g.value(a).data(), &[2.0, 3.0]);
    let s = g.sub(x, x).unwrap();
    assert_eq!(g.value(s).data(), &[0.0, 0.0]);
    let m = g.mul(x, y).unwrap();
    assert_eq!(g.value(m).data(), &[8.0, 15.0]);
    let sc = g.constant(Tensor::scalar(10.0));
    let bs = g.mul(x, sc).unwrap();
    assert_eq!(g.value(bs).data(), &[20.0, 30.0]);
    let wrong = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.add(x, wrong), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn vector_l2_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[3.0, 4.0]));
    let n = g.vector_l2(a, 0).unwrap();
    assert_eq!(g.value(n).data(), &[5.0]);
    let b = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
    let nb = g.vector_l2(b, 0).unwrap();
    assert!((g.value(nb).data()[0] - 1.7320508).abs() < 1e-7);

    let mut g = Graph::new();
    let z = g.param(Tensor::zeros(&[3]));
    let nz = g.vector_l2(z, 0).unwrap();
    assert_eq!(g.value(nz).data(), &[0.0]);
    g.backward(nz).unwrap();
    assert_eq!(g.grad(z).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_examples_and_errors() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
    let s = g.sum_all(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert_eq!(g.backward(s), Err(Error::BackwardTwice));

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[-1.0, 2.0]));
    let r = g.relu(x).unwrap();
    let s = g.sum_all(r).unwrap();
    assert!(matches!(g.backward(r), Err(Error::NotScalar { .. })));
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[3.0, 4.0]));
    let m = g.mul(x, c).unwrap();
    let s = g.sum_all(m).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::new();
    let a = g.constant(t(&[1], &[1.0]));
    let z = g.constant(t(&[1], &[0.0]));
    assert!(matches!(g.div(a, z), Err(Error::NonFinite { .. })));
}

#[test]
fn three_layer_composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [
        random(&mut rng, &[4, 4, 2]),
        random(&mut rng, &[3, 3, 2, 3]),
        random(&mut rng, &[3]),
        random(&mut rng, &[3, 3, 3, 2]),
    ];
    let err = grad_error(&inputs, |g, v| {
        let h = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let h = g.activation(h, Activation::Softplus)?;
        let h = g.conv2d(h, v[3], None, 1, 1)?;
        g.sigmoid(h)
    });
    assert!(err < ELEMENTARY_TOL, "{err}");
}

#[test]
fn grad_conv2d() {
    sweep(|rng| {
        let stride = rng.random_range(1..=2);
        let inputs = [random(rng, &[5, 4, 2]), random(rng, &[3, 3, 2, 3]), random(rng, &[3])];
        grad_error(&inputs, |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, 1))
    });
}

#[test]
fn grad_conv_transpose2d() {
    sweep(|rng| {
        let inputs = [random(rng, &[3, 2, 2]), random(rng, &[3, 3, 3, 2])];
        grad_error(&inputs, |g, v| g.conv_transpose2d(v[0], v[1]))
    });
}

#[test]
fn grad_maxpool2d() {
    sweep(|rng| {
        // Distinct values spaced well beyond the finite-difference step.
        let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.01).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        grad_error(&[t(&[4, 4, 2], &vals)], |g, v| g.maxpool2d(v[0]))
    });
}

#[test]
fn grad_activations() {
    for kind in [
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Softplus,
        Activation::ClampUnit,
        Activation::Abs,
    ] {
        sweep(|rng| {
            let x = random(rng, &[6]);
            let x = Tensor::new(&[6], x.data().iter().map(|v| v * 2.0).collect()).unwrap();
            let x = avoid(avoid(avoid(x, 0.0, 1e-3), 1.0, 1e-3), -1.0, 1e-3);
            grad_error(&[x], |g, v| g.activation(v[0], kind))
        });
    }
}

#[test]
fn grad_softmax() {
    sweep(|rng| {
        let axis = rng.random_range(0..2);
        grad_error(&[random(rng, &[3, 4])], |g, v| g.softmax_axis(v[0], axis))
    });
}

#[test]
fn grad_reduce() {
    sweep(|rng| {
        let kind = if rng.random_bool(0.5) { Reduction::Sum } else { Reduction::Mean };
        grad_error(&[random(rng, &[2, 3, 2])], |g, v| g.reduce(v[0], kind, &[0, 2]))
    });
}

#[test]
fn grad_elementwise() {
    for kind in [Binary::Add, Binary::Sub, Binary::Mul, Binary::Div] {
        sweep(|rng| {
            let a = random(rng, &[5]);
            let b = avoid(random(rng, &[5]), 0.0, 0.2);
            grad_error(&[a.clone(), b], |g, v| g.elementwise(v[0], v[1], kind))
                .max(grad_error(&[a, Tensor::scalar(0.7)], |g, v| g.elementwise(v[0], v[1], kind)))
        });
    }
}

#[test]
fn grad_vector_l2() {
    sweep(|rng| {
        let axis = rng.random_range(0..2);
        grad_error(&[random(rng, &[3, 4])], |g, v| g.vector_l2(v[0], axis))
    });
}

#[test]
fn grad_matrix_ops() {
    sweep(|rng| {
        let inputs = [random(rng, &[3, 4]), random(rng, &[4, 2]), random(rng, &[2])];
        grad_error(&inputs, |g, v| {
            let m = g.matmul(v[0], v[1])?;
            let b = g.broadcast_rows(v[2], 3)?;
            let m = g.add(m, b)?;
            let tr = g.transpose(m)?;
            let gathered = g.gather_rows(tr, &[1, 0, 1])?;
            let r = g.reshape(gathered, &[3, 3, 1])?;
            let c = g.concat_last(r, r)?;
            let c = g.scale(c, 1.5)?;
            g.add_scalar(c, -0.25)
        })
    });
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[6, 6, 2]);
    let k = random(&mut rng, &[3, 3, 2, 4]);
    let run = || {
        let mut g = Graph::new();
        let (xv, kv) = (g.param(x.clone()), g.param(k.clone()));
        let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
        let y = g.maxpool2d(y).unwrap();
        let l = g.sum_all(y).unwrap();
        g.backward(l).unwrap();
        (g.value(l).clone(), g.grad(kv).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], vals).unwrap());
        let s = g.softmax_axis(x, 1).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn delta_kernel_is_identity(vals in prop::collection::vec(-10.0f64..10.0, 5 * 3 * 2)) {
        let x = Tensor::new(&[5, 3, 2], vals).unwrap();
        let mut k = Tensor::zeros(&[3, 3, 2, 2]);
        k.data_mut()[(4 * 2) * 2] = 1.0;
        k.data_mut()[(4 * 2 + 1) * 2 + 1] = 1.0;
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k));
        let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
        prop_assert_eq!(g.value(y), &x);
    }

    #[test]
    fn maxpool_backward_conserves_mass(
        vals in prop::collection::vec(-3.0f64..3.0, 4 * 4 * 3),
        up in prop::collection::vec(-2.0f64..2.0, 2 * 2 * 3),
    ) {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[4, 4, 3], vals).unwrap());
        let y = g.maxpool2d(x).unwrap();
        let w = g.constant(Tensor::new(&[2, 2, 3], up.clone()).unwrap());
        let p = g.mul(y, w).unwrap();
        let l = g.sum_all(p).unwrap();
        g.backward(l).unwrap();
        let incoming: f64 = up.iter().sum();
        let outgoing: f64 = g.grad(x).unwrap().data().iter().sum();
        prop_assert!((incoming - outgoing).abs() < 1e-12);
    }
}

#[test]
fn unknown_var_rejected() {
    let mut g = Graph::new();
    let mut other = Graph::new();
    let _ = other.constant(Tensor::zeros(&[1]));
    let foreign = other.constant(Tensor::zeros(&[1]));
    assert_eq!(g.relu(foreign), Err(Error::UnknownVar(1)));
}
