use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triplex_tensor::gradcheck::{grad_check, grad_check_many};
use triplex_tensor::{Conv2dSpec, Graph, Padding, Tensor, TensorError, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[3], &[0.0, 0.0, 0.0]));
    let y = g.softmax(x);
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn matmul_by_identity_returns_operand() {
    let mut g = Graph::<f64>::new();
    let a = Tensor::randn([3, 3], 1.0, &mut rng(1));
    let i = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let y = g.matmul(i, av).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn box_filter_keeps_constant_image_in_interior() {
    let mut g = Graph::<f64>::new();
    let c = 2.5;
    let img = g.constant(Tensor::full([1, 1, 6, 6], c));
    let w = g.constant(Tensor::full([1, 1, 3, 3], 1.0 / 9.0));
    let y = g.conv2d(img, w, None, Conv2dSpec::default()).unwrap();
    let out = g.value(y);
    for r in 1..5 {
        for col in 1..5 {
            assert!((out.get(&[0, 0, r, col]) - c).abs() < 1e-12);
        }
    }
    // zero padding lowers the border
    assert!(out.get(&[0, 0, 0, 0]) < c);
}

#[test]
fn replicate_padding_keeps_constant_everywhere() {
    let mut g = Graph::<f64>::new();
    let img = g.constant(Tensor::full([1, 2, 5, 5], 1.5));
    let w = g.constant(Tensor::full([3, 2, 3, 3], 1.0 / 18.0));
    let spec = Conv2dSpec {
        stride: 2,
        padding: Padding::Replicate,
        groups: 1,
    };
    let y = g.conv2d(img, w, None, spec).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 3, 3]);
    for &v in g.value(y).data() {
        assert!((v - 1.5).abs() < 1e-12);
    }
}

#[test]
fn gradient_of_sum_of_squares() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t64(&[2], &[1.0, 2.0]));
    let sq = g.square(x);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::randn([4, 3], 1.0, &mut rng(2)));
    let loss = g.sum(x);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn fan_out_accumulates() {
    // y = x*x + 3x at x=2 -> dy/dx = 2x + 3 = 7
    let mut g = Graph::<f64>::new();
    let x = g.param(t64(&[1], &[2.0]));
    let a = g.square(x);
    let b = g.scale(x, 3.0);
    let y = g.add(a, b).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t64(&[2], &[1.0, 2.0]));
    let y = g.scale(x, 2.0);
    assert_eq!(
        g.backward(y).unwrap_err(),
        TensorError::NonScalarLoss(vec![2])
    );
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.backward(s).unwrap_err(), TensorError::GraphConsumed);
}

#[test]
fn untouched_leaves_get_zero_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t64(&[2], &[1.0, 2.0]));
    let unused = g.param(t64(&[3], &[1.0, 2.0, 3.0]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
}

#[test]
fn shape_errors_name_the_op_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([4, 2]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![4, 2]
        }
    );
    assert!(err.to_string().contains("matmul"));
    let err = g.add(a, b).unwrap_err();
    assert!(matches!(err, TensorError::ShapeMismatch { op: "add", .. }));
}

#[test]
fn mse_of_linear_map_matches_finite_differences() {
    let mut r = rng(3);
    let w = Tensor::<f64>::randn([4, 4], 1.0, &mut r);
    let x = Tensor::<f64>::randn([1, 4], 1.0, &mut r);
    let y = Tensor::<f64>::randn([1, 4], 1.0, &mut r);
    let err = grad_check(
        |g, wv| {
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let p = g.matmul(xv, wv)?;
            let d = g.sub(p, yv)?;
            let sq = g.square(d);
            Ok(g.mean(sq))
        },
        &w,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn sum_of_sines_gradient() {
    let x = Tensor::<f64>::randn([10], 1.0, &mut rng(4));
    let err = grad_check(
        |g, v| {
            Ok({
                let s = g.sin(v);
                g.sum(s)
            })
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
    let err = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-4).unwrap();
    assert!(err < 1e-9);
}

#[test]
fn grad_check_rejects_non_finite_objective() {
    let x = t64(&[2], &[1.0, 2.0]);
    let res = grad_check(
        |g, v| {
            let s = g.scale(v, f64::INFINITY);
            Ok(g.sum(s))
        },
        &x,
        1e-4,
    );
    assert!(matches!(res, Err(TensorError::NonFinite(_))));
}

/// Reduces any output to a scalar with fixed random weights, so that every
/// output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> triplex_tensor::Result<Var> {
    let w = Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng(seed));
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn check_primitive<F>(shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> triplex_tensor::Result<Var>,
{
    for trial in 0..10u64 {
        let mut r = rng(100 + trial);
        let xs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| Tensor::randn(s.to_vec(), 1.0, &mut r))
            .collect();
        let report = grad_check_many(
            |g, v| {
                let y = f(g, v)?;
                weighted_sum(g, y, 7 + trial)
            },
            &xs,
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_relative_error < 1e-6,
            "trial {trial}: error {} at {:?}",
            report.max_relative_error,
            report.worst
        );
    }
}

#[test]
fn primitive_gradients_match_central_differences() {
    check_primitive(&[&[2, 3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    check_primitive(&[&[2, 3, 4], &[4]], |g, v| g.sub(v[0], v[1]));
    check_primitive(&[&[2, 3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check_primitive(&[&[3, 4]], |g, v| Ok(g.scale(v[0], -1.7)));
    check_primitive(&[&[3, 4]], |g, v| Ok(g.gelu(v[0])));
    check_primitive(&[&[3, 4]], |g, v| Ok(g.sin(v[0])));
    check_primitive(&[&[2, 3, 5], &[5, 4]], |g, v| g.matmul(v[0], v[1]));
    check_primitive(&[&[2, 3, 5], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], false));
    check_primitive(&[&[2, 3, 5], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], true));
    check_primitive(&[&[3, 6]], |g, v| Ok(g.softmax(v[0])));
    check_primitive(&[&[3, 6], &[6], &[6]], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    check_primitive(&[&[2, 3, 4]], |g, v| g.mean_axis(v[0], 1));
    check_primitive(&[&[2, 3, 4]], |g, v| g.mean_axis(v[0], 0));
    check_primitive(&[&[2, 3], &[2, 2]], |g, v| g.concat(&[v[0], v[1]], 1));
    check_primitive(&[&[2, 3, 4]], |g, v| g.reshape(v[0], &[6, 4]));
    check_primitive(&[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
    check_primitive(&[&[4, 3]], |g, v| g.gather_rows(v[0], &[3, 0, 3, 1]));
    check_primitive(&[&[3, 2]], |g, v| g.scatter_rows(v[0], &[4, 0, 2], 5));
    check_primitive(&[&[2, 2, 4, 4]], |g, v| g.avg_pool2d(v[0], 2));
    check_primitive(&[&[3]], |g, v| Ok(g.mean(v[0])));
    check_primitive(&[&[2, 4, 5, 5], &[6, 2, 3, 3], &[6]], |g, v| {
        let spec = Conv2dSpec {
            stride: 1,
            padding: Padding::Zeros,
            groups: 2,
        };
        g.conv2d(v[0], v[1], Some(v[2]), spec)
    });
    check_primitive(&[&[1, 3, 6, 5], &[3, 1, 3, 3]], |g, v| {
        let spec = Conv2dSpec {
            stride: 1,
            padding: Padding::Zeros,
            groups: 3,
        };
        g.conv2d(v[0], v[1], None, spec)
    });
    check_primitive(&[&[2, 2, 7, 7], &[3, 2, 3, 3], &[3]], |g, v| {
        let spec = Conv2dSpec {
            stride: 2,
            padding: Padding::Replicate,
            groups: 1,
        };
        g.conv2d(v[0], v[1], Some(v[2]), spec)
    });
}

#[test]
fn relu_gradient_away_from_kink() {
    // shift inputs away from zero so central differences never straddle the kink
    let x = Tensor::<f64>::from_fn([12], |i| {
        if i % 2 == 0 {
            0.5 + i as f64
        } else {
            -0.5 - i as f64
        }
    });
    let err = grad_check(
        |g, v| {
            let r = g.relu(v);
            weighted_sum(g, r, 3)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8);
}

#[test]
fn detach_stops_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t64(&[2], &[1.0, 2.0]));
    let d = g.detach(x);
    let p = g.mul(x, d).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    // d(x * stop(x))/dx = stop(x)
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(seed in 0u64..10_000, scale in 0.5f64..20.0) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn([4, 16], scale, &mut rng(seed)));
        let gamma = g.constant(Tensor::ones([16]));
        let beta = g.constant(Tensor::zeros([16]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for row in g.value(y).data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn reshape_and_permute_round_trip(seed in 0u64..10_000) {
        let t = Tensor::<f32>::randn([2, 3, 4], 1.0, &mut rng(seed));
        let mut g = Graph::<f32>::new();
        let x = g.constant(t.clone());
        let p = g.permute(x, &[1, 2, 0]).unwrap();
        let back = g.permute(p, &[2, 0, 1]).unwrap();
        prop_assert_eq!(g.value(back), &t);
        let r = g.reshape(x, &[24]).unwrap();
        let r2 = g.reshape(r, &[2, 3, 4]).unwrap();
        prop_assert_eq!(g.value(r2).data(), t.data());
    }
}
