use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backproject::{apply_plan, bilinear_tap, FeatureMap2D, PlanEntry, SamplePlan};
use crate::geometry::{GridSpec, Vec3};

use super::gradcheck::{central_difference, max_relative_error};
use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            // Keep magnitudes around 1 and away from relu/abs kinks.
            let v: f64 = rng.random_range(0.2..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// FD-checks the gradient of `build` (a scalar-producing tape program) with
/// respect to every tensor in `inputs`.
fn check_grads(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    tol: f64,
    what: &str,
) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(&format!("p{i}"), t.clone()))
        .collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_or_zero(v)).collect();

    let fd = central_difference(inputs, 1e-5, |xs| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).item()
    });

    for (i, (a, f)) in analytic.iter().zip(fd.iter()).enumerate() {
        let err = max_relative_error(a, f);
        assert!(err < tol, "{what}: input {i} rel err {err}");
    }
}

#[test]
fn linear_identity_passthrough() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data[i * 3 + i] = 1.0;
    }
    let w = tape.leaf(eye);
    let b = tape.leaf(Tensor::zeros(&[3]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn conv2d_delta_kernel_copies_channel() {
    let mut tape = Tape::new();
    let mut r = rng(5);
    let x = rand_tensor(&[1, 5, 6], &mut r);
    let xv = tape.leaf(x.clone());
    // One-hot kernel centered at (1, 1).
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.data[4] = 1.0;
    let wv = tape.leaf(w);
    let y = tape.conv2d(xv, wv, None, 1).unwrap();
    assert_eq!(tape.value(y).data, x.data);
}

#[test]
fn relu_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(&[3], vec![-3.0, 0.0, 5.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data, vec![0.0, 0.0, 5.0]);
}

#[test]
fn sum_of_products_gradient_is_the_other_factor() {
    // loss = sum_i w_i x_i via a [1, n] x [n, 1] linear.
    let mut tape = Tape::new();
    let x_data = vec![2.0, -1.0, 0.5, 3.0];
    let x = tape.leaf(Tensor::from_vec(&[1, 4], x_data.clone()));
    let w = tape.param("w", Tensor::from_vec(&[4, 1], vec![0.1, 0.2, 0.3, 0.4]));
    let y = tape.linear(x, w, None).unwrap();
    let loss = tape.mean(y);
    tape.backward(loss).unwrap();
    let g = tape.grad(w).unwrap();
    assert_eq!(g.data, x_data);
}

#[test]
fn disconnected_parameter_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param("x", Tensor::from_vec(&[2], vec![1.0, 2.0]));
    let unused = tape.param("unused", Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]));
    let loss = tape.mean(x);
    tape.backward(loss).unwrap();
    assert!(tape.grad(unused).is_none());
    assert_eq!(tape.grad_or_zero(unused).data, vec![0.0, 0.0, 0.0]);
}

#[test]
fn backward_before_forward_errors() {
    let mut donor = Tape::<f64>::new();
    let foreign = donor.leaf(Tensor::scalar(1.0));
    let mut tape = Tape::<f64>::new();
    assert!(matches!(
        tape.backward(foreign),
        Err(AutodiffError::BackwardBeforeForward)
    ));
}

#[test]
fn non_scalar_loss_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
    assert!(matches!(
        tape.backward(x),
        Err(AutodiffError::NonScalarLoss(_))
    ));
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(7);
    let x = rand_tensor(&[4, 10, 11, 9], &mut r);
    let w = rand_tensor(&[6, 4, 3, 3, 3], &mut r);
    let b = rand_tensor(&[6], &mut r);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let y = tape.conv3d(xv, wv, Some(bv), 2).unwrap();
        tape.value(y).data.clone()
    };
    let a = run();
    let b2 = run();
    assert!(a.iter().zip(b2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn shape_errors_name_the_layer() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2, 3]));
    let w = tape.leaf(Tensor::zeros(&[4, 5]));
    let err = tape.linear(x, w, None).unwrap_err();
    let msg = format!("{err}");
    assert!(msg.contains("linear"), "{msg}");
    assert!(msg.contains('3') && msg.contains('4'), "{msg}");
}

#[test]
fn grad_linear() {
    let mut r = rng(11);
    let inputs = vec![
        rand_tensor(&[3, 4], &mut r),
        rand_tensor(&[4, 2], &mut r),
        rand_tensor(&[2], &mut r),
    ];
    check_grads(
        &inputs,
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
            let y = t.relu(y);
            t.mean(y)
        },
        1e-4,
        "linear+relu",
    );
}

#[test]
fn grad_conv2d_strides() {
    let mut r = rng(13);
    for stride in [1, 2] {
        let inputs = vec![
            rand_tensor(&[2, 5, 6], &mut r),
            rand_tensor(&[3, 2, 3, 3], &mut r),
            rand_tensor(&[3], &mut r),
        ];
        check_grads(
            &inputs,
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride).unwrap();
                let y = t.sigmoid(y);
                t.mean(y)
            },
            1e-4,
            "conv2d",
        );
    }
}

#[test]
fn grad_conv3d_strides() {
    let mut r = rng(17);
    for stride in [1, 2] {
        let inputs = vec![
            rand_tensor(&[2, 4, 5, 3], &mut r),
            rand_tensor(&[3, 2, 3, 3, 3], &mut r),
            rand_tensor(&[3], &mut r),
        ];
        check_grads(
            &inputs,
            |t, v| {
                let y = t.conv3d(v[0], v[1], Some(v[2]), stride).unwrap();
                let y = t.relu(y);
                t.mean(y)
            },
            1e-4,
            "conv3d",
        );
    }
}

#[test]
fn grad_pointwise_ops() {
    let mut r = rng(19);
    let inputs = vec![rand_tensor(&[7], &mut r)];
    check_grads(
        &inputs,
        |t, v| {
            let a = t.sigmoid(v[0]);
            let b = t.tlog(a);
            let c = t.abs(b);
            t.mean(c)
        },
        1e-4,
        "sigmoid+tlog+abs",
    );
    check_grads(
        &inputs,
        |t, v| {
            // Clamp bounds chosen away from the input values.
            let a = t.clamp(v[0], -0.95, 0.95);
            t.mean(a)
        },
        1e-4,
        "clamp",
    );
}

#[test]
fn grad_add_sub_concat_rows() {
    let mut r = rng(23);
    let inputs = vec![
        rand_tensor(&[2, 3, 2, 2], &mut r),
        rand_tensor(&[3, 3, 2, 2], &mut r),
    ];
    check_grads(
        &inputs,
        |t, v| {
            let c = t.concat(&[v[0], v[1]], 0).unwrap();
            let rows = t.channels_to_rows(c).unwrap();
            let s = t.sub(rows, rows).unwrap();
            let a = t.add(s, rows).unwrap();
            t.mean(a)
        },
        1e-4,
        "concat/channels_to_rows/add/sub",
    );
}

#[test]
fn grad_upsample_pad_crop() {
    let mut r = rng(29);
    let inputs = vec![rand_tensor(&[2, 2, 3, 2], &mut r)];
    check_grads(
        &inputs,
        |t, v| {
            let p = t.pad3d(v[0], [4, 4, 4]).unwrap();
            let u = t.nearest_upsample3d(p).unwrap();
            let c = t.crop3d(u, [5, 6, 7]).unwrap();
            t.mean(c)
        },
        1e-4,
        "pad/upsample/crop",
    );
}

#[test]
fn grad_bce() {
    let mut r = rng(31);
    let raw = rand_tensor(&[6, 1], &mut r);
    let target = Tensor::from_vec(&[6, 1], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    check_grads(
        &[raw],
        |t, v| {
            let p = t.sigmoid(v[0]);
            let p = t.clamp(p, 1e-7, 1.0 - 1e-7);
            let l = t.bce(p, target.clone()).unwrap();
            t.mean(l)
        },
        1e-4,
        "sigmoid+clamp+bce",
    );
}

#[test]
fn grad_sample_trilinear() {
    let mut r = rng(37);
    let spec = GridSpec::new(Vec3::from_f64(0.0, 0.0, 0.0), 0.1, [3, 4, 3]);
    let points: Vec<Vec3<f64>> = (0..10)
        .map(|_| {
            Vec3::new(
                r.random_range(0.0..0.2),
                r.random_range(0.0..0.3),
                r.random_range(0.0..0.2),
            )
        })
        .collect();
    let plan = Arc::new(trilinear_plan(&spec, &points));
    let vol = rand_tensor(&[2, 3, 4, 3], &mut r);
    check_grads(
        &[vol],
        |t, v| {
            let s = t.sample_trilinear(v[0], Arc::clone(&plan)).unwrap();
            let s = t.tlog(s);
            t.mean(s)
        },
        1e-4,
        "sample_trilinear",
    );
}

fn toy_sample_plan(rng_seed: u64) -> (Arc<SamplePlan<f64>>, [usize; 2]) {
    let mut r = rng(rng_seed);
    let (w, h) = (5, 4);
    let mut per_view = vec![Vec::new(), Vec::new()];
    let n_targets = 6;
    let mut validity = vec![0u32; n_targets];
    for target in 0..n_targets {
        let n_views = 1 + (target % 2);
        let mut coeffs = vec![0.0; n_views];
        let total: f64 = {
            for c in coeffs.iter_mut() {
                *c = r.random_range(0.1..1.0);
            }
            coeffs.iter().sum()
        };
        for (view, c) in coeffs.iter().enumerate() {
            validity[target] += 1;
            per_view[view].push(PlanEntry {
                target: target as u32,
                tap: bilinear_tap(w, h, r.random_range(0.0..(w - 1) as f64), r.random_range(0.0..(h - 1) as f64)),
                coeff: c / total,
            });
        }
    }
    (
        Arc::new(SamplePlan {
            per_view,
            validity,
            n_targets,
        }),
        [w, h],
    )
}

#[test]
fn sample_views_matches_pure_backprojection() {
    let (plan, [w, h]) = toy_sample_plan(41);
    let mut r = rng(43);
    let maps_t = [rand_tensor(&[3, h, w], &mut r), rand_tensor(&[3, h, w], &mut r)];
    let maps: Vec<FeatureMap2D<f64>> = maps_t
        .iter()
        .map(|t| FeatureMap2D {
            width: w,
            height: h,
            channels: 3,
            stride: 1,
            data: t.data.clone(),
        })
        .collect();
    let pure = apply_plan(&plan, &maps, 3);
    let mut tape = Tape::new();
    let vars: Vec<Var> = maps_t.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = tape.sample_views(&vars, Arc::clone(&plan)).unwrap();
    assert_eq!(tape.value(out).data, pure);
}

#[test]
fn grad_sample_views() {
    let (plan, [w, h]) = toy_sample_plan(47);
    let mut r = rng(53);
    let inputs = vec![rand_tensor(&[2, h, w], &mut r), rand_tensor(&[2, h, w], &mut r)];
    check_grads(
        &inputs,
        |t, v| {
            let s = t.sample_views(v, Arc::clone(&plan)).unwrap();
            let rows = t.channels_to_rows(s).unwrap();
            let a = t.abs(rows);
            t.mean(a)
        },
        1e-4,
        "sample_views",
    );
}

#[test]
fn layer_spec_apply_covers_the_zoo() {
    let mut r = rng(59);
    // Every LayerSpec kind drives the corresponding op and FD-checks it.
    let x2 = rand_tensor(&[2, 4, 4], &mut r);
    let w2 = rand_tensor(&[2, 2, 3, 3], &mut r);
    let b2 = rand_tensor(&[2], &mut r);
    check_grads(
        &[x2, w2, b2],
        |t, v| {
            let spec = LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 2,
                kernel: 3,
                stride: 2,
                bias: true,
            };
            let y = spec.apply(t, &v[..1], &v[1..]).unwrap();
            let y = LayerSpec::Relu.apply(t, &[y], &[]).unwrap();
            LayerSpec::Mean.apply(t, &[y], &[]).unwrap()
        },
        1e-4,
        "layer_spec conv2d",
    );

    let x3 = rand_tensor(&[1, 2, 2, 2], &mut r);
    let w3 = rand_tensor(&[2, 1, 1, 1, 1], &mut r);
    check_grads(
        &[x3, w3],
        |t, v| {
            let spec = LayerSpec::Conv3d {
                in_channels: 1,
                out_channels: 2,
                kernel: 1,
                stride: 1,
                bias: false,
            };
            let y = spec.apply(t, &v[..1], &v[1..]).unwrap();
            let u = LayerSpec::NearestUpsample3d.apply(t, &[y], &[]).unwrap();
            let c = LayerSpec::Concat.apply(t, &[u, u], &[]).unwrap();
            let s = LayerSpec::Sigmoid.apply(t, &[c], &[]).unwrap();
            LayerSpec::Mean.apply(t, &[s], &[]).unwrap()
        },
        1e-4,
        "layer_spec conv3d zoo",
    );
}

#[test]
fn tlog_identities() {
    let mut tape = Tape::new();
    let e = std::f64::consts::E;
    let x = tape.leaf(Tensor::from_vec(&[3], vec![0.0, e - 1.0, -(e - 1.0)]));
    let y = tape.tlog(x);
    let out = &tape.value(y).data;
    assert_eq!(out[0], 0.0);
    assert!((out[1] - 1.0).abs() < 1e-12);
    assert!((out[2] + 1.0).abs() < 1e-12);
}
