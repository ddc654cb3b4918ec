use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tasnet_autodiff::{
    grad_check, ConvGeometry, CustomBackward, GradCheckOptions, Graph, NormKind, Padding, Tensor, Var,
};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    }
}

fn random_geometry(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, ConvGeometry) {
    let groups = [1usize, 1, 2, 3][rng.gen_range(0..4)];
    let c_in = groups * rng.gen_range(1..4);
    let c_out = groups * rng.gen_range(1..4);
    let kernel = rng.gen_range(1..5);
    let padding = [Padding::None, Padding::SameCausal, Padding::SameCentered][rng.gen_range(0..3)];
    let geom = ConvGeometry::new(rng.gen_range(1..4), rng.gen_range(1..4), groups, padding);
    (c_in, c_out, kernel, groups, geom)
}

#[test]
fn conv_single_tap_identity() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::signal(vec![0.5, -1.0, 2.0, 3.5]));
    let w = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let y = g.conv1d(x, w, None, ConvGeometry::default()).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 3.5]);
}

#[test]
fn conv_hand_example() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::signal(vec![1.0, 1.0, 2.0, 3.0]));
    let w = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
    let y = g.conv1d(x, w, None, ConvGeometry::new(2, 1, 1, Padding::None)).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 5.0]);
    let y = g.conv1d(x, w, None, ConvGeometry::default()).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 3.0, 5.0]);
}

#[test]
fn conv_two_tap_stride_one_no_padding() {
    // one channel holding 1, 2, 3 against kernel [1, 1]
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::signal(vec![1.0, 2.0, 3.0]));
    let w = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
    let y = g.conv1d(x, w, None, ConvGeometry::default()).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 5.0]);
}

#[test]
fn conv_padding_modes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::signal(vec![1.0, 2.0, 3.0]));
    let w = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 10.0, 100.0]).unwrap());
    let causal = g.conv1d(x, w, None, ConvGeometry::new(1, 1, 1, Padding::SameCausal)).unwrap();
    // y[t] = x[t-2] + 10 x[t-1] + 100 x[t]
    assert_eq!(g.value(causal).data(), &[100.0, 210.0, 321.0]);
    let centered = g.conv1d(x, w, None, ConvGeometry::new(1, 1, 1, Padding::SameCentered)).unwrap();
    assert_eq!(g.value(centered).data(), &[210.0, 321.0, 32.0]);
}

#[test]
fn conv_shape_errors_name_dimension() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[3, 10]));
    let w = g.constant(Tensor::zeros(&[4, 2, 3]));
    let err = g.conv1d(x, w, None, ConvGeometry::default()).unwrap_err();
    assert!(err.to_string().contains("weight input channels"), "{err}");
    let w = g.constant(Tensor::zeros(&[4, 3, 3]));
    let b = g.constant(Tensor::zeros(&[5]));
    let err = g.conv1d(x, w, Some(b), ConvGeometry::default()).unwrap_err();
    assert!(err.to_string().contains("bias length"), "{err}");
    let w = g.constant(Tensor::zeros(&[4, 1, 3]));
    assert!(g.conv1d(x, w, None, ConvGeometry::new(1, 1, 2, Padding::None)).is_err());
}

#[test]
fn conv_three_channel_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        rand_tensor(&mut rng, &[3, 17]),
        rand_tensor(&mut rng, &[4, 3, 3]),
        rand_tensor(&mut rng, &[4]),
    ];
    let report = grad_check(
        &inputs,
        |g, v| g.conv1d(v[0], v[1], Some(v[2]), ConvGeometry::new(1, 2, 1, Padding::SameCentered)),
        &opts(1),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn conv_gradients_over_random_geometries() {
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c_in, c_out, kernel, groups, geom) = random_geometry(&mut rng);
        let t = rng.gen_range(12..30);
        let inputs = vec![
            rand_tensor(&mut rng, &[c_in, t]),
            rand_tensor(&mut rng, &[c_out, c_in / groups, kernel]),
            rand_tensor(&mut rng, &[c_out]),
        ];
        let report = grad_check(&inputs, |g, v| g.conv1d(v[0], v[1], Some(v[2]), geom), &opts(seed)).unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed} {geom:?}: {report:?}");
    }
}

#[test]
fn transposed_conv_single_frame_and_abutting() {
    let mut g = Graph::<f64>::new();
    let k = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let w = g.constant(k);
    let x = g.constant(Tensor::signal(vec![2.0]));
    let y = g.conv_transpose1d(x, w, None, 3).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0]);
    let x = g.constant(Tensor::signal(vec![1.0, 1.0]));
    let y = g.conv_transpose1d(x, w, None, 3).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    // overlapping frames add
    let y = g.conv_transpose1d(x, w, None, 1).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 3.0, 5.0, 3.0]);
}

#[test]
fn transposed_conv_gradient() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (c_in, c_out, p) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..6));
        let stride = rng.gen_range(1..5);
        let frames = rng.gen_range(1..9);
        let inputs = vec![
            rand_tensor(&mut rng, &[c_in, frames]),
            rand_tensor(&mut rng, &[c_in, c_out, p]),
            rand_tensor(&mut rng, &[c_out]),
        ];
        let report = grad_check(&inputs, |g, v| g.conv_transpose1d(v[0], v[1], Some(v[2]), stride), &opts(seed)).unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

/// <conv(x), y> - <x, convT(y)> for one random geometry.
fn adjoint_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c_in, c_out) = (rng.gen_range(1..6), rng.gen_range(1..6));
    let p = rng.gen_range(1..9);
    let stride = rng.gen_range(1..6);
    let t = p + rng.gen_range(0..40);
    let x = rand_tensor(&mut rng, &[c_in, t]);
    let w = rand_tensor(&mut rng, &[c_out, c_in, p]);
    let mut g = Graph::<f64>::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w));
    let cx = g.conv1d(xv, wv, None, ConvGeometry::new(stride, 1, 1, Padding::None)).unwrap();
    let t_out = g.value(cx).dim(1);
    let y = rand_tensor(&mut rng, &[c_out, t_out]);
    let yv = g.constant(y.clone());
    let cty = g.conv_transpose1d(yv, wv, None, stride).unwrap();
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rec_len = g.value(cty).dim(1);
    assert!(rec_len <= t);
    let mut rhs = 0.0;
    for c in 0..c_in {
        for j in 0..rec_len {
            rhs += x.data()[c * t + j] * g.value(cty).data()[c * rec_len + j];
        }
    }
    (lhs - rhs).abs()
}

#[test]
fn conv_and_transpose_are_adjoint() {
    for seed in 0..100 {
        let gap = adjoint_gap(seed);
        assert!(gap < 1e-10, "seed {seed}: gap {gap}");
    }
}

#[test]
fn prelu_limits_and_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![2, 2], vec![-1.0, 2.0, -3.0, 4.0]).unwrap());
    let a0 = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let y = g.prelu(x, a0).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 2.0, 0.0, 4.0]);
    let a1 = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let y = g.prelu(x, a1).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
    let bad = g.constant(Tensor::zeros(&[3]));
    assert!(g.prelu(x, bad).is_err());

    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let c = rng.gen_range(1..5);
        let t = rng.gen_range(1..12);
        let inputs = vec![rand_tensor(&mut rng, &[c, t]), rand_tensor(&mut rng, &[c])];
        let report = grad_check(&inputs, |g, v| g.prelu(v[0], v[1]), &opts(seed)).unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn sigmoid_and_relu() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::signal(vec![0.0, -2.0, 3.0]));
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).data()[0], 0.5);
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let shape = [rng.gen_range(1..4), rng.gen_range(1..10)];
        let inputs = vec![rand_tensor(&mut rng, &shape)];
        let report = grad_check(&inputs, |g, v| g.sigmoid(v[0]), &opts(seed)).unwrap();
        assert!(report.max_rel_error < 1e-6, "seed {seed}: {report:?}");
        let report = grad_check(&inputs, |g, v| g.relu(v[0]), &opts(seed)).unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

fn norm_graph(g: &mut Graph<f64>, kind: NormKind, x: Tensor<f64>) -> Var {
    let c = x.dim(0);
    let x = g.constant(x);
    let gain = g.constant(Tensor::full(&[c], 1.0));
    let bias = g.constant(Tensor::zeros(&[c]));
    g.layer_norm(kind, x, gain, bias).unwrap()
}

#[test]
fn layer_norm_constant_input_is_zero() {
    for kind in [NormKind::Global, NormKind::Cumulative] {
        let mut g = Graph::new();
        let y = norm_graph(&mut g, kind, Tensor::full(&[4, 6], 0.7));
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-6), "{kind:?}");
    }
}

#[test]
fn layer_norm_single_frame_global_equals_cumulative() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[7, 1]);
    let mut g = Graph::new();
    let a = norm_graph(&mut g, NormKind::Global, x.clone());
    let b = norm_graph(&mut g, NormKind::Cumulative, x);
    assert_eq!(g.value(a).data(), g.value(b).data());
}

#[test]
fn layer_norm_global_statistics() {
    let mut g = Graph::new();
    let y = norm_graph(&mut g, NormKind::Global, Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let v = g.value(y).data();
    let mean: f64 = v.iter().sum::<f64>() / 4.0;
    let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_gradients() {
    for kind in [NormKind::Global, NormKind::Cumulative] {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let c = rng.gen_range(1..5);
            let k = rng.gen_range(1..9);
            let inputs = vec![
                rand_tensor(&mut rng, &[c, k]),
                rand_tensor(&mut rng, &[c]),
                rand_tensor(&mut rng, &[c]),
            ];
            let report = grad_check(&inputs, |g, v| g.layer_norm(kind, v[0], v[1], v[2]), &opts(seed)).unwrap();
            assert!(report.max_rel_error < 1e-4, "{kind:?} seed {seed}: {report:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cumulative_norm_is_causal(seed in 0u64..10_000, c in 1usize..5, k in 2usize..12, cut in 0usize..11) {
        let cut = cut % (k - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[c, k]);
        let mut x2 = x.clone();
        for ch in 0..c {
            for j in cut + 1..k {
                x2.data_mut()[ch * k + j] += rng.gen_range(-5.0..5.0);
            }
        }
        let mut g = Graph::new();
        let a = norm_graph(&mut g, NormKind::Cumulative, x);
        let b = norm_graph(&mut g, NormKind::Cumulative, x2);
        for ch in 0..c {
            for j in 0..=cut {
                prop_assert_eq!(g.value(a).data()[ch * k + j], g.value(b).data()[ch * k + j]);
            }
        }
    }

    #[test]
    fn adjoint_identity_holds(seed in 1000u64..100_000) {
        prop_assert!(adjoint_gap(seed) < 1e-10);
    }
}

#[test]
fn shape_ops_gradients() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let c = rng.gen_range(1..4);
        let t = rng.gen_range(2..10);
        let inputs = vec![rand_tensor(&mut rng, &[c, t]), rand_tensor(&mut rng, &[c + 1, t * 2])];
        let report = grad_check(
            &inputs,
            |g, v| {
                let up = g.upsample_nearest(v[0], 2)?;
                let cat = g.concat_channels(up, v[1])?;
                let nar = g.narrow_channels(cat, 1, c)?;
                let win = g.window_time(nar, -2, t * 2 + 3)?;
                let sq = g.mul(win, win)?;
                g.add(sq, win)
            },
            &opts(seed),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn dropout_mask_is_seeded_and_train_only() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[4, 50], 1.0));
    assert_eq!(g.dropout(x, 0.5, 1).unwrap(), x);
    g.set_training(true);
    let a = g.dropout(x, 0.5, 1).unwrap();
    let b = g.dropout(x, 0.5, 1).unwrap();
    assert_eq!(g.value(a).data(), g.value(b).data());
    let kept = g.value(a).data().iter().filter(|&&v| v > 0.0).count();
    assert!(kept > 50 && kept < 150);
    assert!(g.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![rand_tensor(&mut rng, &[3, 8])];
    let report = grad_check(
        &inputs,
        |g, v| {
            g.set_training(true);
            g.dropout(v[0], 0.3, 11)
        },
        &opts(0),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6);
}

#[test]
fn grad_check_linear_graph_is_exact() {
    let inputs = vec![
        Tensor::new(vec![1, 1, 1], vec![0.75]).unwrap(),
        Tensor::signal(vec![1.5, -2.0, 0.25]),
    ];
    let report = grad_check(&inputs, |g, v| g.conv1d(v[1], v[0], None, ConvGeometry::default()), &opts(0)).unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
}

struct Square;
struct FlippedSquare;

impl CustomBackward<f64> for Square {
    fn name(&self) -> &'static str {
        "square"
    }
    fn backward(&self, inputs: &[&Tensor<f64>], _: &Tensor<f64>, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(inputs[0].data().iter().zip(grad).map(|(x, g)| 2.0 * x * g).collect())]
    }
}

impl CustomBackward<f64> for FlippedSquare {
    fn name(&self) -> &'static str {
        "flipped_square"
    }
    fn backward(&self, inputs: &[&Tensor<f64>], _: &Tensor<f64>, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(inputs[0].data().iter().zip(grad).map(|(x, g)| -2.0 * x * g).collect())]
    }
}

fn square_graph(g: &mut Graph<f64>, x: Var, flipped: bool) -> tasnet_autodiff::Result<Var> {
    let v = g.value(x);
    let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * a).collect())?;
    let rule: Box<dyn CustomBackward<f64>> = if flipped { Box::new(FlippedSquare) } else { Box::new(Square) };
    g.custom(&[x], out, rule)
}

#[test]
fn grad_check_detects_sign_flip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![rand_tensor(&mut rng, &[2, 6])];
    let good = grad_check(&inputs, |g, v| square_graph(g, v[0], false), &opts(0)).unwrap();
    assert!(good.max_rel_error < 1e-6);
    let bad = grad_check(&inputs, |g, v| square_graph(g, v[0], true), &opts(0)).unwrap();
    assert!((bad.max_rel_error - 2.0).abs() < 1e-6, "{bad:?}");
}

#[test]
fn kink_screen_skips_only_probes_straddling_a_kink() {
    // 1e-6 is inside the 1e-5 step but outside 1e-6 / 10; 1e-8 is inside all three.
    let inputs = vec![Tensor::signal(vec![1e-6, 1e-8, 0.5, -0.3])];
    let plain = grad_check(&inputs, |g, v| g.relu(v[0]), &opts(0)).unwrap();
    assert!((plain.max_rel_error - 0.4995).abs() < 1e-6, "{plain:?}");
    let screened = GradCheckOptions {
        kink_tol: Some(1e-3),
        ..opts(0)
    };
    let r = grad_check(&inputs, |g, v| g.relu(v[0]), &screened).unwrap();
    assert_eq!((r.probes, r.skipped), (3, 1));
    assert!(r.max_rel_error < 1e-9, "{r:?}");
    // A wrong rule on a smooth function is still caught.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![rand_tensor(&mut rng, &[2, 6])];
    let bad = grad_check(&inputs, |g, v| square_graph(g, v[0], true), &screened).unwrap();
    assert_eq!(bad.skipped, 0);
    assert!((bad.max_rel_error - 2.0).abs() < 1e-6);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::signal(vec![1.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert!(g.backward(y).is_err());
}

#[test]
fn inference_graph_releases_values() {
    let mut g = Graph::<f32>::inference();
    let x = g.param(Tensor::signal(vec![1.0, -2.0]));
    assert!(!g.requires_grad(x));
    let y = g.relu(x).unwrap();
    g.release(x);
    assert_eq!(g.value(x).numel(), 0);
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn forward_is_deterministic_in_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[8, 300]).cast::<f32>();
    let w = rand_tensor(&mut rng, &[16, 8, 3]).cast::<f32>();
    let run = || {
        let mut g = Graph::<f32>::inference();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv1d(xv, wv, None, ConvGeometry::new(1, 4, 1, Padding::SameCentered)).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}
