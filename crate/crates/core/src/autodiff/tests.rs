use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, v.to_vec()).unwrap()
}

#[test]
fn grad_of_sum_is_ones() {
    let g = Graph::<f64>::new();
    let x = g.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn grad_of_square_sum_is_twice_x() {
    let g = Graph::<f64>::new();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 0.25]), true);
    let loss = g.sum(g.mul(x, x).unwrap()).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 0.5]);
}

#[test]
fn second_backward_is_an_error() {
    let g = Graph::<f64>::new();
    let x = g.leaf(t(&[1], &[1.0]), true);
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    assert!(g.backward(loss).is_err());
}

#[test]
fn non_scalar_loss_is_an_error() {
    let g = Graph::<f64>::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
    assert!(g.backward(x).is_err());
}

#[test]
fn variable_from_other_graph_is_rejected() {
    let g1 = Graph::<f64>::new();
    let g2 = Graph::<f64>::new();
    let x = g1.leaf(t(&[1], &[1.0]), true);
    assert!(g2.sum(x).is_err());
    let mut g3 = Graph::<f64>::new();
    let y = g3.leaf(t(&[1], &[1.0]), true);
    g3.reset();
    assert!(g3.sum(y).is_err());
}

#[test]
fn conv2d_all_ones_corner_is_nine() {
    let g = Graph::<f64>::new();
    let x = g.input(Tensor::full(&[1, 1, 4, 4], 1.0));
    let w = g.input(Tensor::full(&[1, 1, 4, 4], 1.0));
    let y = g.conv2d(x, w, 2, 1).unwrap();
    assert_eq!(g.shape(y), vec![1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[9.0; 4]);
}

#[test]
fn conv2d_zero_weight_gives_zero() {
    let g = Graph::<f64>::new();
    let x = g.input(Tensor::from_fn(&[2, 3, 6, 6], |i| i as f64));
    let w = g.input(Tensor::zeros(&[4, 3, 4, 4]));
    let y = g.conv2d(x, w, 2, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_channel_mismatch_names_axis() {
    let g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.input(Tensor::zeros(&[1, 3, 4, 4]));
    match g.conv2d(x, w, 2, 1) {
        Err(Error::Dimension { axis, expected: 3, actual: 2 }) => assert!(axis.contains("channels")),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn transposed_conv_of_single_pixel_is_central_crop() {
    let g = Graph::<f64>::new();
    let v = 1.5;
    let x = g.input(Tensor::full(&[1, 1, 1, 1], v));
    let wt = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 + 1.0);
    let w = g.input(wt.clone());
    let y = g.conv_transpose2d(x, w, 2, 1).unwrap();
    assert_eq!(g.shape(y), vec![1, 1, 2, 2]);
    let expected: Vec<f64> = [5, 6, 9, 10].iter().map(|&i| v * wt.data()[i]).collect();
    assert_eq!(g.value(y).data(), &expected[..]);
}

#[test]
fn transposed_conv_zero_input_gives_zero() {
    let g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[2, 3, 4, 4]));
    let w = g.input(Tensor::from_fn(&[3, 2, 4, 4], |i| i as f64));
    let y = g.conv_transpose2d(x, w, 2, 1).unwrap();
    assert_eq!(g.shape(y), vec![2, 2, 8, 8]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_normalizes_and_constant_channel_gives_beta() {
    let g = Graph::<f64>::new();
    let mut data: Vec<f64> = (0..16).map(|i| (i * i) as f64 * 0.1 - 3.0).collect();
    // channel 1 constant
    for n in 0..2 {
        for p in 0..4 {
            data[(n * 2 + 1) * 4 + p] = 7.0;
        }
    }
    let x = g.input(t(&[2, 2, 2, 2], &data));
    let gamma = g.input(t(&[2], &[1.0, 1.0]));
    let beta = g.input(t(&[2], &[0.0, 0.25]));
    let (y, _, _) = g.batch_norm(x, gamma, beta, NormMode::Batch, None, 1e-5).unwrap();
    let y = g.value(y);
    let ch0: Vec<f64> = (0..2).flat_map(|n| y.data()[n * 8..n * 8 + 4].to_vec()).collect();
    let mean = ch0.iter().sum::<f64>() / 8.0;
    let var = ch0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
    assert!(mean.abs() < 1e-5);
    assert!((var - 1.0).abs() < 1e-4);
    for n in 0..2 {
        assert!(y.data()[n * 8 + 4..n * 8 + 8].iter().all(|&v| v == 0.25));
    }
}

#[test]
fn activations_at_known_points() {
    let g = Graph::<f64>::new();
    let x = g.input(t(&[2], &[0.0, -1.0]));
    assert_eq!(g.value(g.sigmoid(x).unwrap()).data()[0], 0.5);
    assert_eq!(g.value(g.leaky_relu(x, 0.2).unwrap()).data()[1], -0.2);
    assert_eq!(g.value(g.relu(x).unwrap()).data(), &[0.0, 0.0]);
}

#[test]
fn sigmoid_is_strictly_inside_unit_interval_for_moderate_inputs() {
    let g = Graph::<f32>::new();
    let x = g.input(Tensor::from_fn(&[200], |i| i as f32 * 0.1 - 10.0));
    let y = g.value(g.sigmoid(x).unwrap());
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn avg_pool_of_ramp_is_mean() {
    let g = Graph::<f64>::new();
    let x = g.input(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
    assert_eq!(g.value(g.avg_pool(x, 4, 4).unwrap()).data(), &[7.5]);
    let c = g.input(Tensor::full(&[1, 2, 4, 4], 3.0));
    assert_eq!(g.value(g.avg_pool(c, 2, 2).unwrap()).data(), &[3.0; 8]);
    let bad = g.input(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(g.avg_pool(bad, 2, 2).is_err());
}

#[test]
fn sigmoid_of_linear_matches_closed_form() {
    // d/dw sum σ(w·x + b) = σ'(·) x
    let g = Graph::<f64>::new();
    let x = g.input(t(&[1, 2], &[0.5, -1.5]));
    let w = g.leaf(t(&[1, 2], &[0.3, 0.7]), true);
    let b = g.leaf(t(&[1], &[0.1]), true);
    let y = g.sigmoid(g.linear(x, w, Some(b)).unwrap()).unwrap();
    g.backward(g.sum(y).unwrap()).unwrap();
    let a: f64 = 0.3 * 0.5 + 0.7 * -1.5 + 0.1;
    let s = 1.0 / (1.0 + (-a).exp());
    let ds = s * (1.0 - s);
    let gw = g.grad(w).unwrap();
    assert!((gw.data()[0] - ds * 0.5).abs() < 1e-15);
    assert!((gw.data()[1] - ds * -1.5).abs() < 1e-15);
    assert!((g.grad(b).unwrap().data()[0] - ds).abs() < 1e-15);
}

#[test]
fn param_leaves_are_shared_and_frozen_stores_get_no_grad() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add_param("w", t(&[2], &[1.0, 2.0])).unwrap();
    let g = Graph::<f64>::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    assert_eq!(a, b);
    assert_eq!(g.param_leaf_count(), 1);
    let loss = g.sum(g.mul(a, b).unwrap()).unwrap();
    g.backward(loss).unwrap();
    g.accumulate_param_grads(&mut store);
    assert_eq!(store.grad(id).data(), &[2.0, 4.0]);

    let g = Graph::<f64>::new();
    g.freeze(&store);
    let w = g.param(&store, id);
    assert!(!g.requires_grad(w));
}

#[test]
fn no_grad_graph_records_no_ops() {
    let g = Graph::<f64>::no_grad();
    let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
    let y = g.mul(x, x).unwrap();
    assert!(!g.requires_grad(y));
    assert_eq!(g.value(y).data(), &[1.0, 4.0]);
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_k() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2, 4]), true);
    let loss = g.cross_entropy(x, &[1, 3]).unwrap();
    assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
    g.backward(loss).unwrap();
    let d = g.grad(x).unwrap();
    assert!((d.data()[1] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
    assert!((d.data()[0] - 0.125).abs() < 1e-12);
}

#[test]
fn blend_degenerate_masks() {
    let g = Graph::<f32>::new();
    let f = g.input(Tensor::from_fn(&[1, 3, 2, 2], |i| i as f32 * 0.1));
    let prev = g.input(Tensor::from_fn(&[1, 3, 2, 2], |i| -(i as f32) * 0.05));
    let zero = g.input(Tensor::zeros(&[1, 1, 2, 2]));
    let one = g.input(Tensor::full(&[1, 1, 2, 2], 1.0));
    assert_eq!(*g.value(g.blend(zero, f, prev).unwrap()), *g.value(prev));
    assert_eq!(*g.value(g.blend(one, f, prev).unwrap()), *g.value(f));
}

#[test]
fn identical_builds_are_bit_identical() {
    let run = || {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 31) % 17) as f32 / 17.0 - 0.5), true);
        let w = g.leaf(Tensor::from_fn(&[4, 3, 4, 4], |i| ((i * 7) % 13) as f32 / 13.0 - 0.5), true);
        let y = g.tanh(g.conv2d(x, w, 2, 1).unwrap()).unwrap();
        let loss = g.mean(g.mul(y, y).unwrap()).unwrap();
        g.backward(loss).unwrap();
        (g.value(loss).data().to_vec(), g.grad(x).unwrap(), g.grad(w).unwrap())
    };
    assert_eq!(run(), run());
}
