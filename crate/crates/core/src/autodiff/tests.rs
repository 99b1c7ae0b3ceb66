use super::*;
use crate::oracle::{gradcheck, nn};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv_of_zero_input_is_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 1, 3, 3]), false);
    let k = g.leaf(t(&[1, 1, 2, 2], &[0.3, -1.0, 2.0, 5.0]), false);
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_scalar_kernel_scales() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
    let k = g.leaf(t(&[1, 1, 1, 1], &[2.0]), false);
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn conv_matches_direct_cross_correlation() {
    let xs: Vec<f32> = (1..=9).map(|v| v as f32).collect();
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 3, 3], &xs), false);
    let k = g.leaf(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    let expected = nn::conv2d(
        &nn::Arr::from_f32(&[1, 1, 3, 3], &xs),
        &nn::Arr::from_f32(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]),
        None,
        1,
        0,
    );
    // [[1+5, 2+6], [4+8, 5+9]]
    assert_eq!(expected.data, vec![6.0, 8.0, 12.0, 14.0]);
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
    for (a, b) in g.value(y).data().iter().zip(&expected.data) {
        assert_eq!(*a as f64, *b);
    }
}

#[test]
fn conv_channel_mismatch_is_config_error() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
    let k = g.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
    assert!(matches!(g.conv2d(x, k, None, 1, 1), Err(GraphError::Config { .. })));
}

#[test]
fn relu_definition() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]), false);
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn groupnorm_constant_group_yields_bias() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::filled(&[1, 4, 2, 2], 3.5), false);
    let gamma = g.leaf(t(&[4], &[2.0, 2.0, 2.0, 2.0]), false);
    let beta = g.leaf(t(&[4], &[0.5, -1.0, 0.25, 7.0]), false);
    let y = g.group_norm(x, gamma, beta, 2).unwrap();
    let out = g.value(y).data();
    for ch in 0..4 {
        let expected = g.value(beta).data()[ch];
        assert!(out[ch * 4..ch * 4 + 4].iter().all(|&v| v == expected));
    }
}

#[test]
fn groupnorm_divisibility_violation() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 6, 2, 2]), false);
    let gamma = g.leaf(Tensor::ones(&[6]), false);
    let beta = g.leaf(Tensor::zeros(&[6]), false);
    assert!(matches!(g.group_norm(x, gamma, beta, 4), Err(GraphError::Config { .. })));
}

#[test]
fn batchnorm_two_sample_statistics_match_oracle() {
    let data: Vec<f32> = vec![0.5, -1.25, 3.0, 2.0, 7.5, 0.0, -0.5, 1.0, 4.0, -2.0, 0.75, 1.5, 9.0, -3.0, 2.5, 0.25];
    let mut g = Graph::new();
    let x = g.leaf(t(&[2, 2, 2, 2], &data), false);
    let gamma = g.leaf(Tensor::ones(&[2]), false);
    let beta = g.leaf(Tensor::zeros(&[2]), false);
    let y = g.batch_norm(x, gamma, beta).unwrap();
    let expected = nn::norm(&nn::Arr::from_f32(&[2, 2, 2, 2], &data), &[1.0, 1.0], &[0.0, 0.0], None, NORM_EPS);
    for (a, b) in g.value(y).data().iter().zip(&expected.data) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
    // channel 0 holds elements 0..4 and 8..12
    let ch0: Vec<f64> = data[0..4].iter().chain(&data[8..12]).map(|&v| v as f64).collect();
    let mean = ch0.iter().sum::<f64>() / 8.0;
    let var = ch0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
    let stats = g.batch_stats(y).unwrap();
    assert!((stats.mean[0] - mean).abs() < 1e-6);
    assert!((stats.var[0] - var).abs() < 1e-6);
}

#[test]
fn residual_add_requires_identical_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(&[1, 2, 2, 2]), false);
    let b = g.leaf(Tensor::zeros(&[1, 2, 1, 4]), false);
    assert!(g.add(a, b).is_err());
}

#[test]
fn maxpool_tie_routes_gradient_to_first_cell() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 2, 2], &[5.0, 5.0, 5.0, 1.0]), true);
    let y = g.maxpool(x, 2, 2, 0).unwrap();
    assert_eq!(g.value(y).data(), &[5.0]);
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f32 - 2.0), true);
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn relu_subgradient() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[-1.0, 2.0, 0.0]), true);
    let r = g.relu(x).unwrap();
    let s = g.sum(r).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn backward_before_forward_is_state_error() {
    let g = Graph::new();
    // An id that was never produced by this graph.
    let mut other = Graph::new();
    let id = other.leaf(Tensor::scalar(1.0), true);
    assert!(matches!(g.backward(id), Err(GraphError::State(_))));
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(g.backward(x), Err(GraphError::State(_))));
}

#[test]
fn retained_activation_gradient_is_reported() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, -2.0, 3.0, 4.0]), false);
    let r = g.relu(x).unwrap();
    g.retain(r);
    let s = g.dot_const(r, t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(r).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    assert!(grads.get(x).is_none());
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut g = Graph::new();
    let l = g.leaf(Tensor::zeros(&[1, 12]), false);
    let loss = g.softmax_cross_entropy(l, &[3]).unwrap();
    assert!((g.value(loss).item() as f64 - 12f64.ln()).abs() < 1e-6);
}

#[test]
fn cross_entropy_saturated() {
    let mut g = Graph::new();
    let mut logits = vec![0.0f32; 12];
    logits[5] = 1e4;
    let l = g.leaf(t(&[1, 12], &logits), false);
    let loss = g.softmax_cross_entropy(l, &[5]).unwrap();
    assert!(g.value(loss).item().abs() < 1e-6);
}

#[test]
fn cross_entropy_matches_oracle() {
    let logits: Vec<f32> = vec![0.3, -1.2, 2.5, 0.0, 1.1, 1.1, -0.4, 3.3, -2.0, 0.7, 0.05, -0.9];
    let labels = [2, 3, 0];
    let mut g = Graph::new();
    let l = g.leaf(t(&[3, 4], &logits), false);
    let loss = g.softmax_cross_entropy(l, &labels).unwrap();
    let expected = nn::cross_entropy(&nn::Arr::from_f32(&[3, 4], &logits), &labels);
    assert!((g.value(loss).item() as f64 - expected).abs() < 1e-5);
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut g = Graph::new();
    let l = g.leaf(Tensor::zeros(&[1, 4]), false);
    assert!(matches!(g.softmax_cross_entropy(l, &[4]), Err(GraphError::Input { .. })));
}

#[test]
fn random_two_conv_network_gradients_match_finite_differences() {
    for seed in 0..3 {
        let report = gradcheck::check_random_network(seed, 1e-3, 1e-6);
        assert!(report.max_relative_error < 1e-3, "seed {seed}: {report:?}");
    }
}

#[test]
fn conv_output_shape_matches_enumeration() {
    // Count valid window placements directly.
    for h in 1..=16usize {
        for k in 1..=5usize {
            for s in 1..=3usize {
                for p in 0..=2usize {
                    let padded = h + 2 * p;
                    let enumerated = (0..padded).step_by(s).filter(|&start| start + k <= padded).count();
                    let mut g = Graph::new();
                    let x = g.leaf(Tensor::zeros(&[1, 1, h, h]), false);
                    let kk = g.leaf(Tensor::zeros(&[1, 1, k, k]), false);
                    match g.conv2d(x, kk, None, s, p) {
                        Ok(y) => assert_eq!(g.value(y).shape()[2], enumerated, "h={h} k={k} s={s} p={p}"),
                        Err(_) => assert_eq!(enumerated, 0),
                    }
                    if p < k {
                        match g.maxpool(x, k, s, p) {
                            Ok(y) => assert_eq!(g.value(y).shape()[3], enumerated),
                            Err(_) => assert_eq!(enumerated, 0),
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3, 9, 9], |i| ((i * 7919) % 113) as f32 / 50.0 - 1.0), false);
        let k = g.leaf(Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 31) % 17) as f32 / 9.0 - 0.9), true);
        let y = g.conv2d(x, k, None, 2, 1).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(y).clone(), grads.get(k).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50f32..50f32, 12)) {
        let p = softmax(&Tensor::new(vec![3, 4], vals).unwrap());
        for row in p.data().chunks(4) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_and_gap_gradients_match_finite_differences(
        xs in proptest::collection::vec(-2f32..2f32, 2 * 3 * 2 * 2),
        ws in proptest::collection::vec(-1f32..1f32, 2 * 3),
    ) {
        let weights = Tensor::from_fn(&[2, 2], |i| [0.5, -1.5, 2.0, 0.25][i]);
        let eval = |x: &[f32], w: &[f32]| -> (f64, Vec<f32>, Vec<f32>) {
            let mut g = Graph::new();
            let xi = g.leaf(Tensor::new(vec![2, 3, 2, 2], x.to_vec()).unwrap(), true);
            let wi = g.leaf(Tensor::new(vec![2, 3], w.to_vec()).unwrap(), true);
            let bi = g.leaf(Tensor::zeros(&[2]), true);
            let p = g.global_avg_pool(xi).unwrap();
            let y = g.linear(p, wi, bi).unwrap();
            let s = g.dot_const(y, weights.clone()).unwrap();
            let grads = g.backward(s).unwrap();
            (g.value(s).item() as f64, grads.get(xi).unwrap().data().to_vec(), grads.get(wi).unwrap().data().to_vec())
        };
        // The loss is linear in each argument, so the oracle is exact.
        let (_, gx, gw) = eval(&xs, &ws);
        let f64loss = |x: &[f32], w: &[f32]| {
            let feats: Vec<f64> = (0..6).map(|p| x[p * 4..p * 4 + 4].iter().map(|&v| v as f64).sum::<f64>() / 4.0).collect();
            let mut s = 0.0;
            for n in 0..2 { for o in 0..2 {
                let y: f64 = (0..3).map(|f| feats[n * 3 + f] * w[o * 3 + f] as f64).sum();
                s += y * weights.data()[n * 2 + o] as f64;
            }}
            s
        };
        let h = 1e-2f32;
        for i in 0..xs.len() {
            let (mut up, mut dn) = (xs.clone(), xs.clone());
            up[i] += h; dn[i] -= h;
            let num = (f64loss(&up, &ws) - f64loss(&dn, &ws)) / ((up[i] - dn[i]) as f64);
            prop_assert!((num - gx[i] as f64).abs() < 1e-4);
        }
        for i in 0..ws.len() {
            let (mut up, mut dn) = (ws.clone(), ws.clone());
            up[i] += h; dn[i] -= h;
            let num = (f64loss(&xs, &up) - f64loss(&xs, &dn)) / ((up[i] - dn[i]) as f64);
            prop_assert!((num - gw[i] as f64).abs() < 1e-4);
        }
    }
}
