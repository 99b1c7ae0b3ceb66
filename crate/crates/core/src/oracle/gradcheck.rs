//! Finite-difference check of the engine's gradients on a small random
//! network touching every trainable primitive.
//!
//! The reference loss is evaluated in `f64` by [`super::nn`]. ReLU on/off
//! patterns and max-pool winners are taken from the unperturbed point so that
//! central differences stay inside one smooth piece of the loss surface.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::nn::{self, Arr};
use crate::autodiff::{Graph, NORM_EPS};
use crate::tensor::Tensor;

const BATCH: usize = 2;
const CLASSES: usize = 4;
const GN_GROUPS: usize = 3;

struct Params {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

impl Params {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let shapes: Vec<Vec<usize>> = vec![
            vec![6, 3, 3, 3], // conv1 kernel
            vec![6],          // conv1 bias
            vec![6],          // gn gamma
            vec![6],          // gn beta
            vec![6, 6, 3, 3], // conv2 kernel
            vec![6],          // bn gamma
            vec![6],          // bn beta
            vec![6, 6, 3, 3], // conv3 kernel
            vec![CLASSES, 6], // linear weight
            vec![CLASSES],    // linear bias
        ];
        let values = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                let fan_in: usize = if s.len() > 1 { s[1..].iter().product() } else { 1 };
                (0..n)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        match i {
                            2 | 5 => 1.0 + 0.2 * z,
                            _ => z * (2.0 / fan_in as f64).sqrt(),
                        }
                    })
                    .collect()
            })
            .collect();
        Params { shapes, values }
    }

    fn count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    fn arr(&self, i: usize) -> Arr {
        Arr::new(&self.shapes[i], self.values[i].clone())
    }
}

#[derive(Clone)]
struct Pattern {
    relu1: Vec<bool>,
    relu2: Vec<bool>,
    relu3: Vec<bool>,
    pool: (Vec<usize>, Vec<usize>),
}

fn reference_loss(p: &Params, x: &Arr, labels: &[usize], fixed: Option<&Pattern>) -> (f64, Pattern) {
    let h1 = nn::conv2d(x, &p.arr(0), Some(&p.values[1]), 1, 1);
    let h1 = nn::norm(&h1, &p.values[2], &p.values[3], Some(GN_GROUPS), NORM_EPS);
    let m1 = fixed.map_or_else(|| nn::relu_mask(&h1), |f| f.relu1.clone());
    let a1 = nn::relu_masked(&h1, &m1);

    let h2 = nn::conv2d(&a1, &p.arr(4), None, 2, 1);
    let h2 = nn::norm(&h2, &p.values[5], &p.values[6], None, NORM_EPS);
    let m2 = fixed.map_or_else(|| nn::relu_mask(&h2), |f| f.relu2.clone());
    let a2 = nn::relu_masked(&h2, &m2);

    let h3 = nn::conv2d(&a2, &p.arr(7), None, 1, 1);
    let h3 = nn::add(&h3, &a2);
    let m3 = fixed.map_or_else(|| nn::relu_mask(&h3), |f| f.relu3.clone());
    let a3 = nn::relu_masked(&h3, &m3);

    let pool = fixed.map_or_else(|| nn::maxpool_argmax(&a3, 2, 1, 0), |f| f.pool.clone());
    let pooled = nn::gather(&a3, &pool.0, &pool.1);
    let feats = nn::global_avg_pool(&pooled);
    let logits = nn::linear(&feats, &p.arr(8), &p.values[9]);
    let loss = nn::cross_entropy(&logits, labels);
    (loss, Pattern { relu1: m1, relu2: m2, relu3: m3, pool })
}

fn engine_gradients(p: &Params, x: &Arr, labels: &[usize]) -> Vec<Vec<f32>> {
    let mut g = Graph::new();
    let to_t = |shape: &[usize], v: &[f64]| Tensor::new(shape.to_vec(), v.iter().map(|&x| x as f32).collect()).unwrap();
    let xi = g.leaf(to_t(&x.shape, &x.data), false);
    let ids: Vec<_> = (0..p.shapes.len()).map(|i| g.leaf(to_t(&p.shapes[i], &p.values[i]), true)).collect();

    let h1 = g.conv2d(xi, ids[0], Some(ids[1]), 1, 1).unwrap();
    let h1 = g.group_norm(h1, ids[2], ids[3], GN_GROUPS).unwrap();
    let a1 = g.relu(h1).unwrap();
    let h2 = g.conv2d(a1, ids[4], None, 2, 1).unwrap();
    let h2 = g.batch_norm(h2, ids[5], ids[6]).unwrap();
    let a2 = g.relu(h2).unwrap();
    let h3 = g.conv2d(a2, ids[7], None, 1, 1).unwrap();
    let h3 = g.add(h3, a2).unwrap();
    let a3 = g.relu(h3).unwrap();
    let pooled = g.maxpool(a3, 2, 1, 0).unwrap();
    let feats = g.global_avg_pool(pooled).unwrap();
    let logits = g.linear(feats, ids[8], ids[9]).unwrap();
    let loss = g.softmax_cross_entropy(logits, labels).unwrap();
    let grads = g.backward(loss).unwrap();
    ids.iter().map(|&id| grads.get(id).unwrap().data().to_vec()).collect()
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub parameters: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`. The floor keeps
/// components whose true gradient is ~0 from dominating via round-off.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences with step `h` on every parameter of a seeded random
/// three-convolution network with 2×3×10×10 input.
pub fn check_random_network(seed: u64, h: f64, floor: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::random(&mut rng);
    let x = Arr::new(
        &[BATCH, 3, 10, 10],
        (0..BATCH * 300).map(|_| {
            // Round inputs to f32 so both sides see identical data.
            (rng.sample::<f64, _>(StandardNormal) as f32) as f64
        }).collect(),
    );
    for v in params.values.iter_mut().flatten() {
        *v = (*v as f32) as f64;
    }
    let labels: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..CLASSES)).collect();

    let analytic = engine_gradients(&params, &x, &labels);
    let (_, pattern) = reference_loss(&params, &x, &labels, None);

    let mut report = GradCheckReport {
        parameters: params.count(),
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut flat = 0;
    for t in 0..params.values.len() {
        for j in 0..params.values[t].len() {
            let orig = params.values[t][j];
            params.values[t][j] = orig + h;
            let (up, _) = reference_loss(&params, &x, &labels, Some(&pattern));
            params.values[t][j] = orig - h;
            let (down, _) = reference_loss(&params, &x, &labels, Some(&pattern));
            params.values[t][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[t][j] as f64;
            let err = relative_error(a, numeric, floor);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_index = flat;
                report.analytic = a;
                report.numeric = numeric;
            }
            flat += 1;
        }
    }
    report
}
