//! Direct double-precision reference versions of the network primitives.
//!
//! Data layout matches the engine (row-major NCHW) but every loop is the
//! textbook definition with nothing shared with the optimized kernels.

#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Arr { shape: shape.to_vec(), data }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Self::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    fn d4(&self) -> (usize, usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }
}

/// Plain cross-correlation with zero padding.
pub fn conv2d(x: &Arr, k: &Arr, bias: Option<&[f64]>, stride: usize, pad: usize) -> Arr {
    let (n, cin, h, w) = x.d4();
    let (cout, kcin, kh, kw) = k.d4();
    assert_eq!(cin, kcin);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0f64; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias.map_or(0.0, |bv| bv[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k.data[((co * cin + ci) * kh + ky) * kw + kx];
                                s += xv * kv;
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Arr::new(&[n, cout, oh, ow], out)
}

/// ReLU whose on/off pattern is taken from `mask` (true = pass).
pub fn relu_masked(x: &Arr, mask: &[bool]) -> Arr {
    Arr::new(&x.shape, x.data.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect())
}

pub fn relu_mask(x: &Arr) -> Vec<bool> {
    x.data.iter().map(|&v| v > 0.0).collect()
}

/// Group normalization with affine parameters; `groups = c` gives
/// instance-style groups, and passing `None` normalizes each channel over the
/// batch (batch normalization).
pub fn norm(x: &Arr, gamma: &[f64], beta: &[f64], groups: Option<usize>, eps: f64) -> Arr {
    let (n, c, h, w) = x.d4();
    let plane = h * w;
    let mut out = x.data.clone();
    let mut apply = |members: Vec<usize>| {
        let m = members.len() as f64;
        let mean = members.iter().map(|&i| x.data[i]).sum::<f64>() / m;
        let var = members.iter().map(|&i| (x.data[i] - mean).powi(2)).sum::<f64>() / m;
        for &i in &members {
            let ch = (i / plane) % c;
            out[i] = gamma[ch] * (x.data[i] - mean) / (var + eps).sqrt() + beta[ch];
        }
    };
    match groups {
        Some(g) => {
            let cg = c / g;
            for b in 0..n {
                for gi in 0..g {
                    let members = (gi * cg..(gi + 1) * cg)
                        .flat_map(|ch| (0..plane).map(move |p| (b * c + ch) * plane + p))
                        .collect();
                    apply(members);
                }
            }
        }
        None => {
            for ch in 0..c {
                let members = (0..n).flat_map(|b| (0..plane).map(move |p| (b * c + ch) * plane + p)).collect();
                apply(members);
            }
        }
    }
    Arr::new(&x.shape, out)
}

/// Max pooling positions (flat input index per output) at this input.
pub fn maxpool_argmax(x: &Arr, k: usize, stride: usize, pad: usize) -> (Vec<usize>, Vec<usize>) {
    let (n, c, h, w) = x.d4();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut idx = Vec::new();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<usize> = None;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let i = p * h * w + iy as usize * w + ix as usize;
                        if best.is_none_or(|b| x.data[i] > x.data[b]) {
                            best = Some(i);
                        }
                    }
                }
                idx.push(best.expect("window has a valid cell"));
            }
        }
    }
    (idx, vec![n, c, oh, ow])
}

pub fn gather(x: &Arr, idx: &[usize], shape: &[usize]) -> Arr {
    Arr::new(shape, idx.iter().map(|&i| x.data[i]).collect())
}

pub fn global_avg_pool(x: &Arr) -> Arr {
    let (n, c, h, w) = x.d4();
    let plane = (h * w) as f64;
    let data = (0..n * c)
        .map(|p| x.data[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / plane)
        .collect();
    Arr::new(&[n, c], data)
}

pub fn linear(x: &Arr, weight: &Arr, bias: &[f64]) -> Arr {
    let (n, f) = (x.shape[0], x.shape[1]);
    let o = weight.shape[0];
    let mut out = vec![0f64; n * o];
    for i in 0..n {
        for j in 0..o {
            out[i * o + j] = bias[j] + (0..f).map(|t| x.data[i * f + t] * weight.data[j * f + t]).sum::<f64>();
        }
    }
    Arr::new(&[n, o], out)
}

pub fn add(a: &Arr, b: &Arr) -> Arr {
    assert_eq!(a.shape, b.shape);
    Arr::new(&a.shape, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

/// Mean `−log softmax(row)[label]`, computed via log-sum-exp.
pub fn cross_entropy(logits: &Arr, labels: &[usize]) -> f64 {
    let c = logits.shape[1];
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / labels.len() as f64
}
