//! Inner loops shared by the graph operations.
//!
//! All reductions accumulate in `f64` in a fixed order so results are
//! bit-reproducible regardless of how the caller batches work.

/// Geometry of one 2D convolution or pooling window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn output_dim(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.output_dim(h, self.kh)?, self.output_dim(w, self.kw)?))
    }
}

/// Unfolds one `[c, h, w]` image into a `[c·kh·kw, oh·ow]` column matrix.
pub fn im2col(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    win: Window,
    (oh, ow): (usize, usize),
    cols: &mut [f32],
) {
    let plane = oh * ow;
    debug_assert_eq!(cols.len(), c * win.kh * win.kw * plane);
    let pad = win.padding as isize;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        *o = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column-matrix gradient back onto a `[c, h, w]` image gradient,
/// accumulating overlapping contributions.
pub fn col2im_add(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    win: Window,
    (oh, ow): (usize, usize),
    dx: &mut [f64],
) {
    let plane = oh * ow;
    let pad = win.padding as isize;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, f64 accumulation, result stored to `out`.
pub fn matmul(a: &[f32], b: &[f32], (m, k, n): (usize, usize, usize), out: &mut [f32]) {
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let aik = aik as f64;
            let brow = &b[kk * n..(kk + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += aik * bv as f64;
            }
        }
        for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
}

/// `out[m×n] += aᵀ · b` where `a` is stored `[k×m]` and `b` is `[k×n]`.
pub fn matmul_at_b_acc(a: &[f32], b: &[f32], (m, k, n): (usize, usize, usize), out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aki = a[kk * m + i] as f64;
            let brow = &b[kk * n..(kk + 1) * n];
            for (s, &bv) in orow.iter_mut().zip(brow) {
                *s += aki * bv as f64;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ` (row-by-row dot products).
pub fn matmul_a_bt_acc(a: &[f32], b: &[f32], (m, n, k): (usize, usize, usize), out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] += dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

/// Dot product with four fixed-order partial sums.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = [0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        s[0] += a[i] as f64 * b[i] as f64;
        s[1] += a[i + 1] as f64 * b[i + 1] as f64;
        s[2] += a[i + 2] as f64 * b[i + 2] as f64;
        s[3] += a[i + 3] as f64 * b[i + 3] as f64;
    }
    let mut tail = 0f64;
    for i in chunks * 4..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let naive = |i: usize, j: usize| (0..k).map(|t| a[i * k + t] as f64 * b[t * n + j] as f64).sum::<f64>();

        let mut out = vec![0f32; m * n];
        matmul(&a, &b, (m, k, n), &mut out);
        for i in 0..m {
            for j in 0..n {
                assert!((out[i * n + j] as f64 - naive(i, j)).abs() < 1e-6);
            }
        }

        // aᵀ stored as [k×m]
        let at: Vec<f32> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut out64 = vec![0f64; m * n];
        matmul_at_b_acc(&at, &b, (m, k, n), &mut out64);
        for i in 0..m {
            for j in 0..n {
                assert!((out64[i * n + j] - naive(i, j)).abs() < 1e-12);
            }
        }

        // b stored transposed as [n×k]
        let bt: Vec<f32> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut out64 = vec![0f64; m * n];
        matmul_a_bt_acc(&a, &bt, (m, k, n), &mut out64);
        for i in 0..m {
            for j in 0..n {
                assert!((out64[i * n + j] - naive(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_dim_floor_formula() {
        let win = Window { kh: 3, kw: 3, stride: 2, padding: 1 };
        assert_eq!(win.output_dim(7, 3), Some(4));
        assert_eq!(win.output_dim(224, 3), Some(112));
        let win = Window { kh: 5, kw: 5, stride: 1, padding: 0 };
        assert_eq!(win.output_dim(4, 5), None);
    }
}
