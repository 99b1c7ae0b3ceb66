//! Brute-force statistics: ranks by counting, p-values by enumerating every
//! sign pattern or every group assignment.

/// Rank as `#smaller + (#equal + 1)/2`.
pub fn ranks_by_counting(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn pearson_sums(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn spearman_rho(x: &[f64], y: &[f64]) -> f64 {
    pearson_sums(&ranks_by_counting(x), &ranks_by_counting(y))
}

pub fn partial_rho(x: &[f64], y: &[f64], z: &[f64]) -> f64 {
    let (a, b, c) = (spearman_rho(x, y), spearman_rho(x, z), spearman_rho(y, z));
    (a - b * c) / ((1.0 - b * b) * (1.0 - c * c)).sqrt()
}

const TOL: f64 = 1e-9;

/// `(V, P(V' ≤ V), P(V' ≥ V))` over all `2^n` sign flips of the nonzero
/// differences.
pub fn signed_rank(d: &[f64]) -> (f64, f64, f64) {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    let stat = |signs: &[f64]| {
        let ranks = ranks_by_counting(&signs.iter().map(|s| s.abs()).collect::<Vec<_>>());
        ranks.iter().zip(signs).filter(|(_, s)| **s > 0.0).map(|(r, _)| r).sum::<f64>()
    };
    let v = stat(&d);
    let (mut le, mut ge) = (0usize, 0usize);
    for mask in 0u32..(1 << n) {
        let flipped: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { d[i].abs() } else { -d[i].abs() }).collect();
        let s = stat(&flipped);
        le += (s <= v + TOL) as usize;
        ge += (s >= v - TOL) as usize;
    }
    let total = (1u64 << n) as f64;
    (v, le as f64 / total, ge as f64 / total)
}

/// `(W, P(W' ≤ W), P(W' ≥ W))` over every way of labelling `a.len()` of the
/// pooled values as the first group.
pub fn rank_sum(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let na = a.len();
    let ranks = ranks_by_counting(&pooled);
    let w_of = |mask: u32| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum::<f64>() - (na * (na + 1)) as f64 / 2.0;
    let w = w_of((1u32 << na) - 1);
    let (mut le, mut ge, mut total) = (0usize, 0usize, 0usize);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        let s = w_of(mask);
        total += 1;
        le += (s <= w + TOL) as usize;
        ge += (s >= w - TOL) as usize;
    }
    (w, le as f64 / total as f64, ge as f64 / total as f64)
}

/// `H = 12/(N(N+1))·Σ R_i²/n_i − 3(N+1)`, divided by the tie correction.
pub fn kruskal_h(groups: &[Vec<f64>]) -> f64 {
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = pooled.len() as f64;
    let ranks = ranks_by_counting(&pooled);
    let mut start = 0;
    let mut s = 0.0;
    for g in groups {
        let r: f64 = ranks[start..start + g.len()].iter().sum();
        s += r * r / g.len() as f64;
        start += g.len();
    }
    let h = 12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0);
    let mut ties = 0.0;
    for (i, x) in pooled.iter().enumerate() {
        if pooled[..i].contains(x) {
            continue;
        }
        let t = pooled.iter().filter(|y| *y == x).count() as f64;
        ties += t * t * t - t;
    }
    h / (1.0 - ties / (n * n * n - n))
}

/// `(estimate, lo, hi)` with the critical rank found by listing the signed-rank
/// statistic of every sign pattern over ranks `1..=n`.
pub fn hodges_lehmann(x: &[f64], alpha: f64) -> (f64, f64, f64) {
    let n = x.len();
    let mut walsh = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i <= j {
                walsh.push((x[i] + x[j]) / 2.0);
            }
        }
    }
    walsh.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = walsh.len();
    let est = if m % 2 == 1 { walsh[m / 2] } else { (walsh[m / 2 - 1] + walsh[m / 2]) / 2.0 };
    let mut stats: Vec<usize> = (0u32..(1 << n)).map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).sum()).collect();
    stats.sort();
    let total = stats.len() as f64;
    let mut qu = 0;
    while (stats.iter().filter(|&&s| s <= qu).count() as f64) / total < alpha / 2.0 {
        qu += 1;
    }
    let qu = qu.max(1);
    (est, walsh[qu - 1], walsh[m - qu])
}
