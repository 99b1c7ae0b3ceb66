//! Nonparametric tests: rank correlation, Wilcoxon signed-rank and rank-sum,
//! Kruskal-Wallis, Bonferroni adjustment, Hodges-Lehmann intervals and
//! tertile splits.
//!
//! Signed-rank p-values are exact for up to 12 nonzero differences and
//! rank-sum p-values for up to 12 pooled observations; larger samples use the
//! normal approximation with tie and continuity corrections.

pub mod special;

use thiserror::Error;

use special::{chi_square_sf, normal_cdf, normal_quantile, normal_sf, t_two_sided};

/// Largest sample handled by exact enumeration.
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("input error: {0}")]
    Input(String),
    #[error("degenerate: {0}")]
    Degenerate(String),
    #[error("no information: all differences are zero")]
    NoInformation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    TwoSided,
    Greater,
    Less,
}

impl Alternative {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "two-sided" | "two_sided" => Some(Alternative::TwoSided),
            "greater" => Some(Alternative::Greater),
            "less" => Some(Alternative::Less),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Alternative::TwoSided => "two-sided",
            Alternative::Greater => "greater",
            Alternative::Less => "less",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Exact,
    Normal,
    StudentT,
    ChiSquare,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Normal => "normal",
            Method::StudentT => "t",
            Method::ChiSquare => "chi_square",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    /// `V`, `W`, `H` or `rho`.
    pub statistic_name: &'static str,
    pub statistic: f64,
    pub p_value: f64,
    /// `|Z|/sqrt(N)` for the Wilcoxon tests, `|rho|` for correlations.
    pub effect_size_r: Option<f64>,
    pub n: usize,
    pub method: Method,
}

fn clamp_p(p: f64) -> f64 {
    if p.is_nan() {
        1.0
    } else {
        p.clamp(0.0, 1.0)
    }
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn rank_average(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Sizes of the tie groups in `values`.
fn tie_sizes(values: &[f64]) -> Vec<usize> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        out.push(j - i + 1);
        i = j + 1;
    }
    out
}

fn tie_sum(values: &[f64]) -> f64 {
    tie_sizes(values).into_iter().map(|t| (t * t * t - t) as f64).sum()
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pairs where both values are finite (NaN marks a missing value).
fn complete_pairs(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    x.iter().zip(y).filter(|(a, b)| a.is_finite() && b.is_finite()).map(|(a, b)| (*a, *b)).unzip()
}

fn correlation_result(rho: f64, n: usize, df: f64) -> TestResult {
    let p = if rho.abs() >= 1.0 { 0.0 } else { t_two_sided(rho * (df / (1.0 - rho * rho)).sqrt(), df) };
    TestResult { statistic_name: "rho", statistic: rho, p_value: clamp_p(p), effect_size_r: Some(rho.abs().min(1.0)), n, method: Method::StudentT }
}

/// Spearman's rho with listwise deletion of non-finite pairs; p from the
/// t approximation with `n − 2` degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::Input(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    let (x, y) = complete_pairs(x, y);
    let n = x.len();
    if n < 3 {
        return Err(StatsError::Input(format!("need at least 3 complete pairs, have {n}")));
    }
    let rho = pearson(&rank_average(&x), &rank_average(&y)).ok_or_else(|| StatsError::Degenerate("constant input, correlation undefined".into()))?;
    Ok(correlation_result(rho, n, n as f64 - 2.0))
}

/// First-order partial Spearman correlation of `x` and `y` given `z`;
/// p from the t approximation with `n − 3` degrees of freedom.
pub fn partial_spearman(x: &[f64], y: &[f64], z: &[f64]) -> Result<TestResult, StatsError> {
    if x.len() != y.len() || x.len() != z.len() {
        return Err(StatsError::Input("lengths differ".into()));
    }
    let keep: Vec<usize> = (0..x.len()).filter(|&i| x[i].is_finite() && y[i].is_finite() && z[i].is_finite()).collect();
    let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let (x, y, z) = (pick(x), pick(y), pick(z));
    let n = x.len();
    if n < 4 {
        return Err(StatsError::Input(format!("need at least 4 complete triples, have {n}")));
    }
    let (rx, ry, rz) = (rank_average(&x), rank_average(&y), rank_average(&z));
    let degenerate = || StatsError::Degenerate("constant input, partial correlation undefined".into());
    let rxy = pearson(&rx, &ry).ok_or_else(degenerate)?;
    let rxz = pearson(&rx, &rz).ok_or_else(degenerate)?;
    let ryz = pearson(&ry, &rz).ok_or_else(degenerate)?;
    let denom = (1.0 - rxz * rxz) * (1.0 - ryz * ryz);
    if denom <= 0.0 || (1.0 - rxz * rxz) <= 0.0 || (1.0 - ryz * ryz) <= 0.0 {
        return Err(StatsError::Degenerate("control variable is perfectly correlated with an input".into()));
    }
    let r = ((rxy - rxz * ryz) / denom.sqrt()).clamp(-1.0, 1.0);
    Ok(correlation_result(r, n, n as f64 - 3.0))
}

/// Null distribution of a sum of a random subset of `weights` (doubled
/// ranks, so integers), as counts per total.
fn subset_sum_counts(weights: &[usize]) -> Vec<f64> {
    let total: usize = weights.iter().sum();
    let mut counts = vec![0.0; total + 1];
    counts[0] = 1.0;
    for &w in weights {
        for s in (w..=total).rev() {
            counts[s] += counts[s - w];
        }
    }
    counts
}

/// Null distribution of sums of exactly `k` of the `weights`, by total.
fn fixed_size_subset_counts(weights: &[usize], k: usize) -> Vec<f64> {
    let total: usize = weights.iter().sum();
    let mut dp = vec![vec![0.0; total + 1]; k + 1];
    dp[0][0] = 1.0;
    for &w in weights {
        for j in (1..=k).rev() {
            for s in (w..=total).rev() {
                dp[j][s] += dp[j - 1][s - w];
            }
        }
    }
    dp.swap_remove(k)
}

/// Exact tail probabilities `(P(S ≤ obs), P(S ≥ obs))` for a count table
/// over doubled statistics.
fn exact_tails(counts: &[f64], obs2: usize) -> (f64, f64) {
    let total: f64 = counts.iter().sum();
    let le: f64 = counts[..=obs2.min(counts.len() - 1)].iter().sum();
    let ge: f64 = counts.get(obs2..).map_or(0.0, |c| c.iter().sum());
    (le / total, ge / total)
}

fn p_from_tails(le: f64, ge: f64, alt: Alternative) -> f64 {
    clamp_p(match alt {
        Alternative::TwoSided => 2.0 * le.min(ge),
        Alternative::Greater => ge,
        Alternative::Less => le,
    })
}

/// Continuity-corrected normal p-value for `stat` with null mean and sd.
fn normal_p(stat: f64, mean: f64, sd: f64, alt: Alternative) -> f64 {
    if sd <= 0.0 {
        return 1.0;
    }
    let d = stat - mean;
    clamp_p(match alt {
        Alternative::TwoSided => {
            let z = (d.abs() - 0.5).max(0.0) / sd;
            2.0 * normal_sf(z)
        }
        Alternative::Greater => normal_sf((d - 0.5) / sd),
        Alternative::Less => normal_cdf((d + 0.5) / sd),
    })
}

fn doubled(r: f64) -> usize {
    (2.0 * r).round() as usize
}

/// How a p-value is obtained; `Auto` picks exact enumeration when the
/// sample is small enough.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PMethod {
    Auto,
    Exact,
    Normal,
}

/// One-sample signed-rank test of `sample − mu0`. Exact zeros are dropped
/// and tied magnitudes get average ranks. `V` sums the ranks of positive
/// differences.
pub fn wilcoxon_signed_rank(sample: &[f64], mu0: f64, alt: Alternative) -> Result<TestResult, StatsError> {
    signed_rank_with(sample, mu0, alt, PMethod::Auto)
}

pub fn signed_rank_with(sample: &[f64], mu0: f64, alt: Alternative, method: PMethod) -> Result<TestResult, StatsError> {
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::Input("non-finite value in sample".into()));
    }
    let d: Vec<f64> = sample.iter().map(|v| v - mu0).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Err(StatsError::NoInformation);
    }
    let n = d.len();
    let mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = rank_average(&mags);
    let v: f64 = ranks.iter().zip(&d).filter(|(_, x)| **x > 0.0).map(|(r, _)| r).sum();
    let mean = n as f64 * (n as f64 + 1.0) / 4.0;
    let var = n as f64 * (n as f64 + 1.0) * (2.0 * n as f64 + 1.0) / 24.0 - tie_sum(&mags) / 48.0;
    let sd = var.max(0.0).sqrt();
    let exact = match method {
        PMethod::Auto => n <= EXACT_LIMIT,
        PMethod::Exact => true,
        PMethod::Normal => false,
    };
    let p = if exact {
        let w: Vec<usize> = ranks.iter().map(|&r| doubled(r)).collect();
        let (le, ge) = exact_tails(&subset_sum_counts(&w), doubled(v));
        p_from_tails(le, ge, alt)
    } else {
        normal_p(v, mean, sd, alt)
    };
    let z = if sd > 0.0 { (v - mean) / sd } else { 0.0 };
    Ok(TestResult {
        statistic_name: "V",
        statistic: v,
        p_value: p,
        effect_size_r: Some((z.abs() / (n as f64).sqrt()).min(1.0)),
        n,
        method: if exact { Method::Exact } else { Method::Normal },
    })
}

/// Paired signed-rank test on `a − b`.
pub fn wilcoxon_paired(a: &[f64], b: &[f64], alt: Alternative) -> Result<TestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::Input("paired samples differ in length".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    wilcoxon_signed_rank(&d, 0.0, alt)
}

/// Two-sample rank-sum test. `W = R_a − n_a(n_a + 1)/2` where `R_a` is the
/// sum of `a`'s pooled average ranks.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64], alt: Alternative) -> Result<TestResult, StatsError> {
    rank_sum_with(a, b, alt, PMethod::Auto)
}

pub fn rank_sum_with(a: &[f64], b: &[f64], alt: Alternative, method: PMethod) -> Result<TestResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Input("both groups must be non-empty".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::Input("non-finite value in sample".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = rank_average(&pooled);
    let ra: f64 = ranks[..na].iter().sum();
    let offset = na as f64 * (na as f64 + 1.0) / 2.0;
    let w = ra - offset;
    let mean = na as f64 * nb as f64 / 2.0;
    let nf = n as f64;
    let var = na as f64 * nb as f64 / 12.0 * ((nf + 1.0) - tie_sum(&pooled) / (nf * (nf - 1.0)).max(1.0));
    let sd = var.max(0.0).sqrt();
    let exact = match method {
        PMethod::Auto => n <= EXACT_LIMIT,
        PMethod::Exact => true,
        PMethod::Normal => false,
    };
    let p = if exact {
        let weights: Vec<usize> = ranks.iter().map(|&r| doubled(r)).collect();
        let (le, ge) = exact_tails(&fixed_size_subset_counts(&weights, na), doubled(ra));
        p_from_tails(le, ge, alt)
    } else {
        normal_p(w, mean, sd, alt)
    };
    let z = if sd > 0.0 { (w - mean) / sd } else { 0.0 };
    Ok(TestResult {
        statistic_name: "W",
        statistic: w,
        p_value: p,
        effect_size_r: Some((z.abs() / nf.sqrt()).min(1.0)),
        n,
        method: if exact { Method::Exact } else { Method::Normal },
    })
}

/// Kruskal-Wallis `H` with tie correction; p from chi-square with `k − 1`
/// degrees of freedom. No effect size is reported.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<TestResult, StatsError> {
    if groups.len() < 2 || groups.iter().any(Vec::is_empty) {
        return Err(StatsError::Input("need at least two non-empty groups".into()));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::Input("non-finite value in sample".into()));
    }
    let n = pooled.len();
    if n < 3 {
        return Err(StatsError::Input("need at least 3 observations".into()));
    }
    let nf = n as f64;
    let ranks = rank_average(&pooled);
    let mut h = 0.0;
    let mut start = 0;
    for g in groups {
        let mean_rank = ranks[start..start + g.len()].iter().sum::<f64>() / g.len() as f64;
        h += g.len() as f64 * (mean_rank - (nf + 1.0) / 2.0).powi(2);
        start += g.len();
    }
    h *= 12.0 / (nf * (nf + 1.0));
    let correction = 1.0 - tie_sum(&pooled) / (nf * nf * nf - nf);
    let (h, p) = if correction <= 0.0 { (0.0, 1.0) } else { (h / correction, chi_square_sf(h / correction, groups.len() as f64 - 1.0)) };
    Ok(TestResult { statistic_name: "H", statistic: h, p_value: clamp_p(p), effect_size_r: None, n, method: Method::ChiSquare })
}

pub fn bonferroni(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len() as f64;
    p_values.iter().map(|p| (p * m).min(1.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HodgesLehmann {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub method: Method,
}

/// Sorted Walsh averages `(x_i + x_j)/2`, `i ≤ j`.
pub fn walsh_averages(x: &[f64]) -> Vec<f64> {
    let mut w = Vec::with_capacity(x.len() * (x.len() + 1) / 2);
    for i in 0..x.len() {
        for j in i..x.len() {
            w.push((x[i] + x[j]) / 2.0);
        }
    }
    w.sort_by(f64::total_cmp);
    w
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Smallest `q` with `P(V ≤ q) ≥ p` for the untied signed-rank statistic.
pub fn signed_rank_quantile(p: f64, n: usize) -> usize {
    let w: Vec<usize> = (1..=n).collect();
    let counts = subset_sum_counts(&w);
    let total: f64 = counts.iter().sum();
    let mut acc = 0.0;
    for (q, c) in counts.iter().enumerate() {
        acc += c;
        if acc / total >= p {
            return q;
        }
    }
    counts.len() - 1
}

/// Median of Walsh averages with a `1 − alpha` interval from signed-rank
/// critical values (exact up to 12 observations, normal beyond).
pub fn hodges_lehmann_ci(sample: &[f64], alpha: f64) -> Result<HodgesLehmann, StatsError> {
    let n = sample.len();
    if n < 2 {
        return Err(StatsError::Input("need at least 2 observations".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::Input(format!("alpha {alpha} outside (0, 1)")));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::Input("non-finite value in sample".into()));
    }
    let walsh = walsh_averages(sample);
    let m = walsh.len();
    let (qu, method) = if n <= EXACT_LIMIT {
        (signed_rank_quantile(alpha / 2.0, n), Method::Exact)
    } else {
        let nf = n as f64;
        let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0).sqrt();
        let q = (nf * (nf + 1.0) / 4.0 + normal_quantile(alpha / 2.0) * sd).floor();
        (q.max(0.0) as usize, Method::Normal)
    };
    let qu = qu.clamp(1, m / 2 + m % 2);
    let ql = m - qu;
    Ok(HodgesLehmann { estimate: median_sorted(&walsh), lo: walsh[qu - 1], hi: walsh[ql], method })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tertile {
    Low,
    Medium,
    High,
}

impl Tertile {
    pub fn parse(s: &str) -> Option<Self> {
        [Tertile::Low, Tertile::Medium, Tertile::High].into_iter().find(|t| t.as_str() == s)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tertile::Low => "low",
            Tertile::Medium => "medium",
            Tertile::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TertileLabels {
    pub labels: Vec<Tertile>,
    pub p33: f64,
    pub p66: f64,
    /// Both cuts coincide, so no item can be medium.
    pub degenerate: bool,
}

/// Linear-interpolation percentile between order statistics (type 7).
pub fn percentile_type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Low is `≤ p33`, high is `> p66`, medium otherwise.
pub fn tertile_split(ratings: &[f64]) -> Result<TertileLabels, StatsError> {
    if ratings.len() < 3 {
        return Err(StatsError::Input("need at least 3 ratings".into()));
    }
    if ratings.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::Input("non-finite rating".into()));
    }
    let mut sorted = ratings.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p33 = percentile_type7(&sorted, 0.33);
    let p66 = percentile_type7(&sorted, 0.66);
    let labels = ratings
        .iter()
        .map(|&v| if v <= p33 { Tertile::Low } else if v > p66 { Tertile::High } else { Tertile::Medium })
        .collect();
    Ok(TertileLabels { labels, p33, p66, degenerate: p33 == p66 })
}

/// One line of the stats report; a failed analysis is kept with its reason.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub analysis: String,
    pub outcome: Result<TestResult, StatsError>,
    pub p_adjusted: Option<f64>,
}

/// Fills `p_adjusted` with Bonferroni values over the successful rows.
pub fn adjust_family(rows: &mut [ReportRow]) {
    let ps: Vec<f64> = rows.iter().filter_map(|r| r.outcome.as_ref().ok().map(|t| t.p_value)).collect();
    let mut adj = bonferroni(&ps).into_iter();
    for r in rows.iter_mut() {
        r.p_adjusted = r.outcome.as_ref().ok().map(|_| adj.next().expect("one per success"));
    }
}

fn num(v: f64) -> String {
    format!("{v:.10}")
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("analysis,statistic,value,p,p_adjusted,effect_r,n,method\n");
    for r in rows {
        match &r.outcome {
            Ok(t) => out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.analysis,
                t.statistic_name,
                num(t.statistic),
                num(t.p_value),
                r.p_adjusted.map_or("NA".into(), num),
                t.effect_size_r.map_or("NA".into(), num),
                t.n,
                t.method.as_str()
            )),
            Err(e) => out.push_str(&format!("{},NA,NA,NA,NA,NA,NA,\"{}\"\n", r.analysis, e.to_string().replace('"', "'"))),
        }
    }
    out
}
