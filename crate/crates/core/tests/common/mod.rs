//! Independent oracles for the integration and acceptance tests. Nothing
//! here calls into the library's numerical code.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shortform::record::AgeGroup;
use shortform::schema::{QuestionnaireSchema, SeverityScale};
use shortform::severity::{SeveritySample, Weighting};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box-Muller normal draw.
pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - r.random::<f64>();
    let u2: f64 = r.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `|a - b| ≤ tol · max(|a|, |b|)`, with exact equality for zeros.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    if a == b {
        return true;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs())
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

pub fn gauss_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let e: Vec<f64> = (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
            gauss_solve(a.to_vec(), e)
        })
        .collect();
    (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
}

/// `ln Γ(k / 2)` for a positive integer `k`, by the half-integer recursion.
pub fn ln_gamma_half(k: u32) -> f64 {
    let mut v = if k.is_multiple_of(2) {
        0.0
    } else {
        std::f64::consts::PI.sqrt().ln()
    };
    let mut x = if k.is_multiple_of(2) { 1.0 } else { 0.5 };
    while 2.0 * x < k as f64 {
        v += x.ln();
        x += 1.0;
    }
    v
}

/// Composite 5-point Gauss-Legendre rule over `n` panels. Endpoints are
/// never evaluated, so integrable endpoint limits need no special casing.
pub fn quad(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    const X: [f64; 5] = [
        0.0,
        0.538_469_310_105_683_1,
        -0.538_469_310_105_683_1,
        0.906_179_845_938_664,
        -0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let h = (b - a) / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let mid = a + (i as f64 + 0.5) * h;
        let panel: f64 = X.iter().zip(&W).map(|(x, w)| w * f(mid + 0.5 * h * x)).sum();
        total += 0.5 * h * panel;
    }
    total
}

pub fn t_density(x: f64, df: u32) -> f64 {
    let nu = df as f64;
    let c = (ln_gamma_half(df + 1) - ln_gamma_half(df)).exp() / (nu * std::f64::consts::PI).sqrt();
    c * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0)
}

/// Two-sided tail probability of Student's t by quadrature.
pub fn t_two_sided_oracle(t: f64, df: u32) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        1.0 - 2.0 * quad(|x| t_density(x, df), 0.0, a, 4_000)
    } else {
        // x = a / v maps the tail onto (0, 1]
        let g = |v: f64| t_density(a / v, df) * a / (v * v);
        2.0 * quad(g, 0.0, 1.0, 4_000)
    }
}

/// Upper tail of the F distribution by quadrature.
pub fn f_upper_oracle(f: f64, d1: u32, d2: u32) -> f64 {
    let (a, b) = (d1 as f64, d2 as f64);
    let ln_beta = ln_gamma_half(d1) + ln_gamma_half(d2) - ln_gamma_half(d1 + d2);
    let dens = |x: f64| {
        if x <= 0.0 {
            return 0.0;
        }
        ((a / 2.0) * (a * x).ln() + (b / 2.0) * b.ln() - ((a + b) / 2.0) * (a * x + b).ln() - ln_beta).exp() / x
    };
    if f <= 0.0 {
        return 1.0;
    }
    if f < 1.0 {
        // x = s² removes the x^(d1/2 - 1) singularity at zero
        1.0 - quad(|s| dens(s * s) * 2.0 * s, 0.0, f.sqrt(), 4_000)
    } else {
        let g = |v: f64| dens(f / v) * f / (v * v);
        quad(g, 0.0, 1.0, 4_000)
    }
}

pub struct OracleFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub rss: f64,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    pub f: f64,
    pub f_p: f64,
}

/// OLS with an intercept via the normal equations.
pub fn ols_oracle(cols: &[Vec<f64>], y: &[f64]) -> OracleFit {
    let n = y.len();
    let p = cols.len();
    let row = |i: usize| -> Vec<f64> { std::iter::once(1.0).chain(cols.iter().map(|c| c[i])).collect() };
    let mut xtx = vec![vec![0.0; p + 1]; p + 1];
    let mut xty = vec![0.0; p + 1];
    for i in 0..n {
        let r = row(i);
        for a in 0..=p {
            xty[a] += r[a] * y[i];
            for b in 0..=p {
                xtx[a][b] += r[a] * r[b];
            }
        }
    }
    let beta = gauss_solve(xtx.clone(), xty);
    let inv = gauss_inverse(&xtx);
    let rss: f64 = (0..n)
        .map(|i| {
            let r = row(i);
            let fit: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum();
            (y[i] - fit).powi(2)
        })
        .sum();
    let mean = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let df = n - p - 1;
    let s2 = rss / df as f64;
    let se: Vec<f64> = (0..=p).map(|j| (s2 * inv[j][j]).sqrt()).collect();
    let t: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
    let pv: Vec<f64> = t.iter().map(|&t| t_two_sided_oracle(t, df as u32)).collect();
    let r2 = 1.0 - rss / tss;
    let f = (r2 / p as f64) / ((1.0 - r2) / df as f64);
    OracleFit {
        coefficients: beta,
        std_errors: se,
        t_values: t,
        p_values: pv,
        rss,
        r_squared: r2,
        adj_r_squared: 1.0 - (1.0 - r2) * (n - 1) as f64 / df as f64,
        f,
        f_p: f_upper_oracle(f, p as u32, df as u32),
    }
}

/// RSS of the intercept-plus-`subset` fit, or `None` when the normal
/// equations are numerically singular.
pub fn subset_rss(cols: &[Vec<f64>], y: &[f64], subset: &[usize]) -> Option<f64> {
    let chosen: Vec<Vec<f64>> = subset.iter().map(|&j| cols[j].clone()).collect();
    // centered Gram matrix, to detect rank deficiency before solving
    let n = y.len() as f64;
    let centered: Vec<Vec<f64>> = chosen
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / n;
            c.iter().map(|v| v - m).collect()
        })
        .collect();
    let k = subset.len();
    let mut g = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in 0..k {
            g[a][b] = centered[a].iter().zip(&centered[b]).map(|(x, z)| x * z).sum();
        }
    }
    // Cholesky-style pivot check
    let mut l = g.clone();
    for c in 0..k {
        let d = l[c][c];
        if d <= 1e-9 * g[c][c].max(f64::MIN_POSITIVE) {
            return None;
        }
        for r in c + 1..k {
            let f = l[r][c] / d;
            for q in c..k {
                l[r][q] -= f * l[c][q];
            }
        }
    }
    Some(ols_rss(&chosen, y))
}

fn ols_rss(cols: &[Vec<f64>], y: &[f64]) -> f64 {
    let n = y.len();
    let p = cols.len();
    let mut xtx = vec![vec![0.0; p + 1]; p + 1];
    let mut xty = vec![0.0; p + 1];
    for i in 0..n {
        let r: Vec<f64> = std::iter::once(1.0).chain(cols.iter().map(|c| c[i])).collect();
        for a in 0..=p {
            xty[a] += r[a] * y[i];
            for b in 0..=p {
                xtx[a][b] += r[a] * r[b];
            }
        }
    }
    let beta = gauss_solve(xtx, xty);
    (0..n)
        .map(|i| {
            let fit = beta[0] + cols.iter().enumerate().map(|(j, c)| beta[j + 1] * c[i]).sum::<f64>();
            (y[i] - fit).powi(2)
        })
        .sum()
}

/// Every `k`-combination of `0..p` in lexicographic order.
pub fn combinations(p: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut c: Vec<usize> = (0..k).collect();
    if k > p {
        return out;
    }
    loop {
        out.push(c.clone());
        let Some(i) = (0..k).rev().find(|&i| c[i] < p - k + i) else {
            return out;
        };
        c[i] += 1;
        for j in i + 1..k {
            c[j] = c[j - 1] + 1;
        }
    }
}

/// Lexicographically first `k`-subset within `1e-9 · max(TSS, 1)` of the
/// least RSS.
pub fn exhaustive_oracle(cols: &[Vec<f64>], y: &[f64], k: usize) -> Option<(Vec<usize>, f64)> {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let tol = 1e-9 * tss.max(1.0);
    let all: Vec<(Vec<usize>, f64)> = combinations(cols.len(), k)
        .into_iter()
        .filter_map(|s| subset_rss(cols, y, &s).map(|r| (s, r)))
        .collect();
    let best = all.iter().map(|(_, r)| *r).fold(f64::INFINITY, f64::min);
    all.into_iter().find(|(_, r)| *r <= best + tol)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Random design: `p` normal columns and a response with random loadings.
pub fn random_instance(seed: u64, n: usize, p: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = rng(seed);
    let cols: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| normal(&mut r)).collect()).collect();
    let beta: Vec<f64> = (0..p).map(|_| normal(&mut r)).collect();
    let y = (0..n)
        .map(|i| 0.5 + (0..p).map(|j| beta[j] * cols[j][i]).sum::<f64>() + normal(&mut r))
        .collect();
    (cols, y)
}

/// Random instance in which some columns are copies, negated or rescaled
/// copies of earlier ones, so that equal-RSS subsets exist.
pub fn tied_instance(seed: u64, n: usize, p: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (mut cols, y) = random_instance(seed, n, p);
    let mut r = rng(seed ^ 0xabc);
    for j in (p / 2)..p {
        if j % 2 == 0 {
            let src = (j * 7 + seed as usize) % (p / 2).max(1);
            let k = [1.0, -1.0, 2.0, -0.5][j % 4];
            cols[j] = cols[src].iter().map(|v| k * v).collect();
        } else {
            cols[j] = (0..n).map(|_| normal(&mut r)).collect();
        }
    }
    (cols, y)
}

/// Bin by plain comparisons on the scaled total.
pub fn bin(x: f64, s: &SeverityScale) -> u8 {
    if x < s.mild_upper {
        0
    } else if x < s.severe_lower {
        1
    } else {
        2
    }
}

/// Accuracy straight from the definition, one sample at a time.
pub fn oracle_accuracy(
    samples: &[SeveritySample],
    maxima: &[u8],
    set: &[usize],
    scale: &SeverityScale,
    w: Weighting,
) -> f64 {
    let m: u32 = set.iter().map(|&i| maxima[i] as u32).sum();
    let (mut num, mut den) = ([0.0f64; 2], [0.0f64; 2]);
    for s in samples {
        let g = match (w, s.age_group) {
            (Weighting::Uniform, _) => 0,
            (Weighting::Only(a), b) if a == b => 0,
            (Weighting::Only(_), _) => continue,
            (Weighting::AgeBalanced, AgeGroup::Young) => 0,
            (Weighting::AgeBalanced, AgeGroup::Older) => 1,
            (Weighting::AgeBalanced, AgeGroup::Other) => continue,
        };
        let t: u32 = set.iter().map(|&i| s.scores.scores[i] as u32).sum();
        let full: u32 = s.scores.scores.iter().map(|&v| v as u32).sum();
        let hit = bin(t as f64 * scale.max_score / m as f64, scale) == bin(full as f64, scale);
        den[g] += 1.0;
        if hit {
            num[g] += 1.0;
        }
    }
    match w {
        Weighting::AgeBalanced => 0.5 * num[0] / den[0] + 0.5 * num[1] / den[1],
        _ => num[0] / den[0],
    }
}

/// Literal nested loops over one item per subtest plus any other item.
pub fn naive_structured(
    samples: &[SeveritySample],
    schema: &QuestionnaireSchema,
    w: Weighting,
    threshold: f64,
) -> (u64, u64, Vec<u64>) {
    let maxima = schema.item_maxima();
    let r: Vec<_> = (0..4).map(|s| schema.subtest_range(s)).collect();
    let mut freq = vec![0u64; schema.item_count()];
    let (mut total, mut qualified) = (0, 0);
    for a in r[0].clone() {
        for b in r[1].clone() {
            for c in r[2].clone() {
                for d in r[3].clone() {
                    for e in 0..schema.item_count() {
                        if [a, b, c, d].contains(&e) {
                            continue;
                        }
                        total += 1;
                        let set = [a, b, c, d, e];
                        if oracle_accuracy(samples, &maxima, &set, &schema.severity, w) >= threshold {
                            qualified += 1;
                            for i in set {
                                freq[i] += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    (total, qualified, freq)
}
