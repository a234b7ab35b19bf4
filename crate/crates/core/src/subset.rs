//! Exact best-subsets selection by branch and bound.
//!
//! Columns and response are centered so the intercept drops out; all work
//! happens on the centered Gram matrix. The search walks subsets in
//! lexicographic order. A node holds the Gram matrix of its remaining
//! candidates residualized on the node's subset, so adding candidate `j`
//! lowers the RSS by `e_j² / d_j` with `d` the residualized diagonal and
//! `e` the residualized cross-product with the response.
//!
//! Ties: for each size the result is the lexicographically smallest subset
//! whose RSS is within [`tie_tolerance`] of the minimum.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::regress::{fit_ols, DesignMatrix, FitResult, RegressError};

/// A candidate whose residualized variance falls below this fraction of its
/// own variance is treated as collinear with the current subset.
pub const PIVOT_TOL: f64 = 1e-10;

/// Node-count granularity for budget checks.
const FLUSH_EVERY: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SubsetError {
    #[error("need n > k_max + 1: n = {n}, k_max = {k_max}")]
    TooFewObservations { n: usize, k_max: usize },
    #[error("subset size must be between 1 and the pool size {p}, got {k}")]
    InvalidSize { k: usize, p: usize },
    #[error("pool has {p} columns, above the exact-search limit of {limit}")]
    PoolTooLarge { p: usize, limit: usize },
    #[error("no full-rank subset of size {0}")]
    NoFeasibleSubset(usize),
    #[error("search budget exhausted after {nodes} nodes; no exact result")]
    BoundExceeded { nodes: u64 },
    #[error("C({p}, {k}) = {count} candidates exceeds the cap of {cap}; use best_subsets")]
    EnumerationCap { p: usize, k: usize, count: u128, cap: u64 },
    #[error(transparent)]
    Regress(#[from] RegressError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchBudget {
    /// Largest pool searched exactly.
    pub exact_limit: usize,
    /// Evaluated-subset cap; exceeding it yields `BoundExceeded`.
    pub node_limit: Option<u64>,
    /// Wall-clock cap. Unlike the node cap, hitting it is timing dependent.
    pub time_limit: Option<Duration>,
    /// Scheduling granularity: prefix tasks are grouped into this many
    /// chunks per worker queue (0 = one task per chunk). Never affects
    /// results or node counts.
    pub parallel_chunks: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            exact_limit: 77,
            node_limit: None,
            time_limit: None,
            parallel_chunks: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub size: usize,
    /// Pool column indices, ascending.
    pub items: Vec<usize>,
    pub names: Vec<String>,
    /// RSS of `fit`.
    pub rss: f64,
    pub fit: FitResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SearchStats {
    /// Subsets whose RSS was evaluated.
    pub nodes: u64,
    /// Subtrees cut by the bound.
    pub pruned: u64,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSubsets {
    /// One entry per size `1..=k_max`.
    pub results: Vec<SubsetResult>,
    pub stats: SearchStats,
}

/// RSS slack within which two subsets count as tied.
pub fn tie_tolerance(tss: f64) -> f64 {
    1e-9 * tss.max(1.0)
}

struct Prepared {
    /// Pool column index of each usable column.
    cols: Vec<usize>,
    m: usize,
    gram: Vec<f64>,
    cross: Vec<f64>,
    yy: f64,
    pivot_tol: Vec<f64>,
}

impl Prepared {
    fn new(pool: &DesignMatrix) -> Self {
        let n = pool.n();
        let y = pool.response();
        let ybar = y.iter().sum::<f64>() / n as f64;
        let yc: Vec<f64> = y.iter().map(|v| v - ybar).collect();
        let x = pool.x();
        let mut cols = Vec::new();
        let mut centered: Vec<Vec<f64>> = Vec::new();
        for j in 0..pool.p() {
            let col = x.column(j);
            if col.iter().all(|&v| v == col[0]) {
                continue;
            }
            let mean = col.iter().sum::<f64>() / n as f64;
            cols.push(j);
            centered.push(col.iter().map(|v| v - mean).collect());
        }
        let m = cols.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        let mut gram = vec![0.0; m * m];
        for a in 0..m {
            for b in a..m {
                let v = dot(&centered[a], &centered[b]);
                gram[a * m + b] = v;
                gram[b * m + a] = v;
            }
        }
        let cross = centered.iter().map(|c| dot(c, &yc)).collect();
        let pivot_tol = (0..m).map(|a| PIVOT_TOL * gram[a * m + a]).collect();
        Prepared {
            cols,
            m,
            gram,
            cross,
            yy: dot(&yc, &yc),
            pivot_tol,
        }
    }
}

/// Residualizes a level (`mm` candidates) on candidate `t`, writing the
/// level of candidates `t+1..` into `dst`.
fn eliminate(mat: &[f64], e: &[f64], mm: usize, t: usize, dst: &mut Vec<f64>, dst_e: &mut Vec<f64>) {
    let d = mat[t * mm + t];
    let et = e[t];
    let m2 = mm - t - 1;
    dst.clear();
    dst_e.clear();
    let row_t = &mat[t * mm + t + 1..(t + 1) * mm];
    for a in t + 1..mm {
        let f = mat[a * mm + t] / d;
        let row_a = &mat[a * mm + t + 1..(a + 1) * mm];
        dst.extend(row_a.iter().zip(row_t).map(|(x, y)| x - f * y));
        dst_e.push(e[a] - f * et);
    }
    debug_assert_eq!(dst.len(), m2 * m2);
}

/// Per-size lexicographically ordered candidates with strictly decreasing
/// RSS, all within tolerance of the best seen.
#[derive(Debug, Default)]
struct Local {
    lists: Vec<Vec<(f64, Vec<usize>)>>,
    list_min: Vec<f64>,
    /// Best RSS known per size, greedy included; drives pruning.
    bound: Vec<f64>,
    nodes: u64,
    unflushed: u64,
    pruned: u64,
    aborted: bool,
    scratch: Vec<f64>,
    scratch_e: Vec<f64>,
}

impl Local {
    fn new(k_max: usize, seed: &[f64]) -> Self {
        Local {
            lists: vec![Vec::new(); k_max + 1],
            list_min: vec![f64::INFINITY; k_max + 1],
            bound: seed.to_vec(),
            ..Default::default()
        }
    }

    #[inline]
    fn record(&mut self, size: usize, rss: f64, subset: &[usize], last: Option<usize>, tol: f64) {
        if rss < self.list_min[size] && rss <= self.bound[size] + tol {
            self.accept(size, rss, subset, last, tol);
        }
    }

    #[cold]
    fn accept(&mut self, size: usize, rss: f64, subset: &[usize], last: Option<usize>, tol: f64) {
        let mut s = subset.to_vec();
        s.extend(last);
        self.list_min[size] = rss;
        self.bound[size] = self.bound[size].min(rss);
        let cut = self.bound[size] + tol;
        let list = &mut self.lists[size];
        let keep_from = list.iter().position(|(r, _)| *r <= cut).unwrap_or(list.len());
        list.drain(..keep_from);
        list.push((rss, s));
    }
}

struct Control<'a> {
    prep: &'a Prepared,
    k_max: usize,
    n: usize,
    tol: f64,
    /// `binom[m][r]` = number of subsets of size 1..=r from m candidates.
    descendants: Vec<Vec<f64>>,
    nodes: AtomicU64,
    abort: AtomicBool,
    node_limit: Option<u64>,
    deadline: Option<Instant>,
}

impl Control<'_> {
    fn flush(&self, local: &mut Local) {
        let total = self.nodes.fetch_add(local.unflushed, Ordering::Relaxed) + local.unflushed;
        local.unflushed = 0;
        let over_nodes = self.node_limit.is_some_and(|l| total > l);
        let over_time = self.deadline.is_some_and(|d| Instant::now() >= d);
        if over_nodes || over_time {
            self.abort.store(true, Ordering::Relaxed);
        }
        if self.abort.load(Ordering::Relaxed) {
            local.aborted = true;
        }
    }

    #[inline]
    fn count(&self, local: &mut Local, k: u64) {
        local.nodes += k;
        local.unflushed += k;
        if local.unflushed >= FLUSH_EVERY {
            self.flush(local);
        }
    }

    /// RSS of the subset extended by every candidate: a lower bound for the
    /// whole subtree.
    fn span_rss(&self, local: &mut Local, mat: &[f64], e: &[f64], mm: usize, base: usize, rss: f64) -> f64 {
        let a_buf = &mut local.scratch;
        let e_buf = &mut local.scratch_e;
        a_buf.clear();
        a_buf.extend_from_slice(mat);
        e_buf.clear();
        e_buf.extend_from_slice(e);
        let mut r = rss;
        for a in 0..mm {
            let d = a_buf[a * mm + a];
            if d <= self.prep.pivot_tol[base + a] {
                continue;
            }
            let ea = e_buf[a];
            r -= ea * ea / d;
            for b in a + 1..mm {
                let f = a_buf[b * mm + a] / d;
                if f == 0.0 {
                    continue;
                }
                for c in a + 1..mm {
                    a_buf[b * mm + c] -= f * a_buf[a * mm + c];
                }
                e_buf[b] -= f * ea;
            }
        }
        r
    }

    /// Whether the subtree below a node of `size` with `mm` candidates can be
    /// discarded.
    #[allow(clippy::too_many_arguments)]
    fn prunable(
        &self,
        local: &mut Local,
        size: usize,
        mat: &[f64],
        e: &[f64],
        mm: usize,
        base: usize,
        rss: f64,
    ) -> bool {
        if size + mm + 2 > self.n {
            return false;
        }
        let depth = self.k_max - size;
        if self.descendants[mm][depth] < (mm * mm * mm) as f64 {
            return false;
        }
        let top = self.k_max.min(size + mm);
        let threshold = (size + 1..=top)
            .map(|k| local.bound[k] + self.tol)
            .fold(f64::NEG_INFINITY, f64::max);
        if !threshold.is_finite() {
            return false;
        }
        self.span_rss(local, mat, e, mm, base, rss) > threshold
    }

    /// Visits every extension of `subset` (size `s`, candidates `base..m`).
    /// `levels[0]` holds the current node's matrix and cross-products.
    fn explore(
        &self,
        local: &mut Local,
        levels: &mut [(Vec<f64>, Vec<f64>)],
        subset: &mut Vec<usize>,
        base: usize,
        rss: f64,
    ) {
        let s = subset.len();
        let mm = self.prep.m - base;
        let (cur, rest) = levels.split_first_mut().expect("level buffers");
        let (mat, e) = (&cur.0, &cur.1);
        let tol = &self.prep.pivot_tol;
        for t in 0..mm {
            if local.aborted {
                return;
            }
            let u = base + t;
            let d = mat[t * mm + t];
            if d <= tol[u] {
                continue;
            }
            let et = e[t];
            let rss1 = rss - et * et / d;
            self.count(local, 1);
            local.record(s + 1, rss1, subset, Some(u), self.tol);
            if s + 1 >= self.k_max || t + 1 >= mm {
                continue;
            }
            subset.push(u);
            if s + 2 == self.k_max {
                // children are leaves: only their diagonal and cross-product
                let inv = 1.0 / d;
                let mut evaluated = 0;
                for a in t + 1..mm {
                    let mat_at = mat[a * mm + t];
                    let d2 = mat[a * mm + a] - mat_at * mat_at * inv;
                    if d2 <= tol[base + a] {
                        continue;
                    }
                    let e2 = e[a] - mat_at * et * inv;
                    let rss2 = rss1 - e2 * e2 / d2;
                    evaluated += 1;
                    local.record(self.k_max, rss2, subset, Some(base + a), self.tol);
                }
                self.count(local, evaluated);
            } else {
                let child = &mut rest[0];
                eliminate(mat, e, mm, t, &mut child.0, &mut child.1);
                let prune = self.prunable(local, s + 1, &child.0, &child.1, mm - t - 1, u + 1, rss1);
                if prune {
                    local.pruned += 1;
                } else {
                    self.explore(local, rest, subset, u + 1, rss1);
                }
            }
            subset.pop();
        }
    }
}

/// Forward selection RSS per size; `INFINITY` past the last feasible step.
fn greedy_bounds(prep: &Prepared, k_max: usize) -> Vec<f64> {
    let m = prep.m;
    let mut a = prep.gram.clone();
    let mut e = prep.cross.clone();
    let mut chosen = vec![false; m];
    let mut rss = prep.yy;
    let mut out = vec![f64::INFINITY; k_max + 1];
    for slot in out.iter_mut().skip(1) {
        let mut best: Option<(usize, f64)> = None;
        for t in (0..m).filter(|&t| !chosen[t]) {
            let d = a[t * m + t];
            if d <= prep.pivot_tol[t] {
                continue;
            }
            let gain = e[t] * e[t] / d;
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((t, gain));
            }
        }
        let Some((t, gain)) = best else { break };
        chosen[t] = true;
        rss -= gain;
        *slot = rss;
        let d = a[t * m + t];
        for r in (0..m).filter(|&r| !chosen[r]) {
            let f = a[r * m + t] / d;
            for c in (0..m).filter(|&c| !chosen[c]) {
                a[r * m + c] -= f * a[t * m + c];
            }
            e[r] -= f * e[t];
        }
    }
    out
}

fn descendant_table(m: usize, k_max: usize) -> Vec<Vec<f64>> {
    let mut binom = vec![vec![0.0f64; k_max + 1]; m + 1];
    for row in 0..=m {
        binom[row][0] = 1.0;
        for r in 1..=k_max.min(row) {
            binom[row][r] = binom[row - 1][r - 1] + binom[row - 1][r];
        }
    }
    binom
        .iter()
        .map(|row| {
            let mut acc = 0.0;
            (0..=k_max)
                .map(|r| {
                    if r > 0 {
                        acc += row[r];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Best subsets of every size `1..=k_max` by RSS.
pub fn best_subsets(pool: &DesignMatrix, k_max: usize, budget: &SearchBudget) -> Result<BestSubsets, SubsetError> {
    let (n, p) = (pool.n(), pool.p());
    if p > budget.exact_limit {
        return Err(SubsetError::PoolTooLarge {
            p,
            limit: budget.exact_limit,
        });
    }
    if k_max == 0 || k_max > p {
        return Err(SubsetError::InvalidSize { k: k_max, p });
    }
    if n <= k_max + 1 {
        return Err(SubsetError::TooFewObservations { n, k_max });
    }
    let prep = Prepared::new(pool);
    let m = prep.m;
    let tol = tie_tolerance(prep.yy);
    let seed = greedy_bounds(&prep, k_max);
    let ctl = Control {
        prep: &prep,
        k_max,
        n,
        tol,
        descendants: descendant_table(m, k_max),
        nodes: AtomicU64::new(0),
        abort: AtomicBool::new(false),
        node_limit: budget.node_limit,
        deadline: budget.time_limit.map(|d| Instant::now() + d),
    };

    // size one, sequentially
    let mut first = Local::new(k_max, &seed);
    for u in 0..m {
        let d = prep.gram[u * m + u];
        if d <= prep.pivot_tol[u] {
            continue;
        }
        ctl.count(&mut first, 1);
        first.record(1, prep.yy - prep.cross[u] * prep.cross[u] / d, &[], Some(u), tol);
    }
    ctl.flush(&mut first);

    let tasks: Vec<(usize, usize)> = if k_max >= 2 {
        (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect()
    } else {
        Vec::new()
    };
    let min_len = if budget.parallel_chunks == 0 {
        1
    } else {
        tasks.len().div_ceil(budget.parallel_chunks).max(1)
    };
    let run_task = |&(j1, j2): &(usize, usize)| -> Local {
        let mut local = Local::new(k_max, &seed);
        if ctl.abort.load(Ordering::Relaxed) {
            local.aborted = true;
            return local;
        }
        let d1 = prep.gram[j1 * m + j1];
        if d1 <= prep.pivot_tol[j1] {
            return local;
        }
        let mut levels = vec![(Vec::with_capacity(m * m), Vec::with_capacity(m)); k_max.max(2)];
        let (mut l1, mut e1) = (Vec::with_capacity(m * m), Vec::with_capacity(m));
        eliminate(&prep.gram, &prep.cross, m, j1, &mut l1, &mut e1);
        let mm = m - j1 - 1;
        let t = j2 - j1 - 1;
        let d2 = l1[t * mm + t];
        if d2 <= prep.pivot_tol[j2] {
            return local;
        }
        let rss = prep.yy - prep.cross[j1] * prep.cross[j1] / d1 - e1[t] * e1[t] / d2;
        ctl.count(&mut local, 1);
        local.record(2, rss, &[j1], Some(j2), tol);
        if k_max > 2 && j2 + 1 < m {
            let (lv, le) = &mut levels[0];
            eliminate(&l1, &e1, mm, t, lv, le);
            if ctl.prunable(&mut local, 2, lv, le, m - j2 - 1, j2 + 1, rss) {
                local.pruned += 1;
            } else {
                ctl.explore(&mut local, &mut levels, &mut vec![j1, j2], j2 + 1, rss);
            }
        }
        ctl.flush(&mut local);
        local
    };
    let locals: Vec<Local> = tasks.par_iter().with_min_len(min_len).map(run_task).collect();

    let nodes = ctl.nodes.load(Ordering::Relaxed);
    let aborted = first.aborted || locals.iter().any(|l| l.aborted);
    if aborted || budget.node_limit.is_some_and(|l| nodes > l) {
        return Err(SubsetError::BoundExceeded { nodes });
    }

    let mut results = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let mut entries = first.lists[k]
            .iter()
            .chain(locals.iter().flat_map(|l| l.lists[k].iter()));
        let gmin = entries.clone().map(|(r, _)| *r).fold(f64::INFINITY, f64::min);
        let chosen = entries
            .find(|(r, _)| *r <= gmin + tol)
            .ok_or(SubsetError::NoFeasibleSubset(k))?;
        let items: Vec<usize> = chosen.1.iter().map(|&u| prep.cols[u]).collect();
        results.push(subset_result(pool, items)?);
    }
    Ok(BestSubsets {
        results,
        stats: SearchStats {
            nodes,
            pruned: first.pruned + locals.iter().map(|l| l.pruned).sum::<u64>(),
            tasks: tasks.len(),
        },
    })
}

fn subset_result(pool: &DesignMatrix, items: Vec<usize>) -> Result<SubsetResult, SubsetError> {
    let fit = fit_ols(&pool.select(&items))?;
    Ok(SubsetResult {
        size: items.len(),
        names: items.iter().map(|&j| pool.names()[j].clone()).collect(),
        items,
        rss: fit.rss,
        fit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveResult {
    pub result: SubsetResult,
    /// Subsets enumerated (`C(p, size)`).
    pub candidates: u64,
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Literal enumeration of every subset of one size, each fitted from
/// scratch. Reference for [`best_subsets`].
pub fn enumerate_exhaustive(pool: &DesignMatrix, size: usize, cap: u64) -> Result<ExhaustiveResult, SubsetError> {
    let (n, p) = (pool.n(), pool.p());
    if size == 0 || size > p {
        return Err(SubsetError::InvalidSize { k: size, p });
    }
    if n <= size + 1 {
        return Err(SubsetError::TooFewObservations { n, k_max: size });
    }
    let count = binomial(p, size);
    if count > cap as u128 {
        return Err(SubsetError::EnumerationCap { p, k: size, count, cap });
    }
    let rss_of = |comb: &[usize]| match fit_ols(&pool.select(comb)) {
        Ok(fit) => Ok(Some(fit.rss)),
        Err(RegressError::Collinear { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    let mut min = f64::INFINITY;
    let mut candidates = 0u64;
    for_each_combination(p, size, |comb| {
        candidates += 1;
        if let Some(r) = rss_of(comb)? {
            min = min.min(r);
        }
        Ok(true)
    })?;
    let ybar = pool.response().iter().sum::<f64>() / n as f64;
    let tss: f64 = pool.response().iter().map(|y| (y - ybar).powi(2)).sum();
    let cut = min + tie_tolerance(tss);
    let mut winner = None;
    for_each_combination(p, size, |comb| {
        if rss_of(comb)?.is_some_and(|r| r <= cut) {
            winner = Some(comb.to_vec());
            return Ok(false);
        }
        Ok(true)
    })?;
    let items = winner.ok_or(SubsetError::NoFeasibleSubset(size))?;
    Ok(ExhaustiveResult {
        result: subset_result(pool, items)?,
        candidates,
    })
}

/// Calls `f` on each `k`-combination of `0..p` in lexicographic order until
/// it returns `false`.
fn for_each_combination(
    p: usize,
    k: usize,
    mut f: impl FnMut(&[usize]) -> Result<bool, RegressError>,
) -> Result<(), RegressError> {
    let mut comb: Vec<usize> = (0..k).collect();
    loop {
        if !f(&comb)? {
            return Ok(());
        }
        let Some(i) = (0..k).rev().find(|&i| comb[i] < p - k + i) else {
            return Ok(());
        };
        comb[i] += 1;
        for j in i + 1..k {
            comb[j] = comb[j - 1] + 1;
        }
    }
}
