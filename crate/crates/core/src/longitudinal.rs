//! Change-score pipeline: shuffled train/test splits, best subsets of item
//! deltas per split, the cross-shuffle cluster tally and the final
//! one-item-per-cluster selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{age_years, duration_weeks};
use crate::record::{compute_delta, improvement_percentage, mean_sd, AgeGroup, SubjectRecord};
use crate::regress::{
    diagnostics, fit_ols, mae, mape, paired_t, vif_all, DesignMatrix, Diagnostics, FitResult, PairedTestResult,
    RegressError,
};
use crate::schema::{ItemId, QuestionnaireSchema};
use crate::subset::{best_subsets, SearchBudget, SearchStats, SubsetError};

pub const MIN_COHORT: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LongitudinalError {
    #[error("invalid shuffle plan: {0}")]
    Plan(String),
    #[error("cohort has {got} subjects; at least {need} required")]
    TooFewSubjects { got: usize, need: usize },
    #[error("shuffle {shuffle}: {source}")]
    Search { shuffle: usize, source: SubsetError },
    #[error(transparent)]
    Regress(#[from] RegressError),
    #[error("no shuffle {shuffle} with a size-{size} model")]
    NoSuchModel { shuffle: usize, size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShufflePlan {
    pub n_shuffles: usize,
    pub train_fraction: f64,
    /// Subset sizes searched are `1..=k_max`.
    pub k_max: usize,
    pub seed: u64,
    /// Candidate items; all items when absent. The response stays the
    /// full total delta either way.
    pub pool: Option<Vec<ItemId>>,
}

impl Default for ShufflePlan {
    fn default() -> Self {
        ShufflePlan {
            n_shuffles: 6,
            train_fraction: 0.7,
            k_max: 7,
            seed: 0,
            pool: None,
        }
    }
}

impl ShufflePlan {
    /// Train and test sizes for a cohort of `n`.
    pub fn split_sizes(&self, n: usize) -> (usize, usize) {
        let train = ((self.train_fraction * n as f64).round() as usize).min(n);
        (train, n - train)
    }

    pub fn validate(&self, n_subjects: usize) -> Result<(), LongitudinalError> {
        if self.n_shuffles == 0 {
            return Err(LongitudinalError::Plan("n_shuffles must be ≥ 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(LongitudinalError::Plan(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.k_max == 0 {
            return Err(LongitudinalError::Plan("k_max must be ≥ 1".into()));
        }
        if n_subjects < MIN_COHORT {
            return Err(LongitudinalError::TooFewSubjects {
                got: n_subjects,
                need: MIN_COHORT,
            });
        }
        let (train, test) = self.split_sizes(n_subjects);
        if train <= self.k_max + 1 {
            return Err(LongitudinalError::Plan(format!(
                "training split of {train} subjects must exceed k_max + 1 = {}",
                self.k_max + 1
            )));
        }
        if test == 0 {
            return Err(LongitudinalError::Plan("test split is empty".into()));
        }
        Ok(())
    }

    /// Pool as ascending item positions.
    pub fn pool_positions(&self, schema: &QuestionnaireSchema) -> Result<Vec<usize>, LongitudinalError> {
        let Some(pool) = &self.pool else {
            return Ok((0..schema.item_count()).collect());
        };
        let mut cols = pool
            .iter()
            .map(|&id| {
                schema
                    .position(id)
                    .ok_or_else(|| LongitudinalError::Plan(format!("pool item {id} is not in the schema")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        cols.sort_unstable();
        cols.dedup();
        if cols.is_empty() {
            return Err(LongitudinalError::Plan("pool is empty".into()));
        }
        Ok(cols)
    }

    /// Subject order for shuffle `index` (zero-based).
    pub fn permutation(&self, n: usize, index: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }
}

/// Item-delta design over the given subjects: one column per item, the
/// total delta as response.
pub fn delta_design(cohort: &[SubjectRecord], schema: &QuestionnaireSchema, subjects: &[usize]) -> DesignMatrix {
    let deltas: Vec<_> = subjects.iter().map(|&i| compute_delta(&cohort[i], schema)).collect();
    let rows: Vec<Vec<f64>> = deltas
        .iter()
        .map(|d| d.per_item.iter().map(|&v| v as f64).collect())
        .collect();
    let y: Vec<f64> = deltas.iter().map(|d| d.total as f64).collect();
    let design = if rows.is_empty() {
        DesignMatrix::from_columns(&vec![Vec::new(); schema.item_count()], &y)
    } else {
        DesignMatrix::from_rows(&rows, &y)
    };
    design
        .and_then(|d| d.with_names(schema.item_labels()))
        .expect("integer deltas are finite and shaped by the schema")
}

/// One fitted model: a shuffle, a subset size and its fit statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleRow {
    /// One-based.
    pub shuffle: usize,
    pub size: usize,
    pub items: Vec<ItemId>,
    /// Intercept first, then one per item.
    pub coefficients: Vec<f64>,
    pub train_rss: f64,
    pub train_r2: f64,
    pub train_adj_r2: f64,
    pub test_mae: f64,
    pub test_mape: Option<f64>,
}

impl ShuffleRow {
    pub fn equation(&self, decimals: usize) -> String {
        let mut s = format!("{:.*}", decimals, self.coefficients[0]);
        for (b, id) in self.coefficients[1..].iter().zip(&self.items) {
            s.push_str(&format!(" + {:.*} {}", decimals, b, id));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleOutcome {
    pub shuffle: usize,
    /// Subject indices into the cohort.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub failure: Option<String>,
    pub stats: Option<SearchStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleRun {
    pub rows: Vec<ShuffleRow>,
    pub shuffles: Vec<ShuffleOutcome>,
}

/// Runs every shuffle of the plan. A shuffle whose training split cannot
/// support a search is recorded as failed; exhausting the search budget is
/// an error.
pub fn run_shuffles(
    cohort: &[SubjectRecord],
    schema: &QuestionnaireSchema,
    plan: &ShufflePlan,
    budget: &SearchBudget,
) -> Result<ShuffleRun, LongitudinalError> {
    let n = cohort.len();
    plan.validate(n)?;
    let (n_train, _) = plan.split_sizes(n);
    let cols = plan.pool_positions(schema)?;
    let mut rows = Vec::new();
    let mut shuffles = Vec::new();
    for index in 0..plan.n_shuffles {
        let shuffle = index + 1;
        let order = plan.permutation(n, index);
        let (train, test) = (order[..n_train].to_vec(), order[n_train..].to_vec());
        let train_design = delta_design(cohort, schema, &train).select(&cols);
        let test_design = delta_design(cohort, schema, &test).select(&cols);
        let mut outcome = ShuffleOutcome {
            shuffle,
            train,
            test,
            failure: None,
            stats: None,
        };
        let y = train_design.response();
        if y.iter().all(|&v| v == y[0]) {
            outcome.failure = Some("zero-variance response in training split".into());
            shuffles.push(outcome);
            continue;
        }
        let k_max = plan.k_max.min(cols.len());
        match best_subsets(&train_design, k_max, budget) {
            Ok(found) => {
                outcome.stats = Some(found.stats);
                for r in &found.results {
                    rows.push(ShuffleRow {
                        shuffle,
                        size: r.size,
                        items: r.items.iter().map(|&j| schema.item_at(cols[j])).collect(),
                        coefficients: r.fit.coefficients.clone(),
                        train_rss: r.fit.rss,
                        train_r2: r.fit.r_squared,
                        train_adj_r2: r.fit.adj_r_squared,
                        test_mae: mae(&r.fit, &test_design.select(&r.items))?,
                        test_mape: mape(&r.fit, &test_design.select(&r.items))?,
                    });
                }
            }
            Err(e @ SubsetError::BoundExceeded { .. }) => {
                return Err(LongitudinalError::Search { shuffle, source: e });
            }
            Err(e) => outcome.failure = Some(e.to_string()),
        }
        shuffles.push(outcome);
    }
    Ok(ShuffleRun { rows, shuffles })
}

/// Full inference for one model of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub shuffle: usize,
    pub items: Vec<ItemId>,
    pub fit: FitResult,
    /// One per item; infinite when collinear.
    pub vifs: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Refits the size-`size` model of a shuffle on its training split.
pub fn model_report(
    cohort: &[SubjectRecord],
    schema: &QuestionnaireSchema,
    run: &ShuffleRun,
    shuffle: usize,
    size: usize,
) -> Result<ModelReport, LongitudinalError> {
    let row = run
        .rows
        .iter()
        .find(|r| r.shuffle == shuffle && r.size == size)
        .ok_or(LongitudinalError::NoSuchModel { shuffle, size })?;
    let outcome = &run.shuffles[shuffle - 1];
    let cols: Vec<usize> = row
        .items
        .iter()
        .map(|&id| schema.position(id).expect("row items come from the schema"))
        .collect();
    let design = delta_design(cohort, schema, &outcome.train).select(&cols);
    let fit = fit_ols(&design)?;
    let vifs = if cols.len() >= 2 { vif_all(&design)? } else { vec![1.0] };
    Ok(ModelReport {
        shuffle,
        items: row.items.clone(),
        diagnostics: diagnostics(&fit, &design),
        fit,
        vifs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTally {
    pub item: ItemId,
    /// One-based shuffles in which any selected subset contained the item.
    pub shuffles: Vec<usize>,
    /// Before-vs-after test over the full cohort; only for items that
    /// appeared.
    pub test: Option<PairedTestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub name: String,
    pub subtest: String,
    pub items: Vec<ItemTally>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTally {
    pub clusters: Vec<ClusterEntry>,
}

/// Paired before/after test on one item's scores over the whole cohort.
pub fn item_paired_test(cohort: &[SubjectRecord], pos: usize) -> Result<PairedTestResult, RegressError> {
    let before: Vec<f64> = cohort.iter().map(|r| r.before.scores[pos] as f64).collect();
    let after: Vec<f64> = cohort.iter().map(|r| r.after.scores[pos] as f64).collect();
    paired_t(&before, &after)
}

pub fn tally_clusters(
    run: &ShuffleRun,
    cohort: &[SubjectRecord],
    schema: &QuestionnaireSchema,
) -> Result<ClusterTally, LongitudinalError> {
    let mut seen: BTreeMap<ItemId, Vec<usize>> = BTreeMap::new();
    for row in &run.rows {
        for &id in &row.items {
            let list = seen.entry(id).or_default();
            if !list.contains(&row.shuffle) {
                list.push(row.shuffle);
            }
        }
    }
    let mut tests: BTreeMap<ItemId, PairedTestResult> = BTreeMap::new();
    let mut clusters = Vec::with_capacity(schema.clusters.len());
    for cluster in &schema.clusters {
        let mut ids: Vec<ItemId> = cluster.item_ids().collect();
        ids.sort();
        let mut items = Vec::with_capacity(ids.len());
        for id in ids {
            let mut shuffles = seen.get(&id).cloned().unwrap_or_default();
            shuffles.sort_unstable();
            let test = if shuffles.is_empty() {
                None
            } else if let Some(t) = tests.get(&id) {
                Some(*t)
            } else {
                let t = item_paired_test(
                    cohort,
                    schema.require_position(id).expect("cluster items are in the schema"),
                )?;
                tests.insert(id, t);
                Some(t)
            };
            items.push(ItemTally {
                item: id,
                shuffles,
                test,
            });
        }
        clusters.push(ClusterEntry {
            name: cluster.name.clone(),
            subtest: cluster.subtest.code(),
            items,
        });
    }
    Ok(ClusterTally { clusters })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterChoice {
    pub cluster: String,
    pub subtest: String,
    pub item: Option<ItemId>,
    pub p_value: Option<f64>,
    pub cohen_d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSelection {
    pub clusters: Vec<ClusterChoice>,
    /// Chosen items in canonical order, without duplicates.
    pub shortlist: Vec<ItemId>,
}

/// Per cluster, the appearing item with the smallest p-value, kept only
/// when that p-value is below `alpha`. Equal p-values go to the earlier
/// item.
pub fn final_selection(tally: &ClusterTally, alpha: f64) -> FinalSelection {
    let mut clusters = Vec::with_capacity(tally.clusters.len());
    let mut shortlist = Vec::new();
    for entry in &tally.clusters {
        let best = entry
            .items
            .iter()
            .filter(|t| !t.shuffles.is_empty())
            .filter_map(|t| t.test.map(|r| (t.item, r)))
            .min_by(|a, b| a.1.p.total_cmp(&b.1.p).then(a.0.cmp(&b.0)));
        let chosen = best.filter(|(_, r)| r.p < alpha);
        if let Some((id, _)) = chosen {
            shortlist.push(id);
        }
        clusters.push(ClusterChoice {
            cluster: entry.name.clone(),
            subtest: entry.subtest.clone(),
            item: chosen.map(|(id, _)| id),
            p_value: chosen.map(|(_, r)| r.p),
            cohen_d: chosen.map(|(_, r)| r.cohen_d),
        });
    }
    shortlist.sort();
    shortlist.dedup();
    FinalSelection { clusters, shortlist }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    fn of(v: &[f64]) -> Self {
        let (mean, sd) = mean_sd(v);
        MeanSd { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub name: String,
    pub max_score: u32,
    pub before: MeanSd,
    pub after: MeanSd,
    /// Per-subject `before - after`.
    pub improvement: MeanSd,
    /// Percent of baseline over subjects with a non-zero baseline.
    pub improvement_pct: Option<MeanSd>,
    pub paired_t: Option<f64>,
    pub paired_p: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryFractions {
    pub entries: usize,
    pub improved: f64,
    pub unchanged: f64,
    pub deteriorated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSummary {
    pub item: ItemId,
    pub improved: usize,
    pub unchanged: usize,
    pub deteriorated: usize,
    /// Pearson correlation of item delta with total delta; `None` when
    /// either is constant.
    pub correlation_with_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n_subjects: usize,
    pub age_before: MeanSd,
    pub age_after: MeanSd,
    pub duration_weeks: MeanSd,
    pub age_group_counts: BTreeMap<String, usize>,
    pub subtests: Vec<ScoreSummary>,
    pub total: ScoreSummary,
    pub subjects_improved: usize,
    pub subjects_unchanged: usize,
    pub subjects_worsened: usize,
    pub item_entries: EntryFractions,
    pub items: Vec<ItemSummary>,
}

fn score_summary(name: String, max_score: u32, before: &[f64], after: &[f64], pct: Vec<Option<f64>>) -> ScoreSummary {
    let improvement: Vec<f64> = before.iter().zip(after).map(|(b, a)| b - a).collect();
    let pct: Vec<f64> = pct.into_iter().flatten().collect();
    let test = paired_t(before, after).ok();
    ScoreSummary {
        name,
        max_score,
        before: MeanSd::of(before),
        after: MeanSd::of(after),
        improvement: MeanSd::of(&improvement),
        improvement_pct: (!pct.is_empty()).then(|| MeanSd::of(&pct)),
        paired_t: test.map(|t| t.t),
        paired_p: test.map(|t| t.p),
    }
}

fn correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Descriptive statistics of a cohort. Paired tests are absent for a
/// single subject.
pub fn cohort_summary(
    cohort: &[SubjectRecord],
    schema: &QuestionnaireSchema,
) -> Result<CohortSummary, LongitudinalError> {
    if cohort.is_empty() {
        return Err(LongitudinalError::TooFewSubjects { got: 0, need: 1 });
    }
    let deltas: Vec<_> = cohort.iter().map(|r| compute_delta(r, schema)).collect();
    let pcts: Vec<_> = cohort.iter().map(|r| improvement_percentage(r, schema)).collect();
    let before_sub: Vec<Vec<u32>> = cohort.iter().map(|r| r.before.subtotals(schema)).collect();
    let after_sub: Vec<Vec<u32>> = cohort.iter().map(|r| r.after.subtotals(schema)).collect();

    let subtests = (0..schema.subtest_count())
        .map(|s| {
            let b: Vec<f64> = before_sub.iter().map(|v| v[s] as f64).collect();
            let a: Vec<f64> = after_sub.iter().map(|v| v[s] as f64).collect();
            score_summary(
                schema.subtests[s].name.clone(),
                schema.subtest_max(s),
                &b,
                &a,
                pcts.iter().map(|p| p.per_subtest[s]).collect(),
            )
        })
        .collect();
    let b: Vec<f64> = cohort.iter().map(|r| r.before.total() as f64).collect();
    let a: Vec<f64> = cohort.iter().map(|r| r.after.total() as f64).collect();
    let total = score_summary(
        "Total".into(),
        schema.max_total(),
        &b,
        &a,
        pcts.iter().map(|p| p.overall).collect(),
    );

    let totals: Vec<f64> = deltas.iter().map(|d| d.total as f64).collect();
    let p = schema.item_count();
    let mut items = Vec::with_capacity(p);
    let (mut up, mut same, mut down) = (0usize, 0usize, 0usize);
    for pos in 0..p {
        let col: Vec<f64> = deltas.iter().map(|d| d.per_item[pos] as f64).collect();
        let improved = col.iter().filter(|&&v| v > 0.0).count();
        let deteriorated = col.iter().filter(|&&v| v < 0.0).count();
        let unchanged = col.len() - improved - deteriorated;
        up += improved;
        same += unchanged;
        down += deteriorated;
        items.push(ItemSummary {
            item: schema.item_at(pos),
            improved,
            unchanged,
            deteriorated,
            correlation_with_total: correlation(&col, &totals),
        });
    }
    let entries = cohort.len() * p;
    let frac = |c: usize| c as f64 / entries as f64;

    let ages_before: Vec<f64> = cohort.iter().map(|r| r.age_at(r.before.date)).collect();
    let ages_after: Vec<f64> = cohort.iter().map(|r| r.age_at(r.after.date)).collect();
    let durations: Vec<f64> = cohort
        .iter()
        .map(|r| duration_weeks(r.before.date, r.after.date).unwrap_or(0.0))
        .collect();
    let mut age_group_counts = BTreeMap::new();
    for r in cohort {
        let g = AgeGroup::from_age(age_years(r.birth_date, r.before.date).unwrap_or(-1.0));
        *age_group_counts.entry(g.label().to_string()).or_insert(0) += 1;
    }

    Ok(CohortSummary {
        n_subjects: cohort.len(),
        age_before: MeanSd::of(&ages_before),
        age_after: MeanSd::of(&ages_after),
        duration_weeks: MeanSd::of(&durations),
        age_group_counts,
        subtests,
        total,
        subjects_improved: deltas.iter().filter(|d| d.total > 0).count(),
        subjects_unchanged: deltas.iter().filter(|d| d.total == 0).count(),
        subjects_worsened: deltas.iter().filter(|d| d.total < 0).count(),
        item_entries: EntryFractions {
            entries,
            improved: frac(up),
            unchanged: frac(same),
            deteriorated: frac(down),
        },
        items,
    })
}
