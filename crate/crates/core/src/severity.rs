//! Point-in-time severity: classification of scaled subset totals,
//! accuracy of a subset against the full questionnaire, the structured
//! one-per-subtest brute force and the size-stratified random search.
//!
//! A subset total `t` with attainable maximum `m` is scaled to
//! `t · max_score / m` and binned. With integer bin bounds the division is
//! exact whenever the scaled total lands on a bound. The reference class
//! of a sample is the class of its raw full total.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::record::{mean_sd, AgeGroup, AssessmentScores, SubjectRecord};
use crate::schema::{ItemId, QuestionnaireSchema, Severity, SeverityScale};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SeverityError {
    #[error("total {total} outside 0..={max}")]
    OutOfRange { total: f64, max: f64 },
    #[error("subset is empty")]
    EmptySubset,
    #[error("no samples")]
    NoSamples,
    #[error("weighting {weighting} needs samples in age group {group}")]
    MissingGroup { weighting: String, group: &'static str },
    #[error("structured search needs at least 4 subtests, schema has {0}")]
    TooFewSubtests(usize),
    #[error("subset position {0} outside the schema")]
    BadPosition(usize),
    #[error("{0}")]
    Config(String),
}

/// Bins a scaled total.
pub fn classify(total: f64, scale: &SeverityScale) -> Result<Severity, SeverityError> {
    scale.classify(total).ok_or(SeverityError::OutOfRange {
        total,
        max: scale.max_score,
    })
}

/// Class of a subset total `subtotal` out of an attainable `submax`.
#[inline]
pub fn scaled_class(subtotal: u32, submax: u32, scale: &SeverityScale) -> Severity {
    let x = subtotal as f64 * scale.max_score / submax as f64;
    if x < scale.mild_upper {
        Severity::Mild
    } else if x < scale.severe_lower {
        Severity::Moderate
    } else {
        Severity::Severe
    }
}

/// Class of a raw full-questionnaire total; totals above the scale maximum
/// count as severe.
pub fn reference_class(total: u32, scale: &SeverityScale) -> Severity {
    let t = total as f64;
    if t < scale.mild_upper {
        Severity::Mild
    } else if t < scale.severe_lower {
        Severity::Moderate
    } else {
        Severity::Severe
    }
}

/// `Σ scores[subset] · max_score / Σ maxima[subset]`.
pub fn scaled_subset_total(
    scores: &AssessmentScores,
    subset: &[usize],
    schema: &QuestionnaireSchema,
    scale: &SeverityScale,
) -> Result<f64, SeverityError> {
    if subset.is_empty() {
        return Err(SeverityError::EmptySubset);
    }
    let (mut t, mut m) = (0u32, 0u32);
    for &pos in subset {
        if pos >= schema.item_count() {
            return Err(SeverityError::BadPosition(pos));
        }
        t += scores.scores[pos] as u32;
        m += schema.max_score_at(pos) as u32;
    }
    Ok(t as f64 * scale.max_score / m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Before,
    After,
}

/// One completed questionnaire used as a classification example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeveritySample {
    pub subject_id: String,
    pub phase: Phase,
    pub scores: AssessmentScores,
    /// At this sample's own assessment date.
    pub age_group: AgeGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplePool {
    #[default]
    Both,
    BeforeOnly,
}

pub fn samples_from_cohort(cohort: &[SubjectRecord], pool: SamplePool) -> Vec<SeveritySample> {
    let mut out = Vec::with_capacity(cohort.len() * 2);
    for r in cohort {
        let phases: &[(Phase, &AssessmentScores)] = match pool {
            SamplePool::Both => &[(Phase::Before, &r.before), (Phase::After, &r.after)],
            SamplePool::BeforeOnly => &[(Phase::Before, &r.before)],
        };
        for &(phase, a) in phases {
            out.push(SeveritySample {
                subject_id: r.subject_id.clone(),
                phase,
                scores: a.clone(),
                age_group: AgeGroup::from_age(r.age_at(a.date)),
            });
        }
    }
    out
}

/// How matches are weighed into an accuracy. Written as `uniform`,
/// `only_2-5`, `only_6-10`, `only_other` or `age_balanced`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Every sample counts equally.
    Uniform,
    /// Only samples of one age group, equally.
    Only(AgeGroup),
    /// Half the weight to each of the 2-5 and 6-10 groups; other ages
    /// count for nothing.
    AgeBalanced,
}

impl Weighting {
    pub fn label(&self) -> String {
        match self {
            Weighting::Uniform => "uniform".into(),
            Weighting::Only(g) => format!("only_{}", g.label()),
            Weighting::AgeBalanced => "age_balanced".into(),
        }
    }
}

impl std::fmt::Display for Weighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

impl std::str::FromStr for Weighting {
    type Err = SeverityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "uniform" => Weighting::Uniform,
            "age_balanced" => Weighting::AgeBalanced,
            "only_2-5" => Weighting::Only(AgeGroup::Young),
            "only_6-10" => Weighting::Only(AgeGroup::Older),
            "only_other" => Weighting::Only(AgeGroup::Other),
            _ => return Err(SeverityError::Config(format!("unknown weighting `{s}`"))),
        })
    }
}

impl Serialize for Weighting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Weighting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Samples preprocessed for fast accuracy evaluation.
pub struct Evaluator {
    scale: SeverityScale,
    maxima: Vec<u8>,
    ns: usize,
    /// Item-major: `scores[item * ns + sample]`.
    scores: Vec<u8>,
    reference: Vec<Severity>,
    /// 0 or 1; only meaningful for age balancing.
    group: Vec<u8>,
    group_sizes: [u32; 2],
    balanced: bool,
}

impl Evaluator {
    pub fn new(
        samples: &[SeveritySample],
        schema: &QuestionnaireSchema,
        weighting: Weighting,
    ) -> Result<Self, SeverityError> {
        let scale = schema.severity;
        let kept: Vec<(&SeveritySample, u8)> = samples
            .iter()
            .filter_map(|s| match weighting {
                Weighting::Uniform => Some((s, 0)),
                Weighting::Only(g) => (s.age_group == g).then_some((s, 0)),
                Weighting::AgeBalanced => match s.age_group {
                    AgeGroup::Young => Some((s, 0)),
                    AgeGroup::Older => Some((s, 1)),
                    AgeGroup::Other => None,
                },
            })
            .collect();
        if samples.is_empty() {
            return Err(SeverityError::NoSamples);
        }
        let mut group_sizes = [0u32; 2];
        for (_, g) in &kept {
            group_sizes[*g as usize] += 1;
        }
        let missing = |group| SeverityError::MissingGroup {
            weighting: weighting.label(),
            group,
        };
        match weighting {
            Weighting::Uniform => {}
            Weighting::Only(g) if kept.is_empty() => return Err(missing(g.label())),
            Weighting::Only(_) => {}
            Weighting::AgeBalanced => {
                if group_sizes[0] == 0 {
                    return Err(missing(AgeGroup::Young.label()));
                }
                if group_sizes[1] == 0 {
                    return Err(missing(AgeGroup::Older.label()));
                }
            }
        }
        let p = schema.item_count();
        let ns = kept.len();
        let mut scores = vec![0u8; p * ns];
        for (s, (sample, _)) in kept.iter().enumerate() {
            for (i, &v) in sample.scores.scores.iter().enumerate() {
                scores[i * ns + s] = v;
            }
        }
        Ok(Evaluator {
            scale,
            maxima: schema.item_maxima(),
            ns,
            scores,
            reference: kept
                .iter()
                .map(|(s, _)| reference_class(s.scores.total(), &scale))
                .collect(),
            group: kept.iter().map(|(_, g)| *g).collect(),
            group_sizes,
            balanced: matches!(weighting, Weighting::AgeBalanced),
        })
    }

    pub fn sample_count(&self) -> usize {
        self.ns
    }

    pub fn item_count(&self) -> usize {
        self.maxima.len()
    }

    #[inline]
    fn accuracy_from_counts(&self, matches: [u32; 2]) -> f64 {
        if self.balanced {
            0.5 * matches[0] as f64 / self.group_sizes[0] as f64 + 0.5 * matches[1] as f64 / self.group_sizes[1] as f64
        } else {
            matches[0] as f64 / self.ns as f64
        }
    }

    /// Accuracy of a non-empty subset of item positions.
    pub fn accuracy(&self, subset: &[usize]) -> Result<f64, SeverityError> {
        if subset.is_empty() {
            return Err(SeverityError::EmptySubset);
        }
        if let Some(&bad) = subset.iter().find(|&&p| p >= self.maxima.len()) {
            return Err(SeverityError::BadPosition(bad));
        }
        let submax: u32 = subset.iter().map(|&p| self.maxima[p] as u32).sum();
        let mut sums = vec![0u32; self.ns];
        for &p in subset {
            for (acc, &v) in sums.iter_mut().zip(&self.scores[p * self.ns..(p + 1) * self.ns]) {
                *acc += v as u32;
            }
        }
        let mut m = [0u32; 2];
        for (s, &t) in sums.iter().enumerate() {
            m[self.group[s] as usize] += (scaled_class(t, submax, &self.scale) == self.reference[s]) as u32;
        }
        Ok(self.accuracy_from_counts(m))
    }

    /// Accuracy of classifying every sample as mild.
    pub fn all_mild_accuracy(&self) -> f64 {
        let mut m = [0u32; 2];
        for (s, r) in self.reference.iter().enumerate() {
            m[self.group[s] as usize] += (*r == Severity::Mild) as u32;
        }
        self.accuracy_from_counts(m)
    }
}

pub fn subset_accuracy(
    samples: &[SeveritySample],
    subset: &[usize],
    schema: &QuestionnaireSchema,
    weighting: Weighting,
) -> Result<f64, SeverityError> {
    Evaluator::new(samples, schema, weighting)?.accuracy(subset)
}

/// Which item frequencies count as high.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortlistRule {
    /// Frequency ≥ mean + k·sd over all items.
    MeanPlusSd(f64),
    /// Frequency ≥ the q-quantile (nearest rank) of item frequencies.
    TopQuantile(f64),
}

impl Default for ShortlistRule {
    fn default() -> Self {
        ShortlistRule::MeanPlusSd(1.0)
    }
}

/// Items picked by the rule; none when nothing qualified.
pub fn shortlist(freq: &[u64], rule: ShortlistRule) -> Vec<usize> {
    if freq.iter().all(|&f| f == 0) {
        return Vec::new();
    }
    let cutoff = match rule {
        ShortlistRule::MeanPlusSd(k) => {
            let v: Vec<f64> = freq.iter().map(|&f| f as f64).collect();
            let (mean, sd) = mean_sd(&v);
            mean + k * sd
        }
        ShortlistRule::TopQuantile(q) => {
            let mut sorted = freq.to_vec();
            sorted.sort_unstable();
            let rank = ((q.clamp(0.0, 1.0) * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            sorted[rank - 1] as f64
        }
    };
    (0..freq.len())
        .filter(|&i| freq[i] > 0 && freq[i] as f64 >= cutoff)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredSearchResult {
    pub weighting: Weighting,
    pub threshold: f64,
    pub total_sets: u64,
    pub qualified_sets: u64,
    /// Appearances in qualified sets, by item position.
    pub item_frequency: Vec<u64>,
    pub shortlist: Vec<ItemId>,
}

/// Number of ordered one-per-subtest-plus-extra sets.
pub fn structured_set_count(schema: &QuestionnaireSchema) -> u64 {
    let p = schema.item_count() as u64;
    let s = schema.subtest_count() as u64;
    schema.subtests.iter().map(|t| t.item_count as u64).product::<u64>() * p.saturating_sub(s)
}

/// Enumerates every set of one item per subtest plus one further item, as
/// ordered picks (the extra item is any item not already picked).
pub fn structured_search(
    samples: &[SeveritySample],
    schema: &QuestionnaireSchema,
    weighting: Weighting,
    qualify_threshold: f64,
    rule: ShortlistRule,
) -> Result<StructuredSearchResult, SeverityError> {
    let s_count = schema.subtest_count();
    if s_count < 4 {
        return Err(SeverityError::TooFewSubtests(s_count));
    }
    let ev = Evaluator::new(samples, schema, weighting)?;
    let p = schema.item_count();
    let ns = ev.ns;
    let max_total = schema.max_total() as usize;
    let tables: Vec<Vec<Severity>> = (0..=max_total)
        .map(|m| (0..=m as u32).map(|t| scaled_class(t, m as u32, &ev.scale)).collect())
        .collect();
    let ranges: Vec<_> = (0..s_count).map(|s| schema.subtest_range(s)).collect();

    let tasks: Vec<(usize, usize)> = ranges[0]
        .clone()
        .flat_map(|a| ranges[1].clone().map(move |b| (a, b)))
        .collect();
    let run = |&(a, b): &(usize, usize)| -> (u64, Vec<u64>) {
        let mut freq = vec![0u64; p];
        let mut qualified = 0u64;
        let mut picks: Vec<usize> = std::iter::once(a)
            .chain(std::iter::once(b))
            .chain(ranges[2..].iter().map(|r| r.start))
            .collect();
        let mut base = vec![0u16; ns];
        loop {
            base.iter_mut().for_each(|v| *v = 0);
            let mut base_max = 0usize;
            for &q in &picks {
                base_max += ev.maxima[q] as usize;
                for (acc, &v) in base.iter_mut().zip(&ev.scores[q * ns..(q + 1) * ns]) {
                    *acc += v as u16;
                }
            }
            for e in (0..p).filter(|e| !picks.contains(e)) {
                let table = &tables[base_max + ev.maxima[e] as usize];
                let col = &ev.scores[e * ns..(e + 1) * ns];
                let mut m = [0u32; 2];
                for s in 0..ns {
                    let c = table[(base[s] + col[s] as u16) as usize];
                    m[ev.group[s] as usize] += (c == ev.reference[s]) as u32;
                }
                if ev.accuracy_from_counts(m) >= qualify_threshold {
                    qualified += 1;
                    freq[e] += 1;
                    for &q in &picks {
                        freq[q] += 1;
                    }
                }
            }
            // advance the picks of subtests 2.. like an odometer
            let mut level = s_count - 1;
            loop {
                if level < 2 {
                    return (qualified, freq);
                }
                picks[level] += 1;
                if picks[level] < ranges[level].end {
                    break;
                }
                picks[level] = ranges[level].start;
                level -= 1;
            }
        }
    };
    let parts: Vec<(u64, Vec<u64>)> = tasks.par_iter().map(run).collect();
    let mut freq = vec![0u64; p];
    let mut qualified = 0;
    for (q, f) in parts {
        qualified += q;
        for (acc, v) in freq.iter_mut().zip(f) {
            *acc += v;
        }
    }
    let shortlist = shortlist(&freq, rule).into_iter().map(|i| schema.item_at(i)).collect();
    Ok(StructuredSearchResult {
        weighting,
        threshold: qualify_threshold,
        total_sets: structured_set_count(schema),
        qualified_sets: qualified,
        item_frequency: freq,
        shortlist,
    })
}

/// Frequency of each item when every structured set qualifies.
pub fn structured_frequency_closed_form(schema: &QuestionnaireSchema) -> Vec<u64> {
    let counts: Vec<u64> = schema.subtests.iter().map(|t| t.item_count as u64).collect();
    let p = schema.item_count() as u64;
    let s = counts.len() as u64;
    (0..schema.item_count())
        .map(|pos| {
            let own = schema.subtest_of(pos);
            let others: u64 = counts
                .iter()
                .enumerate()
                .filter(|(t, _)| *t != own)
                .map(|(_, c)| c)
                .product();
            others * (p - s + counts[own] - 1)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    /// Stop sampling a size once one of its sets is fully accurate.
    #[default]
    PerSize,
    /// Additionally skip every larger size after the first such hit.
    Global,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomSearchConfig {
    pub per_size_samples: usize,
    pub target: f64,
    pub seed: u64,
    pub early_stop: EarlyStop,
    pub histogram_bins: usize,
}

impl Default for RandomSearchConfig {
    fn default() -> Self {
        RandomSearchConfig {
            per_size_samples: 1250,
            target: 0.8,
            seed: 0,
            early_stop: EarlyStop::PerSize,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub size: usize,
    pub samples_tested: usize,
    /// Absent when no set of this size was tested.
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Equal-width bins over [0, 1]; the last bin is closed.
    pub histogram: Vec<u32>,
    pub stopped_early: bool,
    /// Most accurate sampled set, ties to the lexicographically smallest.
    pub best: Option<(f64, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSearchResult {
    pub weighting: Weighting,
    pub sizes: Vec<SizeStats>,
    pub minimal_size: Option<usize>,
    pub best_set: Option<Vec<ItemId>>,
    pub best_accuracy: Option<f64>,
}

fn histogram(values: &[f64], bins: usize) -> Vec<u32> {
    let mut h = vec![0u32; bins];
    for &v in values {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

fn sample_size(ev: &Evaluator, size: usize, cfg: &RandomSearchConfig) -> SizeStats {
    let p = ev.item_count();
    let mut accs = Vec::new();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut stopped_early = false;
    let consider = |acc: f64, set: Vec<usize>, best: &mut Option<(f64, Vec<usize>)>| {
        let better = match best {
            None => true,
            Some((b, s)) => acc > *b || (acc == *b && set < *s),
        };
        if better {
            *best = Some((acc, set));
        }
    };
    if size == 0 || size == p {
        // a single possible subset
        let acc = if size == 0 {
            ev.all_mild_accuracy()
        } else {
            ev.accuracy(&(0..p).collect::<Vec<_>>()).expect("non-empty")
        };
        accs.push(acc);
        consider(acc, (0..size).collect(), &mut best);
        stopped_early = acc == 1.0 && cfg.early_stop != EarlyStop::Never;
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(size as u64);
        let mut perm: Vec<usize> = (0..p).collect();
        for _ in 0..cfg.per_size_samples {
            for i in 0..size {
                let j = rng.random_range(i..p);
                perm.swap(i, j);
            }
            let mut set = perm[..size].to_vec();
            set.sort_unstable();
            let acc = ev.accuracy(&set).expect("non-empty");
            accs.push(acc);
            consider(acc, set, &mut best);
            if acc == 1.0 && cfg.early_stop != EarlyStop::Never {
                stopped_early = true;
                break;
            }
        }
    }
    let (mean, sd) = mean_sd(&accs);
    SizeStats {
        size,
        samples_tested: accs.len(),
        mean: Some(mean),
        sd: Some(sd),
        min: accs.iter().copied().reduce(f64::min),
        max: accs.iter().copied().reduce(f64::max),
        histogram: histogram(&accs, cfg.histogram_bins),
        stopped_early,
        best,
    }
}

/// Samples random subsets of every size `0..=P`, each size from its own
/// stream.
pub fn random_search(
    samples: &[SeveritySample],
    schema: &QuestionnaireSchema,
    weighting: Weighting,
    cfg: &RandomSearchConfig,
) -> Result<RandomSearchResult, SeverityError> {
    if cfg.per_size_samples == 0 {
        return Err(SeverityError::Config("per_size_samples must be ≥ 1".into()));
    }
    if cfg.histogram_bins == 0 {
        return Err(SeverityError::Config("histogram_bins must be ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.target) {
        return Err(SeverityError::Config(format!(
            "target must lie in [0, 1], got {}",
            cfg.target
        )));
    }
    let ev = Evaluator::new(samples, schema, weighting)?;
    let p = schema.item_count();
    let mut sizes: Vec<SizeStats> = (0..=p).into_par_iter().map(|s| sample_size(&ev, s, cfg)).collect();
    if cfg.early_stop == EarlyStop::Global {
        if let Some(first) = sizes.iter().position(|s| s.stopped_early) {
            for s in &mut sizes[first + 1..] {
                *s = SizeStats {
                    size: s.size,
                    samples_tested: 0,
                    mean: None,
                    sd: None,
                    min: None,
                    max: None,
                    histogram: vec![0; cfg.histogram_bins],
                    stopped_early: false,
                    best: None,
                };
            }
        }
    }
    let minimal = sizes.iter().find(|s| s.mean.is_some_and(|m| m >= cfg.target));
    let best = minimal.and_then(|s| s.best.clone());
    Ok(RandomSearchResult {
        weighting,
        minimal_size: minimal.map(|s| s.size),
        best_accuracy: best.as_ref().map(|b| b.0),
        best_set: best.map(|(_, set)| set.iter().map(|&i| schema.item_at(i)).collect()),
        sizes,
    })
}
