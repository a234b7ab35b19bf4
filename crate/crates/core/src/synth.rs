//! Seeded synthetic cohorts with planted signal items.
//!
//! Each subject draws from its own ChaCha stream (`seed`, stream = subject
//! index), so output is independent of generation order.
//!
//! Per subject: a latent improvement factor `g ~ N(0, 1)`; before subtotals
//! from clamped normals, spread over items one unit at a time; per-item
//! change `round(loading · g + noise)` clamped so the after score stays in
//! range. Noise in subtest `s` with `c` items has standard deviation
//! `min(√(max(σ_s² − Σ loading², 0) / c), item_noise_sd)` and an offset
//! chosen so the rounded noise averages `μ_s / c`; subtest improvement
//! means therefore hit their targets up to clamping.

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::record::{AssessmentScores, SubjectRecord};
use crate::schema::{ItemId, QuestionnaireSchema};
use crate::special::normal_cdf;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("n_subjects must be ≥ 2, got {0}")]
    TooFewSubjects(usize),
    #[error("{field}: expected {expected} entries (one per subtest), got {got}")]
    Arity {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0} must be finite and have sd ≥ 0")]
    BadMoments(String),
    #[error("subtest {subtest}: mean before total {mean} outside 0..={max}")]
    InfeasibleBefore { subtest: String, mean: f64, max: u32 },
    #[error("subtest {subtest}: mean improvement {mean} exceeds the subtest range {max}")]
    InfeasibleImprovement { subtest: String, mean: f64, max: u32 },
    #[error("signal item {0} is not in the schema")]
    UnknownSignal(ItemId),
    #[error("signal item {0}: loading must be finite")]
    BadLoading(ItemId),
}

/// Generation parameters. Moments are `(mean, sd)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub seed: u64,
    pub subtest_before_mean_sd: Vec<(f64, f64)>,
    pub subtest_improvement_mean_sd: Vec<(f64, f64)>,
    pub age_mean_sd: (f64, f64),
    pub duration_mean_sd: (f64, f64),
    pub signal_items: Vec<(ItemId, f64)>,
    /// Upper bound on the per-item noise standard deviation.
    pub item_noise_sd: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_subjects: 60,
            seed: 0,
            subtest_before_mean_sd: vec![(12.2, 6.5), (14.8, 6.6), (14.3, 5.7), (17.1, 8.6)],
            subtest_improvement_mean_sd: vec![(4.5, 3.7), (4.1, 8.2), (4.0, 5.4), (5.0, 6.4)],
            age_mean_sd: (5.1, 1.3),
            duration_mean_sd: (36.0, 17.0),
            signal_items: DEFAULT_SIGNAL.iter().map(|&(s, i)| (ItemId::new(s, i), 1.5)).collect(),
            item_noise_sd: 0.35,
        }
    }
}

const DEFAULT_SIGNAL: [(u8, u16); 5] = [(0, 6), (1, 8), (2, 18), (2, 8), (1, 4)];

/// Ages are clamped to this range, in years.
pub const AGE_RANGE: (f64, f64) = (2.0, 10.9);
/// Treatment durations are clamped to this range, in weeks.
pub const DURATION_RANGE: (f64, f64) = (1.0, 104.0);
const FIRST_ASSESSMENT: (i32, u32, u32) = (2020, 1, 1);
const ASSESSMENT_WINDOW_DAYS: u64 = 730;

impl CohortSpec {
    /// Default moments rescaled to another schema's subtest sizes: means in
    /// proportion to item count, variances likewise. Signal items absent
    /// from the schema are dropped.
    pub fn scaled_for(schema: &QuestionnaireSchema) -> Self {
        let atec = QuestionnaireSchema::atec();
        let base = CohortSpec::default();
        let scale = |pairs: &[(f64, f64)]| -> Vec<(f64, f64)> {
            (0..schema.subtest_count())
                .map(|s| {
                    let src = s.min(pairs.len() - 1);
                    let ratio = schema.subtests[s].item_count as f64 / atec.subtests[src].item_count as f64;
                    let (m, sd) = pairs[src];
                    (m * ratio, sd * ratio.sqrt())
                })
                .collect()
        };
        CohortSpec {
            subtest_before_mean_sd: scale(&base.subtest_before_mean_sd),
            subtest_improvement_mean_sd: scale(&base.subtest_improvement_mean_sd),
            signal_items: base
                .signal_items
                .iter()
                .filter(|(id, _)| schema.position(*id).is_some())
                .copied()
                .collect(),
            ..base
        }
    }

    /// Zero improvement, zero noise and no signal.
    pub fn null(schema: &QuestionnaireSchema) -> Self {
        CohortSpec {
            subtest_improvement_mean_sd: vec![(0.0, 0.0); schema.subtest_count()],
            signal_items: Vec::new(),
            ..CohortSpec::scaled_for(schema)
        }
    }

    pub fn validate(&self, schema: &QuestionnaireSchema) -> Result<(), SynthError> {
        if self.n_subjects < 2 {
            return Err(SynthError::TooFewSubjects(self.n_subjects));
        }
        let k = schema.subtest_count();
        for (field, v) in [
            ("subtest_before_mean_sd", &self.subtest_before_mean_sd),
            ("subtest_improvement_mean_sd", &self.subtest_improvement_mean_sd),
        ] {
            if v.len() != k {
                return Err(SynthError::Arity {
                    field,
                    expected: k,
                    got: v.len(),
                });
            }
            if v.iter().any(|&(m, sd)| !finite_moments(m, sd)) {
                return Err(SynthError::BadMoments(field.into()));
            }
        }
        for (field, (m, sd)) in [
            ("age_mean_sd", self.age_mean_sd),
            ("duration_mean_sd", self.duration_mean_sd),
        ] {
            if !finite_moments(m, sd) {
                return Err(SynthError::BadMoments(field.into()));
            }
        }
        if !(self.item_noise_sd.is_finite() && self.item_noise_sd >= 0.0) {
            return Err(SynthError::BadMoments("item_noise_sd".into()));
        }
        for s in 0..k {
            let max = schema.subtest_max(s);
            let subtest = schema.subtests[s].name.clone();
            let (mean, _) = self.subtest_before_mean_sd[s];
            if !(0.0..=max as f64).contains(&mean) {
                return Err(SynthError::InfeasibleBefore { subtest, mean, max });
            }
            let (imp, _) = self.subtest_improvement_mean_sd[s];
            if imp.abs() > max as f64 {
                return Err(SynthError::InfeasibleImprovement {
                    subtest,
                    mean: imp,
                    max,
                });
            }
        }
        for &(id, loading) in &self.signal_items {
            schema.position(id).ok_or(SynthError::UnknownSignal(id))?;
            if !loading.is_finite() {
                return Err(SynthError::BadLoading(id));
            }
        }
        Ok(())
    }
}

fn finite_moments(mean: f64, sd: f64) -> bool {
    mean.is_finite() && sd.is_finite() && sd >= 0.0
}

struct Plan {
    loading: Vec<f64>,
    noise_mean: Vec<f64>,
    noise_sd: Vec<f64>,
}

impl Plan {
    fn new(spec: &CohortSpec, schema: &QuestionnaireSchema) -> Self {
        let p = schema.item_count();
        let mut loading = vec![0.0; p];
        for &(id, l) in &spec.signal_items {
            loading[schema.position(id).expect("validated")] = l;
        }
        let mut noise_mean = vec![0.0; p];
        let mut noise_sd = vec![0.0; p];
        for s in 0..schema.subtest_count() {
            let range = schema.subtest_range(s);
            let c = range.len() as f64;
            let (mu, sigma) = spec.subtest_improvement_mean_sd[s];
            let signal_var: f64 = loading[range.clone()].iter().map(|l| l * l).sum();
            let tau = ((sigma * sigma - signal_var).max(0.0) / c)
                .sqrt()
                .min(spec.item_noise_sd);
            let offset = rounding_offset(mu / c, tau);
            for pos in range {
                noise_mean[pos] = offset;
                noise_sd[pos] = tau;
            }
        }
        Plan {
            loading,
            noise_mean,
            noise_sd,
        }
    }
}

/// Mean of `round(X)` for `X ~ N(m, sd²)`.
fn rounded_mean(m: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return m.round();
    }
    let lo = (m - 10.0 * sd).floor() as i64 - 1;
    let hi = (m + 10.0 * sd).ceil() as i64 + 1;
    (lo..=hi)
        .map(|k| {
            let k = k as f64;
            k * (normal_cdf((k + 0.5 - m) / sd) - normal_cdf((k - 0.5 - m) / sd))
        })
        .sum()
}

/// Location `m` with `E[round(N(m, sd²))] = target`, by bisection. With
/// zero spread no such `m` exists in general and the target is returned.
fn rounding_offset(target: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return target;
    }
    let (mut lo, mut hi) = (target - 1.0, target + 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rounded_mean(mid, sd) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn subject_id(i: usize, n: usize) -> String {
    let width = n.to_string().len().max(3);
    format!("S{:0width$}", i + 1)
}

fn generate_subject(i: usize, spec: &CohortSpec, schema: &QuestionnaireSchema, plan: &Plan) -> SubjectRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(i as u64);

    let g = normal(&mut rng);
    let (y, m, d) = FIRST_ASSESSMENT;
    let start = NaiveDate::from_ymd_opt(y, m, d).expect("valid constant");
    let before_date = start + Days::new(rng.random_range(0..=ASSESSMENT_WINDOW_DAYS));
    let age = (spec.age_mean_sd.0 + spec.age_mean_sd.1 * normal(&mut rng)).clamp(AGE_RANGE.0, AGE_RANGE.1);
    let weeks = (spec.duration_mean_sd.0 + spec.duration_mean_sd.1 * normal(&mut rng))
        .clamp(DURATION_RANGE.0, DURATION_RANGE.1);
    let birth_date = before_date - Days::new((age * 365.25).round() as u64);
    let after_date = before_date + Days::new((weeks * 7.0).round() as u64);

    let maxima = schema.item_maxima();
    let mut before = vec![0u8; schema.item_count()];
    for s in 0..schema.subtest_count() {
        let range = schema.subtest_range(s);
        let (mean, sd) = spec.subtest_before_mean_sd[s];
        let total = (mean + sd * normal(&mut rng))
            .round()
            .clamp(0.0, schema.subtest_max(s) as f64) as u32;
        let mut open: Vec<usize> = range.collect();
        for _ in 0..total {
            let k = rng.random_range(0..open.len());
            let pos = open[k];
            before[pos] += 1;
            if before[pos] == maxima[pos] {
                open.swap_remove(k);
            }
        }
    }

    let after: Vec<u8> = (0..schema.item_count())
        .map(|pos| {
            let noise = plan.noise_mean[pos] + plan.noise_sd[pos] * normal(&mut rng);
            let b = before[pos] as f64;
            let delta = (plan.loading[pos] * g + noise).round().clamp(b - maxima[pos] as f64, b);
            (b - delta) as u8
        })
        .collect();

    SubjectRecord {
        subject_id: subject_id(i, spec.n_subjects),
        birth_date,
        before: AssessmentScores {
            date: before_date,
            scores: before,
        },
        after: AssessmentScores {
            date: after_date,
            scores: after,
        },
    }
}

/// Generates `spec.n_subjects` records in subject order.
pub fn generate_cohort(spec: &CohortSpec, schema: &QuestionnaireSchema) -> Result<Vec<SubjectRecord>, SynthError> {
    spec.validate(schema)?;
    let plan = Plan::new(spec, schema);
    Ok((0..spec.n_subjects)
        .into_par_iter()
        .map(|i| generate_subject(i, spec, schema, &plan))
        .collect())
}

/// Sidecar written next to a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSidecar {
    pub schema: String,
    pub seed: u64,
    pub spec: CohortSpec,
}
