//! Assessments, subject records and score changes.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::ingest::age_years;
use crate::schema::QuestionnaireSchema;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RecordError {
    #[error("expected {expected} item scores, got {got}")]
    Length { expected: usize, got: usize },
    #[error("item {item}: score {score} out of range 0..={max}")]
    OutOfRange { item: String, score: u8, max: u8 },
    #[error("after assessment ({after}) precedes before assessment ({before})")]
    DateOrder { before: NaiveDate, after: NaiveDate },
    #[error("birth date {birth} is after the first assessment ({at})")]
    BirthAfterAssessment { birth: NaiveDate, at: NaiveDate },
}

/// One completed questionnaire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentScores {
    pub date: NaiveDate,
    /// Item scores in canonical order.
    pub scores: Vec<u8>,
}

impl AssessmentScores {
    pub fn validate(&self, schema: &QuestionnaireSchema) -> Result<(), RecordError> {
        if self.scores.len() != schema.item_count() {
            return Err(RecordError::Length {
                expected: schema.item_count(),
                got: self.scores.len(),
            });
        }
        for (pos, (&score, max)) in self.scores.iter().zip(schema.item_maxima()).enumerate() {
            if score > max {
                return Err(RecordError::OutOfRange {
                    item: schema.item_at(pos).to_string(),
                    score,
                    max,
                });
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u32 {
        self.scores.iter().map(|&s| s as u32).sum()
    }

    pub fn subtotals(&self, schema: &QuestionnaireSchema) -> Vec<u32> {
        (0..schema.subtest_count())
            .map(|s| self.scores[schema.subtest_range(s)].iter().map(|&v| v as u32).sum())
            .collect()
    }
}

/// Age cohorts: `Young` is age in [2, 6), `Older` is [6, 11).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgeGroup {
    #[serde(rename = "2-5")]
    Young,
    #[serde(rename = "6-10")]
    Older,
    #[serde(rename = "other")]
    Other,
}

impl AgeGroup {
    pub fn from_age(years: f64) -> Self {
        if (2.0..6.0).contains(&years) {
            AgeGroup::Young
        } else if (6.0..11.0).contains(&years) {
            AgeGroup::Older
        } else {
            AgeGroup::Other
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AgeGroup::Young => "2-5",
            AgeGroup::Older => "6-10",
            AgeGroup::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub birth_date: NaiveDate,
    pub before: AssessmentScores,
    pub after: AssessmentScores,
}

impl SubjectRecord {
    /// Checks scores against the schema and the date ordering invariants.
    pub fn validate(&self, schema: &QuestionnaireSchema) -> Result<(), RecordError> {
        self.before.validate(schema)?;
        self.after.validate(schema)?;
        if self.after.date < self.before.date {
            return Err(RecordError::DateOrder {
                before: self.before.date,
                after: self.after.date,
            });
        }
        if self.birth_date > self.before.date {
            return Err(RecordError::BirthAfterAssessment {
                birth: self.birth_date,
                at: self.before.date,
            });
        }
        Ok(())
    }

    pub fn age_at(&self, date: NaiveDate) -> f64 {
        age_years(self.birth_date, date).unwrap_or(0.0)
    }

    /// Age group at the first assessment.
    pub fn age_group(&self) -> AgeGroup {
        AgeGroup::from_age(self.age_at(self.before.date))
    }
}

/// Score changes, `before - after`; positive values mean improvement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub per_item: Vec<i32>,
    pub per_subtest: Vec<i32>,
    pub total: i32,
}

pub fn compute_delta(record: &SubjectRecord, schema: &QuestionnaireSchema) -> DeltaRecord {
    let per_item: Vec<i32> = record
        .before
        .scores
        .iter()
        .zip(&record.after.scores)
        .map(|(&b, &a)| b as i32 - a as i32)
        .collect();
    let per_subtest: Vec<i32> = (0..schema.subtest_count())
        .map(|s| per_item[schema.subtest_range(s)].iter().sum())
        .collect();
    let total = per_item.iter().sum();
    DeltaRecord {
        per_item,
        per_subtest,
        total,
    }
}

/// Improvement as a percentage of the baseline score. `None` marks a zero
/// baseline, where the ratio is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub per_subtest: Vec<Option<f64>>,
    pub overall: Option<f64>,
}

fn percent(delta: i64, baseline: u32) -> Option<f64> {
    (baseline > 0).then(|| delta as f64 / baseline as f64 * 100.0)
}

pub fn improvement_percentage(record: &SubjectRecord, schema: &QuestionnaireSchema) -> Improvement {
    let delta = compute_delta(record, schema);
    let before = record.before.subtotals(schema);
    Improvement {
        per_subtest: delta
            .per_subtest
            .iter()
            .zip(&before)
            .map(|(&d, &b)| percent(d as i64, b))
            .collect(),
        overall: percent(delta.total as i64, record.before.total()),
    }
}

/// Mean and sample standard deviation of the defined values; `None` when
/// no value is defined.
pub fn defined_mean_sd(values: impl IntoIterator<Item = Option<f64>>) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    Some(mean_sd(&v))
}

pub(crate) fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}
