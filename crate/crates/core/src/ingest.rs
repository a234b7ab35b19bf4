//! Cohort CSV parsing and date normalization.
//!
//! Layout is long format, one row per subject and phase:
//!
//! ```text
//! subject_id,birth_date,assessment_date,phase,I.1,I.2,...,IV.25
//! S001,2017-04-12,2022-03-01,before,2,1,...
//! S001,2017-04-12,2022-11-15,after,1,1,...
//! ```
//!
//! Lines starting with `#` are comments. Dates are `YYYY-MM-DD` or `YYYY-MM`.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::record::{AssessmentScores, SubjectRecord};
use crate::schema::QuestionnaireSchema;

pub const FIXED_COLUMNS: [&str; 4] = ["subject_id", "birth_date", "assessment_date", "phase"];

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("unparseable date `{0}` (expected YYYY-MM-DD or YYYY-MM)")]
    Date(String),
    #[error("{later} is before {earlier}")]
    NegativeSpan { earlier: NaiveDate, later: NaiveDate },
    #[error("bad header: {0}")]
    Header(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Result of normalizing one date cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DateValue {
    Present(NaiveDate),
    /// Nothing recorded; the subject is excluded.
    Missing,
}

/// Applies the three cleaning rules: Feb 29 of a non-leap year becomes
/// March 1, a year-month value gets day 1, and an empty cell is missing.
pub fn normalize_date(raw: &str) -> Result<DateValue, IngestError> {
    let text = raw.trim();
    if text.is_empty() {
        return Ok(DateValue::Missing);
    }
    let bad = || IngestError::Date(raw.to_string());
    let parts: Vec<&str> = text.split('-').collect();
    let number = |s: &str, digits: usize| -> Result<u32, IngestError> {
        if s.len() != digits || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        s.parse().map_err(|_| bad())
    };
    let (year, month, day) = match parts.as_slice() {
        [y, m] => (number(y, 4)? as i32, number(m, 2)?, 1),
        [y, m, d] => (number(y, 4)? as i32, number(m, 2)?, number(d, 2)?),
        _ => return Err(bad()),
    };
    if let Some(date) = NaiveDate::from_ymd_opt(year, month, day) {
        return Ok(DateValue::Present(date));
    }
    if month == 2 && day == 29 {
        let march = NaiveDate::from_ymd_opt(year, 3, 1).ok_or_else(bad)?;
        return Ok(DateValue::Present(march));
    }
    Err(bad())
}

/// Age in years, using a 365.25-day year.
pub fn age_years(birth: NaiveDate, at: NaiveDate) -> Result<f64, IngestError> {
    let days = span_days(birth, at)?;
    Ok(days as f64 / 365.25)
}

pub fn duration_weeks(before: NaiveDate, after: NaiveDate) -> Result<f64, IngestError> {
    let days = span_days(before, after)?;
    Ok(days as f64 / 7.0)
}

fn span_days(earlier: NaiveDate, later: NaiveDate) -> Result<i64, IngestError> {
    if later < earlier {
        return Err(IngestError::NegativeSpan { earlier, later });
    }
    Ok((later - earlier).num_days())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub subject_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    pub subject_id: String,
    pub field: String,
    pub original: String,
    pub normalized: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    /// 1-based line number in the input file.
    pub line: u64,
    pub subject_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub excluded: Vec<Exclusion>,
    pub normalizations: Vec<Normalization>,
    pub row_errors: Vec<RowError>,
}

impl IngestReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Before,
    After,
}

struct ParsedRow {
    birth: DateValue,
    assessed: DateValue,
    scores: Vec<u8>,
}

#[derive(Default)]
struct SubjectRows {
    before: Option<ParsedRow>,
    after: Option<ParsedRow>,
    problem: Option<String>,
}

/// Reads a cohort file, pairing each subject's before and after rows.
///
/// Row-level problems never abort: the affected subject is dropped and the
/// problem is recorded in the report. Only I/O failures and a malformed
/// header are fatal.
pub fn parse_cohort<R: Read>(
    input: R,
    schema: &QuestionnaireSchema,
) -> Result<(Vec<SubjectRecord>, IngestReport), IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);

    let expected: Vec<String> = FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(schema.item_labels())
        .collect();
    let header = reader.headers()?.clone();
    if header.len() != expected.len() {
        return Err(IngestError::Header(format!(
            "expected {} columns, found {}",
            expected.len(),
            header.len()
        )));
    }
    if let Some((found, want)) = header.iter().zip(&expected).find(|(h, e)| h != e) {
        return Err(IngestError::Header(format!(
            "expected column `{want}`, found `{found}`"
        )));
    }

    let maxima = schema.item_maxima();
    let mut report = IngestReport::default();
    let mut order: Vec<String> = Vec::new();
    let mut subjects: HashMap<String, SubjectRows> = HashMap::new();

    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let subject_id = row.get(0).unwrap_or("").to_string();
        let entry = subjects.entry(subject_id.clone()).or_insert_with(|| {
            order.push(subject_id.clone());
            SubjectRows::default()
        });
        let outcome = parse_row(&row, schema, &maxima, expected.len()).and_then(|(phase, parsed, normalizations)| {
            let slot = match phase {
                Phase::Before => &mut entry.before,
                Phase::After => &mut entry.after,
            };
            if slot.is_some() {
                return Err(format!("duplicate {} row", phase_name(phase)));
            }
            *slot = Some(parsed);
            Ok(normalizations)
        });
        match outcome {
            Ok(normalizations) => {
                report
                    .normalizations
                    .extend(
                        normalizations
                            .into_iter()
                            .map(|(field, original, normalized)| Normalization {
                                subject_id: subject_id.clone(),
                                field,
                                original,
                                normalized,
                            }),
                    )
            }
            Err(message) => {
                report.row_errors.push(RowError {
                    line,
                    subject_id: subject_id.clone(),
                    message: message.clone(),
                });
                entry.problem.get_or_insert(message);
            }
        }
    }

    let mut records = Vec::new();
    for id in order {
        let rows = subjects.remove(&id).expect("subject recorded");
        match assemble(&id, rows, schema) {
            Ok(record) => records.push(record),
            Err(reason) => report.excluded.push(Exclusion { subject_id: id, reason }),
        }
    }
    report.accepted = records.len();
    Ok((records, report))
}

type RowOutcome = (Phase, ParsedRow, Vec<(String, String, String)>);

fn parse_row(
    row: &csv::StringRecord,
    schema: &QuestionnaireSchema,
    maxima: &[u8],
    width: usize,
) -> Result<RowOutcome, String> {
    if row.len() != width {
        return Err(format!("expected {width} fields, found {}", row.len()));
    }
    let phase = match &row[3] {
        "before" => Phase::Before,
        "after" => Phase::After,
        other => return Err(format!("unknown phase `{other}`")),
    };
    let mut normalizations = Vec::new();
    let mut dates = [DateValue::Missing; 2];
    for (k, field) in [(1usize, "birth_date"), (2, "assessment_date")] {
        let value = normalize_date(&row[k]).map_err(|e| e.to_string())?;
        if let DateValue::Present(d) = value {
            let normalized = format_date(d);
            if normalized != row[k] {
                normalizations.push((
                    format!("{}:{}", phase_name(phase), field),
                    row[k].to_string(),
                    normalized,
                ));
            }
        }
        dates[k - 1] = value;
    }
    let mut scores = Vec::with_capacity(maxima.len());
    for (pos, cell) in row.iter().skip(FIXED_COLUMNS.len()).enumerate() {
        let label = schema.item_at(pos);
        match cell.parse::<u8>() {
            Ok(v) if v <= maxima[pos] => scores.push(v),
            Ok(v) => return Err(format!("item {label}: score {v} out of range 0..={}", maxima[pos])),
            Err(_) => return Err(format!("item {label}: invalid score `{cell}`")),
        }
    }
    Ok((
        phase,
        ParsedRow {
            birth: dates[0],
            assessed: dates[1],
            scores,
        },
        normalizations,
    ))
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Before => "before",
        Phase::After => "after",
    }
}

fn assemble(id: &str, rows: SubjectRows, schema: &QuestionnaireSchema) -> Result<SubjectRecord, String> {
    if let Some(problem) = rows.problem {
        return Err(problem);
    }
    let before = rows.before.ok_or("missing before assessment")?;
    let after = rows.after.ok_or("missing after assessment")?;
    let present = |v: DateValue| match v {
        DateValue::Present(d) => Ok(d),
        DateValue::Missing => Err("missing date".to_string()),
    };
    let birth = present(before.birth)?;
    let after_birth = present(after.birth)?;
    let before_date = present(before.assessed)?;
    let after_date = present(after.assessed)?;
    if birth != after_birth {
        return Err("inconsistent birth date between phases".into());
    }
    let record = SubjectRecord {
        subject_id: id.to_string(),
        birth_date: birth,
        before: AssessmentScores {
            date: before_date,
            scores: before.scores,
        },
        after: AssessmentScores {
            date: after_date,
            scores: after.scores,
        },
    };
    record.validate(schema).map_err(|e| e.to_string())?;
    Ok(record)
}

/// Writes records in the layout [`parse_cohort`] reads, optionally preceded
/// by a `#` comment line.
pub fn write_cohort<W: Write>(
    out: W,
    schema: &QuestionnaireSchema,
    records: &[SubjectRecord],
    comment: Option<&str>,
) -> Result<(), IngestError> {
    let mut out = out;
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(schema.item_labels())
        .collect();
    w.write_record(&header)?;
    for r in records {
        for (phase, a) in [("before", &r.before), ("after", &r.after)] {
            let mut fields = vec![
                r.subject_id.clone(),
                r.birth_date.format("%Y-%m-%d").to_string(),
                a.date.format("%Y-%m-%d").to_string(),
                phase.to_string(),
            ];
            fields.extend(a.scores.iter().map(|s| s.to_string()));
            w.write_record(&fields)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn format_date(d: NaiveDate) -> String {
    format!("{:04}-{:02}-{:02}", d.year(), d.month(), d.day())
}
