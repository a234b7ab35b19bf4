//! Instrument structure: subtests, item maxima, mini-clusters and the
//! severity scale.
//!
//! Every 77-slot (or schema-sized) vector in the crate is indexed by the
//! canonical item position defined here: items of the first subtest in
//! order, then the second subtest, and so on.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("invalid item id `{0}`")]
    BadItemId(String),
    #[error("item {0} is not part of schema `{1}`")]
    UnknownItem(String, String),
    #[error("invalid schema: {0}")]
    Invalid(String),
    #[error("invalid severity scale: {0}")]
    Scale(String),
    #[error("schema file: {0}")]
    Format(#[from] serde_json::Error),
    #[error("reading schema {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Zero-based subtest position, rendered as a roman numeral (`I`, `II`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Subtest(pub u8);

const ROMAN: [(u32, &str); 13] = [
    (1000, "M"),
    (900, "CM"),
    (500, "D"),
    (400, "CD"),
    (100, "C"),
    (90, "XC"),
    (50, "L"),
    (40, "XL"),
    (10, "X"),
    (9, "IX"),
    (5, "V"),
    (4, "IV"),
    (1, "I"),
];

fn to_roman(mut n: u32) -> String {
    let mut out = String::new();
    for &(value, sym) in &ROMAN {
        while n >= value {
            out.push_str(sym);
            n -= value;
        }
    }
    out
}

fn from_roman(s: &str) -> Option<u32> {
    if s.is_empty() {
        return None;
    }
    let digit = |c: char| match c {
        'I' => Some(1),
        'V' => Some(5),
        'X' => Some(10),
        'L' => Some(50),
        'C' => Some(100),
        'D' => Some(500),
        'M' => Some(1000),
        _ => None,
    };
    let values: Option<Vec<u32>> = s.chars().map(digit).collect();
    let values = values?;
    let mut total = 0i64;
    for (i, &v) in values.iter().enumerate() {
        if values.get(i + 1).is_some_and(|&next| next > v) {
            total -= v as i64;
        } else {
            total += v as i64;
        }
    }
    let total = u32::try_from(total).ok()?;
    // reject non-canonical spellings such as "IIII"
    (to_roman(total) == s).then_some(total)
}

impl Subtest {
    pub fn code(self) -> String {
        to_roman(self.0 as u32 + 1)
    }
}

impl fmt::Display for Subtest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for Subtest {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match from_roman(s.trim()) {
            Some(n) if (1..=255).contains(&n) => Ok(Subtest((n - 1) as u8)),
            _ => Err(SchemaError::BadItemId(s.to_string())),
        }
    }
}

/// An item addressed by subtest and 1-based index within it, e.g. `IV.23`.
///
/// Ordering is lexicographic on `(subtest, index)`, which coincides with the
/// canonical vector ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemId {
    pub subtest: Subtest,
    pub index: u16,
}

impl ItemId {
    pub fn new(subtest: u8, index: u16) -> Self {
        ItemId {
            subtest: Subtest(subtest),
            index,
        }
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.subtest, self.index)
    }
}

impl FromStr for ItemId {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SchemaError::BadItemId(s.to_string());
        let (sub, idx) = s.trim().split_once('.').ok_or_else(bad)?;
        let subtest: Subtest = sub.parse().map_err(|_| bad())?;
        let index: u16 = idx.parse().map_err(|_| bad())?;
        if index == 0 {
            return Err(bad());
        }
        Ok(ItemId { subtest, index })
    }
}

impl Serialize for ItemId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ItemId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtestSpec {
    pub name: String,
    pub item_count: usize,
    pub max_score: u8,
}

/// A hand-defined group of related items inside one subtest.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniCluster {
    pub name: String,
    pub subtest: Subtest,
    /// 1-based item indices, kept in the order given by the instrument table.
    pub items: Vec<u16>,
}

impl MiniCluster {
    pub fn item_ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.items.iter().map(move |&index| ItemId {
            subtest: self.subtest,
            index,
        })
    }

    pub fn contains(&self, item: ItemId) -> bool {
        item.subtest == self.subtest && self.items.contains(&item.index)
    }
}

/// Severity levels, ordered from least to most severe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        })
    }
}

/// Bins `[0, mild_upper)`, `[mild_upper, severe_lower)`, `[severe_lower, max_score]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityScale {
    pub max_score: f64,
    pub mild_upper: f64,
    pub severe_lower: f64,
}

impl Default for SeverityScale {
    /// 2/9 and 1/2 of a nominal maximum of 180. The attainable ATEC maximum
    /// is 179; the nominal value is what the bins are defined against.
    fn default() -> Self {
        SeverityScale {
            max_score: 180.0,
            mild_upper: 40.0,
            severe_lower: 90.0,
        }
    }
}

impl SeverityScale {
    pub fn new(max_score: f64, mild_upper: f64, severe_lower: f64) -> Result<Self, SchemaError> {
        let scale = SeverityScale {
            max_score,
            mild_upper,
            severe_lower,
        };
        scale.validate()?;
        Ok(scale)
    }

    /// Same 2/9 and 1/2 proportions as the default scale, over another maximum.
    pub fn proportional(max_score: f64) -> Result<Self, SchemaError> {
        Self::new(max_score, max_score * 2.0 / 9.0, max_score / 2.0)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let ok = [self.max_score, self.mild_upper, self.severe_lower]
            .iter()
            .all(|v| v.is_finite())
            && 0.0 < self.mild_upper
            && self.mild_upper < self.severe_lower
            && self.severe_lower <= self.max_score;
        if ok {
            Ok(())
        } else {
            Err(SchemaError::Scale(format!(
                "need 0 < mild_upper < severe_lower <= max_score, got {} / {} / {}",
                self.mild_upper, self.severe_lower, self.max_score
            )))
        }
    }

    /// `None` when `total` lies outside `[0, max_score]`.
    pub fn classify(&self, total: f64) -> Option<Severity> {
        if !(0.0..=self.max_score).contains(&total) {
            return None;
        }
        Some(if total < self.mild_upper {
            Severity::Mild
        } else if total < self.severe_lower {
            Severity::Moderate
        } else {
            Severity::Severe
        })
    }
}

/// Shape of a questionnaire: subtests, per-item maxima, clusters, scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionnaireSchema {
    pub name: String,
    pub subtests: Vec<SubtestSpec>,
    pub clusters: Vec<MiniCluster>,
    pub severity: SeverityScale,
    offsets: Vec<usize>,
}

impl QuestionnaireSchema {
    pub fn new(
        name: impl Into<String>,
        subtests: Vec<SubtestSpec>,
        clusters: Vec<MiniCluster>,
        severity: SeverityScale,
    ) -> Result<Self, SchemaError> {
        let name = name.into();
        if subtests.is_empty() {
            return Err(SchemaError::Invalid("no subtests".into()));
        }
        if subtests.len() > 255 {
            return Err(SchemaError::Invalid("too many subtests".into()));
        }
        for s in &subtests {
            if s.item_count == 0 || s.item_count > u16::MAX as usize {
                return Err(SchemaError::Invalid(format!(
                    "subtest `{}` has item count {}",
                    s.name, s.item_count
                )));
            }
            if s.max_score == 0 {
                return Err(SchemaError::Invalid(format!(
                    "subtest `{}` has zero item maximum",
                    s.name
                )));
            }
        }
        for c in &clusters {
            let spec = subtests
                .get(c.subtest.0 as usize)
                .ok_or_else(|| SchemaError::Invalid(format!("cluster `{}` names subtest {}", c.name, c.subtest)))?;
            if c.items.is_empty() {
                return Err(SchemaError::Invalid(format!("cluster `{}` is empty", c.name)));
            }
            for &i in &c.items {
                if i == 0 || i as usize > spec.item_count {
                    return Err(SchemaError::Invalid(format!(
                        "cluster `{}` lists item {}.{} outside the subtest",
                        c.name, c.subtest, i
                    )));
                }
            }
            let mut seen = c.items.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != c.items.len() {
                return Err(SchemaError::Invalid(format!("cluster `{}` repeats an item", c.name)));
            }
        }
        severity.validate()?;
        let mut offsets = Vec::with_capacity(subtests.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for s in &subtests {
            acc += s.item_count;
            offsets.push(acc);
        }
        Ok(QuestionnaireSchema {
            name,
            subtests,
            clusters,
            severity,
            offsets,
        })
    }

    /// Schema with the given `(item_count, max_score)` per subtest, generic
    /// subtest names, no clusters and a proportional severity scale.
    pub fn uniform(name: &str, shape: &[(usize, u8)]) -> Result<Self, SchemaError> {
        let subtests: Vec<SubtestSpec> = shape
            .iter()
            .enumerate()
            .map(|(i, &(item_count, max_score))| SubtestSpec {
                name: format!("Subtest {}", to_roman(i as u32 + 1)),
                item_count,
                max_score,
            })
            .collect();
        let max: u32 = shape.iter().map(|&(c, m)| c as u32 * m as u32).sum();
        let scale = SeverityScale::proportional(max as f64)?;
        Self::new(name, subtests, Vec::new(), scale)
    }

    /// The 77-item ATEC with the mini-cluster map used for final selections.
    pub fn atec() -> Self {
        let subtests = vec![
            SubtestSpec {
                name: "Speech/Language/Communication".into(),
                item_count: 14,
                max_score: 2,
            },
            SubtestSpec {
                name: "Sociability".into(),
                item_count: 20,
                max_score: 2,
            },
            SubtestSpec {
                name: "Sensory/Cognitive Awareness".into(),
                item_count: 18,
                max_score: 2,
            },
            SubtestSpec {
                name: "Health/Physical/Behavior".into(),
                item_count: 25,
                max_score: 3,
            },
        ];
        let table: &[(u8, &str, &[u16])] = &[
            (0, "Basic", &[1, 2, 3]),
            (0, "Intermediate", &[9, 10, 11]),
            (0, "Advanced", &[12, 13, 14]),
            (0, "Multiword", &[4, 5, 6, 7, 8, 10, 12]),
            (1, "World of their own", &[1, 2, 3, 9]),
            (1, "Uncooperative", &[4, 14, 15, 10]),
            (1, "Social norms", &[5, 8, 12, 13, 17]),
            (1, "Insensitive", &[7, 9, 11, 18, 19, 20]),
            (1, "Lack friends", &[16]),
            (2, "Responses", &[1, 2]),
            (2, "Looking", &[3, 4, 18]),
            (2, "Appropriate Play", &[5, 6, 7, 8]),
            (2, "Awareness", &[9, 10, 11, 17]),
            (2, "Curiosity", &[12, 13, 14, 15, 16]),
            (3, "Bladder Control", &[1, 2]),
            (3, "Gastrointestinal", &[3, 4, 5, 7, 8]),
            (3, "Energy", &[6, 9, 10]),
            (3, "Destructive", &[11, 12, 13, 20]),
            (3, "Agitation", &[9, 14, 15, 20, 22]),
            (3, "Obsession", &[18, 24]),
            (3, "Rigidity", &[19, 21, 25]),
            (3, "Unhappy/Crying", &[16]),
            (3, "Epilepsy", &[17]),
            (3, "Pain sensitivity", &[23]),
            (3, "Sensory Overstimulation", &[14, 17]),
        ];
        let clusters = table
            .iter()
            .map(|&(s, name, items)| MiniCluster {
                name: name.to_string(),
                subtest: Subtest(s),
                items: items.to_vec(),
            })
            .collect();
        Self::new("ATEC", subtests, clusters, SeverityScale::default()).expect("built-in ATEC schema is valid")
    }

    pub fn item_count(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn subtest_count(&self) -> usize {
        self.subtests.len()
    }

    /// Canonical positions occupied by subtest `s`.
    pub fn subtest_range(&self, s: usize) -> Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn subtest_max(&self, s: usize) -> u32 {
        let spec = &self.subtests[s];
        spec.item_count as u32 * spec.max_score as u32
    }

    /// Attainable maximum of the total score (179 for ATEC).
    pub fn max_total(&self) -> u32 {
        (0..self.subtests.len()).map(|s| self.subtest_max(s)).sum()
    }

    pub fn item_at(&self, pos: usize) -> ItemId {
        let s = self.subtest_of(pos);
        ItemId::new(s as u8, (pos - self.offsets[s] + 1) as u16)
    }

    pub fn subtest_of(&self, pos: usize) -> usize {
        assert!(pos < self.item_count(), "item position {pos} out of range");
        self.offsets.partition_point(|&o| o <= pos) - 1
    }

    pub fn position(&self, item: ItemId) -> Option<usize> {
        let s = item.subtest.0 as usize;
        let spec = self.subtests.get(s)?;
        let idx = item.index as usize;
        (1..=spec.item_count).contains(&idx).then(|| self.offsets[s] + idx - 1)
    }

    pub fn require_position(&self, item: ItemId) -> Result<usize, SchemaError> {
        self.position(item)
            .ok_or_else(|| SchemaError::UnknownItem(item.to_string(), self.name.clone()))
    }

    pub fn max_score_at(&self, pos: usize) -> u8 {
        self.subtests[self.subtest_of(pos)].max_score
    }

    /// Per-item maxima in canonical order.
    pub fn item_maxima(&self) -> Vec<u8> {
        self.subtests
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.max_score, s.item_count))
            .collect()
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        (0..self.item_count()).map(|p| self.item_at(p))
    }

    /// Item labels (`I.1` ...) in canonical order.
    pub fn item_labels(&self) -> Vec<String> {
        self.items().map(|i| i.to_string()).collect()
    }

    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let file: SchemaFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SchemaFile::from(self)).expect("schema serializes")
    }

    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let text = std::fs::read_to_string(path).map_err(|source| SchemaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// On-disk layout of a schema file.
///
/// ```json
/// {
///   "name": "ATEC",
///   "subtests": [{ "name": "Sociability", "item_count": 20, "max_score": 2 }],
///   "clusters": [{ "name": "Uncooperative", "subtest": "II", "items": [4, 14, 15, 10] }],
///   "severity": { "max_score": 180.0, "mild_upper": 40.0, "severe_lower": 90.0 }
/// }
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaFile {
    pub name: String,
    pub subtests: Vec<SubtestSpec>,
    #[serde(default)]
    pub clusters: Vec<ClusterFile>,
    pub severity: Option<SeverityScale>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterFile {
    pub name: String,
    pub subtest: String,
    pub items: Vec<u16>,
}

impl TryFrom<SchemaFile> for QuestionnaireSchema {
    type Error = SchemaError;

    fn try_from(file: SchemaFile) -> Result<Self, SchemaError> {
        let clusters = file
            .clusters
            .into_iter()
            .map(|c| {
                Ok(MiniCluster {
                    subtest: c.subtest.parse()?,
                    name: c.name,
                    items: c.items,
                })
            })
            .collect::<Result<Vec<_>, SchemaError>>()?;
        let severity = match file.severity {
            Some(s) => s,
            None => {
                let max: u32 = file
                    .subtests
                    .iter()
                    .map(|s| s.item_count as u32 * s.max_score as u32)
                    .sum();
                SeverityScale::proportional(max as f64)?
            }
        };
        QuestionnaireSchema::new(file.name, file.subtests, clusters, severity)
    }
}

impl From<&QuestionnaireSchema> for SchemaFile {
    fn from(s: &QuestionnaireSchema) -> Self {
        SchemaFile {
            name: s.name.clone(),
            subtests: s.subtests.clone(),
            clusters: s
                .clusters
                .iter()
                .map(|c| ClusterFile {
                    name: c.name.clone(),
                    subtest: c.subtest.code(),
                    items: c.items.clone(),
                })
                .collect(),
            severity: Some(s.severity),
        }
    }
}
