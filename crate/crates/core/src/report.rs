//! Run configuration and the pipelines behind each command. Every pipeline
//! reads its inputs, validates the whole configuration before doing any
//! work and writes its outputs into one directory.
//!
//! Each CSV output starts with a `# config_hash=<hex> seed=<n>` line and
//! each JSON output carries `config_hash` and `seed` fields. The hash covers
//! the resolved configuration (without thread count and input paths) and
//! the schema, so identical config, schema and input give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ingest::{parse_cohort, write_cohort, IngestError, IngestReport};
use crate::longitudinal::{
    cohort_summary, final_selection, model_report, run_shuffles, tally_clusters, ClusterTally, CohortSummary,
    FinalSelection, LongitudinalError, ModelReport, ShufflePlan, ShuffleRun,
};
use crate::record::{compute_delta, SubjectRecord};
use crate::schema::{ItemId, QuestionnaireSchema};
use crate::severity::{
    random_search, samples_from_cohort, structured_search, EarlyStop, RandomSearchConfig, RandomSearchResult,
    SamplePool, SeverityError, ShortlistRule, StructuredSearchResult, Weighting,
};
use crate::subset::{SearchBudget, SubsetError};
use crate::synth::{generate_cohort, CohortSidecar, CohortSpec};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Validation(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Budget(String),
}

impl RunError {
    /// 1 validation, 2 I/O, 3 search budget exhausted.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) => 1,
            RunError::Io { .. } => 2,
            RunError::Budget(_) => 3,
        }
    }
}

fn invalid(msg: impl Into<String>) -> RunError {
    RunError::Validation(msg.into())
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl From<LongitudinalError> for RunError {
    fn from(e: LongitudinalError) -> Self {
        match e {
            LongitudinalError::Search {
                source: SubsetError::BoundExceeded { .. },
                ..
            } => RunError::Budget(e.to_string()),
            e => RunError::Validation(e.to_string()),
        }
    }
}

impl From<SeverityError> for RunError {
    fn from(e: SeverityError) -> Self {
        RunError::Validation(e.to_string())
    }
}

/// The whole run in one file. Every field has a default, so an empty file
/// is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: String,
    /// Master seed for the generator, the shuffles and the random search.
    pub seed: u64,
    /// Worker threads; all threads available when absent.
    pub threads: Option<usize>,
    /// Schema file; the ATEC layout when absent.
    pub schema: Option<PathBuf>,
    /// Cohort file read by every command except `simulate`.
    pub cohort: Option<PathBuf>,
    pub simulate: SimulateConfig,
    pub longitudinal: LongitudinalConfig,
    pub severity: SeverityConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: FORMAT_VERSION.into(),
            seed: 0,
            threads: None,
            schema: None,
            cohort: None,
            simulate: SimulateConfig::default(),
            longitudinal: LongitudinalConfig::default(),
            severity: SeverityConfig::default(),
        }
    }
}

/// Generator settings. Absent moments are the defaults rescaled to the
/// schema in use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_subjects: usize,
    pub subtest_before_mean_sd: Option<Vec<(f64, f64)>>,
    pub subtest_improvement_mean_sd: Option<Vec<(f64, f64)>>,
    pub age_mean_sd: Option<(f64, f64)>,
    pub duration_mean_sd: Option<(f64, f64)>,
    pub signal_items: Option<Vec<(ItemId, f64)>>,
    pub item_noise_sd: Option<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n_subjects: 60,
            subtest_before_mean_sd: None,
            subtest_improvement_mean_sd: None,
            age_mean_sd: None,
            duration_mean_sd: None,
            signal_items: None,
            item_noise_sd: None,
        }
    }
}

impl SimulateConfig {
    pub fn cohort_spec(&self, schema: &QuestionnaireSchema, seed: u64) -> CohortSpec {
        let base = CohortSpec::scaled_for(schema);
        CohortSpec {
            n_subjects: self.n_subjects,
            seed,
            subtest_before_mean_sd: self
                .subtest_before_mean_sd
                .clone()
                .unwrap_or(base.subtest_before_mean_sd),
            subtest_improvement_mean_sd: self
                .subtest_improvement_mean_sd
                .clone()
                .unwrap_or(base.subtest_improvement_mean_sd),
            age_mean_sd: self.age_mean_sd.unwrap_or(base.age_mean_sd),
            duration_mean_sd: self.duration_mean_sd.unwrap_or(base.duration_mean_sd),
            signal_items: self.signal_items.clone().unwrap_or(base.signal_items),
            item_noise_sd: self.item_noise_sd.unwrap_or(base.item_noise_sd),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LongitudinalConfig {
    pub n_shuffles: usize,
    pub train_fraction: f64,
    pub k_max: usize,
    pub pool: Option<Vec<ItemId>>,
    /// Significance level of the final per-cluster selection.
    pub alpha: f64,
    /// Cap on evaluated subsets per shuffle; exceeding it ends the run.
    pub node_limit: Option<u64>,
    /// Model refitted for the coefficient table and diagnostics.
    pub report_shuffle: usize,
    /// Size of that model; `min(5, k_max)` when absent.
    pub report_size: Option<usize>,
    /// Decimals in printed equations.
    pub decimals: usize,
}

impl Default for LongitudinalConfig {
    fn default() -> Self {
        LongitudinalConfig {
            n_shuffles: 6,
            train_fraction: 0.7,
            k_max: 7,
            pool: None,
            alpha: 0.05,
            node_limit: None,
            report_shuffle: 1,
            report_size: None,
            decimals: 3,
        }
    }
}

impl LongitudinalConfig {
    pub fn plan(&self, seed: u64) -> ShufflePlan {
        ShufflePlan {
            n_shuffles: self.n_shuffles,
            train_fraction: self.train_fraction,
            k_max: self.k_max,
            seed,
            pool: self.pool.clone(),
        }
    }

    pub fn budget(&self) -> SearchBudget {
        SearchBudget {
            node_limit: self.node_limit,
            ..SearchBudget::default()
        }
    }

    fn report_size(&self) -> usize {
        self.report_size.unwrap_or(self.k_max.min(5))
    }

    fn validate(&self) -> Result<(), RunError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!(
                "longitudinal.alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.report_shuffle == 0 || self.report_shuffle > self.n_shuffles {
            return Err(invalid(format!(
                "longitudinal.report_shuffle must lie in 1..={}, got {}",
                self.n_shuffles, self.report_shuffle
            )));
        }
        let size = self.report_size();
        if size == 0 || size > self.k_max {
            return Err(invalid(format!(
                "longitudinal.report_size must lie in 1..={}, got {size}",
                self.k_max
            )));
        }
        if self.decimals > 12 {
            return Err(invalid("longitudinal.decimals must be ≤ 12"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeverityConfig {
    pub sample_pool: SamplePool,
    /// Run the one-per-subtest brute force once per weighting.
    pub structured: bool,
    pub weightings: Vec<Weighting>,
    pub qualify_threshold: f64,
    pub shortlist: ShortlistRule,
    pub random: bool,
    pub random_weighting: Weighting,
    pub per_size_samples: usize,
    pub target: f64,
    pub early_stop: EarlyStop,
    pub histogram_bins: usize,
}

impl Default for SeverityConfig {
    fn default() -> Self {
        use crate::record::AgeGroup;
        let random = RandomSearchConfig::default();
        SeverityConfig {
            sample_pool: SamplePool::Both,
            structured: true,
            weightings: vec![
                Weighting::Uniform,
                Weighting::Only(AgeGroup::Young),
                Weighting::Only(AgeGroup::Older),
                Weighting::AgeBalanced,
            ],
            qualify_threshold: 0.8,
            shortlist: ShortlistRule::default(),
            random: true,
            random_weighting: Weighting::Uniform,
            per_size_samples: random.per_size_samples,
            target: random.target,
            early_stop: random.early_stop,
            histogram_bins: random.histogram_bins,
        }
    }
}

impl SeverityConfig {
    pub fn random_config(&self, seed: u64) -> RandomSearchConfig {
        RandomSearchConfig {
            per_size_samples: self.per_size_samples,
            target: self.target,
            seed,
            early_stop: self.early_stop,
            histogram_bins: self.histogram_bins,
        }
    }

    fn validate(&self, schema: &QuestionnaireSchema) -> Result<(), RunError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(format!("severity.{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("qualify_threshold", self.qualify_threshold)?;
        unit("target", self.target)?;
        match self.shortlist {
            ShortlistRule::MeanPlusSd(k) if !k.is_finite() => {
                return Err(invalid("severity.shortlist.mean_plus_sd must be finite"))
            }
            ShortlistRule::TopQuantile(q) => unit("shortlist.top_quantile", q)?,
            _ => {}
        }
        if self.structured {
            if self.weightings.is_empty() {
                return Err(invalid("severity.weightings is empty"));
            }
            if schema.subtest_count() < 4 {
                return Err(SeverityError::TooFewSubtests(schema.subtest_count()).into());
            }
        }
        if self.per_size_samples == 0 {
            return Err(invalid("severity.per_size_samples must be ≥ 1"));
        }
        if self.histogram_bins == 0 {
            return Err(invalid("severity.histogram_bins must be ≥ 1"));
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    /// Checks everything that can be checked without the cohort.
    pub fn validate(&self, schema: &QuestionnaireSchema) -> Result<(), RunError> {
        if self.format_version != FORMAT_VERSION {
            return Err(invalid(format!(
                "format_version `{}` is not supported (expected `{FORMAT_VERSION}`)",
                self.format_version
            )));
        }
        if self.threads == Some(0) {
            return Err(invalid("threads must be ≥ 1"));
        }
        self.simulate
            .cohort_spec(schema, self.seed)
            .validate(schema)
            .map_err(|e| invalid(e.to_string()))?;
        let plan = self.longitudinal.plan(self.seed);
        // cohort-size checks wait for the cohort; this covers the rest
        plan.validate(usize::MAX / 2).map_err(|e| invalid(e.to_string()))?;
        plan.pool_positions(schema).map_err(|e| invalid(e.to_string()))?;
        self.longitudinal.validate()?;
        self.severity.validate(schema)
    }

    /// SHA-256 over the canonical JSON of the configuration (thread count
    /// and paths cleared) followed by the schema's JSON.
    pub fn hash(&self, schema: &QuestionnaireSchema) -> String {
        let canonical = RunConfig {
            threads: None,
            schema: None,
            cohort: None,
            ..self.clone()
        };
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canonical).expect("config serializes"));
        h.update(b"\n");
        h.update(schema.to_json().as_bytes());
        h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Ingest,
    Longitudinal,
    Severity,
    Report,
}

/// A validated run: configuration, schema and output directory.
pub struct Run {
    pub config: RunConfig,
    pub schema: QuestionnaireSchema,
    pub out: PathBuf,
    hash: String,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

impl Run {
    pub fn new(config: RunConfig, schema: QuestionnaireSchema, out: impl Into<PathBuf>) -> Result<Self, RunError> {
        config.validate(&schema)?;
        let hash = config.hash(&schema);
        Ok(Run {
            config,
            schema,
            out: out.into(),
            hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn header_line(&self) -> String {
        format!("config_hash={} seed={}", self.hash, self.config.seed)
    }

    pub fn execute(&self, command: Command) -> Result<Outputs, RunError> {
        match command {
            Command::Simulate => self.simulate(),
            Command::Ingest => self.ingest(),
            Command::Longitudinal => self.longitudinal(),
            Command::Severity => self.severity(),
            Command::Report => self.report(),
        }
    }

    fn writer(&self) -> Result<Writer<'_>, RunError> {
        fs::create_dir_all(&self.out).map_err(io_at(&self.out))?;
        let protected = self
            .config
            .cohort
            .iter()
            .chain(self.config.schema.iter())
            .filter_map(|p| p.canonicalize().ok())
            .collect();
        Ok(Writer {
            run: self,
            protected,
            outputs: Outputs::default(),
        })
    }

    fn load_cohort(&self) -> Result<(Vec<SubjectRecord>, IngestReport), RunError> {
        let path = self
            .config
            .cohort
            .as_deref()
            .ok_or_else(|| invalid("no cohort file given (set `cohort` in the config or pass --cohort)"))?;
        let file = fs::File::open(path).map_err(io_at(path))?;
        let (records, report) = parse_cohort(io::BufReader::new(file), &self.schema).map_err(|e| match e {
            IngestError::Io(source) => RunError::Io {
                path: path.to_path_buf(),
                source,
            },
            e => invalid(format!("{}: {e}", path.display())),
        })?;
        if records.is_empty() {
            let first = report
                .row_errors
                .first()
                .map(|r| format!(" (line {}: {})", r.line, r.message))
                .unwrap_or_default();
            return Err(invalid(format!("{}: no usable subjects{first}", path.display())));
        }
        Ok((records, report))
    }

    fn simulate(&self) -> Result<Outputs, RunError> {
        let spec = self.config.simulate.cohort_spec(&self.schema, self.config.seed);
        let cohort = generate_cohort(&spec, &self.schema).map_err(|e| invalid(e.to_string()))?;
        let mut w = self.writer()?;
        w.file("cohort.csv", |out| {
            write_cohort(out, &self.schema, &cohort, Some(&self.header_line())).map_err(ingest_io)
        })?;
        w.json(
            "cohort.json",
            &CohortSidecar {
                schema: self.schema.name.clone(),
                seed: self.config.seed,
                spec,
            },
        )?;
        Ok(w.finish())
    }

    fn ingest(&self) -> Result<Outputs, RunError> {
        let (cohort, report) = self.load_cohort()?;
        let mut w = self.writer()?;
        w.json("ingest_report.json", &report)?;
        w.file("ingested.csv", |out| {
            write_cohort(out, &self.schema, &cohort, Some(&self.header_line())).map_err(ingest_io)
        })?;
        Ok(w.finish())
    }

    fn longitudinal(&self) -> Result<Outputs, RunError> {
        let (cohort, report) = self.load_cohort()?;
        let cfg = &self.config.longitudinal;
        let plan = cfg.plan(self.config.seed);
        plan.validate(cohort.len())?;
        let run = run_shuffles(&cohort, &self.schema, &plan, &cfg.budget())?;
        let tally = tally_clusters(&run, &cohort, &self.schema)?;
        let selection = final_selection(&tally, cfg.alpha);
        let summary = cohort_summary(&cohort, &self.schema)?;
        let model = match model_report(&cohort, &self.schema, &run, cfg.report_shuffle, cfg.report_size()) {
            Ok(m) => Some(m),
            Err(LongitudinalError::NoSuchModel { .. }) => None,
            Err(e) => return Err(e.into()),
        };

        let mut w = self.writer()?;
        w.json("ingest_report.json", &report)?;
        write_shuffles(&mut w, &run, cfg.decimals)?;
        write_tally(&mut w, &tally)?;
        w.csv(
            "final_selection.csv",
            &["cluster", "subtest", "item", "p_value", "cohen_d"],
            selection.clusters.iter().map(|c| {
                vec![
                    c.cluster.clone(),
                    c.subtest.clone(),
                    c.item.map(|i| i.to_string()).unwrap_or_default(),
                    opt(c.p_value),
                    opt(c.cohen_d),
                ]
            }),
        )?;
        if let Some(m) = &model {
            write_model(&mut w, m)?;
        }
        write_score_plots(&mut w, &cohort, &self.schema)?;
        for &item in &selection.shortlist {
            let pos = self
                .schema
                .require_position(item)
                .expect("selected items are in the schema");
            w.csv(
                &format!("plots/delta_{item}.csv"),
                &["item_delta", "total_delta"],
                cohort.iter().map(|r| {
                    let d = compute_delta(r, &self.schema);
                    vec![d.per_item[pos].to_string(), d.total.to_string()]
                }),
            )?;
        }
        w.json(
            "longitudinal_summary.json",
            &LongitudinalSummary {
                n_subjects: cohort.len(),
                excluded: report.excluded.len(),
                row_errors: report.row_errors.len(),
                plan,
                models: run.rows.len(),
                failed_shuffles: run
                    .shuffles
                    .iter()
                    .filter_map(|s| s.failure.as_ref().map(|f| (s.shuffle, f.clone())))
                    .collect(),
                final_selection: selection,
                model: model.map(|m| ModelHeadline {
                    shuffle: m.shuffle,
                    items: m.items,
                    r_squared: m.fit.r_squared,
                    adj_r_squared: m.fit.adj_r_squared,
                    f_statistic: m.fit.f_statistic(),
                    f_p_value: m.fit.f_p_value(),
                    df_residual: m.fit.df_residual,
                }),
                cohort: summary,
            },
        )?;
        Ok(w.finish())
    }

    fn severity(&self) -> Result<Outputs, RunError> {
        let (cohort, report) = self.load_cohort()?;
        let cfg = &self.config.severity;
        let samples = samples_from_cohort(&cohort, cfg.sample_pool);
        let structured = if cfg.structured {
            cfg.weightings
                .iter()
                .map(|&wt| structured_search(&samples, &self.schema, wt, cfg.qualify_threshold, cfg.shortlist))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        let random = if cfg.random {
            Some(random_search(
                &samples,
                &self.schema,
                cfg.random_weighting,
                &cfg.random_config(self.config.seed),
            )?)
        } else {
            None
        };

        let mut w = self.writer()?;
        w.json("ingest_report.json", &report)?;
        for r in &structured {
            w.csv(
                &format!("structured_{}.csv", r.weighting),
                &["item", "frequency", "shortlisted"],
                self.schema
                    .items()
                    .zip(&r.item_frequency)
                    .map(|(id, f)| vec![id.to_string(), f.to_string(), r.shortlist.contains(&id).to_string()]),
            )?;
        }
        if let Some(r) = &random {
            write_random(&mut w, r, cfg.histogram_bins)?;
        }
        w.json(
            "severity_summary.json",
            &SeveritySummary {
                samples: samples.len(),
                sample_pool: cfg.sample_pool,
                structured: structured.iter().map(StructuredHeadline::from).collect(),
                random: random.as_ref().map(|r| RandomHeadline {
                    weighting: r.weighting,
                    minimal_size: r.minimal_size,
                    best_set: r.best_set.clone(),
                    best_accuracy: r.best_accuracy,
                    full_size_mean: r.sizes.last().and_then(|s| s.mean),
                }),
            },
        )?;
        Ok(w.finish())
    }

    fn report(&self) -> Result<Outputs, RunError> {
        let (cohort, report) = self.load_cohort()?;
        let summary = cohort_summary(&cohort, &self.schema)?;
        let mut w = self.writer()?;
        w.json("ingest_report.json", &report)?;
        w.json("cohort_summary.json", &summary)?;
        w.csv(
            "score_summary.csv",
            &[
                "score",
                "max_score",
                "before_mean",
                "before_sd",
                "after_mean",
                "after_sd",
                "improvement_mean",
                "improvement_sd",
                "improvement_pct_mean",
                "paired_t",
                "paired_p",
            ],
            summary.subtests.iter().chain(std::iter::once(&summary.total)).map(|s| {
                vec![
                    s.name.clone(),
                    s.max_score.to_string(),
                    s.before.mean.to_string(),
                    s.before.sd.to_string(),
                    s.after.mean.to_string(),
                    s.after.sd.to_string(),
                    s.improvement.mean.to_string(),
                    s.improvement.sd.to_string(),
                    opt(s.improvement_pct.map(|m| m.mean)),
                    opt(s.paired_t),
                    opt(s.paired_p),
                ]
            }),
        )?;
        w.csv(
            "item_summary.csv",
            &[
                "item",
                "improved",
                "unchanged",
                "deteriorated",
                "correlation_with_total",
            ],
            summary.items.iter().map(|i| {
                vec![
                    i.item.to_string(),
                    i.improved.to_string(),
                    i.unchanged.to_string(),
                    i.deteriorated.to_string(),
                    opt(i.correlation_with_total),
                ]
            }),
        )?;
        write_score_plots(&mut w, &cohort, &self.schema)?;
        Ok(w.finish())
    }
}

fn ingest_io(e: IngestError) -> io::Error {
    match e {
        IngestError::Io(e) => e,
        e => io::Error::other(e.to_string()),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

/// Files written by one command, relative to the output directory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Outputs {
    pub files: Vec<PathBuf>,
}

struct Writer<'a> {
    run: &'a Run,
    protected: Vec<PathBuf>,
    outputs: Outputs,
}

impl Writer<'_> {
    fn file(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), RunError> {
        let path = self.run.out.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_at(dir))?;
        }
        if path.canonicalize().is_ok_and(|p| self.protected.contains(&p)) {
            return Err(invalid(format!("refusing to overwrite input file {}", path.display())));
        }
        let f = fs::File::create(&path).map_err(io_at(&path))?;
        let mut out = BufWriter::new(f);
        body(&mut out).and_then(|_| out.flush()).map_err(io_at(&path))?;
        self.outputs.files.push(PathBuf::from(name));
        Ok(())
    }

    fn csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<(), RunError>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let comment = self.run.header_line();
        self.file(name, |out| {
            writeln!(out, "# {comment}")?;
            let mut w = csv::Writer::from_writer(out);
            w.write_record(header)?;
            for row in rows {
                w.write_record(&row)?;
            }
            w.flush()
        })
    }

    fn json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<(), RunError> {
        let stamped = Stamped {
            config_hash: &self.run.hash,
            seed: self.run.config.seed,
            body,
        };
        let text = serde_json::to_string_pretty(&stamped).expect("outputs serialize");
        self.file(name, |out| writeln!(out, "{text}"))
    }

    fn finish(self) -> Outputs {
        self.outputs
    }
}

fn write_shuffles(w: &mut Writer<'_>, run: &ShuffleRun, decimals: usize) -> Result<(), RunError> {
    w.csv(
        "shuffles.csv",
        &[
            "shuffle",
            "size",
            "items",
            "equation",
            "train_r2",
            "train_adj_r2",
            "test_mae",
            "test_mape",
            "train_rss",
        ],
        run.rows.iter().map(|r| {
            vec![
                r.shuffle.to_string(),
                r.size.to_string(),
                join(&r.items),
                r.equation(decimals),
                r.train_r2.to_string(),
                r.train_adj_r2.to_string(),
                r.test_mae.to_string(),
                opt(r.test_mape),
                r.train_rss.to_string(),
            ]
        }),
    )?;
    w.csv(
        "shuffle_status.csv",
        &["shuffle", "train", "test", "status", "nodes", "pruned", "tasks"],
        run.shuffles.iter().map(|s| {
            let stats = s.stats.as_ref();
            vec![
                s.shuffle.to_string(),
                s.train.len().to_string(),
                s.test.len().to_string(),
                s.failure.clone().unwrap_or_else(|| "ok".into()),
                stats.map(|x| x.nodes.to_string()).unwrap_or_default(),
                stats.map(|x| x.pruned.to_string()).unwrap_or_default(),
                stats.map(|x| x.tasks.to_string()).unwrap_or_default(),
            ]
        }),
    )
}

fn write_tally(w: &mut Writer<'_>, tally: &ClusterTally) -> Result<(), RunError> {
    let rows = tally.clusters.iter().flat_map(|c| {
        c.items.iter().map(move |i| {
            let t = i.test.as_ref();
            vec![
                c.name.clone(),
                c.subtest.clone(),
                i.item.to_string(),
                i.shuffles.len().to_string(),
                join(&i.shuffles),
                opt(t.map(|t| t.mean_diff)),
                opt(t.map(|t| t.t)),
                opt(t.map(|t| t.p)),
                opt(t.map(|t| t.cohen_d)),
            ]
        })
    });
    w.csv(
        "cluster_tally.csv",
        &[
            "cluster",
            "subtest",
            "item",
            "appearances",
            "shuffles",
            "mean_diff",
            "t",
            "p_value",
            "cohen_d",
        ],
        rows,
    )
}

fn write_model(w: &mut Writer<'_>, m: &ModelReport) -> Result<(), RunError> {
    let f = &m.fit;
    let terms = std::iter::once("(intercept)".to_string()).chain(m.items.iter().map(ItemId::to_string));
    w.csv(
        "model_coefficients.csv",
        &["term", "estimate", "std_error", "t_value", "p_value", "vif"],
        terms.enumerate().map(|(j, term)| {
            vec![
                term,
                f.coefficients[j].to_string(),
                f.std_errors[j].to_string(),
                f.t_values[j].to_string(),
                f.p_values[j].to_string(),
                if j == 0 {
                    String::new()
                } else {
                    m.vifs[j - 1].to_string()
                },
            ]
        }),
    )?;
    w.json("model_report.json", m)?;
    let d = &m.diagnostics;
    w.csv(
        "plots/residuals.csv",
        &["fitted", "residual"],
        d.fitted
            .iter()
            .zip(&d.residuals)
            .map(|(a, b)| vec![a.to_string(), b.to_string()]),
    )?;
    w.csv(
        "plots/qq.csv",
        &["theoretical", "sample"],
        d.qq_pairs.iter().map(|(a, b)| vec![a.to_string(), b.to_string()]),
    )
}

/// Before/after totals per subject, overall and per subtest.
fn write_score_plots(
    w: &mut Writer<'_>,
    cohort: &[SubjectRecord],
    schema: &QuestionnaireSchema,
) -> Result<(), RunError> {
    w.csv(
        "plots/total_scores.csv",
        &["before", "after"],
        cohort
            .iter()
            .map(|r| vec![r.before.total().to_string(), r.after.total().to_string()]),
    )?;
    for s in 0..schema.subtest_count() {
        let code = crate::schema::Subtest(s as u8).code();
        w.csv(
            &format!("plots/subtest_{code}_scores.csv"),
            &["before", "after"],
            cohort.iter().map(|r| {
                vec![
                    r.before.subtotals(schema)[s].to_string(),
                    r.after.subtotals(schema)[s].to_string(),
                ]
            }),
        )?;
    }
    Ok(())
}

fn write_random(w: &mut Writer<'_>, r: &RandomSearchResult, bins: usize) -> Result<(), RunError> {
    w.csv(
        "random_search.csv",
        &["size", "samples_tested", "mean", "sd", "min", "max", "stopped_early"],
        r.sizes.iter().map(|s| {
            vec![
                s.size.to_string(),
                s.samples_tested.to_string(),
                opt(s.mean),
                opt(s.sd),
                opt(s.min),
                opt(s.max),
                s.stopped_early.to_string(),
            ]
        }),
    )?;
    w.csv(
        "random_histogram.csv",
        &["size", "bin_lower", "bin_upper", "count"],
        r.sizes.iter().flat_map(|s| {
            s.histogram.iter().enumerate().map(move |(b, c)| {
                vec![
                    s.size.to_string(),
                    (b as f64 / bins as f64).to_string(),
                    ((b + 1) as f64 / bins as f64).to_string(),
                    c.to_string(),
                ]
            })
        }),
    )
}

#[derive(Serialize)]
struct ModelHeadline {
    shuffle: usize,
    items: Vec<ItemId>,
    r_squared: f64,
    adj_r_squared: f64,
    f_statistic: f64,
    f_p_value: f64,
    df_residual: usize,
}

#[derive(Serialize)]
struct LongitudinalSummary {
    n_subjects: usize,
    excluded: usize,
    row_errors: usize,
    plan: ShufflePlan,
    models: usize,
    failed_shuffles: Vec<(usize, String)>,
    final_selection: FinalSelection,
    model: Option<ModelHeadline>,
    cohort: CohortSummary,
}

#[derive(Serialize)]
struct StructuredHeadline {
    weighting: Weighting,
    total_sets: u64,
    qualified_sets: u64,
    shortlist: Vec<ItemId>,
}

impl From<&StructuredSearchResult> for StructuredHeadline {
    fn from(r: &StructuredSearchResult) -> Self {
        StructuredHeadline {
            weighting: r.weighting,
            total_sets: r.total_sets,
            qualified_sets: r.qualified_sets,
            shortlist: r.shortlist.clone(),
        }
    }
}

#[derive(Serialize)]
struct RandomHeadline {
    weighting: Weighting,
    minimal_size: Option<usize>,
    best_set: Option<Vec<ItemId>>,
    best_accuracy: Option<f64>,
    /// Mean accuracy at the full item count.
    full_size_mean: Option<f64>,
}

#[derive(Serialize)]
struct SeveritySummary {
    samples: usize,
    sample_pool: SamplePool,
    structured: Vec<StructuredHeadline>,
    random: Option<RandomHeadline>,
}
