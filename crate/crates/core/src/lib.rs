//! Shortening a long questionnaire from before/after assessments.
//!
//! Two questions are answered about subsets of items. Which few items'
//! changes best explain the change in the full total is answered by
//! exact best-subsets regression over repeated train/test shuffles
//! ([`longitudinal`], built on [`subset`] and [`regress`]). Which small
//! sets still bin a single assessment into the same severity class as the
//! full questionnaire is answered by [`severity`].
//!
//! Cohorts come from CSV files ([`ingest`]) or from the seeded generator
//! ([`synth`]); their layout is a [`schema::QuestionnaireSchema`], the
//! ATEC by default. [`report`] ties the stages to a TOML configuration and
//! writes stamped output files.
//!
//! ```
//! use shortform::schema::QuestionnaireSchema;
//! use shortform::severity::{samples_from_cohort, subset_accuracy, SamplePool, Weighting};
//! use shortform::synth::{generate_cohort, CohortSpec};
//!
//! let schema = QuestionnaireSchema::atec();
//! let cohort = generate_cohort(&CohortSpec { seed: 7, ..CohortSpec::default() }, &schema).unwrap();
//! let samples = samples_from_cohort(&cohort, SamplePool::Both);
//! let all: Vec<usize> = (0..schema.item_count()).collect();
//! assert_eq!(subset_accuracy(&samples, &all, &schema, Weighting::Uniform).unwrap(), 1.0);
//! ```
//!
//! Results never depend on the number of rayon worker threads.

pub mod ingest;
pub mod longitudinal;
pub mod record;
pub mod regress;
pub mod report;
pub mod schema;
pub mod severity;
pub mod special;
pub mod subset;
pub mod synth;

// The guide's snippets run as doctests so the book cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/schema.md")]
    mod schema {}
    #[doc = include_str!("../../../book/src/cohorts.md")]
    mod cohorts {}
    #[doc = include_str!("../../../book/src/regression.md")]
    mod regression {}
    #[doc = include_str!("../../../book/src/best-subsets.md")]
    mod best_subsets {}
    #[doc = include_str!("../../../book/src/longitudinal.md")]
    mod longitudinal {}
    #[doc = include_str!("../../../book/src/severity.md")]
    mod severity {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
