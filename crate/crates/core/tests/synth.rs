use proptest::prelude::*;
use shortform::record::compute_delta;
use shortform::schema::QuestionnaireSchema;
use shortform::synth::*;

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

#[test]
fn large_cohort_hits_the_baseline_mean() {
    let schema = QuestionnaireSchema::atec();
    let spec = CohortSpec {
        n_subjects: 2000,
        seed: 17,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&spec, &schema).unwrap();
    let mean = cohort
        .iter()
        .map(|r| r.before.subtotals(&schema)[0] as f64)
        .sum::<f64>()
        / 2000.0;
    assert!((mean - 12.2).abs() <= 0.5, "subtest I before mean {mean}");
}

#[test]
fn parallel_generation_is_bit_identical() {
    let schema = QuestionnaireSchema::atec();
    let spec = CohortSpec {
        n_subjects: 300,
        seed: 2,
        ..CohortSpec::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| generate_cohort(&spec, &schema).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(8));
}

#[test]
fn signal_items_lead_the_total_delta() {
    let schema = QuestionnaireSchema::atec();
    for seed in [1, 2, 3] {
        let spec = CohortSpec {
            n_subjects: 400,
            seed,
            ..CohortSpec::default()
        };
        let cohort = generate_cohort(&spec, &schema).unwrap();
        let deltas: Vec<_> = cohort.iter().map(|r| compute_delta(r, &schema)).collect();
        let total: Vec<f64> = deltas.iter().map(|d| d.total as f64).collect();
        let corr: Vec<f64> = (0..77)
            .map(|pos| {
                let item: Vec<f64> = deltas.iter().map(|d| d.per_item[pos] as f64).collect();
                pearson(&item, &total)
            })
            .collect();
        let signal: Vec<usize> = spec
            .signal_items
            .iter()
            .map(|(id, _)| schema.position(*id).unwrap())
            .collect();
        let weakest_signal = signal.iter().map(|&p| corr[p]).fold(f64::INFINITY, f64::min);
        let strongest_other = (0..77)
            .filter(|p| !signal.contains(p))
            .map(|p| corr[p])
            .filter(|c| c.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            weakest_signal > strongest_other,
            "seed {seed}: {weakest_signal} vs {strongest_other}"
        );
    }
}

#[test]
fn zero_subjects_is_rejected_with_the_count() {
    let spec = CohortSpec {
        n_subjects: 0,
        ..CohortSpec::default()
    };
    let err = generate_cohort(&spec, &QuestionnaireSchema::atec()).unwrap_err();
    assert_eq!(err.to_string(), "n_subjects must be ≥ 2, got 0");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn records_respect_bounds(seed in 0u64..100_000, n in 2usize..50) {
        let schema = QuestionnaireSchema::atec();
        let spec = CohortSpec { n_subjects: n, seed, ..CohortSpec::default() };
        let cohort = generate_cohort(&spec, &schema).unwrap();
        prop_assert_eq!(cohort.len(), n);
        for r in &cohort {
            prop_assert!(r.validate(&schema).is_ok());
            prop_assert!(r.after.date >= r.before.date);
            for (pos, (&b, &a)) in r.before.scores.iter().zip(&r.after.scores).enumerate() {
                let max = schema.max_score_at(pos);
                prop_assert!(b <= max && a <= max);
            }
            let age = r.age_at(r.before.date);
            prop_assert!((AGE_RANGE.0 - 0.01..=AGE_RANGE.1 + 0.01).contains(&age), "age {}", age);
        }
        prop_assert_eq!(&cohort, &generate_cohort(&spec, &schema).unwrap());
    }

    #[test]
    fn reduced_schemas_generate(seed in 0u64..1000, counts in prop::collection::vec(1usize..8, 1..6)) {
        let shape: Vec<(usize, u8)> = counts.iter().enumerate().map(|(i, &c)| (c, 2 + (i % 2) as u8)).collect();
        let schema = QuestionnaireSchema::uniform("r", &shape).unwrap();
        let spec = CohortSpec { n_subjects: 10, seed, ..CohortSpec::scaled_for(&schema) };
        for r in generate_cohort(&spec, &schema).unwrap() {
            prop_assert!(r.validate(&schema).is_ok());
        }
    }
}
