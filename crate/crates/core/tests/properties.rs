//! Randomized property checks for the spec-level invariants.

use hcd_core::array::Array;
use hcd_core::autodiff::Tape;
use hcd_core::data::{assign_hierarchy, kfold, split, Dataset, Interaction, QMatrix};
use hcd_core::metrics::{auc, doa, rmse, EvalRecord};
use proptest::prelude::*;

fn records_strategy() -> impl Strategy<Value = Vec<EvalRecord>> {
    // predictions on a coarse grid so ties occur; the first two records are
    // pinned to opposite classes so AUC is always defined
    proptest::collection::vec((0u8..10, any::<bool>()), 2..60).prop_map(|raw| {
        raw.iter()
            .enumerate()
            .map(|(i, &(grid, label))| {
                let label = match i {
                    0 => 1,
                    1 => 0,
                    _ => u8::from(label),
                };
                EvalRecord {
                    prediction: grid as f64 / 9.0,
                    label,
                    student: i,
                    exercise: 0,
                }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn softmax_rows_always_normalize(values in proptest::collection::vec(-40.0f64..40.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::from_vec(3, 4, values).unwrap());
        let y = tape.softmax_rows(x);
        for i in 0..3 {
            let s: f64 = tape.value(y).row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval(values in proptest::collection::vec(-1e6f64..1e6, 8)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::row_vec(values));
        let y = tape.sigmoid(x);
        prop_assert!(tape.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn conv1d_identity_kernel_is_identity(values in proptest::collection::vec(-5.0f64..5.0, 15)) {
        let input = Array::from_vec(5, 3, values).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let k = tape.leaf(Array::col_vec(vec![1.0]));
        let y = tape.conv1d_cols(x, k).unwrap();
        prop_assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms(records in records_strategy()) {
        let base = auc(&records).unwrap();
        // strictly increasing map of the predictions
        let transformed: Vec<EvalRecord> = records
            .iter()
            .map(|r| EvalRecord { prediction: (3.0 * r.prediction + 1.0).exp(), ..*r })
            .collect();
        let mapped = auc(&transformed).unwrap();
        prop_assert!((base - mapped).abs() < 1e-12, "{} vs {}", base, mapped);
    }

    #[test]
    fn auc_flips_under_anti_ranking(records in records_strategy()) {
        let base = auc(&records).unwrap();
        let flipped: Vec<EvalRecord> = records
            .iter()
            .map(|r| EvalRecord { prediction: 1.0 - r.prediction, ..*r })
            .collect();
        let anti = auc(&flipped).unwrap();
        prop_assert!((base + anti - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_bounded_on_unit_interval(records in records_strategy()) {
        let value = rmse(&records).unwrap();
        prop_assert!((0.0..=1.0).contains(&value));
    }

    #[test]
    fn fusion_is_convex(
        p in proptest::collection::vec(0.0f64..1.0, 5),
        h in proptest::collection::vec(0.0f64..1.0, 5),
        logit in -10.0f64..10.0,
    ) {
        let (theta, alpha) = hcd_core::cdm::fuse(&p, &h, logit);
        prop_assert!(alpha > 0.0 && alpha < 1.0);
        for j in 0..5 {
            prop_assert!(theta[j] >= p[j].min(h[j]) - 1e-12);
            prop_assert!(theta[j] <= p[j].max(h[j]) + 1e-12);
        }
    }
}

fn small_dataset(responses: &[u8], students: usize) -> Dataset {
    let m = 4;
    let interactions: Vec<Interaction> = responses
        .iter()
        .enumerate()
        .map(|(i, &r)| Interaction {
            student: i % students,
            exercise: i % m,
            response: r,
        })
        .collect();
    Dataset {
        n: students,
        m,
        k: 2,
        interactions,
        q: QMatrix::new(m, 2, vec![1, 0, 0, 1, 1, 1, 1, 0]).unwrap(),
        hierarchy: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_an_exact_partition(
        responses in proptest::collection::vec(0u8..2, 24..80),
        seed in any::<u64>(),
    ) {
        let ds = small_dataset(&responses, 6);
        let (a, b, c) = split(&ds, (0.7, 0.1, 0.2), seed).unwrap();
        let total = a.interactions.len() + b.interactions.len() + c.interactions.len();
        prop_assert_eq!(total, ds.interactions.len());

        let count = |its: &[Interaction]| {
            let mut map = std::collections::BTreeMap::new();
            for it in its {
                *map.entry((it.student, it.exercise, it.response)).or_insert(0usize) += 1;
            }
            map
        };
        let mut union = count(&a.interactions);
        for (key, v) in count(&b.interactions).into_iter().chain(count(&c.interactions)) {
            *union.entry(key).or_insert(0) += v;
        }
        prop_assert_eq!(union, count(&ds.interactions));

        // deterministic under the seed
        let (a2, _, _) = split(&ds, (0.7, 0.1, 0.2), seed).unwrap();
        prop_assert_eq!(a.interactions, a2.interactions);
    }

    #[test]
    fn kfold_covers_every_interaction_once(
        responses in proptest::collection::vec(0u8..2, 12..60),
        seed in any::<u64>(),
    ) {
        let ds = small_dataset(&responses, 4);
        let folds = kfold(&ds, 3, seed).unwrap();
        let mut valid_total = 0usize;
        for (train, valid) in &folds {
            prop_assert_eq!(
                train.interactions.len() + valid.interactions.len(),
                ds.interactions.len()
            );
            valid_total += valid.interactions.len();
        }
        prop_assert_eq!(valid_total, ds.interactions.len());
    }

    #[test]
    fn hierarchy_assignment_is_total_and_order_invariant(
        responses in proptest::collection::vec(0u8..2, 30..90),
        g in 1usize..6,
    ) {
        let mut ds = small_dataset(&responses, 5);
        // make sure every student answered something
        for s in 0..5 {
            ds.interactions.push(Interaction { student: s, exercise: 0, response: 1 });
        }
        let h = assign_hierarchy(&ds, g).unwrap();
        prop_assert_eq!(h.levels.len(), 5);
        prop_assert!(h.levels.iter().all(|&l| l < g));

        let mut reversed = ds.clone();
        reversed.interactions.reverse();
        let h2 = assign_hierarchy(&reversed, g).unwrap();
        prop_assert_eq!(h.levels, h2.levels);
    }

    #[test]
    fn doa_is_invariant_under_per_concept_monotone_transforms(
        responses in proptest::collection::vec(0u8..2, 40..80),
        raw in proptest::collection::vec(0.01f64..0.99, 12),
    ) {
        let ds = small_dataset(&responses, 6);
        let prof = Array::from_vec(6, 2, raw.into_iter().take(12).collect()).unwrap();
        let transformed = Array::from_vec(
            6,
            2,
            (0..6)
                .flat_map(|s| {
                    let a = (prof.get(s, 0) * 4.0).exp();
                    let b = prof.get(s, 1).powi(3);
                    [a, b]
                })
                .collect(),
        )
        .unwrap();
        match (doa(&prof, &ds), doa(&transformed, &ds)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "defined-ness diverged: {:?} vs {:?}", a, b),
        }
    }
}
