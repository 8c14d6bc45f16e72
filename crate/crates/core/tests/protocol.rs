//! Property tests for the data-handling and evaluation protocol invariants:
//! batching partitions, storage round trips, config stability, and
//! monotonicity of the retrieval metrics.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use neural_mcrl::config::{parse_config, TrainConfig};
use neural_mcrl::data::{
    generate_synthetic_dataset, load_dataset, load_embedding_table, make_batches,
    write_dataset, write_embedding_table, DatasetHandle, EmbeddingKind, EmbeddingTable,
    Split, SynthSpec, Trial,
};
use neural_mcrl::eval::zero_shot_classify;
use neural_mcrl::train::untrained_model;
use neural_mcrl::Tensor;

/// A dataset whose class populations follow `counts`; exemplar ids are
/// globally unique so trials can be compared as multisets.
fn handle_from_counts(counts: &[(u32, usize)], seed: u64) -> DatasetHandle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::new();
    let mut next_exemplar = 0u32;
    let mut classes = BTreeSet::new();
    for &(class_id, count) in counts {
        classes.insert(class_id);
        for _ in 0..count {
            trials.push(Trial {
                eeg: Tensor::randn(&[2, 8], 1.0, &mut rng).quantize_f32(),
                subject_id: (next_exemplar % 2) as usize,
                class_id,
                exemplar_id: next_exemplar,
            });
            next_exemplar += 1;
        }
    }
    DatasetHandle::new(trials, 2, 8, 64.0, classes, BTreeSet::new()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batching_partitions_the_split(
        raw_counts in proptest::collection::vec((0u32..24, 1usize..6), 1..8),
        batch_size in 1usize..10,
        seed in any::<u64>(),
        distinct in any::<bool>(),
    ) {
        // Collapse repeated class ids from the generator.
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for (c, n) in raw_counts {
            *counts.entry(c).or_default() += n;
        }
        let counts: Vec<(u32, usize)> = counts.into_iter().collect();
        let handle = handle_from_counts(&counts, seed);
        let n_classes = counts.len();
        let n_trials: usize = counts.iter().map(|&(_, n)| n).sum();

        let result = make_batches(&handle, batch_size, seed, distinct, Split::Seen);
        if distinct && batch_size > n_classes {
            prop_assert!(result.is_err(), "oversized distinct-class batches must be rejected");
            return Ok(());
        }
        let batches = result.unwrap();

        // Every trial appears exactly once, identified by its unique exemplar.
        let mut seen_exemplars: Vec<u32> =
            batches.iter().flat_map(|b| b.exemplar_ids.clone()).collect();
        seen_exemplars.sort_unstable();
        prop_assert_eq!(seen_exemplars, (0..n_trials as u32).collect::<Vec<_>>());

        for b in &batches {
            prop_assert!(b.len() <= batch_size, "batch of {} exceeds {batch_size}", b.len());
            if distinct {
                let unique: HashSet<u32> = b.class_ids.iter().copied().collect();
                prop_assert_eq!(unique.len(), b.class_ids.len(), "duplicate class in a batch");
            }
        }
    }

    #[test]
    fn dataset_storage_round_trip_is_exact(
        c in 1usize..5,
        l in 4usize..40,
        n in 1usize..16,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trials: Vec<Trial> = (0..n)
            .map(|i| Trial {
                eeg: Tensor::randn(&[c, l], 1.0, &mut rng).quantize_f32(),
                subject_id: i % 3,
                class_id: (i % 4) as u32,
                exemplar_id: i as u32,
            })
            .collect();
        let handle = DatasetHandle::new(
            trials,
            c,
            l,
            128.0,
            BTreeSet::from([0u32, 2]),
            BTreeSet::from([1u32, 3]),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&handle, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();

        prop_assert_eq!(loaded.channel_count(), c);
        prop_assert_eq!(loaded.window_length(), l);
        prop_assert_eq!(loaded.trials().len(), n);
        prop_assert_eq!(loaded.classes_in(Split::Seen), handle.classes_in(Split::Seen));
        prop_assert_eq!(loaded.classes_in(Split::Unseen), handle.classes_in(Split::Unseen));
        for (a, b) in handle.trials().iter().zip(loaded.trials()) {
            prop_assert_eq!(&a.eeg, &b.eeg);
            prop_assert_eq!(a.subject_id, b.subject_id);
            prop_assert_eq!(a.class_id, b.class_id);
            prop_assert_eq!(a.exemplar_id, b.exemplar_id);
        }
    }

    #[test]
    fn embedding_table_round_trip_is_exact(
        dim in 1usize..8,
        n_classes in 1usize..5,
        items in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = EmbeddingTable::new(dim, EmbeddingKind::Image, false);
        for class in 0..n_classes as u32 {
            for item in 0..items as u32 {
                let row = Tensor::randn(&[dim], 1.0, &mut rng).quantize_f32();
                table.insert(class, item, row.data().to_vec()).unwrap();
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.json");
        write_embedding_table(&table, &path).unwrap();
        let loaded = load_embedding_table(&path, Some(dim)).unwrap();

        prop_assert_eq!(loaded.dim(), dim);
        prop_assert_eq!(loaded.len(), table.len());
        for ((class, item), row) in table.iter() {
            prop_assert_eq!(loaded.get(class, item), Some(row));
        }
    }

    #[test]
    fn config_survives_serialize_and_reparse(
        learning_rate in 1e-6f64..1.0,
        batch_size in 1usize..256,
        eta in 0.0f64..=1.0,
        temperature in 0.01f64..2.0,
        seed in any::<u64>(),
        symmetric_nce in any::<bool>(),
    ) {
        let cfg = TrainConfig {
            learning_rate,
            batch_size,
            eta,
            temperature,
            seed,
            symmetric_nce,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let reparsed = parse_config(&path, &[]).unwrap();
        prop_assert_eq!(reparsed, cfg);
    }
}

/// One untrained model over the ten-class set: 100 unseen trials to rank.
fn eval_fixture() -> (Tensor, Vec<u32>, Vec<u32>, EmbeddingTable) {
    let spec = SynthSpec {
        n_classes: 10,
        trials_per_class_per_subject: 10,
        ..SynthSpec::default()
    };
    let (data, image, text) = generate_synthetic_dataset(&spec).unwrap();
    let cfg = TrainConfig { seed: 3, ..TrainConfig::default() };
    let model = untrained_model(&cfg, &data, &image, &text).unwrap();
    let (emb, classes, exemplars) = model.embed_split(&data, Split::Unseen).unwrap();
    let candidates = image.restricted_to(data.classes_in(Split::Unseen)).unwrap();
    (emb, classes, exemplars, candidates)
}

#[test]
fn top_k_accuracy_is_nondecreasing_in_k() {
    let (emb, classes, exemplars, candidates) = eval_fixture();
    for n_way in [2usize, 3, 5] {
        let ks: Vec<usize> = (1..=n_way).collect();
        let report = zero_shot_classify(
            &emb, &classes, &exemplars, &candidates, n_way, &ks, 17, false,
        )
        .unwrap();
        let accs: Vec<f64> = ks.iter().map(|k| report.metrics[k]).collect();
        for w in accs.windows(2) {
            assert!(w[0] <= w[1], "top-k accuracy decreased: {accs:?} at {n_way}-way");
        }
        assert_eq!(
            accs[n_way - 1], 1.0,
            "the true class is always inside its own panel"
        );
    }
}

#[test]
fn smaller_panels_win_at_least_as_often() {
    let (emb, classes, exemplars, candidates) = eval_fixture();
    let full = zero_shot_classify(
        &emb, &classes, &exemplars, &candidates, 5, &[1], 0, false,
    )
    .unwrap()
    .metrics[&1];

    // 5-way panels are subsets of the full 5-class panel only in the
    // degenerate sense; compare 3-way subsampling against the full panel:
    // dropping distractors can only remove classes that outranked the truth.
    let mut wins = 0;
    let replicates = 25;
    for seed in 0..replicates {
        let small = zero_shot_classify(
            &emb, &classes, &exemplars, &candidates, 3, &[1], seed, false,
        )
        .unwrap()
        .metrics[&1];
        if small >= full {
            wins += 1;
        }
    }
    assert!(
        wins >= 20,
        "3-way beat the full 5-way panel in only {wins}/{replicates} replicates"
    );
}
