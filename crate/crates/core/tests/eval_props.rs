mod common;

use common::{normal, rng};
use densefew::data::{generate_glyphs, Dataset, GlyphConfig, Split, SplitManifest};
use densefew::episodes::{evaluate, evaluate_implanted, sample_tasks, EvalConfig, EvalReport, QueryMode};
use densefew::implant::ImplantConfig;
use densefew::models::{ArchKind, ArchitectureConfig, FeatureMap, Model, Pooling};
use proptest::prelude::*;
use rand::Rng as _;

fn run_with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

/// Pool of example indices per class, for the given class ids of a dataset.
fn pool(data: &Dataset, classes: &[usize]) -> Vec<Vec<usize>> {
    let per = data.class_indices();
    classes.iter().map(|&c| per[c].clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tasks_keep_support_and_query_apart(
        classes in 5usize..12,
        per in 12usize..20,
        way in 2usize..6,
        shot in 1usize..5,
        queries in 1usize..6,
        seed in any::<u64>(),
    ) {
        let pool: Vec<Vec<usize>> = (0..classes).map(|c| (c * per..(c + 1) * per).collect()).collect();
        let tasks = sample_tasks(&pool, way, shot, queries, 4, seed).unwrap();
        for t in &tasks {
            prop_assert_eq!(t.support.len(), way * shot);
            prop_assert_eq!(t.query.len(), way * queries);
            for s in &t.support {
                prop_assert!(!t.query.contains(s));
            }
            let mut cls = t.classes.clone();
            cls.sort();
            cls.dedup();
            prop_assert_eq!(cls.len(), way);
            for (&i, &y) in t.support.iter().chain(&t.query).zip(t.support_labels.iter().chain(&t.query_labels)) {
                prop_assert!(pool[t.classes[y]].contains(&i));
            }
        }
    }

    #[test]
    fn standard_splits_partition_classes(classes in 5usize..80) {
        let m = SplitManifest::standard(classes);
        let mut seen = vec![0usize; classes];
        for split in [Split::Base, Split::Val, Split::Novel] {
            for c in m.classes(split) {
                seen[c] += 1;
                prop_assert_eq!(m.split_of(c), Some(split));
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        let back = SplitManifest::parse(&m.to_string()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn machine_report_round_trips(accs in proptest::collection::vec(0.0f64..=1.0, 0..50)) {
        let r = EvalReport::from_accuracies(accs);
        prop_assert_eq!(EvalReport::parse_machine(&r.to_machine()).unwrap(), r);
    }
}

#[test]
fn novel_tasks_never_touch_base_classes() {
    let data = generate_glyphs(&GlyphConfig {
        classes: 10,
        per_class: 12,
        height: 8,
        width: 8,
        ..GlyphConfig::default()
    })
    .unwrap();
    let m = SplitManifest::standard(10);
    let novel = m.classes(Split::Novel);
    let tasks = sample_tasks(&pool(&data, &novel), 2, 3, 4, 50, 9).unwrap();
    for t in &tasks {
        for &i in t.support.iter().chain(&t.query) {
            assert_eq!(m.split_of(data.labels[i]), Some(Split::Novel));
        }
    }
}

#[test]
fn pixels_in_range_and_normalization_recorded() {
    let data = generate_glyphs(&GlyphConfig {
        classes: 4,
        per_class: 10,
        height: 12,
        width: 12,
        ..GlyphConfig::default()
    })
    .unwrap();
    assert!(data.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let norm = data.norm.clone().expect("generator records statistics");
    assert_eq!(norm, data.compute_normalization());
    let back = Dataset::from_bytes(&data.to_bytes()).unwrap();
    assert_eq!(back.norm, Some(norm));
    let x = back.normalized_images();
    let c = 3;
    for k in 0..c {
        let vals: Vec<f64> = x.data().iter().skip(k).step_by(c).copied().collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn half_width_shrinks_as_inverse_sqrt_of_tasks() {
    let mean_width = |t: usize| -> f64 {
        let reps = 200;
        (0..reps)
            .map(|rep| {
                let mut r = rng(21, (t * 1000 + rep) as u64);
                let accs = (0..t)
                    .map(|_| (0..75).filter(|_| r.random_bool(0.6)).count() as f64 / 75.0)
                    .collect();
                EvalReport::from_accuracies(accs).half_width
            })
            .sum::<f64>()
            / reps as f64
    };
    for t in [100, 300, 600] {
        let ratio = mean_width(t) / mean_width(2 * t);
        assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.05, "T={t}: ratio {ratio}");
    }
}

#[test]
fn evaluation_is_independent_of_thread_count() {
    let maps: Vec<FeatureMap> = (0..60)
        .map(|i| {
            let t = normal(&mut rng(31, i), &[2 * 2 * 6]);
            FeatureMap::new(2, 2, 6, t.into_data()).unwrap()
        })
        .collect();
    let pool: Vec<Vec<usize>> = (0..6).map(|c| (c * 10..(c + 1) * 10).collect()).collect();
    let tasks = sample_tasks(&pool, 5, 2, 3, 40, 4).unwrap();
    for cfg in [
        EvalConfig::default(),
        EvalConfig {
            query: QueryMode::Pooled(Pooling::Gap),
            ..EvalConfig::default()
        },
        EvalConfig {
            support_pool: Pooling::Gmp,
            query: QueryMode::Pooled(Pooling::Gmp),
            ..EvalConfig::default()
        },
    ] {
        let one = run_with_threads(1, || evaluate(&maps, &tasks, &cfg).unwrap());
        let four = run_with_threads(4, || evaluate(&maps, &tasks, &cfg).unwrap());
        assert_eq!(one, four);
    }

    let model = Model::new(
        ArchitectureConfig::width_div(ArchKind::ResNet12, 16, [16, 16, 3]).unwrap(),
        2,
    )
    .unwrap();
    let images = normal(&mut rng(32, 0), &[24, 16, 16, 3]);
    let pool: Vec<Vec<usize>> = (0..4).map(|c| (c * 6..(c + 1) * 6).collect()).collect();
    let tasks = sample_tasks(&pool, 3, 2, 2, 3, 5).unwrap();
    let icfg = ImplantConfig {
        channels: 4,
        epochs: 2,
        ..ImplantConfig::default()
    };
    let one = run_with_threads(1, || {
        evaluate_implanted(&model, &images, &tasks, &icfg, &EvalConfig::default()).unwrap()
    });
    let three = run_with_threads(3, || {
        evaluate_implanted(&model, &images, &tasks, &icfg, &EvalConfig::default()).unwrap()
    });
    assert_eq!(one, three);
}
