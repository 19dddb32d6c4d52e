use fdivlab::synth::{
    generate_task, inject_noise, read_split_csv, write_split_csv, DataSplit, Sample, TaskSpec,
    TeacherNonlinearity, SPLIT_FILES,
};
use fdivlab::{Error, ProbVector};

fn default_split() -> DataSplit {
    generate_task(&TaskSpec::default()).unwrap().0
}

fn sets(split: &DataSplit) -> [&[Sample]; 3] {
    [
        &split.ground_truth_set,
        &split.weak_supervision_set,
        &split.test_set,
    ]
}

#[test]
fn same_seed_gives_identical_splits() {
    let a = generate_task(&TaskSpec::default()).unwrap();
    let b = generate_task(&TaskSpec::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn different_seeds_give_different_features() {
    let a = default_split();
    let b = generate_task(&TaskSpec {
        seed: 1,
        ..TaskSpec::default()
    })
    .unwrap()
    .0;
    assert_ne!(a.test_set[0].x, b.test_set[0].x);
}

#[test]
fn splits_are_sized_and_balanced() {
    for nonlinearity in [
        TeacherNonlinearity::QuadraticFeatures,
        TeacherNonlinearity::SignProduct,
        TeacherNonlinearity::Radial,
    ] {
        let spec = TaskSpec {
            teacher_nonlinearity: nonlinearity,
            ..TaskSpec::default()
        };
        let (split, teacher) = generate_task(&spec).unwrap();
        for set in sets(&split) {
            assert_eq!(set.len(), 4000);
            let positives = set.iter().filter(|s| s.class() == 0).count() as i64;
            assert!(
                (positives - 2000).abs() <= 1,
                "{nonlinearity:?}: {positives}"
            );
            for s in set {
                assert_eq!(s.x.len(), 20);
                let y = teacher.label(&s.x).unwrap();
                assert_eq!(y, s.y);
            }
        }
    }
}

#[test]
fn soft_label_fraction_is_moderate() {
    let split = default_split();
    for set in sets(&split) {
        let soft = set
            .iter()
            .filter(|s| (0.25..0.75).contains(&s.y.positive()))
            .count() as f64
            / set.len() as f64;
        assert!((0.15..=0.25).contains(&soft), "soft fraction {soft}");
    }
}

#[test]
fn splits_are_disjoint() {
    let split = default_split();
    let first: Vec<&Vec<f64>> = split.ground_truth_set.iter().map(|s| &s.x).collect();
    for s in split.weak_supervision_set.iter().chain(&split.test_set) {
        assert!(!first.contains(&&s.x));
    }
}

#[test]
fn odd_split_size_is_config_error() {
    let spec = TaskSpec {
        samples_per_split: 3999,
        ..TaskSpec::default()
    };
    assert!(matches!(generate_task(&spec), Err(Error::Config(_))));
}

#[test]
fn noise_flips_exact_count_and_is_an_involution_on_flipped() {
    let split = default_split();
    let labels: Vec<ProbVector> = split
        .weak_supervision_set
        .iter()
        .map(|s| s.y.clone())
        .collect();
    for (level, expected) in [(0.0, 0usize), (0.1, 400), (0.25, 1000), (0.5, 2000)] {
        let noisy = inject_noise(&labels, level, 7).unwrap();
        assert_eq!(noisy.flipped_indices.len(), expected);
        assert!(noisy.flipped_indices.windows(2).all(|w| w[0] < w[1]));
        for (i, (orig, new)) in labels.iter().zip(&noisy.labels).enumerate() {
            if noisy.flipped_indices.binary_search(&i).is_ok() {
                assert_eq!(new.complement().unwrap(), *orig);
                assert_eq!(new.positive(), 1.0 - orig.positive());
            } else {
                assert_eq!(new, orig);
            }
        }
        let mean = |v: &[ProbVector]| v.iter().map(|p| p.positive()).sum::<f64>() / v.len() as f64;
        assert!((mean(&noisy.labels) - mean(&labels)).abs() <= level + 1e-12);
        assert_eq!(noisy, inject_noise(&labels, level, 7).unwrap());
    }
    assert_ne!(
        inject_noise(&labels, 0.1, 7).unwrap().flipped_indices,
        inject_noise(&labels, 0.1, 8).unwrap().flipped_indices
    );
}

#[test]
fn noise_rejects_bad_inputs() {
    let labels = vec![ProbVector::binary(0.8).unwrap(); 10];
    assert!(matches!(
        inject_noise(&labels, 0.6, 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        inject_noise(&labels, -0.1, 0),
        Err(Error::Config(_))
    ));
    let three = vec![ProbVector::uniform(3).unwrap(); 4];
    assert!(matches!(
        inject_noise(&three, 0.1, 0),
        Err(Error::Unsupported(_))
    ));
}

#[test]
fn csv_round_trip_is_exact() {
    let spec = TaskSpec {
        samples_per_split: 200,
        ..TaskSpec::default()
    };
    let split = generate_task(&spec).unwrap().0;
    let dir = tempfile::tempdir().unwrap();
    write_split_csv(dir.path(), &split).unwrap();
    for name in SPLIT_FILES {
        assert!(dir.path().join(name).exists());
    }
    let back = read_split_csv(dir.path()).unwrap();
    assert_eq!(back, split);
    let header = std::fs::read_to_string(dir.path().join(SPLIT_FILES[2])).unwrap();
    assert!(header.starts_with("x0,x1,"));
    assert!(header.lines().next().unwrap().ends_with(",x19,y0,y1"));
}
