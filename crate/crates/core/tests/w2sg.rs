use fdivlab::nnet::{sample_loss, Backbone};
use fdivlab::probdist::harden;
use fdivlab::rng::{standard_normal, stream};
use fdivlab::synth::{generate_task, DataSplit, Sample, TaskSpec};
use fdivlab::verify::{finite_difference, gradient_error, FD_TOLERANCE};
use fdivlab::w2sg::{
    accuracy, aux_loss, aux_loss_with, beta_schedule, evaluate, new_student, run_on_split,
    train_strong, train_strong_with_history, train_supervised, train_weak, weak_label, TrainConfig,
    EVAL_THRESHOLD,
};
use fdivlab::{DivergenceKind, Error, Logits, Loss, ModelPredictor, ProbVector};
use rand::seq::SliceRandom;
use std::sync::OnceLock;

fn default_split() -> &'static DataSplit {
    static SPLIT: OnceLock<DataSplit> = OnceLock::new();
    SPLIT.get_or_init(|| generate_task(&TaskSpec::default()).unwrap().0)
}

fn true_labels(set: &[Sample]) -> Vec<ProbVector> {
    set.iter().map(|s| s.y.clone()).collect()
}

fn toy_samples(n: usize, seed: u64, label: impl Fn(&[f64]) -> f64) -> Vec<Sample> {
    let mut rng = stream(seed);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..2).map(|_| standard_normal(&mut rng)).collect();
            let y = ProbVector::binary(label(&x)).unwrap();
            Sample { x, y }
        })
        .collect()
}

fn linear_weak() -> TrainConfig {
    TrainConfig {
        weak_quantization: 0.0,
        ..TrainConfig::default()
    }
}

#[test]
fn weak_teacher_fits_a_separable_toy_split() {
    let set = toy_samples(400, 1, |x| {
        1.0 / (1.0 + (-20.0 * (x[0] - 0.5 * x[1])).exp())
    });
    let split = DataSplit {
        ground_truth_set: set.clone(),
        weak_supervision_set: set.clone(),
        test_set: set,
    };
    let cfg = TrainConfig {
        weak_epochs: 20,
        weak_learning_rate: 1e-2,
        ..linear_weak()
    };
    let weak = train_weak(&split, &cfg).unwrap();
    let acc = accuracy(&weak, &split.ground_truth_set).unwrap();
    assert!(acc > 0.95, "train accuracy {acc}");
}

#[test]
fn weak_teacher_is_deterministic_and_imperfect() {
    let split = default_split();
    let cfg = TrainConfig::default();
    let a = train_weak(split, &cfg).unwrap();
    assert_eq!(a, train_weak(split, &cfg).unwrap());
    let acc = accuracy(&a, &split.test_set).unwrap();
    assert!(acc > 0.5 && acc < 1.0, "weak test accuracy {acc}");
    let other = train_weak(split, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn empty_ground_truth_split_is_rejected() {
    let mut split = default_split().clone();
    split.ground_truth_set.clear();
    assert!(matches!(
        train_weak(&split, &TrainConfig::default()),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn zero_head_teacher_labels_are_uniform() {
    let split = default_split();
    let teacher = ModelPredictor::linear(20, 2);
    let labels = weak_label(&teacher, split).unwrap();
    assert_eq!(labels.len(), split.weak_supervision_set.len());
    assert!(labels.iter().all(|p| p.as_slice() == [0.5, 0.5]));
}

#[test]
fn weak_labels_are_clamped_distributions() {
    let split = default_split();
    let teacher = train_weak(split, &TrainConfig::default()).unwrap();
    for p in weak_label(&teacher, split).unwrap() {
        assert!(p.as_slice().iter().all(|v| (1e-6..=1.0 - 1e-6).contains(v)));
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn overfit_point_gets_its_hardened_label() {
    let point = Sample {
        x: vec![0.8, -1.3],
        y: ProbVector::binary(0.3).unwrap(),
    };
    let split = DataSplit {
        ground_truth_set: vec![point.clone()],
        weak_supervision_set: vec![point.clone()],
        test_set: vec![point.clone()],
    };
    let cfg = TrainConfig {
        weak_learning_rate: 1.0,
        weak_epochs: 2000,
        ..linear_weak()
    };
    let teacher = train_weak(&split, &cfg).unwrap();
    let label = &weak_label(&teacher, &split).unwrap()[0];
    let hard = harden(&point.y, EVAL_THRESHOLD).unwrap().one_hot();
    for (p, h) in label.as_slice().iter().zip(hard) {
        assert!((p - h).abs() <= cfg.clamp_eps * (1.0 + 1e-9), "{label:?}");
    }
}

#[test]
fn aux_with_full_weight_is_cross_entropy_against_the_weak_label() {
    let mut rng = stream(3);
    for _ in 0..50 {
        let z: Vec<f64> = (0..2).map(|_| 2.0 * standard_normal(&mut rng)).collect();
        let logits = Logits::new(z.clone()).unwrap();
        let weak = ProbVector::binary(1.0 / (1.0 + (-standard_normal(&mut rng)).exp())).unwrap();
        let a = aux_loss_with(
            Loss::Divergence(DivergenceKind::Kl),
            &weak,
            &logits,
            0.5,
            1.0,
            1e-6,
        )
        .unwrap();
        let (kl, gkl) = sample_loss(
            Loss::Divergence(DivergenceKind::Kl),
            &z,
            weak.as_slice(),
            1e-6,
        )
        .unwrap();
        let entropy: f64 = -weak.as_slice().iter().map(|p| p * p.ln()).sum::<f64>();
        let pred = fdivlab::probdist::softmax(&logits);
        let ce = aux_loss(&weak, &pred, 0.5, 1.0).unwrap();
        assert!((ce.value - (kl + entropy)).abs() < 1e-10);
        for ((a, b), c) in a.gradient.iter().zip(&gkl).zip(&ce.gradient) {
            assert!((a - b).abs() < 1e-10 && (a - c).abs() < 1e-10);
        }
    }
}

#[test]
fn aux_gradient_matches_finite_differences() {
    let mut rng = stream(4);
    let mut cases = 0;
    while cases < 50 {
        let z: Vec<f64> = (0..2).map(|_| 1.5 * standard_normal(&mut rng)).collect();
        let p1 = fdivlab::probdist::softmax(&Logits::new(z.clone()).unwrap()).positive();
        if (p1 - 0.5).abs() < 1e-3 {
            continue;
        }
        let weak = ProbVector::binary(0.05 + 0.9 * (0.5 + 0.3 * standard_normal(&mut rng).tanh()))
            .unwrap();
        let beta = 0.5 * (1.0 + standard_normal(&mut rng).tanh());
        for kind in DivergenceKind::TRAINABLE {
            let loss = Loss::Divergence(kind);
            let eval = |z: &[f64]| {
                aux_loss_with(
                    loss,
                    &weak,
                    &Logits::new(z.to_vec()).unwrap(),
                    0.5,
                    beta,
                    1e-6,
                )
                .unwrap()
            };
            let err = gradient_error(
                &eval(&z).gradient,
                &finite_difference(&z, |z| eval(z).value),
            );
            assert!(err < FD_TOLERANCE, "{kind}: {err:e}");
        }
        cases += 1;
    }
}

#[test]
fn aux_at_first_iteration_only_optimizes_confidence() {
    let beta = beta_schedule(0, 250, 0.5, 0.5);
    assert_eq!(beta, 0.0);
    let weak = ProbVector::binary(0.9).unwrap();
    let logits = Logits::new(vec![0.2, -0.4]).unwrap();
    let a = aux_loss_with(
        Loss::Divergence(DivergenceKind::SquaredHellinger),
        &weak,
        &logits,
        0.5,
        beta,
        1e-6,
    )
    .unwrap();
    assert_eq!(a.value, a.confidence);
    assert!(a.supervision > 0.0);
}

#[test]
fn aux_rejects_non_binary_inputs() {
    let weak = ProbVector::uniform(3).unwrap();
    let student = ProbVector::uniform(3).unwrap();
    assert!(matches!(
        aux_loss(&weak, &student, 0.5, 0.5),
        Err(Error::Unsupported(_))
    ));
}

#[test]
fn kl_and_cross_entropy_training_trajectories_coincide() {
    let split = default_split();
    let weak = train_weak(split, &TrainConfig::default()).unwrap();
    let labels = weak_label(&weak, split).unwrap();
    for full_finetune in [false, true] {
        let cfg = |loss_kind| TrainConfig {
            loss_kind,
            full_finetune,
            ..TrainConfig::default()
        };
        let kl = train_strong(split, &labels, &cfg(Loss::Divergence(DivergenceKind::Kl))).unwrap();
        let ce = train_strong(split, &labels, &cfg(Loss::CrossEntropy)).unwrap();
        let diff = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        };
        assert!(diff(&kl.head.weights, &ce.head.weights) < 1e-10);
        assert!(diff(&kl.head.bias, &ce.head.bias) < 1e-10);
        if let (Backbone::Random(a), Backbone::Random(b)) = (&kl.backbone, &ce.backbone) {
            assert!(diff(&a.projection, &b.projection) < 1e-10);
            assert!(diff(&a.offset, &b.offset) < 1e-10);
        }
    }
}

#[test]
fn head_only_training_leaves_the_backbone_untouched() {
    let split = default_split();
    let labels = true_labels(&split.weak_supervision_set);
    let cfg = TrainConfig::default();
    let trained = train_strong(split, &labels, &cfg).unwrap();
    let fresh = new_student(20, &cfg).unwrap();
    assert_eq!(trained.backbone, fresh.backbone);
    assert_ne!(trained.head, fresh.head);
    assert_eq!(trained, train_strong(split, &labels, &cfg).unwrap());
}

#[test]
fn misaligned_weak_labels_are_rejected() {
    let split = default_split();
    let labels = vec![ProbVector::uniform(2).unwrap(); 10];
    assert!(matches!(
        train_strong(split, &labels, &TrainConfig::default()),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn total_variation_training_is_rejected() {
    let split = default_split();
    let labels = true_labels(&split.weak_supervision_set);
    let cfg = TrainConfig {
        loss_kind: Loss::Divergence(DivergenceKind::TotalVariation),
        ..TrainConfig::default()
    };
    assert!(train_strong(split, &labels, &cfg).is_err());
}

#[test]
fn strong_model_beats_weak_model_on_true_labels() {
    let split = default_split();
    let labels = true_labels(&split.weak_supervision_set);
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let mut weak = ModelPredictor::quantized_linear(20, cfg.weak_quantization, 2).unwrap();
    train_supervised(&mut weak, &split.weak_supervision_set, &labels, &cfg).unwrap();
    let mut strong = new_student(20, &cfg).unwrap();
    train_supervised(&mut strong, &split.weak_supervision_set, &labels, &cfg).unwrap();
    let (w, s) = (
        accuracy(&weak, &split.test_set).unwrap(),
        accuracy(&strong, &split.test_set).unwrap(),
    );
    assert!(s >= w, "strong {s} < weak {w}");
    let mut linear = ModelPredictor::linear(20, 2);
    train_supervised(&mut linear, &split.weak_supervision_set, &labels, &cfg).unwrap();
    let l = accuracy(&linear, &split.test_set).unwrap();
    assert!(s >= l, "strong {s} < linear {l}");
}

#[test]
fn training_objective_decreases() {
    let split = default_split();
    let weak = train_weak(split, &TrainConfig::default()).unwrap();
    let labels = weak_label(&weak, split).unwrap();
    for kind in DivergenceKind::TRAINABLE {
        let cfg = TrainConfig {
            loss_kind: Loss::Divergence(kind),
            ..TrainConfig::default()
        };
        let (_, history) = train_strong_with_history(split, &labels, &cfg, 10).unwrap();
        assert!(history.len() >= 2);
        let (first, last) = (&history[0], history.last().unwrap());
        assert_eq!(first.step, 0);
        assert!(
            last.disagreement < first.disagreement,
            "{kind}: {history:?}"
        );
        assert!(last.objective < first.objective, "{kind}");
    }
}

#[test]
fn identical_models_have_zero_disagreement() {
    let split = default_split();
    let weak = train_weak(split, &TrainConfig::default()).unwrap();
    for kind in DivergenceKind::TRAINABLE {
        let e = evaluate(&weak, &weak.clone(), split, kind).unwrap();
        assert_eq!(e.strong_weak.value, 0.0);
        assert_eq!(e.weak_test_accuracy, e.strong_test_accuracy);
        assert_eq!(e.bound.lhs, 0.0);
        assert!(e.bound.holds());
    }
}

#[test]
fn guessing_independently_of_the_labels_is_near_one_half() {
    let split = default_split();
    let weak = train_weak(split, &TrainConfig::default()).unwrap();
    let mut labels = true_labels(&split.test_set);
    labels.shuffle(&mut stream(100));
    let shuffled: Vec<Sample> = split
        .test_set
        .iter()
        .zip(labels)
        .map(|(s, y)| Sample { x: s.x.clone(), y })
        .collect();
    let acc = accuracy(&weak, &shuffled).unwrap();
    assert!((acc - 0.5).abs() <= 0.02, "accuracy {acc}");
}

#[test]
fn pipeline_is_deterministic_and_well_formed() {
    let split = default_split();
    let cfg = TrainConfig {
        loss_kind: Loss::Divergence(DivergenceKind::JensenShannon),
        aux_enabled: true,
        seed: 3,
        ..TrainConfig::default()
    };
    let a = run_on_split(split, &cfg, 0.2).unwrap();
    let b = run_on_split(split, &cfg, 0.2).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_eq!(a.flipped, 800);
    for acc in [a.weak_test_accuracy, a.strong_test_accuracy] {
        assert!((0.0..=1.0).contains(&acc));
    }
    for d in [a.strong_weak, a.weak_truth, a.strong_truth] {
        assert!(d.value >= 0.0);
    }
    assert!(a.bound.holds());
    assert_eq!(a.bound_residual, a.bound.residual);
}
