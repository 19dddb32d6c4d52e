use fdivlab::divergence::{
    divergence, divergence_gradient, divergence_gradient_wrt_reference, tv_distance,
};
use fdivlab::probdist::{clamp, softmax};
use fdivlab::theory::{pinsker_constant, pinsker_divergence};
use fdivlab::verify::closed_form;
use fdivlab::{DivergenceKind, Logits, ProbVector};
use proptest::prelude::*;

const EPS: f64 = 1e-6;

fn clamped(k: usize) -> impl Strategy<Value = ProbVector> {
    prop::collection::vec(-6.0f64..6.0, k)
        .prop_map(|z| clamp(&softmax(&Logits::new(z).unwrap()), EPS).unwrap())
}

fn pair() -> impl Strategy<Value = (ProbVector, ProbVector)> {
    (2usize..=10).prop_flat_map(|k| (clamped(k), clamped(k)))
}

fn kind() -> impl Strategy<Value = DivergenceKind> {
    prop::sample::select(DivergenceKind::ALL.to_vec())
}

fn trainable() -> impl Strategy<Value = DivergenceKind> {
    prop::sample::select(DivergenceKind::TRAINABLE.to_vec())
}

fn mixed_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

proptest! {
    #[test]
    fn nonnegative_and_matches_direct_sum((p, q) in pair(), kind in kind()) {
        let d = divergence(kind, &p, &q).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!(mixed_err(d, closed_form(kind, p.as_slice(), q.as_slice())) < 1e-10);
    }

    #[test]
    fn vanishes_on_identical_arguments(p in (2usize..=10).prop_flat_map(clamped), kind in kind()) {
        prop_assert!(divergence(kind, &p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn table_identities_hold((p, q) in pair()) {
        let kl = divergence(DivergenceKind::Kl, &p, &q).unwrap();
        let rkl = divergence(DivergenceKind::ReverseKl, &p, &q).unwrap();
        let jeffreys = divergence(DivergenceKind::Jeffreys, &p, &q).unwrap();
        prop_assert!(mixed_err(jeffreys, kl + rkl) < 1e-12);
        prop_assert!(mixed_err(rkl, divergence(DivergenceKind::Kl, &q, &p).unwrap()) < 1e-12);
        for sym in [DivergenceKind::JensenShannon, DivergenceKind::SquaredHellinger, DivergenceKind::TotalVariation] {
            let a = divergence(sym, &p, &q).unwrap();
            let b = divergence(sym, &q, &p).unwrap();
            prop_assert!(mixed_err(a, b) < 1e-12, "{sym}");
        }
        prop_assert_eq!(
            divergence(DivergenceKind::TotalVariation, &p, &q).unwrap(),
            tv_distance(&p, &q).unwrap()
        );
    }

    #[test]
    fn pinsker_holds((p, q) in pair(), kind in kind()) {
        let tv = tv_distance(&p, &q).unwrap();
        let d = pinsker_divergence(kind, p.as_slice(), q.as_slice()).unwrap();
        prop_assert!(tv <= pinsker_constant(kind) * d.sqrt() + 1e-12);
    }

    #[test]
    fn gradients_sum_to_zero(
        (z, q) in (2usize..=10).prop_flat_map(|k| (prop::collection::vec(-3.0f64..3.0, k), clamped(k))),
        kind in trainable(),
    ) {
        let logits = Logits::new(z).unwrap();
        for g in [
            divergence_gradient(kind, &logits, &q).unwrap(),
            divergence_gradient_wrt_reference(kind, &q, &logits).unwrap(),
        ] {
            let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-10 * scale);
        }
    }

    #[test]
    fn gradient_vanishes_at_the_reference(z in prop::collection::vec(-3.0f64..3.0, 2..=10), kind in trainable()) {
        let logits = Logits::new(z).unwrap();
        let q = softmax(&logits);
        for g in [
            divergence_gradient(kind, &logits, &q).unwrap(),
            divergence_gradient_wrt_reference(kind, &q, &logits).unwrap(),
        ] {
            prop_assert!(g.iter().all(|v| v.abs() < 1e-10));
        }
    }
}
