//! f-divergences over finite categorical supports.
//!
//! `D_f(P || Q) = Σ_i q_i f(p_i / q_i)` for a convex generator `f` with
//! `f(1) = 0`. All logarithms are natural, so values are in nats.
//!
//! | kind | f(x) | f'(x) |
//! |---|---|---|
//! | KL | x ln x | ln x + 1 |
//! | reverse KL | -ln x | -1/x |
//! | Jensen-Shannon | ½(x ln x - (x+1) ln((x+1)/2)) | ½ ln(2x/(x+1)) |
//! | Jeffreys | (x-1) ln x | ln x + 1 - 1/x |
//! | squared Hellinger | 1 - √x | -1/(2√x) |
//! | Pearson χ² | (x-1)² | 2(x-1) |
//! | total variation | ½\|x-1\| | (not differentiable at 1) |
//!
//! Total variation is available as a metric only; every operation that needs
//! a derivative rejects it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probdist::{ensure_same_k, softmax_slice, Logits, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceKind {
    #[serde(alias = "kl")]
    Kl,
    #[serde(alias = "rkl")]
    ReverseKl,
    #[serde(alias = "js")]
    JensenShannon,
    Jeffreys,
    #[serde(alias = "hellinger")]
    SquaredHellinger,
    #[serde(alias = "chi2")]
    PearsonChi2,
    #[serde(alias = "tv")]
    TotalVariation,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 7] = [
        DivergenceKind::Kl,
        DivergenceKind::ReverseKl,
        DivergenceKind::JensenShannon,
        DivergenceKind::Jeffreys,
        DivergenceKind::SquaredHellinger,
        DivergenceKind::PearsonChi2,
        DivergenceKind::TotalVariation,
    ];

    /// The six differentiable kinds usable as training losses.
    pub const TRAINABLE: [DivergenceKind; 6] = [
        DivergenceKind::Kl,
        DivergenceKind::ReverseKl,
        DivergenceKind::JensenShannon,
        DivergenceKind::Jeffreys,
        DivergenceKind::SquaredHellinger,
        DivergenceKind::PearsonChi2,
    ];

    pub fn is_trainable(self) -> bool {
        self != DivergenceKind::TotalVariation
    }

    /// Short display name used in tables and CSV output.
    pub fn short_name(self) -> &'static str {
        match self {
            DivergenceKind::Kl => "KL",
            DivergenceKind::ReverseKl => "RKL",
            DivergenceKind::JensenShannon => "JS",
            DivergenceKind::Jeffreys => "Jeffreys",
            DivergenceKind::SquaredHellinger => "Hellinger",
            DivergenceKind::PearsonChi2 => "Chi2",
            DivergenceKind::TotalVariation => "TV",
        }
    }

    /// Generator `f(x)`.
    pub fn generator(self, x: f64) -> Result<f64> {
        check_positive(x)?;
        Ok(self.generator_unchecked(x))
    }

    /// Generator derivative `f'(x)`.
    pub fn generator_derivative(self, x: f64) -> Result<f64> {
        self.ensure_differentiable()?;
        check_positive(x)?;
        Ok(self.derivative_unchecked(x))
    }

    /// Second derivative `f''(x)`, positive for every differentiable kind.
    pub fn generator_second_derivative(self, x: f64) -> Result<f64> {
        self.ensure_differentiable()?;
        check_positive(x)?;
        Ok(match self {
            DivergenceKind::Kl => 1.0 / x,
            DivergenceKind::ReverseKl => 1.0 / (x * x),
            DivergenceKind::JensenShannon => 0.5 / (x * (x + 1.0)),
            DivergenceKind::Jeffreys => 1.0 / x + 1.0 / (x * x),
            DivergenceKind::SquaredHellinger => 0.25 / (x * x.sqrt()),
            DivergenceKind::PearsonChi2 => 2.0,
            DivergenceKind::TotalVariation => unreachable!(),
        })
    }

    pub(crate) fn ensure_differentiable(self) -> Result<()> {
        if self.is_trainable() {
            Ok(())
        } else {
            Err(Error::Unsupported(
                "total variation is not differentiable at ratio 1".into(),
            ))
        }
    }

    pub(crate) fn generator_unchecked(self, x: f64) -> f64 {
        match self {
            DivergenceKind::Kl => x * x.ln(),
            DivergenceKind::ReverseKl => -x.ln(),
            DivergenceKind::JensenShannon => {
                0.5 * (x * x.ln() - (x + 1.0) * ((x + 1.0) / 2.0).ln())
            }
            DivergenceKind::Jeffreys => (x - 1.0) * x.ln(),
            DivergenceKind::SquaredHellinger => 1.0 - x.sqrt(),
            DivergenceKind::PearsonChi2 => (x - 1.0) * (x - 1.0),
            DivergenceKind::TotalVariation => 0.5 * (x - 1.0).abs(),
        }
    }

    pub(crate) fn derivative_unchecked(self, x: f64) -> f64 {
        match self {
            DivergenceKind::Kl => x.ln() + 1.0,
            DivergenceKind::ReverseKl => -1.0 / x,
            DivergenceKind::JensenShannon => 0.5 * (2.0 * x / (x + 1.0)).ln(),
            DivergenceKind::Jeffreys => x.ln() + 1.0 - 1.0 / x,
            DivergenceKind::SquaredHellinger => -0.5 / x.sqrt(),
            DivergenceKind::PearsonChi2 => 2.0 * (x - 1.0),
            DivergenceKind::TotalVariation => unreachable!("checked by callers"),
        }
    }

    /// `f(x) - x f'(x)`: the derivative of `q f(p/q)` with respect to `q`.
    pub(crate) fn reference_slope(self, x: f64) -> f64 {
        match self {
            DivergenceKind::Kl => -x,
            DivergenceKind::ReverseKl => 1.0 - x.ln(),
            DivergenceKind::JensenShannon => 0.5 * (2.0 / (x + 1.0)).ln(),
            DivergenceKind::Jeffreys => 1.0 - x - x.ln(),
            DivergenceKind::SquaredHellinger => 1.0 - 0.5 * x.sqrt(),
            DivergenceKind::PearsonChi2 => 1.0 - x * x,
            DivergenceKind::TotalVariation => unreachable!("checked by callers"),
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.to_ascii_lowercase().as_str() {
            "kl" => DivergenceKind::Kl,
            "rkl" | "reverse-kl" | "reversekl" => DivergenceKind::ReverseKl,
            "js" | "jensen-shannon" | "jensenshannon" => DivergenceKind::JensenShannon,
            "jeffreys" => DivergenceKind::Jeffreys,
            "hellinger" | "squared-hellinger" | "squaredhellinger" => {
                DivergenceKind::SquaredHellinger
            }
            "chi2" | "pearson-chi2" | "pearsonchi2" => DivergenceKind::PearsonChi2,
            "tv" | "total-variation" | "totalvariation" => DivergenceKind::TotalVariation,
            other => return Err(Error::InvalidInput(format!("unknown divergence '{other}'"))),
        };
        Ok(kind)
    }
}

fn check_positive(x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "generator argument must be finite and positive, got {x}"
        )))
    }
}

pub fn generator_value(kind: DivergenceKind, x: f64) -> Result<f64> {
    kind.generator(x)
}

pub fn generator_derivative(kind: DivergenceKind, x: f64) -> Result<f64> {
    kind.generator_derivative(x)
}

/// Total variation distance `½ Σ |p_i - q_i|`.
pub fn tv_distance(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    ensure_same_k(p, q)?;
    Ok(tv_slice(p.as_slice(), q.as_slice()))
}

fn tv_slice(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `D_f(p || q)`.
///
/// Every entry of both arguments must be positive (clamp first); total
/// variation accepts any pair.
pub fn divergence(kind: DivergenceKind, p: &ProbVector, q: &ProbVector) -> Result<f64> {
    ensure_same_k(p, q)?;
    divergence_slice(kind, p.as_slice(), q.as_slice())
}

pub(crate) fn divergence_slice(kind: DivergenceKind, p: &[f64], q: &[f64]) -> Result<f64> {
    if kind == DivergenceKind::TotalVariation {
        return Ok(tv_slice(p, q));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if !(pi > 0.0 && qi > 0.0) {
            return Err(Error::Domain(format!(
                "{kind} needs strictly positive entries, got p = {pi}, q = {qi}"
            )));
        }
        total += qi * kind.generator_unchecked(pi / qi);
    }
    // Rounding can leave a tiny negative value for nearly equal arguments.
    Ok(total.max(0.0))
}

/// Gradient of `D_f(softmax(p_logits) || q)` with respect to `p_logits`.
pub fn divergence_gradient(
    kind: DivergenceKind,
    p_logits: &Logits,
    q: &ProbVector,
) -> Result<Vec<f64>> {
    kind.ensure_differentiable()?;
    let p = softmax_slice(p_logits.as_slice());
    if p.len() != q.k() {
        return Err(Error::Shape {
            expected: q.k(),
            found: p.len(),
        });
    }
    let mut slopes = Vec::with_capacity(p.len());
    for (&pi, &qi) in p.iter().zip(q.as_slice()) {
        if !(pi > 0.0 && qi > 0.0) {
            return Err(Error::Domain(format!(
                "gradient needs strictly positive probabilities, got p = {pi}, q = {qi}"
            )));
        }
        slopes.push(kind.derivative_unchecked(pi / qi));
    }
    Ok(softmax_backward(&p, &slopes))
}

/// Gradient of `D_f(p || softmax(q_logits))` with respect to `q_logits`.
///
/// This is the slot a model occupies when it is trained against a fixed
/// target distribution `p`; for KL it reduces to the cross-entropy gradient
/// `softmax(q_logits) - p`.
pub fn divergence_gradient_wrt_reference(
    kind: DivergenceKind,
    p: &ProbVector,
    q_logits: &Logits,
) -> Result<Vec<f64>> {
    let q = softmax_slice(q_logits.as_slice());
    if q.len() != p.k() {
        return Err(Error::Shape {
            expected: p.k(),
            found: q.len(),
        });
    }
    reference_gradient_from_probs(kind, p.as_slice(), &q)
}

/// Same as [`divergence_gradient_wrt_reference`] with the softmax output given.
pub(crate) fn reference_gradient_from_probs(
    kind: DivergenceKind,
    target: &[f64],
    q: &[f64],
) -> Result<Vec<f64>> {
    kind.ensure_differentiable()?;
    let mut slopes = Vec::with_capacity(q.len());
    for (&ti, &qi) in target.iter().zip(q) {
        if !(ti > 0.0 && qi > 0.0) {
            return Err(Error::Domain(format!(
                "gradient needs strictly positive probabilities, got p = {ti}, q = {qi}"
            )));
        }
        slopes.push(kind.reference_slope(ti / qi));
    }
    Ok(softmax_backward(q, &slopes))
}

/// Pulls `dL/dprobs` back through the softmax Jacobian.
pub(crate) fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let mean: f64 = probs.iter().zip(dprobs).map(|(p, d)| p * d).sum();
    probs
        .iter()
        .zip(dprobs)
        .map(|(p, d)| p * (d - mean))
        .collect()
}

/// Empirical disagreement `R̂_f(g, h)` between two prediction lists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisagreementEstimate {
    pub kind: DivergenceKind,
    pub value: f64,
    pub n: usize,
}

/// Mean of `D_f(g_j || h_j)` over paired predictions, summed in index order.
pub fn batch_disagreement(
    kind: DivergenceKind,
    preds_g: &[ProbVector],
    preds_h: &[ProbVector],
) -> Result<DisagreementEstimate> {
    if preds_g.is_empty() {
        return Err(Error::InvalidInput(
            "disagreement over an empty sample".into(),
        ));
    }
    if preds_g.len() != preds_h.len() {
        return Err(Error::InvalidInput(format!(
            "prediction lists differ in length: {} vs {}",
            preds_g.len(),
            preds_h.len()
        )));
    }
    let mut total = 0.0;
    for (g, h) in preds_g.iter().zip(preds_h) {
        total += divergence(kind, g, h)?;
    }
    Ok(DisagreementEstimate {
        kind,
        value: total / preds_g.len() as f64,
        n: preds_g.len(),
    })
}

/// `sup |f'(x)|` over `[lo, hi]`.
///
/// `f'` is nondecreasing for every convex generator, so `|f'|` attains its
/// maximum over an interval at one of the endpoints.
pub fn sup_abs_fprime(kind: DivergenceKind, lo: f64, hi: f64) -> Result<f64> {
    kind.ensure_differentiable()?;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::Config(format!(
            "invalid interval [{lo}, {hi}] for sup |f'|"
        )));
    }
    Ok(kind
        .derivative_unchecked(lo)
        .abs()
        .max(kind.derivative_unchecked(hi).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use DivergenceKind::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn generators_vanish_at_one() {
        for kind in DivergenceKind::ALL {
            assert_eq!(kind.generator(1.0).unwrap(), 0.0, "{kind}");
        }
    }

    #[test]
    fn generator_examples() {
        assert!(close(Kl.generator(2.0).unwrap(), 2.0 * 2f64.ln(), 1e-15));
        assert!(close(Kl.generator(2.0).unwrap(), 1.386294, 1e-6));
        assert_eq!(PearsonChi2.generator(3.0).unwrap(), 4.0);
        assert!(matches!(Kl.generator(0.0), Err(Error::Domain(_))));
        assert!(matches!(ReverseKl.generator(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(Kl.generator_derivative(1.0).unwrap(), 1.0);
        assert_eq!(Jeffreys.generator_derivative(1.0).unwrap(), 0.0);
        assert!(matches!(
            TotalVariation.generator_derivative(2.0),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            Kl.generator_derivative(0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn divergence_examples() {
        let p = pv(&[0.5, 0.5]);
        let q = pv(&[0.25, 0.75]);
        let kl = divergence(Kl, &p, &q).unwrap();
        let rkl = divergence(ReverseKl, &p, &q).unwrap();
        assert!(close(kl, 0.143841, 1e-6));
        assert!(close(rkl, 0.130812, 1e-6));
        assert!(close(
            divergence(PearsonChi2, &p, &q).unwrap(),
            1.0 / 3.0,
            1e-15
        ));
        assert!(close(
            divergence(TotalVariation, &p, &q).unwrap(),
            0.25,
            1e-15
        ));
        let jeffreys = divergence(Jeffreys, &p, &q).unwrap();
        assert!(close(jeffreys, 0.274653, 1e-6));
        assert!(close(jeffreys, kl + rkl, 1e-15));
        assert!(close(
            divergence(JensenShannon, &p, &q).unwrap(),
            0.033822,
            1e-6
        ));
        assert_eq!(divergence(SquaredHellinger, &p, &p).unwrap(), 0.0);
    }

    #[test]
    fn divergence_rejects_mismatched_shapes_and_zero_mass() {
        let p = pv(&[0.5, 0.5]);
        let q = pv(&[0.2, 0.3, 0.5]);
        assert!(matches!(divergence(Kl, &p, &q), Err(Error::Shape { .. })));
        let z = pv(&[1.0, 0.0]);
        assert!(matches!(
            divergence(ReverseKl, &p, &z),
            Err(Error::Domain(_))
        ));
        assert_eq!(divergence(TotalVariation, &p, &z).unwrap(), 0.5);
    }

    #[test]
    fn gradients_reject_total_variation() {
        let l = Logits::new(vec![0.1, 0.2]).unwrap();
        let q = pv(&[0.5, 0.5]);
        assert!(matches!(
            divergence_gradient(TotalVariation, &l, &q),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            divergence_gradient_wrt_reference(TotalVariation, &q, &l),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn gradient_vanishes_at_the_reference() {
        let logits = Logits::new(vec![0.3, -1.2, 2.0]).unwrap();
        let p = crate::probdist::softmax(&logits);
        for kind in DivergenceKind::TRAINABLE {
            for g in [
                divergence_gradient(kind, &logits, &p).unwrap(),
                divergence_gradient_wrt_reference(kind, &p, &logits).unwrap(),
            ] {
                assert!(g.iter().all(|v| v.abs() < 1e-10), "{kind}: {g:?}");
            }
        }
    }

    #[test]
    fn kl_reference_gradient_is_cross_entropy_gradient() {
        let logits = Logits::new(vec![0.3, -1.2, 2.0]).unwrap();
        let target = pv(&[0.2, 0.5, 0.3]);
        let q = crate::probdist::softmax(&logits);
        let g = divergence_gradient_wrt_reference(Kl, &target, &logits).unwrap();
        for ((gi, qi), ti) in g.iter().zip(q.as_slice()).zip(target.as_slice()) {
            assert!(close(*gi, qi - ti, 1e-15));
        }
    }

    #[test]
    fn batch_disagreement_examples() {
        let a = vec![pv(&[0.3, 0.7]), pv(&[0.6, 0.4])];
        assert_eq!(batch_disagreement(Kl, &a, &a).unwrap().value, 0.0);
        // Pearson chi2 of (0.5, 0.5) against (0.25, 0.75) is 1/3; against
        // (0.5, 0.5) it is 0.
        let g = vec![pv(&[0.5, 0.5]), pv(&[0.5, 0.5])];
        let h = vec![pv(&[0.25, 0.75]), pv(&[0.5, 0.5])];
        let est = batch_disagreement(PearsonChi2, &g, &h).unwrap();
        assert!(close(est.value, 1.0 / 6.0, 1e-15));
        assert_eq!(est.n, 2);
        assert!(matches!(
            batch_disagreement(Kl, &[], &[]),
            Err(Error::InvalidInput(_))
        ));
        assert!(batch_disagreement(Kl, &g, &h[..1]).is_err());
    }

    #[test]
    fn sup_abs_fprime_examples() {
        assert!(close(
            sup_abs_fprime(Kl, 0.2, 5.0).unwrap(),
            5f64.ln() + 1.0,
            1e-15
        ));
        assert!(close(sup_abs_fprime(Kl, 0.2, 5.0).unwrap(), 2.609438, 1e-6));
        assert_eq!(sup_abs_fprime(PearsonChi2, 0.5, 2.0).unwrap(), 2.0);
        assert_eq!(sup_abs_fprime(Kl, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(sup_abs_fprime(Jeffreys, 1.0, 1.0).unwrap(), 0.0);
        assert!(matches!(
            sup_abs_fprime(Kl, 2.0, 1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sup_abs_fprime(Kl, 0.0, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn names_round_trip() {
        for kind in DivergenceKind::ALL {
            assert_eq!(kind.short_name().parse::<DivergenceKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(serde_json::from_str::<DivergenceKind>(&json).unwrap(), kind);
        }
        assert!("bogus".parse::<DivergenceKind>().is_err());
    }
}
