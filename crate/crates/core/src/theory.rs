//! Numerical checks of the bounds relating f-divergence losses, total
//! variation and tilted distributions.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{batch_disagreement, divergence_slice, sup_abs_fprime, DivergenceKind};
use crate::error::{Error, Result};
use crate::probdist::ProbVector;
use crate::rng::{derive_seed, random_distribution, stream};

/// Absolute slack tolerated on inequality checks before a pair counts as a
/// violation.
pub const CHECK_SLACK: f64 = 1e-12;

/// The exact range `[eps/(1-eps), (1-eps)/eps]` of `p_i / q_i` when both
/// arguments are clamped at `eps`.
pub fn ratio_interval(eps: f64) -> Result<(f64, f64)> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::Config(format!(
            "clamp eps must lie in (0, 0.5), got {eps}"
        )));
    }
    Ok((eps / (1.0 - eps), (1.0 - eps) / eps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub kind: DivergenceKind,
    pub n: usize,
    /// `|R(strong, truth) - R(weak, truth)|`.
    pub lhs: f64,
    /// `2 sup|f'| · mean TV(strong, weak)`.
    pub rhs: f64,
    pub residual: f64,
    pub ratio_interval: (f64, f64),
    pub sup_abs_fprime: f64,
    pub mean_tv: f64,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        self.residual >= -CHECK_SLACK
    }
}

/// Checks `|R_f(strong, truth) - R_f(weak, truth)| <= 2 sup|f'| E[TV(strong, weak)]`.
pub fn check_limit_inequality(
    strong_preds: &[ProbVector],
    weak_preds: &[ProbVector],
    true_labels: &[ProbVector],
    kind: DivergenceKind,
    eps: f64,
) -> Result<BoundCheck> {
    kind.ensure_differentiable()?;
    let n = strong_preds.len();
    if n == 0 || weak_preds.len() != n || true_labels.len() != n {
        return Err(Error::InvalidInput(format!(
            "bound check needs aligned nonempty lists, got {} / {} / {}",
            n,
            weak_preds.len(),
            true_labels.len()
        )));
    }
    let interval = ratio_interval(eps)?;
    let floor = eps * (1.0 - 1e-9);
    for list in [strong_preds, weak_preds, true_labels] {
        if let Some(p) = list
            .iter()
            .find(|p| p.as_slice().iter().any(|&v| v < floor))
        {
            return Err(Error::InvalidInput(format!(
                "prediction {:?} is not clamped at {eps}",
                p.as_slice()
            )));
        }
    }
    let strong = batch_disagreement(kind, strong_preds, true_labels)?.value;
    let weak = batch_disagreement(kind, weak_preds, true_labels)?.value;
    let mut tv_total = 0.0;
    for (s, w) in strong_preds.iter().zip(weak_preds) {
        tv_total += crate::divergence::tv_distance(s, w)?;
    }
    let mean_tv = tv_total / n as f64;
    let sup = sup_abs_fprime(kind, interval.0, interval.1)?;
    let lhs = (strong - weak).abs();
    let rhs = 2.0 * sup * mean_tv;
    Ok(BoundCheck {
        kind,
        n,
        lhs,
        rhs,
        residual: rhs - lhs,
        ratio_interval: interval,
        sup_abs_fprime: sup,
        mean_tv,
    })
}

/// Constant `c` in `TV(p, q) <= c sqrt(D(p || q))`.
///
/// Squared Hellinger is measured in its table form `Σ (√p - √q)²`, twice the
/// generator sum.
pub fn pinsker_constant(kind: DivergenceKind) -> f64 {
    match kind {
        DivergenceKind::Kl | DivergenceKind::ReverseKl => std::f64::consts::FRAC_1_SQRT_2,
        DivergenceKind::Jeffreys | DivergenceKind::PearsonChi2 => 0.5,
        DivergenceKind::SquaredHellinger => 1.0,
        DivergenceKind::JensenShannon => std::f64::consts::SQRT_2,
        DivergenceKind::TotalVariation => 1.0,
    }
}

/// The divergence value a Pinsker constant refers to.
pub fn pinsker_divergence(kind: DivergenceKind, p: &[f64], q: &[f64]) -> Result<f64> {
    let d = divergence_slice(kind, p, q)?;
    Ok(if kind == DivergenceKind::SquaredHellinger {
        2.0 * d
    } else {
        d
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinskerWitness {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub tv: f64,
    pub divergence: f64,
    /// `c sqrt(D) - TV`; negative for a violation.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinskerReport {
    pub kind: DivergenceKind,
    pub constant: f64,
    pub trials: usize,
    /// Largest observed `TV / sqrt(D)` over pairs with `D > 0`.
    pub max_ratio: f64,
    pub worst: Option<PinskerWitness>,
    pub violation_count: usize,
    /// Up to [`MAX_WITNESSES`] violating pairs, in sampling order.
    pub violations: Vec<PinskerWitness>,
}

impl PinskerReport {
    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }
}

pub const MAX_WITNESSES: usize = 16;
const SHARDS: usize = 16;

struct ShardResult {
    max_ratio: f64,
    worst: Option<PinskerWitness>,
    violation_count: usize,
    violations: Vec<PinskerWitness>,
}

fn pinsker_pair(kind: DivergenceKind, p: &[f64], q: &[f64], acc: &mut ShardResult) {
    let c = pinsker_constant(kind);
    let tv = divergence_slice(DivergenceKind::TotalVariation, p, q).unwrap_or(f64::NAN);
    let d = pinsker_divergence(kind, p, q).unwrap_or(f64::NAN);
    let margin = c * d.sqrt() - tv;
    let witness = || PinskerWitness {
        p: p.to_vec(),
        q: q.to_vec(),
        tv,
        divergence: d,
        margin,
    };
    if d > 0.0 {
        let ratio = tv / d.sqrt();
        if ratio > acc.max_ratio {
            acc.max_ratio = ratio;
            acc.worst = Some(witness());
        }
    }
    if !(margin >= -CHECK_SLACK) {
        acc.violation_count += 1;
        if acc.violations.len() < MAX_WITNESSES {
            acc.violations.push(witness());
        }
    }
}

/// Stress pairs checked before the random search: identical vectors and the
/// most extreme clamped binary pair, in both orders.
fn stress_pairs() -> Vec<(Vec<f64>, Vec<f64>)> {
    let e = crate::probdist::DEFAULT_CLAMP_EPS;
    let a = vec![1.0 - e, e];
    let b = vec![e, 1.0 - e];
    vec![
        (a.clone(), a.clone()),
        (vec![0.5, 0.5], vec![0.5, 0.5]),
        (a.clone(), b.clone()),
        (b, a),
    ]
}

/// Randomized search for violations of `TV <= c sqrt(D)`.
///
/// Pairs are clamped at `1e-6` with `k` uniform in `2..=10`; trials are split
/// over fixed shards, each with its own derived seed, and merged in shard
/// order so the report depends only on `(kind, trials, seed)`.
pub fn verify_pinsker(kind: DivergenceKind, trials: usize, seed: u64) -> PinskerReport {
    let eps = crate::probdist::DEFAULT_CLAMP_EPS;
    let shards: Vec<ShardResult> = (0..SHARDS)
        .into_par_iter()
        .map(|s| {
            let count = trials / SHARDS + usize::from(s < trials % SHARDS);
            let mut rng = stream(derive_seed(seed, s as u64));
            let mut acc = ShardResult {
                max_ratio: 0.0,
                worst: None,
                violation_count: 0,
                violations: Vec::new(),
            };
            if s == 0 {
                for (p, q) in stress_pairs() {
                    pinsker_pair(kind, &p, &q, &mut acc);
                }
            }
            for _ in 0..count {
                let k = rng.random_range(2..=10);
                let p = random_distribution(&mut rng, k, eps);
                let q = random_distribution(&mut rng, k, eps);
                pinsker_pair(kind, p.as_slice(), q.as_slice(), &mut acc);
            }
            acc
        })
        .collect();

    let mut report = PinskerReport {
        kind,
        constant: pinsker_constant(kind),
        trials,
        max_ratio: 0.0,
        worst: None,
        violation_count: 0,
        violations: Vec::new(),
    };
    for shard in shards {
        if shard.max_ratio > report.max_ratio {
            report.max_ratio = shard.max_ratio;
            report.worst = shard.worst;
        }
        report.violation_count += shard.violation_count;
        for v in shard.violations {
            if report.violations.len() < MAX_WITNESSES {
                report.violations.push(v);
            }
        }
    }
    report
}

/// Open interval `(lo, hi)` of values taken by `f'` on `(0, ∞)`.
pub fn fprime_range(kind: DivergenceKind) -> Result<(f64, f64)> {
    kind.ensure_differentiable()?;
    Ok(match kind {
        DivergenceKind::Kl | DivergenceKind::Jeffreys => (f64::NEG_INFINITY, f64::INFINITY),
        DivergenceKind::ReverseKl | DivergenceKind::SquaredHellinger => (f64::NEG_INFINITY, 0.0),
        DivergenceKind::JensenShannon => (f64::NEG_INFINITY, 0.5 * std::f64::consts::LN_2),
        DivergenceKind::PearsonChi2 => (-2.0, f64::INFINITY),
        DivergenceKind::TotalVariation => unreachable!(),
    })
}

/// `(f')^{-1}(y)`.
pub fn f_prime_inverse(kind: DivergenceKind, y: f64) -> Result<f64> {
    let (lo, hi) = fprime_range(kind)?;
    if !(y > lo && y < hi) {
        return Err(Error::Domain(format!(
            "{y} is outside the range ({lo}, {hi}) of f' for {kind}"
        )));
    }
    Ok(inverse_unchecked(kind, y))
}

fn inverse_unchecked(kind: DivergenceKind, y: f64) -> f64 {
    match kind {
        DivergenceKind::Kl => (y - 1.0).exp(),
        DivergenceKind::ReverseKl => -1.0 / y,
        DivergenceKind::PearsonChi2 => y / 2.0 + 1.0,
        DivergenceKind::SquaredHellinger => 1.0 / (4.0 * y * y),
        DivergenceKind::JensenShannon => {
            let t = (2.0 * y).exp();
            t / (2.0 - t)
        }
        DivergenceKind::Jeffreys => jeffreys_inverse(y),
        DivergenceKind::TotalVariation => unreachable!(),
    }
}

/// Solves `u + 1 - e^{-u} = y` for `u = ln x` inside a bracket that always
/// contains the root, taking Newton steps when they stay inside it.
fn jeffreys_inverse(y: f64) -> f64 {
    if y == 0.0 {
        return 1.0;
    }
    let g = |u: f64| u + 1.0 - (-u).exp() - y;
    let (mut lo, mut hi) = if y > 0.0 {
        (y - 1.0, y)
    } else {
        (-(1.0 - y).ln(), 0.0)
    };
    let mut u = 0.5 * (lo + hi);
    for _ in 0..200 {
        let gu = g(u);
        if gu == 0.0 {
            break;
        }
        if gu < 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        let newton = u - gu / (1.0 + (-u).exp());
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - u).abs() <= 1e-16 * u.abs().max(1.0) {
            u = next;
            break;
        }
        u = next;
    }
    u.exp()
}

fn inverse_derivative(kind: DivergenceKind, x: f64) -> f64 {
    kind.generator_second_derivative(x)
        .map(|d| 1.0 / d)
        .unwrap_or(0.0)
}

fn validate_tilting(
    kind: DivergenceKind,
    alpha: f64,
    losses: &[f64],
    q: &ProbVector,
) -> Result<()> {
    kind.ensure_differentiable()?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "alpha must be finite and nonnegative, got {alpha}"
        )));
    }
    crate::error::ensure_len(q.k(), losses.len())?;
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidInput("losses must be finite".into()));
    }
    if q.as_slice().iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidInput(
            "reference distribution must be strictly positive".into(),
        ));
    }
    Ok(())
}

/// Multiplier `c` with `Σ_j Q_j (f')^{-1}(-α L_j - c) = 1`.
///
/// The constraint is strictly decreasing in `c`, so a bracket is grown until
/// it changes sign and then narrowed by Newton steps that fall back to
/// bisection whenever they leave the bracket.
pub fn solve_normalization(
    kind: DivergenceKind,
    alpha: f64,
    losses: &[f64],
    q: &ProbVector,
) -> Result<f64> {
    let root = solve_offset(kind, alpha, losses, q)?;
    Ok(root.pivot + root.offset)
}

/// Root `c = pivot + offset`, with arguments `rel_j - offset` where
/// `rel_j = -α L_j - pivot <= 0`. Solving for the offset keeps full
/// resolution when an argument sits close to a pole of `(f')^{-1}`.
struct Offset {
    pivot: f64,
    rel: Vec<f64>,
    offset: f64,
}

fn solve_offset(
    kind: DivergenceKind,
    alpha: f64,
    losses: &[f64],
    q: &ProbVector,
) -> Result<Offset> {
    validate_tilting(kind, alpha, losses, q)?;
    let shifted: Vec<f64> = losses.iter().map(|l| -alpha * l).collect();
    let pivot = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = shifted.iter().map(|a| a - pivot).collect();
    let qs = q.as_slice();
    let done = |offset: f64| Offset {
        pivot,
        rel: shifted.clone(),
        offset,
    };
    if shifted.iter().all(|&a| a == 0.0) {
        return Ok(done(-kind.derivative_unchecked(1.0)));
    }

    let (y_lo, y_hi) = fprime_range(kind)?;
    let a_max = 0.0;
    let a_min = shifted.iter().copied().fold(f64::INFINITY, f64::min);
    // c must keep every argument a_j - c inside (y_lo, y_hi).
    let c_floor = a_max - y_hi;
    let c_ceil = a_min - y_lo;

    let phi = |c: f64| -> f64 {
        let mut s = 0.0;
        for (&a, &qj) in shifted.iter().zip(qs) {
            s += qj * inverse_unchecked(kind, a - c);
        }
        s - 1.0
    };
    let dphi = |c: f64| -> f64 {
        let mut s = 0.0;
        for (&a, &qj) in shifted.iter().zip(qs) {
            s -= qj * inverse_derivative(kind, inverse_unchecked(kind, a - c));
        }
        s
    };

    let start = {
        let mean: f64 = shifted.iter().zip(qs).map(|(a, q)| a * q).sum();
        mean - kind.derivative_unchecked(1.0)
    };
    let diagnostics = |what: &str| {
        Error::Numeric(format!(
            "{what} for {kind}: alpha = {alpha}, losses = {losses:?}, q = {qs:?}"
        ))
    };

    // Upper end: phi(hi) < 0.
    let hi = if c_ceil.is_finite() {
        if phi(c_ceil) >= 0.0 {
            return Err(Error::Domain(format!(
                "no interior solution for {kind}: the loss spread {} is too large for alpha = {alpha}",
                a_max - a_min
            )));
        }
        c_ceil
    } else {
        let mut c = if c_floor.is_finite() {
            start.max(c_floor + 1.0)
        } else {
            start
        };
        let mut step = 1.0;
        let mut tries = 0;
        while !(phi(c) < 0.0) {
            c += step;
            step *= 2.0;
            tries += 1;
            if tries > 1100 {
                return Err(diagnostics("bracket expansion failed"));
            }
        }
        c
    };
    // Lower end: phi(lo) > 0.
    let lo = if c_floor.is_finite() {
        let mut d = (hi - c_floor).min(1.0);
        let mut tries = 0;
        loop {
            let c = c_floor + d;
            if phi(c) > 0.0 {
                break c;
            }
            d *= 0.5;
            tries += 1;
            if tries > 1100 || d == 0.0 {
                return Err(diagnostics("bracket expansion failed"));
            }
        }
    } else {
        let mut c = hi - 1.0;
        let mut step = 1.0;
        let mut tries = 0;
        while !(phi(c) > 0.0) {
            c -= step;
            step *= 2.0;
            tries += 1;
            if tries > 1100 {
                return Err(diagnostics("bracket expansion failed"));
            }
        }
        c
    };

    let (mut lo, mut hi) = (lo, hi);
    let mut c = if start > lo && start < hi {
        start
    } else {
        0.5 * (lo + hi)
    };
    let mut best = (f64::INFINITY, c);
    for _ in 0..500 {
        let value = phi(c);
        if value.abs() < best.0 {
            best = (value.abs(), c);
        }
        if value == 0.0 {
            break;
        }
        if value > 0.0 {
            lo = c;
        } else {
            hi = c;
        }
        let slope = dphi(c);
        let newton = c - value / slope;
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if next == c || next <= lo || next >= hi {
            break;
        }
        c = next;
    }
    let (residual, c) = best;
    let width = 4.0 * f64::EPSILON * lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    if residual.is_finite() && (residual < 1e-12 || hi - lo <= width) {
        Ok(done(c))
    } else {
        Err(diagnostics(&format!(
            "root search stalled at residual {residual:e}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltedSolution {
    pub tilted: ProbVector,
    /// Tilting ratios `tilted_j / Q_j`.
    pub ratios: Vec<f64>,
    pub multiplier: f64,
    /// `Σ tilted_j - 1` before any renormalization.
    pub residual: f64,
}

/// `tilted_j = Q_j (f')^{-1}(-α L_j - c)` with `c` from [`solve_normalization`].
pub fn tilted_distribution(
    kind: DivergenceKind,
    alpha: f64,
    losses: &[f64],
    q: &ProbVector,
) -> Result<TiltedSolution> {
    let root = solve_offset(kind, alpha, losses, q)?;
    let c = root.pivot + root.offset;
    let ratios: Vec<f64> = root
        .rel
        .iter()
        .map(|a| inverse_unchecked(kind, a - root.offset))
        .collect();
    let tilted: Vec<f64> = ratios
        .iter()
        .zip(q.as_slice())
        .map(|(r, qj)| r * qj)
        .collect();
    let residual = tilted.iter().sum::<f64>() - 1.0;
    Ok(TiltedSolution {
        tilted: ProbVector::from_raw(tilted),
        ratios,
        multiplier: c,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformedRegularizer {
    pub f1: DivergenceKind,
    pub f2: DivergenceKind,
    pub alpha: f64,
    /// `v(L_j)`.
    pub transformed: Vec<f64>,
    /// `v(L_j) - L_j`; constant when `f1 == f2`.
    pub shift: Vec<f64>,
    /// Multiplier of the f2 constraint on the raw transformed losses.
    pub second_multiplier: f64,
    pub first: TiltedSolution,
    pub second: TiltedSolution,
    /// Sup-norm distance between the two tilted distributions.
    pub mismatch: f64,
}

/// Losses `v(L)` whose f2-tilted distribution equals the f1-tilted
/// distribution of `L`.
///
/// `v_j = -f2'(g_j) / α - c2 / α`, where `g` are the f1 tilting ratios and
/// `c2` solves the f2 constraint for the raw values `-f2'(g_j) / α`.
pub fn transform_regularizer(
    f1: DivergenceKind,
    f2: DivergenceKind,
    alpha: f64,
    losses: &[f64],
    q: &ProbVector,
) -> Result<TransformedRegularizer> {
    f2.ensure_differentiable()?;
    if !(alpha > 0.0) {
        return Err(Error::Config(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let first = tilted_distribution(f1, alpha, losses, q)?;
    let raw: Vec<f64> = first
        .ratios
        .iter()
        .map(|&g| -f2.derivative_unchecked(g) / alpha)
        .collect();
    let c2 = solve_normalization(f2, alpha, &raw, q)?;
    let transformed: Vec<f64> = raw.iter().map(|v| v - c2 / alpha).collect();
    let second = tilted_distribution(f2, alpha, &transformed, q)?;
    let mismatch = first
        .tilted
        .as_slice()
        .iter()
        .zip(second.tilted.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let shift = transformed.iter().zip(losses).map(|(v, l)| v - l).collect();
    Ok(TransformedRegularizer {
        f1,
        f2,
        alpha,
        transformed,
        shift,
        second_multiplier: c2,
        first,
        second,
        mismatch,
    })
}
