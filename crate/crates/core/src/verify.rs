//! Property suites behind the `verify` subcommand.
//!
//! Each suite compares library results against an independent oracle
//! (closed forms, finite differences, randomized searches) and records the
//! worst case seen together with its inputs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::divergence::{
    divergence, divergence_gradient, divergence_gradient_wrt_reference, DivergenceKind,
};
use crate::error::{Error, Result};
use crate::nnet::{Activation, Loss, ModelPredictor};
use crate::probdist::{softmax, Logits, ProbVector, DEFAULT_CLAMP_EPS};
use crate::rng::{derive_seed, random_distribution, standard_normal, stream, StreamRng};
use crate::theory::{
    check_limit_inequality, tilted_distribution, transform_regularizer, verify_pinsker,
};
use crate::w2sg::aux_loss_with;

/// Random pairs per kind in the divergence suite.
pub const DIVERGENCE_PAIRS: usize = 1000;
/// Random cases per kind and per gradient family.
pub const GRADIENT_CASES: usize = 100;
/// Random `(L, Q)` draws per `(f1, f2, alpha)` cell.
pub const EQUIVALENCE_CASES: usize = 100;
pub const EQUIVALENCE_KINDS: [DivergenceKind; 4] = [
    DivergenceKind::Kl,
    DivergenceKind::ReverseKl,
    DivergenceKind::PearsonChi2,
    DivergenceKind::SquaredHellinger,
];
pub const EQUIVALENCE_ALPHAS: [f64; 3] = [0.1, 1.0, 10.0];

pub const VALUE_TOLERANCE: f64 = 1e-10;
pub const IDENTITY_TOLERANCE: f64 = 1e-12;
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-6;
pub const GIBBS_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Divergence,
    Gradients,
    Pinsker,
    Bound,
    Equivalence,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Divergence,
        Suite::Gradients,
        Suite::Pinsker,
        Suite::Bound,
        Suite::Equivalence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Divergence => "divergence",
            Suite::Gradients => "gradients",
            Suite::Pinsker => "pinsker",
            Suite::Bound => "bound",
            Suite::Equivalence => "equivalence",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidInput(format!("unknown suite '{s}'")))
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Worst error (or, for inequalities, worst margin) observed.
    pub worst: f64,
    pub tolerance: f64,
    /// Inputs of the worst case.
    pub witness: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub trials: usize,
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

/// Tracks the largest error of a family of cases.
struct Worst {
    name: String,
    tolerance: f64,
    cases: usize,
    worst: f64,
    witness: Option<Value>,
    failed: bool,
}

impl Worst {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Worst {
            name: name.into(),
            tolerance,
            cases: 0,
            worst: 0.0,
            witness: None,
            failed: false,
        }
    }

    /// Records an error that must stay at or below the tolerance.
    fn error(&mut self, err: f64, witness: impl FnOnce() -> Value) {
        self.cases += 1;
        if !(err <= self.tolerance) {
            self.failed = true;
        }
        if self.worst.is_nan() {
            return;
        }
        if err.is_nan() || err > self.worst || self.witness.is_none() {
            self.worst = err;
            self.witness = Some(witness());
        }
    }

    /// Records a case that could not be evaluated at all.
    fn failure(&mut self, witness: Value) {
        self.cases += 1;
        self.failed = true;
        self.worst = f64::NAN;
        self.witness = Some(witness);
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name,
            passed: !self.failed,
            cases: self.cases,
            worst: self.worst,
            tolerance: self.tolerance,
            witness: self.witness,
        }
    }
}

/// Mixed absolute/relative error `|a - b| / max(1, |b|)`.
fn scaled_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Neumaier-compensated sum.
fn compensated_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for t in terms {
        let s = sum + t;
        if sum.abs() >= t.abs() {
            comp += (sum - s) + t;
        } else {
            comp += (t - s) + sum;
        }
        sum = s;
    }
    sum + comp
}

/// Closed-form divergence expressions written directly in `p` and `q`.
pub fn closed_form(kind: DivergenceKind, p: &[f64], q: &[f64]) -> f64 {
    let pairs = p.iter().zip(q).map(|(&a, &b)| (a, b));
    match kind {
        DivergenceKind::Kl => compensated_sum(pairs.map(|(a, b)| a * (a / b).ln())),
        DivergenceKind::ReverseKl => compensated_sum(pairs.map(|(a, b)| b * (b / a).ln())),
        DivergenceKind::JensenShannon => compensated_sum(pairs.map(|(a, b)| {
            let m = 0.5 * (a + b);
            0.5 * (a * (a / m).ln() + b * (b / m).ln())
        })),
        DivergenceKind::Jeffreys => compensated_sum(pairs.map(|(a, b)| (a - b) * (a / b).ln())),
        DivergenceKind::SquaredHellinger => {
            compensated_sum(pairs.map(|(a, b)| 0.5 * (a.sqrt() - b.sqrt()).powi(2)))
        }
        DivergenceKind::PearsonChi2 => compensated_sum(pairs.map(|(a, b)| (a - b).powi(2) / b)),
        DivergenceKind::TotalVariation => compensated_sum(pairs.map(|(a, b)| 0.5 * (a - b).abs())),
    }
}

fn random_k(rng: &mut StreamRng) -> usize {
    rng.random_range(2..=10)
}

pub fn divergence_suite(seed: u64) -> SuiteReport {
    let mut checks = Vec::new();
    let eps = DEFAULT_CLAMP_EPS;
    let mut pairs = Vec::with_capacity(DIVERGENCE_PAIRS);
    let mut rng = stream(derive_seed(seed, 0xD1));
    for _ in 0..DIVERGENCE_PAIRS {
        let k = random_k(&mut rng);
        pairs.push((
            random_distribution(&mut rng, k, eps),
            random_distribution(&mut rng, k, eps),
        ));
    }
    let witness = |p: &ProbVector, q: &ProbVector| json!({ "p": p.as_slice(), "q": q.as_slice() });

    for kind in DivergenceKind::ALL {
        let mut w = Worst::new(format!("{kind} matches closed form"), VALUE_TOLERANCE);
        for (p, q) in &pairs {
            match divergence(kind, p, q) {
                Ok(d) => w.error(
                    scaled_error(d, closed_form(kind, p.as_slice(), q.as_slice())),
                    || witness(p, q),
                ),
                Err(e) => w.failure(
                    json!({ "p": p.as_slice(), "q": q.as_slice(), "error": e.to_string() }),
                ),
            }
        }
        checks.push(w.finish());
    }

    fn d(kind: DivergenceKind, p: &ProbVector, q: &ProbVector) -> f64 {
        divergence(kind, p, q).unwrap_or(f64::NAN)
    }
    let mut jeffreys = Worst::new("Jeffreys = KL + RKL", IDENTITY_TOLERANCE);
    let mut swap = Worst::new("RKL(p, q) = KL(q, p)", IDENTITY_TOLERANCE);
    let mut mixture = Worst::new("JS = mean KL to the mixture", IDENTITY_TOLERANCE);
    for (p, q) in &pairs {
        let kl = d(DivergenceKind::Kl, p, q);
        let rkl = d(DivergenceKind::ReverseKl, p, q);
        jeffreys.error(
            scaled_error(d(DivergenceKind::Jeffreys, p, q), kl + rkl),
            || witness(p, q),
        );
        swap.error(scaled_error(rkl, d(DivergenceKind::Kl, q, p)), || {
            witness(p, q)
        });
        let m: Vec<f64> = p
            .as_slice()
            .iter()
            .zip(q.as_slice())
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let m = ProbVector::from_raw(m);
        let via_mixture = 0.5 * (d(DivergenceKind::Kl, p, &m) + d(DivergenceKind::Kl, q, &m));
        mixture.error(
            scaled_error(d(DivergenceKind::JensenShannon, p, q), via_mixture),
            || witness(p, q),
        );
    }
    checks.extend([jeffreys.finish(), swap.finish(), mixture.finish()]);
    finish(Suite::Divergence, checks)
}

fn finish(suite: Suite, checks: Vec<CheckResult>) -> SuiteReport {
    SuiteReport {
        suite,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, max_i |a_i|, 1e-8)`.
pub fn gradient_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-8, f64::max);
    diff / scale
}

/// Central differences of `f` at `x`.
pub fn finite_difference(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Logits whose softmax keeps every entry above `1e-4`, so that the clamp
/// stays inactive under finite-difference probes.
fn moderate_logits(rng: &mut StreamRng, k: usize) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..k).map(|_| 2.0 * standard_normal(rng)).collect();
        let p = crate::probdist::softmax_slice(&z);
        if p.iter().all(|&v| v > 1e-4) {
            return z;
        }
    }
}

fn random_model(rng: &mut StreamRng, full: bool) -> ModelPredictor {
    let d = rng.random_range(2..=4);
    let mut m = if full || rng.random_bool(0.5) {
        ModelPredictor::random_features(
            d,
            rng.random_range(3..=6),
            Activation::Tanh,
            2,
            rng.random(),
        )
        .expect("valid dimensions")
    } else {
        ModelPredictor::linear(d, 2)
    };
    for w in m.head.weights.iter_mut().chain(m.head.bias.iter_mut()) {
        *w = 0.5 * standard_normal(rng);
    }
    m
}

fn model_params(m: &ModelPredictor, full: bool) -> Vec<f64> {
    let mut v: Vec<f64> = m.head.weights.iter().chain(&m.head.bias).copied().collect();
    if let (true, crate::nnet::Backbone::Random(b)) = (full, &m.backbone) {
        v.extend(&b.projection);
        v.extend(&b.offset);
    }
    v
}

fn set_model_params(m: &mut ModelPredictor, v: &[f64], full: bool) {
    let nw = m.head.weights.len();
    let nb = m.head.bias.len();
    m.head.weights.copy_from_slice(&v[..nw]);
    m.head.bias.copy_from_slice(&v[nw..nw + nb]);
    if let (true, crate::nnet::Backbone::Random(b)) = (full, &mut m.backbone) {
        let np = b.projection.len();
        b.projection.copy_from_slice(&v[nw + nb..nw + nb + np]);
        b.offset.copy_from_slice(&v[nw + nb + np..]);
    }
}

fn gradient_flat(g: &crate::nnet::Gradient) -> Vec<f64> {
    let mut v: Vec<f64> = g.weights.iter().chain(&g.bias).copied().collect();
    if let (Some(p), Some(o)) = (&g.projection, &g.offset) {
        v.extend(p);
        v.extend(o);
    }
    v
}

pub fn gradients_suite(seed: u64) -> SuiteReport {
    let checks: Vec<Vec<CheckResult>> = DivergenceKind::TRAINABLE
        .par_iter()
        .enumerate()
        .map(|(ki, &kind)| gradient_checks(kind, derive_seed(seed, 0x6A + ki as u64)))
        .collect();
    finish(Suite::Gradients, checks.into_iter().flatten().collect())
}

fn gradient_checks(kind: DivergenceKind, seed: u64) -> Vec<CheckResult> {
    let eps = DEFAULT_CLAMP_EPS;
    let mut rng = stream(seed);
    let mut model_slot = Worst::new(
        format!("{kind} gradient, model in first slot"),
        FD_TOLERANCE,
    );
    let mut label_slot = Worst::new(
        format!("{kind} gradient, model in second slot"),
        FD_TOLERANCE,
    );
    let mut head = Worst::new(format!("{kind} head gradient"), FD_TOLERANCE);
    let mut full = Worst::new(format!("{kind} full network gradient"), FD_TOLERANCE);
    let mut aux = Worst::new(format!("{kind} auxiliary loss gradient"), FD_TOLERANCE);
    let loss = Loss::Divergence(kind);

    for _ in 0..GRADIENT_CASES {
        let k = random_k(&mut rng);
        let z = moderate_logits(&mut rng, k);
        let other = random_distribution(&mut rng, k, 1e-3);
        let witness = || json!({ "logits": z, "other": other.as_slice() });

        let analytic = divergence_gradient(kind, &Logits::new(z.clone()).expect("finite"), &other);
        let numeric = finite_difference(&z, |zz| {
            let p = softmax(&Logits::new(zz.to_vec()).expect("finite"));
            divergence(kind, &p, &other).unwrap_or(f64::NAN)
        });
        match analytic {
            Ok(a) => model_slot.error(gradient_error(&a, &numeric), witness),
            Err(e) => model_slot.failure(json!({ "error": e.to_string() })),
        }

        let analytic = divergence_gradient_wrt_reference(
            kind,
            &other,
            &Logits::new(z.clone()).expect("finite"),
        );
        let numeric = finite_difference(&z, |zz| {
            let q = softmax(&Logits::new(zz.to_vec()).expect("finite"));
            divergence(kind, &other, &q).unwrap_or(f64::NAN)
        });
        match analytic {
            Ok(a) => label_slot.error(gradient_error(&a, &numeric), witness),
            Err(e) => label_slot.failure(json!({ "error": e.to_string() })),
        }

        for (train_backbone, check) in [(false, &mut head), (true, &mut full)] {
            // Draw until no prediction sits near the clamp floor.
            let (model, xs, ts) = loop {
                let model = random_model(&mut rng, train_backbone);
                let d = model.input_dim();
                let n = rng.random_range(1..=4);
                let xs: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..d).map(|_| standard_normal(&mut rng)).collect())
                    .collect();
                let ts: Vec<ProbVector> = (0..n)
                    .map(|_| random_distribution(&mut rng, 2, 1e-3))
                    .collect();
                let safe = xs.iter().all(|x| {
                    let p = crate::probdist::softmax_slice(&model.logits(x).expect("shape"));
                    p.iter().all(|&v| v > 1e-4)
                });
                if safe {
                    break (model, xs, ts);
                }
            };
            let batch: Vec<(&[f64], &ProbVector)> =
                xs.iter().map(|x| x.as_slice()).zip(&ts).collect();
            let params = model_params(&model, train_backbone);
            let mut probe = model.clone();
            let numeric = finite_difference(&params, |v| {
                set_model_params(&mut probe, v, train_backbone);
                probe
                    .loss_and_gradient(&batch, loss, false)
                    .map(|r| r.0)
                    .unwrap_or(f64::NAN)
            });
            match model.loss_and_gradient(&batch, loss, train_backbone) {
                Ok((_, g)) => check.error(gradient_error(&gradient_flat(&g), &numeric), || {
                    json!({ "model": serde_json::to_value(&model).unwrap_or(Value::Null), "xs": xs, "targets": ts })
                }),
                Err(e) => check.failure(json!({ "error": e.to_string() })),
            }
        }

        let z2 = loop {
            let z2 = moderate_logits(&mut rng, 2);
            let p = crate::probdist::softmax_slice(&z2);
            // Keep the hardened target fixed under the probe.
            if (p[1] - 0.5).abs() > 1e-3 {
                break z2;
            }
        };
        let weak = random_distribution(&mut rng, 2, 1e-3);
        let beta = rng.random_range(0.0..=1.0);
        let numeric = finite_difference(&z2, |zz| {
            aux_loss_with(
                loss,
                &weak,
                &Logits::new(zz.to_vec()).expect("finite"),
                0.5,
                beta,
                eps,
            )
            .map(|a| a.value)
            .unwrap_or(f64::NAN)
        });
        match aux_loss_with(
            loss,
            &weak,
            &Logits::new(z2.clone()).expect("finite"),
            0.5,
            beta,
            eps,
        ) {
            Ok(a) => aux.error(
                gradient_error(&a.gradient, &numeric),
                || json!({ "logits": z2, "weak": weak.as_slice(), "beta": beta }),
            ),
            Err(e) => aux.failure(json!({ "error": e.to_string() })),
        }
    }
    vec![
        model_slot.finish(),
        label_slot.finish(),
        head.finish(),
        full.finish(),
        aux.finish(),
    ]
}

pub fn pinsker_suite(trials: usize, seed: u64) -> SuiteReport {
    let checks = DivergenceKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let r = verify_pinsker(kind, trials, derive_seed(seed, 0x91 + i as u64));
            let witness = r
                .violations
                .first()
                .or(r.worst.as_ref())
                .and_then(|w| serde_json::to_value(w).ok());
            CheckResult {
                name: format!("{kind}: TV <= {} sqrt(D)", r.constant),
                passed: r.passed(),
                cases: r.trials,
                worst: r.max_ratio,
                tolerance: r.constant,
                witness: witness.map(|w| json!({ "violations": r.violation_count, "pair": w })),
            }
        })
        .collect();
    finish(Suite::Pinsker, checks)
}

const BOUND_SHARDS: usize = 16;

/// One random prediction triple: `n` aligned samples over `k` classes.
fn random_triple(rng: &mut StreamRng, eps: f64) -> [Vec<ProbVector>; 3] {
    let k = rng.random_range(2..=5);
    let n = rng.random_range(1..=4);
    let mut draw = || {
        (0..n)
            .map(|_| random_distribution(rng, k, eps))
            .collect::<Vec<_>>()
    };
    [draw(), draw(), draw()]
}

pub fn bound_suite(trials: usize, seed: u64) -> SuiteReport {
    let eps = DEFAULT_CLAMP_EPS;
    let checks = DivergenceKind::TRAINABLE
        .iter()
        .enumerate()
        .map(|(ki, &kind)| {
            let shards: Vec<(f64, Option<Value>, bool, usize)> = (0..BOUND_SHARDS)
                .into_par_iter()
                .map(|s| {
                    let count = trials / BOUND_SHARDS + usize::from(s < trials % BOUND_SHARDS);
                    let mut rng =
                        stream(derive_seed(derive_seed(seed, 0xB7 + ki as u64), s as u64));
                    let mut worst = 0.0f64;
                    let mut witness = None;
                    let mut ok = true;
                    for _ in 0..count {
                        let [strong, weak, truth] = random_triple(&mut rng, eps);
                        match check_limit_inequality(&strong, &weak, &truth, kind, eps) {
                            Ok(b) => {
                                ok &= b.holds();
                                let ratio = if b.rhs > 0.0 { b.lhs / b.rhs } else { 0.0 };
                                if ratio > worst || witness.is_none() {
                                    worst = ratio;
                                    witness = Some(json!({
                                        "strong": strong, "weak": weak, "truth": truth,
                                        "lhs": b.lhs, "rhs": b.rhs, "residual": b.residual,
                                    }));
                                }
                            }
                            Err(e) => {
                                ok = false;
                                worst = f64::NAN;
                                witness = Some(json!({ "error": e.to_string() }));
                                break;
                            }
                        }
                    }
                    (worst, witness, ok, count)
                })
                .collect();
            // Pass/fail is decided on the residual; the reported worst case
            // is the tightest ratio lhs / rhs.
            let mut result = CheckResult {
                name: format!("{kind}: |R(strong, truth) - R(weak, truth)| <= 2 sup|f'| E[TV]"),
                passed: true,
                cases: 0,
                worst: 0.0,
                tolerance: 1.0,
                witness: None,
            };
            for (worst, witness, ok, count) in shards {
                result.passed &= ok;
                result.cases += count;
                if worst > result.worst || worst.is_nan() || result.witness.is_none() {
                    result.worst = worst;
                    result.witness = witness;
                }
            }
            result
        })
        .collect();
    finish(Suite::Bound, checks)
}

/// Random binary losses in `[0, ln 2]` and a clamped reference distribution.
fn random_tilting_case(rng: &mut StreamRng) -> (Vec<f64>, ProbVector) {
    let l = (0..2)
        .map(|_| rng.random_range(0.0..std::f64::consts::LN_2))
        .collect();
    (l, random_distribution(rng, 2, DEFAULT_CLAMP_EPS))
}

pub fn equivalence_suite(seed: u64) -> SuiteReport {
    let mut cells = Vec::new();
    for &f1 in &EQUIVALENCE_KINDS {
        for &f2 in &EQUIVALENCE_KINDS {
            for &alpha in &EQUIVALENCE_ALPHAS {
                cells.push((f1, f2, alpha));
            }
        }
    }
    let results: Vec<(f64, Option<Value>, usize, usize, bool)> = cells
        .par_iter()
        .enumerate()
        .map(|(ci, &(f1, f2, alpha))| {
            let mut rng = stream(derive_seed(seed, 0xE0 + ci as u64));
            let mut worst = 0.0f64;
            let mut witness = None;
            let mut resampled = 0;
            let mut ok = true;
            let mut done = 0;
            while done < EQUIVALENCE_CASES {
                let (l, q) = random_tilting_case(&mut rng);
                match transform_regularizer(f1, f2, alpha, &l, &q) {
                    Ok(t) => {
                        done += 1;
                        let err = t.mismatch.max(t.first.residual.abs()).max(t.second.residual.abs());
                        if !(err <= EQUIVALENCE_TOLERANCE) {
                            ok = false;
                        }
                        if err > worst || err.is_nan() {
                            worst = err;
                            witness = Some(json!({ "f1": f1, "f2": f2, "alpha": alpha, "losses": l, "q": q.as_slice() }));
                        }
                    }
                    // The chi-squared tilt has no interior solution when
                    // alpha times the loss spread is too large; redraw.
                    Err(Error::Domain(_)) if f1 == DivergenceKind::PearsonChi2 && resampled < 100_000 => {
                        resampled += 1;
                    }
                    Err(e) => {
                        done += 1;
                        ok = false;
                        worst = f64::NAN;
                        witness = Some(json!({ "f1": f1, "f2": f2, "alpha": alpha, "losses": l, "q": q.as_slice(), "error": e.to_string() }));
                    }
                }
            }
            (worst, witness, done, resampled, ok)
        })
        .collect();

    let mut equivalence = CheckResult {
        name: "f1 tilt equals f2 tilt of transformed losses".into(),
        passed: true,
        cases: 0,
        worst: 0.0,
        tolerance: EQUIVALENCE_TOLERANCE,
        witness: None,
    };
    let mut resampled_total = 0;
    for (worst, witness, done, resampled, ok) in results {
        equivalence.passed &= ok;
        equivalence.cases += done;
        resampled_total += resampled;
        if worst > equivalence.worst || worst.is_nan() {
            equivalence.worst = worst;
            equivalence.witness = witness;
        }
    }
    if let Some(Value::Object(map)) = equivalence.witness.as_mut() {
        map.insert("resampled_infeasible".into(), json!(resampled_total));
    }

    let mut gibbs = Worst::new("KL tilt equals the Gibbs distribution", GIBBS_TOLERANCE);
    let mut rng = stream(derive_seed(seed, 0x61B));
    for &alpha in &EQUIVALENCE_ALPHAS {
        for _ in 0..EQUIVALENCE_CASES {
            let (l, q) = random_tilting_case(&mut rng);
            let weights: Vec<f64> = l
                .iter()
                .zip(q.as_slice())
                .map(|(li, qi)| qi * (-alpha * li).exp())
                .collect();
            let z: f64 = weights.iter().sum();
            match tilted_distribution(DivergenceKind::Kl, alpha, &l, &q) {
                Ok(t) => {
                    let err = t
                        .tilted
                        .as_slice()
                        .iter()
                        .zip(&weights)
                        .map(|(a, w)| (a - w / z).abs())
                        .fold(0.0, f64::max);
                    gibbs.error(err, || json!({ "alpha": alpha, "losses": l, "q": q.as_slice() }));
                }
                Err(e) => gibbs.failure(json!({ "alpha": alpha, "losses": l, "q": q.as_slice(), "error": e.to_string() })),
            }
        }
    }
    finish(Suite::Equivalence, vec![equivalence, gibbs.finish()])
}

/// Runs `suites` in the given order.
pub fn run_verify(suites: &[Suite], trials: usize, seed: u64) -> Result<VerifyReport> {
    if suites.is_empty() {
        return Err(Error::InvalidInput(
            "no verification suites selected".into(),
        ));
    }
    if trials == 0 {
        return Err(Error::InvalidInput("trials must be at least 1".into()));
    }
    let reports: Vec<SuiteReport> = suites
        .iter()
        .map(|&suite| match suite {
            Suite::Divergence => divergence_suite(seed),
            Suite::Gradients => gradients_suite(seed),
            Suite::Pinsker => pinsker_suite(trials, seed),
            Suite::Bound => bound_suite(trials, seed),
            Suite::Equivalence => equivalence_suite(seed),
        })
        .collect();
    Ok(VerifyReport {
        seed,
        trials,
        passed: reports.iter().all(|r| r.passed),
        suites: reports,
    })
}
