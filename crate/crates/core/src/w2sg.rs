//! Weak-to-strong pipeline: teacher training, pseudo-labeling, student
//! training under a divergence loss (optionally with the auxiliary
//! confidence term) and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::divergence::{batch_disagreement, DisagreementEstimate, DivergenceKind};
use crate::error::{ensure_len, Error, Result};
use crate::nnet::{
    cross_entropy, sample_loss, Activation, AdamConfig, Gradient, Loss, ModelPredictor,
    OptimizerState,
};
use crate::probdist::{clamp_slice, harden, Logits, ProbVector, DEFAULT_CLAMP_EPS};
use crate::rng::{derive_seed, stream};
use crate::synth::{generate_task, inject_noise, DataSplit, Sample, TaskSpec};
use crate::theory::{check_limit_inequality, BoundCheck};

/// Threshold used for every reported accuracy.
pub const EVAL_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_kind: Loss,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub aux_enabled: bool,
    pub beta_final: f64,
    pub warmup_fraction: f64,
    pub hardening_threshold: f64,
    pub clamp_eps: f64,
    pub seed: u64,
    pub strong_width: usize,
    pub activation: Activation,
    /// Train the backbone of the strong model as well as its head.
    pub full_finetune: bool,
    pub weak_learning_rate: f64,
    pub weak_epochs: usize,
    /// Grid spacing of the inputs the weak teacher sees; 0 gives it raw
    /// features.
    pub weak_quantization: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_kind: Loss::Divergence(DivergenceKind::Kl),
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 1,
            aux_enabled: false,
            beta_final: 0.5,
            warmup_fraction: 0.5,
            hardening_threshold: 0.5,
            clamp_eps: DEFAULT_CLAMP_EPS,
            seed: 0,
            strong_width: 256,
            activation: Activation::Tanh,
            full_finetune: false,
            weak_learning_rate: 1e-3,
            weak_epochs: 1,
            weak_quantization: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        self.loss_kind.ensure_trainable()?;
        for lr in [self.learning_rate, self.weak_learning_rate] {
            AdamConfig {
                learning_rate: lr,
                ..AdamConfig::default()
            }
            .validate()?;
        }
        if self.batch_size == 0 || self.epochs == 0 || self.weak_epochs == 0 {
            return bad("batch_size, epochs and weak_epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.beta_final) {
            return bad("beta_final must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if !(self.hardening_threshold > 0.0 && self.hardening_threshold < 1.0) {
            return bad("hardening_threshold must lie in (0, 1)");
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return bad("clamp_eps must lie in (0, 0.5)");
        }
        if !(self.weak_quantization >= 0.0 && self.weak_quantization.is_finite()) {
            return bad("weak_quantization must be finite and nonnegative");
        }
        if self.strong_width == 0 {
            return bad("strong_width must be positive");
        }
        Ok(())
    }

    fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Linear ramp from 0 to `beta_final` over the first `warmup_fraction` of
/// the iterations, constant afterwards.
pub fn beta_schedule(
    iter: usize,
    total_iters: usize,
    beta_final: f64,
    warmup_fraction: f64,
) -> f64 {
    let warm = warmup_fraction * total_iters as f64;
    if warm <= 0.0 || iter as f64 >= warm {
        beta_final
    } else {
        beta_final * iter as f64 / warm
    }
}

/// Decomposed auxiliary loss for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxLoss {
    pub value: f64,
    pub supervision: f64,
    pub confidence: f64,
    pub beta: f64,
    pub hard_class: usize,
    /// Gradient of `value` with respect to the student logits.
    pub gradient: Vec<f64>,
}

/// `β · sup(weak, student) + (1 - β) · CE(hard(student), student)`.
///
/// The supervision term is `loss` against the weak label. The hardened
/// target is data: no gradient flows through the threshold.
pub fn aux_loss_with(
    loss: Loss,
    weak_label: &ProbVector,
    student_logits: &Logits,
    t: f64,
    beta: f64,
    eps: f64,
) -> Result<AuxLoss> {
    if weak_label.k() != 2 || student_logits.as_slice().len() != 2 {
        return Err(Error::Unsupported(
            "the auxiliary loss is defined for binary tasks".into(),
        ));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!(
            "beta must lie in [0, 1], got {beta}"
        )));
    }
    let z = student_logits.as_slice();
    let pred = ProbVector::from_raw(clamp_slice(&crate::probdist::softmax_slice(z), eps));
    let hard = harden(&pred, t)?;
    let (supervision, dsup) = sample_loss(loss, z, weak_label.as_slice(), eps)?;
    let (confidence, dconf) = cross_entropy(z, &hard.one_hot());
    let gradient = dsup
        .iter()
        .zip(&dconf)
        .map(|(a, b)| beta * a + (1.0 - beta) * b)
        .collect();
    Ok(AuxLoss {
        value: beta * supervision + (1.0 - beta) * confidence,
        supervision,
        confidence,
        beta,
        hard_class: hard.class(),
        gradient,
    })
}

/// Cross-entropy form of the auxiliary loss, with the student given by its
/// predicted distribution.
pub fn aux_loss(
    weak_label: &ProbVector,
    student_pred: &ProbVector,
    t: f64,
    beta: f64,
) -> Result<AuxLoss> {
    if student_pred.k() != 2 {
        return Err(Error::Unsupported(
            "the auxiliary loss is defined for binary tasks".into(),
        ));
    }
    if student_pred.as_slice().iter().any(|&p| p <= 0.0) {
        return Err(Error::Domain(
            "student prediction must be strictly positive".into(),
        ));
    }
    let logits = Logits::new(student_pred.as_slice().iter().map(|p| p.ln()).collect())?;
    aux_loss_with(
        Loss::CrossEntropy,
        weak_label,
        &logits,
        t,
        beta,
        DEFAULT_CLAMP_EPS,
    )
}

/// Per-step objective of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Objective {
    Plain(Loss),
    Aux {
        loss: Loss,
        t: f64,
        beta_final: f64,
        warmup_fraction: f64,
    },
}

/// Optimizer settings for one call to `fit`.
#[derive(Debug, Clone, Copy)]
struct Schedule {
    learning_rate: f64,
    epochs: usize,
    train_backbone: bool,
    seed: u64,
}

/// Snapshot recorded while training the student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCheckpoint {
    pub step: usize,
    /// Mean supervision loss over the whole training split.
    pub objective: f64,
    /// `R̂_f(student, weak)` on the training split.
    pub disagreement: f64,
}

fn fit(
    model: &mut ModelPredictor,
    xs: &[&[f64]],
    targets: &[ProbVector],
    objective: Objective,
    cfg: &TrainConfig,
    schedule: Schedule,
    mut on_step: impl FnMut(usize, usize, &ModelPredictor) -> Result<()>,
) -> Result<()> {
    ensure_len(xs.len(), targets.len())?;
    if xs.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let Schedule {
        learning_rate,
        epochs,
        train_backbone,
        seed,
    } = schedule;
    let mut opt = OptimizerState::new(cfg.adam(learning_rate))?;
    let batches_per_epoch = xs.len().div_ceil(cfg.batch_size);
    let total = epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut iter = 0;
    on_step(0, total, model)?;
    for epoch in 0..epochs {
        order.shuffle(&mut stream(derive_seed(seed, epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = Gradient::zeros(model, train_backbone);
            for &i in chunk {
                let fwd = model.forward(xs[i])?;
                let dz = match objective {
                    Objective::Plain(loss) => {
                        sample_loss(loss, &fwd.logits, targets[i].as_slice(), model.clamp_eps)?.1
                    }
                    Objective::Aux {
                        loss,
                        t,
                        beta_final,
                        warmup_fraction,
                    } => {
                        let beta = beta_schedule(iter, total, beta_final, warmup_fraction);
                        let logits = Logits::new(fwd.logits.clone())?;
                        aux_loss_with(loss, &targets[i], &logits, t, beta, model.clamp_eps)?
                            .gradient
                    }
                };
                let dz: Vec<f64> = dz.iter().map(|g| g / chunk.len() as f64).collect();
                model.accumulate_gradient(xs[i], &fwd, &dz, &mut grad);
            }
            opt.apply(model, &grad)?;
            iter += 1;
            on_step(iter, total, model)?;
        }
    }
    Ok(())
}

/// Linear teacher (on quantized inputs when configured) trained with cross-entropy on hardened true labels of the
/// ground-truth split.
pub fn train_weak(split: &DataSplit, cfg: &TrainConfig) -> Result<ModelPredictor> {
    cfg.validate()?;
    let set = &split.ground_truth_set;
    if set.is_empty() {
        return Err(Error::InvalidInput("empty ground-truth split".into()));
    }
    let mut model = ModelPredictor::quantized_linear(set[0].x.len(), cfg.weak_quantization, 2)?;
    model.clamp_eps = cfg.clamp_eps;
    let xs: Vec<&[f64]> = set.iter().map(|s| s.x.as_slice()).collect();
    let targets: Vec<ProbVector> = set
        .iter()
        .map(|s| {
            Ok(ProbVector::from_raw(
                harden(&s.y, EVAL_THRESHOLD)?.one_hot().to_vec(),
            ))
        })
        .collect::<Result<_>>()?;
    fit(
        &mut model,
        &xs,
        &targets,
        Objective::Plain(Loss::CrossEntropy),
        cfg,
        Schedule {
            learning_rate: cfg.weak_learning_rate,
            epochs: cfg.weak_epochs,
            train_backbone: false,
            seed: derive_seed(cfg.seed, 0x3EA),
        },
        |_, _, _| Ok(()),
    )?;
    Ok(model)
}

/// Clamped soft predictions of `teacher` on the weak-supervision split.
pub fn weak_label(teacher: &ModelPredictor, split: &DataSplit) -> Result<Vec<ProbVector>> {
    split
        .weak_supervision_set
        .iter()
        .map(|s| teacher.predict(&s.x))
        .collect()
}

pub fn new_student(input_dim: usize, cfg: &TrainConfig) -> Result<ModelPredictor> {
    let mut model = ModelPredictor::random_features(
        input_dim,
        cfg.strong_width,
        cfg.activation,
        2,
        derive_seed(cfg.seed, 0x57),
    )?;
    model.clamp_eps = cfg.clamp_eps;
    Ok(model)
}

fn student_schedule(cfg: &TrainConfig) -> Schedule {
    Schedule {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        train_backbone: cfg.full_finetune,
        seed: derive_seed(cfg.seed, 0x5EA),
    }
}

/// Trains any predictor on `targets` with `cfg.loss_kind` and the student's
/// optimizer schedule (learning rate, epochs, batch order).
pub fn train_supervised(
    model: &mut ModelPredictor,
    set: &[Sample],
    targets: &[ProbVector],
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    let xs: Vec<&[f64]> = set.iter().map(|s| s.x.as_slice()).collect();
    fit(
        model,
        &xs,
        targets,
        Objective::Plain(cfg.loss_kind),
        cfg,
        student_schedule(cfg),
        |_, _, _| Ok(()),
    )
}

pub fn train_strong(
    split: &DataSplit,
    weak_labels: &[ProbVector],
    cfg: &TrainConfig,
) -> Result<ModelPredictor> {
    Ok(train_strong_with_history(split, weak_labels, cfg, 0)?.0)
}

/// Trains the student and records `checkpoints + 1` evenly spaced snapshots
/// (including the untrained model) when `checkpoints > 0`.
pub fn train_strong_with_history(
    split: &DataSplit,
    weak_labels: &[ProbVector],
    cfg: &TrainConfig,
    checkpoints: usize,
) -> Result<(ModelPredictor, Vec<TrainingCheckpoint>)> {
    cfg.validate()?;
    let set = &split.weak_supervision_set;
    if set.len() != weak_labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} weak labels for {} weak-supervision samples",
            weak_labels.len(),
            set.len()
        )));
    }
    if set.is_empty() {
        return Err(Error::InvalidInput("empty weak-supervision split".into()));
    }
    let mut model = new_student(set[0].x.len(), cfg)?;
    let xs: Vec<&[f64]> = set.iter().map(|s| s.x.as_slice()).collect();
    let targets: Vec<ProbVector> = weak_labels
        .iter()
        .map(|p| ProbVector::from_raw(clamp_slice(p.as_slice(), cfg.clamp_eps)))
        .collect();
    let objective = if cfg.aux_enabled {
        Objective::Aux {
            loss: cfg.loss_kind,
            t: cfg.hardening_threshold,
            beta_final: cfg.beta_final,
            warmup_fraction: cfg.warmup_fraction,
        }
    } else {
        Objective::Plain(cfg.loss_kind)
    };
    let mut history = Vec::new();
    fit(
        &mut model,
        &xs,
        &targets,
        objective,
        cfg,
        student_schedule(cfg),
        |step, total, m| {
            if checkpoints > 0
                && (step == 0 || step == total || step % (total / checkpoints).max(1) == 0)
            {
                history.push(snapshot(step, m, &xs, &targets, cfg.loss_kind)?);
            }
            Ok(())
        },
    )?;
    history.dedup_by_key(|c| c.step);
    Ok((model, history))
}

fn snapshot(
    step: usize,
    model: &ModelPredictor,
    xs: &[&[f64]],
    targets: &[ProbVector],
    loss: Loss,
) -> Result<TrainingCheckpoint> {
    let mut objective = 0.0;
    let mut preds = Vec::with_capacity(xs.len());
    for (x, t) in xs.iter().zip(targets) {
        let z = model.logits(x)?;
        objective += sample_loss(loss, &z, t.as_slice(), model.clamp_eps)?.0;
        preds.push(model.predict(x)?);
    }
    let disagreement = batch_disagreement(loss.metric_kind(), &preds, targets)?.value;
    Ok(TrainingCheckpoint {
        step,
        objective: objective / xs.len() as f64,
        disagreement,
    })
}

/// Test-set metrics for a trained student/teacher pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub weak_test_accuracy: f64,
    pub strong_test_accuracy: f64,
    pub strong_weak: DisagreementEstimate,
    pub weak_truth: DisagreementEstimate,
    pub strong_truth: DisagreementEstimate,
    pub bound: BoundCheck,
}

pub fn accuracy(model: &ModelPredictor, set: &[Sample]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidInput("accuracy over an empty set".into()));
    }
    let mut correct = 0usize;
    for s in set {
        if harden(&model.predict(&s.x)?, EVAL_THRESHOLD)?.class() == s.class() {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Accuracies at threshold 0.5, the three disagreements (model in the first
/// slot) and the limit-inequality check on the test split.
pub fn evaluate(
    strong: &ModelPredictor,
    weak: &ModelPredictor,
    split: &DataSplit,
    kind: DivergenceKind,
) -> Result<Evaluation> {
    let set = &split.test_set;
    if set.is_empty() {
        return Err(Error::InvalidInput("empty test split".into()));
    }
    let eps = strong.clamp_eps.max(weak.clamp_eps);
    let clamp = |p: ProbVector| ProbVector::from_raw(clamp_slice(p.as_slice(), eps));
    let mut s_preds = Vec::with_capacity(set.len());
    let mut w_preds = Vec::with_capacity(set.len());
    let mut truth = Vec::with_capacity(set.len());
    let (mut s_ok, mut w_ok) = (0usize, 0usize);
    for sample in set {
        let s = clamp(strong.predict(&sample.x)?);
        let w = clamp(weak.predict(&sample.x)?);
        let c = sample.class();
        s_ok += usize::from(harden(&s, EVAL_THRESHOLD)?.class() == c);
        w_ok += usize::from(harden(&w, EVAL_THRESHOLD)?.class() == c);
        s_preds.push(s);
        w_preds.push(w);
        truth.push(clamp(sample.y.clone()));
    }
    let n = set.len() as f64;
    Ok(Evaluation {
        weak_test_accuracy: w_ok as f64 / n,
        strong_test_accuracy: s_ok as f64 / n,
        strong_weak: batch_disagreement(kind, &s_preds, &w_preds)?,
        weak_truth: batch_disagreement(kind, &w_preds, &truth)?,
        strong_truth: batch_disagreement(kind, &s_preds, &truth)?,
        bound: check_limit_inequality(&s_preds, &w_preds, &truth, kind, eps)?,
    })
}

/// Everything recorded for one (task, config, noise level) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub loss: Loss,
    pub noise_level: f64,
    pub seed: u64,
    pub flipped: usize,
    pub weak_test_accuracy: f64,
    pub strong_test_accuracy: f64,
    pub strong_weak: DisagreementEstimate,
    pub weak_truth: DisagreementEstimate,
    pub strong_truth: DisagreementEstimate,
    pub bound: BoundCheck,
    pub bound_residual: f64,
    pub config: TrainConfig,
}

/// Full pipeline: task generation, teacher, noisy pseudo-labels, student,
/// evaluation.
pub fn run_pipeline(task: &TaskSpec, cfg: &TrainConfig, noise_level: f64) -> Result<RunResult> {
    let (split, _) = generate_task(task)?;
    run_on_split(&split, cfg, noise_level)
}

pub fn run_on_split(split: &DataSplit, cfg: &TrainConfig, noise_level: f64) -> Result<RunResult> {
    cfg.validate()?;
    let weak = train_weak(split, cfg)?;
    let labels = weak_label(&weak, split)?;
    let noisy = inject_noise(&labels, noise_level, derive_seed(cfg.seed, 0x401))?;
    let strong = train_strong(split, &noisy.labels, cfg)?;
    let eval = evaluate(&strong, &weak, split, cfg.loss_kind.metric_kind())?;
    Ok(RunResult {
        loss: cfg.loss_kind,
        noise_level,
        seed: cfg.seed,
        flipped: noisy.flipped_indices.len(),
        weak_test_accuracy: eval.weak_test_accuracy,
        strong_test_accuracy: eval.strong_test_accuracy,
        strong_weak: eval.strong_weak,
        weak_truth: eval.weak_truth,
        strong_truth: eval.strong_truth,
        bound_residual: eval.bound.residual,
        bound: eval.bound,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_schedule_examples() {
        assert_eq!(beta_schedule(0, 100, 0.5, 0.5), 0.0);
        assert_eq!(beta_schedule(25, 100, 0.5, 0.5), 0.25);
        assert_eq!(beta_schedule(80, 100, 0.5, 0.5), 0.5);
        assert_eq!(beta_schedule(0, 100, 0.5, 0.0), 0.5);
    }

    #[test]
    fn aux_loss_examples() {
        let weak = ProbVector::binary(0.9).unwrap();
        let student = ProbVector::new(vec![0.7, 0.3]).unwrap();
        let a = aux_loss(&weak, &student, 0.5, 0.0).unwrap();
        assert!((a.value - 0.356675).abs() < 1e-6);
        assert_eq!(a.hard_class, 0);
        let b = aux_loss(&weak, &student, 0.5, 1.0).unwrap();
        let ce = -(0.1f64 * 0.7f64.ln() + 0.9 * 0.3f64.ln());
        assert!((b.value - ce).abs() < 1e-12);
        let three = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(
            aux_loss(&three, &three, 0.5, 0.5),
            Err(Error::Unsupported(_))
        ));
    }
}
