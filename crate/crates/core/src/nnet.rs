//! Backbone + linear-head predictors with hand-derived gradients and Adam.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::divergence::{softmax_backward, DivergenceKind};
use crate::error::{ensure_len, Error, Result};
use crate::probdist::{clamp_backward, clamp_slice, softmax_slice, ProbVector, DEFAULT_CLAMP_EPS};
use crate::rng::{derive_seed, standard_normal, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
        }
    }

    fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Random feature map `h(x) = act(x P + b)`.
///
/// `projection` is `input_dim × width`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenBackbone {
    pub input_dim: usize,
    pub width: usize,
    pub activation: Activation,
    pub projection: Vec<f64>,
    pub offset: Vec<f64>,
}

impl FrozenBackbone {
    /// Entries of `P` are `N(0, 2 / input_dim)`, offsets `N(0, 1)`.
    pub fn random(
        input_dim: usize,
        width: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || width == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        let mut rng = stream(derive_seed(seed, 0xB0));
        let sd = (2.0 / input_dim as f64).sqrt();
        let projection = (0..input_dim * width)
            .map(|_| sd * standard_normal(&mut rng))
            .collect();
        let offset = (0..width).map(|_| standard_normal(&mut rng)).collect();
        Ok(FrozenBackbone {
            input_dim,
            width,
            activation,
            projection,
            offset,
        })
    }

    fn preactivation(&self, x: &[f64]) -> Vec<f64> {
        let mut a = self.offset.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.projection[i * self.width..(i + 1) * self.width];
            for (aj, pij) in a.iter_mut().zip(row) {
                *aj += xi * pij;
            }
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Backbone {
    /// Raw features; a model with this backbone is a linear classifier.
    Identity {
        input_dim: usize,
    },
    /// Raw features rounded to a grid of spacing `step`.
    Quantized {
        input_dim: usize,
        step: f64,
    },
    Random(FrozenBackbone),
}

impl Backbone {
    pub fn input_dim(&self) -> usize {
        match self {
            Backbone::Identity { input_dim } | Backbone::Quantized { input_dim, .. } => *input_dim,
            Backbone::Random(b) => b.input_dim,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Backbone::Identity { input_dim } | Backbone::Quantized { input_dim, .. } => *input_dim,
            Backbone::Random(b) => b.width,
        }
    }
}

/// Linear head: `z_c = b_c + Σ_i h_i W[i][c]`, `W` row-major `width × k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableHead {
    pub width: usize,
    pub k: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl TrainableHead {
    pub fn zeros(width: usize, k: usize) -> Self {
        TrainableHead {
            width,
            k,
            weights: vec![0.0; width * k],
            bias: vec![0.0; k],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPredictor {
    pub backbone: Backbone,
    pub head: TrainableHead,
    pub clamp_eps: f64,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub preactivation: Vec<f64>,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Gradient with one slot per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub projection: Option<Vec<f64>>,
    pub offset: Option<Vec<f64>>,
}

impl Gradient {
    pub fn zeros(model: &ModelPredictor, include_backbone: bool) -> Self {
        let backbone = match (&model.backbone, include_backbone) {
            (Backbone::Random(b), true) => Some(b),
            _ => None,
        };
        Gradient {
            weights: vec![0.0; model.head.weights.len()],
            bias: vec![0.0; model.head.bias.len()],
            projection: backbone.map(|b| vec![0.0; b.projection.len()]),
            offset: backbone.map(|b| vec![0.0; b.offset.len()]),
        }
    }

    fn scale(&mut self, s: f64) {
        let slots = [
            Some(&mut self.weights),
            Some(&mut self.bias),
            self.projection.as_mut(),
            self.offset.as_mut(),
        ];
        for slot in slots.into_iter().flatten() {
            slot.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        [
            Some(&self.weights),
            Some(&self.bias),
            self.projection.as_ref(),
            self.offset.as_ref(),
        ]
        .into_iter()
        .flatten()
        .flat_map(|v| v.iter())
        .fold(0.0, |m, g| m.max(g.abs()))
    }
}

impl ModelPredictor {
    /// Linear classifier on raw features with a zero head.
    pub fn linear(input_dim: usize, k: usize) -> Self {
        ModelPredictor {
            backbone: Backbone::Identity { input_dim },
            head: TrainableHead::zeros(input_dim, k),
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }

    /// Linear classifier on features rounded to a grid of spacing `step`;
    /// `step = 0` gives [`ModelPredictor::linear`].
    pub fn quantized_linear(input_dim: usize, step: f64, k: usize) -> Result<Self> {
        if !(step >= 0.0 && step.is_finite()) {
            return Err(Error::Config(format!(
                "quantization step must be finite and nonnegative, got {step}"
            )));
        }
        let mut model = ModelPredictor::linear(input_dim, k);
        if step > 0.0 {
            model.backbone = Backbone::Quantized { input_dim, step };
        }
        Ok(model)
    }

    /// Random-feature model with a zero head.
    pub fn random_features(
        input_dim: usize,
        width: usize,
        activation: Activation,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(ModelPredictor {
            backbone: Backbone::Random(FrozenBackbone::random(input_dim, width, activation, seed)?),
            head: TrainableHead::zeros(width, k),
            clamp_eps: DEFAULT_CLAMP_EPS,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        ensure_len(self.input_dim(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "feature vector has non-finite entries".into(),
            ));
        }
        let (preactivation, features) = match &self.backbone {
            Backbone::Identity { .. } => (Vec::new(), x.to_vec()),
            Backbone::Quantized { step, .. } => (
                Vec::new(),
                x.iter().map(|v| step * (v / step).round()).collect(),
            ),
            Backbone::Random(b) => {
                let a = b.preactivation(x);
                let h = a.iter().map(|&v| b.activation.apply(v)).collect();
                (a, h)
            }
        };
        let k = self.head.k;
        let mut logits = self.head.bias.clone();
        for (i, &hi) in features.iter().enumerate() {
            let row = &self.head.weights[i * k..(i + 1) * k];
            for (z, w) in logits.iter_mut().zip(row) {
                *z += hi * w;
            }
        }
        Ok(Forward {
            preactivation,
            features,
            logits,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits)
    }

    /// `clamp(softmax(logits(x)))`.
    pub fn predict(&self, x: &[f64]) -> Result<ProbVector> {
        let z = self.logits(x)?;
        Ok(ProbVector::from_raw(clamp_slice(
            &softmax_slice(&z),
            self.clamp_eps,
        )))
    }

    /// Adds `dlogits` pulled back through the head (and the backbone when the
    /// gradient has backbone slots) into `grad`.
    pub fn accumulate_gradient(
        &self,
        x: &[f64],
        fwd: &Forward,
        dlogits: &[f64],
        grad: &mut Gradient,
    ) {
        let k = self.head.k;
        for (i, &hi) in fwd.features.iter().enumerate() {
            for (c, &dz) in dlogits.iter().enumerate() {
                grad.weights[i * k + c] += hi * dz;
            }
        }
        for (b, &dz) in grad.bias.iter_mut().zip(dlogits) {
            *b += dz;
        }
        if let (Backbone::Random(bb), Some(dp), Some(db)) = (
            &self.backbone,
            grad.projection.as_mut(),
            grad.offset.as_mut(),
        ) {
            let da: Vec<f64> = (0..bb.width)
                .map(|j| {
                    let row = &self.head.weights[j * k..(j + 1) * k];
                    let dh: f64 = row.iter().zip(dlogits).map(|(w, dz)| w * dz).sum();
                    dh * bb
                        .activation
                        .derivative(fwd.preactivation[j], fwd.features[j])
                })
                .collect();
            for (i, &xi) in x.iter().enumerate() {
                for (j, &d) in da.iter().enumerate() {
                    dp[i * bb.width + j] += xi * d;
                }
            }
            for (o, d) in db.iter_mut().zip(&da) {
                *o += d;
            }
        }
    }

    /// Mean loss over `batch` and its gradient.
    ///
    /// Head parameters always receive a gradient; backbone parameters only
    /// when `train_backbone` is set and the backbone is a random feature map.
    pub fn loss_and_gradient(
        &self,
        batch: &[(&[f64], &ProbVector)],
        loss: Loss,
        train_backbone: bool,
    ) -> Result<(f64, Gradient)> {
        loss.ensure_trainable()?;
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut grad = Gradient::zeros(self, train_backbone);
        let mut total = 0.0;
        for (x, target) in batch {
            ensure_len(self.head.k, target.k())?;
            let fwd = self.forward(x)?;
            let (value, dz) = sample_loss(loss, &fwd.logits, target.as_slice(), self.clamp_eps)?;
            total += value;
            self.accumulate_gradient(x, &fwd, &dz, &mut grad);
        }
        let n = batch.len() as f64;
        grad.scale(1.0 / n);
        Ok((total / n, grad))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let model: ModelPredictor = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.backbone {
            Backbone::Random(b) => {
                ensure_len(b.input_dim * b.width, b.projection.len())?;
                ensure_len(b.width, b.offset.len())?;
            }
            Backbone::Quantized { step, .. } if !(*step > 0.0 && step.is_finite()) => {
                return Err(Error::Config(format!("invalid quantization step {step}")));
            }
            _ => {}
        }
        ensure_len(self.backbone.width(), self.head.width)?;
        ensure_len(self.head.width * self.head.k, self.head.weights.len())?;
        ensure_len(self.head.k, self.head.bias.len())?;
        if self.head.k < 2 {
            return Err(Error::InvalidInput(
                "a head needs at least 2 outputs".into(),
            ));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 1.0 / self.head.k as f64) {
            return Err(Error::Config(format!(
                "invalid clamp eps {}",
                self.clamp_eps
            )));
        }
        Ok(())
    }
}

/// A training objective against a fixed target distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Loss {
    /// `-Σ t_i log softmax(z)_i` on the unclamped softmax.
    CrossEntropy,
    /// `D_f(target || clamp(softmax(z)))`.
    Divergence(DivergenceKind),
}

impl Loss {
    pub fn ensure_trainable(self) -> Result<()> {
        match self {
            Loss::CrossEntropy => Ok(()),
            Loss::Divergence(kind) => kind.ensure_differentiable(),
        }
    }

    /// The divergence reported for a model trained with this loss.
    pub fn metric_kind(self) -> DivergenceKind {
        match self {
            Loss::CrossEntropy => DivergenceKind::Kl,
            Loss::Divergence(kind) => kind,
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Loss::CrossEntropy => f.write_str("CE"),
            Loss::Divergence(kind) => kind.fmt(f),
        }
    }
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" | "cross-entropy" | "crossentropy" => Ok(Loss::CrossEntropy),
            other => other.parse().map(Loss::Divergence),
        }
    }
}

impl Serialize for Loss {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Loss {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Loss value and gradient with respect to the logits for one sample.
pub fn sample_loss(
    loss: Loss,
    logits: &[f64],
    target: &[f64],
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    ensure_len(logits.len(), target.len())?;
    match loss {
        Loss::CrossEntropy => Ok(cross_entropy(logits, target)),
        Loss::Divergence(kind) => {
            kind.ensure_differentiable()?;
            let raw = softmax_slice(logits);
            let q = clamp_slice(&raw, eps);
            let t = clamp_slice(target, eps);
            let mut value = 0.0;
            let mut dq = Vec::with_capacity(q.len());
            for (&ti, &qi) in t.iter().zip(&q) {
                let r = ti / qi;
                value += qi * kind.generator_unchecked(r);
                dq.push(kind.reference_slope(r));
            }
            let dp = clamp_backward(&raw, eps, &dq);
            Ok((value.max(0.0), softmax_backward(&raw, &dp)))
        }
    }
}

/// Cross-entropy through a log-softmax, with the textbook gradient
/// `softmax(z) - t`.
pub fn cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let value = -target
        .iter()
        .zip(logits)
        .map(|(t, z)| if *t == 0.0 { 0.0 } else { t * (z - log_norm) })
        .sum::<f64>();
    let grad = softmax_slice(logits)
        .iter()
        .zip(target)
        .map(|(p, t)| p - t)
        .collect();
    (value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Adam moments for every parameter slot of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    /// One Adam update of `params` (one slice per slot) from `grads`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        ensure_len(params.len(), grads.len())?;
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        ensure_len(self.first.len(), params.len())?;
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            ensure_len(m.len(), p.len())?;
            ensure_len(p.len(), g.len())?;
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (m[i] / bias1) / ((v[i] / bias2).sqrt() + c.epsilon);
                p[i] -= c.learning_rate * (update + c.weight_decay * p[i]);
            }
        }
        Ok(())
    }

    /// Applies `grad` to the head, and to the backbone when `grad` carries
    /// backbone slots.
    pub fn apply(&mut self, model: &mut ModelPredictor, grad: &Gradient) -> Result<()> {
        let head = &mut model.head;
        match (&mut model.backbone, &grad.projection, &grad.offset) {
            (Backbone::Random(b), Some(dp), Some(db)) => self.step(
                &mut [
                    &mut head.weights,
                    &mut head.bias,
                    &mut b.projection,
                    &mut b.offset,
                ],
                &[&grad.weights, &grad.bias, dp, db],
            ),
            _ => self.step(
                &mut [&mut head.weights, &mut head.bias],
                &[&grad.weights, &grad.bias],
            ),
        }
    }
}
