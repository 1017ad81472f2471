//! Optimization: Adam with a cosine learning-rate schedule, static and
//! adaptive training epochs, evaluation and the metrics CSV stream.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Grads};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::flops::FlopsModel;
use crate::halting::{self, HaltingConfig};
use crate::infer;
use crate::tensor::{Scalar, Tensor};
use crate::vit::{self, ModelConfig, ModelParams, Weights, GATE_SCALE, GATE_SHIFT};

/// Which phases a training run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    /// Static pretraining for `pretrain_epochs`, then adaptive finetuning for
    /// `epochs`.
    TwoPhase,
    /// Static training only, for `epochs`.
    Static,
    /// Adaptive training from scratch, for `epochs`.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pipeline: Pipeline,
    /// Static epochs before adaptive finetuning in the two-phase pipeline.
    pub pretrain_epochs: usize,
    pub learning_rate: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Decoupled weight decay applied to matrices only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Random horizontal flip plus padded random crop.
    pub augment: bool,
    pub crop_pad: usize,
    /// Evaluate on the test split every this many epochs (0: only at the end).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::TwoPhase,
            pretrain_epochs: 20,
            learning_rate: 1.5e-3,
            min_lr: 1e-5,
            warmup_epochs: 0,
            epochs: 12,
            batch_size: 32,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            augment: false,
            crop_pad: 1,
            eval_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.pipeline == Pipeline::TwoPhase && self.pretrain_epochs == 0 {
            return Err(Error::Config("the two-phase pipeline needs pretrain_epochs of at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.learning_rate) {
            return Err(Error::Config(format!("min_lr must lie in [0, learning_rate], got {}", self.min_lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

// ── schedule and optimizer ───────────────────────────────────────────

/// Linear warmup followed by cosine decay from `base` to `min` over the
/// remaining steps. `step` is 0-based; steps past the end return `min`.
pub fn cosine_lr(base: f64, min: f64, warmup: usize, total: usize, step: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            step: 0,
            m: params.map(|_, t| Tensor::zeros(t.shape())),
            v: params.map(|_, t| Tensor::zeros(t.shape())),
        }
    }
}

/// One bias-corrected Adam update of every parameter for which `trainable`
/// holds. Fails before touching anything if a gradient is not finite.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &Weights<Tensor<T>>,
    state: &mut AdamState<T>,
    hyper: AdamHyper,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    for (name, g) in grads.named() {
        if !g.all_finite() {
            return Err(Error::NonFiniteGrad(name));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (T::c(hyper.beta1), T::c(hyper.beta2));
    let step_size = T::c(hyper.lr / bc1);
    let bc2_sqrt = T::c(bc2.sqrt());
    let eps = T::c(hyper.eps);
    let decay = T::c(hyper.lr * hyper.weight_decay);
    let items = params
        .named_mut()
        .into_iter()
        .zip(grads.named())
        .zip(state.m.named_mut().into_iter().zip(state.v.named_mut()));
    for (((name, p), (_, g)), ((_, m), (_, v))) in items {
        if !trainable(&name) {
            continue;
        }
        let decays = p.rank() == 2 && hyper.weight_decay > 0.0;
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            if decays {
                p[i] -= decay * p[i];
            }
            p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Weights<Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .named()
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::c(max_norm / norm);
        for (_, g) in grads.named_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

// ── metrics ──────────────────────────────────────────────────────────

/// Whether the halting mechanism takes part in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Static,
    Adaptive,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Static => "static",
            Mode::Adaptive => "adaptive",
        }
    }
}

/// Per-split aggregates. Losses are sample-weighted means; `mean_depth` is
/// the mean halting layer over tokens; `live_per_layer` and `flops` follow
/// compacted execution with early exit.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitMetrics {
    pub samples: usize,
    pub task: f64,
    pub ponder: f64,
    pub distr: f64,
    pub total: f64,
    pub accuracy: f64,
    pub mean_depth: f64,
    pub live_per_layer: Vec<f64>,
    pub flops: f64,
    pub layer_scores: Vec<f64>,
}

impl SplitMetrics {
    fn empty(layers: usize) -> Self {
        Self {
            samples: 0,
            task: 0.0,
            ponder: 0.0,
            distr: 0.0,
            total: 0.0,
            accuracy: 0.0,
            mean_depth: 0.0,
            live_per_layer: vec![0.0; layers],
            flops: 0.0,
            layer_scores: vec![0.0; layers],
        }
    }

    fn finish(mut self) -> Self {
        let n = self.samples.max(1) as f64;
        for v in [
            &mut self.task,
            &mut self.ponder,
            &mut self.distr,
            &mut self.total,
            &mut self.accuracy,
            &mut self.mean_depth,
            &mut self.flops,
        ] {
            *v /= n;
        }
        for v in self.live_per_layer.iter_mut().chain(self.layer_scores.iter_mut()) {
            *v /= n;
        }
        self
    }

    /// `(metric, value)` pairs in a fixed order for the CSV stream.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("loss_task".to_string(), self.task),
            ("loss_ponder".to_string(), self.ponder),
            ("loss_distr".to_string(), self.distr),
            ("loss_total".to_string(), self.total),
            ("top1_accuracy".to_string(), self.accuracy),
            ("mean_token_depth".to_string(), self.mean_depth),
            ("flops_per_sample".to_string(), self.flops),
        ];
        for (l, v) in self.live_per_layer.iter().enumerate() {
            rows.push((format!("live_tokens_layer{}", l + 1), *v));
        }
        for (l, v) in self.layer_scores.iter().enumerate() {
            rows.push((format!("halting_score_layer{}", l + 1), *v));
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train: SplitMetrics,
    pub test: Option<SplitMetrics>,
}

/// Appends `epoch,split,metric,value` rows. The first line written to an
/// empty sink is a comment naming the FLOPs convention, then the header.
pub struct MetricsCsv {
    buf: String,
}

impl Default for MetricsCsv {
    fn default() -> Self {
        Self::new()
    }
}

impl MetricsCsv {
    pub fn new() -> Self {
        let mut buf = String::new();
        let _ = writeln!(buf, "# flops: {}; accuracy in [0,1]; depth in layers", crate::flops::CONVENTION);
        buf.push_str("epoch,split,metric,value\n");
        Self { buf }
    }

    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        let _ = writeln!(self.buf, "{epoch},{split},{metric},{value}");
    }

    pub fn push_epoch(&mut self, m: &EpochMetrics) {
        self.push_split(m, "train", "test");
    }

    /// Rows of one epoch with splits named `{phase}-train` and
    /// `{phase}-test`, for files holding several training phases.
    pub fn push_phase(&mut self, phase: &str, m: &EpochMetrics) {
        self.push_split(m, &format!("{phase}-train"), &format!("{phase}-test"));
    }

    fn push_split(&mut self, m: &EpochMetrics, train: &str, test: &str) {
        self.push(m.epoch, train, "learning_rate", m.lr);
        for (k, v) in m.train.rows() {
            self.push(m.epoch, train, &k, v);
        }
        if let Some(t) = &m.test {
            for (k, v) in t.rows() {
                self.push(m.epoch, test, &k, v);
            }
        }
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.buf.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

// ── trainer ──────────────────────────────────────────────────────────

/// Owns the parameters and optimizer state of one training run.
pub struct Trainer {
    pub model: ModelConfig,
    pub halting: HaltingConfig,
    pub train: TrainConfig,
    pub mode: Mode,
    pub params: ModelParams<f32>,
    pub optimizer: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    rng: ChaCha8Rng,
    target: Vec<f64>,
    steps_per_epoch: usize,
}

impl Trainer {
    /// Fresh parameters initialized from `train.seed`.
    pub fn new(model: ModelConfig, halting: HaltingConfig, train: TrainConfig, mode: Mode) -> Result<Self> {
        let params = ModelParams::init(&model, halting.gamma, halting.beta, train.seed)?;
        Self::with_params(model, halting, train, mode, params)
    }

    pub fn with_params(
        model: ModelConfig,
        halting: HaltingConfig,
        train: TrainConfig,
        mode: Mode,
        params: ModelParams<f32>,
    ) -> Result<Self> {
        model.validate()?;
        halting.validate(&model)?;
        train.validate()?;
        params.check_shapes(&model)?;
        let target = halting::target_distribution(model.num_layers, halting.target_depth, halting.target_std);
        Ok(Self {
            optimizer: AdamState::new(&params),
            rng: ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_0000_0000_0001),
            model,
            halting,
            train,
            mode,
            params,
            epoch: 0,
            target,
            steps_per_epoch: 0,
        })
    }

    /// Adaptive finetuning of static weights: the halting gates are reset to
    /// the configured `gamma` and `beta` and the optimizer starts fresh.
    pub fn finetune_from(
        mut params: ModelParams<f32>,
        model: ModelConfig,
        halting: HaltingConfig,
        train: TrainConfig,
    ) -> Result<Self> {
        params.set_gates(halting.gamma, halting.beta);
        Self::with_params(model, halting, train, Mode::Adaptive, params)
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        if data.channels != self.model.channels || data.side != self.model.image_size {
            return Err(Error::Config(format!(
                "dataset images are {}x{}x{}, model expects {}x{}x{}",
                data.channels, data.side, data.side, self.model.channels, self.model.image_size, self.model.image_size
            )));
        }
        if data.num_classes() > self.model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model head has {}",
                data.num_classes(),
                self.model.num_classes
            )));
        }
        Ok(())
    }

    fn trainable(&self) -> impl Fn(&str) -> bool {
        let gates = self.mode == Mode::Adaptive && self.halting.learn_gates;
        move |name: &str| gates || (name != GATE_SCALE && name != GATE_SHIFT)
    }

    pub fn current_lr(&self, step_in_epoch: usize) -> f64 {
        let steps = self.steps_per_epoch.max(1);
        cosine_lr(
            self.train.learning_rate,
            self.train.min_lr,
            self.train.warmup_epochs * steps,
            self.train.epochs * steps,
            self.epoch * steps + step_in_epoch,
        )
    }

    /// One shuffled pass over `data`.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<SplitMetrics> {
        self.check_dataset(data)?;
        let bs = self.train.batch_size;
        self.steps_per_epoch = data.len().div_ceil(bs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let flops = FlopsModel::new(&self.model);
        let mut acc = SplitMetrics::empty(self.model.num_layers);
        for (step, chunk) in order.chunks(bs).enumerate() {
            let (mut images, labels) = data.gather(chunk);
            if self.train.augment {
                for img in images.chunks_exact_mut(data.pixels()) {
                    data::augment(img, data.channels, data.side, self.train.crop_pad, &mut self.rng);
                }
            }
            let lr = self.current_lr(step);
            let trainable = self.trainable();
            let (batch, mut grads) = batch_gradients(&self.model, &self.halting, &self.target, self.mode, &self.params, &images, &labels, &flops)?;
            accumulate(&mut acc, &batch, chunk.len());
            clip_grad_norm(&mut grads, self.train.grad_clip);
            let hyper = AdamHyper {
                lr,
                beta1: self.train.beta1,
                beta2: self.train.beta2,
                eps: self.train.adam_eps,
                weight_decay: self.train.weight_decay,
            };
            adam_step(&mut self.params, &grads, &mut self.optimizer, hyper, trainable)?;
        }
        self.epoch += 1;
        Ok(acc.finish())
    }

    /// Runs every configured epoch, evaluating on `test` at the configured
    /// cadence and invoking `on_epoch` after each epoch.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::new();
        while self.epoch < self.train.epochs {
            let lr = self.current_lr(0);
            let train_m = self.train_epoch(train)?;
            let last = self.epoch == self.train.epochs;
            let due = self.train.eval_every > 0 && self.epoch % self.train.eval_every == 0;
            let test_m = match test {
                Some(t) if due || last => Some(evaluate(&self.model, &self.halting, self.mode, &self.params, t, self.train.batch_size)?),
                _ => None,
            };
            let m = EpochMetrics {
                epoch: self.epoch,
                lr,
                train: train_m,
                test: test_m,
            };
            on_epoch(self, &m)?;
            history.push(m);
        }
        Ok(history)
    }
}

/// Per-batch values before averaging.
struct BatchStats {
    task: f64,
    ponder: f64,
    distr: f64,
    total: f64,
    correct: usize,
    depth_sum: f64,
    live_sum: Vec<f64>,
    flops_sum: f64,
    layer_scores: Vec<f64>,
}

fn accumulate(acc: &mut SplitMetrics, b: &BatchStats, n: usize) {
    let w = n as f64;
    acc.samples += n;
    acc.task += b.task * w;
    acc.ponder += b.ponder * w;
    acc.distr += b.distr * w;
    acc.total += b.total * w;
    acc.accuracy += b.correct as f64;
    acc.mean_depth += b.depth_sum;
    acc.flops += b.flops_sum;
    for (a, v) in acc.live_per_layer.iter_mut().zip(&b.live_sum) {
        *a += v;
    }
    for (a, v) in acc.layer_scores.iter_mut().zip(&b.layer_scores) {
        *a += v * w;
    }
}

#[allow(clippy::too_many_arguments)]
fn batch_forward<'a>(
    g: &mut Graph<'a, f32>,
    model: &ModelConfig,
    hcfg: &HaltingConfig,
    target: &[f64],
    mode: Mode,
    params: &'a ModelParams<f32>,
    images: &[f32],
    labels: &[usize],
    flops: &FlopsModel,
    learn_gates: bool,
) -> Result<(crate::autodiff::Var, vit::BoundParams, BatchStats)> {
    let batch = labels.len();
    let w = params.bind(g, learn_gates);
    let layers = model.num_layers;
    match mode {
        Mode::Static => {
            let logits = vit::static_forward(g, model, &w, images, batch)?;
            let task = g.cross_entropy(logits, labels)?;
            let correct = count_correct(g.value(logits), labels);
            let k = model.num_tokens() as f64;
            let stats = BatchStats {
                task: g.value(task).item() as f64,
                ponder: 0.0,
                distr: 0.0,
                total: g.value(task).item() as f64,
                correct,
                depth_sum: (layers * batch) as f64,
                live_sum: vec![k * batch as f64; layers],
                flops_sum: (flops.static_flops() * batch as u64) as f64,
                layer_scores: vec![0.0; layers],
            };
            Ok((task, w, stats))
        }
        Mode::Adaptive => {
            let fwd = halting::adaptive_forward(g, model, hcfg, &w, images, batch)?;
            let (vars, bundle) = halting::total_loss(g, &fwd, labels, hcfg, target)?;
            let correct = count_correct(g.value(fwd.logits), labels);
            let mut live_sum = vec![0.0; layers];
            let mut flops_sum = 0.0;
            let mut depth_sum = 0.0;
            for s in &fwd.states {
                let live = infer::live_counts(s, layers, true);
                flops_sum += flops.count(&live) as f64;
                for (a, &n) in live_sum.iter_mut().zip(&live) {
                    *a += n as f64;
                }
                depth_sum += s.mean_depth();
            }
            let stats = BatchStats {
                task: bundle.task,
                ponder: bundle.ponder,
                distr: bundle.distr,
                total: bundle.task + hcfg.alpha_ponder * bundle.ponder + hcfg.alpha_distr * bundle.distr,
                correct,
                depth_sum,
                live_sum,
                flops_sum,
                layer_scores: bundle.layer_scores,
            };
            Ok((vars.total, w, stats))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn batch_gradients(
    model: &ModelConfig,
    hcfg: &HaltingConfig,
    target: &[f64],
    mode: Mode,
    params: &ModelParams<f32>,
    images: &[f32],
    labels: &[usize],
    flops: &FlopsModel,
) -> Result<(BatchStats, Weights<Tensor<f32>>)> {
    let mut g = Graph::new();
    let learn_gates = mode == Mode::Adaptive && hcfg.learn_gates;
    let (loss, w, stats) = batch_forward(&mut g, model, hcfg, target, mode, params, images, labels, flops, learn_gates)?;
    let mut grads: Grads<f32> = g.backward(loss)?;
    // frozen gates have no gradient and keep a zero entry
    let mut out = params.map(|_, t| Tensor::zeros(t.shape()));
    for ((_, v), (_, slot)) in w.named().into_iter().zip(out.named_mut()) {
        if let Some(t) = grads.take(*v) {
            *slot = t;
        }
    }
    Ok((stats, out))
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    labels.iter().enumerate().filter(|(i, &l)| vit::argmax(logits.row(*i)) == l).count()
}

/// No-grad evaluation over a whole split in batches of `batch_size`.
pub fn evaluate(
    model: &ModelConfig,
    hcfg: &HaltingConfig,
    mode: Mode,
    params: &ModelParams<f32>,
    data: &Dataset,
    batch_size: usize,
) -> Result<SplitMetrics> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let target = halting::target_distribution(model.num_layers, hcfg.target_depth, hcfg.target_std);
    let flops = FlopsModel::new(model);
    let mut acc = SplitMetrics::empty(model.num_layers);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, labels) = data.gather(chunk);
        let mut g = Graph::inference();
        let (_, _, stats) = batch_forward(&mut g, model, hcfg, &target, mode, params, &images, &labels, &flops, false)?;
        accumulate(&mut acc, &stats, chunk.len());
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(1.0, 0.0, 0, 100, 0), 1.0);
        assert!((cosine_lr(1.0, 0.0, 0, 100, 50) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 0.1, 0, 100, 100) - 0.1 < 1e-12);
        assert!((cosine_lr(1.0, 0.0, 10, 110, 4) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(1.0, 0.0, 10, 110, 10), 1.0);
    }

    #[test]
    fn cosine_is_non_increasing_after_warmup() {
        let lrs: Vec<f64> = (0..200).map(|s| cosine_lr(1.5e-3, 1e-5, 0, 200, s)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn scalar_model() -> (ModelParams<f64>, Weights<Tensor<f64>>) {
        let cfg = ModelConfig {
            image_size: 2,
            channels: 1,
            patch_size: 1,
            num_layers: 1,
            embed_dim: 2,
            num_heads: 1,
            mlp_ratio: 1,
            num_classes: 2,
        };
        let p = ModelParams::<f64>::init(&cfg, 5.0, -10.0, 0).unwrap();
        let g = p.map(|_, t| Tensor::zeros(t.shape()));
        (p, g)
    }

    #[test]
    fn zero_gradients_leave_params_and_decay_moments() {
        let (mut p, g) = scalar_model();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        st.m.head_bias = Tensor::from_vec(vec![0.5, -0.5]);
        adam_step(&mut p, &g, &mut st, AdamHyper::new(0.1), |_| true).unwrap();
        assert_eq!(st.m.head_bias.data(), &[0.45, -0.45]);
        // the moment itself moves the parameter, everything else is untouched
        assert_eq!(p.patch_weight, before.patch_weight);
        assert_eq!(p.cls_token, before.cls_token);
    }

    #[test]
    fn first_step_is_minus_lr() {
        let (mut p, mut g) = scalar_model();
        g.head_bias = Tensor::from_vec(vec![1.0, 1.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, AdamHyper::new(1e-3), |_| true).unwrap();
        for &v in p.head_bias.data() {
            assert!((v + 1e-3).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let (mut p, mut g) = scalar_model();
        g.layers[0].fc1_weight.data_mut()[0] = f64::NAN;
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &mut st, AdamHyper::new(1e-3), |_| true).unwrap_err();
        assert!(err.to_string().contains("blocks.0.mlp.fc1.weight"), "{err}");
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let (mut p, mut g) = scalar_model();
        g.gate_shift = Tensor::scalar(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, AdamHyper::new(1e-3), |n| n != GATE_SHIFT).unwrap();
        assert_eq!(p.beta(), -10.0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let (_, mut g) = scalar_model();
        g.head_bias = Tensor::from_vec(vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.head_bias.data()[0] - 0.6).abs() < 1e-12);
        assert!((clip_grad_norm(&mut g, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
