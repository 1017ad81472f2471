//! Inference with halted tokens physically removed.
//!
//! [`infer_compacted`] runs one sample at a time: after every block the
//! newly halted tokens are dropped from the token matrix, so later blocks do
//! less work; once the class token halts the sample exits early because the
//! aggregated output can no longer change. [`infer_batch_masked`] runs the
//! training-style masked pass and serves as the equivalence oracle.

use std::time::{Duration, Instant};

use crate::autodiff::Graph;
use crate::error::Result;
use crate::flops::FlopsModel;
use crate::halting::{self, HaltingConfig, HaltingState};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{self, ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceOptions {
    /// Stop once the class token halts.
    pub early_exit: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { early_exit: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    /// Tokens entering each layer; zero after an early exit.
    pub live_per_layer: Vec<usize>,
    /// Layers actually executed per token (index 0 is the class token,
    /// the rest are patches in raster order).
    pub token_depth: Vec<usize>,
    pub flops: u64,
    pub latency: Duration,
    pub predicted: usize,
    pub correct: Option<bool>,
    pub mean_depth: f64,
    /// Layer at which the class token halted.
    pub exit_layer: usize,
    pub state: HaltingState,
}

impl InferenceTrace {
    /// Depths of patch tokens as a `grid × grid` raster.
    pub fn depth_grid(&self) -> &[usize] {
        &self.token_depth[1..]
    }

    pub fn class_depth(&self) -> usize {
        self.token_depth[0]
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.correct = Some(self.predicted == label);
        self
    }
}

/// Compacted single-sample inference. Returns `1 × classes` logits.
pub fn infer_compacted<T: Scalar>(
    cfg: &ModelConfig,
    hcfg: &HaltingConfig,
    params: &ModelParams<T>,
    image: &[T],
    opts: InferenceOptions,
) -> Result<(Tensor<T>, InferenceTrace)> {
    let start = Instant::now();
    let k = cfg.num_tokens();
    let layers = cfg.num_layers;
    let mut g = Graph::inference();
    let w = params.bind(&mut g, false);
    let (gamma, beta) = (params.gamma(), params.beta());
    let halted_score = crate::tensor::sigmoid(gamma * T::zero() + beta).to_f64().unwrap();

    let mut t = vit::tokenize(&mut g, cfg, &w, image, 1)?;
    // original token index of each row of `t`
    let mut alive: Vec<usize> = (0..k).collect();
    let mut state = HaltingState::new(k);
    let mut remainder = vec![T::one(); k];
    let mut out: Option<Tensor<T>> = None;
    let mut live_per_layer = vec![0usize; layers];
    let mut executed = vec![0usize; k];
    let mut exit_layer = layers;

    for l in 1..=layers {
        live_per_layer[l - 1] = alive.len();
        for &i in &alive {
            executed[i] = l;
        }
        t = vit::block_forward(&mut g, cfg, &w.layers[l - 1], t, None, 1)?;

        let col = g.select_col(t, hcfg.embed_index)?;
        let scaled = g.mul_scalar(col, w.gate_scale)?;
        let shifted = g.add_scalar(scaled, w.gate_shift)?;
        let h_live = g.sigmoid(shifted)?;

        let last = l == layers;
        let mut h_full = vec![halted_score; k];
        let mut h_t = vec![T::zero(); k];
        for (row, &i) in alive.iter().enumerate() {
            let v = g.value(h_live).data()[row];
            h_t[i] = if last { T::one() } else { v };
            h_full[i] = if last { 1.0 } else { v.to_f64().unwrap() };
        }
        let outcome = state.step(&h_full, l, hcfg.epsilon)?;

        // class token is row 0 whenever it is still alive
        if alive.first() == Some(&0) {
            let p_c = if outcome.continuing[0] { h_t[0] } else { remainder[0] };
            let cls = g.value(t).row(0);
            let contrib: Vec<T> = cls.iter().map(|&v| v * p_c).collect();
            out = Some(match out {
                Some(mut o) => {
                    for (a, b) in o.data_mut().iter_mut().zip(&contrib) {
                        *a = *a + *b;
                    }
                    o
                }
                None => Tensor::new(&[1, cfg.embed_dim], contrib)?,
            });
        }
        for &i in &alive {
            if outcome.continuing[i] {
                remainder[i] = remainder[i] - h_t[i];
            }
        }

        let keep: Vec<usize> = (0..alive.len()).filter(|&row| state.live[alive[row]]).collect();
        let class_halted = !state.live[0];
        if class_halted {
            exit_layer = l;
        }
        if keep.is_empty() || (class_halted && opts.early_exit) || last {
            break;
        }
        if keep.len() != alive.len() {
            t = g.select_rows(t, &keep)?;
            alive = keep.iter().map(|&row| alive[row]).collect();
        }
    }

    let out = out.expect("class token contributes at its first layer");
    let out_v = g.constant(out);
    let logits = vit::classify(&mut g, &w, out_v)?;
    let logits = g.value(logits).clone();
    let predicted = vit::argmax(logits.data());
    let flops = FlopsModel::new(cfg).count(&live_per_layer);
    let mean_depth = executed.iter().sum::<usize>() as f64 / k as f64;
    Ok((
        logits,
        InferenceTrace {
            live_per_layer,
            token_depth: executed,
            flops,
            latency: start.elapsed(),
            predicted,
            correct: None,
            mean_depth,
            exit_layer,
            state,
        },
    ))
}

/// Batched masked adaptive forward (no grad). Returns `batch × classes`
/// logits and each sample's halting state.
pub fn infer_batch_masked<T: Scalar>(
    cfg: &ModelConfig,
    hcfg: &HaltingConfig,
    params: &ModelParams<T>,
    images: &[T],
    batch: usize,
) -> Result<(Tensor<T>, Vec<HaltingState>)> {
    let mut g = Graph::inference();
    let w = params.bind(&mut g, false);
    let fwd = halting::adaptive_forward(&mut g, cfg, hcfg, &w, images, batch)?;
    Ok((g.value(fwd.logits).clone(), fwd.states))
}

/// Static full-depth inference for one sample with its trace.
pub fn infer_static<T: Scalar>(cfg: &ModelConfig, params: &ModelParams<T>, image: &[T]) -> Result<(Tensor<T>, InferenceTrace)> {
    let start = Instant::now();
    let logits = vit::static_logits(cfg, params, image, 1)?;
    let k = cfg.num_tokens();
    let live = vec![k; cfg.num_layers];
    let predicted = vit::argmax(logits.data());
    Ok((
        logits,
        InferenceTrace {
            flops: FlopsModel::new(cfg).count(&live),
            live_per_layer: live,
            token_depth: vec![cfg.num_layers; k],
            latency: start.elapsed(),
            predicted,
            correct: None,
            mean_depth: cfg.num_layers as f64,
            exit_layer: cfg.num_layers,
            state: HaltingState::new(k),
        },
    ))
}

/// Tokens entering each layer under compacted execution, derived from a
/// completed halting state. With `early_exit`, layers after the class token
/// (index 0) halts are skipped and count zero.
pub fn live_counts(state: &HaltingState, layers: usize, early_exit: bool) -> Vec<usize> {
    let depths = state.depths();
    let exit = if early_exit { depths[0] } else { layers };
    (1..=layers)
        .map(|l| if l > exit { 0 } else { depths.iter().filter(|&&n| n >= l).count() })
        .collect()
}

/// Largest elementwise relative difference.
pub fn max_relative_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64().unwrap(), y.to_f64().unwrap());
            (x - y).abs() / x.abs().max(y.abs()).max(1e-12)
        })
        .fold(0.0, f64::max)
}
