//! Per-token adaptive halting.
//!
//! Each token gets a halting score `h = sigmoid(gamma * t[e] + beta)` after
//! every block; a token stops once its cumulative score reaches `1 - eps`,
//! and the final layer forces `h = 1`. The remainder `r = 1 - Σ_{l<N} h`
//! becomes the probability mass of the halting layer, so every token's
//! per-layer probabilities sum to one. The class token's states are averaged
//! with those probabilities to form the classifier input.
//!
//! Two representations live here: [`HaltingState`] holds the host-side
//! (f64) bookkeeping that decides masks, and [`adaptive_forward`] mirrors the
//! same decisions as differentiable graph ops for training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};
use crate::vit::{self, BoundParams, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HaltingConfig {
    pub epsilon: f64,
    /// Embedding index whose value drives the halting score.
    pub embed_index: usize,
    pub gamma: f64,
    pub beta: f64,
    pub alpha_ponder: f64,
    pub alpha_distr: f64,
    /// Layer (1-based) the distributional prior is centred on.
    pub target_depth: f64,
    /// Width of the Gaussian prior, in layers.
    pub target_std: f64,
    /// Whether gamma and beta receive gradients.
    pub learn_gates: bool,
}

impl Default for HaltingConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            embed_index: 0,
            gamma: 5.0,
            beta: -10.0,
            alpha_ponder: 5e-4,
            alpha_distr: 0.1,
            target_depth: 3.0,
            target_std: 1.0,
            learn_gates: false,
        }
    }
}

impl HaltingConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return fail(format!("epsilon must be in (0, 1), got {}", self.epsilon));
        }
        if self.embed_index >= model.embed_dim {
            return fail(format!(
                "embed_index {} out of range for embed_dim {}",
                self.embed_index, model.embed_dim
            ));
        }
        if self.alpha_ponder < 0.0 || self.alpha_distr < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if !(self.target_depth >= 1.0 && self.target_depth <= model.num_layers as f64) {
            return fail(format!(
                "target_depth {} outside [1, {}]",
                self.target_depth, model.num_layers
            ));
        }
        if self.target_std.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return fail("target_std must be positive".into());
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        1.0 - self.epsilon
    }
}

// ── host-side bookkeeping ────────────────────────────────────────────

/// Halting bookkeeping for one sample's `K` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct HaltingState {
    pub cumul: Vec<f64>,
    pub remainder: Vec<f64>,
    pub live: Vec<bool>,
    /// 1-based layer at which each token halted.
    pub halt_layer: Vec<Option<usize>>,
    /// Running `N + r` per token.
    pub ponder: Vec<f64>,
    /// Recorded scores per completed layer (halted tokens keep their masked score).
    pub h_record: Vec<Vec<f64>>,
    /// Halting probabilities per completed layer.
    pub p_record: Vec<Vec<f64>>,
}

/// What one layer's update decided for each token.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Live at entry and still live afterwards: `p = h`.
    pub continuing: Vec<bool>,
    /// Live at entry and halted at this layer: `p = r`.
    pub halted_now: Vec<bool>,
    pub p: Vec<f64>,
}

impl HaltingState {
    pub fn new(tokens: usize) -> Self {
        Self {
            cumul: vec![0.0; tokens],
            remainder: vec![1.0; tokens],
            live: vec![true; tokens],
            halt_layer: vec![None; tokens],
            ponder: vec![0.0; tokens],
            h_record: Vec::new(),
            p_record: Vec::new(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.cumul.len()
    }

    pub fn layers_done(&self) -> usize {
        self.h_record.len()
    }

    pub fn all_halted(&self) -> bool {
        self.live.iter().all(|l| !l)
    }

    pub fn live_count(&self) -> usize {
        self.live.iter().filter(|&&l| l).count()
    }

    /// Applies one layer's scores. `layer` is 1-based and must follow the
    /// previous call. Tokens halted earlier are left untouched (`p = 0`).
    pub fn step(&mut self, h: &[f64], layer: usize, epsilon: f64) -> Result<StepOutcome> {
        let k = self.tokens();
        if h.len() != k {
            return Err(Error::Shape(format!("{} scores for {k} tokens", h.len())));
        }
        if layer != self.layers_done() + 1 {
            return Err(Error::State(format!(
                "layer {layer} after {} completed layers",
                self.layers_done()
            )));
        }
        let threshold = 1.0 - epsilon;
        let mut out = StepOutcome {
            continuing: vec![false; k],
            halted_now: vec![false; k],
            p: vec![0.0; k],
        };
        for i in 0..k {
            if !self.live[i] {
                continue;
            }
            self.ponder[i] += 1.0;
            self.cumul[i] += h[i];
            if self.cumul[i] < threshold {
                self.remainder[i] -= h[i];
                out.p[i] = h[i];
                out.continuing[i] = true;
            } else {
                self.ponder[i] += self.remainder[i];
                self.halt_layer[i] = Some(layer);
                self.live[i] = false;
                out.p[i] = self.remainder[i];
                out.halted_now[i] = true;
            }
        }
        self.h_record.push(h.to_vec());
        self.p_record.push(out.p.clone());
        Ok(out)
    }

    /// `(1/K) Σ (N_k + r_k)`; every token must have halted.
    pub fn ponder_loss(&self) -> Result<f64> {
        if !self.all_halted() {
            return Err(Error::State(format!(
                "ponder loss requested with {} live tokens",
                self.live_count()
            )));
        }
        Ok(self.ponder.iter().sum::<f64>() / self.tokens() as f64)
    }

    /// Mean halting layer over tokens. Tokens still live count as having run
    /// every completed layer.
    pub fn mean_depth(&self) -> f64 {
        let done = self.layers_done();
        let total: usize = self.halt_layer.iter().map(|n| n.unwrap_or(done)).sum();
        total as f64 / self.tokens() as f64
    }

    pub fn depths(&self) -> Vec<usize> {
        let done = self.layers_done();
        self.halt_layer.iter().map(|n| n.unwrap_or(done)).collect()
    }

    /// Per-layer mean of recorded scores over this sample's tokens.
    pub fn layer_scores(&self) -> Vec<f64> {
        halting_distribution(&self.h_record)
    }
}

/// Per-layer halting scores for `L` live tokens at the final layer.
pub fn final_layer_scores(tokens: usize) -> Vec<f64> {
    vec![1.0; tokens]
}

/// `t_o += weight · class_state`.
pub fn accumulate_output(out: &mut [f64], class_state: &[f64], weight: f64) {
    for (o, &c) in out.iter_mut().zip(class_state) {
        *o += weight * c;
    }
}

/// Mean over tokens of each layer's recorded scores.
pub fn halting_distribution(h_record: &[Vec<f64>]) -> Vec<f64> {
    h_record
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64)
        .collect()
}

/// Gaussian-shaped prior over layers `1..=L` centred on the target depth,
/// normalized to sum to one.
pub fn target_distribution(num_layers: usize, target_depth: f64, target_std: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=num_layers)
        .map(|l| {
            let d = l as f64 - target_depth;
            (-d * d / (2.0 * target_std * target_std)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// `KL(Ĥ || target)` with `Ĥ = H / ΣH`; zero entries contribute nothing.
pub fn distr_loss(h: &[f64], target: &[f64]) -> Result<f64> {
    if h.len() != target.len() {
        return Err(Error::Shape(format!("{} layers vs target {}", h.len(), target.len())));
    }
    if target.iter().any(|&t| t <= 0.0) {
        return Err(Error::Config("target distribution contains a zero".into()));
    }
    let s: f64 = h.iter().sum();
    Ok(h.iter()
        .zip(target)
        .filter(|(&v, _)| v > 0.0)
        .map(|(&v, &t)| {
            let p = v / s;
            p * (p / t).ln()
        })
        .sum())
}

// ── differentiable forward ───────────────────────────────────────────

/// Graph handles and host state produced by a masked adaptive forward pass.
pub struct AdaptiveForward {
    pub logits: Var,
    /// Batch mean of `N + r` over all tokens.
    pub ponder: Var,
    /// Per-layer mean halting score (length L), averaged over the batch.
    pub layer_scores: Var,
    pub states: Vec<HaltingState>,
}

/// Runs the masked adaptive forward pass for a packed batch.
///
/// All `K` tokens flow through every layer; halted tokens are zeroed on entry
/// and excluded as attention keys. Halting decisions come from the host-side
/// [`HaltingState`]s, and the same decisions select which score or remainder
/// flows into each differentiable quantity.
pub fn adaptive_forward<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    cfg: &ModelConfig,
    hcfg: &HaltingConfig,
    w: &BoundParams,
    images: &[T],
    batch: usize,
) -> Result<AdaptiveForward> {
    let k = cfg.num_tokens();
    let n = batch * k;
    let layers = cfg.num_layers;
    let cls_rows = vit::class_rows(batch, k);
    let mut states = vec![HaltingState::new(k); batch];

    let mut t = vit::tokenize(g, cfg, w, images, batch)?;
    let mut remainder = g.constant(Tensor::ones(&[n]));
    let mut out: Option<Var> = None;
    let mut layer_scores = Vec::with_capacity(layers);
    let mut mask = vec![true; n];

    for l in 1..=layers {
        let mask_t = Tensor::from_vec(mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect());
        let mask_v = g.constant(mask_t.clone());
        let x = g.scale_rows(t, mask_v)?;
        t = vit::block_forward(g, cfg, &w.layers[l - 1], x, Some((&mask, mask_v)), batch)?;

        let col = g.select_col(t, hcfg.embed_index)?;
        let scaled = g.mul_scalar(col, w.gate_scale)?;
        let shifted = g.add_scalar(scaled, w.gate_shift)?;
        let h_raw = g.sigmoid(shifted)?;

        let last = l == layers;
        let raw_vals = g.value(h_raw).data();
        let host_h: Vec<f64> = raw_vals
            .iter()
            .zip(&mask)
            .map(|(&v, &live)| if last && live { 1.0 } else { v.to_f64().unwrap() })
            .collect();

        let mut continuing = Vec::with_capacity(n);
        let mut halting = Vec::with_capacity(n);
        for (b, st) in states.iter_mut().enumerate() {
            let o = st.step(&host_h[b * k..(b + 1) * k], l, hcfg.epsilon)?;
            continuing.extend(o.continuing.iter().map(|&c| if c { T::one() } else { T::zero() }));
            halting.extend(o.halted_now.iter().map(|&c| if c { T::one() } else { T::zero() }));
        }

        // score actually used by the halting rule, and the recorded score
        let (h_used, h_rec) = if last {
            let ones = g.constant(Tensor::ones(&[n]));
            let live = g.constant(mask_t.clone());
            let dead = g.constant(mask_t.map(|m| T::one() - m));
            let dead_scores = g.mul(h_raw, dead)?;
            (ones, g.add(live, dead_scores)?)
        } else {
            (h_raw, h_raw)
        };

        let cont_v = g.constant(Tensor::from_vec(continuing));
        let halt_v = g.constant(Tensor::from_vec(halting));
        let p_cont = g.mul(h_used, cont_v)?;
        let p_halt = g.mul(remainder, halt_v)?;
        let p = g.add(p_cont, p_halt)?;
        remainder = g.sub(remainder, p_cont)?;

        let p_cls = g.select_rows(p, &cls_rows)?;
        let t_cls = g.select_rows(t, &cls_rows)?;
        let contrib = g.scale_rows(t_cls, p_cls)?;
        out = Some(match out {
            Some(o) => g.add(o, contrib)?,
            None => contrib,
        });

        layer_scores.push(g.mean(h_rec)?);
        for (b, st) in states.iter().enumerate() {
            mask[b * k..(b + 1) * k].copy_from_slice(&st.live);
        }
    }

    let out = out.ok_or_else(|| Error::Config("model has no layers".into()))?;
    let logits = vit::classify(g, w, out)?;

    let mean_n = states
        .iter()
        .flat_map(|s| s.halt_layer.iter())
        .map(|n| n.unwrap_or(layers) as f64)
        .sum::<f64>()
        / n as f64;
    let mean_r = g.mean(remainder)?;
    let ponder = g.add_const(mean_r, T::c(mean_n))?;
    let layer_scores = g.concat(&layer_scores)?;

    Ok(AdaptiveForward {
        logits,
        ponder,
        layer_scores,
        states,
    })
}

/// Graph handles for each loss term plus their host values.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub task: Var,
    pub ponder: Var,
    pub distr: Var,
    pub total: Var,
}

/// Loss values with diagnostics, in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub task: f64,
    pub ponder: f64,
    pub distr: f64,
    pub total: f64,
    pub mean_depth: f64,
    pub layer_scores: Vec<f64>,
}

/// `task + alpha_p · ponder + alpha_d · KL(normalize(H) || target)`.
pub fn total_loss<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    fwd: &AdaptiveForward,
    labels: &[usize],
    hcfg: &HaltingConfig,
    target: &[f64],
) -> Result<(LossVars, LossBundle)> {
    let task = g.cross_entropy(fwd.logits, labels)?;
    let normalized = g.normalize(fwd.layer_scores)?;
    let target_t: Vec<T> = target.iter().map(|&v| T::c(v)).collect();
    let distr = g.kl_div(normalized, &target_t)?;
    let wp = g.scale(fwd.ponder, T::c(hcfg.alpha_ponder))?;
    let wd = g.scale(distr, T::c(hcfg.alpha_distr))?;
    let total = g.add(task, wp)?;
    let total = g.add(total, wd)?;

    let f = |v: Var| g.value(v).item().to_f64().unwrap();
    let bundle = LossBundle {
        task: f(task),
        ponder: f(fwd.ponder),
        distr: f(distr),
        total: f(total),
        mean_depth: fwd.states.iter().map(HaltingState::mean_depth).sum::<f64>() / fwd.states.len() as f64,
        layer_scores: g.value(fwd.layer_scores).data().iter().map(|v| v.to_f64().unwrap()).collect(),
    };
    Ok((
        LossVars {
            task,
            ponder: fwd.ponder,
            distr,
            total,
        },
        bundle,
    ))
}

/// Halting score of one embedding value.
pub fn halting_score(value: f64, gamma: f64, beta: f64) -> f64 {
    tensor::sigmoid(gamma * value + beta)
}
