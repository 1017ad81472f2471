//! The static vision transformer: patch tokenizer, pre-norm blocks and the
//! classification head, with optional token masks threaded through blocks.

use rand::Rng;
use rand_distr::StandardNormal;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    /// Desk-scale configuration: 32×32 RGB, 4×4 patches, 6 layers of width 64.
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            num_layers: 6,
            embed_dim: 64,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 10,
        }
    }
}

impl ModelConfig {
    /// DeiT-Tiny shape: 224×224, 16×16 patches, 12 layers of width 192.
    pub fn deit_tiny() -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            num_layers: 12,
            embed_dim: 192,
            num_heads: 3,
            mlp_ratio: 4,
            num_classes: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 || self.channels == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return fail("num_layers, channels, num_classes and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

// ── weights ─────────────────────────────────────────────────────────

/// Per-block weights, generic over the slot type so the same layout holds
/// tensors, gradients, optimizer moments or graph variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<W> {
    pub norm1_gain: W,
    pub norm1_bias: W,
    pub qkv_weight: W,
    pub qkv_bias: W,
    pub proj_weight: W,
    pub proj_bias: W,
    pub norm2_gain: W,
    pub norm2_bias: W,
    pub fc1_weight: W,
    pub fc1_bias: W,
    pub fc2_weight: W,
    pub fc2_bias: W,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<W> {
    pub patch_weight: W,
    pub patch_bias: W,
    pub pos_embed: W,
    pub cls_token: W,
    pub layers: Vec<LayerWeights<W>>,
    pub head_norm_gain: W,
    pub head_norm_bias: W,
    pub head_weight: W,
    pub head_bias: W,
    /// Halting score scale, shared by every layer and token.
    pub gate_scale: W,
    /// Halting score shift, shared by every layer and token.
    pub gate_shift: W,
}

pub type ModelParams<T> = Weights<Tensor<T>>;

pub const GATE_SCALE: &str = "halting.gamma";
pub const GATE_SHIFT: &str = "halting.beta";

impl<W> LayerWeights<W> {
    fn fields(&self) -> [(&'static str, &W); 12] {
        [
            ("norm1.gain", &self.norm1_gain),
            ("norm1.bias", &self.norm1_bias),
            ("attn.qkv.weight", &self.qkv_weight),
            ("attn.qkv.bias", &self.qkv_bias),
            ("attn.proj.weight", &self.proj_weight),
            ("attn.proj.bias", &self.proj_bias),
            ("norm2.gain", &self.norm2_gain),
            ("norm2.bias", &self.norm2_bias),
            ("mlp.fc1.weight", &self.fc1_weight),
            ("mlp.fc1.bias", &self.fc1_bias),
            ("mlp.fc2.weight", &self.fc2_weight),
            ("mlp.fc2.bias", &self.fc2_bias),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut W); 12] {
        [
            ("norm1.gain", &mut self.norm1_gain),
            ("norm1.bias", &mut self.norm1_bias),
            ("attn.qkv.weight", &mut self.qkv_weight),
            ("attn.qkv.bias", &mut self.qkv_bias),
            ("attn.proj.weight", &mut self.proj_weight),
            ("attn.proj.bias", &mut self.proj_bias),
            ("norm2.gain", &mut self.norm2_gain),
            ("norm2.bias", &mut self.norm2_bias),
            ("mlp.fc1.weight", &mut self.fc1_weight),
            ("mlp.fc1.bias", &mut self.fc1_bias),
            ("mlp.fc2.weight", &mut self.fc2_weight),
            ("mlp.fc2.bias", &mut self.fc2_bias),
        ]
    }

    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &W) -> Result<U, E>) -> Result<LayerWeights<U>, E> {
        let mut g = |n: &str, w: &W| f(&format!("{prefix}.{n}"), w);
        Ok(LayerWeights {
            norm1_gain: g("norm1.gain", &self.norm1_gain)?,
            norm1_bias: g("norm1.bias", &self.norm1_bias)?,
            qkv_weight: g("attn.qkv.weight", &self.qkv_weight)?,
            qkv_bias: g("attn.qkv.bias", &self.qkv_bias)?,
            proj_weight: g("attn.proj.weight", &self.proj_weight)?,
            proj_bias: g("attn.proj.bias", &self.proj_bias)?,
            norm2_gain: g("norm2.gain", &self.norm2_gain)?,
            norm2_bias: g("norm2.bias", &self.norm2_bias)?,
            fc1_weight: g("mlp.fc1.weight", &self.fc1_weight)?,
            fc1_bias: g("mlp.fc1.bias", &self.fc1_bias)?,
            fc2_weight: g("mlp.fc2.weight", &self.fc2_weight)?,
            fc2_bias: g("mlp.fc2.bias", &self.fc2_bias)?,
        })
    }
}

impl<W> Weights<W> {
    /// Every slot with its stable dotted name, in a fixed structural order.
    pub fn named(&self) -> Vec<(String, &W)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_weight),
            ("patch_embed.bias".to_string(), &self.patch_bias),
            ("pos_embed".to_string(), &self.pos_embed),
            ("cls_token".to_string(), &self.cls_token),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.fields().into_iter().map(|(n, w)| (format!("blocks.{i}.{n}"), w)));
        }
        out.extend([
            ("head.norm.gain".to_string(), &self.head_norm_gain),
            ("head.norm.bias".to_string(), &self.head_norm_bias),
            ("head.weight".to_string(), &self.head_weight),
            ("head.bias".to_string(), &self.head_bias),
            (GATE_SCALE.to_string(), &self.gate_scale),
            (GATE_SHIFT.to_string(), &self.gate_shift),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut W)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &mut self.patch_weight),
            ("patch_embed.bias".to_string(), &mut self.patch_bias),
            ("pos_embed".to_string(), &mut self.pos_embed),
            ("cls_token".to_string(), &mut self.cls_token),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.fields_mut().into_iter().map(|(n, w)| (format!("blocks.{i}.{n}"), w)));
        }
        out.extend([
            ("head.norm.gain".to_string(), &mut self.head_norm_gain),
            ("head.norm.bias".to_string(), &mut self.head_norm_bias),
            ("head.weight".to_string(), &mut self.head_weight),
            ("head.bias".to_string(), &mut self.head_bias),
            (GATE_SCALE.to_string(), &mut self.gate_scale),
            (GATE_SHIFT.to_string(), &mut self.gate_shift),
        ]);
        out
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &W) -> Result<U, E>) -> Result<Weights<U>, E> {
        Ok(Weights {
            patch_weight: f("patch_embed.weight", &self.patch_weight)?,
            patch_bias: f("patch_embed.bias", &self.patch_bias)?,
            pos_embed: f("pos_embed", &self.pos_embed)?,
            cls_token: f("cls_token", &self.cls_token)?,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.try_map(&format!("blocks.{i}"), &mut f))
                .collect::<Result<_, E>>()?,
            head_norm_gain: f("head.norm.gain", &self.head_norm_gain)?,
            head_norm_bias: f("head.norm.bias", &self.head_norm_bias)?,
            head_weight: f("head.weight", &self.head_weight)?,
            head_bias: f("head.bias", &self.head_bias)?,
            gate_scale: f(GATE_SCALE, &self.gate_scale)?,
            gate_shift: f(GATE_SHIFT, &self.gate_shift)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &W) -> U) -> Weights<U> {
        self.try_map::<U, std::convert::Infallible>(|n, w| Ok(f(n, w)))
            .unwrap_or_else(|e| match e {})
    }
}

/// Expected shape of every named parameter.
pub fn param_shapes(cfg: &ModelConfig) -> Weights<Vec<usize>> {
    let e = cfg.embed_dim;
    let hid = cfg.hidden_dim();
    let layer = LayerWeights {
        norm1_gain: vec![e],
        norm1_bias: vec![e],
        qkv_weight: vec![e, 3 * e],
        qkv_bias: vec![3 * e],
        proj_weight: vec![e, e],
        proj_bias: vec![e],
        norm2_gain: vec![e],
        norm2_bias: vec![e],
        fc1_weight: vec![e, hid],
        fc1_bias: vec![hid],
        fc2_weight: vec![hid, e],
        fc2_bias: vec![e],
    };
    Weights {
        patch_weight: vec![cfg.patch_dim(), e],
        patch_bias: vec![e],
        pos_embed: vec![cfg.num_tokens(), e],
        cls_token: vec![e],
        layers: vec![layer; cfg.num_layers],
        head_norm_gain: vec![e],
        head_norm_bias: vec![e],
        head_weight: vec![e, cfg.num_classes],
        head_bias: vec![cfg.num_classes],
        gate_scale: vec![],
        gate_shift: vec![],
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Truncated-normal(0.02) weights, zero biases, unit layernorm gains.
    pub fn init(cfg: &ModelConfig, gate_scale: f64, gate_shift: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = param_shapes(cfg);
        Ok(shapes.map(|name, shape| {
            if name == GATE_SCALE {
                Tensor::scalar(T::c(gate_scale))
            } else if name == GATE_SHIFT {
                Tensor::scalar(T::c(gate_shift))
            } else if name.ends_with(".gain") {
                Tensor::ones(shape)
            } else if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| T::c(trunc_normal(&mut rng) * 0.02)).collect();
                Tensor::new(shape, data).expect("shape product")
            }
        }))
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let shapes = param_shapes(cfg);
        if shapes.layers.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "model has {} blocks, config expects {}",
                self.layers.len(),
                shapes.layers.len()
            )));
        }
        for ((name, t), (_, s)) in self.named().into_iter().zip(shapes.named()) {
            if t.shape() != s.as_slice() {
                return Err(Error::Shape(format!("{name}: {:?}, expected {s:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn gamma(&self) -> T {
        self.gate_scale.item()
    }

    pub fn beta(&self) -> T {
        self.gate_shift.item()
    }

    pub fn set_gates(&mut self, gamma: f64, beta: f64) {
        self.gate_scale = Tensor::scalar(T::c(gamma));
        self.gate_shift = Tensor::scalar(T::c(beta));
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        self.map(|_, t| t.cast())
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Binds every tensor as a borrowed graph leaf. Gate scalars require grad
    /// only when `train_gates` is set.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>, train_gates: bool) -> BoundParams {
        let mut out = self.map(|_, _| Var::placeholder());
        for ((name, t), (_, slot)) in self.named().into_iter().zip(out.named_mut()) {
            *slot = if name == GATE_SCALE || name == GATE_SHIFT {
                g.param_with(t, train_gates)
            } else {
                g.param(t)
            };
        }
        out
    }
}

impl Var {
    fn placeholder() -> Var {
        // overwritten by `bind` before use
        Var::from_index(usize::MAX)
    }
}

pub type BoundParams = Weights<Var>;

/// Standard normal truncated to `[-2, 2]` by rejection.
fn trunc_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

// ── forward pieces ──────────────────────────────────────────────────

/// Splits `batch` images (each C×H×W, row-major) into flattened
/// non-overlapping patches: `(batch·P) × (C·p·p)`, patches in raster order.
pub fn patchify<T: Scalar>(cfg: &ModelConfig, images: &[T], batch: usize) -> Result<Tensor<T>> {
    let px = cfg.pixels();
    if images.len() != batch * px {
        return Err(Error::Shape(format!(
            "expected {batch} images of {}x{}x{} ({} values), got {} values",
            cfg.channels,
            cfg.image_size,
            cfg.image_size,
            batch * px,
            images.len()
        )));
    }
    let (s, p, g, c) = (cfg.image_size, cfg.patch_size, cfg.grid(), cfg.channels);
    let mut data = Vec::with_capacity(images.len());
    for b in 0..batch {
        let img = &images[b * px..(b + 1) * px];
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c {
                    for dy in 0..p {
                        let row = ch * s * s + (gy * p + dy) * s + gx * p;
                        data.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(&[batch * cfg.num_patches(), cfg.patch_dim()], data)
}

/// Image batch → `(batch·K) × E` positioned tokens, class token first.
pub fn tokenize<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    cfg: &ModelConfig,
    w: &BoundParams,
    images: &[T],
    batch: usize,
) -> Result<Var> {
    let patches = g.constant(patchify(cfg, images, batch)?);
    let proj = g.matmul(patches, w.patch_weight)?;
    let proj = g.add_row_bias(proj, w.patch_bias)?;
    g.tokens(proj, w.cls_token, w.pos_embed, batch)
}

/// Pre-norm transformer block over `(batch·tokens) × E` rows.
///
/// With a mask, masked rows are excluded as attention keys and their outputs
/// are zeroed, so a halted token stays zero and reads `sigmoid(beta)` as its
/// halting score.
pub fn block_forward<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    cfg: &ModelConfig,
    layer: &LayerWeights<Var>,
    x: Var,
    mask: Option<(&[bool], Var)>,
    batch: usize,
) -> Result<Var> {
    let eps = T::c(LAYERNORM_EPS);
    let h = g.layernorm(x, layer.norm1_gain, layer.norm1_bias, eps)?;
    let qkv = g.matmul(h, layer.qkv_weight)?;
    let qkv = g.add_row_bias(qkv, layer.qkv_bias)?;
    let a = g.attention(qkv, mask.map(|(m, _)| m), batch, cfg.num_heads)?;
    let a = g.matmul(a, layer.proj_weight)?;
    let a = g.add_row_bias(a, layer.proj_bias)?;
    let x = g.add(x, a)?;

    let h = g.layernorm(x, layer.norm2_gain, layer.norm2_bias, eps)?;
    let f = g.matmul(h, layer.fc1_weight)?;
    let f = g.add_row_bias(f, layer.fc1_bias)?;
    let f = g.gelu(f)?;
    let f = g.matmul(f, layer.fc2_weight)?;
    let f = g.add_row_bias(f, layer.fc2_bias)?;
    let x = g.add(x, f)?;
    match mask {
        Some((_, m)) => g.scale_rows(x, m),
        None => Ok(x),
    }
}

/// Layernorm + linear head on `B × E` output tokens.
pub fn classify<'a, T: Scalar>(g: &mut Graph<'a, T>, w: &BoundParams, out_tokens: Var) -> Result<Var> {
    let h = g.layernorm(out_tokens, w.head_norm_gain, w.head_norm_bias, T::c(LAYERNORM_EPS))?;
    let logits = g.matmul(h, w.head_weight)?;
    g.add_row_bias(logits, w.head_bias)
}

/// Row indices of the class token for each sample of a packed batch.
pub fn class_rows(batch: usize, tokens: usize) -> Vec<usize> {
    (0..batch).map(|b| b * tokens).collect()
}

/// Standard ViT forward: all tokens through all layers, final class token
/// classified. Returns `batch × classes` logits.
pub fn static_forward<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    cfg: &ModelConfig,
    w: &BoundParams,
    images: &[T],
    batch: usize,
) -> Result<Var> {
    let mut t = tokenize(g, cfg, w, images, batch)?;
    for layer in &w.layers {
        t = block_forward(g, cfg, layer, t, None, batch)?;
    }
    let cls = g.select_rows(t, &class_rows(batch, cfg.num_tokens()))?;
    classify(g, w, cls)
}

/// Convenience: no-grad static logits for a batch.
pub fn static_logits<T: Scalar>(cfg: &ModelConfig, params: &ModelParams<T>, images: &[T], batch: usize) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let w = params.bind(&mut g, false);
    let logits = static_forward(&mut g, cfg, &w, images, batch)?;
    Ok(g.value(logits).clone())
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            channels: 2,
            patch_size: 4,
            num_layers: 2,
            embed_dim: 8,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }

    #[test]
    fn token_counts() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.num_tokens(), 65);
        assert_eq!(ModelConfig::deit_tiny().num_tokens(), 197);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.patch_size = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::deit_tiny().validate().is_ok());
    }

    #[test]
    fn deit_tiny_params_construct() {
        let p = ModelParams::<f32>::init(&ModelConfig::deit_tiny(), 5.0, -10.0, 0).unwrap();
        p.check_shapes(&ModelConfig::deit_tiny()).unwrap();
        assert_eq!(p.layers.len(), 12);
        // two halting scalars, nothing else added for halting
        assert_eq!(p.gate_scale.len() + p.gate_shift.len(), 2);
    }

    #[test]
    fn patchify_raster_order() {
        let cfg = ModelConfig {
            image_size: 4,
            channels: 1,
            patch_size: 2,
            ..tiny()
        };
        let img: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let p = patchify(&cfg, &img, 1).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(patchify(&cfg, &img[..15], 1).is_err());
    }

    #[test]
    fn zero_image_tokens() {
        let cfg = tiny();
        let mut p = ModelParams::<f32>::init(&cfg, 5.0, -10.0, 1).unwrap();
        p.patch_weight = Tensor::zeros(p.patch_weight.shape());
        p.pos_embed = Tensor::zeros(p.pos_embed.shape());
        let mut g = Graph::inference();
        let w = p.bind(&mut g, false);
        let img = vec![0.0; cfg.pixels()];
        let t = tokenize(&mut g, &cfg, &w, &img, 1).unwrap();
        let t = g.value(t);
        assert_eq!(t.shape(), &[cfg.num_tokens(), cfg.embed_dim]);
        assert_eq!(t.row(0), p.cls_token.data());
        assert!(t.data()[cfg.embed_dim..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_mask_matches_unmasked_block() {
        let cfg = tiny();
        let p = ModelParams::<f32>::init(&cfg, 5.0, -10.0, 2).unwrap();
        let img: Vec<f32> = (0..cfg.pixels()).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut g = Graph::inference();
        let w = p.bind(&mut g, false);
        let t = tokenize(&mut g, &cfg, &w, &img, 1).unwrap();
        let plain = block_forward(&mut g, &cfg, &w.layers[0], t, None, 1).unwrap();
        let ones = vec![true; cfg.num_tokens()];
        let mv = g.constant(Tensor::ones(&[cfg.num_tokens()]));
        let masked = block_forward(&mut g, &cfg, &w.layers[0], t, Some((&ones, mv)), 1).unwrap();
        assert_eq!(g.value(plain), g.value(masked));
    }

    #[test]
    fn class_only_block_is_finite() {
        let cfg = tiny();
        let p = ModelParams::<f32>::init(&cfg, 5.0, -10.0, 3).unwrap();
        let mut g = Graph::inference();
        let w = p.bind(&mut g, false);
        let x = g.constant(Tensor::new(&[1, cfg.embed_dim], (0..8).map(|v| v as f32 * 0.1).collect()).unwrap());
        let y = block_forward(&mut g, &cfg, &w.layers[0], x, None, 1).unwrap();
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let cfg = tiny();
        let mut p = ModelParams::<f32>::init(&cfg, 5.0, -10.0, 4).unwrap();
        p.head_weight = Tensor::zeros(p.head_weight.shape());
        let img = vec![0.5; cfg.pixels()];
        let logits = static_logits(&cfg, &p, &img, 1).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_classes() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1, 10]));
        let ce = g.cross_entropy(l, &[3]).unwrap();
        assert!((g.value(ce).item() - 10f64.ln()).abs() < 1e-12);
        assert!((10f64.ln() - 2.3026).abs() < 1e-4);
    }

    #[test]
    fn head_preserves_ordering_on_identity() {
        let cfg = ModelConfig {
            embed_dim: 4,
            num_heads: 2,
            num_classes: 4,
            ..tiny()
        };
        let mut p = ModelParams::<f64>::init(&cfg, 5.0, -10.0, 0).unwrap();
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        p.head_weight = eye;
        let mut g = Graph::inference();
        let w = p.bind(&mut g, false);
        let x = g.constant(Tensor::new(&[1, 4], vec![0.1, 3.0, -1.0, 0.5]).unwrap());
        let logits = classify(&mut g, &w, x).unwrap();
        assert_eq!(argmax(g.value(logits).data()), 1);
    }
}
