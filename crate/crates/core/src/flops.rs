//! Analytic cost model for the transformer.
//!
//! Convention: one multiply-accumulate counts as one FLOP. This is the
//! convention behind the commonly quoted 1.3G figure for DeiT-Tiny at 224²;
//! [`FlopsModel::mac2`] converts to the two-FLOPs-per-MAC convention.
//! Softmax, GeLU, layernorm and residual adds are not counted.

use crate::vit::ModelConfig;

pub const CONVENTION: &str = "1 multiply-accumulate = 1 FLOP; matmul and attention products only";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsModel {
    pub embed_dim: u64,
    pub hidden_dim: u64,
    pub patch_dim: u64,
    pub num_patches: u64,
    pub num_tokens: u64,
    pub num_layers: usize,
    pub num_classes: u64,
}

impl FlopsModel {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            embed_dim: cfg.embed_dim as u64,
            hidden_dim: cfg.hidden_dim() as u64,
            patch_dim: cfg.patch_dim() as u64,
            num_patches: cfg.num_patches() as u64,
            num_tokens: cfg.num_tokens() as u64,
            num_layers: cfg.num_layers,
            num_classes: cfg.num_classes as u64,
        }
    }

    /// QKV projections `3nE²`.
    pub fn qkv(&self, n: u64) -> u64 {
        3 * n * self.embed_dim * self.embed_dim
    }

    /// Attention logits and weighted values, `n²E` each.
    pub fn attention(&self, n: u64) -> u64 {
        2 * n * n * self.embed_dim
    }

    /// Output projection `nE²`.
    pub fn projection(&self, n: u64) -> u64 {
        n * self.embed_dim * self.embed_dim
    }

    /// Two MLP matmuls `2·n·E·hidden`.
    pub fn mlp(&self, n: u64) -> u64 {
        2 * n * self.embed_dim * self.hidden_dim
    }

    /// One block with `n` live tokens.
    pub fn layer(&self, n: u64) -> u64 {
        self.qkv(n) + self.attention(n) + self.projection(n) + self.mlp(n)
    }

    pub fn embedding(&self) -> u64 {
        self.num_patches * self.patch_dim * self.embed_dim
    }

    pub fn head(&self) -> u64 {
        self.embed_dim * self.num_classes
    }

    /// Total cost for per-layer live-token counts (layers after an early exit
    /// carry a count of zero).
    pub fn count(&self, live_per_layer: &[usize]) -> u64 {
        self.embedding() + live_per_layer.iter().map(|&n| self.layer(n as u64)).sum::<u64>() + self.head()
    }

    /// Every token through every layer.
    pub fn static_flops(&self) -> u64 {
        self.count(&vec![self.num_tokens as usize; self.num_layers])
    }

    pub fn mac2(flops: u64) -> u64 {
        2 * flops
    }
}

pub fn count_flops(live_per_layer: &[usize], cfg: &ModelConfig) -> u64 {
    FlopsModel::new(cfg).count(live_per_layer)
}
