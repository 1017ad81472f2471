//! Helpers shared by integration test targets.

#![allow(dead_code)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenhalt::autodiff::Graph;
use tokenhalt::checkpoint::Checkpoint;
use tokenhalt::config::RunConfig;
use tokenhalt::data::{self, Normalization, CIFAR_RECORD, MNIST_IMAGE_MAGIC, MNIST_LABEL_MAGIC};
use tokenhalt::halting::{self, HaltingConfig, HaltingState};
use tokenhalt::train::Mode;
use tokenhalt::vit::{ModelConfig, ModelParams};

/// Halting quantities of one token evaluated directly from their
/// definitions, without incremental state.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleHalt {
    pub halt_layer: usize,
    pub remainder: f64,
    pub p: Vec<f64>,
    pub ponder: f64,
}

/// `scores[L-1]` is replaced by 1 as the final layer always halts.
pub fn oracle_halt(scores: &[f64], eps: f64) -> OracleHalt {
    let l = scores.len();
    let mut h = scores.to_vec();
    h[l - 1] = 1.0;
    let prefix = |n: usize| h[..n].iter().sum::<f64>();
    let n = (1..=l).find(|&n| prefix(n) >= 1.0 - eps).expect("final score is 1");
    let remainder = 1.0 - prefix(n - 1);
    let p = (1..=l)
        .map(|i| match i.cmp(&n) {
            std::cmp::Ordering::Less => h[i - 1],
            std::cmp::Ordering::Equal => remainder,
            std::cmp::Ordering::Greater => 0.0,
        })
        .collect();
    OracleHalt {
        halt_layer: n,
        remainder,
        p,
        ponder: n as f64 + remainder,
    }
}

/// Runs the incremental implementation on one token.
pub fn step_halt(scores: &[f64], eps: f64) -> OracleHalt {
    let l = scores.len();
    let mut s = HaltingState::new(1);
    let mut p = vec![0.0; l];
    for layer in 1..=l {
        if s.all_halted() {
            break;
        }
        let h = if layer == l { 1.0 } else { scores[layer - 1] };
        let out = s.step(&[h], layer, eps).expect("in-order step");
        p[layer - 1] = out.p[0];
    }
    OracleHalt {
        halt_layer: s.halt_layer[0].expect("final layer halts"),
        remainder: s.remainder[0],
        p,
        ponder: s.ponder[0],
    }
}

/// Largest discrepancy between implementation and oracle, and the worst
/// `|Σ p - 1|`, over `count` random sequences with lengths in `2..=12`.
/// Layer mismatches are counted separately.
pub fn halting_oracle_suite(count: usize, seed: u64, eps: f64) -> (f64, f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_err, mut max_sum_err, mut layer_mismatch) = (0.0f64, 0.0f64, 0);
    for i in 0..count {
        let len = rng.gen_range(2..=12);
        // alternate between spread-out and threshold-heavy score regimes
        let scores: Vec<f64> = (0..len)
            .map(|_| match i % 3 {
                0 => rng.gen::<f64>(),
                1 => rng.gen::<f64>() * 0.3,
                _ => [0.0, 0.25, 0.5, 1.0 - eps, 1.0][rng.gen_range(0..5)],
            })
            .collect();
        let got = step_halt(&scores, eps);
        let want = oracle_halt(&scores, eps);
        if got.halt_layer != want.halt_layer {
            layer_mismatch += 1;
            continue;
        }
        max_err = max_err
            .max((got.remainder - want.remainder).abs())
            .max((got.ponder - want.ponder).abs());
        for (a, b) in got.p.iter().zip(&want.p) {
            max_err = max_err.max((a - b).abs());
        }
        max_sum_err = max_sum_err.max((got.p.iter().sum::<f64>() - 1.0).abs());
    }
    (max_err, max_sum_err, layer_mismatch)
}

// ── parser fuzzing ───────────────────────────────────────────────────


#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FuzzStats {
    pub cases: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub panics: u64,
}

pub fn valid_cifar(records: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(records * CIFAR_RECORD);
    for _ in 0..records {
        out.push(rng.gen_range(0..10));
        out.extend((0..CIFAR_RECORD - 1).map(|_| rng.gen::<u8>()));
    }
    out
}

pub fn valid_idx_images(count: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [MNIST_IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend(v.to_be_bytes());
    }
    out.extend((0..count * rows * cols).map(|i| (i * 7 % 256) as u8));
    out
}

pub fn valid_idx_labels(count: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MNIST_LABEL_MAGIC.to_be_bytes());
    out.extend((count as u32).to_be_bytes());
    out.extend((0..count).map(|i| (i % 10) as u8));
    out
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        num_layers: 2,
        embed_dim: 8,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
    }
}

pub fn valid_checkpoint(mode: Mode, with_optimizer: bool) -> Checkpoint<f32> {
    let model = tiny_model();
    let params = ModelParams::<f32>::init(&model, 5.0, -10.0, 3).unwrap();
    let optimizer = with_optimizer.then(|| tokenhalt::train::AdamState::new(&params));
    Checkpoint {
        mode,
        epoch: 2,
        halting: (mode == Mode::Adaptive).then(HaltingConfig::default),
        normalization: Normalization::identity(3),
        model,
        params,
        optimizer,
    }
}

fn mutate(seed_input: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut b = seed_input.to_vec();
    let rounds = rng.gen_range(1..=4);
    for _ in 0..rounds {
        match rng.gen_range(0..8) {
            0 if !b.is_empty() => {
                let i = rng.gen_range(0..b.len());
                b[i] ^= 1 << rng.gen_range(0..8);
            }
            1 if !b.is_empty() => {
                let i = rng.gen_range(0..b.len());
                b[i] = rng.gen();
            }
            2 => b.truncate(rng.gen_range(0..=b.len())),
            3 => {
                let n = rng.gen_range(1..64);
                b.extend((0..n).map(|_| rng.gen::<u8>()));
            }
            4 if b.len() >= 4 => {
                // overwrite a 32-bit field with an extreme value
                let i = rng.gen_range(0..=b.len() - 4);
                let v: u32 = [0, 1, u32::MAX, u32::MAX / 2, rng.gen()][rng.gen_range(0..5)];
                let bytes = if rng.gen() { v.to_be_bytes() } else { v.to_le_bytes() };
                b[i..i + 4].copy_from_slice(&bytes);
            }
            5 if b.len() >= 2 => {
                let i = rng.gen_range(0..b.len());
                let j = rng.gen_range(i..b.len());
                b.drain(i..=j.min(i + 32));
            }
            6 if !b.is_empty() => {
                let i = rng.gen_range(0..b.len());
                let chunk: Vec<u8> = b[i..(i + 16).min(b.len())].to_vec();
                let at = rng.gen_range(0..=b.len());
                b.splice(at..at, chunk);
            }
            _ => b = (0..rng.gen_range(0..256)).map(|_| rng.gen::<u8>()).collect(),
        }
    }
    b
}

/// Replaces the trailing checksum so mutations reach the body parser.
fn fix_crc(bytes: &mut Vec<u8>) {
    if bytes.len() >= 4 {
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
    }
}

/// Feeds mutated CIFAR, IDX, checkpoint and config inputs to their parsers
/// until `budget` elapses or `max_cases` inputs have been tried. Every
/// parser must return `Ok` or `Err`; panics are caught and counted.
pub fn fuzz_parsers(budget: Duration, max_cases: u64, seed: u64) -> FuzzStats {
    let seeds: Vec<Vec<u8>> = vec![
        valid_cifar(3, seed),
        valid_idx_images(4, 5, 6),
        valid_idx_labels(7),
        valid_checkpoint(Mode::Adaptive, true).to_bytes().unwrap(),
        valid_checkpoint(Mode::Static, false).to_bytes().unwrap(),
        RunConfig::default().to_toml().unwrap().into_bytes(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = FuzzStats::default();
    let start = Instant::now();
    while stats.cases < max_cases && start.elapsed() < budget {
        let which = rng.gen_range(0..seeds.len());
        let mut input = mutate(&seeds[which], &mut rng);
        if (3..5).contains(&which) && rng.gen_bool(0.7) {
            fix_crc(&mut input);
        }
        let outcome = catch_unwind(AssertUnwindSafe(|| match which {
            0 => data::parse_cifar_batch(&input, "fuzz").is_ok(),
            1 => data::parse_idx_images(&input, "fuzz").is_ok(),
            2 => data::parse_idx_labels(&input, "fuzz").is_ok(),
            3 | 4 => Checkpoint::<f32>::from_bytes(&input).is_ok(),
            _ => match std::str::from_utf8(&input) {
                Ok(text) => RunConfig::from_toml(text).is_ok(),
                Err(_) => false,
            },
        }));
        stats.cases += 1;
        match outcome {
            Ok(true) => stats.accepted += 1,
            Ok(false) => stats.rejected += 1,
            Err(_) => stats.panics += 1,
        }
    }
    stats
}

// ── model fixtures ───────────────────────────────────────────────────

pub fn images<T: tokenhalt::Scalar>(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * cfg.pixels()).map(|_| T::c(rng.gen_range(-1.5..1.5))).collect()
}

/// Random weights inflated so halting scores spread across the threshold.
pub fn halting_params<T: tokenhalt::Scalar>(cfg: &ModelConfig, gamma: f64, beta: f64, scale: f64, seed: u64) -> ModelParams<T> {
    let mut p = ModelParams::<T>::init(cfg, gamma, beta, seed).unwrap();
    for (name, t) in p.named_mut() {
        if name.ends_with("weight") || name == "pos_embed" || name == "cls_token" {
            *t = t.map(|v| v * T::c(scale));
        }
    }
    p
}

/// Finite-difference check of every parameter of a 2-layer, E=8, K=5,
/// 3-class model through the task, ponder (remainder path) and KL terms.
pub fn model_gradient_max_rel_err() -> (f64, usize, usize) {
    let cfg = ModelConfig {
        image_size: 4,
        channels: 3,
        patch_size: 2,
        num_layers: 2,
        embed_dim: 8,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
    };
    assert_eq!(cfg.num_tokens(), 5);
    let hcfg = HaltingConfig {
        alpha_ponder: 0.5,
        alpha_distr: 0.7,
        target_depth: 1.0,
        learn_gates: true,
        ..HaltingConfig::default()
    };
    let target = halting::target_distribution(cfg.num_layers, hcfg.target_depth, hcfg.target_std);
    let params = halting_params::<f64>(&cfg, 3.0, 3.5, 8.0, 21);
    let imgs = images::<f64>(&cfg, 2, 22);
    let labels = [0usize, 2];

    let loss_of = |p: &ModelParams<f64>| -> (f64, Vec<Option<usize>>) {
        let mut g = Graph::new();
        let w = p.bind(&mut g, true);
        let fwd = halting::adaptive_forward(&mut g, &cfg, &hcfg, &w, &imgs, 2).unwrap();
        let (_, b) = halting::total_loss(&mut g, &fwd, &labels, &hcfg, &target).unwrap();
        (b.total, fwd.states.iter().flat_map(|s| s.halt_layer.clone()).collect())
    };

    let mut g = Graph::new();
    let w = params.bind(&mut g, true);
    let fwd = halting::adaptive_forward(&mut g, &cfg, &hcfg, &w, &imgs, 2).unwrap();
    let base_halts: Vec<Option<usize>> = fwd.states.iter().flat_map(|s| s.halt_layer.clone()).collect();
    let (vars, bundle) = halting::total_loss(&mut g, &fwd, &labels, &hcfg, &target).unwrap();
    assert!(bundle.ponder > 0.0 && bundle.distr > 0.0);
    let early = base_halts.iter().filter(|&&n| n == Some(1)).count();
    let grads = g.backward(vars.total).unwrap();
    let analytic: Vec<Vec<f64>> = w.named().iter().map(|(_, v)| grads.get(**v).unwrap().data().to_vec()).collect();

    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for (pi, name) in names.iter().enumerate() {
        let len = params.named()[pi].1.len();
        for j in 0..len {
            let bump = |d: f64| {
                let mut q = params.clone();
                for (n, t) in q.named_mut() {
                    if &n == name {
                        t.data_mut()[j] += d;
                    }
                }
                q
            };
            let (lp, hp) = loss_of(&bump(step));
            let (lm, hm) = loss_of(&bump(-step));
            assert_eq!(hp, base_halts, "perturbing {name}[{j}] crossed a halting boundary");
            assert_eq!(hm, base_halts);
            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic[pi][j];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    (worst, checked, early)
}

