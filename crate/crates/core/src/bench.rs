//! Single-image throughput benchmark comparing static inference with
//! compacted adaptive inference on the same weights and inputs.
//!
//! Runs are interleaved per sample (static, then adaptive) so both variants
//! see the same cache and frequency conditions. Latency is wall-clock time
//! of one forward pass; throughput is `1 / median latency`.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops::{self, FlopsModel};
use crate::halting::HaltingConfig;
use crate::infer::{self, InferenceOptions};
use crate::tensor;
use crate::vit::{ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub warmup: usize,
    pub iterations: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 100,
            iterations: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantStats {
    pub median_latency: Duration,
    pub mean_latency: Duration,
    pub images_per_sec: f64,
    /// Analytic FLOPs per image averaged over timed runs.
    pub analytic_flops: f64,
    /// Multiply-accumulates actually executed per image, averaged.
    pub measured_macs: f64,
    pub mean_live_tokens: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub options: BenchOptions,
    pub samples: usize,
    pub static_run: VariantStats,
    pub adaptive: VariantStats,
    pub mean_depth: f64,
}

impl BenchReport {
    /// Adaptive over static throughput.
    pub fn speedup(&self) -> f64 {
        self.adaptive.images_per_sec / self.static_run.images_per_sec
    }

    pub fn flops_reduction(&self) -> f64 {
        1.0 - self.adaptive.analytic_flops / self.static_run.analytic_flops
    }

    pub fn live_token_reduction(&self) -> f64 {
        1.0 - self.adaptive.mean_live_tokens / self.static_run.mean_live_tokens
    }

    pub fn protocol(&self) -> String {
        format!(
            "protocol: batch 1, single thread, {} warmup + {} timed passes per variant, interleaved static/adaptive over {} test images, median wall-clock latency; FLOPs convention: {}",
            self.options.warmup,
            self.options.iterations,
            self.samples,
            flops::CONVENTION
        )
    }

    pub fn csv(&self) -> String {
        let mut s = format!("# {}\n", self.protocol());
        s.push_str("variant,median_latency_us,mean_latency_us,images_per_sec,analytic_flops,measured_macs,mean_live_tokens,accuracy\n");
        for (name, v) in [("static", &self.static_run), ("adaptive", &self.adaptive)] {
            let _ = writeln!(
                s,
                "{name},{:.3},{:.3},{:.3},{:.1},{:.1},{:.3},{:.6}",
                v.median_latency.as_secs_f64() * 1e6,
                v.mean_latency.as_secs_f64() * 1e6,
                v.images_per_sec,
                v.analytic_flops,
                v.measured_macs,
                v.mean_live_tokens,
                v.accuracy
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "static {:.1} img/s, adaptive {:.1} img/s, speedup {:.3}x, FLOPs -{:.1}%, live tokens -{:.1}%, mean depth {:.2}",
            self.static_run.images_per_sec,
            self.adaptive.images_per_sec,
            self.speedup(),
            100.0 * self.flops_reduction(),
            100.0 * self.live_token_reduction(),
            self.mean_depth
        )
    }
}

struct Accum {
    latencies: Vec<Duration>,
    flops: f64,
    macs: f64,
    live: f64,
    correct: usize,
}

impl Accum {
    fn new(n: usize) -> Self {
        Self {
            latencies: Vec::with_capacity(n),
            flops: 0.0,
            macs: 0.0,
            live: 0.0,
            correct: 0,
        }
    }

    fn finish(mut self) -> VariantStats {
        let n = self.latencies.len().max(1) as f64;
        self.latencies.sort();
        let median = self.latencies[self.latencies.len() / 2];
        let mean = self.latencies.iter().sum::<Duration>().div_f64(n);
        VariantStats {
            median_latency: median,
            mean_latency: mean,
            images_per_sec: 1.0 / median.as_secs_f64().max(1e-12),
            analytic_flops: self.flops / n,
            measured_macs: self.macs / n,
            mean_live_tokens: self.live / n,
            accuracy: self.correct as f64 / n,
        }
    }
}

/// Cycles through the test images for `warmup + iterations` passes of each
/// variant; only the timed passes are recorded.
pub fn benchmark_throughput(
    model: &ModelConfig,
    halting: &HaltingConfig,
    static_params: &ModelParams<f32>,
    adaptive_params: &ModelParams<f32>,
    data: &Dataset,
    opts: BenchOptions,
) -> Result<BenchReport> {
    if data.is_empty() || opts.iterations == 0 {
        return Err(Error::Config("benchmark needs at least one image and one timed pass".into()));
    }
    let fm = FlopsModel::new(model);
    let layers = model.num_layers as f64;
    let mut st = Accum::new(opts.iterations);
    let mut ad = Accum::new(opts.iterations);
    let mut depth = 0.0;
    for it in 0..opts.warmup + opts.iterations {
        let i = it % data.len();
        let image = data.image(i);
        let label = data.labels[i];

        tensor::reset_executed_macs();
        let t0 = Instant::now();
        let (_, s_trace) = infer::infer_static(model, static_params, image)?;
        let s_time = t0.elapsed();
        let s_macs = tensor::executed_macs();

        tensor::reset_executed_macs();
        let t0 = Instant::now();
        let (_, a_trace) = infer::infer_compacted(model, halting, adaptive_params, image, InferenceOptions::default())?;
        let a_time = t0.elapsed();
        let a_macs = tensor::executed_macs();

        if it < opts.warmup {
            continue;
        }
        st.latencies.push(s_time);
        st.flops += fm.static_flops() as f64;
        st.macs += s_macs as f64;
        st.live += s_trace.live_per_layer.iter().sum::<usize>() as f64 / layers;
        st.correct += (s_trace.predicted == label) as usize;

        ad.latencies.push(a_time);
        ad.flops += a_trace.flops as f64;
        ad.macs += a_macs as f64;
        ad.live += a_trace.live_per_layer.iter().sum::<usize>() as f64 / layers;
        ad.correct += (a_trace.predicted == label) as usize;
        depth += a_trace.state.mean_depth();
    }
    Ok(BenchReport {
        options: opts,
        samples: data.len().min(opts.warmup + opts.iterations),
        static_run: st.finish(),
        adaptive: ad.finish(),
        mean_depth: depth / opts.iterations as f64,
    })
}
