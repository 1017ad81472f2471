//! Dataset-level halting analyses: mean depth per patch position, per-layer
//! halting-score statistics, easy/hard sample ranking and per-class accuracy
//! changes between a static model and its adaptive counterpart.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::halting::HaltingConfig;
use crate::infer::{self, InferenceOptions, InferenceTrace};
use crate::vit::{self, ModelConfig, ModelParams};

/// Five-number summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl BoxStats {
    /// Quartiles by linear interpolation between order statistics.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            count: v.len(),
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleDepth {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub mean_depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaCategory {
    /// Accuracy improves under adaptive inference.
    Favoring,
    /// Accuracy drops under adaptive inference.
    Sensitive,
    Stable,
}

impl DeltaCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            DeltaCategory::Favoring => "favoring",
            DeltaCategory::Sensitive => "sensitive",
            DeltaCategory::Stable => "stable",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDelta {
    pub class: usize,
    pub name: String,
    pub count: usize,
    pub static_accuracy: f64,
    pub adaptive_accuracy: f64,
    pub delta: f64,
    pub category: DeltaCategory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub grid: usize,
    pub layers: usize,
    pub samples: usize,
    /// Mean halting layer per patch position, row-major.
    pub mean_depth_grid: Vec<f64>,
    pub class_token_depth: f64,
    /// Scores of tokens entering each layer.
    pub layer_stats: Vec<Option<BoxStats>>,
    /// Correctly classified samples sorted by mean token depth, shallowest
    /// first.
    pub ranking: Vec<SampleDepth>,
    pub adaptive_accuracy: f64,
    pub static_accuracy: Option<f64>,
    pub class_deltas: Vec<ClassDelta>,
    /// Per-sample traces for depth-map export, in dataset order.
    pub traces: Vec<InferenceTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    /// Number of leading samples analysed (all if larger than the set).
    pub samples: usize,
    /// Per-class accuracy changes within this band count as stable.
    pub stable_band: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            samples: 1000,
            stable_band: 0.01,
        }
    }
}

/// Runs compacted inference without early exit over the leading samples so
/// every token reports its own halting layer.
pub fn analyze(
    model: &ModelConfig,
    halting: &HaltingConfig,
    adaptive: &ModelParams<f32>,
    static_params: Option<&ModelParams<f32>>,
    data: &Dataset,
    opts: AnalysisOptions,
) -> Result<AnalysisReport> {
    if data.channels != model.channels || data.side != model.image_size || data.num_classes() > model.num_classes {
        return Err(Error::Config(format!(
            "dataset ({}x{}x{}, {} classes) does not match the model ({}x{}x{}, {} classes)",
            data.channels,
            data.side,
            data.side,
            data.num_classes(),
            model.channels,
            model.image_size,
            model.image_size,
            model.num_classes
        )));
    }
    let n = opts.samples.min(data.len());
    if n == 0 {
        return Err(Error::Config("no samples to analyse".into()));
    }
    let grid = model.grid();
    let layers = model.num_layers;
    let mut depth_sum = vec![0.0; grid * grid];
    let mut class_depth = 0.0;
    let mut layer_scores: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut traces = Vec::with_capacity(n);
    let mut ranking = Vec::new();
    let mut adaptive_correct = vec![false; n];
    let opts_infer = InferenceOptions { early_exit: false };
    for i in 0..n {
        let (_, trace) = infer::infer_compacted(model, halting, adaptive, data.image(i), opts_infer)?;
        let trace = trace.with_label(data.labels[i]);
        let depths = trace.state.depths();
        for (s, &d) in depth_sum.iter_mut().zip(&depths[1..]) {
            *s += d as f64;
        }
        class_depth += depths[0] as f64;
        for (l, scores) in layer_scores.iter_mut().enumerate() {
            if let Some(rec) = trace.state.h_record.get(l) {
                scores.extend(depths.iter().zip(rec).filter(|(&d, _)| d > l).map(|(_, &h)| h));
            }
        }
        adaptive_correct[i] = trace.correct == Some(true);
        if adaptive_correct[i] {
            ranking.push(SampleDepth {
                index: i,
                label: data.labels[i],
                predicted: trace.predicted,
                mean_depth: trace.state.mean_depth(),
            });
        }
        traces.push(trace);
    }
    ranking.sort_by(|a, b| a.mean_depth.total_cmp(&b.mean_depth).then(a.index.cmp(&b.index)));

    let (static_accuracy, class_deltas) = match static_params {
        Some(sp) => {
            let mut static_correct = vec![false; n];
            for (i, c) in static_correct.iter_mut().enumerate() {
                let logits = vit::static_logits(model, sp, data.image(i), 1)?;
                *c = vit::argmax(logits.data()) == data.labels[i];
            }
            let deltas = class_deltas(data, &static_correct, &adaptive_correct, opts.stable_band);
            (Some(fraction(&static_correct)), deltas)
        }
        None => (None, Vec::new()),
    };

    Ok(AnalysisReport {
        grid,
        layers,
        samples: n,
        mean_depth_grid: depth_sum.iter().map(|s| s / n as f64).collect(),
        class_token_depth: class_depth / n as f64,
        layer_stats: layer_scores.iter().map(|s| BoxStats::from_values(s)).collect(),
        ranking,
        adaptive_accuracy: fraction(&adaptive_correct),
        static_accuracy,
        class_deltas,
        traces,
    })
}

fn fraction(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&f| f).count() as f64 / flags.len().max(1) as f64
}

/// Per-class accuracy change over the leading `static_correct.len()`
/// samples, sorted favoring first, then stable, then sensitive; within a
/// group by decreasing delta.
pub fn class_deltas(data: &Dataset, static_correct: &[bool], adaptive_correct: &[bool], band: f64) -> Vec<ClassDelta> {
    let classes = data.num_classes();
    let mut count = vec![0usize; classes];
    let mut s_ok = vec![0usize; classes];
    let mut a_ok = vec![0usize; classes];
    for (i, (&s, &a)) in static_correct.iter().zip(adaptive_correct).enumerate() {
        let c = data.labels[i];
        count[c] += 1;
        s_ok[c] += s as usize;
        a_ok[c] += a as usize;
    }
    let mut out: Vec<ClassDelta> = (0..classes)
        .filter(|&c| count[c] > 0)
        .map(|c| {
            let sa = s_ok[c] as f64 / count[c] as f64;
            let aa = a_ok[c] as f64 / count[c] as f64;
            let delta = aa - sa;
            let category = if delta > band {
                DeltaCategory::Favoring
            } else if delta < -band {
                DeltaCategory::Sensitive
            } else {
                DeltaCategory::Stable
            };
            ClassDelta {
                class: c,
                name: data.class_names[c].clone(),
                count: count[c],
                static_accuracy: sa,
                adaptive_accuracy: aa,
                delta,
                category,
            }
        })
        .collect();
    let rank = |c: DeltaCategory| match c {
        DeltaCategory::Favoring => 0,
        DeltaCategory::Stable => 1,
        DeltaCategory::Sensitive => 2,
    };
    out.sort_by(|a, b| rank(a.category).cmp(&rank(b.category)).then(b.delta.total_cmp(&a.delta)).then(a.class.cmp(&b.class)));
    out
}

impl AnalysisReport {
    /// Overall accuracy change recomputed from the class table, weighting
    /// each class by its sample count.
    pub fn weighted_class_delta(&self) -> f64 {
        let total: usize = self.class_deltas.iter().map(|d| d.count).sum();
        self.class_deltas.iter().map(|d| d.delta * d.count as f64).sum::<f64>() / total.max(1) as f64
    }

    pub fn easiest(&self, k: usize) -> &[SampleDepth] {
        &self.ranking[..k.min(self.ranking.len())]
    }

    /// The `k` deepest samples, deepest first.
    pub fn hardest(&self, k: usize) -> Vec<SampleDepth> {
        self.ranking.iter().rev().take(k).cloned().collect()
    }

    pub fn layer_stats_csv(&self) -> String {
        let mut s = String::from("# halting scores of tokens entering each layer; the final layer score is 1 by construction\n");
        s.push_str("layer,count,min,q1,median,q3,max\n");
        for (l, st) in self.layer_stats.iter().enumerate() {
            match st {
                Some(b) => {
                    let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}", l + 1, b.count, b.min, b.q1, b.median, b.q3, b.max);
                }
                None => {
                    let _ = writeln!(s, "{},0,,,,,", l + 1);
                }
            }
        }
        s
    }

    pub fn ranking_csv(&self, samples: &[SampleDepth]) -> String {
        let mut s = String::from("# correctly classified samples; mean_depth in layers over all tokens\n");
        s.push_str("rank,sample,label,predicted,mean_depth\n");
        for (r, d) in samples.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{},{:.6}", r + 1, d.index, d.label, d.predicted, d.mean_depth);
        }
        s
    }

    pub fn class_delta_csv(&self) -> String {
        let mut s = String::from("# accuracies in [0,1]; delta = adaptive - static\n");
        s.push_str("category,class,name,count,static_accuracy,adaptive_accuracy,delta\n");
        for d in &self.class_deltas {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6},{:.6}",
                d.category.as_str(),
                d.class,
                d.name,
                d.count,
                d.static_accuracy,
                d.adaptive_accuracy,
                d.delta
            );
        }
        s
    }

    /// Depths of one sample's patches as a grid (class token excluded).
    pub fn sample_grid(&self, i: usize) -> Option<Vec<f64>> {
        self.traces.get(i).map(|t| t.state.depths()[1..].iter().map(|&d| d as f64).collect())
    }
}
