use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tokenhalt::analysis::{self, AnalysisOptions};
use tokenhalt::bench::{self, BenchOptions};
use tokenhalt::checkpoint::Checkpoint;
use tokenhalt::config::RunConfig;
use tokenhalt::data::Dataset;
use tokenhalt::export;
use tokenhalt::flops;
use tokenhalt::halting::HaltingConfig;
use tokenhalt::infer::{self, InferenceOptions};
use tokenhalt::train::{self, MetricsCsv, Mode, Pipeline, SplitMetrics, Trainer};
use tokenhalt::vit::ModelParams;

/// Vision transformer with per-token adaptive halting.
#[derive(Parser)]
#[command(name = "tokenhalt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Checkpoint to start from (train) or to evaluate (other commands).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv and static/adaptive checkpoints.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval(Common),
    /// Run compacted inference on single test images and export depth maps.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Test-set indices to process.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        samples: Vec<usize>,
    },
    /// Compare static and adaptive single-image throughput.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Static checkpoint; defaults to static.ckpt beside the adaptive one.
        #[arg(long)]
        static_checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        warmup: usize,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
    },
    /// Dataset-level halting analysis of an adaptive checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Static checkpoint for per-class deltas; defaults to static.ckpt
        /// beside the adaptive one when present.
        #[arg(long)]
        static_checkpoint: Option<PathBuf>,
        /// Number of leading test samples analysed.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Length of the easiest and hardest lists.
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Test-set indices exported as individual depth maps.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        maps: Vec<usize>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::Infer { common, samples } => cmd_infer(&common, &samples),
        Command::Benchmark {
            common,
            static_checkpoint,
            warmup,
            iterations,
        } => cmd_benchmark(&common, static_checkpoint, BenchOptions { warmup, iterations }),
        Command::Analyze {
            common,
            static_checkpoint,
            samples,
            top,
            maps,
        } => cmd_analyze(&common, static_checkpoint, samples, top, &maps),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(c: &Common) -> Result<&Path> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(&c.out)
}

fn summary_line(label: &str, m: &SplitMetrics) -> String {
    format!(
        "{label}: accuracy {:.4}, mean depth {:.3}, flops {:.0} per image ({})",
        m.accuracy,
        m.mean_depth,
        m.flops,
        flops::CONVENTION
    )
}

fn checkpoint_of(t: &Trainer, data: &Dataset) -> Checkpoint<f32> {
    Checkpoint {
        mode: t.mode,
        epoch: t.epoch,
        model: t.model.clone(),
        halting: (t.mode == Mode::Adaptive).then(|| t.halting.clone()),
        normalization: data.normalization.clone(),
        params: t.params.clone(),
        optimizer: Some(t.optimizer.clone()),
    }
}

fn run_phase(t: &mut Trainer, train: &Dataset, test: &Dataset, csv: &mut MetricsCsv, ckpt: &Path) -> Result<SplitMetrics> {
    let every = t.train.checkpoint_every;
    let phase = t.mode.as_str();
    let history = t.fit(train, Some(test), |tr, m| {
        csv.push_phase(phase, m);
        let test_m = m.test.as_ref().map_or(String::new(), |s| format!(", test acc {:.4}, depth {:.3}", s.accuracy, s.mean_depth));
        eprintln!(
            "{phase} epoch {}: loss {:.4}, train acc {:.4}{test_m}",
            m.epoch, m.train.total, m.train.accuracy
        );
        if every > 0 && m.epoch % every == 0 {
            checkpoint_of(tr, train).save(ckpt)?;
        }
        Ok(())
    })?;
    checkpoint_of(t, train).save(ckpt)?;
    let last = history.last().and_then(|m| m.test.clone()).context("no epochs were run")?;
    Ok(last)
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let (train, test) = cfg.data.load(&cfg.model)?;
    let out = out_dir(c)?;
    write(&out.join("config.toml"), cfg.to_toml()?)?;
    let mut csv = MetricsCsv::new();
    let static_path = out.join("static.ckpt");
    let adaptive_path = out.join("adaptive.ckpt");

    let start: Option<ModelParams<f32>> = match &c.checkpoint {
        Some(p) => {
            let ck = Checkpoint::<f32>::load(p)?;
            ck.ensure_model(&cfg.model)?;
            Some(ck.adaptive_params(&cfg.halting))
        }
        None => None,
    };

    let result = match cfg.train.pipeline {
        Pipeline::Static => {
            let mut t = match start {
                Some(p) => Trainer::with_params(cfg.model.clone(), cfg.halting.clone(), cfg.train.clone(), Mode::Static, p)?,
                None => Trainer::new(cfg.model.clone(), cfg.halting.clone(), cfg.train.clone(), Mode::Static)?,
            };
            summary_line("static", &run_phase(&mut t, &train, &test, &mut csv, &static_path)?)
        }
        Pipeline::Adaptive => {
            let mut t = match start {
                Some(p) => Trainer::finetune_from(p, cfg.model.clone(), cfg.halting.clone(), cfg.train.clone())?,
                None => Trainer::new(cfg.model.clone(), cfg.halting.clone(), cfg.train.clone(), Mode::Adaptive)?,
            };
            summary_line("adaptive", &run_phase(&mut t, &train, &test, &mut csv, &adaptive_path)?)
        }
        Pipeline::TwoPhase => {
            let (params, pre) = match start {
                Some(p) => (p, None),
                None => {
                    let pre_cfg = train::TrainConfig {
                        epochs: cfg.train.pretrain_epochs,
                        ..cfg.train.clone()
                    };
                    let mut t = Trainer::new(cfg.model.clone(), cfg.halting.clone(), pre_cfg, Mode::Static)?;
                    let m = run_phase(&mut t, &train, &test, &mut csv, &static_path)?;
                    (t.params, Some(m))
                }
            };
            let mut t = Trainer::finetune_from(params, cfg.model.clone(), cfg.halting.clone(), cfg.train.clone())?;
            let m = run_phase(&mut t, &train, &test, &mut csv, &adaptive_path)?;
            let mut line = summary_line("adaptive", &m);
            if let Some(p) = pre {
                line = format!("{}\n{line}", summary_line("static", &p));
            }
            line
        }
    };
    csv.write(&out.join("metrics.csv"))?;
    println!("{result}");
    Ok(())
}

struct Loaded {
    ck: Checkpoint<f32>,
    halting: HaltingConfig,
    test: Dataset,
}

/// Loads the checkpoint named by `--checkpoint` (default
/// `<out>/adaptive.ckpt`) and the test split shaped for its model.
fn load_checkpoint_and_data(c: &Common, cfg: &RunConfig) -> Result<Loaded> {
    let path = c.checkpoint.clone().unwrap_or_else(|| c.out.join("adaptive.ckpt"));
    let ck = Checkpoint::<f32>::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let (_, test) = cfg.data.load(&ck.model)?;
    let halting = ck.halting.clone().unwrap_or_else(|| cfg.halting.clone());
    Ok(Loaded { ck, halting, test })
}

fn cmd_eval(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let l = load_checkpoint_and_data(c, &cfg)?;
    let m = train::evaluate(&l.ck.model, &l.halting, l.ck.mode, &l.ck.params, &l.test, cfg.train.batch_size)?;
    let out = out_dir(c)?;
    let mut csv = MetricsCsv::new();
    for (k, v) in m.rows() {
        csv.push(l.ck.epoch, &format!("{}-test", l.ck.mode.as_str()), &k, v);
    }
    csv.write(&out.join("eval.csv"))?;
    println!("{}", summary_line(l.ck.mode.as_str(), &m));
    Ok(())
}

fn export_maps(out: &Path, stem: &str, values: &[f64], grid: usize, layers: usize, title: &str) -> Result<()> {
    write(&out.join(format!("{stem}.ppm")), export::depth_ppm(values, grid, layers)?)?;
    write(&out.join(format!("{stem}.svg")), export::depth_svg(values, grid, layers, title)?)?;
    write(&out.join(format!("{stem}.csv")), export::grid_csv(values, grid, "halting layer per patch")?)?;
    Ok(())
}

fn cmd_infer(c: &Common, samples: &[usize]) -> Result<()> {
    let cfg = load_config(c)?;
    let l = load_checkpoint_and_data(c, &cfg)?;
    if l.ck.mode != Mode::Adaptive {
        bail!("infer needs an adaptive checkpoint");
    }
    let out = out_dir(c)?;
    let model = &l.ck.model;
    let mut rows = format!(
        "# flops: {}; depth in layers\nsample,label,predicted,mean_depth,class_depth,flops\n",
        flops::CONVENTION
    );
    for &i in samples {
        if i >= l.test.len() {
            bail!("sample {i} out of range: test split has {} images", l.test.len());
        }
        let (_, trace) = infer::infer_compacted(model, &l.halting, &l.ck.params, l.test.image(i), InferenceOptions::default())?;
        let trace = trace.with_label(l.test.labels[i]);
        rows.push_str(&format!(
            "{i},{},{},{:.6},{},{}\n",
            l.test.labels[i],
            trace.predicted,
            trace.mean_depth,
            trace.class_depth(),
            trace.flops
        ));
        let values: Vec<f64> = trace.depth_grid().iter().map(|&d| d as f64).collect();
        export_maps(out, &format!("depth_{i}"), &values, model.grid(), model.num_layers, &format!("sample {i}"))?;
        println!(
            "sample {i}: label {} predicted {}, mean depth {:.3}, flops {}",
            l.test.labels[i], trace.predicted, trace.mean_depth, trace.flops
        );
    }
    write(&out.join("infer.csv"), rows)
}

fn sibling_static(c: &Common, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let adaptive = c.checkpoint.clone().unwrap_or_else(|| c.out.join("adaptive.ckpt"));
        adaptive.with_file_name("static.ckpt")
    })
}

fn load_static(path: &Path, expected: &Checkpoint<f32>) -> Result<ModelParams<f32>> {
    let ck = Checkpoint::<f32>::load(path).with_context(|| format!("loading static checkpoint {}", path.display()))?;
    ck.ensure_model(&expected.model)?;
    Ok(ck.params)
}

fn cmd_benchmark(c: &Common, static_checkpoint: Option<PathBuf>, opts: BenchOptions) -> Result<()> {
    let cfg = load_config(c)?;
    let l = load_checkpoint_and_data(c, &cfg)?;
    let static_params = load_static(&sibling_static(c, static_checkpoint), &l.ck)?;
    let report = bench::benchmark_throughput(&l.ck.model, &l.halting, &static_params, &l.ck.params, &l.test, opts)?;
    let out = out_dir(c)?;
    write(&out.join("benchmark.csv"), report.csv())?;
    println!("{}", report.protocol());
    println!("{}", report.summary());
    Ok(())
}

fn cmd_analyze(c: &Common, static_checkpoint: Option<PathBuf>, samples: usize, top: usize, maps: &[usize]) -> Result<()> {
    let cfg = load_config(c)?;
    let l = load_checkpoint_and_data(c, &cfg)?;
    if l.ck.mode != Mode::Adaptive {
        bail!("analyze needs an adaptive checkpoint");
    }
    let static_path = sibling_static(c, static_checkpoint.clone());
    let static_params = if static_checkpoint.is_some() || static_path.exists() {
        Some(load_static(&static_path, &l.ck)?)
    } else {
        None
    };
    let report = analysis::analyze(
        &l.ck.model,
        &l.halting,
        &l.ck.params,
        static_params.as_ref(),
        &l.test,
        AnalysisOptions { samples, ..Default::default() },
    )?;
    let out = out_dir(c)?;
    let (grid, layers) = (report.grid, report.layers);
    export_maps(out, "mean_depth", &report.mean_depth_grid, grid, layers, &format!("mean halting layer over {} samples", report.samples))?;
    write(&out.join("layer_scores.csv"), report.layer_stats_csv())?;
    write(&out.join("easiest.csv"), report.ranking_csv(report.easiest(top)))?;
    write(&out.join("hardest.csv"), report.ranking_csv(&report.hardest(top)))?;
    if static_params.is_some() {
        write(&out.join("class_deltas.csv"), report.class_delta_csv())?;
    }
    for &i in maps {
        let values = report
            .sample_grid(i)
            .with_context(|| format!("map sample {i} is not among the {} analysed samples", report.samples))?;
        export_maps(out, &format!("depth_{i}"), &values, grid, layers, &format!("sample {i}"))?;
    }
    let mut line = format!(
        "analysed {} samples: adaptive accuracy {:.4}, class token depth {:.3}",
        report.samples, report.adaptive_accuracy, report.class_token_depth
    );
    if let Some(s) = report.static_accuracy {
        line.push_str(&format!(", static accuracy {s:.4}"));
    }
    println!("{line}");
    Ok(())
}
