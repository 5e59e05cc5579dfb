use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use classquant::config::{RunConfig, OUTPUT_DIR_ENV};
use classquant::pipeline::{Pipeline, Stage};
use classquant::{report, Error};

#[derive(Parser, Debug)]
#[command(name = "classquant", version, about = "Class-based mixed-precision quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the float baseline.
    Train(StageArgs),
    /// Score every filter and neuron against the dataset classes.
    Score(StageArgs),
    /// Search importance thresholds under the bit-width budget.
    Search(StageArgs),
    /// Apply the arrangement and evaluate the quantized model.
    Quantize(StageArgs),
    /// Refine the quantized model by distillation from the float model.
    Refine(StageArgs),
    /// Summarize a run directory from its artifacts.
    Report(ReportArgs),
    /// Run every stage, resuming from up-to-date artifacts.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct StageArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Skip the stage when its artifacts are already up to date.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Rerun every stage even when artifacts are up to date.
    #[arg(long)]
    fresh: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// TOML run configuration; only its output directory is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory to summarize.
    #[arg(long, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
}

fn enum_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn shape(s: &str) -> Result<Vec<usize>, String> {
    s.split(['x', ',']).map(|d| d.trim().parse::<usize>().map_err(|e| format!("`{d}`: {e}"))).collect()
}

/// Every field of the run configuration; set flags override the file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,

    /// glyphs, blobs, csv or idx.
    #[arg(long, value_parser = enum_value::<classquant::config::DataSource>)]
    data_source: Option<classquant::config::DataSource>,
    #[arg(long)]
    data_path: Option<PathBuf>,
    #[arg(long)]
    data_labels: Option<PathBuf>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// e.g. `1x16x16`.
    #[arg(long, value_parser = shape)]
    input_shape: Option<Vec<usize>>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    blob_dim: Option<usize>,
    #[arg(long)]
    blob_spread: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    calib_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,

    /// e.g. `dense:64,relu,dense:10`.
    #[arg(long)]
    architecture: Option<String>,

    #[arg(long)]
    train_epochs: Option<usize>,
    #[arg(long)]
    train_learning_rate: Option<f64>,
    #[arg(long)]
    train_momentum: Option<f64>,
    #[arg(long)]
    train_weight_decay: Option<f64>,
    #[arg(long)]
    train_batch_size: Option<usize>,

    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// true_class_logit or logit_l1.
    #[arg(long, value_parser = enum_value::<classquant::importance::Readout>)]
    readout: Option<classquant::importance::Readout>,

    #[arg(long)]
    target_bits: Option<f64>,
    #[arg(long)]
    max_bits: Option<u8>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    initial_target: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    act_bits: Option<u8>,
    #[arg(long)]
    search_samples: Option<usize>,
    #[arg(long)]
    calib_samples: Option<usize>,
    /// quantized or float.
    #[arg(long, value_parser = enum_value::<classquant::quantizer::CalibrationSource>)]
    calibration: Option<classquant::quantizer::CalibrationSource>,

    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    refine_epochs: Option<usize>,
    #[arg(long)]
    refine_learning_rate: Option<f64>,
    #[arg(long)]
    refine_momentum: Option<f64>,
    #[arg(long)]
    refine_weight_decay: Option<f64>,
    #[arg(long)]
    refine_batch_size: Option<usize>,
    /// standard or as_printed.
    #[arg(long, value_parser = enum_value::<classquant::refine::KlOrientation>)]
    kl_orientation: Option<classquant::refine::KlOrientation>,
    #[arg(long)]
    freeze_weight_ranges: Option<bool>,
    #[arg(long)]
    recalibrate_activations: Option<bool>,
    /// quantized or float.
    #[arg(long, value_parser = enum_value::<classquant::quantizer::CalibrationSource>)]
    refine_calibration: Option<classquant::quantizer::CalibrationSource>,
}

macro_rules! set {
    ($src:expr => $dst:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl Overrides {
    fn resolve(self) -> Result<RunConfig, Error> {
        let mut cfg = match (&self.config, self.seed) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(seed)) => {
                let mut c = RunConfig::with_seed(seed);
                c.apply_env();
                c
            }
            (None, None) => return Err(Error::Config("a seed is required: pass --seed or --config".into())),
        };
        set!(self.seed => cfg.seed);
        // explicit flag beats both the file and the environment
        set!(self.output_dir => cfg.output_dir);
        let d = &mut cfg.data;
        set!(self.data_source => d.source);
        if self.data_path.is_some() {
            d.path = self.data_path;
        }
        if self.data_labels.is_some() {
            d.labels = self.data_labels;
        }
        set!(self.num_classes => d.num_classes);
        if self.input_shape.is_some() {
            d.input_shape = self.input_shape;
        }
        set!(self.samples => d.samples);
        set!(self.noise => d.noise);
        set!(self.blob_dim => d.blob_dim);
        set!(self.blob_spread => d.blob_spread);
        set!(self.val_fraction => d.splits.val);
        set!(self.calib_fraction => d.splits.calib);
        set!(self.test_fraction => d.splits.test);
        if self.architecture.is_some() {
            cfg.model.architecture = self.architecture;
        }
        let t = &mut cfg.train;
        set!(self.train_epochs => t.epochs);
        set!(self.train_learning_rate => t.learning_rate);
        set!(self.train_momentum => t.momentum);
        set!(self.train_weight_decay => t.weight_decay);
        set!(self.train_batch_size => t.batch_size);
        let s = &mut cfg.scoring;
        set!(self.epsilon => s.epsilon);
        set!(self.samples_per_class => s.samples_per_class);
        set!(self.readout => s.readout);
        let q = &mut cfg.quant;
        set!(self.target_bits => q.target_bits);
        set!(self.max_bits => q.max_bits);
        if self.step.is_some() {
            q.step = self.step;
        }
        set!(self.initial_target => q.initial_target);
        set!(self.decay => q.decay);
        if self.act_bits.is_some() {
            q.act_bits = self.act_bits;
        }
        set!(self.search_samples => q.search_samples);
        set!(self.calib_samples => q.calib_samples);
        set!(self.calibration => q.calibration);
        let r = &mut cfg.refine;
        set!(self.alpha => r.alpha);
        set!(self.refine_epochs => r.epochs);
        set!(self.refine_learning_rate => r.learning_rate);
        set!(self.refine_momentum => r.momentum);
        set!(self.refine_weight_decay => r.weight_decay);
        set!(self.refine_batch_size => r.batch_size);
        set!(self.kl_orientation => r.orientation);
        set!(self.freeze_weight_ranges => r.freeze_weight_ranges);
        set!(self.recalibrate_activations => r.recalibrate_activations);
        set!(self.refine_calibration => r.calibration);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let (stage, args, force) = match cli.command {
        Command::Report(a) => {
            let dir = match (a.output_dir, a.config) {
                (Some(d), _) => d,
                (None, Some(c)) => RunConfig::load(&c)?.output_dir,
                (None, None) => return Err(Error::Config("pass --output-dir or --config".into())),
            };
            let r = report::write_report(&dir)?;
            print!("{}", r.text);
            return Ok(());
        }
        Command::Pipeline(a) => {
            let mut p = Pipeline::new(a.overrides.resolve()?)?;
            let summary = p.run_all(!a.fresh)?;
            print!("{summary}");
            return Ok(());
        }
        Command::Train(a) => (Stage::Train, a.overrides, !a.resume),
        Command::Score(a) => (Stage::Score, a.overrides, !a.resume),
        Command::Search(a) => (Stage::Search, a.overrides, !a.resume),
        Command::Quantize(a) => (Stage::Quantize, a.overrides, !a.resume),
        Command::Refine(a) => (Stage::Refine, a.overrides, !a.resume),
    };
    let mut p = Pipeline::new(args.resolve()?)?;
    let out = p.run_stage(stage, force)?;
    let state = if out.skipped { "skipped (up to date)" } else { "done" };
    println!("{stage}: {state} in {:.3}s", out.elapsed.as_secs_f64());
    for (k, v) in &out.metrics {
        println!("  {k} = {v}");
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Stage { source, .. } if source.is_config() => 1,
        e if e.is_config() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
