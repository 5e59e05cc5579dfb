//! Resumable `train -> score -> search -> quantize -> refine -> report`
//! workflow over a run directory.
//!
//! Every stage persists its artifacts and then a `stage_<name>.json`
//! record holding a fingerprint of the configuration it depends on. A
//! later run skips a stage whose record matches and whose artifacts are
//! present; running a stage invalidates the records of all later stages.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::bitsearch::{self, render_trace_csv};
use crate::config::{stream, RunConfig};
use crate::data::{Dataset, LabeledSet};
use crate::error::{Error, Result};
use crate::fsutil::{read_artifact, sha256_hex, write_atomic};
use crate::importance::{score_network, ScoreFile};
use crate::quantizer::{
    evaluate_quantized, quantizable_units, read_arrangement, write_arrangement, BitArrangement,
};
use crate::refine::{pruned_units_are_zero, refine, render_refine_log, RefineData};
use crate::report;
use crate::tensor::{evaluate_accuracy, load_model, save_model, Network};
use crate::train::train_float;

pub const CONFIG_FILE: &str = "config.toml";
pub const FLOAT_MODEL: &str = "model_float.cqnn";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SCORES: &str = "scores.json";
pub const ARRANGEMENT: &str = "arrangement.txt";
pub const THRESHOLDS: &str = "thresholds.json";
pub const SEARCH_TRACE: &str = "search_trace.csv";
pub const QUANTIZED_MODEL: &str = "model_quantized.cqnn";
pub const ACTIVATION_RANGES: &str = "activation_ranges.json";
pub const REFINED_MODEL: &str = "model_refined.cqnn";
pub const REFINED_SHADOW: &str = "model_refined_shadow.cqnn";
pub const REFINED_ARRANGEMENT: &str = "refined_arrangement.txt";
pub const REFINE_LOG: &str = "refine_log.csv";
pub const REFINED_ACTIVATION_RANGES: &str = "refined_activation_ranges.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Train,
    Score,
    Search,
    Quantize,
    Refine,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Train, Stage::Score, Stage::Search, Stage::Quantize, Stage::Refine, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::Search => "search",
            Stage::Quantize => "quantize",
            Stage::Refine => "refine",
            Stage::Report => "report",
        }
    }

    /// Files the stage writes besides its record.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Train => &[FLOAT_MODEL, TRAIN_LOG],
            Stage::Score => &[SCORES],
            Stage::Search => &[ARRANGEMENT, THRESHOLDS, SEARCH_TRACE],
            Stage::Quantize => &[QUANTIZED_MODEL, ACTIVATION_RANGES],
            Stage::Refine => &[REFINED_MODEL, REFINED_SHADOW, REFINED_ARRANGEMENT, REFINE_LOG, REFINED_ACTIVATION_RANGES],
            Stage::Report => &[report::REPORT, report::BIT_HISTOGRAM, report::SCORE_HISTOGRAM, report::ACCURACY],
        }
    }

    pub fn record_file(self) -> String {
        format!("stage_{}.json", self.name())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Persisted completion record of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: String,
    pub fingerprint: String,
    pub elapsed_seconds: f64,
    pub metrics: BTreeMap<String, f64>,
    pub labels: BTreeMap<String, String>,
}

impl StageRecord {
    pub fn load(dir: &Path, stage: Stage) -> Result<Self> {
        let path = dir.join(stage.record_file());
        Ok(serde_json::from_slice(&read_artifact(&path)?)?)
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }
}

/// Thresholds and search metadata written by the search stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdFile {
    pub version: u32,
    pub target_bits: f64,
    pub max_bits: u8,
    pub act_bits: u8,
    pub step: f64,
    pub thresholds: Vec<f64>,
    pub targets: Vec<f64>,
    pub b_cur: f64,
    pub reference_accuracy: f64,
    pub evaluations: usize,
    pub fallback_used: bool,
}

impl ThresholdFile {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&read_artifact(path)?)?)
    }
}

/// Calibrated activation upper bounds of a quantized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationRanges {
    pub bits: u8,
    /// Upper bound of hidden layer `i + 1` at index `i`.
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    pub elapsed: Duration,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub stages: Vec<StageOutcome>,
}

impl RunSummary {
    pub fn stage(&self, stage: Stage) -> Option<&StageOutcome> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "run directory: {}", self.output_dir.display())?;
        for s in &self.stages {
            let state = if s.skipped { "skipped" } else { "ran" };
            write!(f, "{:<9} {state:<8} {:>9.3}s", s.stage.name(), s.elapsed.as_secs_f64())?;
            for (k, v) in &s.metrics {
                write!(f, "  {k}={v:.4}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

struct Produced {
    metrics: BTreeMap<String, f64>,
    labels: BTreeMap<String, String>,
}

impl Produced {
    fn new() -> Self {
        Self { metrics: BTreeMap::new(), labels: BTreeMap::new() }
    }

    fn metric(mut self, key: &str, v: f64) -> Self {
        self.metrics.insert(key.into(), v);
        self
    }

    fn label(mut self, key: &str, v: impl Into<String>) -> Self {
        self.labels.insert(key.into(), v.into());
        self
    }
}

/// A run directory bound to one configuration.
pub struct Pipeline {
    cfg: RunConfig,
    dir: PathBuf,
    data: Option<Dataset>,
}

impl Pipeline {
    /// Validate `cfg`, create the run directory and snapshot the config.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.output_dir.clone();
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
        Ok(Self { cfg, dir, data: None })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn dataset(&mut self) -> Result<&Dataset> {
        if self.data.is_none() {
            self.data = Some(self.cfg.dataset()?);
        }
        Ok(self.data.as_ref().expect("dataset loaded"))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Hash of the configuration a stage's artifacts depend on.
    pub fn fingerprint(&self, stage: Stage) -> String {
        let c = &self.cfg;
        let mut parts = vec![serde_json::json!({ "seed": c.seed, "data": c.data, "model": c.model, "train": c.train })];
        if stage >= Stage::Score {
            parts.push(serde_json::json!(c.scoring));
        }
        if stage >= Stage::Search {
            parts.push(serde_json::json!(c.quant));
        }
        if stage >= Stage::Refine {
            parts.push(serde_json::json!(c.refine));
        }
        sha256_hex(serde_json::Value::Array(parts).to_string().as_bytes())
    }

    fn up_to_date(&self, stage: Stage) -> bool {
        let Ok(rec) = StageRecord::load(&self.dir, stage) else { return false };
        rec.fingerprint == self.fingerprint(stage) && stage.outputs().iter().all(|f| self.path(f).is_file())
    }

    /// Run one stage. Unless `force`, an up-to-date stage is skipped.
    pub fn run_stage(&mut self, stage: Stage, force: bool) -> Result<StageOutcome> {
        let start = Instant::now();
        if !force && self.up_to_date(stage) {
            let rec = StageRecord::load(&self.dir, stage)?;
            log::info!("stage {stage}: up to date, skipped");
            return Ok(StageOutcome { stage, skipped: true, elapsed: start.elapsed(), metrics: rec.metrics });
        }
        for later in Stage::ALL.into_iter().filter(|s| *s > stage) {
            let p = self.path(&later.record_file());
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
        log::info!("stage {stage}: running");
        let produced = self.execute(stage).map_err(|e| Error::Stage { stage: stage.name(), source: Box::new(e) })?;
        let elapsed = start.elapsed();
        let rec = StageRecord {
            stage: stage.name().into(),
            fingerprint: self.fingerprint(stage),
            elapsed_seconds: elapsed.as_secs_f64(),
            metrics: produced.metrics,
            labels: produced.labels,
        };
        let mut text = serde_json::to_string_pretty(&rec)?;
        text.push('\n');
        write_atomic(&self.path(&stage.record_file()), text.as_bytes())?;
        Ok(StageOutcome { stage, skipped: false, elapsed, metrics: rec.metrics })
    }

    /// Run every stage in order, skipping up-to-date ones when `resume`.
    pub fn run_all(&mut self, resume: bool) -> Result<RunSummary> {
        let mut stages = Vec::with_capacity(Stage::ALL.len());
        let mut force = !resume;
        for stage in Stage::ALL {
            let out = self.run_stage(stage, force)?;
            // a stage that ran invalidated everything after it
            force |= !out.skipped;
            stages.push(out);
        }
        Ok(RunSummary { output_dir: self.dir.clone(), stages })
    }

    fn execute(&mut self, stage: Stage) -> Result<Produced> {
        match stage {
            Stage::Train => self.train(),
            Stage::Score => self.score(),
            Stage::Search => self.search(),
            Stage::Quantize => self.quantize(),
            Stage::Refine => self.refine(),
            Stage::Report => {
                let r = report::write_report(&self.dir)?;
                Ok(Produced::new().metric("gaps", r.gaps.len() as f64))
            }
        }
    }

    fn calib_subset(&mut self) -> Result<LabeledSet> {
        let n = self.cfg.quant.calib_samples;
        Ok(self.dataset()?.calib.head(n))
    }

    fn float_model(&self) -> Result<Network> {
        load_model(&self.path(FLOAT_MODEL))
    }

    fn train(&mut self) -> Result<Produced> {
        let cfg = self.cfg.clone();
        let specs = cfg.architecture()?;
        let data = self.dataset()?.clone();
        let mut net = Network::init(data.input_shape(), &specs, &mut stream(cfg.seed, "init"))?;
        if net.num_classes() != data.num_classes {
            return Err(Error::Config(format!(
                "architecture has {} outputs but the data has {} classes",
                net.num_classes(),
                data.num_classes
            )));
        }
        let log = train_float(&mut net, &data.train, &cfg.train, &mut stream(cfg.seed, "train"))?;
        save_model(&net, &self.path(FLOAT_MODEL))?;
        let mut csv = String::from("epoch,loss,train_accuracy\n");
        for e in &log {
            csv.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.train_accuracy));
        }
        write_atomic(&self.path(TRAIN_LOG), csv.as_bytes())?;
        Ok(Produced::new()
            .metric("float_test_accuracy", evaluate_accuracy(&net, &data.test, None)?)
            .metric("float_val_accuracy", evaluate_accuracy(&net, &data.val, None)?)
            .metric("parameters", net.parameter_count() as f64))
    }

    fn score(&mut self) -> Result<Produced> {
        let bytes = read_artifact(&self.path(FLOAT_MODEL))?;
        let net = crate::tensor::decode_model(&bytes)?;
        let cfg = self.cfg.clone();
        let val = self.dataset()?.val.clone();
        let table = score_network(&net, &val, &cfg.scoring, &mut stream(cfg.seed, "score"))?;
        let file = ScoreFile::from_table(&table, sha256_hex(&bytes));
        file.save(&self.path(SCORES))?;
        let zero = file.units.iter().filter(|u| u.phi == 0.0).count();
        Ok(Produced::new().metric("units", file.units.len() as f64).metric("zero_score_units", zero as f64))
    }

    fn search(&mut self) -> Result<Produced> {
        let bytes = read_artifact(&self.path(FLOAT_MODEL))?;
        let net = crate::tensor::decode_model(&bytes)?;
        let scores = ScoreFile::load(&self.path(SCORES))?;
        if scores.model_sha256 != sha256_hex(&bytes) {
            return Err(Error::Format { what: "score file", msg: "scores were computed for a different model".into() });
        }
        let q = self.cfg.quant;
        let scfg = q.search();
        let units = quantizable_units(&net);
        let phi = scores.unit_scores(&units)?;
        let subset = self.dataset()?.val.head(q.search_samples);
        let calib = self.calib_subset()?;
        let reference = evaluate_accuracy(&net, &subset, None)?;
        let act_bits = q.activation_bits();
        let mut probe = |arr: &BitArrangement| evaluate_quantized(&net, arr, &calib, &subset, q.calibration).map(|e| e.accuracy);
        let out = bitsearch::search(units, phi, &scfg, act_bits, reference, &mut probe)?;
        if !(out.b_cur < scfg.target_bits) {
            return Err(Error::Thresholds(format!("average bit-width {} not below {}", out.b_cur, scfg.target_bits)));
        }
        let final_accuracy = probe(&out.arrangement)?;
        write_arrangement(&self.path(ARRANGEMENT), &out.arrangement, &net)?;
        let th = ThresholdFile {
            version: 1,
            target_bits: scfg.target_bits,
            max_bits: scfg.max_bits,
            act_bits,
            step: out.step,
            thresholds: out.thresholds.clone(),
            targets: scfg.targets(),
            b_cur: out.b_cur,
            reference_accuracy: reference,
            evaluations: out.evaluations,
            fallback_used: out.fallback_used,
        };
        let mut text = serde_json::to_string_pretty(&th)?;
        text.push('\n');
        write_atomic(&self.path(THRESHOLDS), text.as_bytes())?;
        write_atomic(&self.path(SEARCH_TRACE), render_trace_csv(&out.trace).as_bytes())?;
        Ok(Produced::new()
            .metric("b_cur", out.b_cur)
            .metric("reference_accuracy", reference)
            .metric("search_accuracy", final_accuracy)
            .metric("evaluations", out.evaluations as f64)
            .metric("fallback_used", f64::from(u8::from(out.fallback_used))))
    }

    fn quantize(&mut self) -> Result<Produced> {
        let net = self.float_model()?;
        let (arr, _) = read_arrangement(&self.path(ARRANGEMENT))?;
        let calib = self.calib_subset()?;
        let test = self.dataset()?.test.clone();
        let eval = evaluate_quantized(&net, &arr, &calib, &test, self.cfg.quant.calibration)?;
        save_model(&eval.view, &self.path(QUANTIZED_MODEL))?;
        let ranges = ActivationRanges { bits: eval.activations.bits, upper: eval.activations.upper.clone() };
        write_atomic(&self.path(ACTIVATION_RANGES), (serde_json::to_string_pretty(&ranges)? + "\n").as_bytes())?;
        Ok(Produced::new().metric("quantized_test_accuracy", eval.accuracy))
    }

    fn refine(&mut self) -> Result<Produced> {
        let teacher = self.float_model()?;
        let (arr, _) = read_arrangement(&self.path(ARRANGEMENT))?;
        let calib = self.calib_subset()?;
        let cfg = self.cfg.clone();
        let data = self.dataset()?.clone();
        let out = refine(
            &teacher,
            &arr,
            &teacher,
            RefineData { train: &data.train, calib: &calib, val: &data.val },
            &cfg.refine,
            &mut stream(cfg.seed, "refine"),
        )?;
        if !pruned_units_are_zero(&out.quantized, &arr) {
            return Err(Error::Arrangement("a pruned unit has non-zero weights after refining".into()));
        }
        let test_accuracy = evaluate_accuracy(&out.quantized, &data.test, Some(&out.activations))?;
        save_model(&out.quantized, &self.path(REFINED_MODEL))?;
        save_model(&out.shadow, &self.path(REFINED_SHADOW))?;
        write_arrangement(&self.path(REFINED_ARRANGEMENT), &arr, &out.quantized)?;
        write_atomic(&self.path(REFINE_LOG), render_refine_log(&out.history).as_bytes())?;
        let ranges = ActivationRanges { bits: out.activations.bits, upper: out.activations.upper.clone() };
        write_atomic(&self.path(REFINED_ACTIVATION_RANGES), (serde_json::to_string_pretty(&ranges)? + "\n").as_bytes())?;
        let orientation = serde_json::to_value(cfg.refine.orientation)?.as_str().unwrap_or_default().to_string();
        Ok(Produced::new()
            .metric("refined_test_accuracy", test_accuracy)
            .metric("refined_val_accuracy", out.accuracy)
            .metric("alpha", cfg.refine.alpha)
            .metric("epochs", cfg.refine.epochs as f64)
            .label("kl_orientation", orientation))
    }
}

/// Run the whole workflow, resuming from any up-to-date stages.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    Pipeline::new(cfg.clone())?.run_all(true)
}
