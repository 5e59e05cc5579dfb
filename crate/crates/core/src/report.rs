//! Run summary and plot-ready CSVs, computed from the artifacts of a run
//! directory alone. Missing artifacts leave named gaps instead of failing.

use std::fmt::Write as _;
use std::path::Path;

use crate::bitsearch::average_bitwidth;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fsutil::{read_artifact, write_atomic};
use crate::importance::ScoreFile;
use crate::pipeline::{self, Stage, StageRecord, ThresholdFile};
use crate::quantizer::{quantizable_units, read_arrangement, BitArrangement, QuantUnit};
use crate::tensor::load_model;

pub const REPORT: &str = "report.txt";
pub const BIT_HISTOGRAM: &str = "bit_histogram.csv";
pub const SCORE_HISTOGRAM: &str = "score_histogram.csv";
pub const ACCURACY: &str = "accuracy.csv";

/// Score histogram bins per layer over `[0, M]`.
pub const SCORE_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub bit_histogram: String,
    pub score_histogram: String,
    pub accuracy: String,
    /// Artifacts that were absent.
    pub gaps: Vec<String>,
}

/// Percentage of quantizable weights at each bit-width `0..=max_bits`.
pub fn bit_distribution(arr: &BitArrangement, units: &[QuantUnit]) -> Vec<f64> {
    let mut weights = vec![0usize; arr.max_bits as usize + 1];
    for u in units {
        let b = arr.bits(u.id).unwrap_or(0) as usize;
        weights[b.min(arr.max_bits as usize)] += u.weights;
    }
    let total: usize = weights.iter().sum();
    weights.iter().map(|&w| if total == 0 { 0.0 } else { 100.0 * w as f64 / total as f64 }).collect()
}

fn optional<T>(r: Result<T>, gaps: &mut Vec<String>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::MissingArtifact(p)) => {
            let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            gaps.push(name);
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

/// Build the report of run directory `dir` without writing anything.
pub fn build_report(dir: &Path) -> Result<Report> {
    let mut gaps = Vec::new();
    let config = optional(read_artifact(&dir.join(pipeline::CONFIG_FILE)), &mut gaps)?
        .map(|b| RunConfig::from_toml(&String::from_utf8_lossy(&b)))
        .transpose()?;
    let train = optional(StageRecord::load(dir, Stage::Train), &mut gaps)?;
    let quant = optional(StageRecord::load(dir, Stage::Quantize), &mut gaps)?;
    let refined = optional(StageRecord::load(dir, Stage::Refine), &mut gaps)?;
    let thresholds = optional(ThresholdFile::load(&dir.join(pipeline::THRESHOLDS)), &mut gaps)?;
    let arrangement = optional(read_arrangement(&dir.join(pipeline::ARRANGEMENT)), &mut gaps)?.map(|(a, _)| a);
    let model = optional(load_model(&dir.join(pipeline::FLOAT_MODEL)), &mut gaps)?;
    let scores = optional(ScoreFile::load(&dir.join(pipeline::SCORES)), &mut gaps)?;
    let units = model.as_ref().map(quantizable_units);

    let float_acc = train.as_ref().and_then(|r| r.metric("float_test_accuracy"));
    let quant_acc = quant.as_ref().and_then(|r| r.metric("quantized_test_accuracy"));
    let refined_acc = refined.as_ref().and_then(|r| r.metric("refined_test_accuracy"));
    let na = || "n/a".to_string();

    let mut t = String::from("classquant run report\n\n");
    if let Some(c) = &config {
        let _ = writeln!(t, "seed: {}", c.seed);
    }
    let _ = writeln!(t, "float accuracy (test): {}", float_acc.map_or_else(na, pct));
    let _ = writeln!(t, "quantized accuracy (test): {}", quant_acc.map_or_else(na, pct));
    let _ = writeln!(t, "refined accuracy (test): {}", refined_acc.map_or_else(na, pct));
    if let (Some(f), Some(r)) = (float_acc, refined_acc) {
        let _ = writeln!(t, "refined - float: {:+.2} points", 100.0 * (r - f));
    }
    let orientation = refined.as_ref().and_then(|r| r.labels.get("kl_orientation").cloned());
    let _ = writeln!(
        t,
        "distillation divergence: {}",
        match orientation.as_deref() {
            Some("standard") => "standard, sum Y log(Y / Y_teacher)",
            Some("as_printed") => "as printed, sum Y log(Y_teacher / Y)",
            Some(other) => other,
            None => "n/a",
        }
    );

    let b_cur = match (&arrangement, &units) {
        (Some(a), Some(u)) => Some(average_bitwidth(a, u)),
        _ => thresholds.as_ref().map(|th| th.b_cur),
    };
    if let Some(th) = &thresholds {
        let _ = writeln!(t, "target average bit-width B: {}", th.target_bits);
    }
    let _ = writeln!(t, "average bit-width b_cur: {}", b_cur.map_or_else(na, |b| format!("{b:.4}")));
    if let Some(th) = &thresholds {
        let _ = writeln!(t, "max bits N: {}", th.max_bits);
        let _ = writeln!(t, "activation bits: {}", th.act_bits);
        let _ = writeln!(t, "step D: {}", th.step);
        let ps: Vec<String> = th.thresholds.iter().enumerate().map(|(k, p)| format!("p{}={p:.6}", k + 1)).collect();
        let _ = writeln!(t, "thresholds: {}", ps.join(" "));
        let ts: Vec<String> = th.targets.iter().enumerate().map(|(k, v)| format!("T{}={}", k + 1, pct(*v))).collect();
        let _ = writeln!(t, "accuracy targets: {}", ts.join(" "));
        let _ = writeln!(t, "reference accuracy (search subset): {}", pct(th.reference_accuracy));
        let _ = writeln!(t, "search evaluations: {}", th.evaluations);
        let _ = writeln!(t, "fallback tightening: {}", if th.fallback_used { "yes" } else { "no" });
    }

    let mut bit_csv = String::from("layer,bits,units,weights,weight_percent\n");
    if let (Some(arr), Some(units)) = (&arrangement, &units) {
        let dist = bit_distribution(arr, units);
        t.push_str("\nbit-width distribution (share of quantizable weights):\n");
        for (b, share) in dist.iter().enumerate() {
            let _ = writeln!(t, "  {b}-bit: {share:.2}%");
        }
        let mut layers: Vec<usize> = units.iter().map(|u| u.id.layer).collect();
        layers.dedup();
        let n = arr.max_bits as usize;
        t.push_str("\nunits per bit-width by layer:\n  layer");
        for b in 0..=n {
            let _ = write!(t, " {:>6}", format!("{b}-bit"));
        }
        t.push('\n');
        for &l in &layers {
            let lu: Vec<&QuantUnit> = units.iter().filter(|u| u.id.layer == l).collect();
            let _ = write!(t, "  {l:>5}");
            let total_w: usize = lu.iter().map(|u| u.weights).sum();
            for b in 0..=n {
                let sel: Vec<&&QuantUnit> = lu.iter().filter(|u| arr.bits(u.id).map(usize::from) == Some(b)).collect();
                let w: usize = sel.iter().map(|u| u.weights).sum();
                let _ = write!(t, " {:>6}", sel.len());
                let _ = writeln!(bit_csv, "{l},{b},{},{w},{:.4}", sel.len(), 100.0 * w as f64 / total_w.max(1) as f64);
            }
            t.push('\n');
        }
        for (b, share) in dist.iter().enumerate() {
            let sel: Vec<&QuantUnit> = units.iter().filter(|u| arr.bits(u.id).map(usize::from) == Some(b)).collect();
            let w: usize = sel.iter().map(|u| u.weights).sum();
            let _ = writeln!(bit_csv, "all,{b},{},{w},{share:.4}", sel.len());
        }
    }

    let mut score_csv = String::from("layer,bin_start,bin_end,units\n");
    if let Some(s) = &scores {
        let m = s.num_classes as f64;
        let width = m / SCORE_BINS as f64;
        let mut layers: Vec<usize> = s.units.iter().map(|u| u.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        for l in layers {
            let mut counts = [0usize; SCORE_BINS];
            for u in s.units.iter().filter(|u| u.layer == l) {
                counts[((u.phi / width) as usize).min(SCORE_BINS - 1)] += 1;
            }
            for (i, c) in counts.iter().enumerate() {
                let _ = writeln!(score_csv, "{l},{},{},{c}", i as f64 * width, (i + 1) as f64 * width);
            }
        }
        let pruned = s.units.iter().filter(|u| u.phi == 0.0).count();
        let _ = writeln!(t, "\nunits scored: {} ({} with zero importance)", s.units.len(), pruned);
    }

    let mut acc_csv = String::from("model,accuracy\n");
    for (name, v) in [("float", float_acc), ("quantized", quant_acc), ("refined", refined_acc)] {
        if let Some(v) = v {
            let _ = writeln!(acc_csv, "{name},{v}");
        }
    }

    t.push_str("\nmissing artifacts:");
    if gaps.is_empty() {
        t.push_str(" none\n");
    } else {
        t.push('\n');
        for g in &gaps {
            let _ = writeln!(t, "  - {g}");
        }
    }
    Ok(Report { text: t, bit_histogram: bit_csv, score_histogram: score_csv, accuracy: acc_csv, gaps })
}

/// Build the report of `dir` and write its files there.
pub fn write_report(dir: &Path) -> Result<Report> {
    let r = build_report(dir)?;
    write_atomic(&dir.join(REPORT), r.text.as_bytes())?;
    write_atomic(&dir.join(BIT_HISTOGRAM), r.bit_histogram.as_bytes())?;
    write_atomic(&dir.join(SCORE_HISTOGRAM), r.score_histogram.as_bytes())?;
    write_atomic(&dir.join(ACCURACY), r.accuracy.as_bytes())?;
    Ok(r)
}
