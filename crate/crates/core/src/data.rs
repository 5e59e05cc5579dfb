//! Labeled datasets: CSV and IDX ingestion, seeded splits and the bundled
//! synthetic glyph and blob sets.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Samples with class labels, all sharing one input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    input_shape: Vec<usize>,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(input_shape: Vec<usize>, features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Shape(format!("{} samples but {} labels", features.len(), labels.len())));
        }
        let n: usize = input_shape.iter().product();
        if let Some(i) = features.iter().position(|f| f.len() != n) {
            return Err(Error::Shape(format!("sample {i} has {} features, expected {n}", features[i].len())));
        }
        Ok(Self { input_shape, features, labels })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i], self.labels[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &usize)> + '_ {
        self.features.iter().map(Vec::as_slice).zip(&self.labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            input_shape: self.input_shape.clone(),
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` samples (all of them if fewer).
    pub fn head(&self, n: usize) -> Self {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Sample indices grouped by label `0..num_classes`.
    pub fn indices_by_class(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            if y < num_classes {
                out[y].push(i);
            }
        }
        out
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().position(|&y| y >= num_classes) {
            Some(i) => Err(Error::Shape(format!("sample {i} has label {} >= {num_classes}", self.labels[i]))),
            None => Ok(()),
        }
    }
}

/// Fractions of the data assigned to each held-out split; the rest trains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub val: f64,
    pub calib: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { val: 0.2, calib: 0.05, test: 0.15 }
    }
}

/// A labeled dataset with disjoint train/val/calib/test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub calib: LabeledSet,
    pub test: LabeledSet,
}

impl Dataset {
    /// Shuffle with `rng` and carve the held-out splits off the front.
    pub fn split<R: Rng + ?Sized>(all: LabeledSet, num_classes: usize, fr: SplitFractions, rng: &mut R) -> Result<Self> {
        all.check_labels(num_classes)?;
        if [fr.val, fr.calib, fr.test].iter().any(|f| !(0.0..1.0).contains(f)) || fr.val + fr.calib + fr.test >= 1.0 {
            return Err(Error::Config(format!("bad split fractions {fr:?}")));
        }
        let mut idx: Vec<usize> = (0..all.len()).collect();
        idx.shuffle(rng);
        let n = all.len() as f64;
        let counts = [fr.val, fr.calib, fr.test].map(|f| (f * n).round() as usize);
        let mut start = 0;
        let mut take = |c: usize| {
            let s = all.subset(&idx[start..start + c]);
            start += c;
            s
        };
        let val = take(counts[0]);
        let calib = take(counts[1]);
        let test = take(counts[2]);
        let train = all.subset(&idx[start..]);
        for (name, s) in [("train", &train), ("val", &val), ("calib", &calib), ("test", &test)] {
            if s.is_empty() {
                return Err(Error::Empty(format!("{name} split is empty")));
            }
        }
        Ok(Self { num_classes, train, val, calib, test })
    }

    pub fn input_shape(&self) -> &[usize] {
        self.train.input_shape()
    }
}

/// Read `label,f1,...,fn` rows. Features are kept as-is when they already
/// lie in `[0, 1]`, otherwise min-max scaled over the whole file. An empty
/// `input_shape` takes the flat width of the first row.
pub fn ingest_csv(path: &Path, num_classes: usize, input_shape: &[usize]) -> Result<LabeledSet> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, &path.display().to_string(), num_classes, input_shape)
}

pub fn parse_csv(text: &str, origin: &str, num_classes: usize, input_shape: &[usize]) -> Result<LabeledSet> {
    let err = |row: usize, msg: String| Error::Parse { path: origin.to_string(), row, msg };
    let mut shape = input_shape.to_vec();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cells = line.split(',').map(str::trim);
        let label: usize = cells
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| err(row, "label is not a non-negative integer".into()))?;
        if label >= num_classes {
            return Err(err(row, format!("label {label} out of range for {num_classes} classes")));
        }
        let f = cells
            .map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| err(row, "feature is not a finite number".into()))?;
        if shape.is_empty() {
            shape.push(f.len());
        }
        let width: usize = shape.iter().product();
        if f.len() != width {
            return Err(err(row, format!("{} features, expected {width}", f.len())));
        }
        features.push(f);
        labels.push(label);
    }
    if shape.is_empty() {
        return Err(Error::Empty(format!("{origin} has no data rows")));
    }
    scale_unit_interval(&mut features);
    LabeledSet::new(shape, features, labels)
}

fn scale_unit_interval(features: &mut [Vec<f64>]) {
    let (lo, hi) = features
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo >= 0.0 && hi <= 1.0 {
        return;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    features.iter_mut().flatten().for_each(|v| *v = (*v - lo) / span);
}

pub fn render_csv(set: &LabeledSet) -> String {
    let mut s = String::new();
    for (x, y) in set.iter() {
        let _ = write!(s, "{y}");
        for v in x {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_csv(path: &Path, set: &LabeledSet) -> Result<()> {
    write_atomic(path, render_csv(set).as_bytes())
}

/// Read an IDX image file (`u8`, rank 3) and its IDX label file. Pixels are
/// scaled by 1/255 and each image becomes a `[1, H, W]` sample.
pub fn ingest_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<LabeledSet> {
    let (dims, pixels) = read_idx(&std::fs::read(images)?, "idx images")?;
    let (ldims, ls) = read_idx(&std::fs::read(labels)?, "idx labels")?;
    let [n, h, w] = dims[..] else {
        return Err(Error::Format { what: "idx images", msg: format!("expected rank 3, got {dims:?}") });
    };
    if ldims != [n] {
        return Err(Error::Format { what: "idx labels", msg: format!("expected [{n}], got {ldims:?}") });
    }
    let mut features = Vec::with_capacity(n);
    let mut out_labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = ls[i] as usize;
        if y >= num_classes {
            return Err(Error::Parse {
                path: labels.display().to_string(),
                row: i,
                msg: format!("label {y} out of range for {num_classes} classes"),
            });
        }
        features.push(pixels[i * h * w..(i + 1) * h * w].iter().map(|&p| p as f64 / 255.0).collect());
        out_labels.push(y);
    }
    LabeledSet::new(vec![1, h, w], features, out_labels)
}

fn read_idx(bytes: &[u8], what: &'static str) -> Result<(Vec<usize>, Vec<u8>)> {
    let bad = |msg: &str| Error::Format { what, msg: msg.to_string() };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("bad magic"));
    }
    if bytes[2] != 0x08 {
        return Err(bad("only unsigned byte data is supported"));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let total: usize = dims.iter().product();
    if bytes.len() != header + total {
        return Err(bad("payload length does not match dimensions"));
    }
    Ok((dims, bytes[header..].to_vec()))
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

/// Ten-class 16x16 glyph images: a 5x7 digit bitmap scaled by two, randomly
/// shifted, with random stroke intensity and Gaussian pixel noise.
pub fn synthetic_glyphs<R: Rng + ?Sized>(samples: usize, noise: f64, rng: &mut R) -> Result<LabeledSet> {
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(format!("glyph noise: {e}")))?;
    let mut features = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % 10;
        let dx: isize = rng.gen_range(-2..=2);
        let dy: isize = rng.gen_range(-1..=1);
        let ink: f64 = rng.gen_range(0.6..1.0);
        let mut img = vec![0.0; 256];
        for (gy, row) in GLYPHS[label].iter().enumerate() {
            for (gx, c) in row.bytes().enumerate() {
                if c != b'1' {
                    continue;
                }
                for (sy, sx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let y = 1 + dy + (2 * gy + sy) as isize;
                    let x = 3 + dx + (2 * gx + sx) as isize;
                    if (0..16).contains(&y) && (0..16).contains(&x) {
                        img[y as usize * 16 + x as usize] = ink;
                    }
                }
            }
        }
        img.iter_mut().for_each(|v| *v = (*v + normal.sample(rng)).clamp(0.0, 1.0));
        features.push(img);
        labels.push(label);
    }
    LabeledSet::new(vec![1, 16, 16], features, labels)
}

/// Ten Gaussian blobs in `dim` dimensions, clamped to `[0, 1]`.
pub fn synthetic_blobs<R: Rng + ?Sized>(samples: usize, dim: usize, spread: f64, rng: &mut R) -> Result<LabeledSet> {
    let normal = Normal::new(0.0, spread).map_err(|e| Error::Config(format!("blob spread: {e}")))?;
    let centers: Vec<Vec<f64>> = (0..10).map(|_| (0..dim).map(|_| rng.gen_range(0.15..0.85)).collect()).collect();
    let mut features = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % 10;
        features.push(centers[label].iter().map(|c| (c + normal.sample(rng)).clamp(0.0, 1.0)).collect());
        labels.push(label);
    }
    LabeledSet::new(vec![dim], features, labels)
}
