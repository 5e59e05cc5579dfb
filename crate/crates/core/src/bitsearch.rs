//! Threshold search over unit importance scores.
//!
//! `N` ascending thresholds `p_1..p_N` split the score axis into bit-width
//! bands: scores below `p_1` are pruned (0 bits), scores in
//! `[p_{k-1}, p_k)` get `k - 1` bits and scores at or above `p_N` keep the
//! full `N` bits. Thresholds are global across layers and live on a grid of
//! step `D`, stored as integer step counts so positions are reproducible.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{BitArrangement, QuantUnit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Desired average bit-width `B`; the result is strictly below it.
    pub target_bits: f64,
    pub max_bits: u8,
    /// Grid step `D`; `None` uses `(max score - min score) / 200`.
    pub step: Option<f64>,
    /// Accuracy target `T_1` of the first threshold.
    pub initial_target: f64,
    /// Decay `R` with `T_k = T_{k-1} * R`.
    pub decay: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { target_bits: 2.0, max_bits: 4, step: None, initial_target: 0.5, decay: 0.8 }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_bits > 0.0 && self.target_bits.is_finite()) {
            return Err(Error::Config(format!("target bit-width must be positive, got {}", self.target_bits)));
        }
        if self.max_bits == 0 || self.max_bits > 16 {
            return Err(Error::Config(format!("max_bits must be in 1..=16, got {}", self.max_bits)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if !(self.initial_target > 0.0 && self.initial_target <= 1.0) {
            return Err(Error::Config(format!("initial target must be in (0, 1], got {}", self.initial_target)));
        }
        if let Some(d) = self.step {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("step must be positive, got {d}")));
            }
        }
        Ok(())
    }

    /// Accuracy targets `T_1..T_N`.
    pub fn targets(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.max_bits as usize);
        let mut cur = self.initial_target;
        for _ in 0..self.max_bits {
            t.push(cur);
            cur *= self.decay;
        }
        t
    }
}

/// Default grid step: 1/200 of the score spread, or of the largest score
/// when every unit ties.
pub fn default_step(scores: &[f64]) -> f64 {
    let (lo, hi) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &s| (l.min(s), h.max(s)));
    if hi > lo {
        (hi - lo) / 200.0
    } else {
        hi.max(1.0) / 200.0
    }
}

/// Bit-width of each score under ascending thresholds.
pub fn assign_bits(scores: &[f64], thresholds: &[f64]) -> Result<Vec<u8>> {
    if thresholds.is_empty() || thresholds.len() > 16 {
        return Err(Error::Thresholds(format!("{} thresholds", thresholds.len())));
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) || thresholds.iter().any(|t| t.is_nan()) {
        return Err(Error::Thresholds(format!("not ascending: {thresholds:?}")));
    }
    Ok(scores.iter().map(|&s| thresholds.iter().take_while(|&&p| s >= p).count() as u8).collect())
}

/// Weight-count weighted mean bit-width over the quantizable units.
pub fn average_bitwidth(arr: &BitArrangement, units: &[QuantUnit]) -> f64 {
    let (bits, weights) = units.iter().fold((0.0, 0usize), |(b, w), u| {
        (b + arr.bits(u.id).unwrap_or(0) as f64 * u.weights as f64, w + u.weights)
    });
    if weights == 0 {
        0.0
    } else {
        bits / weights as f64
    }
}

fn mean_bits(bits: &[u8], units: &[QuantUnit]) -> f64 {
    let total: usize = units.iter().map(|u| u.weights).sum();
    if total == 0 {
        return 0.0;
    }
    let sum: f64 = bits.iter().zip(units).map(|(&b, u)| b as f64 * u.weights as f64).sum();
    sum / total as f64
}

/// Quantized accuracy of a candidate arrangement.
pub trait AccuracyProbe {
    fn accuracy(&mut self, arr: &BitArrangement) -> Result<f64>;
}

impl<F: FnMut(&BitArrangement) -> Result<f64>> AccuracyProbe for F {
    fn accuracy(&mut self, arr: &BitArrangement) -> Result<f64> {
        self(arr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Search,
    BackOff,
    Fallback,
}

/// One threshold movement.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub phase: Phase,
    /// 1-based threshold index `k`.
    pub threshold: usize,
    pub position: f64,
    pub accuracy: Option<f64>,
    pub target: Option<f64>,
    pub b_cur: f64,
    /// The move was limited by the next-higher threshold.
    pub clamped: bool,
}

/// Mutable search state: thresholds on the step grid and the resulting
/// arrangement.
#[derive(Debug, Clone)]
pub struct SearchState {
    units: Vec<QuantUnit>,
    scores: Vec<f64>,
    max_bits: u8,
    act_bits: u8,
    step: f64,
    cap: u64,
    pos: Vec<u64>,
    bits: Vec<u8>,
    b_cur: f64,
    pub trace: Vec<TraceStep>,
}

impl SearchState {
    /// All thresholds at 0, so every unit starts at `max_bits`.
    pub fn new(units: Vec<QuantUnit>, scores: Vec<f64>, cfg: &SearchConfig, act_bits: u8) -> Result<Self> {
        cfg.validate()?;
        if units.is_empty() {
            return Err(Error::Empty("no quantizable units".into()));
        }
        if scores.len() != units.len() {
            return Err(Error::Shape(format!("{} scores for {} units", scores.len(), units.len())));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("importance scores must be finite and non-negative".into()));
        }
        let step = cfg.step.unwrap_or_else(|| default_step(&scores));
        let max = scores.iter().copied().fold(0.0, f64::max);
        // first grid position strictly above the largest score
        let mut cap = (max / step).floor() as u64 + 1;
        while (cap as f64) * step <= max {
            cap += 1;
        }
        let n = cfg.max_bits as usize;
        let mut state = Self {
            units,
            scores,
            max_bits: cfg.max_bits,
            act_bits,
            step,
            cap,
            pos: vec![0; n],
            bits: Vec::new(),
            b_cur: 0.0,
            trace: Vec::new(),
        };
        state.refresh()?;
        Ok(state)
    }

    fn refresh(&mut self) -> Result<()> {
        self.bits = assign_bits(&self.scores, &self.thresholds())?;
        self.b_cur = mean_bits(&self.bits, &self.units);
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Threshold positions `p_1..p_N`.
    pub fn thresholds(&self) -> Vec<f64> {
        self.pos.iter().map(|&p| p as f64 * self.step).collect()
    }

    pub fn b_cur(&self) -> f64 {
        self.b_cur
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn units(&self) -> &[QuantUnit] {
        &self.units
    }

    pub fn arrangement(&self) -> BitArrangement {
        let units = self.units.iter().zip(&self.bits).map(|(u, &b)| (u.id, b));
        BitArrangement::from_units(self.max_bits, self.act_bits, units).expect("unit ids are unique")
    }

    /// Place `p_k` (1-based) at grid index `at`, dragging the undetermined
    /// higher thresholds along.
    fn place_searching(&mut self, k: usize, at: u64) -> Result<()> {
        for p in &mut self.pos[k - 1..] {
            *p = at;
        }
        self.refresh()
    }

    fn record(&mut self, phase: Phase, k: usize, accuracy: Option<f64>, target: Option<f64>, clamped: bool) {
        self.trace.push(TraceStep {
            phase,
            threshold: k,
            position: self.pos[k - 1] as f64 * self.step,
            accuracy,
            target,
            b_cur: self.b_cur,
            clamped,
        });
    }
}

/// Result of a complete search.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub thresholds: Vec<f64>,
    pub arrangement: BitArrangement,
    pub b_cur: f64,
    pub step: f64,
    pub trace: Vec<TraceStep>,
    /// Distinct arrangements whose accuracy was measured.
    pub evaluations: usize,
    pub fallback_used: bool,
}

/// Main accuracy-guided phase. Each threshold in turn starts at the previous
/// one and rises by one step at a time; after each move the quantized
/// accuracy is measured and the threshold settles on the last position
/// whose accuracy met its target. Stops as soon as the average bit-width
/// drops below the budget.
pub fn search_thresholds<P: AccuracyProbe + ?Sized>(
    state: &mut SearchState,
    cfg: &SearchConfig,
    reference_accuracy: f64,
    probe: &mut P,
) -> Result<usize> {
    if cfg.initial_target >= reference_accuracy {
        return Err(Error::Config(format!(
            "initial target {} must be below the float accuracy {reference_accuracy}",
            cfg.initial_target
        )));
    }
    let mut cache: HashMap<Vec<u8>, f64> = HashMap::new();
    if state.b_cur < cfg.target_bits {
        return Ok(0);
    }
    for (k, target) in (1..=state.pos.len()).zip(cfg.targets()) {
        let mut at = if k == 1 { 0 } else { state.pos[k - 2] };
        state.place_searching(k, at)?;
        while at < state.cap {
            at += 1;
            state.place_searching(k, at)?;
            let acc = match cache.get(&state.bits) {
                Some(&a) => a,
                None => {
                    let a = probe.accuracy(&state.arrangement())?;
                    cache.insert(state.bits.clone(), a);
                    a
                }
            };
            state.record(Phase::Search, k, Some(acc), Some(target), false);
            if acc < target {
                at -= 1;
                state.place_searching(k, at)?;
                state.record(Phase::BackOff, k, None, Some(target), false);
                break;
            }
            if state.b_cur < cfg.target_bits {
                return Ok(cache.len());
            }
        }
    }
    Ok(cache.len())
}

/// Budget-only tightening: raise `p_N`, then `p_{N-1}`, down to `p_1`, one
/// step at a time until the average bit-width is below the budget. Each
/// threshold is capped just above the largest score and never passes the
/// next-higher threshold.
pub fn fallback_tighten(state: &mut SearchState, cfg: &SearchConfig) -> Result<()> {
    let n = state.pos.len();
    for k in (1..=n).rev() {
        if state.b_cur < cfg.target_bits {
            break;
        }
        let upper = if k == n { state.cap } else { state.pos[k].min(state.cap) };
        while state.b_cur >= cfg.target_bits && state.pos[k - 1] < upper {
            state.pos[k - 1] += 1;
            state.refresh()?;
            let clamped = k < n && state.pos[k - 1] == upper && upper < state.cap;
            state.record(Phase::Fallback, k, None, None, clamped);
        }
    }
    if state.b_cur >= cfg.target_bits {
        return Err(Error::Config(format!(
            "average bit-width {} still not below {} after tightening",
            state.b_cur, cfg.target_bits
        )));
    }
    Ok(())
}

/// Full search: accuracy-guided phase, then budget-only tightening if the
/// budget is still not met.
pub fn search<P: AccuracyProbe + ?Sized>(
    units: Vec<QuantUnit>,
    scores: Vec<f64>,
    cfg: &SearchConfig,
    act_bits: u8,
    reference_accuracy: f64,
    probe: &mut P,
) -> Result<SearchOutcome> {
    let mut state = SearchState::new(units, scores, cfg, act_bits)?;
    let evaluations = search_thresholds(&mut state, cfg, reference_accuracy, probe)?;
    let fallback_used = state.b_cur >= cfg.target_bits;
    if fallback_used {
        fallback_tighten(&mut state, cfg)?;
    }
    debug_assert!(state.b_cur < cfg.target_bits);
    Ok(SearchOutcome {
        thresholds: state.thresholds(),
        arrangement: state.arrangement(),
        b_cur: state.b_cur,
        step: state.step,
        trace: state.trace,
        evaluations,
        fallback_used,
    })
}

/// Trace as CSV: `step,phase,threshold,position,accuracy,target,b_cur,clamped`.
pub fn render_trace_csv(trace: &[TraceStep]) -> String {
    let mut s = String::from("step,phase,threshold,position,accuracy,target,b_cur,clamped\n");
    for (i, t) in trace.iter().enumerate() {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let phase = match t.phase {
            Phase::Search => "search",
            Phase::BackOff => "back_off",
            Phase::Fallback => "fallback",
        };
        let _ = writeln!(
            s,
            "{i},{phase},{},{},{},{},{},{}",
            t.threshold,
            t.position,
            opt(t.accuracy),
            opt(t.target),
            t.b_cur,
            t.clamped
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::UnitId;

    fn units(weights: &[usize]) -> Vec<QuantUnit> {
        weights
            .iter()
            .enumerate()
            .map(|(i, &w)| QuantUnit { id: UnitId { layer: 2, unit: i }, weights: w })
            .collect()
    }

    #[test]
    fn assignment_rule() {
        let bits = assign_bits(&[1.0, 2.5, 5.0, 9.0], &[2.0, 3.0, 4.0, 6.0]).unwrap();
        assert_eq!(bits, vec![0, 1, 3, 4]);
        assert_eq!(assign_bits(&[0.1, 3.0], &[0.0; 4]).unwrap(), vec![4, 4]);
        // boundary belongs to the upper band
        assert_eq!(assign_bits(&[2.0], &[2.0, 3.0]).unwrap(), vec![1]);
        assert!(assign_bits(&[1.0], &[2.0, 1.0]).is_err());
    }

    #[test]
    fn eq9_targets() {
        let cfg = SearchConfig { initial_target: 0.5, decay: 0.8, ..Default::default() };
        let t = cfg.targets();
        assert!((t[1] - 0.4).abs() < 1e-15);
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn average_bitwidth_is_weight_weighted() {
        let u = units(&[10, 10]);
        let arr = BitArrangement::from_units(4, 4, [(u[0].id, 0), (u[1].id, 4)]).unwrap();
        assert_eq!(average_bitwidth(&arr, &u), 2.0);
        let u = units(&[30, 10]);
        let arr = BitArrangement::from_units(4, 4, [(u[0].id, 3), (u[1].id, 3)]).unwrap();
        assert_eq!(average_bitwidth(&arr, &u), 3.0);
    }

    #[test]
    fn budget_above_max_bits_needs_no_movement() {
        let cfg = SearchConfig { target_bits: 5.0, ..Default::default() };
        let mut calls = 0;
        let mut probe = |_: &BitArrangement| {
            calls += 1;
            Ok(1.0)
        };
        let out = search(units(&[4, 4, 4]), vec![1.0, 2.0, 3.0], &cfg, 4, 0.9, &mut probe).unwrap();
        assert_eq!(out.b_cur, 4.0);
        assert!(out.trace.is_empty());
        assert_eq!(calls, 0);
        assert!(out.arrangement.iter().all(|(_, b)| b == 4));
    }

    #[test]
    fn rejects_unreachable_initial_target() {
        let cfg = SearchConfig { initial_target: 0.95, ..Default::default() };
        let mut probe = |_: &BitArrangement| Ok(1.0);
        assert!(matches!(
            search(units(&[4]), vec![1.0], &cfg, 4, 0.9, &mut probe),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fallback_demotes_top_band_first() {
        let cfg = SearchConfig { target_bits: 3.9, step: Some(1.0), ..Default::default() };
        let mut state = SearchState::new(units(&[1, 1, 1, 1]), vec![1.5, 2.5, 3.5, 4.5], &cfg, 4).unwrap();
        fallback_tighten(&mut state, &cfg).unwrap();
        // p_4 moves to 1.0 then 2.0: unit 0 (1.5) drops to 3 bits at 2.0
        assert_eq!(state.bits(), &[3, 4, 4, 4]);
        assert_eq!(state.thresholds(), vec![0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let cfg = SearchConfig { target_bits: 3.9, step: Some(1.0), ..Default::default() };
        let mut state = SearchState::new(units(&[1, 1]), vec![0.5, 1.5], &cfg, 4).unwrap();
        fallback_tighten(&mut state, &cfg).unwrap();
        let csv = render_trace_csv(&state.trace);
        assert!(csv.starts_with("step,phase,threshold,position,accuracy,target,b_cur,clamped\n"));
        assert_eq!(csv.lines().count(), 1 + state.trace.len());
    }
}
