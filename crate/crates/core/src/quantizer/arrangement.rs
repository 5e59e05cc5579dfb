//! Bit arrangements and their text file format:
//!
//! ```text
//! # classquant bit arrangement
//! version: 1
//! max_bits: 4
//! act_bits: 4
//! average_bitwidth: 1.96875
//! units: 96
//! layer,unit,bits
//! 2,0,4
//! 2,1,0
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{quantizable_units, UnitId};
use crate::bitsearch::average_bitwidth;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Network;

/// Bit-width of every quantizable unit plus the global activation bit-width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitArrangement {
    pub max_bits: u8,
    pub act_bits: u8,
    bits: BTreeMap<UnitId, u8>,
}

impl BitArrangement {
    pub fn new(max_bits: u8, act_bits: u8) -> Self {
        Self { max_bits, act_bits, bits: BTreeMap::new() }
    }

    /// Every quantizable unit of `net` at `bits`.
    pub fn uniform(net: &Network, bits: u8, max_bits: u8, act_bits: u8) -> Self {
        let mut arr = Self::new(max_bits, act_bits);
        for u in quantizable_units(net) {
            arr.set(u.id, bits);
        }
        arr
    }

    pub fn from_units(max_bits: u8, act_bits: u8, units: impl IntoIterator<Item = (UnitId, u8)>) -> Result<Self> {
        let mut arr = Self::new(max_bits, act_bits);
        for (id, b) in units {
            if arr.bits.insert(id, b).is_some() {
                return Err(Error::Arrangement(format!("duplicate unit ({}, {})", id.layer, id.unit)));
            }
        }
        Ok(arr)
    }

    pub fn set(&mut self, id: UnitId, bits: u8) {
        self.bits.insert(id, bits);
    }

    pub fn remove(&mut self, id: UnitId) -> Option<u8> {
        self.bits.remove(&id)
    }

    pub fn bits(&self, id: UnitId) -> Option<u8> {
        self.bits.get(&id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (UnitId, u8)> + '_ {
        self.bits.iter().map(|(&id, &b)| (id, b))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Check that the arrangement covers exactly the quantizable units of
    /// `net` and every bit-width is within `0..=max_bits`.
    pub fn validate(&self, net: &Network) -> Result<()> {
        let units = quantizable_units(net);
        for u in &units {
            match self.bits.get(&u.id) {
                None => return Err(Error::Arrangement(format!("unit ({}, {}) missing", u.id.layer, u.id.unit))),
                Some(&b) if b > self.max_bits => {
                    return Err(Error::Arrangement(format!(
                        "unit ({}, {}) has {b} bits, max is {}",
                        u.id.layer, u.id.unit, self.max_bits
                    )))
                }
                Some(_) => {}
            }
        }
        if self.bits.len() != units.len() {
            let extra = self.bits.keys().find(|id| !units.iter().any(|u| u.id == **id)).expect("extra unit");
            return Err(Error::Arrangement(format!("unit ({}, {}) is not quantizable", extra.layer, extra.unit)));
        }
        Ok(())
    }
}

pub fn render_arrangement(arr: &BitArrangement, net: &Network) -> Result<String> {
    arr.validate(net)?;
    let avg = average_bitwidth(arr, &quantizable_units(net));
    let mut s = String::new();
    s.push_str("# classquant bit arrangement\n");
    let _ = writeln!(s, "version: 1");
    let _ = writeln!(s, "max_bits: {}", arr.max_bits);
    let _ = writeln!(s, "act_bits: {}", arr.act_bits);
    let _ = writeln!(s, "average_bitwidth: {avg}");
    let _ = writeln!(s, "units: {}", arr.len());
    s.push_str("layer,unit,bits\n");
    for (id, b) in arr.iter() {
        let _ = writeln!(s, "{},{},{}", id.layer, id.unit, b);
    }
    Ok(s)
}

pub fn write_arrangement(path: &Path, arr: &BitArrangement, net: &Network) -> Result<()> {
    write_atomic(path, render_arrangement(arr, net)?.as_bytes())
}

/// Parse an arrangement file; returns the arrangement and the recorded
/// average bit-width.
pub fn parse_arrangement(text: &str, origin: &str) -> Result<(BitArrangement, f64)> {
    let err = |row: usize, msg: String| Error::Parse { path: origin.to_string(), row, msg };
    let mut header: BTreeMap<&str, &str> = BTreeMap::new();
    let mut lines = text.lines().enumerate();
    loop {
        let Some((i, line)) = lines.next() else {
            return Err(err(0, "missing `layer,unit,bits` record header".into()));
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "layer,unit,bits" {
            break;
        }
        let (k, v) = line.split_once(':').ok_or_else(|| err(i + 1, format!("expected `key: value`, got `{line}`")))?;
        header.insert(k.trim(), v.trim());
    }
    let field = |k: &str| header.get(k).copied().ok_or_else(|| err(0, format!("missing header `{k}`")));
    if field("version")? != "1" {
        return Err(err(0, "unsupported version".into()));
    }
    let max_bits: u8 = field("max_bits")?.parse().map_err(|_| err(0, "bad max_bits".into()))?;
    let act_bits: u8 = field("act_bits")?.parse().map_err(|_| err(0, "bad act_bits".into()))?;
    let avg: f64 = field("average_bitwidth")?.parse().map_err(|_| err(0, "bad average_bitwidth".into()))?;
    let count: usize = field("units")?.parse().map_err(|_| err(0, "bad units".into()))?;

    let mut arr = BitArrangement::new(max_bits, act_bits);
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let nums: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
        let (layer, unit, bits) = match nums.as_deref() {
            Some(&[l, u, b]) => (l, u, b),
            _ => return Err(err(i + 1, format!("expected `layer,unit,bits`, got `{line}`"))),
        };
        if bits > max_bits as usize {
            return Err(err(i + 1, format!("{bits} bits exceeds max_bits {max_bits}")));
        }
        let id = UnitId { layer, unit };
        if arr.bits(id).is_some() {
            return Err(err(i + 1, format!("duplicate unit ({layer}, {unit})")));
        }
        arr.set(id, bits as u8);
    }
    if arr.len() != count {
        return Err(err(0, format!("header declares {count} units, found {}", arr.len())));
    }
    Ok((arr, avg))
}

pub fn read_arrangement(path: &Path) -> Result<(BitArrangement, f64)> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    parse_arrangement(&text, &path.display().to_string())
}
