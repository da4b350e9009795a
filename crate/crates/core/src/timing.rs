//! Pre-silicon timing model.
//!
//! Holds the per-(instruction class, capture latch) critical-path delays, the
//! per-field arrival factors and the clock parameters. All arithmetic is done
//! in integer picoseconds so that boundary decisions are exact; the JSON file
//! and the public query API speak nanoseconds.
//!
//! A capture into a latch is indexed by the class of the instruction whose
//! result is being captured: `IF_ID` by the instruction being fetched into
//! decode, `ID_EX` by the decoding instruction, `EX_WB` by the executing one.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::IClass;
use crate::latch::{LatchId, MAX_FIELDS};

/// Time in picoseconds.
pub type Picos = i64;

pub fn ns_to_ps(ns: f64) -> Picos {
    (ns * 1000.0).round() as Picos
}

pub fn ps_to_ns(ps: Picos) -> f64 {
    ps as f64 / 1000.0
}

/// Lower bound of the per-bit spread, as a fraction of the field arrival.
pub const SPREAD_FLOOR: f64 = 0.3;

#[derive(Debug, Error)]
pub enum TimingError {
    #[error("cannot read timing file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed timing file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{what} must be positive (got {value} ns)")]
    NonPositive { what: String, value: f64 },
    #[error("design not timing-clean: t_crit({iclass}, {latch}) = {t_crit} ns >= T - t_setup = {limit} ns")]
    NotTimingClean {
        iclass: IClass,
        latch: LatchId,
        t_crit: f64,
        limit: f64,
    },
    #[error("missing critical-path entries: {}", .0.join(", "))]
    MissingPairs(Vec<String>),
    #[error("unknown instruction class '{0}'")]
    UnknownClass(String),
    #[error("unknown latch '{0}'")]
    UnknownLatch(String),
    #[error("latch {latch} has no field '{field}'")]
    UnknownField { latch: String, field: String },
    #[error("bit {bit} out of range for {latch}.{field}")]
    BitOutOfRange { latch: LatchId, field: String, bit: u32 },
    #[error("min_glitch_ns {min_glitch} must be below the smallest t_crit + t_setup ({limit})")]
    MinGlitchTooLarge { min_glitch: f64, limit: f64 },
    #[error("field factor {latch}.{field} = {value} outside (0, 1]")]
    BadFactor {
        latch: LatchId,
        field: String,
        value: f64,
    },
    #[error("latch {0} has no field with factor 1.0 carrying its critical path")]
    NoCriticalField(LatchId),
    #[error("{0}.valid must arrive no later than 0.3 x the smallest other field factor")]
    ValidNotEarliest(LatchId),
    #[error("glitch offset {offset} ns outside [{lo}, {hi}) (below the minimum the clock network propagates, or not a glitch)")]
    OffsetOutOfDomain { offset: f64, lo: f64, hi: f64 },
}

/// On-disk form of the timing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    pub clock_period_ns: f64,
    pub setup_ns: f64,
    pub min_glitch_ns: f64,
    pub crit_ns: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub field_factors: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub bit_spread_seed: u64,
}

fn default_factor(latch: LatchId, field: &str) -> f64 {
    match (latch, field) {
        (_, "valid") => 0.1,
        (LatchId::IfId, "instr_word") => 1.0,
        (LatchId::IfId, "pc") => 0.8,
        (LatchId::IdEx, "ctrl") => 1.0,
        (LatchId::IdEx, "rs1_val" | "rs2_val") => 0.95,
        (LatchId::IdEx, "imm") => 0.85,
        (LatchId::IdEx, "rd") => 0.7,
        (LatchId::IdEx, "pc") => 0.6,
        (LatchId::ExWb, "result" | "mem_data") => 1.0,
        (LatchId::ExWb, "rd") => 0.6,
        (LatchId::ExWb, "is_load") => 0.65,
        _ => 1.0,
    }
}

/// One bit's arrival under a given occupant class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitArrival {
    pub at: Picos,
    pub field: u8,
    pub bit: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDelay {
    pub iclass: IClass,
    pub stage: LatchId,
    pub t_crit_ns: f64,
}

/// Validated, immutable timing model.
#[derive(Debug, Clone)]
pub struct TimingModel {
    provenance: Option<String>,
    clock_period: Picos,
    setup: Picos,
    min_glitch: Picos,
    crit: [[Picos; 3]; 9],
    factors: [[f64; MAX_FIELDS]; 3],
    seed: u64,
    /// Per latch, per field, per bit: fraction of the field arrival.
    fractions: [Vec<Vec<f64>>; 3],
    /// Per class, per latch: every bit's arrival, latest first.
    arrivals: Vec<[Vec<BitArrival>; 3]>,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-bit spread: the bit with the largest seeded hash arrives exactly at
/// the field arrival, every other bit somewhere in `[0.3, 1)` of it.
fn spread_fractions(seed: u64, latch: LatchId, field: usize, width: u32) -> Vec<f64> {
    let hashes: Vec<u64> = (0..width)
        .map(|bit| {
            let key = ((latch.index() as u64) << 16) | ((field as u64) << 8) | bit as u64;
            mix64(seed ^ mix64(key))
        })
        .collect();
    let top = hashes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    hashes
        .iter()
        .enumerate()
        .map(|(i, h)| {
            if i == top {
                1.0
            } else {
                let u = (h >> 11) as f64 / (1u64 << 53) as f64;
                SPREAD_FLOOR + (1.0 - SPREAD_FLOOR) * u
            }
        })
        .collect()
}

impl TimingModel {
    pub fn from_file(file: &TimingFile) -> Result<Self, TimingError> {
        let positive = |what: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(ns_to_ps(v))
            } else {
                Err(TimingError::NonPositive {
                    what: what.to_string(),
                    value: v,
                })
            }
        };
        let clock_period = positive("clock_period_ns", file.clock_period_ns)?;
        let setup = positive("setup_ns", file.setup_ns)?;
        let min_glitch = positive("min_glitch_ns", file.min_glitch_ns)?;

        let mut crit = [[None; 3]; 9];
        for (class_name, per_latch) in &file.crit_ns {
            let class = IClass::from_name(class_name)
                .ok_or_else(|| TimingError::UnknownClass(class_name.clone()))?;
            for (latch_name, &v) in per_latch {
                let latch = LatchId::from_name(latch_name)
                    .ok_or_else(|| TimingError::UnknownLatch(latch_name.clone()))?;
                let ps = positive(&format!("t_crit({class}, {latch})"), v)?;
                crit[class.index()][latch.index()] = Some(ps);
            }
        }
        let mut missing = Vec::new();
        for class in IClass::ALL {
            for latch in LatchId::ALL {
                if crit[class.index()][latch.index()].is_none() {
                    missing.push(format!("({class}, {latch})"));
                }
            }
        }
        if !missing.is_empty() {
            return Err(TimingError::MissingPairs(missing));
        }
        let crit = crit.map(|row| row.map(|c| c.unwrap()));

        let limit = clock_period - setup;
        let mut smallest = Picos::MAX;
        for class in IClass::ALL {
            for latch in LatchId::ALL {
                let t = crit[class.index()][latch.index()];
                if t >= limit {
                    return Err(TimingError::NotTimingClean {
                        iclass: class,
                        latch,
                        t_crit: ps_to_ns(t),
                        limit: ps_to_ns(limit),
                    });
                }
                smallest = smallest.min(t + setup);
            }
        }
        if min_glitch >= smallest {
            return Err(TimingError::MinGlitchTooLarge {
                min_glitch: file.min_glitch_ns,
                limit: ps_to_ns(smallest),
            });
        }

        for name in file.field_factors.keys() {
            LatchId::from_name(name).ok_or_else(|| TimingError::UnknownLatch(name.clone()))?;
        }
        let mut factors = [[0.0; MAX_FIELDS]; 3];
        for latch in LatchId::ALL {
            let given = file.field_factors.get(latch.name());
            if let Some(given) = given {
                for field in given.keys() {
                    if latch.field_index(field).is_none() {
                        return Err(TimingError::UnknownField {
                            latch: latch.name().to_string(),
                            field: field.clone(),
                        });
                    }
                }
            }
            for (i, f) in latch.fields().iter().enumerate() {
                let v = given
                    .and_then(|g| g.get(f.name).copied())
                    .unwrap_or_else(|| default_factor(latch, f.name));
                if !(v > 0.0 && v <= 1.0) {
                    return Err(TimingError::BadFactor {
                        latch,
                        field: f.name.to_string(),
                        value: v,
                    });
                }
                factors[latch.index()][i] = v;
            }
            let n = latch.fields().len();
            let data = &factors[latch.index()][..n - 1];
            if !data.contains(&1.0) {
                return Err(TimingError::NoCriticalField(latch));
            }
            let min_data = data.iter().copied().fold(f64::INFINITY, f64::min);
            if factors[latch.index()][n - 1] > SPREAD_FLOOR * min_data {
                return Err(TimingError::ValidNotEarliest(latch));
            }
        }

        let seed = file.bit_spread_seed;
        let fractions = LatchId::ALL.map(|latch| {
            latch
                .fields()
                .iter()
                .enumerate()
                .map(|(i, f)| spread_fractions(seed, latch, i, f.width))
                .collect::<Vec<_>>()
        });

        let mut model = TimingModel {
            provenance: file.provenance.clone(),
            clock_period,
            setup,
            min_glitch,
            crit,
            factors,
            seed,
            fractions,
            arrivals: Vec::new(),
        };
        model.arrivals = IClass::ALL
            .iter()
            .map(|&class| LatchId::ALL.map(|latch| model.compute_arrivals(class, latch)))
            .collect();
        Ok(model)
    }

    fn compute_arrivals(&self, class: IClass, latch: LatchId) -> Vec<BitArrival> {
        let mut out = Vec::with_capacity(latch.total_bits() as usize);
        for (field, f) in latch.fields().iter().enumerate() {
            for bit in 0..f.width {
                out.push(BitArrival {
                    at: self.arrival_ps(class, latch, field, bit),
                    field: field as u8,
                    bit: bit as u8,
                });
            }
        }
        out.sort_by(|a, b| b.at.cmp(&a.at).then(a.field.cmp(&b.field)).then(a.bit.cmp(&b.bit)));
        out
    }

    fn arrival_ps(&self, class: IClass, latch: LatchId, field: usize, bit: u32) -> Picos {
        let t = self.crit[class.index()][latch.index()] as f64;
        let a = t * self.factors[latch.index()][field] * self.fractions[latch.index()][field][bit as usize];
        a.round() as Picos
    }

    pub fn from_json_str(text: &str) -> Result<Self, TimingError> {
        let file: TimingFile = serde_json::from_str(text)?;
        Self::from_file(&file)
    }

    /// The shipped synthetic reference fixture.
    pub fn reference() -> Self {
        Self::from_json_str(REFERENCE_TIMING_JSON).expect("reference timing fixture is valid")
    }

    pub fn to_file(&self) -> TimingFile {
        let crit_ns = IClass::ALL
            .iter()
            .map(|&c| {
                let row = LatchId::ALL
                    .iter()
                    .map(|&l| (l.name().to_string(), ps_to_ns(self.crit[c.index()][l.index()])))
                    .collect();
                (c.name().to_string(), row)
            })
            .collect();
        let field_factors = LatchId::ALL
            .iter()
            .map(|&l| {
                let row = l
                    .fields()
                    .iter()
                    .enumerate()
                    .map(|(i, f)| (f.name.to_string(), self.factors[l.index()][i]))
                    .collect();
                (l.name().to_string(), row)
            })
            .collect();
        TimingFile {
            provenance: self.provenance.clone(),
            clock_period_ns: ps_to_ns(self.clock_period),
            setup_ns: ps_to_ns(self.setup),
            min_glitch_ns: ps_to_ns(self.min_glitch),
            crit_ns,
            field_factors,
            bit_spread_seed: self.seed,
        }
    }

    pub fn provenance(&self) -> Option<&str> {
        self.provenance.as_deref()
    }

    pub fn clock_period_ps(&self) -> Picos {
        self.clock_period
    }

    pub fn setup_ps(&self) -> Picos {
        self.setup
    }

    pub fn min_glitch_ps(&self) -> Picos {
        self.min_glitch
    }

    pub fn clock_period_ns(&self) -> f64 {
        ps_to_ns(self.clock_period)
    }

    pub fn setup_ns(&self) -> f64 {
        ps_to_ns(self.setup)
    }

    pub fn min_glitch_ns(&self) -> f64 {
        ps_to_ns(self.min_glitch)
    }

    pub fn t_crit_ps(&self, class: IClass, latch: LatchId) -> Picos {
        self.crit[class.index()][latch.index()]
    }

    pub fn t_crit_ns(&self, class: IClass, latch: LatchId) -> f64 {
        ps_to_ns(self.t_crit_ps(class, latch))
    }

    /// Smallest capture offset at which `latch` captures cleanly under `class`.
    pub fn threshold_ps(&self, class: IClass, latch: LatchId) -> Picos {
        self.t_crit_ps(class, latch) + self.setup
    }

    pub fn field_factor(&self, latch: LatchId, field: usize) -> f64 {
        self.factors[latch.index()][field]
    }

    pub fn stage_delays(&self) -> Vec<StageDelay> {
        IClass::ALL
            .iter()
            .flat_map(|&c| {
                LatchId::ALL.iter().map(move |&l| StageDelay {
                    iclass: c,
                    stage: l,
                    t_crit_ns: self.t_crit_ns(c, l),
                })
            })
            .collect()
    }

    /// Every bit of `latch` under occupant `class`, latest arrival first.
    pub fn arrivals(&self, class: IClass, latch: LatchId) -> &[BitArrival] {
        &self.arrivals[class.index()][latch.index()]
    }

    /// Check that a capture offset lies in `[o_min, T)`.
    pub fn check_offset_ps(&self, offset: Picos) -> Result<(), TimingError> {
        if offset < self.min_glitch || offset >= self.clock_period {
            return Err(TimingError::OffsetOutOfDomain {
                offset: ps_to_ns(offset),
                lo: self.min_glitch_ns(),
                hi: self.clock_period_ns(),
            });
        }
        Ok(())
    }

    /// Same model with every time value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, TimingError> {
        let mut file = self.to_file();
        file.clock_period_ns *= factor;
        file.setup_ns *= factor;
        file.min_glitch_ns *= factor;
        for row in file.crit_ns.values_mut() {
            for v in row.values_mut() {
                *v *= factor;
            }
        }
        Self::from_file(&file)
    }
}

pub const REFERENCE_TIMING_JSON: &str = include_str!("../fixtures/timing_ref.json");

pub fn load_timing(path: impl AsRef<Path>) -> Result<TimingModel, TimingError> {
    let text = std::fs::read_to_string(path)?;
    TimingModel::from_json_str(&text)
}

/// `T - t_setup - t_crit(class, latch)`, in ns.
pub fn slack(model: &TimingModel, class: IClass, latch: LatchId) -> f64 {
    ps_to_ns(model.clock_period - model.setup - model.t_crit_ps(class, latch))
}

/// Whether a capture edge `offset_ns` after launch violates setup on `latch`
/// for an occupant of `class`. The boundary `offset == t_crit + t_setup` is safe.
pub fn violates(model: &TimingModel, class: IClass, latch: LatchId, offset_ns: f64) -> Result<bool, TimingError> {
    let offset = ns_to_ps(offset_ns);
    model.check_offset_ps(offset)?;
    Ok(offset < model.threshold_ps(class, latch))
}

/// Arrival time (ns) of one bit of a latch field under occupant `class`.
pub fn bit_arrival(
    model: &TimingModel,
    latch: LatchId,
    field: &str,
    bit: u32,
    class: IClass,
) -> Result<f64, TimingError> {
    let index = latch.field_index(field).ok_or_else(|| TimingError::UnknownField {
        latch: latch.name().to_string(),
        field: field.to_string(),
    })?;
    if bit >= latch.fields()[index].width {
        return Err(TimingError::BitOutOfRange {
            latch,
            field: field.to_string(),
            bit,
        });
    }
    Ok(ps_to_ns(model.arrival_ps(class, latch, index, bit)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edited(f: impl FnOnce(&mut TimingFile)) -> Result<TimingModel, TimingError> {
        let mut file: TimingFile = serde_json::from_str(REFERENCE_TIMING_JSON).unwrap();
        f(&mut file);
        TimingModel::from_file(&file)
    }

    #[test]
    fn reference_fixture_loads() {
        let m = TimingModel::reference();
        assert_eq!(m.clock_period_ns(), 10.0);
        assert_eq!(m.setup_ns(), 0.2);
        assert_eq!(m.min_glitch_ns(), 1.0);
        assert_eq!(m.t_crit_ns(IClass::Load, LatchId::IfId), 8.6);
        assert!(m.provenance().unwrap().contains("synthetic"));
    }

    #[test]
    fn rejects_timing_unclean() {
        let err = edited(|f| {
            f.crit_ns.get_mut("LOAD").unwrap().insert("IF_ID".into(), 9.9);
        })
        .unwrap_err();
        assert!(matches!(err, TimingError::NotTimingClean { .. }), "{err}");
        assert!(err.to_string().contains("not timing-clean"));
    }

    #[test]
    fn rejects_missing_pair() {
        let err = edited(|f| {
            f.crit_ns.get_mut("MULDIV").unwrap().remove("EX_WB");
        })
        .unwrap_err();
        assert!(err.to_string().contains("(MULDIV, EX_WB)"), "{err}");
    }

    #[test]
    fn rejects_non_positive_values() {
        assert!(edited(|f| f.setup_ns = 0.0).is_err());
        assert!(edited(|f| {
            f.crit_ns.get_mut("LOAD").unwrap().insert("ID_EX".into(), -1.0);
        })
        .is_err());
    }

    #[test]
    fn rejects_late_valid_bit() {
        let err = edited(|f| {
            f.field_factors
                .entry("IF_ID".into())
                .or_default()
                .insert("valid".into(), 0.9);
        })
        .unwrap_err();
        assert!(matches!(err, TimingError::ValidNotEarliest(LatchId::IfId)));
    }

    #[test]
    fn slack_examples() {
        let m = TimingModel::reference();
        assert!((slack(&m, IClass::Load, LatchId::IfId) - 1.2).abs() < 1e-9);
        let m5 = edited(|f| {
            f.crit_ns.get_mut("ALU_REG").unwrap().insert("EX_WB".into(), 5.0);
        })
        .unwrap();
        assert!((slack(&m5, IClass::AluReg, LatchId::ExWb) - 4.8).abs() < 1e-9);
        for c in IClass::ALL {
            for l in LatchId::ALL {
                assert!(slack(&m, c, l) > 0.0);
            }
        }
    }

    #[test]
    fn violates_examples() {
        let m = TimingModel::reference();
        assert!(violates(&m, IClass::Load, LatchId::IfId, 8.3).unwrap());
        assert!(!violates(&m, IClass::Load, LatchId::IfId, 8.8).unwrap());
        assert!(matches!(
            violates(&m, IClass::Load, LatchId::IfId, 0.5),
            Err(TimingError::OffsetOutOfDomain { .. })
        ));
        assert!(violates(&m, IClass::Load, LatchId::IfId, 10.0).is_err());
    }

    #[test]
    fn latest_instr_word_bit_is_t_crit() {
        let m = TimingModel::reference();
        let latest = (0..32)
            .map(|b| bit_arrival(&m, LatchId::IfId, "instr_word", b, IClass::Load).unwrap())
            .fold(0.0, f64::max);
        assert_eq!(latest, 8.6);
        for latch in LatchId::ALL {
            for class in IClass::ALL {
                let max = m.arrivals(class, latch)[0].at;
                assert_eq!(max, m.t_crit_ps(class, latch));
            }
        }
    }

    #[test]
    fn bit_arrivals_respect_spread_and_valid_is_earliest() {
        let m = TimingModel::reference();
        for latch in LatchId::ALL {
            for class in IClass::ALL {
                let t = m.t_crit_ns(class, latch);
                let valid_at = bit_arrival(&m, latch, "valid", 0, class).unwrap();
                for f in latch.fields() {
                    let a_f = t * m.field_factor(latch, latch.field_index(f.name).unwrap());
                    for b in 0..f.width {
                        let a = bit_arrival(&m, latch, f.name, b, class).unwrap();
                        assert!(a >= SPREAD_FLOOR * a_f - 0.0005 && a <= a_f + 0.0005);
                        assert!(valid_at <= a);
                        assert_eq!(a, bit_arrival(&m, latch, f.name, b, class).unwrap());
                    }
                }
            }
        }
        assert!(bit_arrival(&m, LatchId::IfId, "instr_word", 32, IClass::Load).is_err());
        assert!(bit_arrival(&m, LatchId::IfId, "bogus", 0, IClass::Load).is_err());
    }
}
