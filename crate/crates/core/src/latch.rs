//! Pipeline latch layouts.
//!
//! Each inter-stage register bank has a fixed list of named fields with fixed
//! bit widths. The timing model assigns arrival times to these bits and the
//! glitch engine corrupts them, so the layout is shared by both.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LatchId {
    #[serde(rename = "IF_ID")]
    IfId,
    #[serde(rename = "ID_EX")]
    IdEx,
    #[serde(rename = "EX_WB")]
    ExWb,
}

impl LatchId {
    pub const ALL: [LatchId; 3] = [LatchId::IfId, LatchId::IdEx, LatchId::ExWb];

    pub fn name(self) -> &'static str {
        match self {
            LatchId::IfId => "IF_ID",
            LatchId::IdEx => "ID_EX",
            LatchId::ExWb => "EX_WB",
        }
    }

    pub fn from_name(name: &str) -> Option<LatchId> {
        LatchId::ALL.into_iter().find(|l| l.name().eq_ignore_ascii_case(name))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn fields(self) -> &'static [FieldSpec] {
        match self {
            LatchId::IfId => IF_ID_FIELDS,
            LatchId::IdEx => ID_EX_FIELDS,
            LatchId::ExWb => EX_WB_FIELDS,
        }
    }

    pub fn field_index(self, name: &str) -> Option<usize> {
        self.fields().iter().position(|f| f.name == name)
    }

    /// Index of the `valid` field (always last).
    pub fn valid_field(self) -> usize {
        self.fields().len() - 1
    }

    pub fn total_bits(self) -> u32 {
        self.fields().iter().map(|f| f.width).sum()
    }

    /// Stage whose output this latch captures: IF, ID or EX.
    pub fn source_stage(self) -> Stage {
        match self {
            LatchId::IfId => Stage::If,
            LatchId::IdEx => Stage::Id,
            LatchId::ExWb => Stage::Ex,
        }
    }

    /// Stage that consumes this latch.
    pub fn sink_stage(self) -> Stage {
        match self {
            LatchId::IfId => Stage::Id,
            LatchId::IdEx => Stage::Ex,
            LatchId::ExWb => Stage::Wb,
        }
    }
}

impl fmt::Display for LatchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    If,
    Id,
    Ex,
    Wb,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::If, Stage::Id, Stage::Ex, Stage::Wb];

    pub fn name(self) -> &'static str {
        match self {
            Stage::If => "IF",
            Stage::Id => "ID",
            Stage::Ex => "EX",
            Stage::Wb => "WB",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: &'static str,
    pub width: u32,
}

const fn field(name: &'static str, width: u32) -> FieldSpec {
    FieldSpec { name, width }
}

pub const IF_ID_FIELDS: &[FieldSpec] = &[field("instr_word", 32), field("pc", 32), field("valid", 1)];

pub const ID_EX_FIELDS: &[FieldSpec] = &[
    field("ctrl", 16),
    field("rs1_val", 32),
    field("rs2_val", 32),
    field("imm", 32),
    field("rd", 5),
    field("pc", 32),
    field("valid", 1),
];

pub const EX_WB_FIELDS: &[FieldSpec] = &[
    field("result", 32),
    field("rd", 5),
    field("is_load", 1),
    field("mem_data", 32),
    field("valid", 1),
];

pub const MAX_FIELDS: usize = 7;

/// Mask covering the low `width` bits.
pub fn width_mask(width: u32) -> u32 {
    if width >= 32 {
        u32::MAX
    } else {
        (1u32 << width) - 1
    }
}

/// Field-indexed view of a latch, used for generic bit-level corruption and
/// trace comparison.
pub trait LatchFields: Copy + Default + PartialEq {
    const ID: LatchId;
    fn get(&self, field: usize) -> u32;
    fn set(&mut self, field: usize, value: u32);

    fn values(&self) -> [u32; MAX_FIELDS] {
        let mut out = [0; MAX_FIELDS];
        for (i, slot) in out.iter_mut().enumerate().take(Self::ID.fields().len()) {
            *slot = self.get(i);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IfId {
    pub instr_word: u32,
    pub pc: u32,
    pub valid: bool,
}

impl LatchFields for IfId {
    const ID: LatchId = LatchId::IfId;

    fn get(&self, field: usize) -> u32 {
        match field {
            0 => self.instr_word,
            1 => self.pc,
            2 => self.valid as u32,
            _ => panic!("IF_ID has no field {field}"),
        }
    }

    fn set(&mut self, field: usize, value: u32) {
        match field {
            0 => self.instr_word = value,
            1 => self.pc = value,
            2 => self.valid = value & 1 != 0,
            _ => panic!("IF_ID has no field {field}"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdEx {
    pub ctrl: u16,
    pub rs1_val: u32,
    pub rs2_val: u32,
    pub imm: u32,
    pub rd: u8,
    pub pc: u32,
    pub valid: bool,
}

impl LatchFields for IdEx {
    const ID: LatchId = LatchId::IdEx;

    fn get(&self, field: usize) -> u32 {
        match field {
            0 => self.ctrl as u32,
            1 => self.rs1_val,
            2 => self.rs2_val,
            3 => self.imm,
            4 => self.rd as u32,
            5 => self.pc,
            6 => self.valid as u32,
            _ => panic!("ID_EX has no field {field}"),
        }
    }

    fn set(&mut self, field: usize, value: u32) {
        match field {
            0 => self.ctrl = value as u16,
            1 => self.rs1_val = value,
            2 => self.rs2_val = value,
            3 => self.imm = value,
            4 => self.rd = (value & 0x1f) as u8,
            5 => self.pc = value,
            6 => self.valid = value & 1 != 0,
            _ => panic!("ID_EX has no field {field}"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExWb {
    pub result: u32,
    pub rd: u8,
    pub is_load: bool,
    pub mem_data: u32,
    pub valid: bool,
}

impl LatchFields for ExWb {
    const ID: LatchId = LatchId::ExWb;

    fn get(&self, field: usize) -> u32 {
        match field {
            0 => self.result,
            1 => self.rd as u32,
            2 => self.is_load as u32,
            3 => self.mem_data,
            4 => self.valid as u32,
            _ => panic!("EX_WB has no field {field}"),
        }
    }

    fn set(&mut self, field: usize, value: u32) {
        match field {
            0 => self.result = value,
            1 => self.rd = (value & 0x1f) as u8,
            2 => self.is_load = value & 1 != 0,
            3 => self.mem_data = value,
            4 => self.valid = value & 1 != 0,
            _ => panic!("EX_WB has no field {field}"),
        }
    }
}

/// Decoded-control word carried in `ID_EX.ctrl`.
///
/// Bits 0..=5 hold the operation index ([`crate::isa::Mnemonic::index`]); an
/// index with no mnemonic executes as a no-op. The remaining bits are flags.
pub mod ctrl {
    pub const OP_MASK: u16 = 0x3f;
    pub const OP_NONE: u16 = 0x3f;
    pub const REG_WRITE: u16 = 1 << 6;
    pub const MEM_READ: u16 = 1 << 7;
    pub const MEM_WRITE: u16 = 1 << 8;
    pub const BRANCH: u16 = 1 << 9;
    pub const JUMP: u16 = 1 << 10;
    pub const HALT: u16 = 1 << 11;
    pub const TRAP_ILLEGAL: u16 = 1 << 12;
    pub const TRAP_FETCH: u16 = 1 << 13;
    pub const USES_IMM: u16 = 1 << 14;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latch_widths_are_fixed() {
        assert_eq!(LatchId::IfId.total_bits(), 65);
        assert_eq!(LatchId::IdEx.total_bits(), 150);
        assert_eq!(LatchId::ExWb.total_bits(), 71);
        for l in LatchId::ALL {
            assert_eq!(l.fields()[l.valid_field()].name, "valid");
        }
    }

    #[test]
    fn field_accessors_round_trip() {
        let mut l = IdEx::default();
        for (i, f) in LatchId::IdEx.fields().iter().enumerate() {
            l.set(i, 0xffff_ffff);
            assert_eq!(l.get(i), width_mask(f.width));
        }
    }
}
