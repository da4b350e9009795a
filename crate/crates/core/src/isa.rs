//! RV32IM instruction model: decode, encode, disassemble.
//!
//! Decoding is total over the 32-bit space. A word either matches one of the
//! supported RV32I + M encodings exactly (every fixed field checked) or it is
//! reported as [`Decoded::Illegal`]. Illegality is a value, never an error.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Instruction class. Timing delays and risk tables are indexed by class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IClass {
    AluReg,
    AluImm,
    Load,
    Store,
    Branch,
    Jump,
    Upper,
    Muldiv,
    System,
}

impl IClass {
    pub const ALL: [IClass; 9] = [
        IClass::AluReg,
        IClass::AluImm,
        IClass::Load,
        IClass::Store,
        IClass::Branch,
        IClass::Jump,
        IClass::Upper,
        IClass::Muldiv,
        IClass::System,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IClass::AluReg => "ALU_REG",
            IClass::AluImm => "ALU_IMM",
            IClass::Load => "LOAD",
            IClass::Store => "STORE",
            IClass::Branch => "BRANCH",
            IClass::Jump => "JUMP",
            IClass::Upper => "UPPER",
            IClass::Muldiv => "MULDIV",
            IClass::System => "SYSTEM",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<IClass> {
        IClass::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for IClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Encoding format of a mnemonic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    R,
    I,
    /// I-type with a 5-bit shift amount and a fixed funct7.
    Shift,
    S,
    B,
    U,
    J,
    Fence,
    /// ECALL / EBREAK: no operands.
    Sys,
}

macro_rules! mnemonics {
    ($($variant:ident => $text:literal, $fmt:ident, $class:ident, $opcode:literal, $f3:literal, $f7:literal;)*) => {
        /// Every supported RV32IM mnemonic. The declaration order is stable and
        /// doubles as the operation index stored in decoded control words.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "UPPERCASE")]
        pub enum Mnemonic {
            $($variant,)*
        }

        impl Mnemonic {
            pub const ALL: &'static [Mnemonic] = &[$(Mnemonic::$variant,)*];

            pub fn text(self) -> &'static str {
                match self { $(Mnemonic::$variant => $text,)* }
            }

            pub fn format(self) -> Format {
                match self { $(Mnemonic::$variant => Format::$fmt,)* }
            }

            pub fn iclass(self) -> IClass {
                match self { $(Mnemonic::$variant => IClass::$class,)* }
            }

            fn opcode(self) -> u32 {
                match self { $(Mnemonic::$variant => $opcode,)* }
            }

            fn funct3(self) -> u32 {
                match self { $(Mnemonic::$variant => $f3,)* }
            }

            fn funct7(self) -> u32 {
                match self { $(Mnemonic::$variant => $f7,)* }
            }
        }
    };
}

mnemonics! {
    Lui    => "lui",    U,     Upper,  0b0110111, 0, 0;
    Auipc  => "auipc",  U,     Upper,  0b0010111, 0, 0;
    Jal    => "jal",    J,     Jump,   0b1101111, 0, 0;
    Jalr   => "jalr",   I,     Jump,   0b1100111, 0b000, 0;
    Beq    => "beq",    B,     Branch, 0b1100011, 0b000, 0;
    Bne    => "bne",    B,     Branch, 0b1100011, 0b001, 0;
    Blt    => "blt",    B,     Branch, 0b1100011, 0b100, 0;
    Bge    => "bge",    B,     Branch, 0b1100011, 0b101, 0;
    Bltu   => "bltu",   B,     Branch, 0b1100011, 0b110, 0;
    Bgeu   => "bgeu",   B,     Branch, 0b1100011, 0b111, 0;
    Lb     => "lb",     I,     Load,   0b0000011, 0b000, 0;
    Lh     => "lh",     I,     Load,   0b0000011, 0b001, 0;
    Lw     => "lw",     I,     Load,   0b0000011, 0b010, 0;
    Lbu    => "lbu",    I,     Load,   0b0000011, 0b100, 0;
    Lhu    => "lhu",    I,     Load,   0b0000011, 0b101, 0;
    Sb     => "sb",     S,     Store,  0b0100011, 0b000, 0;
    Sh     => "sh",     S,     Store,  0b0100011, 0b001, 0;
    Sw     => "sw",     S,     Store,  0b0100011, 0b010, 0;
    Addi   => "addi",   I,     AluImm, 0b0010011, 0b000, 0;
    Slti   => "slti",   I,     AluImm, 0b0010011, 0b010, 0;
    Sltiu  => "sltiu",  I,     AluImm, 0b0010011, 0b011, 0;
    Xori   => "xori",   I,     AluImm, 0b0010011, 0b100, 0;
    Ori    => "ori",    I,     AluImm, 0b0010011, 0b110, 0;
    Andi   => "andi",   I,     AluImm, 0b0010011, 0b111, 0;
    Slli   => "slli",   Shift, AluImm, 0b0010011, 0b001, 0b0000000;
    Srli   => "srli",   Shift, AluImm, 0b0010011, 0b101, 0b0000000;
    Srai   => "srai",   Shift, AluImm, 0b0010011, 0b101, 0b0100000;
    Add    => "add",    R,     AluReg, 0b0110011, 0b000, 0b0000000;
    Sub    => "sub",    R,     AluReg, 0b0110011, 0b000, 0b0100000;
    Sll    => "sll",    R,     AluReg, 0b0110011, 0b001, 0b0000000;
    Slt    => "slt",    R,     AluReg, 0b0110011, 0b010, 0b0000000;
    Sltu   => "sltu",   R,     AluReg, 0b0110011, 0b011, 0b0000000;
    Xor    => "xor",    R,     AluReg, 0b0110011, 0b100, 0b0000000;
    Srl    => "srl",    R,     AluReg, 0b0110011, 0b101, 0b0000000;
    Sra    => "sra",    R,     AluReg, 0b0110011, 0b101, 0b0100000;
    Or     => "or",     R,     AluReg, 0b0110011, 0b110, 0b0000000;
    And    => "and",    R,     AluReg, 0b0110011, 0b111, 0b0000000;
    Fence  => "fence",  Fence, System, 0b0001111, 0b000, 0;
    Ecall  => "ecall",  Sys,   System, 0b1110011, 0, 0;
    Ebreak => "ebreak", Sys,   System, 0b1110011, 0, 0;
    Mul    => "mul",    R,     Muldiv, 0b0110011, 0b000, 0b0000001;
    Mulh   => "mulh",   R,     Muldiv, 0b0110011, 0b001, 0b0000001;
    Mulhsu => "mulhsu", R,     Muldiv, 0b0110011, 0b010, 0b0000001;
    Mulhu  => "mulhu",  R,     Muldiv, 0b0110011, 0b011, 0b0000001;
    Div    => "div",    R,     Muldiv, 0b0110011, 0b100, 0b0000001;
    Divu   => "divu",   R,     Muldiv, 0b0110011, 0b101, 0b0000001;
    Rem    => "rem",    R,     Muldiv, 0b0110011, 0b110, 0b0000001;
    Remu   => "remu",   R,     Muldiv, 0b0110011, 0b111, 0b0000001;
}

impl Mnemonic {
    /// Position in [`Mnemonic::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Mnemonic> {
        Mnemonic::ALL.get(index).copied()
    }

    pub fn from_text(text: &str) -> Option<Mnemonic> {
        Mnemonic::ALL
            .iter()
            .copied()
            .find(|m| m.text().eq_ignore_ascii_case(text))
    }

    pub fn writes_rd(self) -> bool {
        matches!(
            self.format(),
            Format::R | Format::I | Format::Shift | Format::U | Format::J
        )
    }

    pub fn reads_rs1(self) -> bool {
        matches!(
            self.format(),
            Format::R | Format::I | Format::Shift | Format::S | Format::B
        )
    }

    pub fn reads_rs2(self) -> bool {
        matches!(self.format(), Format::R | Format::S | Format::B)
    }

    /// DIV/DIVU/REM/REMU: the long-latency M-extension operations.
    pub fn is_long_latency(self) -> bool {
        matches!(
            self,
            Mnemonic::Div | Mnemonic::Divu | Mnemonic::Rem | Mnemonic::Remu
        )
    }
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.text())
    }
}

/// A decoded RV32IM instruction.
///
/// Fields not used by the mnemonic's format are zero. `imm` is the
/// sign-extended immediate; for `lui`/`auipc` it is the full upper value
/// (low 12 bits clear), for shifts the shift amount, for `fence` the raw
/// 12-bit `fm|pred|succ` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub raw: u32,
    pub mnemonic: Mnemonic,
    pub rd: u8,
    pub rs1: u8,
    pub rs2: u8,
    pub imm: i32,
}

/// Outcome of decoding one 32-bit word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decoded {
    Valid(Instruction),
    Illegal(u32),
}

impl Decoded {
    pub fn valid(self) -> Option<Instruction> {
        match self {
            Decoded::Valid(i) => Some(i),
            Decoded::Illegal(_) => None,
        }
    }

    pub fn is_illegal(self) -> bool {
        matches!(self, Decoded::Illegal(_))
    }

    pub fn raw(self) -> u32 {
        match self {
            Decoded::Valid(i) => i.raw,
            Decoded::Illegal(w) => w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("register x{0} out of range")]
    RegisterOutOfRange(u8),
    #[error("immediate {imm} out of range for {mnemonic}")]
    ImmediateOutOfRange { mnemonic: Mnemonic, imm: i64 },
    #[error("offset {imm} for {mnemonic} is not a multiple of 2")]
    MisalignedOffset { mnemonic: Mnemonic, imm: i64 },
}

/// The canonical NOP, `addi x0, x0, 0`.
pub const NOP_WORD: u32 = 0x0000_0013;

pub const fn nop() -> Instruction {
    Instruction {
        raw: NOP_WORD,
        mnemonic: Mnemonic::Addi,
        rd: 0,
        rs1: 0,
        rs2: 0,
        imm: 0,
    }
}

fn sext(value: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((value << shift) as i32) >> shift
}

fn rd_of(w: u32) -> u8 {
    ((w >> 7) & 0x1f) as u8
}
fn rs1_of(w: u32) -> u8 {
    ((w >> 15) & 0x1f) as u8
}
fn rs2_of(w: u32) -> u8 {
    ((w >> 20) & 0x1f) as u8
}
fn funct3_of(w: u32) -> u32 {
    (w >> 12) & 0x7
}
fn funct7_of(w: u32) -> u32 {
    w >> 25
}

fn imm_i(w: u32) -> i32 {
    (w as i32) >> 20
}
fn imm_s(w: u32) -> i32 {
    sext(((w >> 25) << 5) | ((w >> 7) & 0x1f), 12)
}
fn imm_b(w: u32) -> i32 {
    let v = ((w >> 31) & 1) << 12
        | ((w >> 7) & 1) << 11
        | ((w >> 25) & 0x3f) << 5
        | ((w >> 8) & 0xf) << 1;
    sext(v, 13)
}
fn imm_j(w: u32) -> i32 {
    let v = ((w >> 31) & 1) << 20
        | ((w >> 12) & 0xff) << 12
        | ((w >> 20) & 1) << 11
        | ((w >> 21) & 0x3ff) << 1;
    sext(v, 21)
}

/// Decode one word. Total: every input yields either a valid instruction or
/// `Illegal`.
pub fn decode(word: u32) -> Decoded {
    match decode_mnemonic(word) {
        Some(m) => Decoded::Valid(fields_of(m, word)),
        None => Decoded::Illegal(word),
    }
}

fn decode_mnemonic(w: u32) -> Option<Mnemonic> {
    use Mnemonic::*;
    let f3 = funct3_of(w);
    let f7 = funct7_of(w);
    let m = match w & 0x7f {
        0b0110111 => Lui,
        0b0010111 => Auipc,
        0b1101111 => Jal,
        0b1100111 if f3 == 0 => Jalr,
        0b1100011 => match f3 {
            0b000 => Beq,
            0b001 => Bne,
            0b100 => Blt,
            0b101 => Bge,
            0b110 => Bltu,
            0b111 => Bgeu,
            _ => return None,
        },
        0b0000011 => match f3 {
            0b000 => Lb,
            0b001 => Lh,
            0b010 => Lw,
            0b100 => Lbu,
            0b101 => Lhu,
            _ => return None,
        },
        0b0100011 => match f3 {
            0b000 => Sb,
            0b001 => Sh,
            0b010 => Sw,
            _ => return None,
        },
        0b0010011 => match (f3, f7) {
            (0b000, _) => Addi,
            (0b010, _) => Slti,
            (0b011, _) => Sltiu,
            (0b100, _) => Xori,
            (0b110, _) => Ori,
            (0b111, _) => Andi,
            (0b001, 0b0000000) => Slli,
            (0b101, 0b0000000) => Srli,
            (0b101, 0b0100000) => Srai,
            _ => return None,
        },
        0b0110011 => match (f7, f3) {
            (0b0000000, 0b000) => Add,
            (0b0100000, 0b000) => Sub,
            (0b0000000, 0b001) => Sll,
            (0b0000000, 0b010) => Slt,
            (0b0000000, 0b011) => Sltu,
            (0b0000000, 0b100) => Xor,
            (0b0000000, 0b101) => Srl,
            (0b0100000, 0b101) => Sra,
            (0b0000000, 0b110) => Or,
            (0b0000000, 0b111) => And,
            (0b0000001, 0b000) => Mul,
            (0b0000001, 0b001) => Mulh,
            (0b0000001, 0b010) => Mulhsu,
            (0b0000001, 0b011) => Mulhu,
            (0b0000001, 0b100) => Div,
            (0b0000001, 0b101) => Divu,
            (0b0000001, 0b110) => Rem,
            (0b0000001, 0b111) => Remu,
            _ => return None,
        },
        0b0001111 if f3 == 0 => Fence,
        0b1110011 => match w {
            0x0000_0073 => Ecall,
            0x0010_0073 => Ebreak,
            _ => return None,
        },
        _ => return None,
    };
    Some(m)
}

fn fields_of(m: Mnemonic, w: u32) -> Instruction {
    let (rd, rs1, rs2, imm) = match m.format() {
        Format::R => (rd_of(w), rs1_of(w), rs2_of(w), 0),
        Format::I => (rd_of(w), rs1_of(w), 0, imm_i(w)),
        Format::Shift => (rd_of(w), rs1_of(w), 0, rs2_of(w) as i32),
        Format::S => (0, rs1_of(w), rs2_of(w), imm_s(w)),
        Format::B => (0, rs1_of(w), rs2_of(w), imm_b(w)),
        Format::U => (rd_of(w), 0, 0, (w & 0xffff_f000) as i32),
        Format::J => (rd_of(w), 0, 0, imm_j(w)),
        Format::Fence => (rd_of(w), rs1_of(w), 0, (w >> 20) as i32),
        Format::Sys => (0, 0, 0, 0),
    };
    Instruction {
        raw: w,
        mnemonic: m,
        rd,
        rs1,
        rs2,
        imm,
    }
}

fn check_reg(r: u8) -> Result<u32, EncodeError> {
    if r < 32 {
        Ok(r as u32)
    } else {
        Err(EncodeError::RegisterOutOfRange(r))
    }
}

fn check_signed(m: Mnemonic, imm: i32, bits: u32) -> Result<u32, EncodeError> {
    let lo = -(1i64 << (bits - 1));
    let hi = (1i64 << (bits - 1)) - 1;
    let v = imm as i64;
    if v < lo || v > hi {
        return Err(EncodeError::ImmediateOutOfRange { mnemonic: m, imm: v });
    }
    Ok(imm as u32 & ((1u32 << bits) - 1))
}

/// Encode the fields of `instr` (its `raw` is ignored).
pub fn encode(instr: &Instruction) -> Result<u32, EncodeError> {
    let m = instr.mnemonic;
    let op = m.opcode();
    let f3 = m.funct3() << 12;
    let rd = check_reg(instr.rd)? << 7;
    let rs1 = check_reg(instr.rs1)? << 15;
    let rs2 = check_reg(instr.rs2)? << 20;
    let word = match m.format() {
        Format::R => (m.funct7() << 25) | rs2 | rs1 | f3 | rd | op,
        Format::I => (check_signed(m, instr.imm, 12)? << 20) | rs1 | f3 | rd | op,
        Format::Shift => {
            if !(0..32).contains(&instr.imm) {
                return Err(EncodeError::ImmediateOutOfRange {
                    mnemonic: m,
                    imm: instr.imm as i64,
                });
            }
            (m.funct7() << 25) | ((instr.imm as u32) << 20) | rs1 | f3 | rd | op
        }
        Format::S => {
            let v = check_signed(m, instr.imm, 12)?;
            ((v >> 5) << 25) | rs2 | rs1 | f3 | ((v & 0x1f) << 7) | op
        }
        Format::B => {
            let v = check_signed(m, instr.imm, 13)?;
            if v & 1 != 0 {
                return Err(EncodeError::MisalignedOffset {
                    mnemonic: m,
                    imm: instr.imm as i64,
                });
            }
            ((v >> 12) & 1) << 31
                | ((v >> 5) & 0x3f) << 25
                | rs2
                | rs1
                | f3
                | ((v >> 1) & 0xf) << 8
                | ((v >> 11) & 1) << 7
                | op
        }
        Format::U => {
            if instr.imm & 0xfff != 0 {
                return Err(EncodeError::ImmediateOutOfRange {
                    mnemonic: m,
                    imm: instr.imm as i64,
                });
            }
            (instr.imm as u32) | rd | op
        }
        Format::J => {
            let v = check_signed(m, instr.imm, 21)?;
            if v & 1 != 0 {
                return Err(EncodeError::MisalignedOffset {
                    mnemonic: m,
                    imm: instr.imm as i64,
                });
            }
            ((v >> 20) & 1) << 31
                | ((v >> 1) & 0x3ff) << 21
                | ((v >> 11) & 1) << 20
                | ((v >> 12) & 0xff) << 12
                | rd
                | op
        }
        Format::Fence => {
            if !(0..4096).contains(&instr.imm) {
                return Err(EncodeError::ImmediateOutOfRange {
                    mnemonic: m,
                    imm: instr.imm as i64,
                });
            }
            ((instr.imm as u32) << 20) | rs1 | f3 | rd | op
        }
        Format::Sys => match m {
            Mnemonic::Ebreak => 0x0010_0073,
            _ => 0x0000_0073,
        },
    };
    Ok(word)
}

impl Instruction {
    /// Build an instruction from fields, computing `raw`. Fields that the
    /// format does not use are cleared.
    pub fn new(mnemonic: Mnemonic, rd: u8, rs1: u8, rs2: u8, imm: i32) -> Result<Self, EncodeError> {
        let (rd, rs1, rs2, imm) = match mnemonic.format() {
            Format::R => (rd, rs1, rs2, 0),
            Format::I | Format::Shift | Format::Fence => (rd, rs1, 0, imm),
            Format::S | Format::B => (0, rs1, rs2, imm),
            Format::U | Format::J => (rd, 0, 0, imm),
            Format::Sys => (0, 0, 0, 0),
        };
        let mut i = Instruction {
            raw: 0,
            mnemonic,
            rd,
            rs1,
            rs2,
            imm,
        };
        i.raw = encode(&i)?;
        Ok(i)
    }

    pub fn iclass(&self) -> IClass {
        self.mnemonic.iclass()
    }
}

const FENCE_SET: [char; 4] = ['i', 'o', 'r', 'w'];

fn fence_set(bits: u32) -> String {
    FENCE_SET
        .iter()
        .enumerate()
        .filter(|(k, _)| bits & (8 >> k) != 0)
        .map(|(_, c)| *c)
        .collect()
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.mnemonic.text();
        let (rd, rs1, rs2, imm) = (self.rd, self.rs1, self.rs2, self.imm);
        match self.mnemonic.format() {
            Format::R => write!(f, "{m} x{rd}, x{rs1}, x{rs2}"),
            Format::I if self.mnemonic.iclass() == IClass::Load || self.mnemonic == Mnemonic::Jalr => {
                write!(f, "{m} x{rd}, {imm}(x{rs1})")
            }
            Format::I | Format::Shift => write!(f, "{m} x{rd}, x{rs1}, {imm}"),
            Format::S => write!(f, "{m} x{rs2}, {imm}(x{rs1})"),
            Format::B => write!(f, "{m} x{rs1}, x{rs2}, {imm}"),
            Format::U => write!(f, "{m} x{rd}, 0x{:x}", (imm as u32) >> 12),
            Format::J => write!(f, "{m} x{rd}, {imm}"),
            Format::Fence => {
                let pred = (imm as u32 >> 4) & 0xf;
                let succ = imm as u32 & 0xf;
                if imm as u32 >> 8 == 0 && rd == 0 && rs1 == 0 && pred != 0 && succ != 0 {
                    write!(f, "fence {}, {}", fence_set(pred), fence_set(succ))
                } else {
                    write!(f, ".word 0x{:08x}", self.raw)
                }
            }
            Format::Sys => f.write_str(m),
        }
    }
}

/// Stable text form of any word; illegal words render as `.illegal 0x…`.
pub fn disassemble(word: u32) -> String {
    match decode(word) {
        Decoded::Valid(i) => i.to_string(),
        Decoded::Illegal(w) => format!(".illegal 0x{w:08x}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_examples() {
        assert_eq!(decode(0x0000_0013).valid(), Some(nop()));
        let lw = decode(0x0003_2283).valid().unwrap();
        assert_eq!(lw.mnemonic, Mnemonic::Lw);
        assert_eq!((lw.rd, lw.rs1, lw.imm), (5, 6, 0));
        assert!(decode(0).is_illegal());
        assert!(decode(0xffff_ffff).is_illegal());
    }

    #[test]
    fn encode_examples() {
        let add = Instruction::new(Mnemonic::Add, 3, 1, 2, 0).unwrap();
        assert_eq!(add.raw, 0x0020_81b3);
        let beq = Instruction::new(Mnemonic::Beq, 0, 1, 2, 8).unwrap();
        assert_eq!(beq.raw, 0x0020_8463);
        assert_eq!(Instruction::new(Mnemonic::Addi, 0, 0, 0, 0).unwrap().raw, NOP_WORD);
    }

    #[test]
    fn encode_rejects_bad_immediates() {
        assert!(matches!(
            Instruction::new(Mnemonic::Beq, 0, 1, 2, 4096),
            Err(EncodeError::ImmediateOutOfRange { .. })
        ));
        assert!(matches!(
            Instruction::new(Mnemonic::Beq, 0, 1, 2, 3),
            Err(EncodeError::MisalignedOffset { .. })
        ));
        assert!(Instruction::new(Mnemonic::Addi, 1, 1, 0, 2048).is_err());
        assert!(Instruction::new(Mnemonic::Slli, 1, 1, 0, 32).is_err());
        assert!(Instruction::new(Mnemonic::Add, 32, 1, 2, 0).is_err());
    }

    #[test]
    fn disassemble_examples() {
        assert_eq!(disassemble(0x0003_2283), "lw x5, 0(x6)");
        assert_eq!(disassemble(0x0000_0013), "addi x0, x0, 0");
        assert_eq!(disassemble(0xffff_ffff), ".illegal 0xffffffff");
        assert_eq!(disassemble(0x0ff0_000f), "fence iorw, iorw");
    }

    #[test]
    fn shift_with_bit25_is_illegal() {
        // slli x1, x1, 1 with funct7 bit 0 set would be RV64 shamt[5]
        let w = Instruction::new(Mnemonic::Slli, 1, 1, 0, 1).unwrap().raw | (1 << 25);
        assert!(decode(w).is_illegal());
    }

    #[test]
    fn load_class_is_exactly_the_five_loads() {
        let loads: Vec<_> = Mnemonic::ALL
            .iter()
            .filter(|m| m.iclass() == IClass::Load)
            .map(|m| m.text())
            .collect();
        assert_eq!(loads, ["lb", "lh", "lw", "lbu", "lhu"]);
    }

    #[test]
    fn system_words() {
        assert_eq!(decode(0x0000_0073).valid().unwrap().mnemonic, Mnemonic::Ecall);
        assert_eq!(decode(0x0010_0073).valid().unwrap().mnemonic, Mnemonic::Ebreak);
        // csrrw is outside the supported subset
        assert!(decode(0x3400_1073).is_illegal());
    }
}
