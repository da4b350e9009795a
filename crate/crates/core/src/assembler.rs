//! Two-pass assembler for the RV32IM dialect used by the shipped workloads,
//! plus the manifest-and-binary image format.
//!
//! Dialect: one statement per line, `#` starts a comment, any number of
//! `label:` prefixes. Directives: `.org`, `.word`, `.byte`, `.ascii`,
//! `.equ`, `.align`, `.illegal`. Pseudo-instructions: `nop`, `li`, `la`,
//! `mv`, `not`, `neg`, `j`, `jr`, `ret`, `beqz`, `bnez`. `li` and `la`
//! always expand to `lui` + `addi`.
//!
//! Branch and `jal` operands that are labels are absolute targets; plain
//! numbers are PC-relative byte offsets (the form the disassembler prints).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::isa::{EncodeError, Format, IClass, Instruction, Mnemonic};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub base: u32,
    pub bytes: Vec<u8>,
}

impl Segment {
    pub fn end(&self) -> u64 {
        self.base as u64 + self.bytes.len() as u64
    }
}

/// A loadable memory image.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Program {
    pub segments: Vec<Segment>,
    pub entry: u32,
    pub symbols: BTreeMap<String, u32>,
}

impl Program {
    /// Check segment overlap and that the entry point lies inside a segment.
    pub fn validate(&self) -> Result<(), ImageError> {
        let mut sorted: Vec<&Segment> = self.segments.iter().collect();
        sorted.sort_by_key(|s| s.base);
        for pair in sorted.windows(2) {
            if pair[0].end() > pair[1].base as u64 {
                return Err(ImageError::Overlap);
            }
        }
        if sorted.iter().any(|s| s.end() > 1 << 32) {
            return Err(ImageError::Manifest("segment exceeds the 32-bit address space".into()));
        }
        if !self.segments.is_empty() && !self.contains(self.entry) {
            return Err(ImageError::EntryOutsideSegments(self.entry));
        }
        Ok(())
    }

    pub fn contains(&self, addr: u32) -> bool {
        self.segments
            .iter()
            .any(|s| s.base <= addr && (addr as u64) < s.end())
    }

    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }

    /// Word at `addr` if it lies entirely inside one segment.
    pub fn word_at(&self, addr: u32) -> Option<u32> {
        let seg = self
            .segments
            .iter()
            .find(|s| s.base <= addr && addr as u64 + 4 <= s.end())?;
        let off = (addr - seg.base) as usize;
        Some(u32::from_le_bytes(seg.bytes[off..off + 4].try_into().unwrap()))
    }

    /// Overwrite the word at `addr`. Panics if it is outside every segment.
    pub fn patch_word(&mut self, addr: u32, value: u32) {
        let seg = self
            .segments
            .iter_mut()
            .find(|s| s.base <= addr && addr as u64 + 4 <= s.end())
            .expect("patch address inside a segment");
        let off = (addr - seg.base) as usize;
        seg.bytes[off..off + 4].copy_from_slice(&value.to_le_bytes());
    }
}

/// 1-based source position for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceSpan {
    pub line: u32,
    pub column: u32,
    pub length: u32,
}

impl fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("unknown mnemonic '{0}'")]
    UnknownMnemonic(String),
    #[error("duplicate label '{0}'")]
    DuplicateLabel(String),
    #[error("unresolved label '{0}'")]
    UnresolvedLabel(String),
    #[error("immediate {value} out of range")]
    ImmediateOutOfRange { value: i64 },
    #[error("branch target 0x{0:x} is not 4-byte aligned")]
    MisalignedBranchTarget(u32),
    #[error("bad register '{0}'")]
    BadRegister(String),
    #[error("{0}")]
    Syntax(String),
    #[error("segments overlap")]
    Overlap,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{span}: {kind}")]
pub struct AsmError {
    pub span: SourceSpan,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Clone, Copy)]
struct Token<'a> {
    text: &'a str,
    col: u32,
}

impl Token<'_> {
    fn span(&self, line: u32) -> SourceSpan {
        SourceSpan {
            line,
            column: self.col,
            length: self.text.len().max(1) as u32,
        }
    }
}

struct Statement<'a> {
    line: u32,
    name: Token<'a>,
    operands: Vec<Token<'a>>,
}

impl Statement<'_> {
    fn err(&self, tok: &Token, kind: AsmErrorKind) -> AsmError {
        AsmError {
            span: tok.span(self.line),
            kind,
        }
    }

    fn expect_operands(&self, n: usize) -> Result<(), AsmError> {
        if self.operands.len() != n {
            return Err(self.err(
                &self.name,
                AsmErrorKind::Syntax(format!(
                    "'{}' takes {n} operand(s), got {}",
                    self.name.text,
                    self.operands.len()
                )),
            ));
        }
        Ok(())
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut prev = '\0';
    for (i, c) in line.char_indices() {
        match c {
            '"' if prev != '\\' => in_str = !in_str,
            '#' if !in_str => return &line[..i],
            _ => {}
        }
        prev = c;
    }
    line
}

fn trimmed_token(text: &str, start: usize) -> Token<'_> {
    let lead = text.len() - text.trim_start().len();
    Token {
        text: text.trim(),
        col: (start + lead + 1) as u32,
    }
}

/// Split a line into labels and an optional statement.
fn parse_line(line_no: u32, raw: &str) -> Result<(Vec<Token<'_>>, Option<Statement<'_>>), AsmError> {
    let body = strip_comment(raw);
    let mut labels = Vec::new();
    let mut rest_start = 0;
    loop {
        let rest = &body[rest_start..];
        let lead = rest.len() - rest.trim_start().len();
        let t = rest.trim_start();
        let ident_len = t
            .char_indices()
            .take_while(|(_, c)| c.is_ascii_alphanumeric() || *c == '_' || *c == '.')
            .count();
        if ident_len > 0 && t[ident_len..].starts_with(':') {
            let name = &t[..ident_len];
            let tok = Token {
                text: name,
                col: (rest_start + lead + 1) as u32,
            };
            if name.starts_with(|c: char| c.is_ascii_digit()) {
                return Err(AsmError {
                    span: tok.span(line_no),
                    kind: AsmErrorKind::Syntax(format!("bad label '{name}'")),
                });
            }
            labels.push(tok);
            rest_start += lead + ident_len + 1;
        } else {
            break;
        }
    }
    let rest = &body[rest_start..];
    if rest.trim().is_empty() {
        return Ok((labels, None));
    }
    let lead = rest.len() - rest.trim_start().len();
    let t = rest.trim_start();
    let name_len = t.find(char::is_whitespace).unwrap_or(t.len());
    let name = Token {
        text: &t[..name_len],
        col: (rest_start + lead + 1) as u32,
    };
    let ops_start = rest_start + lead + name_len;
    let ops_text = &body[ops_start..];
    let mut operands = Vec::new();
    if !ops_text.trim().is_empty() {
        let mut start = 0;
        let mut in_str = false;
        let mut prev = '\0';
        for (i, c) in ops_text.char_indices() {
            match c {
                '"' if prev != '\\' => in_str = !in_str,
                ',' if !in_str => {
                    operands.push(trimmed_token(&ops_text[start..i], ops_start + start));
                    start = i + 1;
                }
                _ => {}
            }
            prev = c;
        }
        operands.push(trimmed_token(&ops_text[start..], ops_start + start));
    }
    let stmt = Statement {
        line: line_no,
        name,
        operands,
    };
    for op in &stmt.operands {
        if op.text.is_empty() {
            return Err(stmt.err(op, AsmErrorKind::Syntax("empty operand".into())));
        }
    }
    Ok((labels, Some(stmt)))
}

pub fn parse_register(text: &str) -> Option<u8> {
    let t = text.trim().to_ascii_lowercase();
    if let Some(n) = t.strip_prefix('x') {
        if let Ok(v) = n.parse::<u8>() {
            return (v < 32 && !n.starts_with('+')).then_some(v);
        }
    }
    let abi = match t.as_str() {
        "zero" => 0,
        "ra" => 1,
        "sp" => 2,
        "gp" => 3,
        "tp" => 4,
        "t0" => 5,
        "t1" => 6,
        "t2" => 7,
        "s0" | "fp" => 8,
        "s1" => 9,
        _ => {
            let (prefix, n) = t.split_at(1.min(t.len()));
            let n: u8 = n.parse().ok()?;
            match (prefix, n) {
                ("a", 0..=7) => 10 + n,
                ("s", 2..=11) => 16 + n,
                ("t", 3..=6) => 25 + n,
                _ => return None,
            }
        }
    };
    Some(abi)
}

fn parse_number(text: &str) -> Option<i64> {
    let t = text.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let v = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(&h.replace('_', ""), 16).ok()?
    } else if let Some(b) = body.strip_prefix("0b").or_else(|| body.strip_prefix("0B")) {
        i64::from_str_radix(&b.replace('_', ""), 2).ok()?
    } else if body.starts_with(|c: char| c.is_ascii_digit()) {
        body.replace('_', "").parse::<i64>().ok()?
    } else {
        return None;
    };
    Some(if neg { -v } else { v })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Value {
    /// A literal number.
    Literal(i64),
    /// Derived from a symbol.
    Symbolic(i64),
}

impl Value {
    fn get(self) -> i64 {
        match self {
            Value::Literal(v) | Value::Symbolic(v) => v,
        }
    }
}

struct Assembler<'a> {
    symbols: BTreeMap<String, i64>,
    labels: BTreeMap<String, u32>,
    stmts: Vec<(Statement<'a>, u32)>,
}

impl<'a> Assembler<'a> {
    /// `number`, `symbol`, `symbol+number` or `symbol-number`.
    fn eval(&self, stmt: &Statement, tok: &Token, lenient: bool) -> Result<Value, AsmError> {
        let t = tok.text.trim();
        if let Some(v) = parse_number(t) {
            return Ok(Value::Literal(v));
        }
        let split = t[1..].find(['+', '-']).map(|i| i + 1);
        let (sym, offset) = match split {
            Some(i) => {
                let off = parse_number(&t[i..]).ok_or_else(|| {
                    stmt.err(tok, AsmErrorKind::Syntax(format!("bad expression '{t}'")))
                })?;
                (t[..i].trim(), off)
            }
            None => (t, 0),
        };
        if sym.is_empty()
            || !sym
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        {
            return Err(stmt.err(tok, AsmErrorKind::Syntax(format!("bad expression '{t}'"))));
        }
        match self.symbols.get(sym) {
            Some(v) => Ok(Value::Symbolic(v + offset)),
            None if lenient => Ok(Value::Symbolic(0)),
            None => Err(stmt.err(tok, AsmErrorKind::UnresolvedLabel(sym.to_string()))),
        }
    }

    fn reg(&self, stmt: &Statement, tok: &Token) -> Result<u8, AsmError> {
        parse_register(tok.text).ok_or_else(|| stmt.err(tok, AsmErrorKind::BadRegister(tok.text.to_string())))
    }

    /// `imm(reg)` memory operand.
    fn mem_operand(&self, stmt: &Statement, tok: &Token) -> Result<(i64, u8), AsmError> {
        let t = tok.text;
        let bad = || stmt.err(tok, AsmErrorKind::Syntax(format!("expected imm(reg), got '{t}'")));
        let open = t.find('(').ok_or_else(bad)?;
        let close = t.rfind(')').ok_or_else(bad)?;
        if close < open || !t[close + 1..].trim().is_empty() {
            return Err(bad());
        }
        let imm_text = t[..open].trim();
        let imm = if imm_text.is_empty() {
            0
        } else {
            let sub = Token {
                text: imm_text,
                col: tok.col,
            };
            self.eval(stmt, &sub, false)?.get()
        };
        let reg_tok = Token {
            text: t[open + 1..close].trim(),
            col: tok.col + open as u32 + 1,
        };
        Ok((imm, self.reg(stmt, &reg_tok)?))
    }
}

fn statement_size(stmt: &Statement, asm: &Assembler, pc: u32) -> Result<u32, AsmError> {
    let name = stmt.name.text.to_ascii_lowercase();
    Ok(match name.as_str() {
        ".word" | ".illegal" => 4 * stmt.operands.len() as u32,
        ".byte" => stmt.operands.len() as u32,
        ".ascii" => {
            stmt.expect_operands(1)?;
            parse_string(stmt, &stmt.operands[0])?.len() as u32
        }
        ".align" => {
            stmt.expect_operands(1)?;
            let n = asm.eval(stmt, &stmt.operands[0], false)?.get();
            if !(0..=12).contains(&n) {
                return Err(stmt.err(&stmt.operands[0], AsmErrorKind::ImmediateOutOfRange { value: n }));
            }
            let a = 1u32 << n;
            (a - pc % a) % a
        }
        "li" | "la" => 8,
        _ if name.starts_with('.') => {
            return Err(stmt.err(&stmt.name, AsmErrorKind::UnknownMnemonic(stmt.name.text.to_string())))
        }
        _ => 4,
    })
}

fn parse_string(stmt: &Statement, tok: &Token) -> Result<Vec<u8>, AsmError> {
    let t = tok.text;
    if t.len() < 2 || !t.starts_with('"') || !t.ends_with('"') {
        return Err(stmt.err(tok, AsmErrorKind::Syntax("expected a quoted string".into())));
    }
    let mut out = Vec::new();
    let mut chars = t[1..t.len() - 1].chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push(b'\n'),
                Some('t') => out.push(b'\t'),
                Some('0') => out.push(0),
                Some('\\') => out.push(b'\\'),
                Some('"') => out.push(b'"'),
                other => {
                    return Err(stmt.err(
                        tok,
                        AsmErrorKind::Syntax(format!("bad escape '\\{}'", other.unwrap_or(' '))),
                    ))
                }
            }
        } else {
            let mut buf = [0; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
        }
    }
    Ok(out)
}

fn encode_err(stmt: &Statement, e: EncodeError) -> AsmError {
    let tok = stmt.operands.last().unwrap_or(&stmt.name);
    let kind = match e {
        EncodeError::RegisterOutOfRange(r) => AsmErrorKind::BadRegister(format!("x{r}")),
        EncodeError::ImmediateOutOfRange { imm, .. } => AsmErrorKind::ImmediateOutOfRange { value: imm },
        EncodeError::MisalignedOffset { imm, .. } => AsmErrorKind::ImmediateOutOfRange { value: imm },
    };
    stmt.err(tok, kind)
}

fn check_imm(stmt: &Statement, tok: &Token, v: i64, lo: i64, hi: i64) -> Result<i32, AsmError> {
    if v < lo || v > hi {
        return Err(stmt.err(tok, AsmErrorKind::ImmediateOutOfRange { value: v }));
    }
    Ok(v as i32)
}

/// `lui`+`addi` pair materialising any 32-bit value.
fn load_immediate(rd: u8, value: u32) -> [Instruction; 2] {
    let hi = value.wrapping_add(0x800) & 0xffff_f000;
    let lo = ((value & 0xfff) as i32) << 20 >> 20;
    [
        Instruction::new(Mnemonic::Lui, rd, 0, 0, hi as i32).unwrap(),
        Instruction::new(Mnemonic::Addi, rd, rd, 0, lo).unwrap(),
    ]
}

fn fence_bits(stmt: &Statement, tok: &Token) -> Result<i32, AsmError> {
    let t = tok.text.to_ascii_lowercase();
    let mut bits = 0;
    for c in t.chars() {
        bits |= match c {
            'i' => 8,
            'o' => 4,
            'r' => 2,
            'w' => 1,
            _ => return Err(stmt.err(tok, AsmErrorKind::Syntax(format!("bad fence set '{t}'")))),
        };
    }
    if bits == 0 {
        return Err(stmt.err(tok, AsmErrorKind::Syntax("empty fence set".into())));
    }
    Ok(bits)
}

impl<'a> Assembler<'a> {
    /// Resolve a branch/jump operand to a PC-relative offset.
    fn target_offset(&self, stmt: &Statement, tok: &Token, pc: u32) -> Result<i64, AsmError> {
        match self.eval(stmt, tok, false)? {
            Value::Literal(off) => {
                if off % 2 != 0 {
                    return Err(stmt.err(tok, AsmErrorKind::ImmediateOutOfRange { value: off }));
                }
                Ok(off)
            }
            Value::Symbolic(target) => {
                let target = target as u32;
                if !target.is_multiple_of(4) {
                    return Err(stmt.err(tok, AsmErrorKind::MisalignedBranchTarget(target)));
                }
                Ok(target.wrapping_sub(pc) as i32 as i64)
            }
        }
    }

    fn instructions(&self, stmt: &Statement, pc: u32) -> Result<Vec<Instruction>, AsmError> {
        let ops = &stmt.operands;
        let lname = stmt.name.text.to_ascii_lowercase();
        let one = |m, rd, rs1, rs2, imm| -> Result<Vec<Instruction>, AsmError> {
            Instruction::new(m, rd, rs1, rs2, imm)
                .map(|i| vec![i])
                .map_err(|e| encode_err(stmt, e))
        };
        match lname.as_str() {
            "nop" => {
                stmt.expect_operands(0)?;
                return one(Mnemonic::Addi, 0, 0, 0, 0);
            }
            "li" | "la" => {
                stmt.expect_operands(2)?;
                let rd = self.reg(stmt, &ops[0])?;
                let v = self.eval(stmt, &ops[1], false)?.get();
                check_imm(stmt, &ops[1], v, i32::MIN as i64, u32::MAX as i64)?;
                return Ok(load_immediate(rd, v as u32).to_vec());
            }
            "mv" => {
                stmt.expect_operands(2)?;
                return one(Mnemonic::Addi, self.reg(stmt, &ops[0])?, self.reg(stmt, &ops[1])?, 0, 0);
            }
            "not" => {
                stmt.expect_operands(2)?;
                return one(Mnemonic::Xori, self.reg(stmt, &ops[0])?, self.reg(stmt, &ops[1])?, 0, -1);
            }
            "neg" => {
                stmt.expect_operands(2)?;
                return one(Mnemonic::Sub, self.reg(stmt, &ops[0])?, 0, self.reg(stmt, &ops[1])?, 0);
            }
            "j" => {
                stmt.expect_operands(1)?;
                let off = self.target_offset(stmt, &ops[0], pc)?;
                let off = check_imm(stmt, &ops[0], off, -(1 << 20), (1 << 20) - 1)?;
                return one(Mnemonic::Jal, 0, 0, 0, off);
            }
            "jr" => {
                stmt.expect_operands(1)?;
                return one(Mnemonic::Jalr, 0, self.reg(stmt, &ops[0])?, 0, 0);
            }
            "ret" => {
                stmt.expect_operands(0)?;
                return one(Mnemonic::Jalr, 0, 1, 0, 0);
            }
            "beqz" | "bnez" => {
                stmt.expect_operands(2)?;
                let m = if lname == "beqz" { Mnemonic::Beq } else { Mnemonic::Bne };
                let rs1 = self.reg(stmt, &ops[0])?;
                let off = self.target_offset(stmt, &ops[1], pc)?;
                let off = check_imm(stmt, &ops[1], off, -4096, 4095)?;
                return one(m, 0, rs1, 0, off);
            }
            _ => {}
        }

        let m = Mnemonic::from_text(&lname)
            .ok_or_else(|| stmt.err(&stmt.name, AsmErrorKind::UnknownMnemonic(stmt.name.text.to_string())))?;
        match m.format() {
            Format::R => {
                stmt.expect_operands(3)?;
                one(m, self.reg(stmt, &ops[0])?, self.reg(stmt, &ops[1])?, self.reg(stmt, &ops[2])?, 0)
            }
            Format::I if m.iclass() == IClass::Load || m == Mnemonic::Jalr => {
                if m == Mnemonic::Jalr && ops.len() == 1 {
                    return one(m, 1, self.reg(stmt, &ops[0])?, 0, 0);
                }
                if m == Mnemonic::Jalr && ops.len() == 3 {
                    let imm = self.eval(stmt, &ops[2], false)?.get();
                    let imm = check_imm(stmt, &ops[2], imm, -2048, 2047)?;
                    return one(m, self.reg(stmt, &ops[0])?, self.reg(stmt, &ops[1])?, 0, imm);
                }
                stmt.expect_operands(2)?;
                let rd = self.reg(stmt, &ops[0])?;
                let (imm, rs1) = self.mem_operand(stmt, &ops[1])?;
                let imm = check_imm(stmt, &ops[1], imm, -2048, 2047)?;
                one(m, rd, rs1, 0, imm)
            }
            Format::I => {
                stmt.expect_operands(3)?;
                let imm = self.eval(stmt, &ops[2], false)?.get();
                let imm = check_imm(stmt, &ops[2], imm, -2048, 2047)?;
                one(m, self.reg(stmt, &ops[0])?, self.reg(stmt, &ops[1])?, 0, imm)
            }
            Format::Shift => {
                stmt.expect_operands(3)?;
                let imm = self.eval(stmt, &ops[2], false)?.get();
                let imm = check_imm(stmt, &ops[2], imm, 0, 31)?;
                one(m, self.reg(stmt, &ops[0])?, self.reg(stmt, &ops[1])?, 0, imm)
            }
            Format::S => {
                stmt.expect_operands(2)?;
                let rs2 = self.reg(stmt, &ops[0])?;
                let (imm, rs1) = self.mem_operand(stmt, &ops[1])?;
                let imm = check_imm(stmt, &ops[1], imm, -2048, 2047)?;
                one(m, 0, rs1, rs2, imm)
            }
            Format::B => {
                stmt.expect_operands(3)?;
                let rs1 = self.reg(stmt, &ops[0])?;
                let rs2 = self.reg(stmt, &ops[1])?;
                let off = self.target_offset(stmt, &ops[2], pc)?;
                let off = check_imm(stmt, &ops[2], off, -4096, 4095)?;
                one(m, 0, rs1, rs2, off)
            }
            Format::U => {
                stmt.expect_operands(2)?;
                let v = self.eval(stmt, &ops[1], false)?.get();
                let v = check_imm(stmt, &ops[1], v, -(1 << 19), (1 << 20) - 1)?;
                one(m, self.reg(stmt, &ops[0])?, 0, 0, ((v as u32) << 12) as i32)
            }
            Format::J => {
                let (rd, target) = match ops.len() {
                    1 => (1, &ops[0]),
                    2 => (self.reg(stmt, &ops[0])?, &ops[1]),
                    _ => return stmt.expect_operands(2).map(|_| vec![]),
                };
                let off = self.target_offset(stmt, target, pc)?;
                let off = check_imm(stmt, target, off, -(1 << 20), (1 << 20) - 1)?;
                one(m, rd, 0, 0, off)
            }
            Format::Fence => {
                let imm = match ops.len() {
                    0 => 0xff,
                    2 => (fence_bits(stmt, &ops[0])? << 4) | fence_bits(stmt, &ops[1])?,
                    _ => return stmt.expect_operands(2).map(|_| vec![]),
                };
                one(m, 0, 0, 0, imm)
            }
            Format::Sys => {
                stmt.expect_operands(0)?;
                one(m, 0, 0, 0, 0)
            }
        }
    }
}

/// Assemble source text into a program image.
pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut asm = Assembler {
        symbols: BTreeMap::new(),
        labels: BTreeMap::new(),
        stmts: Vec::new(),
    };

    // Pass 1: addresses and symbols.
    let mut pc: u32 = 0;
    for (i, raw) in source.lines().enumerate() {
        let line_no = i as u32 + 1;
        let (labels, stmt) = parse_line(line_no, raw)?;
        for l in labels {
            if asm.symbols.contains_key(l.text) {
                return Err(AsmError {
                    span: l.span(line_no),
                    kind: AsmErrorKind::DuplicateLabel(l.text.to_string()),
                });
            }
            asm.symbols.insert(l.text.to_string(), pc as i64);
            asm.labels.insert(l.text.to_string(), pc);
        }
        let Some(stmt) = stmt else { continue };
        match stmt.name.text.to_ascii_lowercase().as_str() {
            ".org" => {
                stmt.expect_operands(1)?;
                let v = asm.eval(&stmt, &stmt.operands[0], false)?.get();
                pc = check_imm(&stmt, &stmt.operands[0], v, 0, u32::MAX as i64)? as u32;
                asm.stmts.push((stmt, pc));
            }
            ".equ" => {
                stmt.expect_operands(2)?;
                let name = stmt.operands[0].text;
                if asm.symbols.contains_key(name) {
                    return Err(stmt.err(&stmt.operands[0], AsmErrorKind::DuplicateLabel(name.to_string())));
                }
                let v = asm.eval(&stmt, &stmt.operands[1], false)?.get();
                asm.symbols.insert(name.to_string(), v);
            }
            _ => {
                let size = statement_size(&stmt, &asm, pc)?;
                asm.stmts.push((stmt, pc));
                pc = pc.checked_add(size).ok_or_else(|| AsmError {
                    span: asm.stmts.last().unwrap().0.name.span(line_no),
                    kind: AsmErrorKind::Syntax("address overflow".into()),
                })?;
            }
        }
    }

    // Pass 2: emit.
    let mut segments: Vec<Segment> = Vec::new();
    let mut current = Segment {
        base: 0,
        bytes: Vec::new(),
    };
    for (stmt, pc) in &asm.stmts {
        let pc = *pc;
        let name = stmt.name.text.to_ascii_lowercase();
        if name == ".org" {
            if !current.bytes.is_empty() {
                segments.push(std::mem::replace(&mut current, Segment { base: pc, bytes: Vec::new() }));
            }
            current.base = pc;
            continue;
        }
        debug_assert_eq!(current.base as u64 + current.bytes.len() as u64, pc as u64);
        match name.as_str() {
            ".word" | ".illegal" => {
                for op in &stmt.operands {
                    let v = asm.eval(stmt, op, false)?.get();
                    let v = check_imm(stmt, op, v, i32::MIN as i64, u32::MAX as i64)?;
                    current.bytes.extend_from_slice(&(v as u32).to_le_bytes());
                }
            }
            ".byte" => {
                for op in &stmt.operands {
                    let v = asm.eval(stmt, op, false)?.get();
                    let v = check_imm(stmt, op, v, -128, 255)?;
                    current.bytes.push(v as u8);
                }
            }
            ".ascii" => current.bytes.extend(parse_string(stmt, &stmt.operands[0])?),
            ".align" => {
                let pad = statement_size(stmt, &asm, pc)?;
                current.bytes.extend(std::iter::repeat_n(0, pad as usize));
            }
            _ => {
                for (k, instr) in asm.instructions(stmt, pc)?.iter().enumerate() {
                    debug_assert!(k < 2);
                    current.bytes.extend_from_slice(&instr.raw.to_le_bytes());
                }
            }
        }
    }
    if !current.bytes.is_empty() {
        segments.push(current);
    }

    let entry = asm
        .labels
        .get("_start")
        .copied()
        .or_else(|| segments.first().map(|s| s.base))
        .unwrap_or(0);
    let program = Program {
        segments,
        entry,
        symbols: asm.labels,
    };
    program.validate().map_err(|e| AsmError {
        span: SourceSpan {
            line: 1,
            column: 1,
            length: 1,
        },
        kind: match e {
            ImageError::Overlap => AsmErrorKind::Overlap,
            other => AsmErrorKind::Syntax(other.to_string()),
        },
    })?;
    Ok(program)
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot access image: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("segments overlap")]
    Overlap,
    #[error("entry point 0x{0:08x} lies outside every segment")]
    EntryOutsideSegments(u32),
    #[error("segment file {file} has {actual} bytes, manifest says {expected}")]
    LengthMismatch { file: String, expected: u32, actual: usize },
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestSegment {
    base: u32,
    file: String,
    len: u32,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    entry: u32,
    segments: Vec<ManifestSegment>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    symbols: BTreeMap<String, u32>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn segment_file_name(manifest: &Path, index: usize) -> String {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    format!("{stem}.seg{index}.bin")
}

/// Write `program` as a JSON manifest at `path` plus one raw binary per
/// segment next to it.
pub fn store_image(program: &Program, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    program.validate()?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut segments = Vec::new();
    for (i, seg) in program.segments.iter().enumerate() {
        let file = segment_file_name(path, i);
        std::fs::write(dir.join(&file), &seg.bytes)?;
        segments.push(ManifestSegment {
            base: seg.base,
            file,
            len: seg.bytes.len() as u32,
            sha256: sha256_hex(&seg.bytes),
        });
    }
    let manifest = Manifest {
        entry: program.entry,
        segments,
        symbols: program.symbols.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| ImageError::Manifest(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Program, ImageError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ImageError::Manifest(e.to_string()))?;
    let dir: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut segments = Vec::new();
    for seg in &manifest.segments {
        let bytes = std::fs::read(dir.join(&seg.file))?;
        if bytes.len() != seg.len as usize {
            return Err(ImageError::LengthMismatch {
                file: seg.file.clone(),
                expected: seg.len,
                actual: bytes.len(),
            });
        }
        if sha256_hex(&bytes) != seg.sha256.to_ascii_lowercase() {
            return Err(ImageError::ChecksumMismatch(seg.file.clone()));
        }
        segments.push(Segment { base: seg.base, bytes });
    }
    let program = Program {
        segments,
        entry: manifest.entry,
        symbols: manifest.symbols,
    };
    program.validate()?;
    Ok(program)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(p: &Program) -> Vec<u32> {
        p.segments[0]
            .bytes
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    #[test]
    fn basic_examples() {
        assert_eq!(words(&assemble("nop").unwrap()), [0x13]);
        assert_eq!(words(&assemble("lw x5, 0(x6)").unwrap()), [0x0003_2283]);
        assert_eq!(words(&assemble("loop: beq x1, x2, loop").unwrap()), [0x0020_8063]);
    }

    #[test]
    fn li_always_two_instructions() {
        let p = assemble("li x1, 1\nli x2, 0x12345fff\nli x3, -1").unwrap();
        let w = words(&p);
        assert_eq!(w.len(), 6);
        let r = crate::machine::run_golden(&p, 10);
        assert_eq!(r.state.regs[1..4], [1, 0x1234_5fff, 0xffff_ffff]);
    }

    #[test]
    fn pseudo_instructions() {
        let p = assemble("mv a0, a1\nj end\nret\nend: jr t0\nnot a0, a0\nneg a1, a2\nbnez a0, end\nbeqz a0, end").unwrap();
        let text: Vec<String> = words(&p).into_iter().map(crate::isa::disassemble).collect();
        assert_eq!(
            text,
            [
                "addi x10, x11, 0",
                "jal x0, 8",
                "jalr x0, 0(x1)",
                "jalr x0, 0(x5)",
                "xori x10, x10, -1",
                "sub x11, x0, x12",
                "bne x10, x0, -12",
                "beq x10, x0, -16"
            ]
        );
    }

    #[test]
    fn directives_and_segments() {
        let src = ".equ BASE, 0x100\n_start: nop\n.org BASE\ndata: .word 1, data+4\n.byte 1, 255\n.align 2\n.ascii \"hi#\\n\"";
        let p = assemble(src).unwrap();
        assert_eq!(p.segments.len(), 2);
        assert_eq!(p.entry, 0);
        assert_eq!(p.symbol("data"), Some(0x100));
        assert_eq!(p.word_at(0x104), Some(0x104));
        assert_eq!(&p.segments[1].bytes[8..], &[1, 255, 0, 0, b'h', b'i', b'#', b'\n']);
    }

    #[test]
    fn diagnostics_carry_spans() {
        let e = assemble("nop\n  frob x1, x2").unwrap_err();
        assert_eq!(e.kind, AsmErrorKind::UnknownMnemonic("frob".into()));
        assert_eq!((e.span.line, e.span.column, e.span.length), (2, 3, 4));

        let e = assemble("a: nop\na: nop").unwrap_err();
        assert_eq!(e.kind, AsmErrorKind::DuplicateLabel("a".into()));
        assert_eq!(e.span.line, 2);

        let e = assemble("beq x1, x2, nowhere").unwrap_err();
        assert_eq!(e.kind, AsmErrorKind::UnresolvedLabel("nowhere".into()));
        assert_eq!(e.span.column, 13);

        let e = assemble("addi x1, x1, 4096").unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::ImmediateOutOfRange { value: 4096 }));

        let e = assemble("beq x1, x2, odd\n.byte 0\nodd: nop").unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::MisalignedBranchTarget(5)));

        let e = assemble("nop\n.org 0\nnop").unwrap_err();
        assert_eq!(e.kind, AsmErrorKind::Overlap);

        let e = assemble("add x1, x2, x99").unwrap_err();
        assert_eq!(e.kind, AsmErrorKind::BadRegister("x99".into()));
    }

    #[test]
    fn abi_register_names() {
        assert_eq!(parse_register("zero"), Some(0));
        assert_eq!(parse_register("a7"), Some(17));
        assert_eq!(parse_register("s11"), Some(27));
        assert_eq!(parse_register("t6"), Some(31));
        assert_eq!(parse_register("s12"), None);
        assert_eq!(parse_register("x32"), None);
    }

    #[test]
    fn image_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = Program::default();
        let path = dir.path().join("empty.img");
        store_image(&empty, &path).unwrap();
        let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(manifest["segments"].as_array().unwrap().len(), 0);
        assert_eq!(load_image(&path).unwrap(), empty);

        let p = assemble("nop").unwrap();
        let path = dir.path().join("one.img");
        store_image(&p, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), p);
        assert_eq!(std::fs::read(dir.path().join("one.seg0.bin")).unwrap(), [0x13, 0, 0, 0]);

        std::fs::write(dir.path().join("one.seg0.bin"), [0x14, 0, 0, 0]).unwrap();
        assert!(matches!(load_image(&path), Err(ImageError::ChecksumMismatch(_))));

        let two = assemble("nop\nnop\n.org 0x10\nnop").unwrap();
        let path = dir.path().join("two.img");
        store_image(&two, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("\"base\": 16", "\"base\": 4");
        std::fs::write(&path, text).unwrap();
        let err = load_image(&path).unwrap_err();
        assert_eq!(err.to_string(), "segments overlap");
    }
}
