//! Architectural state and the golden single-step executor.
//!
//! The executor here is the fault-free reference every pipeline run is
//! checked against. It is written independently of the pipeline's execute
//! stage so the two can be diffed.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::assembler::Program;
use crate::glitch::IllegalPolicy;
use crate::isa::{decode, Decoded, Instruction, Mnemonic};

/// Word stores here append to the output log.
pub const OUTPUT_PORT: u32 = 0x8000_0000;
/// Word stores here halt the machine with the stored value as exit code.
pub const HALT_PORT: u32 = 0x8000_0004;

const PAGE_BITS: u32 = 12;
const PAGE_SIZE: usize = 1 << PAGE_BITS;

/// Sparse little-endian byte memory. A page is mapped once the program image
/// or a store touches it.
#[derive(Clone, Default)]
pub struct Memory {
    pages: BTreeMap<u32, Box<[u8; PAGE_SIZE]>>,
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_mapped(&self, addr: u32) -> bool {
        self.pages.contains_key(&(addr >> PAGE_BITS))
    }

    fn byte(&self, addr: u32) -> Option<u8> {
        self.pages
            .get(&(addr >> PAGE_BITS))
            .map(|p| p[(addr as usize) & (PAGE_SIZE - 1)])
    }

    fn byte_mut(&mut self, addr: u32) -> &mut u8 {
        let page = self
            .pages
            .entry(addr >> PAGE_BITS)
            .or_insert_with(|| Box::new([0; PAGE_SIZE]));
        &mut page[(addr as usize) & (PAGE_SIZE - 1)]
    }

    /// Little-endian read of `width` bytes; `None` if any byte is unmapped.
    pub fn read(&self, addr: u32, width: u32) -> Option<u32> {
        let mut v = 0u32;
        for i in 0..width {
            v |= (self.byte(addr.wrapping_add(i))? as u32) << (8 * i);
        }
        Some(v)
    }

    /// Read treating unmapped bytes as zero.
    pub fn peek(&self, addr: u32, width: u32) -> u32 {
        (0..width).fold(0, |v, i| {
            v | (self.byte(addr.wrapping_add(i)).unwrap_or(0) as u32) << (8 * i)
        })
    }

    pub fn write(&mut self, addr: u32, width: u32, value: u32) {
        for i in 0..width {
            *self.byte_mut(addr.wrapping_add(i)) = (value >> (8 * i)) as u8;
        }
    }

    pub fn write_bytes(&mut self, addr: u32, bytes: &[u8]) {
        for (i, b) in bytes.iter().enumerate() {
            *self.byte_mut(addr.wrapping_add(i as u32)) = *b;
        }
    }

    /// Mapped pages that hold at least one non-zero byte.
    fn nonzero_pages(&self) -> impl Iterator<Item = (&u32, &Box<[u8; PAGE_SIZE]>)> {
        self.pages.iter().filter(|(_, p)| p.iter().any(|&b| b != 0))
    }
}

/// Content equality: a mapped all-zero page equals an unmapped one.
impl PartialEq for Memory {
    fn eq(&self, other: &Self) -> bool {
        self.nonzero_pages().eq(other.nonzero_pages())
    }
}

impl Eq for Memory {}

impl fmt::Debug for Memory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Memory")
            .field("pages", &self.pages.keys().map(|p| p << PAGE_BITS).collect::<Vec<_>>())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HaltCause {
    Ebreak,
    Ecall,
    HaltPort,
    FetchFault,
    Illegal,
    Misaligned,
    LoadFault,
}

impl HaltCause {
    pub fn is_trap(self) -> bool {
        matches!(
            self,
            HaltCause::FetchFault | HaltCause::Illegal | HaltCause::Misaligned | HaltCause::LoadFault
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Halt {
    pub cause: HaltCause,
    pub code: u32,
}

impl Halt {
    pub fn exit(cause: HaltCause, code: u32) -> Self {
        Halt { cause, code }
    }

    pub fn trap(cause: HaltCause) -> Self {
        Halt { cause, code: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchState {
    pub pc: u32,
    pub regs: [u32; 32],
    pub mem: Memory,
    pub halt: Option<Halt>,
    pub output_log: Vec<u32>,
}

impl ArchState {
    pub fn new(program: &Program) -> Self {
        let mut mem = Memory::new();
        for seg in &program.segments {
            mem.write_bytes(seg.base, &seg.bytes);
        }
        ArchState {
            pc: program.entry,
            regs: [0; 32],
            mem,
            halt: None,
            output_log: Vec::new(),
        }
    }

    pub fn halted(&self) -> bool {
        self.halt.is_some()
    }

    pub fn set_reg(&mut self, index: u8, value: u32) {
        if index != 0 {
            self.regs[index as usize & 31] = value;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegWrite {
    pub index: u8,
    pub old: u32,
    pub new: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemWrite {
    pub addr: u32,
    pub old: u32,
    pub new: u32,
    pub width: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Warning {
    UnmappedLoad { addr: u32 },
}

/// Everything one retired instruction did.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvent {
    pub pc: u32,
    pub next_pc: u32,
    pub word: u32,
    pub mnemonic: Option<Mnemonic>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg_write: Option<RegWrite>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mem_write: Option<MemWrite>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub halt: Option<Halt>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<Warning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MachineConfig {
    /// Trap on loads from unmapped memory instead of returning zero.
    pub strict_loads: bool,
    pub illegal_policy: IllegalPolicy,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            strict_loads: false,
            illegal_policy: IllegalPolicy::Trap,
        }
    }
}

fn mulh(a: u32, b: u32) -> u32 {
    (((a as i32 as i128) * (b as i32 as i128)) >> 32) as u32
}

fn mulhsu(a: u32, b: u32) -> u32 {
    (((a as i32 as i128) * (b as i128)) >> 32) as u32
}

fn mulhu(a: u32, b: u32) -> u32 {
    (((a as u128) * (b as u128)) >> 32) as u32
}

fn div(a: u32, b: u32) -> u32 {
    let (a, b) = (a as i32, b as i32);
    if b == 0 {
        u32::MAX
    } else if a == i32::MIN && b == -1 {
        a as u32
    } else {
        (a / b) as u32
    }
}

fn rem(a: u32, b: u32) -> u32 {
    let (a, b) = (a as i32, b as i32);
    if b == 0 {
        a as u32
    } else if a == i32::MIN && b == -1 {
        0
    } else {
        (a % b) as u32
    }
}

/// Execute exactly one instruction at `state.pc`. Returns `None` once halted.
pub fn step(state: &mut ArchState, config: &MachineConfig) -> Option<StepEvent> {
    if state.halted() {
        return None;
    }
    let pc = state.pc;
    let mut ev = StepEvent {
        pc,
        next_pc: pc,
        word: 0,
        mnemonic: None,
        reg_write: None,
        mem_write: None,
        output: None,
        halt: None,
        warning: None,
    };
    let trap = |state: &mut ArchState, mut ev: StepEvent, cause| {
        let h = Halt::trap(cause);
        state.halt = Some(h);
        ev.halt = Some(h);
        Some(ev)
    };

    let Some(word) = state.mem.read(pc, 4) else {
        return trap(state, ev, HaltCause::FetchFault);
    };
    ev.word = word;
    let instr = match decode(word) {
        Decoded::Valid(i) => i,
        Decoded::Illegal(_) => match config.illegal_policy {
            IllegalPolicy::Trap => return trap(state, ev, HaltCause::Illegal),
            IllegalPolicy::NopReplace => crate::isa::nop(),
        },
    };
    ev.mnemonic = Some(instr.mnemonic);

    let Instruction { rd, rs1, rs2, imm, mnemonic, .. } = instr;
    let a = state.regs[rs1 as usize];
    let b = state.regs[rs2 as usize];
    let immu = imm as u32;
    let mut next = pc.wrapping_add(4);
    let mut rd_value: Option<u32> = None;

    use Mnemonic::*;
    match mnemonic {
        Lui => rd_value = Some(immu),
        Auipc => rd_value = Some(pc.wrapping_add(immu)),
        Jal | Jalr => {
            let target = if mnemonic == Jal {
                pc.wrapping_add(immu)
            } else {
                a.wrapping_add(immu) & !1
            };
            if target % 4 != 0 {
                return trap(state, ev, HaltCause::Misaligned);
            }
            rd_value = Some(pc.wrapping_add(4));
            next = target;
        }
        Beq | Bne | Blt | Bge | Bltu | Bgeu => {
            let taken = match mnemonic {
                Beq => a == b,
                Bne => a != b,
                Blt => (a as i32) < (b as i32),
                Bge => (a as i32) >= (b as i32),
                Bltu => a < b,
                _ => a >= b,
            };
            if taken {
                let target = pc.wrapping_add(immu);
                if !target.is_multiple_of(4) {
                    return trap(state, ev, HaltCause::Misaligned);
                }
                next = target;
            }
        }
        Lb | Lh | Lw | Lbu | Lhu => {
            let addr = a.wrapping_add(immu);
            let width = match mnemonic {
                Lb | Lbu => 1,
                Lh | Lhu => 2,
                _ => 4,
            };
            if !addr.is_multiple_of(width) {
                return trap(state, ev, HaltCause::Misaligned);
            }
            let raw = match state.mem.read(addr, width) {
                Some(v) => v,
                None if config.strict_loads => return trap(state, ev, HaltCause::LoadFault),
                None => {
                    ev.warning = Some(Warning::UnmappedLoad { addr });
                    0
                }
            };
            rd_value = Some(match mnemonic {
                Lb => raw as u8 as i8 as i32 as u32,
                Lh => raw as u16 as i16 as i32 as u32,
                _ => raw,
            });
        }
        Sb | Sh | Sw => {
            let addr = a.wrapping_add(immu);
            let width = match mnemonic {
                Sb => 1,
                Sh => 2,
                _ => 4,
            };
            if !addr.is_multiple_of(width) {
                return trap(state, ev, HaltCause::Misaligned);
            }
            if width == 4 && addr == OUTPUT_PORT {
                state.output_log.push(b);
                ev.output = Some(b);
            } else if width == 4 && addr == HALT_PORT {
                let h = Halt::exit(HaltCause::HaltPort, b);
                state.halt = Some(h);
                ev.halt = Some(h);
            } else {
                let old = state.mem.peek(addr, width);
                let new = if width == 4 { b } else { b & ((1 << (8 * width)) - 1) };
                state.mem.write(addr, width, new);
                ev.mem_write = Some(MemWrite { addr, old, new, width });
            }
        }
        Addi => rd_value = Some(a.wrapping_add(immu)),
        Slti => rd_value = Some(((a as i32) < imm) as u32),
        Sltiu => rd_value = Some((a < immu) as u32),
        Xori => rd_value = Some(a ^ immu),
        Ori => rd_value = Some(a | immu),
        Andi => rd_value = Some(a & immu),
        Slli => rd_value = Some(a << (immu & 31)),
        Srli => rd_value = Some(a >> (immu & 31)),
        Srai => rd_value = Some(((a as i32) >> (immu & 31)) as u32),
        Add => rd_value = Some(a.wrapping_add(b)),
        Sub => rd_value = Some(a.wrapping_sub(b)),
        Sll => rd_value = Some(a << (b & 31)),
        Slt => rd_value = Some(((a as i32) < (b as i32)) as u32),
        Sltu => rd_value = Some((a < b) as u32),
        Xor => rd_value = Some(a ^ b),
        Srl => rd_value = Some(a >> (b & 31)),
        Sra => rd_value = Some(((a as i32) >> (b & 31)) as u32),
        Or => rd_value = Some(a | b),
        And => rd_value = Some(a & b),
        Fence => {}
        Ecall | Ebreak => {
            let cause = if mnemonic == Ecall { HaltCause::Ecall } else { HaltCause::Ebreak };
            let h = Halt::exit(cause, 0);
            state.halt = Some(h);
            ev.halt = Some(h);
        }
        Mul => rd_value = Some(a.wrapping_mul(b)),
        Mulh => rd_value = Some(mulh(a, b)),
        Mulhsu => rd_value = Some(mulhsu(a, b)),
        Mulhu => rd_value = Some(mulhu(a, b)),
        Div => rd_value = Some(div(a, b)),
        Divu => rd_value = Some(a.checked_div(b).unwrap_or(u32::MAX)),
        Rem => rd_value = Some(rem(a, b)),
        Remu => rd_value = Some(if b == 0 { a } else { a % b }),
    }

    if let Some(v) = rd_value {
        if rd != 0 {
            ev.reg_write = Some(RegWrite {
                index: rd,
                old: state.regs[rd as usize],
                new: v,
            });
            state.regs[rd as usize] = v;
        }
    }
    state.pc = next;
    ev.next_pc = next;
    Some(ev)
}

#[derive(Debug, Clone)]
pub struct GoldenRun {
    pub state: ArchState,
    pub events: Vec<StepEvent>,
    /// False when the step budget ran out first (NOT_HALTED).
    pub halted: bool,
}

pub fn run_golden(program: &Program, max_steps: u64) -> GoldenRun {
    run_golden_with(program, max_steps, &MachineConfig::default())
}

pub fn run_golden_with(program: &Program, max_steps: u64, config: &MachineConfig) -> GoldenRun {
    let mut state = ArchState::new(program);
    let mut events = Vec::new();
    for _ in 0..max_steps {
        match step(&mut state, config) {
            Some(ev) => events.push(ev),
            None => break,
        }
        if state.halted() {
            break;
        }
    }
    let halted = state.halted();
    GoldenRun { state, events, halted }
}
