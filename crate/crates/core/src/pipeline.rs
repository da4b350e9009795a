//! Cycle-accurate four-stage in-order pipeline (IF, ID, EX, WB).
//!
//! Stages are evaluated back to front each cycle (WB, EX, ID, IF) and the
//! three latches are captured together at the end of the cycle. That order
//! gives write-before-read on the register file and lets ID pick up the EX
//! result of the same cycle, which is how EX-to-EX forwarding is modelled.
//! Loads read memory in EX but their value reaches the register file in WB,
//! so a dependent instruction right behind a load stalls one cycle.
//!
//! Alongside every latch travels a sideband [`Slot`] that records the
//! identity of the dynamic instruction (fetch PC, fetched word, sequence
//! number). Sidebands are bookkeeping only: glitches never touch them, and
//! the datapath never reads them, except for committing the architectural
//! PC.

use std::collections::BTreeMap;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::assembler::Program;
use crate::glitch::{apply_illegal_policy, capture, plan_effect, Executed, GlitchSpec, IllegalPolicy};
use crate::isa::{decode, Decoded, IClass, Instruction, Mnemonic};
use crate::latch::{ctrl, ExWb, IdEx, IfId, LatchFields, LatchId, Stage};
use crate::machine::{ArchState, Halt, HaltCause, MemWrite, RegWrite, Warning, HALT_PORT, OUTPUT_PORT};
use crate::timing::{TimingError, TimingModel};

/// Cycles a divide or remainder occupies EX.
pub const DIV_CYCLES: u32 = 32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineConfig {
    /// Trap on loads from unmapped memory instead of returning zero.
    pub strict_loads: bool,
}

/// Something the decoder did to an instruction, reported if it retires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DecodeNote {
    ReplacedNop { cycle: u64, word: u32 },
    Mutated { cycle: u64, executed: u32 },
}

/// Identity of the dynamic instruction held in a latch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Slot {
    pub seq: u64,
    pub pc: u32,
    pub word: u32,
    pub next_pc: u32,
    pub fetch_fault: bool,
    pub ghost: bool,
    note: Option<DecodeNote>,
}

/// An instruction as seen in the occupancy map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DynInstr {
    pub seq: u64,
    #[serde(serialize_with = "hex32")]
    pub pc: u32,
    #[serde(serialize_with = "hex32")]
    pub word: u32,
    pub iclass: IClass,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub ghost: bool,
}

pub(crate) fn hex32<S: Serializer>(v: &u32, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("0x{v:08x}"))
}

/// Which dynamic instruction sits in each stage; `None` is a bubble.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Occupancy(pub [Option<DynInstr>; 4]);

impl Occupancy {
    pub fn get(&self, stage: Stage) -> Option<&DynInstr> {
        self.0[stage as usize].as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(Option::is_none)
    }
}

impl Serialize for Occupancy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, Option<&DynInstr>> =
            Stage::ALL.iter().map(|st| (st.name(), self.get(*st))).collect();
        map.serialize(s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Latches {
    pub if_id: IfId,
    pub id_ex: IdEx,
    pub ex_wb: ExWb,
}

impl Latches {
    pub fn values(&self, latch: LatchId) -> [u32; crate::latch::MAX_FIELDS] {
        match latch {
            LatchId::IfId => self.if_id.values(),
            LatchId::IdEx => self.id_ex.values(),
            LatchId::ExWb => self.ex_wb.values(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Retirement {
    pub seq: u64,
    #[serde(serialize_with = "hex32")]
    pub pc: u32,
}

/// One corrupted field of a glitched capture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldCorruption {
    pub field: String,
    pub late_bits: Vec<u8>,
    /// Value the field would have captured without the glitch.
    pub clean: u32,
    /// Value it actually captured.
    pub captured: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultEvent {
    CaptureViolation {
        cycle: u64,
        latch: LatchId,
        fields: Vec<FieldCorruption>,
    },
    /// A corrupted word decoded as illegal and a NOP retired in its place.
    InstructionReplacedNop {
        cycle: u64,
        seq: u64,
        #[serde(serialize_with = "hex32")]
        pc: u32,
        #[serde(serialize_with = "hex32")]
        fetched: u32,
        #[serde(serialize_with = "hex32")]
        decoded: u32,
    },
    /// A corrupted word decoded as a different valid instruction, which retired.
    MutatedInstruction {
        cycle: u64,
        seq: u64,
        #[serde(serialize_with = "hex32")]
        pc: u32,
        #[serde(serialize_with = "hex32")]
        fetched: u32,
        #[serde(serialize_with = "hex32")]
        executed: u32,
    },
    /// A bubble captured a stale valid bit and the stale content retired.
    GhostInstruction {
        cycle: u64,
        seq: u64,
        #[serde(serialize_with = "hex32")]
        pc: u32,
    },
    /// A valid instruction lost its valid bit at capture.
    InstructionDropped {
        cycle: u64,
        latch: LatchId,
        seq: u64,
        #[serde(serialize_with = "hex32")]
        pc: u32,
    },
}

impl FaultEvent {
    pub fn cycle(&self) -> u64 {
        match self {
            FaultEvent::CaptureViolation { cycle, .. }
            | FaultEvent::InstructionReplacedNop { cycle, .. }
            | FaultEvent::MutatedInstruction { cycle, .. }
            | FaultEvent::GhostInstruction { cycle, .. }
            | FaultEvent::InstructionDropped { cycle, .. } => *cycle,
        }
    }
}

/// Everything observable about one clock cycle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CycleReport {
    pub cycle: u64,
    pub occupancy: Occupancy,
    /// Occupant class driving each latch's capture, `None` when the latch
    /// holds or its feeding stage is empty.
    pub sites: [Option<IClass>; 3],
    /// Latch contents after this cycle's capture.
    pub latches: Latches,
    pub retired: Vec<Retirement>,
    pub reg_writes: Vec<RegWrite>,
    pub mem_writes: Vec<MemWrite>,
    pub outputs: Vec<u32>,
    pub events: Vec<FaultEvent>,
    pub warnings: Vec<Warning>,
    pub halt: Option<Halt>,
}

/// One line of the JSON-lines cycle trace.
#[derive(Serialize)]
pub struct TraceLine<'a> {
    pub cycle: u64,
    pub stages: &'a Occupancy,
    pub retired: &'a [Retirement],
    pub corruptions: Vec<&'a FaultEvent>,
}

impl CycleReport {
    pub fn trace_line(&self) -> TraceLine<'_> {
        TraceLine {
            cycle: self.cycle,
            stages: &self.occupancy,
            retired: &self.retired,
            corruptions: self.events.iter().collect(),
        }
    }
}

/// Result of the execute stage for one cycle.
#[derive(Default)]
struct ExOut {
    latch: ExWb,
    slot: Slot,
    /// A divide is still iterating; everything upstream holds.
    busy: bool,
    redirect: Option<u32>,
    forward: Option<(u8, u32)>,
    site: Option<IClass>,
}

/// Pipeline plus architectural state.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub arch: ArchState,
    if_id: IfId,
    id_ex: IdEx,
    ex_wb: ExWb,
    side: [Slot; 3],
    fetch_pc: u32,
    div_count: u32,
    cycle: u64,
    next_seq: u64,
    retired: u64,
    illegal_policy: IllegalPolicy,
    config: PipelineConfig,
    last_occupancy: Occupancy,
}

fn class_of_word(word: u32) -> IClass {
    match decode(word) {
        Decoded::Valid(i) => i.mnemonic.iclass(),
        Decoded::Illegal(_) => IClass::System,
    }
}

fn class_of_ctrl(c: u16) -> IClass {
    Mnemonic::from_index((c & ctrl::OP_MASK) as usize)
        .map(Mnemonic::iclass)
        .unwrap_or(IClass::System)
}

/// Control word for a decoded instruction.
pub fn control_word(i: &Instruction) -> u16 {
    use Mnemonic::*;
    let m = i.mnemonic;
    let mut c = m.index() as u16;
    if m.writes_rd() {
        c |= ctrl::REG_WRITE;
    }
    match m.iclass() {
        IClass::Load => c |= ctrl::MEM_READ,
        IClass::Store => c |= ctrl::MEM_WRITE,
        IClass::Branch => c |= ctrl::BRANCH,
        IClass::Jump => c |= ctrl::JUMP,
        _ => {}
    }
    if matches!(m, Ecall | Ebreak) {
        c |= ctrl::HALT;
    }
    if matches!(
        m,
        Addi | Slti | Sltiu | Xori | Ori | Andi | Slli | Srli | Srai | Lui | Auipc
    ) {
        c |= ctrl::USES_IMM;
    }
    c
}

fn alu(op: Option<Mnemonic>, a: u32, b: u32, pc: u32) -> u32 {
    use Mnemonic::*;
    let Some(op) = op else { return 0 };
    match op {
        Lui => b,
        Auipc => pc.wrapping_add(b),
        Jal | Jalr => pc.wrapping_add(4),
        Add | Addi => a.wrapping_add(b),
        Sub => a.wrapping_sub(b),
        Slt | Slti => ((a as i32) < (b as i32)) as u32,
        Sltu | Sltiu => (a < b) as u32,
        Xor | Xori => a ^ b,
        Or | Ori => a | b,
        And | Andi => a & b,
        Sll | Slli => a.wrapping_shl(b & 31),
        Srl | Srli => a.wrapping_shr(b & 31),
        Sra | Srai => ((a as i32).wrapping_shr(b & 31)) as u32,
        Mul => a.wrapping_mul(b),
        Mulh => ((a as i32 as i64).wrapping_mul(b as i32 as i64) >> 32) as u32,
        Mulhsu => ((a as i32 as i64).wrapping_mul(b as i64) >> 32) as u32,
        Mulhu => ((a as u64 * b as u64) >> 32) as u32,
        Div => match (a as i32, b as i32) {
            (_, 0) => u32::MAX,
            (x, y) => x.wrapping_div(y) as u32,
        },
        Divu => a.checked_div(b).unwrap_or(u32::MAX),
        Rem => match (a as i32, b as i32) {
            (x, 0) => x as u32,
            (x, y) => x.wrapping_rem(y) as u32,
        },
        Remu => if b == 0 { a } else { a % b },
        _ => 0,
    }
}

fn branch_taken(op: Option<Mnemonic>, a: u32, b: u32) -> bool {
    use Mnemonic::*;
    match op {
        Some(Beq) => a == b,
        Some(Bne) => a != b,
        Some(Blt) => (a as i32) < (b as i32),
        Some(Bge) => (a as i32) >= (b as i32),
        Some(Bltu) => a < b,
        Some(Bgeu) => a >= b,
        _ => false,
    }
}

fn access_width(op: Option<Mnemonic>) -> u32 {
    use Mnemonic::*;
    match op {
        Some(Lb | Lbu | Sb) => 1,
        Some(Lh | Lhu | Sh) => 2,
        _ => 4,
    }
}

impl Pipeline {
    pub fn new(program: &Program, config: PipelineConfig) -> Self {
        let arch = ArchState::new(program);
        Pipeline {
            fetch_pc: arch.pc,
            arch,
            if_id: IfId::default(),
            id_ex: IdEx::default(),
            ex_wb: ExWb::default(),
            side: [Slot::default(); 3],
            div_count: 0,
            cycle: 0,
            next_seq: 0,
            retired: 0,
            illegal_policy: IllegalPolicy::Trap,
            config,
            last_occupancy: Occupancy::default(),
        }
    }

    /// Index of the next cycle to execute.
    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn retired(&self) -> u64 {
        self.retired
    }

    pub fn halted(&self) -> bool {
        self.arch.halted()
    }

    pub fn latches(&self) -> Latches {
        Latches {
            if_id: self.if_id,
            id_ex: self.id_ex,
            ex_wb: self.ex_wb,
        }
    }

    /// Occupants during the most recently executed cycle (all bubbles at reset).
    pub fn occupancy(&self) -> Occupancy {
        self.last_occupancy
    }

    /// Same future behaviour: everything except bookkeeping that cannot
    /// influence later cycles.
    pub fn same_state(&self, other: &Pipeline) -> bool {
        self.cycle == other.cycle
            && self.fetch_pc == other.fetch_pc
            && self.div_count == other.div_count
            && self.retired == other.retired
            && self.if_id == other.if_id
            && self.id_ex == other.id_ex
            && self.ex_wb == other.ex_wb
            && self.side == other.side
            && self.arch == other.arch
    }

    fn retire(&mut self, slot: Slot, cycle: u64, rep: &mut CycleReport) {
        self.retired += 1;
        rep.retired.push(Retirement {
            seq: slot.seq,
            pc: slot.pc,
        });
        if slot.ghost {
            rep.events.push(FaultEvent::GhostInstruction {
                cycle,
                seq: slot.seq,
                pc: slot.pc,
            });
        }
        match slot.note {
            Some(DecodeNote::ReplacedNop { cycle, word }) => rep.events.push(FaultEvent::InstructionReplacedNop {
                cycle,
                seq: slot.seq,
                pc: slot.pc,
                fetched: slot.word,
                decoded: word,
            }),
            Some(DecodeNote::Mutated { cycle, executed }) => rep.events.push(FaultEvent::MutatedInstruction {
                cycle,
                seq: slot.seq,
                pc: slot.pc,
                fetched: slot.word,
                executed,
            }),
            None => {}
        }
    }

    fn halt_in_ex(&mut self, halt: Halt, slot: Slot, pc: u32, rep: &mut CycleReport) {
        self.arch.halt = Some(halt);
        rep.halt = Some(halt);
        let cycle = self.cycle;
        self.retire(slot, cycle, rep);
        self.arch.pc = if halt.cause.is_trap() { pc } else { slot.next_pc };
    }

    fn execute(&mut self, rep: &mut CycleReport) -> ExOut {
        let l = self.id_ex;
        if !l.valid {
            return ExOut::default();
        }
        let c = l.ctrl;
        let op = Mnemonic::from_index((c & ctrl::OP_MASK) as usize);
        let mut slot = self.side[LatchId::IdEx.index()];
        let pc = l.pc;
        slot.next_pc = pc.wrapping_add(4);
        let site = Some(class_of_ctrl(c));

        if c & ctrl::TRAP_FETCH != 0 {
            self.halt_in_ex(Halt::trap(HaltCause::FetchFault), slot, pc, rep);
            return ExOut::default();
        }
        if c & ctrl::TRAP_ILLEGAL != 0 {
            self.halt_in_ex(Halt::trap(HaltCause::Illegal), slot, pc, rep);
            return ExOut::default();
        }
        if op.is_some_and(Mnemonic::is_long_latency) {
            if self.div_count + 1 < DIV_CYCLES {
                self.div_count += 1;
                return ExOut {
                    busy: true,
                    ..ExOut::default()
                };
            }
            self.div_count = 0;
        }

        let a = l.rs1_val;
        let b = if c & ctrl::USES_IMM != 0 { l.imm } else { l.rs2_val };
        let result = alu(op, a, b, pc);
        let mut out = ExWb {
            result,
            rd: if c & ctrl::REG_WRITE != 0 { l.rd } else { 0 },
            is_load: c & ctrl::MEM_READ != 0,
            mem_data: 0,
            valid: true,
        };

        let mut target = None;
        if c & ctrl::BRANCH != 0 && branch_taken(op, l.rs1_val, l.rs2_val) {
            target = Some(pc.wrapping_add(l.imm));
        }
        if c & ctrl::JUMP != 0 {
            target = Some(if op == Some(Mnemonic::Jalr) {
                l.rs1_val.wrapping_add(l.imm) & !1
            } else {
                pc.wrapping_add(l.imm)
            });
        }
        if let Some(t) = target {
            if t % 4 != 0 {
                self.halt_in_ex(Halt::trap(HaltCause::Misaligned), slot, pc, rep);
                return ExOut::default();
            }
            slot.next_pc = t;
        }

        let width = access_width(op);
        let addr = l.rs1_val.wrapping_add(l.imm);
        if c & (ctrl::MEM_READ | ctrl::MEM_WRITE) != 0 && !addr.is_multiple_of(width) {
            self.halt_in_ex(Halt::trap(HaltCause::Misaligned), slot, pc, rep);
            return ExOut::default();
        }
        if c & ctrl::MEM_READ != 0 {
            let raw = match self.arch.mem.read(addr, width) {
                Some(v) => v,
                None if self.config.strict_loads => {
                    self.halt_in_ex(Halt::trap(HaltCause::LoadFault), slot, pc, rep);
                    return ExOut::default();
                }
                None => {
                    rep.warnings.push(Warning::UnmappedLoad { addr });
                    0
                }
            };
            out.mem_data = match op {
                Some(Mnemonic::Lb) => raw as u8 as i8 as i32 as u32,
                Some(Mnemonic::Lh) => raw as u16 as i16 as i32 as u32,
                _ => raw,
            };
        }
        if c & ctrl::MEM_WRITE != 0 {
            let value = l.rs2_val;
            if width == 4 && addr == OUTPUT_PORT {
                self.arch.output_log.push(value);
                rep.outputs.push(value);
            } else if width == 4 && addr == HALT_PORT {
                self.halt_in_ex(Halt::exit(HaltCause::HaltPort, value), slot, pc, rep);
                return ExOut::default();
            } else {
                let old = self.arch.mem.peek(addr, width);
                let new = if width == 4 { value } else { value & ((1 << (8 * width)) - 1) };
                self.arch.mem.write(addr, width, new);
                rep.mem_writes.push(MemWrite { addr, old, new, width });
            }
        }
        if c & ctrl::HALT != 0 {
            let cause = if op == Some(Mnemonic::Ecall) {
                HaltCause::Ecall
            } else {
                HaltCause::Ebreak
            };
            self.halt_in_ex(Halt::exit(cause, 0), slot, pc, rep);
            return ExOut::default();
        }

        let forward = (out.rd != 0 && !out.is_load).then_some((out.rd, out.result));
        ExOut {
            latch: out,
            slot,
            busy: false,
            redirect: target,
            forward,
            site,
        }
    }

    /// Advance one cycle. With `glitch` set, the capture at the end of this
    /// cycle happens at the glitch offset instead of the nominal edge, and
    /// the decoder switches to the glitch's illegal-instruction policy.
    pub fn clock(&mut self, glitch: Option<(&GlitchSpec, &TimingModel)>) -> Result<CycleReport, TimingError> {
        assert!(!self.halted(), "clock on a halted pipeline");
        let cycle = self.cycle;
        let mut rep = CycleReport {
            cycle,
            ..CycleReport::default()
        };
        if let Some((spec, timing)) = glitch {
            spec.validate(timing)?;
            self.illegal_policy = spec.illegal_policy;
        }
        let mut occ = Occupancy::default();

        // WB
        if self.ex_wb.valid {
            let l = self.ex_wb;
            let slot = self.side[LatchId::ExWb.index()];
            occ.0[Stage::Wb as usize] = Some(DynInstr {
                seq: slot.seq,
                pc: slot.pc,
                word: slot.word,
                iclass: if slot.fetch_fault { IClass::System } else { class_of_word(slot.word) },
                ghost: slot.ghost,
            });
            if l.rd != 0 {
                let new = if l.is_load { l.mem_data } else { l.result };
                rep.reg_writes.push(RegWrite {
                    index: l.rd,
                    old: self.arch.regs[l.rd as usize],
                    new,
                });
                self.arch.set_reg(l.rd, new);
            }
            self.retire(slot, cycle, &mut rep);
            self.arch.pc = slot.next_pc;
        }

        // EX
        if self.id_ex.valid {
            let slot = self.side[LatchId::IdEx.index()];
            occ.0[Stage::Ex as usize] = Some(DynInstr {
                seq: slot.seq,
                pc: slot.pc,
                word: slot.word,
                iclass: class_of_ctrl(self.id_ex.ctrl),
                ghost: slot.ghost,
            });
        }
        let ex = self.execute(&mut rep);
        if let Some(h) = rep.halt {
            debug_assert!(self.arch.halt == Some(h));
            self.cycle += 1;
            self.last_occupancy = occ;
            rep.occupancy = occ;
            rep.latches = self.latches();
            return Ok(rep);
        }

        // ID
        let load_rd = (self.id_ex.valid
            && self.id_ex.ctrl & ctrl::MEM_READ != 0
            && self.id_ex.ctrl & ctrl::REG_WRITE != 0
            && self.id_ex.rd != 0)
            .then_some(self.id_ex.rd);
        let mut next_id_ex = self.id_ex;
        let mut next_id_slot = self.side[LatchId::IdEx.index()];
        let mut id_site = None;
        let mut stall = ex.busy;
        if !ex.busy {
            next_id_ex = IdEx::default();
            next_id_slot = Slot::default();
        }
        if self.if_id.valid {
            let mut slot = self.side[LatchId::IfId.index()];
            let word = self.if_id.instr_word;
            let (c, instr, class) = if slot.fetch_fault {
                (ctrl::OP_NONE | ctrl::TRAP_FETCH, None, IClass::System)
            } else {
                match apply_illegal_policy(decode(word), self.illegal_policy) {
                    Executed::Instruction(i) => {
                        if i.raw != slot.word {
                            slot.note = Some(DecodeNote::Mutated { cycle, executed: i.raw });
                        }
                        (control_word(&i), Some(i), i.mnemonic.iclass())
                    }
                    Executed::ReplacedNop { word } => {
                        slot.note = Some(DecodeNote::ReplacedNop { cycle, word });
                        let n = crate::isa::nop();
                        (control_word(&n), Some(n), IClass::System)
                    }
                    Executed::Trap { .. } => (ctrl::OP_NONE | ctrl::TRAP_ILLEGAL, None, IClass::System),
                }
            };
            occ.0[Stage::Id as usize] = Some(DynInstr {
                seq: slot.seq,
                pc: slot.pc,
                word: slot.word,
                iclass: class,
                ghost: slot.ghost,
            });
            if !ex.busy {
                id_site = Some(class);
                let hazard = match (instr, load_rd) {
                    (Some(i), Some(r)) => {
                        (i.mnemonic.reads_rs1() && i.rs1 == r) || (i.mnemonic.reads_rs2() && i.rs2 == r)
                    }
                    _ => false,
                };
                if hazard && ex.redirect.is_none() {
                    stall = true;
                } else {
                    let read = |r: u8| match ex.forward {
                        Some((fr, v)) if fr == r => v,
                        _ => self.arch.regs[r as usize],
                    };
                    let i = instr.unwrap_or(Instruction {
                        raw: word,
                        ..crate::isa::nop()
                    });
                    next_id_ex = IdEx {
                        ctrl: c,
                        rs1_val: read(i.rs1),
                        rs2_val: read(i.rs2),
                        imm: i.imm as u32,
                        rd: i.rd,
                        pc: self.if_id.pc,
                        valid: true,
                    };
                    next_id_slot = slot;
                }
            }
        }

        // IF
        let fetched = self.arch.mem.read(self.fetch_pc, 4);
        occ.0[Stage::If as usize] = Some(DynInstr {
            seq: self.next_seq,
            pc: self.fetch_pc,
            word: fetched.unwrap_or(0),
            iclass: fetched.map(class_of_word).unwrap_or(IClass::System),
            ghost: false,
        });
        let mut next_if_id = self.if_id;
        let mut next_if_slot = self.side[LatchId::IfId.index()];
        let mut if_site = None;
        if !stall {
            if_site = Some(fetched.map(class_of_word).unwrap_or(IClass::System));
            next_if_id = IfId {
                instr_word: fetched.unwrap_or(0),
                pc: self.fetch_pc,
                valid: true,
            };
            next_if_slot = Slot {
                seq: self.next_seq,
                pc: self.fetch_pc,
                word: fetched.unwrap_or(0),
                fetch_fault: fetched.is_none(),
                ..Slot::default()
            };
            self.next_seq += 1;
            self.fetch_pc = self.fetch_pc.wrapping_add(4);
        }

        if let Some(target) = ex.redirect {
            next_if_id = IfId::default();
            next_if_slot = Slot::default();
            next_id_ex = IdEx::default();
            next_id_slot = Slot::default();
            self.fetch_pc = target;
        }

        // Capture.
        let sites = [if_site, id_site, ex.site];
        rep.sites = sites;
        let effect = match glitch {
            Some((spec, timing)) => Some(plan_effect(spec, &sites, timing)?),
            None => None,
        };
        let (prev_if, prev_id, prev_ex) = (self.if_id, self.id_ex, self.ex_wb);
        let prev_side = self.side;
        let mut next_slots = [next_if_slot, next_id_slot, ex.slot];
        match effect {
            Some(e) => {
                self.if_id = capture(e.verdict(LatchId::IfId), e.policy, &prev_if, &next_if_id);
                self.id_ex = capture(e.verdict(LatchId::IdEx), e.policy, &prev_id, &next_id_ex);
                self.ex_wb = capture(e.verdict(LatchId::ExWb), e.policy, &prev_ex, &ex.latch);
                for latch in LatchId::ALL {
                    let masks = e.verdict(latch).late_masks();
                    if masks.iter().all(|&m| m == 0) {
                        continue;
                    }
                    let (clean, got) = match latch {
                        LatchId::IfId => (next_if_id.values(), self.if_id.values()),
                        LatchId::IdEx => (next_id_ex.values(), self.id_ex.values()),
                        LatchId::ExWb => (ex.latch.values(), self.ex_wb.values()),
                    };
                    let fields = latch
                        .fields()
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| masks[*i] != 0)
                        .map(|(i, f)| FieldCorruption {
                            field: f.name.to_string(),
                            late_bits: (0..f.width).filter(|b| masks[i] >> b & 1 != 0).map(|b| b as u8).collect(),
                            clean: clean[i],
                            captured: got[i],
                        })
                        .collect();
                    rep.events.push(FaultEvent::CaptureViolation { cycle, latch, fields });

                    let k = latch.index();
                    let clean_valid = clean[latch.valid_field()] != 0;
                    let got_valid = got[latch.valid_field()] != 0;
                    if got_valid && !clean_valid {
                        next_slots[k] = Slot {
                            ghost: true,
                            ..prev_side[k]
                        };
                    } else if !got_valid && clean_valid {
                        rep.events.push(FaultEvent::InstructionDropped {
                            cycle,
                            latch,
                            seq: next_slots[k].seq,
                            pc: next_slots[k].pc,
                        });
                        next_slots[k] = Slot::default();
                    }
                }
            }
            None => {
                self.if_id = next_if_id;
                self.id_ex = next_id_ex;
                self.ex_wb = ex.latch;
            }
        }
        self.side = next_slots;

        self.cycle += 1;
        self.last_occupancy = occ;
        rep.occupancy = occ;
        rep.latches = self.latches();
        Ok(rep)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub state: ArchState,
    pub cycles: u64,
    pub retired: u64,
    pub halted: bool,
    pub trace: Vec<CycleReport>,
}

impl PipelineRun {
    pub fn retirements(&self) -> impl Iterator<Item = &Retirement> {
        self.trace.iter().flat_map(|r| r.retired.iter())
    }

    pub fn events(&self) -> impl Iterator<Item = &FaultEvent> {
        self.trace.iter().flat_map(|r| r.events.iter())
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Warning> {
        self.trace.iter().flat_map(|r| r.warnings.iter())
    }

    /// The cycle trace as JSON lines.
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.trace {
            out.push_str(&serde_json::to_string(&r.trace_line()).expect("trace serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("NOT_HALTED: no halt within {cycles} cycles")]
    NotHalted { cycles: u64, run: Box<PipelineRun> },
    #[error("glitch cycles must be strictly increasing")]
    GlitchOrder,
    #[error(transparent)]
    Timing(#[from] TimingError),
}

pub fn run_pipeline(
    program: &Program,
    timing: &TimingModel,
    glitches: &[GlitchSpec],
    max_cycles: u64,
) -> Result<PipelineRun, PipelineError> {
    run_pipeline_with(program, timing, glitches, max_cycles, PipelineConfig::default())
}

pub fn run_pipeline_with(
    program: &Program,
    timing: &TimingModel,
    glitches: &[GlitchSpec],
    max_cycles: u64,
    config: PipelineConfig,
) -> Result<PipelineRun, PipelineError> {
    if glitches.windows(2).any(|w| w[0].cycle >= w[1].cycle) {
        return Err(PipelineError::GlitchOrder);
    }
    for g in glitches {
        g.validate(timing)?;
    }
    let mut p = Pipeline::new(program, config);
    let mut trace = Vec::new();
    let mut pending = glitches.iter().peekable();
    while !p.halted() && p.cycle() < max_cycles {
        let g = pending.next_if(|g| g.cycle == p.cycle());
        trace.push(p.clock(g.map(|g| (g, timing)))?);
    }
    let run = PipelineRun {
        halted: p.halted(),
        cycles: p.cycle(),
        retired: p.retired(),
        state: p.arch,
        trace,
    };
    if !run.halted {
        return Err(PipelineError::NotHalted {
            cycles: max_cycles,
            run: Box::new(run),
        });
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembler::assemble;
    use crate::machine::run_golden;

    fn run(src: &str) -> PipelineRun {
        let p = assemble(src).unwrap();
        run_pipeline(&p, &TimingModel::reference(), &[], 10_000).unwrap()
    }

    fn retire_cycles(r: &PipelineRun) -> Vec<u64> {
        r.trace
            .iter()
            .flat_map(|c| c.retired.iter().map(move |_| c.cycle))
            .collect()
    }

    #[test]
    fn addi_stream_retires_one_per_cycle_after_fill() {
        let r = run("addi x1, x1, 1\naddi x2, x2, 1\naddi x3, x3, 1\naddi x4, x4, 1\naddi x5, x5, 1\nebreak");
        // ebreak retires from EX in cycle 7, alongside the last addi in WB.
        assert_eq!(retire_cycles(&r), [3, 4, 5, 6, 7, 7]);
        let occ = &r.trace[3].occupancy;
        assert!(Stage::ALL.iter().all(|s| occ.get(*s).is_some()));
    }

    #[test]
    fn reset_occupancy_is_empty() {
        let p = Pipeline::new(&assemble("nop").unwrap(), PipelineConfig::default());
        assert!(p.occupancy().is_empty());
    }

    #[test]
    fn load_use_inserts_one_bubble() {
        let src = "li x6, 0x100\nlw x5, 0(x6)\nadd x7, x5, x5\nebreak\n.org 0x100\n.word 21";
        let r = run(src);
        assert_eq!(r.state.regs[7], 42);
        let with_dep = retire_cycles(&r);
        let r2 = run("li x6, 0x100\nlw x5, 0(x6)\nadd x7, x6, x6\nebreak\n.org 0x100\n.word 21");
        let without = retire_cycles(&r2);
        assert_eq!(with_dep[3], without[3] + 1);
        assert_eq!(with_dep[2], without[2]);
    }

    #[test]
    fn alu_forwarding_has_no_bubble() {
        let r = run("addi x1, x0, 5\nadd x2, x1, x1\nadd x3, x2, x1\nebreak");
        assert_eq!(r.state.regs[3], 15);
        // ebreak halts from EX in the cycle the last add retires.
        assert_eq!(retire_cycles(&r), [3, 4, 5, 5]);
    }

    #[test]
    fn taken_branch_flushes_two() {
        let r = run("beq x0, x0, t\naddi x1, x0, 1\naddi x2, x0, 1\nt: addi x3, x0, 1\nebreak");
        assert_eq!(r.state.regs[1..4], [0, 0, 1]);
        // Resolved in EX at cycle 2, the target is fetched at 3 and retires at 6.
        assert_eq!(retire_cycles(&r), [3, 6, 6]);
        let bubbles = r.trace[3].occupancy;
        assert!(bubbles.get(Stage::Id).is_none() && bubbles.get(Stage::Ex).is_none());
    }

    #[test]
    fn divide_occupies_ex_for_32_cycles() {
        let r = run("addi x1, x0, 100\naddi x2, x0, 7\ndiv x3, x1, x2\naddi x4, x3, 1\nebreak");
        assert_eq!(r.state.regs[4], 15);
        let ex_cycles: Vec<u64> = r
            .trace
            .iter()
            .filter(|c| c.occupancy.get(Stage::Ex).is_some_and(|d| d.iclass == IClass::Muldiv))
            .map(|c| c.cycle)
            .collect();
        assert_eq!(ex_cycles.len(), DIV_CYCLES as usize);
        assert!(ex_cycles.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn matches_golden_on_small_programs() {
        for src in [
            "li x1, 0x80000000\nli x2, 77\nsw x2, 0(x1)\nebreak",
            "li x1, 10\nli x2, 0\nloop: add x2, x2, x1\naddi x1, x1, -1\nbnez x1, loop\necall",
            "li x5, 0x200\nsb x5, 1(x5)\nlh x6, 0(x5)\nlbu x7, 1(x5)\njal ra, f\nebreak\nf: mulh x8, x5, x5\nrem x9, x5, x0\nret",
            ".word 0",
            "li x1, 0x4000\njalr x0, 0(x1)",
        ] {
            let p = assemble(src).unwrap();
            let g = run_golden(&p, 10_000);
            let r = run_pipeline(&p, &TimingModel::reference(), &[], 10_000).unwrap();
            assert_eq!(r.state, g.state, "{src}");
            let pcs: Vec<u32> = r.retirements().map(|x| x.pc).collect();
            let gpcs: Vec<u32> = g.events.iter().map(|e| e.pc).collect();
            assert_eq!(pcs, gpcs, "{src}");
        }
    }

    #[test]
    fn not_halted_is_an_error() {
        let p = assemble("l: j l").unwrap();
        let e = run_pipeline(&p, &TimingModel::reference(), &[], 50).unwrap_err();
        assert!(matches!(e, PipelineError::NotHalted { cycles: 50, .. }));
    }

    #[test]
    fn glitch_on_load_fetch_corrupts_if_id_instr_word() {
        let p = assemble("li x6, 0x100\nnop\nnop\nlw x5, 0(x6)\nebreak\n.org 0x100\n.word 9").unwrap();
        let t = TimingModel::reference();
        // lw (index 4) is fetched in cycle 4.
        let golden = run_pipeline(&p, &t, &[], 100).unwrap();
        assert_eq!(golden.trace[4].sites[0], Some(IClass::Load));
        let r = run_pipeline(&p, &t, &[GlitchSpec::new(4, 8.3)], 100).unwrap();
        let ev: Vec<_> = r.events().collect();
        assert!(matches!(
            ev[0],
            FaultEvent::CaptureViolation { cycle: 4, latch: LatchId::IfId, fields } if fields[0].field == "instr_word"
        ));
    }

    #[test]
    fn trace_lines_are_json() {
        let r = run("nop\nebreak");
        let line = r.trace_jsonl().lines().next().unwrap().to_string();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["cycle"], 0);
        assert!(v["stages"]["IF"].is_object());
        assert!(v["stages"]["WB"].is_null());
    }
}
