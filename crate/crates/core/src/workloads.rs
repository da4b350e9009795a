//! Shipped guest programs: a small binarized neural network and per-class
//! microbenchmarks, plus a random program generator used by tests.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::{assemble, Program};
use crate::isa::IClass;
use crate::machine::OUTPUT_PORT;

pub const BNN_SEED: u64 = 0xC0FFEE;
pub const BNN_INPUTS: usize = 32;
pub const HIDDEN: usize = 16;
pub const CLASSES: usize = 10;
/// Base address of the BNN data segment.
pub const BNN_DATA: u32 = 0x2000;

const OFF_INPUT: u32 = 0;
const OFF_W1: u32 = 8;
const OFF_THR1: u32 = OFF_W1 + 8 * HIDDEN as u32;
const OFF_W2: u32 = OFF_THR1 + 4 * HIDDEN as u32;
const OFF_THR2: u32 = OFF_W2 + 4 * CLASSES as u32;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("model shape mismatch: {0}")]
    Shape(String),
    #[error("no microbenchmark for class {0}")]
    Unsupported(IClass),
}

/// 64 -> 16 -> 10 binarized network. Weight bits are 1 for +1, 0 for -1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnnModel {
    pub seed: u64,
    pub w1: Vec<u64>,
    pub thr1: Vec<u32>,
    pub w2: Vec<u16>,
    pub thr2: Vec<u32>,
}

fn xnor_popcount(x: u64, w: u64, width: u32) -> u32 {
    let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
    (!(x ^ w) & mask).count_ones()
}

impl BnnModel {
    /// Draw weights and thresholds from `seed`, then nudge layer-1
    /// thresholds until at least 8 of `inputs` sit within one popcount
    /// unit of some threshold.
    pub fn generate(seed: u64, inputs: &[u64]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = (0..HIDDEN).map(|_| rng.random::<u64>()).collect();
        let thr1 = (0..HIDDEN).map(|_| rng.random_range(28..=36)).collect();
        let w2 = (0..CLASSES).map(|_| rng.random::<u16>()).collect();
        let thr2 = (0..CLASSES).map(|_| rng.random_range(0..=4)).collect();
        let mut model = BnnModel { seed, w1, thr1, w2, thr2 };
        for next_neuron in 0..inputs.len() * 4 {
            let near = inputs.iter().filter(|&&x| model.near_threshold(x)).count();
            if near >= 8 {
                break;
            }
            let Some(&x) = inputs.iter().find(|&&x| !model.near_threshold(x)) else { break };
            let n = next_neuron % HIDDEN;
            model.thr1[n] = xnor_popcount(x, model.w1[n], 64);
        }
        model
    }

    pub fn check_shape(&self) -> Result<(), WorkloadError> {
        let shape = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(WorkloadError::Shape(format!("{what} has {got} entries, expected {want}")))
            }
        };
        shape("w1", self.w1.len(), HIDDEN)?;
        shape("thr1", self.thr1.len(), HIDDEN)?;
        shape("w2", self.w2.len(), CLASSES)?;
        shape("thr2", self.thr2.len(), CLASSES)?;
        if self.thr1.iter().any(|&t| t > 64) || self.thr2.iter().any(|&t| t > 16) {
            return Err(WorkloadError::Shape("threshold outside popcount range".into()));
        }
        Ok(())
    }

    /// Whether some hidden neuron's popcount is within 1 of its threshold.
    pub fn near_threshold(&self, input: u64) -> bool {
        self.w1
            .iter()
            .zip(&self.thr1)
            .any(|(&w, &t)| xnor_popcount(input, w, 64).abs_diff(t) <= 1)
    }

    pub fn hidden(&self, input: u64) -> u16 {
        let mut h = 0u16;
        for (n, (&w, &t)) in self.w1.iter().zip(&self.thr1).enumerate() {
            if xnor_popcount(input, w, 64) >= t {
                h |= 1 << n;
            }
        }
        h
    }

    pub fn scores(&self, input: u64) -> Vec<i32> {
        let h = self.hidden(input) as u64;
        self.w2
            .iter()
            .zip(&self.thr2)
            .map(|(&w, &t)| xnor_popcount(h, w as u64, 16) as i32 - t as i32)
            .collect()
    }
}

/// Host-side forward pass: class with the highest score, lowest index on ties.
pub fn reference_bnn_forward(model: &BnnModel, input: u64) -> u32 {
    let scores = model.scores(input);
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = k;
        }
    }
    best as u32
}

/// The 32 fixture inputs, drawn from a stream separate from the weights.
pub fn bnn_inputs(seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1_0000_0000);
    (0..BNN_INPUTS).map(|_| rng.random::<u64>()).collect()
}

/// Guest assembly for `model` with `input` baked into the data segment.
pub fn generate_bnn_asm(model: &BnnModel, input: u64) -> Result<String, WorkloadError> {
    model.check_shape()?;
    let mut s = String::new();
    let w = &mut s;
    writeln!(w, "# Binarized neural network inference, 64 -> {HIDDEN} -> {CLASSES}.").unwrap();
    writeln!(w, "# Generated from seed 0x{:x}. Prints the predicted class and halts.", model.seed).unwrap();
    writeln!(w, "_start:").unwrap();
    writeln!(w, "    li s0, 0x{BNN_DATA:x}").unwrap();
    writeln!(w, "    lw s2, {}(s0)", OFF_INPUT).unwrap();
    writeln!(w, "    lw s3, {}(s0)", OFF_INPUT + 4).unwrap();
    writeln!(w, "    mv s5, zero").unwrap();
    for n in 0..HIDDEN as u32 {
        let row = OFF_W1 + 8 * n;
        writeln!(w, "l1_n{n}:").unwrap();
        writeln!(w, "    lw t0, {row}(s0)").unwrap();
        writeln!(w, "    xor t0, t0, s2").unwrap();
        writeln!(w, "    xori a0, t0, -1").unwrap();
        writeln!(w, "    jal ra, popcount").unwrap();
        writeln!(w, "    mv s4, a1").unwrap();
        writeln!(w, "    lw t0, {}(s0)", row + 4).unwrap();
        writeln!(w, "    xor t0, t0, s3").unwrap();
        writeln!(w, "    xori a0, t0, -1").unwrap();
        writeln!(w, "    jal ra, popcount").unwrap();
        writeln!(w, "l1_thr_{n}:").unwrap();
        writeln!(w, "    lw t1, {}(s0)", OFF_THR1 + 4 * n).unwrap();
        writeln!(w, "    add s4, s4, a1").unwrap();
        writeln!(w, "    blt s4, t1, l1_skip_{n}").unwrap();
        writeln!(w, "    li t2, 0x{:x}", 1u32 << n).unwrap();
        writeln!(w, "    or s5, s5, t2").unwrap();
        writeln!(w, "l1_skip_{n}:").unwrap();
    }
    writeln!(w, "    li s6, 0x80000000").unwrap();
    writeln!(w, "    mv s7, zero").unwrap();
    for k in 0..CLASSES as u32 {
        writeln!(w, "l2_c{k}:").unwrap();
        writeln!(w, "    lw t0, {}(s0)", OFF_W2 + 4 * k).unwrap();
        writeln!(w, "    xor t0, t0, s5").unwrap();
        writeln!(w, "    xori t0, t0, -1").unwrap();
        writeln!(w, "    slli t0, t0, 16").unwrap();
        writeln!(w, "    srli a0, t0, 16").unwrap();
        writeln!(w, "    jal ra, popcount").unwrap();
        writeln!(w, "l2_thr_{k}:").unwrap();
        writeln!(w, "    lw t1, {}(s0)", OFF_THR2 + 4 * k).unwrap();
        writeln!(w, "    sub a1, a1, t1").unwrap();
        writeln!(w, "    bge s6, a1, l2_skip_{k}").unwrap();
        writeln!(w, "    mv s6, a1").unwrap();
        writeln!(w, "    addi s7, zero, {k}").unwrap();
        writeln!(w, "l2_skip_{k}:").unwrap();
    }
    writeln!(w, "    li t0, 0x{OUTPUT_PORT:08x}").unwrap();
    writeln!(w, "    sw s7, 0(t0)").unwrap();
    writeln!(w, "    ebreak").unwrap();
    writeln!(w).unwrap();
    writeln!(w, "# a1 = popcount(a0); clobbers a0, t1, t2").unwrap();
    writeln!(w, "popcount:").unwrap();
    writeln!(w, "    mv a1, zero").unwrap();
    writeln!(w, "    addi t1, zero, 32").unwrap();
    writeln!(w, "popcount_loop:").unwrap();
    writeln!(w, "    andi t2, a0, 1").unwrap();
    writeln!(w, "    add a1, a1, t2").unwrap();
    writeln!(w, "    srli a0, a0, 1").unwrap();
    writeln!(w, "    addi t1, t1, -1").unwrap();
    writeln!(w, "    bnez t1, popcount_loop").unwrap();
    writeln!(w, "    ret").unwrap();
    writeln!(w).unwrap();
    writeln!(w, ".org 0x{BNN_DATA:x}").unwrap();
    writeln!(w, "input:").unwrap();
    writeln!(w, "    .word 0x{:08x}, 0x{:08x}", input as u32, (input >> 32) as u32).unwrap();
    writeln!(w, "w1:").unwrap();
    for &row in &model.w1 {
        writeln!(w, "    .word 0x{:08x}, 0x{:08x}", row as u32, (row >> 32) as u32).unwrap();
    }
    writeln!(w, "thr1:").unwrap();
    for &t in &model.thr1 {
        writeln!(w, "    .word {t}").unwrap();
    }
    writeln!(w, "w2:").unwrap();
    for &row in &model.w2 {
        writeln!(w, "    .word 0x{row:04x}").unwrap();
    }
    writeln!(w, "thr2:").unwrap();
    for &t in &model.thr2 {
        writeln!(w, "    .word {t}").unwrap();
    }
    Ok(s)
}

/// The BNN workload fixture: model, inputs and their host-computed labels.
#[derive(Debug, Clone)]
pub struct BnnWorkload {
    pub model: BnnModel,
    pub inputs: Vec<u64>,
    pub golden_labels: Vec<u32>,
    /// Program image with input #0 in place.
    pub program: Program,
}

impl BnnWorkload {
    pub fn generate(seed: u64) -> Self {
        let inputs = bnn_inputs(seed);
        let model = BnnModel::generate(seed, &inputs);
        let golden_labels = inputs.iter().map(|&x| reference_bnn_forward(&model, x)).collect();
        let src = generate_bnn_asm(&model, inputs[0]).expect("generated model has the right shape");
        let program = assemble(&src).expect("generated BNN assembles");
        BnnWorkload {
            model,
            inputs,
            golden_labels,
            program,
        }
    }

    pub fn reference() -> Self {
        Self::generate(BNN_SEED)
    }

    pub fn source(&self) -> String {
        generate_bnn_asm(&self.model, self.inputs[0]).expect("valid model")
    }

    /// The program with `input` patched into the data segment.
    pub fn program_for_input(&self, input: u64) -> Program {
        let mut p = self.program.clone();
        let at = p.symbol("input").expect("BNN image defines `input`");
        p.patch_word(at, input as u32);
        p.patch_word(at + 4, (input >> 32) as u32);
        p
    }

    pub fn program_for(&self, index: usize) -> Program {
        self.program_for_input(self.inputs[index])
    }

    /// Misclassification predicate: the first output differs from the label.
    pub fn misclassified(&self, index: usize, output_log: &[u32]) -> bool {
        output_log.first().is_some_and(|&c| c != self.golden_labels[index])
    }

    pub fn inputs_file(&self) -> InputsFile {
        InputsFile {
            seed: self.model.seed,
            inputs: self.inputs.iter().map(|x| format!("0x{x:016x}")).collect(),
            golden_labels: self.golden_labels.clone(),
        }
    }
}

/// On-disk `inputs.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputsFile {
    pub seed: u64,
    pub inputs: Vec<String>,
    pub golden_labels: Vec<u32>,
}

impl InputsFile {
    pub fn parsed_inputs(&self) -> Result<Vec<u64>, std::num::ParseIntError> {
        self.inputs
            .iter()
            .map(|s| u64::from_str_radix(s.trim_start_matches("0x"), 16))
            .collect()
    }
}

/// A microbenchmark and where its instance of the class sits.
#[derive(Debug, Clone)]
pub struct Microbench {
    pub iclass: IClass,
    pub source: String,
    /// Cycle at which the first instance is in IF; it is in ID one cycle
    /// later, EX two, WB three.
    pub if_cycle: u64,
    /// Address of the first instance (label `bench`).
    pub pc: u32,
}

impl Microbench {
    pub fn cycle_in(&self, stage: crate::latch::Stage) -> u64 {
        self.if_cycle + stage as u64
    }
}

/// Microbenchmark placing one instance of `iclass` at a fixed cycle.
pub fn microbench(iclass: IClass) -> Result<Microbench, WorkloadError> {
    let (body, checksum): (&str, &str) = match iclass {
        IClass::AluReg => ("add t0, s1, s2\nsub t1, s1, s2", "xor a0, t0, t1"),
        IClass::AluImm => ("addi t0, s1, 77\nxori t1, s2, -3", "xor a0, t0, t1"),
        IClass::Load => ("lw t0, 0(s0)\nlh t1, 4(s0)", "xor a0, t0, t1"),
        IClass::Store => ("sw s1, 8(s0)\nsb s2, 12(s0)", "lw t0, 8(s0)\nlw t1, 12(s0)\nxor a0, t0, t1"),
        IClass::Branch => (
            "bne s1, s1, bench_skip\nbeq s1, s1, bench_skip\naddi t0, zero, 99\nbench_skip:\naddi t1, zero, 5",
            "xor a0, t0, t1\nxor a0, a0, s1",
        ),
        IClass::Jump => ("jal t0, bench_after\naddi t1, zero, 99\nbench_after:\naddi t1, t1, 1", "xor a0, t0, t1"),
        IClass::Upper => ("lui t0, 0xabcde\nauipc t1, 0x10", "xor a0, t0, t1"),
        IClass::Muldiv => ("mul t0, s1, s2\ndiv t1, s1, s2", "xor a0, t0, t1"),
        IClass::System => ("fence\nfence iorw, iorw", "xor a0, s1, s2"),
    };
    let mut s = String::new();
    writeln!(s, "# Microbenchmark for {iclass}: the instance at `bench` is fetched in cycle 9,").unwrap();
    writeln!(s, "# decoded in 10, executed in 11 and written back in 12.").unwrap();
    writeln!(s, "_start:").unwrap();
    writeln!(s, "    li s0, 0x3000").unwrap();
    writeln!(s, "    li s1, 0x01234567").unwrap();
    writeln!(s, "    li s2, 13").unwrap();
    writeln!(s, "    nop\n    nop\n    nop").unwrap();
    writeln!(s, "bench:").unwrap();
    for line in body.lines() {
        if line.ends_with(':') {
            writeln!(s, "{line}").unwrap();
        } else {
            writeln!(s, "    {line}").unwrap();
        }
    }
    writeln!(s, "    nop\n    nop\n    nop").unwrap();
    for line in checksum.lines() {
        writeln!(s, "    {line}").unwrap();
    }
    writeln!(s, "    li t6, 0x{OUTPUT_PORT:08x}").unwrap();
    writeln!(s, "    sw a0, 0(t6)").unwrap();
    writeln!(s, "    ebreak").unwrap();
    writeln!(s, ".org 0x3000").unwrap();
    writeln!(s, "    .word 0x89abcdef, 0x00007f80, 0, 0").unwrap();
    Ok(Microbench {
        iclass,
        source: s,
        if_cycle: 9,
        pc: 36,
    })
}

/// Random legal program: forward-only control flow, ends with `ebreak`.
///
/// x31 holds the data base (0x3000), x30 is scratch for computed jumps and
/// x29 the output port; the body only writes x1..=x28.
pub fn random_program(seed: u64, len: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::new();
    writeln!(s, "_start:").unwrap();
    writeln!(s, "    li x31, 0x3000").unwrap();
    writeln!(s, "    li x29, 0x{OUTPUT_PORT:08x}").unwrap();
    for r in 1..=8 {
        writeln!(s, "    li x{r}, 0x{:x}", rng.random::<u32>()).unwrap();
    }
    let reg = |rng: &mut ChaCha8Rng| rng.random_range(1..=28);
    for i in 0..len {
        writeln!(s, "L{i}:").unwrap();
        let (rd, rs1, rs2) = (reg(&mut rng), reg(&mut rng), reg(&mut rng));
        let target = |rng: &mut ChaCha8Rng| format!("L{}", rng.random_range(i + 1..=(i + 5).min(len)));
        let line = match rng.random_range(0..100) {
            0..=24 => {
                let op = ["add", "sub", "sll", "slt", "sltu", "xor", "srl", "sra", "or", "and"][rng.random_range(0..10)];
                format!("{op} x{rd}, x{rs1}, x{rs2}")
            }
            25..=44 => {
                let op = ["addi", "slti", "sltiu", "xori", "ori", "andi"][rng.random_range(0..6)];
                format!("{op} x{rd}, x{rs1}, {}", rng.random_range(-2048..2048))
            }
            45..=49 => {
                let op = ["slli", "srli", "srai"][rng.random_range(0..3)];
                format!("{op} x{rd}, x{rs1}, {}", rng.random_range(0..32))
            }
            50..=59 => {
                let (op, align) = [("lw", 4), ("lh", 2), ("lhu", 2), ("lb", 1), ("lbu", 1)][rng.random_range(0..5)];
                format!("{op} x{rd}, {}(x31)", rng.random_range(0..64) * align)
            }
            60..=67 => {
                let (op, align) = [("sw", 4), ("sh", 2), ("sb", 1)][rng.random_range(0..3)];
                format!("{op} x{rs2}, {}(x31)", rng.random_range(0..64) * align)
            }
            68..=75 => {
                let op = ["mul", "mulh", "mulhsu", "mulhu", "div", "divu", "rem", "remu"][rng.random_range(0..8)];
                format!("{op} x{rd}, x{rs1}, x{rs2}")
            }
            76..=79 => {
                let op = ["lui", "auipc"][rng.random_range(0..2)];
                format!("{op} x{rd}, 0x{:x}", rng.random_range(0..1 << 20))
            }
            80..=89 => {
                let op = ["beq", "bne", "blt", "bge", "bltu", "bgeu"][rng.random_range(0..6)];
                format!("{op} x{rs1}, x{rs2}, {}", target(&mut rng))
            }
            90..=93 => format!("jal x{rd}, {}", target(&mut rng)),
            94..=96 => format!("la x30, {}\n    jalr x{rd}, 0(x30)", target(&mut rng)),
            _ => format!("sw x{rs1}, 0(x29)"),
        };
        writeln!(s, "    {line}").unwrap();
    }
    writeln!(s, "L{len}:").unwrap();
    writeln!(s, "    sw x1, 0(x29)").unwrap();
    writeln!(s, "    ebreak").unwrap();
    writeln!(s, ".org 0x3000").unwrap();
    for _ in 0..16 {
        let words: Vec<String> = (0..4).map(|_| format!("0x{:08x}", rng.random::<u32>())).collect();
        writeln!(s, "    .word {}", words.join(", ")).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::run_golden;

    #[test]
    fn all_zero_input_against_all_ones_row() {
        let model = BnnModel {
            seed: 0,
            w1: vec![u64::MAX; HIDDEN],
            thr1: vec![32; HIDDEN],
            w2: vec![0; CLASSES],
            thr2: vec![0; CLASSES],
        };
        assert_eq!(model.hidden(0), 0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let model = BnnModel {
            seed: 0,
            w1: vec![0; HIDDEN],
            thr1: vec![0; HIDDEN],
            w2: vec![0xffff; CLASSES],
            thr2: vec![3; CLASSES],
        };
        assert!(model.scores(0).iter().all(|&s| s == 13));
        assert_eq!(reference_bnn_forward(&model, 0), 0);
    }

    #[test]
    fn generation_is_deterministic_and_sensitive() {
        let a = BnnWorkload::generate(BNN_SEED);
        let b = BnnWorkload::generate(BNN_SEED);
        assert_eq!(a.model, b.model);
        assert_eq!(a.source(), b.source());
        let near = a.inputs.iter().filter(|&&x| a.model.near_threshold(x)).count();
        assert!(near >= 8, "{near}");
    }

    #[test]
    fn bnn_structure() {
        let w = BnnWorkload::reference();
        let src = w.source();
        let blt = src.lines().filter(|l| l.trim_start().starts_with("blt ")).count();
        assert_eq!(blt, HIDDEN);
        for n in 0..HIDDEN {
            let start = src.find(&format!("l1_n{n}:")).unwrap();
            let end = src.find(&format!("l1_skip_{n}:")).unwrap();
            let lws = src[start..end].matches("lw ").count();
            assert!(lws >= 2);
        }
    }

    #[test]
    fn guest_matches_host_on_first_inputs() {
        let w = BnnWorkload::reference();
        for i in 0..4 {
            let g = run_golden(&w.program_for(i), 1_000_000);
            assert!(g.halted);
            assert_eq!(g.state.output_log, [w.golden_labels[i]]);
        }
    }

    #[test]
    fn microbenches_assemble_and_halt() {
        for c in IClass::ALL {
            let m = microbench(c).unwrap();
            let p = assemble(&m.source).unwrap();
            assert_eq!(p.symbol("bench"), Some(m.pc));
            let g = run_golden(&p, 1000);
            assert!(g.halted);
            assert_eq!(g.state.output_log.len(), 1);
        }
    }

    #[test]
    fn random_programs_halt() {
        for seed in 0..20 {
            let p = assemble(&random_program(seed, 60)).unwrap();
            assert!(run_golden(&p, 10_000).halted, "seed {seed}");
        }
    }
}
