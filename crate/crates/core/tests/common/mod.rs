#![allow(dead_code)]

use std::path::{Path, PathBuf};

use glitchbench::isa::{Format, Instruction, Mnemonic};
use rand::Rng;

/// Source assembled by clang 14 (`--target=riscv32 -march=rv32im -mno-relax`).
pub const ORACLE_SOURCE: &str = "\
start:
lw x5, 0(x6)
lui x1, 0x12345
auipc x2, 0xfffff
jal x1, target
jalr x3, -4(x4)
beq x1, x2, start
bne x5, x6, target
blt x7, x8, start
bge x9, x10, target
bltu x11, x12, start
bgeu x13, x14, target
lb x15, -1(x16)
lh x17, 2046(x18)
lbu x19, -2048(x20)
lhu x21, 100(x22)
sb x23, -7(x24)
sh x25, 64(x26)
sw x27, -2048(x28)
addi x29, x30, -1
slti x31, x1, 2047
sltiu x2, x3, 1
xori x4, x5, -1
ori x6, x7, 0x555
andi x8, x9, 0xff
slli x10, x11, 31
srli x12, x13, 1
srai x14, x15, 17
add x16, x17, x18
sub x19, x20, x21
sll x22, x23, x24
slt x25, x26, x27
sltu x28, x29, x30
xor x31, x0, x1
srl x2, x3, x4
sra x5, x6, x7
or x8, x9, x10
and x11, x12, x13
fence iorw, iorw
fence r, w
ecall
ebreak
mul x14, x15, x16
mulh x17, x18, x19
mulhsu x20, x21, x22
mulhu x23, x24, x25
div x26, x27, x28
divu x29, x30, x31
rem x1, x2, x3
target:
remu x4, x5, x6
sw x5, 0(x6)
";

/// The `.text` words clang produced for [`ORACLE_SOURCE`], in order.
pub const ORACLE_WORDS: [u32; 50] = [
    0x00032283, 0x123450b7, 0xfffff117, 0x0b4000ef, 0xffc201e7, 0xfe2086e3, 0x0a629463, 0xfe83c2e3,
    0x0aa4d063, 0xfcc5eee3, 0x08e6fc63, 0xfff80783, 0x7fe91883, 0x800a4983, 0x064b5a83, 0xff7c0ca3,
    0x059d1023, 0x81be2023, 0xffff0e93, 0x7ff0af93, 0x0011b113, 0xfff2c213, 0x5553e313, 0x0ff4f413,
    0x01f59513, 0x0016d613, 0x4117d713, 0x01288833, 0x415a09b3, 0x018b9b33, 0x01bd2cb3, 0x01eebe33,
    0x00104fb3, 0x0041d133, 0x407352b3, 0x00a4e433, 0x00d675b3, 0x0ff0000f, 0x0210000f, 0x00000073,
    0x00100073, 0x03078733, 0x033918b3, 0x036aaa33, 0x039c3bb3, 0x03cdcd33, 0x03ff5eb3, 0x023160b3,
    0x0262f233, 0x00532023,
];

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Random in-range operands for `m`.
pub fn random_instruction(m: Mnemonic, rng: &mut impl Rng) -> Instruction {
    let mut reg = || rng.random_range(0..32u8);
    let (rd, rs1, rs2) = (reg(), reg(), reg());
    let imm = match m.format() {
        Format::I | Format::S => rng.random_range(-2048..=2047),
        Format::Shift => rng.random_range(0..=31),
        Format::B => rng.random_range(-2048..=2047) * 2,
        Format::J => rng.random_range(-(1 << 19)..(1 << 19)) * 2,
        Format::U => (rng.random_range(0..(1u32 << 20)) << 12) as i32,
        Format::Fence => (rng.random_range(1..16) << 4) | rng.random_range(1..16),
        Format::R | Format::Sys => 0,
    };
    let (rd, rs1) = if m.format() == Format::Fence { (0, 0) } else { (rd, rs1) };
    Instruction::new(m, rd, rs1, rs2, imm).expect("operands in range")
}
