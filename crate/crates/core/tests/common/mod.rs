// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Test oracles and generators shared by the integration tests.
//!
//! Nothing here calls into the interpreter or the policy code; the oracles
//! recompute results from first principles.

#![allow(dead_code)]

use rand::Rng;
use rbpf_core::isa::{self, Instruction};
use rbpf_core::sandbox::{AccessKind, MemoryRegion};

pub const ALU_OPS: [u8; 12] = [
    isa::BPF_ADD,
    isa::BPF_SUB,
    isa::BPF_MUL,
    isa::BPF_DIV,
    isa::BPF_OR,
    isa::BPF_AND,
    isa::BPF_LSH,
    isa::BPF_RSH,
    isa::BPF_MOD,
    isa::BPF_XOR,
    isa::BPF_MOV,
    isa::BPF_ARSH,
];

pub const JMP_OPS: [u8; 11] = [
    isa::BPF_JEQ,
    isa::BPF_JGT,
    isa::BPF_JGE,
    isa::BPF_JSET,
    isa::BPF_JNE,
    isa::BPF_JSGT,
    isa::BPF_JSGE,
    isa::BPF_JLT,
    isa::BPF_JLE,
    isa::BPF_JSLT,
    isa::BPF_JSLE,
];

pub const SIZES: [u8; 4] = [isa::BPF_B, isa::BPF_H, isa::BPF_W, isa::BPF_DW];

pub fn size_bytes(size: u8) -> u64 {
    match size {
        isa::BPF_B => 1,
        isa::BPF_H => 2,
        isa::BPF_W => 4,
        _ => 8,
    }
}

fn reg<R: Rng>(rng: &mut R) -> u8 {
    rng.gen_range(0..=10)
}

fn imm<R: Rng>(rng: &mut R) -> i32 {
    match rng.gen_range(0..4) {
        0 => rng.gen_range(-4..=4),
        1 => [i32::MIN, i32::MAX, -1, 0, 1, 31, 32, 63, 64][rng.gen_range(0..9)],
        _ => rng.gen(),
    }
}

/// One random instruction with all fields unused by its form set to zero, so
/// that disassembly loses nothing. Wide loads come back as two slots.
pub fn canonical_instruction<R: Rng>(rng: &mut R) -> Vec<Instruction> {
    let pick = rng.gen_range(0..11);
    let insn = match pick {
        0 | 1 => {
            let class = if rng.gen() {
                isa::BPF_ALU64
            } else {
                isa::BPF_ALU
            };
            let op = ALU_OPS[rng.gen_range(0..ALU_OPS.len())];
            if rng.gen() {
                Instruction::new(class | op | isa::BPF_X, reg(rng), reg(rng), 0, 0)
            } else {
                Instruction::new(class | op | isa::BPF_K, reg(rng), 0, 0, imm(rng))
            }
        }
        2 => {
            let class = if rng.gen() {
                isa::BPF_ALU64
            } else {
                isa::BPF_ALU
            };
            Instruction::new(class | isa::BPF_NEG, reg(rng), 0, 0, 0)
        }
        3 => {
            let order = if rng.gen() {
                isa::BPF_TO_LE
            } else {
                isa::BPF_TO_BE
            };
            let bits = [16, 32, 64][rng.gen_range(0..3)];
            Instruction::new(isa::BPF_ALU | isa::BPF_END | order, reg(rng), 0, 0, bits)
        }
        4 => return Instruction::wide_load(reg(rng), rng.gen()).to_vec(),
        5 => {
            let size = SIZES[rng.gen_range(0..4)];
            Instruction::new(
                isa::BPF_LDX | isa::BPF_MEM | size,
                reg(rng),
                reg(rng),
                rng.gen(),
                0,
            )
        }
        6 => {
            let size = SIZES[rng.gen_range(0..4)];
            Instruction::new(
                isa::BPF_ST | isa::BPF_MEM | size,
                reg(rng),
                0,
                rng.gen(),
                imm(rng),
            )
        }
        7 => {
            let size = SIZES[rng.gen_range(0..4)];
            Instruction::new(
                isa::BPF_STX | isa::BPF_MEM | size,
                reg(rng),
                reg(rng),
                rng.gen(),
                0,
            )
        }
        8 => Instruction::new(isa::JA, 0, 0, rng.gen(), 0),
        9 => {
            let class = if rng.gen() {
                isa::BPF_JMP
            } else {
                isa::BPF_JMP32
            };
            let op = JMP_OPS[rng.gen_range(0..JMP_OPS.len())];
            if rng.gen() {
                Instruction::new(class | op | isa::BPF_X, reg(rng), reg(rng), rng.gen(), 0)
            } else {
                Instruction::new(class | op | isa::BPF_K, reg(rng), 0, rng.gen(), imm(rng))
            }
        }
        _ => {
            if rng.gen() {
                Instruction::new(isa::CALL, 0, 0, 0, rng.gen_range(1..=11))
            } else {
                Instruction::exit()
            }
        }
    };
    vec![insn]
}

// ---------------------------------------------------------------------------
// Memory policy oracle

/// Brute force: an access is allowed iff a single region holds every byte and
/// grants the access kind.
pub fn oracle_allows(regions: &[MemoryRegion], addr: u64, size: u64, kind: AccessKind) -> bool {
    let mut owner: Option<usize> = None;
    for i in 0..size {
        let Some(byte) = addr.checked_add(i) else {
            return false;
        };
        let Some(idx) = regions
            .iter()
            .position(|r| byte >= r.base && byte - r.base < r.length)
        else {
            return false;
        };
        match owner {
            None => owner = Some(idx),
            Some(o) if o != idx => return false,
            Some(_) => {}
        }
    }
    let Some(idx) = owner else {
        return false;
    };
    match kind {
        AccessKind::Read => regions[idx].flags.readable,
        AccessKind::Write => regions[idx].flags.writable,
    }
}

// ---------------------------------------------------------------------------
// ALU oracle

const M32: u64 = 0xffff_ffff;

fn lo(x: u64) -> u64 {
    x & M32
}

fn sign32(x: u64) -> i64 {
    let v = lo(x);
    if v >= 0x8000_0000 {
        v as i64 - 0x1_0000_0000
    } else {
        v as i64
    }
}

/// Result of a 64-bit ALU op, or `None` for a division by zero.
fn alu64(op: u8, a: u64, b: u64) -> Option<u64> {
    let wide = |v: u128| (v % (1u128 << 64)) as u64;
    Some(match op {
        isa::BPF_ADD => wide(a as u128 + b as u128),
        isa::BPF_SUB => wide(a as u128 + (1u128 << 64) - b as u128),
        isa::BPF_MUL => wide(a as u128 * b as u128),
        isa::BPF_DIV => a.checked_div(b)?,
        isa::BPF_MOD => a.checked_rem(b)?,
        isa::BPF_OR => a | b,
        isa::BPF_AND => a & b,
        isa::BPF_XOR => a ^ b,
        isa::BPF_MOV => b,
        isa::BPF_LSH => wide((a as u128) << (b % 64)),
        isa::BPF_RSH => a >> (b % 64),
        isa::BPF_ARSH => {
            let s = b % 64;
            let mut r = a >> s;
            if a >> 63 == 1 && s > 0 {
                r |= !0u64 << (64 - s);
            }
            r
        }
        _ => unreachable!("op {op:#x}"),
    })
}

fn alu32(op: u8, a: u64, b: u64) -> Option<u64> {
    let (a, b) = (lo(a), lo(b));
    let r = match op {
        isa::BPF_ADD => a + b,
        isa::BPF_SUB => a + (1 << 32) - b,
        isa::BPF_MUL => a * b,
        isa::BPF_DIV => a.checked_div(b)?,
        isa::BPF_MOD => a.checked_rem(b)?,
        isa::BPF_OR => a | b,
        isa::BPF_AND => a & b,
        isa::BPF_XOR => a ^ b,
        isa::BPF_MOV => b,
        isa::BPF_LSH => a << (b % 32),
        isa::BPF_RSH => a >> (b % 32),
        isa::BPF_ARSH => (sign32(a) >> (b % 32)) as u64,
        _ => unreachable!("op {op:#x}"),
    };
    Some(lo(r))
}

fn swap_bytes(v: u64, bytes: u32) -> u64 {
    let mut out = 0u64;
    for i in 0..bytes {
        let byte = (v >> (8 * i)) & 0xff;
        out |= byte << (8 * (bytes - 1 - i));
    }
    out
}

fn condition(op: u8, a: u64, b: u64, narrow: bool) -> bool {
    let (ua, ub, sa, sb) = if narrow {
        (lo(a), lo(b), sign32(a), sign32(b))
    } else {
        (a, b, a as i64, b as i64)
    };
    match op {
        isa::BPF_JEQ => ua == ub,
        isa::BPF_JNE => ua != ub,
        isa::BPF_JGT => ua > ub,
        isa::BPF_JGE => ua >= ub,
        isa::BPF_JLT => ua < ub,
        isa::BPF_JLE => ua <= ub,
        isa::BPF_JSET => ua & ub != 0,
        isa::BPF_JSGT => sa > sb,
        isa::BPF_JSGE => sa >= sb,
        isa::BPF_JSLT => sa < sb,
        isa::BPF_JSLE => sa <= sb,
        _ => unreachable!("jump op {op:#x}"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleResult {
    Exit(u64),
    DivisionByZero,
}

/// Evaluates a program made only of ALU, endian, wide-load, forward
/// conditional jumps and exit. Registers start at zero.
pub fn eval_alu_program(insns: &[Instruction]) -> OracleResult {
    let mut r = [0u64; 11];
    let mut pc = 0usize;
    loop {
        let insn = insns[pc];
        let class = insn.opcode & 0x07;
        let (d, s) = (insn.dst as usize, insn.src as usize);
        let uses_reg = insn.opcode & isa::BPF_X != 0;
        let op = insn.opcode & 0xf0;
        pc += 1;
        match class {
            isa::BPF_ALU64 if op == isa::BPF_NEG => r[d] = 0u64.wrapping_sub(r[d]),
            isa::BPF_ALU if op == isa::BPF_NEG => r[d] = lo((1u64 << 32) - lo(r[d])),
            isa::BPF_ALU if op == isa::BPF_END => {
                let bits = insn.imm as u32;
                let masked = if bits == 64 {
                    r[d]
                } else {
                    r[d] & ((1u64 << bits) - 1)
                };
                r[d] = if uses_reg {
                    swap_bytes(masked, bits / 8)
                } else {
                    masked
                };
            }
            isa::BPF_ALU64 => {
                let b = if uses_reg {
                    r[s]
                } else {
                    insn.imm as i64 as u64
                };
                match alu64(op, r[d], b) {
                    Some(v) => r[d] = v,
                    None => return OracleResult::DivisionByZero,
                }
            }
            isa::BPF_ALU => {
                let b = if uses_reg {
                    r[s]
                } else {
                    insn.imm as u32 as u64
                };
                match alu32(op, r[d], b) {
                    Some(v) => r[d] = v,
                    None => return OracleResult::DivisionByZero,
                }
            }
            isa::BPF_LD => {
                let hi = insns[pc].imm as u32 as u64;
                r[d] = (hi << 32) | insn.imm as u32 as u64;
                pc += 1;
            }
            isa::BPF_JMP | isa::BPF_JMP32 => {
                if insn.opcode == isa::EXIT {
                    return OracleResult::Exit(r[0]);
                }
                let taken = if op == isa::BPF_JA {
                    true
                } else {
                    let narrow = class == isa::BPF_JMP32;
                    let b = if uses_reg {
                        r[s]
                    } else if narrow {
                        insn.imm as u32 as u64
                    } else {
                        insn.imm as i64 as u64
                    };
                    condition(op, r[d], b, narrow)
                };
                if taken {
                    pc = (pc as i64 + insn.offset as i64) as usize;
                }
            }
            _ => panic!("oracle does not model opcode {:#04x}", insn.opcode),
        }
    }
}

/// Random straight-line ALU program with forward conditional jumps, ending in exit.
///
/// Registers r0..r9 are seeded through wide loads first so both halves of
/// every register carry data.
pub fn random_alu_program<R: Rng>(rng: &mut R, body_len: usize) -> Vec<Instruction> {
    let mut insns = Vec::new();
    for d in 0..10u8 {
        let v: u64 = match rng.gen_range(0..4) {
            0 => rng.gen_range(0..8),
            1 => [
                0,
                1,
                u64::MAX,
                1 << 63,
                0x8000_0000,
                0xffff_ffff,
                0x1_0000_0000,
            ][rng.gen_range(0..7)],
            _ => rng.gen(),
        };
        insns.extend(Instruction::wide_load(d, v));
    }
    let dst = |rng: &mut R| rng.gen_range(0..10u8);
    let mut body: Vec<Instruction> = Vec::new();
    while body.len() < body_len {
        let insn = match rng.gen_range(0..10) {
            0..=5 => {
                let class = if rng.gen() {
                    isa::BPF_ALU64
                } else {
                    isa::BPF_ALU
                };
                let op = ALU_OPS[rng.gen_range(0..ALU_OPS.len())];
                if rng.gen() {
                    Instruction::new(class | op | isa::BPF_X, dst(rng), dst(rng), 0, 0)
                } else {
                    Instruction::new(class | op | isa::BPF_K, dst(rng), 0, 0, imm(rng))
                }
            }
            6 => {
                let class = if rng.gen() {
                    isa::BPF_ALU64
                } else {
                    isa::BPF_ALU
                };
                Instruction::new(class | isa::BPF_NEG, dst(rng), 0, 0, 0)
            }
            7 => {
                let order = if rng.gen() {
                    isa::BPF_TO_LE
                } else {
                    isa::BPF_TO_BE
                };
                let bits = [16, 32, 64][rng.gen_range(0..3)];
                Instruction::new(isa::BPF_ALU | isa::BPF_END | order, dst(rng), 0, 0, bits)
            }
            _ => {
                // Forward offset fixed up below once the body length is known.
                let class = if rng.gen() {
                    isa::BPF_JMP
                } else {
                    isa::BPF_JMP32
                };
                let op = JMP_OPS[rng.gen_range(0..JMP_OPS.len())];
                if rng.gen() {
                    Instruction::new(class | op | isa::BPF_X, dst(rng), dst(rng), 0, 0)
                } else {
                    Instruction::new(class | op | isa::BPF_K, dst(rng), 0, 0, imm(rng))
                }
            }
        };
        body.push(insn);
    }
    let n = body.len();
    for (i, insn) in body.iter_mut().enumerate() {
        let class = insn.opcode & 0x07;
        if class == isa::BPF_JMP || class == isa::BPF_JMP32 {
            // Target anywhere from the next instruction to the final exit.
            insn.offset = rng.gen_range(0..=(n - i - 1)) as i16;
        }
    }
    insns.extend(body);
    insns.push(Instruction::exit());
    insns
}
