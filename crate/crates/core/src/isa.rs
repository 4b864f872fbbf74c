// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Instruction encoding, decoding and disassembly for the supported eBPF subset.
//!
//! Every instruction occupies one 8-byte little-endian slot:
//!
//! ```text
//! byte 0      opcode
//! byte 1      dst register (low nibble), src register (high nibble)
//! bytes 2..4  signed 16-bit offset
//! bytes 4..8  signed 32-bit immediate
//! ```
//!
//! `lddw` is the only two-slot instruction. Its second slot has an all-zero header
//! and carries the upper 32 bits of the immediate.

use std::fmt;

use thiserror::Error;

/// Size in bytes of one instruction slot.
pub const INSN_SIZE: usize = 8;
/// Number of registers, r0 to r10.
pub const NUM_REGS: usize = 11;
/// The read-only frame pointer.
pub const FRAME_POINTER: u8 = 10;

// Instruction classes (low three bits of the opcode).
pub const BPF_LD: u8 = 0x00;
pub const BPF_LDX: u8 = 0x01;
pub const BPF_ST: u8 = 0x02;
pub const BPF_STX: u8 = 0x03;
pub const BPF_ALU: u8 = 0x04;
pub const BPF_JMP: u8 = 0x05;
pub const BPF_JMP32: u8 = 0x06;
pub const BPF_ALU64: u8 = 0x07;

// Operand source.
pub const BPF_K: u8 = 0x00;
pub const BPF_X: u8 = 0x08;

// Memory access sizes.
pub const BPF_W: u8 = 0x00;
pub const BPF_H: u8 = 0x08;
pub const BPF_B: u8 = 0x10;
pub const BPF_DW: u8 = 0x18;

// Memory modes.
pub const BPF_IMM: u8 = 0x00;
pub const BPF_MEM: u8 = 0x60;

// ALU operations.
pub const BPF_ADD: u8 = 0x00;
pub const BPF_SUB: u8 = 0x10;
pub const BPF_MUL: u8 = 0x20;
pub const BPF_DIV: u8 = 0x30;
pub const BPF_OR: u8 = 0x40;
pub const BPF_AND: u8 = 0x50;
pub const BPF_LSH: u8 = 0x60;
pub const BPF_RSH: u8 = 0x70;
pub const BPF_NEG: u8 = 0x80;
pub const BPF_MOD: u8 = 0x90;
pub const BPF_XOR: u8 = 0xa0;
pub const BPF_MOV: u8 = 0xb0;
pub const BPF_ARSH: u8 = 0xc0;
pub const BPF_END: u8 = 0xd0;

// Jump operations.
pub const BPF_JA: u8 = 0x00;
pub const BPF_JEQ: u8 = 0x10;
pub const BPF_JGT: u8 = 0x20;
pub const BPF_JGE: u8 = 0x30;
pub const BPF_JSET: u8 = 0x40;
pub const BPF_JNE: u8 = 0x50;
pub const BPF_JSGT: u8 = 0x60;
pub const BPF_JSGE: u8 = 0x70;
pub const BPF_CALL: u8 = 0x80;
pub const BPF_EXIT: u8 = 0x90;
pub const BPF_JLT: u8 = 0xa0;
pub const BPF_JLE: u8 = 0xb0;
pub const BPF_JSLT: u8 = 0xc0;
pub const BPF_JSLE: u8 = 0xd0;

// Endianness conversion source bit: BPF_K is "to little endian", BPF_X "to big endian".
pub const BPF_TO_LE: u8 = BPF_K;
pub const BPF_TO_BE: u8 = BPF_X;

pub const LD_DW_IMM: u8 = BPF_LD | BPF_IMM | BPF_DW;
pub const LD_W_REG: u8 = BPF_LDX | BPF_MEM | BPF_W;
pub const LD_H_REG: u8 = BPF_LDX | BPF_MEM | BPF_H;
pub const LD_B_REG: u8 = BPF_LDX | BPF_MEM | BPF_B;
pub const LD_DW_REG: u8 = BPF_LDX | BPF_MEM | BPF_DW;
pub const ST_W_IMM: u8 = BPF_ST | BPF_MEM | BPF_W;
pub const ST_H_IMM: u8 = BPF_ST | BPF_MEM | BPF_H;
pub const ST_B_IMM: u8 = BPF_ST | BPF_MEM | BPF_B;
pub const ST_DW_IMM: u8 = BPF_ST | BPF_MEM | BPF_DW;
pub const ST_W_REG: u8 = BPF_STX | BPF_MEM | BPF_W;
pub const ST_H_REG: u8 = BPF_STX | BPF_MEM | BPF_H;
pub const ST_B_REG: u8 = BPF_STX | BPF_MEM | BPF_B;
pub const ST_DW_REG: u8 = BPF_STX | BPF_MEM | BPF_DW;
pub const MOV64_IMM: u8 = BPF_ALU64 | BPF_MOV | BPF_K;
pub const MOV64_REG: u8 = BPF_ALU64 | BPF_MOV | BPF_X;
pub const ADD32_IMM: u8 = BPF_ALU | BPF_ADD | BPF_K;
pub const DIV64_REG: u8 = BPF_ALU64 | BPF_DIV | BPF_X;
pub const JA: u8 = BPF_JMP | BPF_JA;
pub const JGT_REG: u8 = BPF_JMP | BPF_JGT | BPF_X;
pub const CALL: u8 = BPF_JMP | BPF_CALL;
pub const EXIT: u8 = BPF_JMP | BPF_EXIT;

/// Coarse instruction taxonomy over the supported subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpcodeClass {
    Alu64,
    Alu32,
    /// `lddw`, the 64-bit immediate load.
    Load,
    /// `ldx*`, load from memory into a register.
    LoadReg,
    StoreImm,
    StoreReg,
    Jump,
    Call,
    Exit,
}

impl OpcodeClass {
    /// Classifies an opcode. Unsupported opcodes yield `None`.
    pub fn of(opcode: u8) -> Option<OpcodeClass> {
        let form = form_of(opcode)?;
        Some(match form {
            Form::AluImm | Form::AluReg | Form::Neg if opcode & 0x07 == BPF_ALU64 => {
                OpcodeClass::Alu64
            }
            Form::AluImm | Form::AluReg | Form::Neg | Form::Endian => OpcodeClass::Alu32,
            Form::WideLoad => OpcodeClass::Load,
            Form::Ldx => OpcodeClass::LoadReg,
            Form::St => OpcodeClass::StoreImm,
            Form::Stx => OpcodeClass::StoreReg,
            Form::Ja | Form::JmpImm | Form::JmpReg => OpcodeClass::Jump,
            Form::Call => OpcodeClass::Call,
            Form::Exit => OpcodeClass::Exit,
        })
    }
}

/// Operand shape of an opcode, shared by the decoder, assembler and disassembler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Form {
    AluImm,
    AluReg,
    Neg,
    Endian,
    WideLoad,
    Ldx,
    St,
    Stx,
    Ja,
    JmpImm,
    JmpReg,
    Call,
    Exit,
}

const ALU_OPS: [(u8, &str); 12] = [
    (BPF_ADD, "add"),
    (BPF_SUB, "sub"),
    (BPF_MUL, "mul"),
    (BPF_DIV, "div"),
    (BPF_OR, "or"),
    (BPF_AND, "and"),
    (BPF_LSH, "lsh"),
    (BPF_RSH, "rsh"),
    (BPF_MOD, "mod"),
    (BPF_XOR, "xor"),
    (BPF_MOV, "mov"),
    (BPF_ARSH, "arsh"),
];

const JMP_OPS: [(u8, &str); 11] = [
    (BPF_JEQ, "jeq"),
    (BPF_JGT, "jgt"),
    (BPF_JGE, "jge"),
    (BPF_JSET, "jset"),
    (BPF_JNE, "jne"),
    (BPF_JSGT, "jsgt"),
    (BPF_JSGE, "jsge"),
    (BPF_JLT, "jlt"),
    (BPF_JLE, "jle"),
    (BPF_JSLT, "jslt"),
    (BPF_JSLE, "jsle"),
];

const SIZES: [(u8, &str); 4] = [(BPF_B, "b"), (BPF_H, "h"), (BPF_W, "w"), (BPF_DW, "dw")];

pub(crate) fn form_of(opcode: u8) -> Option<Form> {
    let class = opcode & 0x07;
    match class {
        BPF_ALU | BPF_ALU64 => {
            let op = opcode & 0xf0;
            let src = opcode & 0x08;
            if op == BPF_NEG {
                return (src == BPF_K).then_some(Form::Neg);
            }
            if op == BPF_END {
                return (class == BPF_ALU).then_some(Form::Endian);
            }
            ALU_OPS
                .iter()
                .any(|&(o, _)| o == op)
                .then_some(if src == BPF_X {
                    Form::AluReg
                } else {
                    Form::AluImm
                })
        }
        BPF_LD => (opcode == LD_DW_IMM).then_some(Form::WideLoad),
        BPF_LDX | BPF_ST | BPF_STX => {
            if opcode & 0xe0 != BPF_MEM {
                return None;
            }
            Some(match class {
                BPF_LDX => Form::Ldx,
                BPF_ST => Form::St,
                _ => Form::Stx,
            })
        }
        BPF_JMP | BPF_JMP32 => {
            let op = opcode & 0xf0;
            let src = opcode & 0x08;
            match op {
                BPF_JA => (class == BPF_JMP && src == BPF_K).then_some(Form::Ja),
                BPF_CALL => (class == BPF_JMP && src == BPF_K).then_some(Form::Call),
                BPF_EXIT => (class == BPF_JMP && src == BPF_K).then_some(Form::Exit),
                _ if JMP_OPS.iter().any(|&(o, _)| o == op) => Some(if src == BPF_X {
                    Form::JmpReg
                } else {
                    Form::JmpImm
                }),
                _ => None,
            }
        }
        _ => None,
    }
}

/// Whether `opcode` belongs to the supported subset.
pub fn is_supported(opcode: u8) -> bool {
    form_of(opcode).is_some()
}

/// Every supported opcode, in ascending order.
pub fn supported_opcodes() -> impl Iterator<Item = u8> {
    (0..=u8::MAX).filter(|&op| is_supported(op))
}

/// One decoded instruction slot.
///
/// The second slot of a `lddw` decodes to an `Instruction` with opcode 0 whose
/// `imm` holds the upper half of the constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Instruction {
    pub opcode: u8,
    pub dst: u8,
    pub src: u8,
    pub offset: i16,
    pub imm: i32,
}

impl Instruction {
    pub const fn new(opcode: u8, dst: u8, src: u8, offset: i16, imm: i32) -> Self {
        Instruction {
            opcode,
            dst,
            src,
            offset,
            imm,
        }
    }

    pub const fn exit() -> Self {
        Instruction::new(EXIT, 0, 0, 0, 0)
    }

    /// The two slots of `lddw dst, value`.
    pub const fn wide_load(dst: u8, value: u64) -> [Instruction; 2] {
        [
            Instruction::new(LD_DW_IMM, dst, 0, 0, value as u32 as i32),
            Instruction::new(0, 0, 0, 0, (value >> 32) as u32 as i32),
        ]
    }

    pub fn class(&self) -> Option<OpcodeClass> {
        OpcodeClass::of(self.opcode)
    }

    pub fn is_wide_load(&self) -> bool {
        self.opcode == LD_DW_IMM
    }

    /// True for `ja` and every conditional jump.
    pub fn is_jump(&self) -> bool {
        matches!(
            form_of(self.opcode),
            Some(Form::Ja | Form::JmpImm | Form::JmpReg)
        )
    }

    /// True if executing this instruction assigns to `dst`.
    pub fn writes_dst(&self) -> bool {
        matches!(
            form_of(self.opcode),
            Some(
                Form::AluImm | Form::AluReg | Form::Neg | Form::Endian | Form::WideLoad | Form::Ldx
            )
        )
    }

    /// Slot index targeted by a jump at `pc`. May lie outside the program.
    pub fn jump_target(&self, pc: usize) -> i64 {
        pc as i64 + 1 + self.offset as i64
    }

    fn regs_byte(&self) -> u8 {
        (self.src << 4) | (self.dst & 0x0f)
    }

    fn to_bytes(self) -> [u8; INSN_SIZE] {
        let mut out = [0u8; INSN_SIZE];
        out[0] = self.opcode;
        out[1] = self.regs_byte();
        out[2..4].copy_from_slice(&self.offset.to_le_bytes());
        out[4..8].copy_from_slice(&self.imm.to_le_bytes());
        out
    }

    fn from_bytes(slot: &[u8; INSN_SIZE]) -> Self {
        Instruction {
            opcode: slot[0],
            dst: slot[1] & 0x0f,
            src: slot[1] >> 4,
            offset: i16::from_le_bytes([slot[2], slot[3]]),
            imm: i32::from_le_bytes([slot[4], slot[5], slot[6], slot[7]]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeErrorKind {
    #[error("truncated input: {len} bytes is not a whole number of 8-byte slots")]
    Truncated { len: usize },
    #[error("unknown opcode {opcode:#04x}")]
    UnknownOpcode { opcode: u8 },
    #[error("register index r{reg} out of range")]
    InvalidRegister { reg: u8 },
    #[error("lddw is missing its second slot")]
    DanglingWideLoad,
    #[error("second slot of lddw has a non-zero header")]
    MalformedWideLoad,
}

/// Failure to decode a slot, tagged with the index of the first bad slot.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("slot {slot}: {kind}")]
pub struct DecodeError {
    pub slot: usize,
    pub kind: DecodeErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("register index r{0} out of range")]
    InvalidRegister(u8),
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
}

/// Decodes a single self-contained slot.
pub fn decode(bytes: &[u8]) -> Result<Instruction, DecodeError> {
    let slot: &[u8; INSN_SIZE] = bytes.try_into().map_err(|_| DecodeError {
        slot: 0,
        kind: DecodeErrorKind::Truncated { len: bytes.len() },
    })?;
    decode_slot(slot, 0)
}

fn decode_slot(slot: &[u8; INSN_SIZE], index: usize) -> Result<Instruction, DecodeError> {
    let insn = Instruction::from_bytes(slot);
    let fail = |kind| DecodeError { slot: index, kind };
    if !is_supported(insn.opcode) {
        return Err(fail(DecodeErrorKind::UnknownOpcode {
            opcode: insn.opcode,
        }));
    }
    for reg in [insn.dst, insn.src] {
        if reg as usize >= NUM_REGS {
            return Err(fail(DecodeErrorKind::InvalidRegister { reg }));
        }
    }
    Ok(insn)
}

/// Encodes one instruction into its wire slot.
pub fn encode(insn: &Instruction) -> Result<[u8; INSN_SIZE], EncodeError> {
    for reg in [insn.dst, insn.src] {
        if reg as usize >= NUM_REGS {
            return Err(EncodeError::InvalidRegister(reg));
        }
    }
    if !is_supported(insn.opcode) {
        return Err(EncodeError::UnknownOpcode(insn.opcode));
    }
    Ok(insn.to_bytes())
}

/// Encodes a slot sequence, accepting the continuation slot after each `lddw`.
pub fn encode_program(insns: &[Instruction]) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(insns.len() * INSN_SIZE);
    let mut i = 0;
    while i < insns.len() {
        out.extend_from_slice(&encode(&insns[i])?);
        if insns[i].is_wide_load() {
            if let Some(hi) = insns.get(i + 1) {
                out.extend_from_slice(&hi.to_bytes());
                i += 1;
            }
        }
        i += 1;
    }
    Ok(out)
}

/// Decodes a whole program into one `Instruction` per slot.
pub fn decode_program(bytes: &[u8]) -> Result<Vec<Instruction>, DecodeError> {
    let mut out = Vec::with_capacity(bytes.len() / INSN_SIZE);
    for_each_slot(bytes, |_, decoded| {
        out.push(decoded?);
        Ok(())
    })?;
    Ok(out)
}

/// Walks the slots of `bytes`, yielding each slot's decode result in order.
///
/// Stops at the first error returned by `visit`. A length that is not a
/// multiple of 8 is reported after the complete slots have been visited.
pub(crate) fn for_each_slot<F>(bytes: &[u8], mut visit: F) -> Result<(), DecodeError>
where
    F: FnMut(usize, Result<Instruction, DecodeError>) -> Result<(), DecodeError>,
{
    let mut chunks = bytes.chunks_exact(INSN_SIZE).enumerate();
    while let Some((index, chunk)) = chunks.next() {
        let slot: &[u8; INSN_SIZE] = chunk.try_into().expect("exact chunk");
        let decoded = decode_slot(slot, index);
        let wide = matches!(decoded, Ok(ref insn) if insn.is_wide_load());
        visit(index, decoded)?;
        if wide {
            let next = match chunks.next() {
                Some((hi_index, hi_chunk)) => {
                    let hi_slot: &[u8; INSN_SIZE] = hi_chunk.try_into().expect("exact chunk");
                    let hi = Instruction::from_bytes(hi_slot);
                    if hi_slot[..4] == [0; 4] {
                        Ok(hi)
                    } else {
                        Err(DecodeError {
                            slot: hi_index,
                            kind: DecodeErrorKind::MalformedWideLoad,
                        })
                    }
                }
                None => Err(DecodeError {
                    slot: index,
                    kind: DecodeErrorKind::DanglingWideLoad,
                }),
            };
            visit(index + 1, next)?;
        }
    }
    if !bytes.len().is_multiple_of(INSN_SIZE) {
        return Err(DecodeError {
            slot: bytes.len() / INSN_SIZE,
            kind: DecodeErrorKind::Truncated { len: bytes.len() },
        });
    }
    Ok(())
}

fn alu_name(op: u8) -> &'static str {
    ALU_OPS
        .iter()
        .find(|&&(o, _)| o == op)
        .map(|&(_, n)| n)
        .unwrap_or("?")
}

fn jmp_name(op: u8) -> &'static str {
    JMP_OPS
        .iter()
        .find(|&&(o, _)| o == op)
        .map(|&(_, n)| n)
        .unwrap_or("?")
}

fn size_name(size: u8) -> &'static str {
    SIZES
        .iter()
        .find(|&&(s, _)| s == size)
        .map(|&(_, n)| n)
        .unwrap_or("?")
}

pub(crate) fn alu_op_by_name(name: &str) -> Option<u8> {
    ALU_OPS.iter().find(|&&(_, n)| n == name).map(|&(o, _)| o)
}

pub(crate) fn jmp_op_by_name(name: &str) -> Option<u8> {
    JMP_OPS.iter().find(|&&(_, n)| n == name).map(|&(o, _)| o)
}

pub(crate) fn size_by_name(name: &str) -> Option<u8> {
    SIZES.iter().find(|&&(_, n)| n == name).map(|&(s, _)| s)
}

struct Offset(i16);

impl fmt::Display for Offset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 < 0 {
            write!(f, "-{}", (self.0 as i32).unsigned_abs())
        } else {
            write!(f, "+{}", self.0)
        }
    }
}

/// Renders one instruction in assembler syntax. `hi` is the continuation slot
/// for `lddw` and is ignored otherwise.
pub fn format_instruction(insn: &Instruction, hi: Option<&Instruction>) -> String {
    let op = insn.opcode & 0xf0;
    let width = if insn.opcode & 0x07 == BPF_ALU64 {
        "64"
    } else {
        "32"
    };
    let jwidth = if insn.opcode & 0x07 == BPF_JMP32 {
        "32"
    } else {
        ""
    };
    let size = size_name(insn.opcode & 0x18);
    match form_of(insn.opcode) {
        Some(Form::AluImm) => format!("{}{} r{}, {}", alu_name(op), width, insn.dst, insn.imm),
        Some(Form::AluReg) => format!("{}{} r{}, r{}", alu_name(op), width, insn.dst, insn.src),
        Some(Form::Neg) => format!("neg{} r{}", width, insn.dst),
        Some(Form::Endian) => {
            let order = if insn.opcode & 0x08 == BPF_TO_BE {
                "be"
            } else {
                "le"
            };
            format!("{}{} r{}", order, insn.imm, insn.dst)
        }
        Some(Form::WideLoad) => {
            let high = hi.map(|h| h.imm as u32 as u64).unwrap_or(0);
            let value = (high << 32) | insn.imm as u32 as u64;
            format!("lddw r{}, {:#x}", insn.dst, value)
        }
        Some(Form::Ldx) => format!(
            "ldx{} r{}, [r{}{}]",
            size,
            insn.dst,
            insn.src,
            Offset(insn.offset)
        ),
        Some(Form::St) => format!(
            "st{} [r{}{}], {}",
            size,
            insn.dst,
            Offset(insn.offset),
            insn.imm
        ),
        Some(Form::Stx) => format!(
            "stx{} [r{}{}], r{}",
            size,
            insn.dst,
            Offset(insn.offset),
            insn.src
        ),
        Some(Form::Ja) => format!("ja {}", Offset(insn.offset)),
        Some(Form::JmpImm) => format!(
            "{}{} r{}, {}, {}",
            jmp_name(op),
            jwidth,
            insn.dst,
            insn.imm,
            Offset(insn.offset)
        ),
        Some(Form::JmpReg) => format!(
            "{}{} r{}, r{}, {}",
            jmp_name(op),
            jwidth,
            insn.dst,
            insn.src,
            Offset(insn.offset)
        ),
        Some(Form::Call) => format!("call {}", insn.imm),
        Some(Form::Exit) => "exit".to_string(),
        None => format!(".slot {:#04x}", insn.opcode),
    }
}

/// Disassembles raw bytecode, one line per instruction (`lddw` yields one line).
pub fn disassemble(bytes: &[u8]) -> Result<Vec<String>, DecodeError> {
    let insns = decode_program(bytes)?;
    let mut lines = Vec::with_capacity(insns.len());
    let mut i = 0;
    while i < insns.len() {
        let insn = &insns[i];
        if insn.is_wide_load() {
            lines.push(format_instruction(insn, insns.get(i + 1)));
            i += 2;
        } else {
            lines.push(format_instruction(insn, None));
            i += 1;
        }
    }
    Ok(lines)
}
