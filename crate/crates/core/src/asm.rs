// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Text assembler for the supported instruction subset.
//!
//! Syntax is the one produced by [`crate::isa::disassemble`], plus labels and
//! symbolic calls:
//!
//! ```text
//! ; comment
//! start:
//!     mov r0, 0            ; `mov` and friends default to the 64-bit form
//!     ldxh r2, [r1+4]
//!     jne r2, 0, start     ; label or relative offset such as +3 / -2
//!     call fetch_global    ; binding name or numeric id
//!     lddw r3, 0x1122334455667788
//!     exit
//! ```

use std::collections::HashMap;

use thiserror::Error;

use crate::bindings;
use crate::isa::{self, Instruction};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct AsmError {
    pub line: usize,
    pub message: String,
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, AsmError> {
    Err(AsmError {
        line,
        message: message.into(),
    })
}

enum Target {
    Offset(i16),
    Label(String),
}

struct Pending {
    line: usize,
    slot: usize,
    target: Target,
}

/// Assembles `source`, resolving `call <name>` through the standard binding table.
pub fn assemble(source: &str) -> Result<Vec<u8>, AsmError> {
    assemble_with(source, bindings::standard_id)
}

/// Assembles `source`, resolving symbolic call targets with `resolve`.
pub fn assemble_with<R>(source: &str, resolve: R) -> Result<Vec<u8>, AsmError>
where
    R: Fn(&str) -> Option<u32>,
{
    let insns = parse(source, &resolve)?;
    isa::encode_program(&insns).map_err(|e| AsmError {
        line: 0,
        message: e.to_string(),
    })
}

fn parse<R>(source: &str, resolve: &R) -> Result<Vec<Instruction>, AsmError>
where
    R: Fn(&str) -> Option<u32>,
{
    let mut insns: Vec<Instruction> = Vec::new();
    let mut labels: HashMap<String, (usize, usize)> = HashMap::new();
    let mut pending: Vec<Pending> = Vec::new();

    for (index, raw) in source.lines().enumerate() {
        let line = index + 1;
        let mut text = raw.split(';').next().unwrap_or("").trim();
        while let Some(colon) = text.find(':') {
            let label = text[..colon].trim();
            if !is_identifier(label) {
                return err(line, format!("invalid label `{label}`"));
            }
            if let Some(&(_, first)) = labels.get(label) {
                return err(
                    line,
                    format!("label `{label}` already defined on line {first}"),
                );
            }
            labels.insert(label.to_string(), (insns.len(), line));
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (mnemonic, rest) = match text.find(char::is_whitespace) {
            Some(split) => (&text[..split], text[split..].trim()),
            None => (text, ""),
        };
        let operands: Vec<&str> = if rest.is_empty() {
            Vec::new()
        } else {
            split_operands(rest)
        };
        let slot = insns.len();
        let parsed = parse_instruction(line, &mnemonic.to_ascii_lowercase(), &operands, resolve)?;
        if let Some(target) = parsed.target {
            pending.push(Pending { line, slot, target });
        }
        insns.extend(parsed.insns);
    }

    for p in pending {
        let offset = match p.target {
            Target::Offset(off) => off,
            Target::Label(name) => {
                let Some(&(dest, _)) = labels.get(&name) else {
                    return err(p.line, format!("undefined label `{name}`"));
                };
                let delta = dest as i64 - p.slot as i64 - 1;
                i16::try_from(delta)
                    .or_else(|_| err(p.line, format!("jump to `{name}` out of 16-bit range")))?
            }
        };
        insns[p.slot].offset = offset;
    }
    Ok(insns)
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

// Splits on commas outside brackets.
fn split_operands(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(s[start..].trim());
    out
}

struct Parsed {
    insns: Vec<Instruction>,
    target: Option<Target>,
}

impl Parsed {
    fn one(insn: Instruction) -> Self {
        Parsed {
            insns: vec![insn],
            target: None,
        }
    }
}

fn parse_register(line: usize, s: &str) -> Result<u8, AsmError> {
    let digits = s
        .strip_prefix('r')
        .or_else(|| s.strip_prefix('R'))
        .ok_or_else(|| AsmError {
            line,
            message: format!("expected register, found `{s}`"),
        })?;
    match digits.parse::<u8>() {
        Ok(n) if (n as usize) < isa::NUM_REGS => Ok(n),
        _ => err(line, format!("invalid register `{s}`")),
    }
}

fn is_register(s: &str) -> bool {
    (s.starts_with('r') || s.starts_with('R'))
        && s[1..].chars().all(|c| c.is_ascii_digit())
        && s.len() > 1
}

fn parse_int(s: &str) -> Option<i128> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let value = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i128::from_str_radix(hex, 16).ok()?
    } else {
        body.parse::<i128>().ok()?
    };
    Some(if neg { -value } else { value })
}

/// 32-bit immediate. Values up to `u32::MAX` are accepted and reinterpreted.
fn parse_imm32(line: usize, s: &str) -> Result<i32, AsmError> {
    match parse_int(s) {
        Some(v) if (i32::MIN as i128..=u32::MAX as i128).contains(&v) => Ok(v as u32 as i32),
        Some(_) => err(line, format!("immediate `{s}` does not fit in 32 bits")),
        None => err(line, format!("invalid immediate `{s}`")),
    }
}

fn parse_imm64(line: usize, s: &str) -> Result<u64, AsmError> {
    match parse_int(s) {
        Some(v) if (i64::MIN as i128..=u64::MAX as i128).contains(&v) => Ok(v as u64),
        Some(_) => err(line, format!("immediate `{s}` does not fit in 64 bits")),
        None => err(line, format!("invalid immediate `{s}`")),
    }
}

fn parse_offset(line: usize, s: &str) -> Result<i16, AsmError> {
    match parse_int(s) {
        Some(v) if (i16::MIN as i128..=i16::MAX as i128).contains(&v) => Ok(v as i16),
        Some(_) => err(line, format!("offset `{s}` does not fit in 16 bits")),
        None => err(line, format!("invalid offset `{s}`")),
    }
}

/// Parses `[rN]`, `[rN+off]` or `[rN-off]`.
fn parse_mem(line: usize, s: &str) -> Result<(u8, i16), AsmError> {
    let inner = s
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| AsmError {
            line,
            message: format!("expected memory operand, found `{s}`"),
        })?
        .trim();
    match inner.find(['+', '-']) {
        Some(split) => {
            let reg = parse_register(line, inner[..split].trim())?;
            let off = parse_offset(line, &inner[split..].replace(' ', ""))?;
            Ok((reg, off))
        }
        None => Ok((parse_register(line, inner)?, 0)),
    }
}

fn parse_target(line: usize, s: &str) -> Result<Target, AsmError> {
    if s.starts_with(['+', '-']) || s.chars().all(|c| c.is_ascii_digit()) {
        return Ok(Target::Offset(parse_offset(line, s)?));
    }
    if is_identifier(s) {
        return Ok(Target::Label(s.to_string()));
    }
    err(line, format!("invalid jump target `{s}`"))
}

fn expect_operands(line: usize, mnemonic: &str, ops: &[&str], n: usize) -> Result<(), AsmError> {
    if ops.len() != n {
        return err(
            line,
            format!("`{mnemonic}` takes {n} operand(s), found {}", ops.len()),
        );
    }
    Ok(())
}

fn parse_instruction<R>(
    line: usize,
    mnemonic: &str,
    ops: &[&str],
    resolve: &R,
) -> Result<Parsed, AsmError>
where
    R: Fn(&str) -> Option<u32>,
{
    match mnemonic {
        "exit" => {
            expect_operands(line, mnemonic, ops, 0)?;
            return Ok(Parsed::one(Instruction::exit()));
        }
        "call" => {
            expect_operands(line, mnemonic, ops, 1)?;
            let id = match parse_int(ops[0]) {
                Some(v) if (0..=u32::MAX as i128).contains(&v) => v as u32,
                Some(_) => return err(line, format!("call id `{}` out of range", ops[0])),
                None => resolve(ops[0]).ok_or_else(|| AsmError {
                    line,
                    message: format!("unknown binding `{}`", ops[0]),
                })?,
            };
            return Ok(Parsed::one(Instruction::new(isa::CALL, 0, 0, 0, id as i32)));
        }
        "lddw" => {
            expect_operands(line, mnemonic, ops, 2)?;
            let dst = parse_register(line, ops[0])?;
            let value = parse_imm64(line, ops[1])?;
            return Ok(Parsed {
                insns: Instruction::wide_load(dst, value).to_vec(),
                target: None,
            });
        }
        "ja" => {
            expect_operands(line, mnemonic, ops, 1)?;
            return Ok(Parsed {
                insns: vec![Instruction::new(isa::JA, 0, 0, 0, 0)],
                target: Some(parse_target(line, ops[0])?),
            });
        }
        _ => {}
    }

    if let Some(width) = ["le16", "le32", "le64", "be16", "be32", "be64"]
        .iter()
        .position(|&m| m == mnemonic)
    {
        expect_operands(line, mnemonic, ops, 1)?;
        let order = if width < 3 {
            isa::BPF_TO_LE
        } else {
            isa::BPF_TO_BE
        };
        let bits = [16, 32, 64][width % 3];
        let dst = parse_register(line, ops[0])?;
        let opcode = isa::BPF_ALU | isa::BPF_END | order;
        return Ok(Parsed::one(Instruction::new(opcode, dst, 0, 0, bits)));
    }

    if let Some(size) = mnemonic.strip_prefix("ldx").and_then(isa::size_by_name) {
        expect_operands(line, mnemonic, ops, 2)?;
        let dst = parse_register(line, ops[0])?;
        let (src, off) = parse_mem(line, ops[1])?;
        let opcode = isa::BPF_LDX | isa::BPF_MEM | size;
        return Ok(Parsed::one(Instruction::new(opcode, dst, src, off, 0)));
    }
    if let Some(size) = mnemonic.strip_prefix("stx").and_then(isa::size_by_name) {
        expect_operands(line, mnemonic, ops, 2)?;
        let (dst, off) = parse_mem(line, ops[0])?;
        let src = parse_register(line, ops[1])?;
        let opcode = isa::BPF_STX | isa::BPF_MEM | size;
        return Ok(Parsed::one(Instruction::new(opcode, dst, src, off, 0)));
    }
    if let Some(size) = mnemonic.strip_prefix("st").and_then(isa::size_by_name) {
        expect_operands(line, mnemonic, ops, 2)?;
        let (dst, off) = parse_mem(line, ops[0])?;
        let imm = parse_imm32(line, ops[1])?;
        let opcode = isa::BPF_ST | isa::BPF_MEM | size;
        return Ok(Parsed::one(Instruction::new(opcode, dst, 0, off, imm)));
    }

    // ALU: `<op>`, `<op>64` or `<op>32`.
    let (base, class) = if let Some(b) = mnemonic.strip_suffix("64") {
        (b, isa::BPF_ALU64)
    } else if let Some(b) = mnemonic.strip_suffix("32") {
        (b, isa::BPF_ALU)
    } else {
        (mnemonic, isa::BPF_ALU64)
    };
    if base == "neg" {
        expect_operands(line, mnemonic, ops, 1)?;
        let dst = parse_register(line, ops[0])?;
        return Ok(Parsed::one(Instruction::new(
            class | isa::BPF_NEG,
            dst,
            0,
            0,
            0,
        )));
    }
    if let Some(op) = isa::alu_op_by_name(base) {
        expect_operands(line, mnemonic, ops, 2)?;
        let dst = parse_register(line, ops[0])?;
        let insn = if is_register(ops[1]) {
            let src = parse_register(line, ops[1])?;
            Instruction::new(class | op | isa::BPF_X, dst, src, 0, 0)
        } else {
            Instruction::new(
                class | op | isa::BPF_K,
                dst,
                0,
                0,
                parse_imm32(line, ops[1])?,
            )
        };
        return Ok(Parsed::one(insn));
    }

    // Conditional jumps: `<op>` or `<op>32`.
    let (base, class) = match mnemonic.strip_suffix("32") {
        Some(b) => (b, isa::BPF_JMP32),
        None => (mnemonic, isa::BPF_JMP),
    };
    if let Some(op) = isa::jmp_op_by_name(base) {
        expect_operands(line, mnemonic, ops, 3)?;
        let dst = parse_register(line, ops[0])?;
        let insn = if is_register(ops[1]) {
            let src = parse_register(line, ops[1])?;
            Instruction::new(class | op | isa::BPF_X, dst, src, 0, 0)
        } else {
            Instruction::new(
                class | op | isa::BPF_K,
                dst,
                0,
                0,
                parse_imm32(line, ops[1])?,
            )
        };
        return Ok(Parsed {
            insns: vec![insn],
            target: Some(parse_target(line, ops[2])?),
        });
    }

    err(line, format!("unknown mnemonic `{mnemonic}`"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{decode_program, disassemble, Instruction as I};

    #[test]
    fn two_slot_program() {
        let bytes = assemble("mov r0, 0\nexit").unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..8], &[0xb7, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn label_resolution() {
        let src = "
            ja end          ; forward
        top:
            add r1, 1
            jlt r1, 10, top ; backward
        end:
            exit
        ";
        let insns = decode_program(&assemble(src).unwrap()).unwrap();
        assert_eq!(insns[0].offset, 2);
        assert_eq!(insns[2].offset, -2);
    }

    #[test]
    fn symbolic_call() {
        let insns = decode_program(&assemble("call saul_reg_find_nth\nexit").unwrap()).unwrap();
        assert_eq!(
            insns[0],
            I::new(isa::CALL, 0, 0, 0, bindings::SAUL_REG_FIND_NTH as i32)
        );
        let insns = decode_program(&assemble("call 11\nexit").unwrap()).unwrap();
        assert_eq!(insns[0].imm, 11);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = assemble("mov r0, 0\nfrobnicate r1\nexit").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.message.contains("unknown mnemonic"));
        let e = assemble("ja nowhere\nexit").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(e.message.contains("undefined label"));
        let e = assemble("a:\na:\nexit").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(assemble("mov r11, 1")
            .unwrap_err()
            .message
            .contains("invalid register"));
        assert!(assemble("mov r1, 0x100000000")
            .unwrap_err()
            .message
            .contains("32 bits"));
        assert!(assemble("ldxw r1, [r2+40000]")
            .unwrap_err()
            .message
            .contains("16 bits"));
        assert!(assemble("call no_such_binding")
            .unwrap_err()
            .message
            .contains("unknown binding"));
        assert!(assemble("exit r0").is_err());
    }

    #[test]
    fn operand_forms() {
        let src = "
            mov32 r1, 0xffffffff
            stxdw [r10-8], r1
            ldxb r2, [r10 - 8]
            stw [r3], -1
            be16 r2
            neg32 r2
            jsgt32 r1, r2, +0
            lddw r4, -1
            exit
        ";
        let lines = disassemble(&assemble(src).unwrap()).unwrap();
        assert_eq!(
            lines,
            [
                "mov32 r1, -1",
                "stxdw [r10-8], r1",
                "ldxb r2, [r10-8]",
                "stw [r3+0], -1",
                "be16 r2",
                "neg32 r2",
                "jsgt32 r1, r2, +0",
                "lddw r4, 0xffffffffffffffff",
                "exit",
            ]
        );
    }

    #[test]
    fn label_on_same_line() {
        let insns = decode_program(&assemble("loop: ja loop").unwrap()).unwrap();
        assert_eq!(insns[0].offset, -1);
    }
}
