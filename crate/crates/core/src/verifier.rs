// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Preflight validation of bytecode.
//!
//! The checks are structural only: slot decoding, jump bounds, `lddw` pairing,
//! program termination shape, frame pointer writes and host-call ids. There is
//! no data-flow analysis. Memory operands are checked at run time against the
//! policy table, and fuel bounds execution time.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::isa::{self, DecodeErrorKind, Instruction, FRAME_POINTER, INSN_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ViolationKind {
    EmptyProgram,
    LengthNotMultiple,
    UnknownOpcode,
    InvalidRegister,
    IncompleteWideLoad,
    JumpOutOfBounds,
    IllegalJumpTarget,
    MissingExit,
    BadTerminalInstruction,
    ReadOnlyRegisterWrite,
    UnknownBinding,
    InvalidEndianWidth,
    UnsupportedCall,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub slot: usize,
    pub kind: ViolationKind,
    pub message: String,
}

impl Violation {
    fn new(slot: usize, kind: ViolationKind, message: impl Into<String>) -> Self {
        Violation {
            slot,
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "slot {}: {}: {}", self.slot, self.kind, self.message)
    }
}

/// Every problem found in a rejected program.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerifierReport {
    pub violations: Vec<Violation>,
}

impl VerifierReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }
}

impl fmt::Display for VerifierReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for VerifierReport {}

/// A program that passed [`verify`]. Only `verify` constructs one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedProgram {
    instructions: Vec<Instruction>,
    script_id: u32,
}

impl VerifiedProgram {
    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn slot_count(&self) -> usize {
        self.instructions.len()
    }

    pub fn script_id(&self) -> u32 {
        self.script_id
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        isa::encode_program(&self.instructions).expect("verified instructions encode")
    }

    /// Bypasses verification; used to exercise the interpreter's runtime guards.
    #[cfg(test)]
    pub(crate) fn new_unchecked(instructions: Vec<Instruction>, script_id: u32) -> Self {
        VerifiedProgram {
            instructions,
            script_id,
        }
    }
}

/// Validates `bytecode`, collecting every violation rather than stopping at the first.
pub fn verify(
    bytecode: &[u8],
    script_id: u32,
    binding_ids: &BTreeSet<u32>,
) -> Result<VerifiedProgram, VerifierReport> {
    let mut violations = Vec::new();
    if bytecode.is_empty() {
        violations.push(Violation::new(
            0,
            ViolationKind::EmptyProgram,
            "program is empty",
        ));
        return Err(VerifierReport { violations });
    }
    if !bytecode.len().is_multiple_of(INSN_SIZE) {
        violations.push(Violation::new(
            bytecode.len() / INSN_SIZE,
            ViolationKind::LengthNotMultiple,
            format!("length {} is not a multiple of {INSN_SIZE}", bytecode.len()),
        ));
    }

    // Decode every slot independently so that one bad slot does not hide others.
    // `None` marks a slot that failed to decode.
    let mut slots: Vec<Option<Instruction>> = Vec::with_capacity(bytecode.len() / INSN_SIZE);
    let _ = isa::for_each_slot(bytecode, |_, decoded| {
        match decoded {
            Ok(insn) => slots.push(Some(insn)),
            Err(err) => {
                let kind = match err.kind {
                    DecodeErrorKind::UnknownOpcode { .. } => ViolationKind::UnknownOpcode,
                    DecodeErrorKind::InvalidRegister { .. } => ViolationKind::InvalidRegister,
                    DecodeErrorKind::DanglingWideLoad | DecodeErrorKind::MalformedWideLoad => {
                        ViolationKind::IncompleteWideLoad
                    }
                    // handled above
                    DecodeErrorKind::Truncated { .. } => return Ok(()),
                };
                violations.push(Violation::new(err.slot, kind, err.kind.to_string()));
                // A dangling lddw is reported on its own slot; no slot follows it.
                if err.kind != DecodeErrorKind::DanglingWideLoad {
                    slots.push(None);
                }
            }
        }
        Ok(())
    });
    let slot_count = slots.len();

    violations.extend(jump_violations(&slots));

    let mut has_exit = false;
    let mut index = 0;
    while index < slot_count {
        let Some(insn) = slots[index] else {
            index += 1;
            continue;
        };
        match insn.class() {
            Some(isa::OpcodeClass::Exit) => has_exit = true,
            Some(isa::OpcodeClass::Call) => {
                if insn.src != 0 {
                    violations.push(Violation::new(
                        index,
                        ViolationKind::UnsupportedCall,
                        "only host-function calls (src = 0) are supported",
                    ));
                } else if !binding_ids.contains(&(insn.imm as u32)) {
                    violations.push(Violation::new(
                        index,
                        ViolationKind::UnknownBinding,
                        format!("call to unregistered binding {}", insn.imm as u32),
                    ));
                }
            }
            _ => {}
        }
        if insn.writes_dst() && insn.dst == FRAME_POINTER {
            violations.push(Violation::new(
                index,
                ViolationKind::ReadOnlyRegisterWrite,
                "r10 is a read-only frame pointer",
            ));
        }
        if insn.opcode & 0xf7 == isa::BPF_ALU | isa::BPF_END && !matches!(insn.imm, 16 | 32 | 64) {
            violations.push(Violation::new(
                index,
                ViolationKind::InvalidEndianWidth,
                format!(
                    "byte-order conversion width {} is not 16, 32 or 64",
                    insn.imm
                ),
            ));
        }
        index += if insn.is_wide_load() { 2 } else { 1 };
    }

    if !has_exit {
        violations.push(Violation::new(
            slot_count.saturating_sub(1),
            ViolationKind::MissingExit,
            "program contains no exit instruction",
        ));
    }
    if let Some(last) = last_instruction(&slots) {
        let (index, insn) = last;
        let terminal = insn.opcode == isa::EXIT || insn.opcode == isa::JA;
        if !terminal {
            violations.push(Violation::new(
                index,
                ViolationKind::BadTerminalInstruction,
                "final instruction must be exit or an unconditional jump",
            ));
        }
    }

    if violations.is_empty() {
        let instructions = slots
            .into_iter()
            .map(|s| s.expect("all slots decoded"))
            .collect();
        Ok(VerifiedProgram {
            instructions,
            script_id,
        })
    } else {
        violations.sort_by_key(|v| v.slot);
        Err(VerifierReport { violations })
    }
}

/// The instruction occupying the final slot, treating an `lddw` pair as one instruction.
fn last_instruction(slots: &[Option<Instruction>]) -> Option<(usize, Instruction)> {
    let mut index = 0;
    let mut last = None;
    while index < slots.len() {
        match slots[index] {
            Some(insn) => {
                last = Some((index, insn));
                index += if insn.is_wide_load() { 2 } else { 1 };
            }
            None => {
                last = None;
                index += 1;
            }
        }
    }
    last
}

/// Reports every jump whose target falls outside the program or onto the
/// second slot of an `lddw`.
pub fn check_jump_targets(instructions: &[Instruction]) -> Vec<Violation> {
    let slots: Vec<Option<Instruction>> = instructions.iter().copied().map(Some).collect();
    jump_violations(&slots)
}

fn jump_violations(slots: &[Option<Instruction>]) -> Vec<Violation> {
    let slot_count = slots.len();
    let mut continuation = vec![false; slot_count];
    let mut index = 0;
    while index < slot_count {
        if let Some(insn) = slots[index] {
            if insn.is_wide_load() {
                if index + 1 < slot_count {
                    continuation[index + 1] = true;
                }
                index += 2;
                continue;
            }
        }
        index += 1;
    }

    let mut violations = Vec::new();
    for (pc, slot) in slots.iter().enumerate() {
        let Some(insn) = slot else { continue };
        if continuation[pc] || !insn.is_jump() {
            continue;
        }
        let target = insn.jump_target(pc);
        if target < 0 || target >= slot_count as i64 {
            violations.push(Violation::new(
                pc,
                ViolationKind::JumpOutOfBounds,
                format!("jump to slot {target} outside [0, {slot_count})"),
            ));
        } else if continuation[target as usize] {
            violations.push(Violation::new(
                pc,
                ViolationKind::IllegalJumpTarget,
                format!("jump into the second slot of lddw at {}", target - 1),
            ));
        }
    }
    violations
}
