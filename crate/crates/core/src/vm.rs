// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! The interpreter loop.
//!
//! Execution walks the decoded slots of a [`VerifiedProgram`]. Each executed
//! instruction costs one unit of fuel. Loads and stores go through
//! [`GuestMemory`], which consults the policy table, and every jump target is
//! checked again at run time even though the verifier already proved it sound.

use std::fmt;
use std::time::Duration;

use serde::Serialize;

use crate::bindings::{BindingTable, CallContext, HostEnv, HostError};
use crate::isa::{self, Instruction, NUM_REGS};
use crate::sandbox::{GuestMemory, MemoryFault};
use crate::verifier::VerifiedProgram;

/// Instruction budget used when the caller does not pick one.
pub const DEFAULT_FUEL: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum FaultKind {
    MemoryAccessDenied(MemoryFault),
    /// Unreachable for verified programs; kept as a second line of defence.
    JumpOutOfBounds {
        target: i64,
    },
    DivisionByZero,
    UnknownHostCall(u32),
    HostCallFailed {
        id: u32,
        message: String,
    },
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::MemoryAccessDenied(_) => "memory-access-denied",
            FaultKind::JumpOutOfBounds { .. } => "jump-out-of-bounds",
            FaultKind::DivisionByZero => "division-by-zero",
            FaultKind::UnknownHostCall(_) => "unknown-host-call",
            FaultKind::HostCallFailed { .. } => "host-call-failed",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultKind::MemoryAccessDenied(fault) => write!(f, "memory access denied: {fault}"),
            FaultKind::JumpOutOfBounds { target } => {
                write!(f, "jump to slot {target} out of bounds")
            }
            FaultKind::DivisionByZero => f.write_str("division by zero"),
            FaultKind::UnknownHostCall(id) => write!(f, "unknown host call {id}"),
            FaultKind::HostCallFailed { id, message } => {
                write!(f, "host call {id} failed: {message}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ExecStatus {
    Ok,
    Fault { kind: FaultKind, pc: usize },
    FuelExhausted { pc: usize },
}

impl fmt::Display for ExecStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecStatus::Ok => f.write_str("ok"),
            ExecStatus::Fault { kind, pc } => write!(f, "fault:{}@{pc}", kind.name()),
            ExecStatus::FuelExhausted { pc } => write!(f, "fuel-exhausted@{pc}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecOutcome {
    pub status: ExecStatus,
    /// `r0` when execution stopped.
    pub return_value: i64,
    pub instructions_executed: u64,
    pub host_calls: u64,
}

impl ExecOutcome {
    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }
}

/// Register file, program counter and fuel of one invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmState {
    regs: [u64; NUM_REGS],
    pc: usize,
    fuel_remaining: u64,
    instructions_executed: u64,
    host_calls: u64,
}

/// Result of executing one instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Continue,
    Exit,
    Fault(FaultKind),
}

impl VmState {
    /// Fresh state: `r1` holds the context argument, `r10` the stack top,
    /// every other register zero.
    pub fn new(context_arg: u64, stack_top: u64, fuel: u64) -> Self {
        let mut regs = [0u64; NUM_REGS];
        regs[1] = context_arg;
        regs[isa::FRAME_POINTER as usize] = stack_top;
        VmState {
            regs,
            pc: 0,
            fuel_remaining: fuel,
            instructions_executed: 0,
            host_calls: 0,
        }
    }

    pub fn regs(&self) -> &[u64; NUM_REGS] {
        &self.regs
    }

    pub fn reg(&self, index: usize) -> u64 {
        self.regs[index]
    }

    pub fn set_reg(&mut self, index: usize, value: u64) {
        self.regs[index] = value;
    }

    pub fn pc(&self) -> usize {
        self.pc
    }

    pub fn fuel_remaining(&self) -> u64 {
        self.fuel_remaining
    }

    pub fn instructions_executed(&self) -> u64 {
        self.instructions_executed
    }

    pub fn host_calls(&self) -> u64 {
        self.host_calls
    }

    fn jump(&mut self, insn: &Instruction, slot_count: usize) -> Step {
        let target = insn.jump_target(self.pc);
        if target < 0 || target >= slot_count as i64 {
            return Step::Fault(FaultKind::JumpOutOfBounds { target });
        }
        self.pc = target as usize;
        Step::Continue
    }

    fn advance(&mut self, slots: usize, slot_count: usize) -> Step {
        self.pc += slots;
        if self.pc >= slot_count {
            return Step::Fault(FaultKind::JumpOutOfBounds {
                target: self.pc as i64,
            });
        }
        Step::Continue
    }

    /// Executes the instruction at the current pc. Does not consume fuel.
    pub fn step(
        &mut self,
        program: &[Instruction],
        ctx: &mut CallContext<'_, '_>,
        bindings: &BindingTable,
    ) -> Step {
        let insn = program[self.pc];
        let dst = insn.dst as usize;
        let src = insn.src as usize;
        let slot_count = program.len();
        let class = insn.opcode & 0x07;

        match class {
            isa::BPF_ALU64 => {
                let operand = if insn.opcode & isa::BPF_X != 0 {
                    self.regs[src]
                } else {
                    insn.imm as i64 as u64
                };
                match alu64(insn.opcode & 0xf0, self.regs[dst], operand) {
                    Ok(v) => self.regs[dst] = v,
                    Err(kind) => return Step::Fault(kind),
                }
            }
            isa::BPF_ALU => {
                let op = insn.opcode & 0xf0;
                if op == isa::BPF_END {
                    self.regs[dst] = byte_swap(self.regs[dst], insn.opcode & isa::BPF_X, insn.imm);
                } else {
                    let operand = if insn.opcode & isa::BPF_X != 0 {
                        self.regs[src] as u32
                    } else {
                        insn.imm as u32
                    };
                    match alu32(op, self.regs[dst] as u32, operand) {
                        Ok(v) => self.regs[dst] = v as u64,
                        Err(kind) => return Step::Fault(kind),
                    }
                }
            }
            isa::BPF_LD => {
                let hi = program.get(self.pc + 1).map_or(0, |h| h.imm as u32 as u64);
                self.regs[dst] = (hi << 32) | insn.imm as u32 as u64;
                return self.advance(2, slot_count);
            }
            isa::BPF_LDX => {
                let addr = self.regs[src].wrapping_add(insn.offset as i64 as u64);
                match ctx.memory.load(addr, access_size(insn.opcode)) {
                    Ok(v) => self.regs[dst] = v,
                    Err(fault) => return Step::Fault(FaultKind::MemoryAccessDenied(fault)),
                }
            }
            isa::BPF_ST | isa::BPF_STX => {
                let addr = self.regs[dst].wrapping_add(insn.offset as i64 as u64);
                let value = if class == isa::BPF_STX {
                    self.regs[src]
                } else {
                    insn.imm as i64 as u64
                };
                if let Err(fault) = ctx.memory.store(addr, access_size(insn.opcode), value) {
                    return Step::Fault(FaultKind::MemoryAccessDenied(fault));
                }
            }
            isa::BPF_JMP | isa::BPF_JMP32 => {
                let op = insn.opcode & 0xf0;
                match op {
                    isa::BPF_JA => return self.jump(&insn, slot_count),
                    isa::BPF_EXIT => return Step::Exit,
                    isa::BPF_CALL => {
                        let id = insn.imm as u32;
                        self.host_calls += 1;
                        let Some(function) = bindings.get(id) else {
                            return Step::Fault(FaultKind::UnknownHostCall(id));
                        };
                        let args = [
                            self.regs[1],
                            self.regs[2],
                            self.regs[3],
                            self.regs[4],
                            self.regs[5],
                        ];
                        match function.call(ctx, args) {
                            Ok(v) => self.regs[0] = v,
                            Err(HostError::Memory(fault)) => {
                                return Step::Fault(FaultKind::MemoryAccessDenied(fault))
                            }
                            Err(HostError::Failed(message)) => {
                                return Step::Fault(FaultKind::HostCallFailed { id, message })
                            }
                        }
                    }
                    _ => {
                        let rhs = if insn.opcode & isa::BPF_X != 0 {
                            self.regs[src]
                        } else {
                            insn.imm as i64 as u64
                        };
                        let taken = if class == isa::BPF_JMP32 {
                            condition32(op, self.regs[dst] as u32, rhs as u32)
                        } else {
                            condition64(op, self.regs[dst], rhs)
                        };
                        if taken {
                            return self.jump(&insn, slot_count);
                        }
                    }
                }
            }
            _ => unreachable!("verified programs contain only supported opcodes"),
        }
        self.advance(1, slot_count)
    }
}

fn access_size(opcode: u8) -> usize {
    match opcode & 0x18 {
        isa::BPF_B => 1,
        isa::BPF_H => 2,
        isa::BPF_W => 4,
        _ => 8,
    }
}

fn alu64(op: u8, dst: u64, src: u64) -> Result<u64, FaultKind> {
    Ok(match op {
        isa::BPF_ADD => dst.wrapping_add(src),
        isa::BPF_SUB => dst.wrapping_sub(src),
        isa::BPF_MUL => dst.wrapping_mul(src),
        isa::BPF_DIV => dst.checked_div(src).ok_or(FaultKind::DivisionByZero)?,
        isa::BPF_MOD => dst.checked_rem(src).ok_or(FaultKind::DivisionByZero)?,
        isa::BPF_OR => dst | src,
        isa::BPF_AND => dst & src,
        isa::BPF_XOR => dst ^ src,
        isa::BPF_LSH => dst.wrapping_shl(src as u32),
        isa::BPF_RSH => dst.wrapping_shr(src as u32),
        isa::BPF_ARSH => (dst as i64).wrapping_shr(src as u32) as u64,
        isa::BPF_NEG => (dst as i64).wrapping_neg() as u64,
        isa::BPF_MOV => src,
        _ => unreachable!("unsupported ALU64 op {op:#x}"),
    })
}

fn alu32(op: u8, dst: u32, src: u32) -> Result<u32, FaultKind> {
    Ok(match op {
        isa::BPF_ADD => dst.wrapping_add(src),
        isa::BPF_SUB => dst.wrapping_sub(src),
        isa::BPF_MUL => dst.wrapping_mul(src),
        isa::BPF_DIV => dst.checked_div(src).ok_or(FaultKind::DivisionByZero)?,
        isa::BPF_MOD => dst.checked_rem(src).ok_or(FaultKind::DivisionByZero)?,
        isa::BPF_OR => dst | src,
        isa::BPF_AND => dst & src,
        isa::BPF_XOR => dst ^ src,
        isa::BPF_LSH => dst.wrapping_shl(src),
        isa::BPF_RSH => dst.wrapping_shr(src),
        isa::BPF_ARSH => (dst as i32).wrapping_shr(src) as u32,
        isa::BPF_NEG => (dst as i32).wrapping_neg() as u32,
        isa::BPF_MOV => src,
        _ => unreachable!("unsupported ALU32 op {op:#x}"),
    })
}

fn byte_swap(value: u64, order: u8, width: i32) -> u64 {
    let to_be = order == isa::BPF_TO_BE;
    match width {
        16 if to_be => (value as u16).swap_bytes() as u64,
        16 => value as u16 as u64,
        32 if to_be => (value as u32).swap_bytes() as u64,
        32 => value as u32 as u64,
        _ if to_be => value.swap_bytes(),
        _ => value,
    }
}

fn condition64(op: u8, a: u64, b: u64) -> bool {
    match op {
        isa::BPF_JEQ => a == b,
        isa::BPF_JNE => a != b,
        isa::BPF_JGT => a > b,
        isa::BPF_JGE => a >= b,
        isa::BPF_JLT => a < b,
        isa::BPF_JLE => a <= b,
        isa::BPF_JSET => a & b != 0,
        isa::BPF_JSGT => (a as i64) > (b as i64),
        isa::BPF_JSGE => (a as i64) >= (b as i64),
        isa::BPF_JSLT => (a as i64) < (b as i64),
        isa::BPF_JSLE => (a as i64) <= (b as i64),
        _ => unreachable!("unsupported jump op {op:#x}"),
    }
}

fn condition32(op: u8, a: u32, b: u32) -> bool {
    match op {
        isa::BPF_JEQ => a == b,
        isa::BPF_JNE => a != b,
        isa::BPF_JGT => a > b,
        isa::BPF_JGE => a >= b,
        isa::BPF_JLT => a < b,
        isa::BPF_JLE => a <= b,
        isa::BPF_JSET => a & b != 0,
        isa::BPF_JSGT => (a as i32) > (b as i32),
        isa::BPF_JSGE => (a as i32) >= (b as i32),
        isa::BPF_JSLT => (a as i32) < (b as i32),
        isa::BPF_JSLE => (a as i32) <= (b as i32),
        _ => unreachable!("unsupported jump op {op:#x}"),
    }
}

/// Runs `program` to completion, fault, or fuel exhaustion.
///
/// The stack is zeroed first, `r1` receives `context_arg`.
pub fn execute(
    program: &VerifiedProgram,
    context_arg: u64,
    memory: &mut GuestMemory<'_>,
    bindings: &BindingTable,
    env: &mut HostEnv,
    fuel: u64,
) -> ExecOutcome {
    execute_observed(program, context_arg, memory, bindings, env, fuel, |_, _| {})
}

/// Like [`execute`], calling `observe` with the state and instruction before every step.
pub fn execute_observed<F>(
    program: &VerifiedProgram,
    context_arg: u64,
    memory: &mut GuestMemory<'_>,
    bindings: &BindingTable,
    env: &mut HostEnv,
    fuel: u64,
    mut observe: F,
) -> ExecOutcome
where
    F: FnMut(&VmState, &Instruction),
{
    memory.clear_stack();
    let mut state = VmState::new(context_arg, memory.stack_top(), fuel);
    let insns = program.instructions();
    let mut ctx = CallContext {
        memory,
        env,
        script_id: program.script_id(),
    };
    let status = loop {
        if state.fuel_remaining == 0 {
            break ExecStatus::FuelExhausted { pc: state.pc };
        }
        state.fuel_remaining -= 1;
        state.instructions_executed += 1;
        let pc = state.pc;
        observe(&state, &insns[pc]);
        match state.step(insns, &mut ctx, bindings) {
            Step::Continue => {}
            Step::Exit => break ExecStatus::Ok,
            Step::Fault(kind) => break ExecStatus::Fault { kind, pc },
        }
    };
    ExecOutcome {
        status,
        return_value: state.regs[0] as i64,
        instructions_executed: state.instructions_executed,
        host_calls: state.host_calls,
    }
}

/// Throughput figures for one or more completed runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Throughput {
    pub instructions_executed: u64,
    pub wall_time: Duration,
    pub instructions_per_second: f64,
}

/// Computes instructions per second. Zero instructions or zero time yield 0.
pub fn run_stats(instructions_executed: u64, wall_time: Duration) -> Throughput {
    let secs = wall_time.as_secs_f64();
    let instructions_per_second = if instructions_executed == 0 || secs == 0.0 {
        0.0
    } else {
        instructions_executed as f64 / secs
    };
    Throughput {
        instructions_executed,
        wall_time,
        instructions_per_second,
    }
}
