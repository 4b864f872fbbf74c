// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Fletcher-32 benchmark harness and its host-side reference checksum.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{self, AsmError};
use crate::bindings::{BindingTable, HostEnv};
use crate::compress::{self, Params};
use crate::programs;
use crate::sandbox::{AccessFlags, GuestMemory, PolicyError};
use crate::verifier::{verify, VerifiedProgram, VerifierReport};
use crate::vm::{self, ExecOutcome, ExecStatus};

/// Seed of the ChaCha8 generator that fills the benchmark input.
pub const BENCH_SEED: u64 = 361;
/// Default benchmark input length in bytes.
pub const DEFAULT_INPUT_SIZE: usize = 361;
/// Fuel per benchmark run; far above what the bundled program needs.
pub const BENCH_FUEL: u64 = 10_000_000;

/// Published figures for the same workload on a Cortex-M4 class board.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceTarget {
    pub target: &'static str,
    pub code_size: usize,
    pub run_time_us: u64,
}

pub const REFERENCE_TARGETS: [ReferenceTarget; 2] = [
    ReferenceTarget {
        target: "native C (Cortex-M4)",
        code_size: 74,
        run_time_us: 27,
    },
    ReferenceTarget {
        target: "rBPF interpreted (Cortex-M4)",
        code_size: 456,
        run_time_us: 1923,
    },
];

/// Fletcher-32: 16-bit little-endian words, odd tail zero-padded, both sums
/// start at 0 and are reduced modulo 65535. Returns `(sum2 << 16) | sum1`.
pub fn fletcher32_reference(data: &[u8]) -> u32 {
    let mut sum1: u32 = 0;
    let mut sum2: u32 = 0;
    for chunk in data.chunks(2) {
        let word = u16::from_le_bytes([chunk[0], chunk.get(1).copied().unwrap_or(0)]);
        sum1 = (sum1 + word as u32) % 65535;
        sum2 = (sum2 + sum1) % 65535;
    }
    (sum2 << 16) | sum1
}

/// Deterministic benchmark input of `size` bytes.
pub fn bench_input(size: usize) -> Vec<u8> {
    let mut buf = vec![0u8; size];
    ChaCha8Rng::seed_from_u64(BENCH_SEED).fill_bytes(&mut buf);
    buf
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("benchmark input must be at least 2 bytes, got {0}")]
    InputTooSmall(usize),
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error("checksum mismatch: vm {vm:#010x}, reference {reference:#010x}")]
    ChecksumMismatch { vm: u32, reference: u32 },
    #[error("benchmark program did not complete: {0}")]
    Execution(ExecStatus),
    #[error("bundled program failed to assemble: {0}")]
    Assemble(#[from] AsmError),
    #[error("bundled program failed verification: {0}")]
    Verify(#[from] VerifierReport),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub workload: String,
    pub bytecode_size: usize,
    pub compressed_size: usize,
    pub input_size: usize,
    pub iterations: u64,
    pub instructions_executed: u64,
    pub wall_time_us: f64,
    pub time_per_run_us: f64,
    pub instructions_per_second: f64,
    pub checksum: u32,
}

/// Runs `program` with `r1` pointing to a read-only descriptor `{addr, len}` of `data`.
pub fn run_on_buffer(
    program: &VerifiedProgram,
    data: &mut [u8],
    flags: AccessFlags,
    bindings: &BindingTable,
    env: &mut HostEnv,
    fuel: u64,
) -> Result<ExecOutcome, PolicyError> {
    let len = data.len() as u64;
    let mut descriptor = [0u8; 16];
    let mut memory = GuestMemory::new();
    let addr = memory.map_next("input", flags, data)?;
    descriptor[..8].copy_from_slice(&addr.to_le_bytes());
    descriptor[8..].copy_from_slice(&len.to_le_bytes());
    let desc_addr = memory.map_next("descriptor", AccessFlags::READ, &mut descriptor)?;
    Ok(vm::execute(
        program,
        desc_addr,
        &mut memory,
        bindings,
        env,
        fuel,
    ))
}

/// Bundled Fletcher-32 program, assembled and verified.
pub fn fletcher32_program() -> Result<VerifiedProgram, BenchError> {
    let code = asm::assemble(programs::FLETCHER32)?;
    Ok(verify(&code, 0, &BindingTable::standard().ids())?)
}

/// Runs the bundled Fletcher-32 program `iterations` times over the seeded input.
///
/// Every run is checked against [`fletcher32_reference`]; a mismatch aborts
/// before any timing is reported.
pub fn bench_fletcher32(size: usize, iterations: u64) -> Result<BenchReport, BenchError> {
    if size < 2 {
        return Err(BenchError::InputTooSmall(size));
    }
    if iterations == 0 {
        return Err(BenchError::NoIterations);
    }
    let program = fletcher32_program()?;
    let bytecode = program.to_bytes();
    let compressed_size = compress::compress(&bytecode, Params::default())
        .map(|c| c.encoded_len())
        .unwrap_or(bytecode.len());
    let mut input = bench_input(size);
    let reference = fletcher32_reference(&input);
    let bindings = BindingTable::standard();
    let mut env = HostEnv::default();

    let mut instructions = 0u64;
    let mut elapsed = Duration::ZERO;
    for _ in 0..iterations {
        let start = Instant::now();
        let outcome = run_on_buffer(
            &program,
            &mut input,
            AccessFlags::READ,
            &bindings,
            &mut env,
            BENCH_FUEL,
        )?;
        elapsed += start.elapsed();
        if !outcome.is_ok() {
            return Err(BenchError::Execution(outcome.status));
        }
        let vm = outcome.return_value as u32;
        if vm != reference {
            return Err(BenchError::ChecksumMismatch { vm, reference });
        }
        instructions += outcome.instructions_executed;
    }

    let stats = vm::run_stats(instructions, elapsed);
    let wall_time_us = elapsed.as_secs_f64() * 1e6;
    Ok(BenchReport {
        workload: "fletcher32".to_string(),
        bytecode_size: bytecode.len(),
        compressed_size,
        input_size: size,
        iterations,
        instructions_executed: instructions,
        wall_time_us,
        time_per_run_us: wall_time_us / iterations as f64,
        instructions_per_second: stats.instructions_per_second,
        checksum: reference,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

const COLUMNS: [&str; 8] = [
    "workload",
    "size_b",
    "compressed_b",
    "input_b",
    "iterations",
    "insns",
    "us_per_run",
    "insns_per_s",
];

/// Renders reports as a fixed-column table or a JSON array of [`BenchReport`].
///
/// The text form appends the reference figures for context.
pub fn report(reports: &[BenchReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(reports).expect("reports serialize to JSON")
        }
        ReportFormat::Text => {
            let mut out = String::new();
            let header: Vec<String> = COLUMNS.iter().map(|c| format!("{c:>14}")).collect();
            let _ = writeln!(out, "{}", header.join(""));
            for r in reports {
                let _ = writeln!(
                    out,
                    "{:>14}{:>14}{:>14}{:>14}{:>14}{:>14}{:>14.2}{:>14.0}",
                    r.workload,
                    r.bytecode_size,
                    r.compressed_size,
                    r.input_size,
                    r.iterations,
                    r.instructions_executed,
                    r.time_per_run_us,
                    r.instructions_per_second,
                );
            }
            out
        }
    }
}

/// The reference figures as text lines.
pub fn reference_lines() -> Vec<String> {
    REFERENCE_TARGETS
        .iter()
        .map(|t| {
            format!(
                "reference {}: {} B, {} us",
                t.target, t.code_size, t.run_time_us
            )
        })
        .collect()
}
