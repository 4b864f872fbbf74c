// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Sandboxed interpreter for eBPF-encoded scripts on small networked devices.
//!
//! Scripts are verified once when loaded ([`verifier::verify`]) and then run
//! by [`vm::execute`] against a [`sandbox::GuestMemory`] whose policy table is
//! consulted on every load and store. Host services are reached through the
//! numbered functions in [`bindings`]; [`devicesim`] ties everything into an
//! event-driven device with an application store.

pub mod asm;
pub mod bench;
pub mod bindings;
pub mod compress;
pub mod devicesim;
pub mod isa;
pub mod programs;
pub mod sandbox;
pub mod store;
pub mod verifier;
pub mod vm;

pub use asm::{assemble, AsmError};
pub use bindings::{BindingTable, HostEnv, SensorMeasurement};
pub use compress::{compress, decompress, CompressedScript, Params};
pub use devicesim::{Device, EventType, Method, ScriptImage};
pub use isa::{decode, disassemble, encode, Instruction};
pub use sandbox::{AccessFlags, GuestMemory, MemoryRegion, PolicyTable};
pub use store::{KeyValueStore, Namespace};
pub use verifier::{verify, VerifiedProgram, VerifierReport};
pub use vm::{execute, ExecOutcome, ExecStatus, FaultKind, DEFAULT_FUEL};

/// Reference table of the standard bindings, as shipped in `bindings.txt`.
pub const BINDINGS_TXT: &str = include_str!("../bindings.txt");
