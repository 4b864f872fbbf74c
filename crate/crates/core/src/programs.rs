// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Bundled example programs, shipped as assembly source.
//!
//! Buffer-processing programs take `r1` pointing to a descriptor
//! `{u64 addr, u64 len}`; CoAP handlers take `r1` pointing to the context block.

use crate::asm::{self, AsmError};

pub const FLETCHER32: &str = include_str!("../programs/fletcher32.asm");
pub const SENSOR_COAP: &str = include_str!("../programs/sensor_coap.asm");
pub const COUNTER: &str = include_str!("../programs/counter.asm");
pub const GLOBAL_COUNTER: &str = include_str!("../programs/global_counter.asm");
pub const SUM_BYTES: &str = include_str!("../programs/sum_bytes.asm");
pub const BSWAP_HEADER: &str = include_str!("../programs/bswap_header.asm");

/// Every bundled program as `(name, source)`.
pub const CORPUS: [(&str, &str); 6] = [
    ("fletcher32", FLETCHER32),
    ("sensor_coap", SENSOR_COAP),
    ("counter", COUNTER),
    ("global_counter", GLOBAL_COUNTER),
    ("sum_bytes", SUM_BYTES),
    ("bswap_header", BSWAP_HEADER),
];

/// Assembles a bundled program by name.
pub fn bytecode(name: &str) -> Option<Result<Vec<u8>, AsmError>> {
    CORPUS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, src)| asm::assemble(src))
}

/// Assembled bytecode of the whole corpus. Panics only if a bundled source is broken.
pub fn corpus_bytecode() -> Vec<(&'static str, Vec<u8>)> {
    CORPUS
        .iter()
        .map(|(name, src)| {
            let code = asm::assemble(src)
                .unwrap_or_else(|e| panic!("bundled program {name} does not assemble: {e}"));
            (*name, code)
        })
        .collect()
}
