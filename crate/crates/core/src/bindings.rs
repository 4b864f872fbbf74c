// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Host functions callable from scripts through `call <id>`.
//!
//! Arguments arrive in `r1`..`r5` and the result is written to `r0`. Host
//! functions reach script memory only through [`GuestMemory`], so the same
//! policy checks apply as for load and store instructions.
//!
//! The ids of the standard bindings are part of the script ABI and never change:
//!
//! | id | name                | arguments                 | result                          |
//! |----|---------------------|---------------------------|---------------------------------|
//! |  1 | `saul_reg_find_nth` | `n`                       | sensor handle, 0 if absent      |
//! |  2 | `saul_reg_read`     | `handle, dest`            | 0, or `-ENODEV`                 |
//! |  3 | `gcoap_resp_init`   | `ctx, code`               | 0, or negative                  |
//! |  4 | `coap_add_format`   | `ctx, format`             | 0, or negative                  |
//! |  5 | `coap_opt_finish`   | `ctx, flags`              | header length, or negative      |
//! |  6 | `coap_get_pdu`      | `ctx`                     | payload address, or negative    |
//! |  7 | `fmt_s16_dfp`       | `buf, value, scale`       | bytes written, or negative      |
//! |  8 | `store_local`       | `key, value`              | 0, or `-ENOSPC`                 |
//! |  9 | `fetch_local`       | `key, dest`               | 1 present, 0 absent             |
//! | 10 | `store_global`      | `key, value`              | 0, or `-ENOSPC`                 |
//! | 11 | `fetch_global`      | `key, dest`               | 1 present, 0 absent             |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::sandbox::{GuestMemory, MemoryFault};
use crate::store::{KeyValueStore, Namespace};

pub const SAUL_REG_FIND_NTH: u32 = 1;
pub const SAUL_REG_READ: u32 = 2;
pub const GCOAP_RESP_INIT: u32 = 3;
pub const COAP_ADD_FORMAT: u32 = 4;
pub const COAP_OPT_FINISH: u32 = 5;
pub const COAP_GET_PDU: u32 = 6;
pub const FMT_S16_DFP: u32 = 7;
pub const STORE_LOCAL: u32 = 8;
pub const FETCH_LOCAL: u32 = 9;
pub const STORE_GLOBAL: u32 = 10;
pub const FETCH_GLOBAL: u32 = 11;

// Negative return codes, errno-style.
pub const ENODEV: i64 = -19;
pub const EINVAL: i64 = -22;
pub const ENOSPC: i64 = -28;
pub const EPROTO: i64 = -71;
pub const ENOBUFS: i64 = -105;

/// CoAP response code 2.05 Content.
pub const COAP_CODE_CONTENT: u8 = 0x45;
/// CoAP response code 5.00 Internal Server Error.
pub const COAP_CODE_INTERNAL_SERVER_ERROR: u8 = 0xa0;
/// Value a script returns to request a 5.00 response.
pub const ERROR_COAP_INTERNAL_SERVER: i64 = -(COAP_CODE_INTERNAL_SERVER_ERROR as i64);
/// `coap_opt_finish` flag: a payload follows the options.
pub const COAP_OPT_FINISH_PAYLOAD: u64 = 0x1;
pub const COAP_PAYLOAD_MARKER: u8 = 0xff;

/// Sensor handles are this base plus the 1-based sensor index.
pub const SENSOR_HANDLE_BASE: u64 = 0x5a17_0000;
/// Size of the measurement slot written by `saul_reg_read`.
pub const MEASUREMENT_SIZE: usize = 8;
/// Largest absolute scale accepted by `fmt_s16_dfp`.
pub const MAX_DFP_SCALE: i64 = 16;

/// Size of the read-only CoAP context block passed in `r1`.
pub const COAP_CONTEXT_SIZE: usize = 16;

/// A sensor reading: `value × 10^scale`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SensorMeasurement {
    pub value: i16,
    pub scale: i8,
}

impl SensorMeasurement {
    pub fn new(value: i16, scale: i8) -> Self {
        SensorMeasurement { value, scale }
    }

    /// Layout in script memory: value (i16 LE) at 0, scale (i8) at 2, zero padding.
    pub fn to_bytes(self) -> [u8; MEASUREMENT_SIZE] {
        let mut out = [0u8; MEASUREMENT_SIZE];
        out[..2].copy_from_slice(&self.value.to_le_bytes());
        out[2] = self.scale as u8;
        out
    }
}

/// Progress of the response being assembled; the CoAP bindings must run in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoapStage {
    Idle,
    Initialized,
    Formatted,
    Finished,
}

/// Host-side state of one CoAP-triggered invocation.
///
/// The script receives the address of a read-only context block holding the PDU
/// base address (u64 at offset 0) and the PDU length (u64 at offset 8).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoapInvocationContext {
    pub ctx_addr: u64,
    pub pdu_base: u64,
    pub pdu_len: u64,
    pub stage: CoapStage,
    pub response_code: u8,
    pub header_len: u64,
    pub payload_offset: u64,
}

impl CoapInvocationContext {
    pub fn new(ctx_addr: u64, pdu_base: u64, pdu_len: u64) -> Self {
        CoapInvocationContext {
            ctx_addr,
            pdu_base,
            pdu_len,
            stage: CoapStage::Idle,
            response_code: 0,
            header_len: 0,
            payload_offset: 0,
        }
    }

    /// Contents of the context block as seen by the script.
    pub fn block(&self) -> [u8; COAP_CONTEXT_SIZE] {
        let mut out = [0u8; COAP_CONTEXT_SIZE];
        out[..8].copy_from_slice(&self.pdu_base.to_le_bytes());
        out[8..].copy_from_slice(&self.pdu_len.to_le_bytes());
        out
    }
}

/// OS facilities visible to host functions.
#[derive(Debug)]
pub struct HostEnv {
    pub sensors: Vec<SensorMeasurement>,
    pub store: Arc<KeyValueStore>,
    pub coap: Option<CoapInvocationContext>,
}

impl Default for HostEnv {
    fn default() -> Self {
        HostEnv::new(Arc::new(KeyValueStore::default()))
    }
}

impl HostEnv {
    pub fn new(store: Arc<KeyValueStore>) -> Self {
        HostEnv {
            sensors: Vec::new(),
            store,
            coap: None,
        }
    }
}

/// Everything a host function may touch during one call.
pub struct CallContext<'c, 'a> {
    pub memory: &'c mut GuestMemory<'a>,
    pub env: &'c mut HostEnv,
    /// Id of the running script, selecting its local store namespace.
    pub script_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HostError {
    /// The function touched script memory the policy does not allow.
    #[error(transparent)]
    Memory(#[from] MemoryFault),
    #[error("{0}")]
    Failed(String),
}

type Behavior = dyn Fn(&mut CallContext<'_, '_>, [u64; 5]) -> Result<u64, HostError> + Send + Sync;

#[derive(Clone)]
pub struct HostFunction {
    pub id: u32,
    pub name: String,
    pub arity: u8,
    behavior: Arc<Behavior>,
}

impl HostFunction {
    pub fn new<F>(id: u32, name: impl Into<String>, arity: u8, behavior: F) -> Self
    where
        F: Fn(&mut CallContext<'_, '_>, [u64; 5]) -> Result<u64, HostError> + Send + Sync + 'static,
    {
        assert!(arity <= 5, "host functions take at most five arguments");
        HostFunction {
            id,
            name: name.into(),
            arity,
            behavior: Arc::new(behavior),
        }
    }

    pub fn call(&self, ctx: &mut CallContext<'_, '_>, args: [u64; 5]) -> Result<u64, HostError> {
        (self.behavior)(ctx, args)
    }
}

impl fmt::Debug for HostFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HostFunction")
            .field("id", &self.id)
            .field("name", &self.name)
            .field("arity", &self.arity)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("binding id {0} is already registered")]
pub struct DuplicateIdError(pub u32);

#[derive(Debug, Clone, Default)]
pub struct BindingTable {
    entries: BTreeMap<u32, HostFunction>,
}

impl BindingTable {
    pub fn new() -> Self {
        BindingTable::default()
    }

    /// The eleven standard bindings.
    pub fn standard() -> Self {
        let mut table = BindingTable::new();
        for function in standard_functions() {
            table.register(function).expect("standard ids are unique");
        }
        table
    }

    pub fn register(&mut self, function: HostFunction) -> Result<(), DuplicateIdError> {
        if self.entries.contains_key(&function.id) {
            return Err(DuplicateIdError(function.id));
        }
        self.entries.insert(function.id, function);
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&HostFunction> {
        self.entries.get(&id)
    }

    pub fn ids(&self) -> BTreeSet<u32> {
        self.entries.keys().copied().collect()
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.entries.values().find(|f| f.name == name).map(|f| f.id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &HostFunction> {
        self.entries.values()
    }
}

/// Reference entry for one standard binding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BindingDoc {
    pub id: u32,
    pub name: &'static str,
    pub signature: &'static str,
    pub semantics: &'static str,
}

pub const STANDARD_BINDINGS: [BindingDoc; 11] = [
    BindingDoc {
        id: SAUL_REG_FIND_NTH,
        name: "saul_reg_find_nth",
        signature: "(n: u32) -> handle",
        semantics: "handle of the n-th sensor (1-based), 0 if there is none",
    },
    BindingDoc {
        id: SAUL_REG_READ,
        name: "saul_reg_read",
        signature: "(handle, dest: *measurement) -> i64",
        semantics: "writes value:i16 at dest+0 and scale:i8 at dest+2 (8-byte slot); 0 or -19 for a bad handle",
    },
    BindingDoc {
        id: GCOAP_RESP_INIT,
        name: "gcoap_resp_init",
        signature: "(ctx, code: u8) -> i64",
        semantics: "starts a response: pdu[0] = code, pdu[1] = 0; 0, -22 bad ctx/code, -105 pdu too small",
    },
    BindingDoc {
        id: COAP_ADD_FORMAT,
        name: "coap_add_format",
        signature: "(ctx, format: u8) -> i64",
        semantics: "pdu[1] = format; 0, or -71 when called before gcoap_resp_init",
    },
    BindingDoc {
        id: COAP_OPT_FINISH,
        name: "coap_opt_finish",
        signature: "(ctx, flags) -> header_len",
        semantics: "flag 0x1 writes the 0xff payload marker at pdu[2] and returns 3, else returns 2; -71 out of order",
    },
    BindingDoc {
        id: COAP_GET_PDU,
        name: "coap_get_pdu",
        signature: "(ctx) -> payload address",
        semantics: "address of the first payload byte (pdu base + header length); -71 before coap_opt_finish",
    },
    BindingDoc {
        id: FMT_S16_DFP,
        name: "fmt_s16_dfp",
        signature: "(buf, value: i16, scale: i32) -> len",
        semantics: "writes value * 10^scale as decimal text without exponent; -22 if |scale| > 16",
    },
    BindingDoc {
        id: STORE_LOCAL,
        name: "store_local",
        signature: "(key: u32, value: i64) -> i64",
        semantics: "stores into the running script's namespace; 0, or -28 when full",
    },
    BindingDoc {
        id: FETCH_LOCAL,
        name: "fetch_local",
        signature: "(key: u32, dest: *i64) -> i64",
        semantics: "writes the value (0 if absent) to dest; returns 1 if present, 0 if absent",
    },
    BindingDoc {
        id: STORE_GLOBAL,
        name: "store_global",
        signature: "(key: u32, value: i64) -> i64",
        semantics: "stores into the global namespace; 0, or -28 when full",
    },
    BindingDoc {
        id: FETCH_GLOBAL,
        name: "fetch_global",
        signature: "(key: u32, dest: *i64) -> i64",
        semantics: "writes the value (0 if absent) to dest; returns 1 if present, 0 if absent",
    },
];

/// Id of a standard binding by name.
pub fn standard_id(name: &str) -> Option<u32> {
    STANDARD_BINDINGS
        .iter()
        .find(|d| d.name == name)
        .map(|d| d.id)
}

/// Name of a standard binding by id.
pub fn standard_name(id: u32) -> Option<&'static str> {
    STANDARD_BINDINGS
        .iter()
        .find(|d| d.id == id)
        .map(|d| d.name)
}

/// Renders the `bindings.txt` reference table.
pub fn reference_table() -> String {
    let mut out = String::from("# id\tname\tsignature\tsemantics\n");
    for d in &STANDARD_BINDINGS {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            d.id, d.name, d.signature, d.semantics
        ));
    }
    out
}

fn ret(code: i64) -> Result<u64, HostError> {
    Ok(code as u64)
}

fn standard_functions() -> Vec<HostFunction> {
    vec![
        HostFunction::new(SAUL_REG_FIND_NTH, "saul_reg_find_nth", 1, |ctx, a| {
            Ok(saul_reg_find_nth(ctx.env, a[0]))
        }),
        HostFunction::new(SAUL_REG_READ, "saul_reg_read", 2, |ctx, a| {
            saul_reg_read(ctx, a[0], a[1])
        }),
        HostFunction::new(GCOAP_RESP_INIT, "gcoap_resp_init", 2, |ctx, a| {
            gcoap_resp_init(ctx, a[0], a[1])
        }),
        HostFunction::new(COAP_ADD_FORMAT, "coap_add_format", 2, |ctx, a| {
            coap_add_format(ctx, a[0], a[1])
        }),
        HostFunction::new(COAP_OPT_FINISH, "coap_opt_finish", 2, |ctx, a| {
            coap_opt_finish(ctx, a[0], a[1])
        }),
        HostFunction::new(COAP_GET_PDU, "coap_get_pdu", 1, |ctx, a| {
            coap_get_pdu(ctx, a[0])
        }),
        HostFunction::new(FMT_S16_DFP, "fmt_s16_dfp", 3, |ctx, a| {
            fmt_s16_dfp(ctx, a[0], a[1] as i16, a[2] as i64)
        }),
        HostFunction::new(STORE_LOCAL, "store_local", 2, |ctx, a| {
            let ns = Namespace::Local(ctx.script_id);
            store_value(ctx, ns, a[0], a[1])
        }),
        HostFunction::new(FETCH_LOCAL, "fetch_local", 2, |ctx, a| {
            let ns = Namespace::Local(ctx.script_id);
            fetch_value(ctx, ns, a[0], a[1])
        }),
        HostFunction::new(STORE_GLOBAL, "store_global", 2, |ctx, a| {
            store_value(ctx, Namespace::Global, a[0], a[1])
        }),
        HostFunction::new(FETCH_GLOBAL, "fetch_global", 2, |ctx, a| {
            fetch_value(ctx, Namespace::Global, a[0], a[1])
        }),
    ]
}

/// Handle of the `n`-th sensor, counting from 1; 0 when absent.
pub fn saul_reg_find_nth(env: &HostEnv, n: u64) -> u64 {
    if n == 0 || n > env.sensors.len() as u64 {
        return 0;
    }
    SENSOR_HANDLE_BASE + n
}

fn sensor_index(env: &HostEnv, handle: u64) -> Option<usize> {
    let n = handle.checked_sub(SENSOR_HANDLE_BASE)?;
    (n >= 1 && n <= env.sensors.len() as u64).then(|| n as usize - 1)
}

pub fn saul_reg_read(
    ctx: &mut CallContext<'_, '_>,
    handle: u64,
    dest: u64,
) -> Result<u64, HostError> {
    let Some(index) = sensor_index(ctx.env, handle) else {
        return ret(ENODEV);
    };
    let bytes = ctx.env.sensors[index].to_bytes();
    ctx.memory.write_bytes(dest, &bytes)?;
    ret(0)
}

/// Validates `ctx_addr` by reading the context block through the policy and
/// comparing it with the host-side state.
fn coap_state<'e>(
    ctx: &'e mut CallContext<'_, '_>,
    ctx_addr: u64,
) -> Result<Option<&'e mut CoapInvocationContext>, HostError> {
    let Some(state) = ctx.env.coap.as_ref() else {
        return Ok(None);
    };
    if state.ctx_addr != ctx_addr {
        return Ok(None);
    }
    let mut block = [0u8; COAP_CONTEXT_SIZE];
    ctx.memory.read_bytes(ctx_addr, &mut block)?;
    if block != state.block() {
        return Ok(None);
    }
    Ok(ctx.env.coap.as_mut())
}

pub fn gcoap_resp_init(
    ctx: &mut CallContext<'_, '_>,
    ctx_addr: u64,
    code: u64,
) -> Result<u64, HostError> {
    let Some(state) = coap_state(ctx, ctx_addr)? else {
        return ret(EINVAL);
    };
    if code > u8::MAX as u64 {
        return ret(EINVAL);
    }
    if state.pdu_len < 3 {
        return ret(ENOBUFS);
    }
    state.stage = CoapStage::Initialized;
    state.response_code = code as u8;
    state.header_len = 2;
    state.payload_offset = 2;
    let base = state.pdu_base;
    ctx.memory.write_bytes(base, &[code as u8, 0])?;
    ret(0)
}

pub fn coap_add_format(
    ctx: &mut CallContext<'_, '_>,
    ctx_addr: u64,
    format: u64,
) -> Result<u64, HostError> {
    let Some(state) = coap_state(ctx, ctx_addr)? else {
        return ret(EINVAL);
    };
    if state.stage != CoapStage::Initialized {
        return ret(EPROTO);
    }
    if format > u8::MAX as u64 {
        return ret(EINVAL);
    }
    state.stage = CoapStage::Formatted;
    let base = state.pdu_base;
    ctx.memory.write_bytes(base + 1, &[format as u8])?;
    ret(0)
}

pub fn coap_opt_finish(
    ctx: &mut CallContext<'_, '_>,
    ctx_addr: u64,
    flags: u64,
) -> Result<u64, HostError> {
    let Some(state) = coap_state(ctx, ctx_addr)? else {
        return ret(EINVAL);
    };
    if !matches!(state.stage, CoapStage::Initialized | CoapStage::Formatted) {
        return ret(EPROTO);
    }
    state.stage = CoapStage::Finished;
    let base = state.pdu_base;
    if flags & COAP_OPT_FINISH_PAYLOAD != 0 {
        state.header_len = 3;
        state.payload_offset = 3;
        ctx.memory.write_bytes(base + 2, &[COAP_PAYLOAD_MARKER])?;
    } else {
        state.header_len = 2;
        state.payload_offset = 2;
    }
    Ok(ctx.env.coap.as_ref().map_or(0, |s| s.header_len))
}

pub fn coap_get_pdu(ctx: &mut CallContext<'_, '_>, ctx_addr: u64) -> Result<u64, HostError> {
    let Some(state) = coap_state(ctx, ctx_addr)? else {
        return ret(EINVAL);
    };
    if state.stage != CoapStage::Finished {
        return ret(EPROTO);
    }
    Ok(state.pdu_base + state.payload_offset)
}

/// Decimal fixed-point text for `value × 10^scale`, e.g. `(1234, -2)` is `"12.34"`.
pub fn format_dfp(value: i16, scale: i64) -> String {
    let digits = value.unsigned_abs().to_string();
    let sign = if value < 0 { "-" } else { "" };
    if scale >= 0 {
        if value == 0 {
            return "0".to_string();
        }
        let zeros = "0".repeat(scale as usize);
        return format!("{sign}{digits}{zeros}");
    }
    let frac_len = scale.unsigned_abs() as usize;
    let padded = format!("{digits:0>width$}", width = frac_len + 1);
    let (int_part, frac_part) = padded.split_at(padded.len() - frac_len);
    format!("{sign}{int_part}.{frac_part}")
}

pub fn fmt_s16_dfp(
    ctx: &mut CallContext<'_, '_>,
    buf: u64,
    value: i16,
    scale: i64,
) -> Result<u64, HostError> {
    let scale = scale as i32 as i64;
    if scale.abs() > MAX_DFP_SCALE {
        return ret(EINVAL);
    }
    let text = format_dfp(value, scale);
    ctx.memory.write_bytes(buf, text.as_bytes())?;
    Ok(text.len() as u64)
}

fn store_value(
    ctx: &mut CallContext<'_, '_>,
    ns: Namespace,
    key: u64,
    value: u64,
) -> Result<u64, HostError> {
    match ctx.env.store.put(ns, key as u32, value as i64) {
        Ok(()) => ret(0),
        Err(_) => ret(ENOSPC),
    }
}

fn fetch_value(
    ctx: &mut CallContext<'_, '_>,
    ns: Namespace,
    key: u64,
    dest: u64,
) -> Result<u64, HostError> {
    let lookup = ctx.env.store.get(ns, key as u32);
    ctx.memory.write_bytes(dest, &lookup.value.to_le_bytes())?;
    Ok(lookup.present as u64)
}
