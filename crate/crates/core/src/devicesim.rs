// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! A simulated device: application store, sensor registry and event triggers.
//!
//! A CoAP trigger maps two regions besides the stack: the PDU buffer
//! (read-write, [`DEFAULT_PDU_SIZE`] bytes) and a read-only context block
//! `{u64 pdu_base, u64 pdu_len}` whose address is passed in `r1`.
//!
//! The script's return value decides the response:
//!
//! * `r0 > 0`: total response length (header + payload); the payload is the
//!   PDU bytes between the header and `r0`.
//! * `r0 == 0`: header-only response.
//! * `r0 < 0`: error response with an empty payload. `-r0` is used as the code
//!   when it is a CoAP error class (4.xx or 5.xx), otherwise 5.00.
//!
//! A fault or fuel exhaustion also yields a 5.00 response with empty payload.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bindings::{
    BindingTable, CoapInvocationContext, CoapStage, HostEnv, SensorMeasurement,
    COAP_CODE_INTERNAL_SERVER_ERROR, COAP_CONTEXT_SIZE,
};
use crate::compress::{self, CompressedScript, FormatError};
use crate::sandbox::{AccessFlags, GuestMemory, PolicyError};
use crate::store::KeyValueStore;
use crate::verifier::{verify, VerifiedProgram, VerifierReport};
use crate::vm::{self, ExecOutcome, ExecStatus, DEFAULT_FUEL};

/// PDU buffer size handed to CoAP handlers.
pub const DEFAULT_PDU_SIZE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    CoapRequest,
    Timer,
    PacketHook,
}

/// Key of an application-store slot, e.g. `(CoapRequest, "/sensor")`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventType {
    pub kind: EventKind,
    pub selector: String,
}

impl EventType {
    pub fn new(kind: EventKind, selector: impl Into<String>) -> Self {
        EventType {
            kind,
            selector: selector.into(),
        }
    }

    pub fn coap(path: impl Into<String>) -> Self {
        EventType::new(EventKind::CoapRequest, path)
    }

    pub fn timer(name: impl Into<String>) -> Self {
        EventType::new(EventKind::Timer, name)
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}:{}", self.kind, self.selector)
    }
}

/// Script image accepted by [`ApplicationStore::install`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptImage {
    Raw(Vec<u8>),
    Compressed(CompressedScript),
}

impl ScriptImage {
    /// Treats bytes starting with the container magic as compressed.
    pub fn detect(bytes: &[u8]) -> Result<Self, FormatError> {
        if compress::is_compressed(bytes) {
            Ok(ScriptImage::Compressed(CompressedScript::from_bytes(
                bytes,
            )?))
        } else {
            Ok(ScriptImage::Raw(bytes.to_vec()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstallError {
    #[error("script rejected by the verifier:\n{0}")]
    Rejected(VerifierReport),
    #[error("compressed script is malformed: {0}")]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TriggerError {
    #[error("no application installed for {0}")]
    NoApplicationInstalled(EventType),
    #[error("cannot map trigger memory: {0}")]
    Memory(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("sensor index {index} out of range ({count} sensors)")]
pub struct IndexError {
    pub index: usize,
    pub count: usize,
}

/// Verified scripts keyed by event. Script ids are assigned per slot on first
/// install and kept when the slot's script is replaced, so a replacement keeps
/// its local store namespace.
#[derive(Debug, Default)]
pub struct ApplicationStore {
    slots: BTreeMap<EventType, VerifiedProgram>,
    ids: BTreeMap<EventType, u32>,
}

impl ApplicationStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Decompresses if needed, verifies and stores. Returns the slot's script id.
    pub fn install(
        &mut self,
        event: EventType,
        image: ScriptImage,
        bindings: &BindingTable,
    ) -> Result<u32, InstallError> {
        let bytes = match image {
            ScriptImage::Raw(bytes) => bytes,
            ScriptImage::Compressed(script) => compress::decompress(&script)?,
        };
        let next = self.ids.len() as u32 + 1;
        let id = self.ids.get(&event).copied().unwrap_or(next);
        let program = verify(&bytes, id, &bindings.ids()).map_err(InstallError::Rejected)?;
        self.ids.insert(event.clone(), id);
        self.slots.insert(event, program);
        Ok(id)
    }

    pub fn get(&self, event: &EventType) -> Option<&VerifiedProgram> {
        self.slots.get(event)
    }

    pub fn remove(&mut self, event: &EventType) -> Option<VerifiedProgram> {
        self.slots.remove(event)
    }

    pub fn events(&self) -> impl Iterator<Item = &EventType> {
        self.slots.keys()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulatedSensor {
    pub name: String,
    pub reading: SensorMeasurement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CoapResponse {
    pub code: u8,
    pub payload: Vec<u8>,
    pub outcome: ExecOutcome,
}

#[derive(Debug)]
pub struct Device {
    apps: ApplicationStore,
    sensors: Vec<SimulatedSensor>,
    store: Arc<KeyValueStore>,
    bindings: BindingTable,
    pub pdu_size: usize,
    pub fuel: u64,
}

impl Default for Device {
    fn default() -> Self {
        Device::new(Arc::new(KeyValueStore::default()))
    }
}

impl Device {
    /// Device with the standard bindings, no sensors and the given store.
    pub fn new(store: Arc<KeyValueStore>) -> Self {
        Device {
            apps: ApplicationStore::new(),
            sensors: Vec::new(),
            store,
            bindings: BindingTable::standard(),
            pdu_size: DEFAULT_PDU_SIZE,
            fuel: DEFAULT_FUEL,
        }
    }

    pub fn store(&self) -> &Arc<KeyValueStore> {
        &self.store
    }

    pub fn apps(&self) -> &ApplicationStore {
        &self.apps
    }

    pub fn bindings(&self) -> &BindingTable {
        &self.bindings
    }

    /// Registers a sensor and returns its index. The script sees it as `index + 1`.
    pub fn add_sensor(&mut self, name: impl Into<String>, reading: SensorMeasurement) -> usize {
        self.sensors.push(SimulatedSensor {
            name: name.into(),
            reading,
        });
        self.sensors.len() - 1
    }

    pub fn sensors(&self) -> &[SimulatedSensor] {
        &self.sensors
    }

    pub fn set_sensor(
        &mut self,
        index: usize,
        reading: SensorMeasurement,
    ) -> Result<(), IndexError> {
        let count = self.sensors.len();
        let sensor = self
            .sensors
            .get_mut(index)
            .ok_or(IndexError { index, count })?;
        sensor.reading = reading;
        Ok(())
    }

    pub fn install(&mut self, event: EventType, image: ScriptImage) -> Result<u32, InstallError> {
        self.apps.install(event, image, &self.bindings)
    }

    fn host_env(&self) -> HostEnv {
        let mut env = HostEnv::new(Arc::clone(&self.store));
        env.sensors = self.sensors.iter().map(|s| s.reading).collect();
        env
    }

    /// Runs the handler installed for `path` and assembles its response.
    pub fn trigger_coap(
        &mut self,
        path: &str,
        method: Method,
    ) -> Result<CoapResponse, TriggerError> {
        let Method::Get = method;
        let event = EventType::coap(path);
        let program = self
            .apps
            .get(&event)
            .ok_or_else(|| TriggerError::NoApplicationInstalled(event.clone()))?;

        let mut pdu = vec![0u8; self.pdu_size];
        let pdu_len = pdu.len() as u64;
        let mut block = [0u8; COAP_CONTEXT_SIZE];
        let mut memory = GuestMemory::new();
        let pdu_base = memory.map_next("pdu", AccessFlags::READ_WRITE, &mut pdu)?;
        let mut coap = CoapInvocationContext::new(0, pdu_base, pdu_len);
        block.copy_from_slice(&coap.block());
        coap.ctx_addr = memory.map_next("coap-context", AccessFlags::READ, &mut block)?;

        let ctx_addr = coap.ctx_addr;
        let mut env = self.host_env();
        env.coap = Some(coap);
        let outcome = vm::execute(
            program,
            ctx_addr,
            &mut memory,
            &self.bindings,
            &mut env,
            self.fuel,
        );
        drop(memory);
        let state = env.coap.expect("context stays installed for the whole run");

        let error = |outcome| CoapResponse {
            code: COAP_CODE_INTERNAL_SERVER_ERROR,
            payload: Vec::new(),
            outcome,
        };
        if outcome.status != ExecStatus::Ok {
            return Ok(error(outcome));
        }
        let r0 = outcome.return_value;
        if r0 < 0 {
            let code = r0.unsigned_abs();
            let code = if (0x80..=0xff).contains(&code) {
                code as u8
            } else {
                COAP_CODE_INTERNAL_SERVER_ERROR
            };
            return Ok(CoapResponse {
                code,
                payload: Vec::new(),
                outcome,
            });
        }
        if state.stage == CoapStage::Idle || r0 as u64 > pdu_len {
            return Ok(error(outcome));
        }
        let start = state.payload_offset as usize;
        let end = (r0 as usize).max(start);
        let payload = if state.stage == CoapStage::Finished {
            pdu[start..end].to_vec()
        } else {
            Vec::new()
        };
        Ok(CoapResponse {
            code: state.response_code,
            payload,
            outcome,
        })
    }

    /// Runs the handler installed for a timer event with `r1 = 0`.
    pub fn trigger_timer(&mut self, name: &str) -> Result<ExecOutcome, TriggerError> {
        let event = EventType::timer(name);
        let program = self
            .apps
            .get(&event)
            .ok_or_else(|| TriggerError::NoApplicationInstalled(event.clone()))?;
        let mut memory = GuestMemory::new();
        let mut env = self.host_env();
        Ok(vm::execute(
            program,
            0,
            &mut memory,
            &self.bindings,
            &mut env,
            self.fuel,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;
    use crate::bindings::ERROR_COAP_INTERNAL_SERVER;
    use crate::compress::Params;
    use crate::programs;

    fn sensor_device() -> Device {
        let mut device = Device::default();
        let code = assemble(programs::SENSOR_COAP).unwrap();
        device
            .install(EventType::coap("/sensor"), ScriptImage::Raw(code))
            .unwrap();
        device
    }

    #[test]
    fn sensor_handler_response() {
        let mut device = sensor_device();
        device.add_sensor("temp", SensorMeasurement::new(1234, -2));
        let resp = device.trigger_coap("/sensor", Method::Get).unwrap();
        assert_eq!(resp.code, 0x45);
        assert_eq!(resp.payload, b"12.34");
        assert_eq!(resp.outcome.return_value, 8);
        assert!(resp.outcome.is_ok());
    }

    #[test]
    fn zero_reading_and_updates() {
        let mut device = sensor_device();
        let idx = device.add_sensor("temp", SensorMeasurement::new(1, 0));
        device
            .set_sensor(idx, SensorMeasurement::new(0, 0))
            .unwrap();
        let resp = device.trigger_coap("/sensor", Method::Get).unwrap();
        assert_eq!(resp.payload, b"0");
        device
            .set_sensor(idx, SensorMeasurement::new(-5, 1))
            .unwrap();
        let resp = device.trigger_coap("/sensor", Method::Get).unwrap();
        assert_eq!(resp.payload, b"-50");
        assert_eq!(
            device.set_sensor(3, SensorMeasurement::default()),
            Err(IndexError { index: 3, count: 1 })
        );
    }

    #[test]
    fn no_sensor_is_server_error() {
        let mut device = sensor_device();
        let resp = device.trigger_coap("/sensor", Method::Get).unwrap();
        assert_eq!(resp.outcome.return_value, ERROR_COAP_INTERNAL_SERVER);
        assert_eq!(resp.code, COAP_CODE_INTERNAL_SERVER_ERROR);
        assert!(resp.payload.is_empty());
    }

    #[test]
    fn missing_application() {
        let mut device = Device::default();
        assert!(matches!(
            device.trigger_coap("/nothing", Method::Get),
            Err(TriggerError::NoApplicationInstalled(_))
        ));
    }

    #[test]
    fn rejected_install_stores_nothing() {
        let mut device = Device::default();
        let code = assemble("ja +5\nexit").unwrap();
        let err = device
            .install(EventType::coap("/bad"), ScriptImage::Raw(code))
            .unwrap_err();
        assert!(matches!(err, InstallError::Rejected(_)));
        assert!(device.apps().get(&EventType::coap("/bad")).is_none());
    }

    #[test]
    fn compressed_install() {
        let mut device = Device::default();
        device.add_sensor("temp", SensorMeasurement::new(1234, -2));
        let code = assemble(programs::SENSOR_COAP).unwrap();
        let packed = compress::compress(&code, Params::default()).unwrap();
        let image = ScriptImage::detect(&packed.to_bytes()).unwrap();
        assert!(matches!(image, ScriptImage::Compressed(_)));
        device.install(EventType::coap("/sensor"), image).unwrap();
        let resp = device.trigger_coap("/sensor", Method::Get).unwrap();
        assert_eq!(resp.payload, b"12.34");
    }

    #[test]
    fn replacement_keeps_script_id() {
        let mut device = Device::default();
        let a = assemble(programs::COUNTER).unwrap();
        let first = device
            .install(EventType::timer("tick"), ScriptImage::Raw(a.clone()))
            .unwrap();
        let other = device
            .install(EventType::timer("tock"), ScriptImage::Raw(a.clone()))
            .unwrap();
        let again = device
            .install(EventType::timer("tick"), ScriptImage::Raw(a))
            .unwrap();
        assert_eq!(first, again);
        assert_ne!(first, other);
    }

    #[test]
    fn timer_counter() {
        let mut device = Device::default();
        let code = assemble(programs::COUNTER).unwrap();
        device
            .install(EventType::timer("tick"), ScriptImage::Raw(code))
            .unwrap();
        for n in 1..=3 {
            assert_eq!(device.trigger_timer("tick").unwrap().return_value, n);
        }
    }

    #[test]
    fn error_codes_from_return_value() {
        let mut device = Device::default();
        let code = assemble("mov r0, -0x84\nexit").unwrap();
        device
            .install(EventType::coap("/nf"), ScriptImage::Raw(code))
            .unwrap();
        assert_eq!(device.trigger_coap("/nf", Method::Get).unwrap().code, 0x84);
        let code = assemble("mov r0, -1\nexit").unwrap();
        device
            .install(EventType::coap("/e"), ScriptImage::Raw(code))
            .unwrap();
        assert_eq!(device.trigger_coap("/e", Method::Get).unwrap().code, 0xa0);
    }

    #[test]
    fn context_block_is_read_only() {
        let mut device = Device::default();
        let code = assemble("stdw [r1+0], 0\nmov r0, 0\nexit").unwrap();
        device
            .install(EventType::coap("/w"), ScriptImage::Raw(code))
            .unwrap();
        let resp = device.trigger_coap("/w", Method::Get).unwrap();
        assert_eq!(
            resp.outcome.status.to_string(),
            "fault:memory-access-denied@0"
        );
        assert_eq!(resp.code, COAP_CODE_INTERNAL_SERVER_ERROR);
    }
}
