// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! `rbpf`: assemble, inspect, verify and run scripts, simulate a device, and
//! benchmark the interpreter.
//!
//! Exit codes: 0 success, 1 verification or validation failure, 2 runtime
//! fault, 64 usage error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rbpf_core::asm;
use rbpf_core::bench::{self, ReportFormat};
use rbpf_core::bindings::{self, BindingTable, HostEnv, SensorMeasurement};
use rbpf_core::compress::{self, CompressedScript, Params};
use rbpf_core::devicesim::{Device, EventType, Method, ScriptImage};
use rbpf_core::isa;
use rbpf_core::sandbox::{AccessFlags, GuestMemory};
use rbpf_core::store::{KeyValueStore, Namespace, StoreSnapshot, DEFAULT_CAPACITY};
use rbpf_core::verifier::{verify, VerifiedProgram};
use rbpf_core::vm::{self, ExecStatus, DEFAULT_FUEL};

const EXIT_INVALID: u8 = 1;
const EXIT_FAULT: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "rbpf", version, about = "Sandboxed eBPF script toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a text program into bytecode.
    Asm {
        input: PathBuf,
        /// Output file; defaults to the input with a `.bin` extension.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print the instructions of a bytecode file.
    Disasm { input: PathBuf },
    /// Run the pre-flight checks on a bytecode file.
    Verify { input: PathBuf },
    /// Execute a bytecode file.
    Run(RunArgs),
    /// Simulated device.
    Device {
        #[command(subcommand)]
        command: DeviceCommand,
    },
    /// Compress bytecode into the RBF1 container.
    Compress {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = Params::default().window_bits)]
        window_bits: u8,
        #[arg(long, default_value_t = Params::default().lookahead_bits)]
        lookahead_bits: u8,
    },
    /// Restore bytecode from an RBF1 container.
    Decompress {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Fletcher-32 benchmark on the bundled program.
    Bench {
        /// Input size in bytes.
        #[arg(long, default_value_t = bench::DEFAULT_INPUT_SIZE)]
        size: usize,
        #[arg(long, default_value_t = 1000)]
        iterations: u64,
        #[arg(long)]
        json: bool,
    },
    /// Inspect or edit a persisted key-value store file.
    Store {
        /// JSON store file; created on first write.
        #[arg(long)]
        file: PathBuf,
        #[command(subcommand)]
        command: StoreCommand,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Bytecode file (raw or RBF1-compressed).
    program: PathBuf,
    /// Extra region `label:size:r|w|rw[:hexfile]`; may be repeated.
    #[arg(long = "region", value_name = "SPEC")]
    regions: Vec<String>,
    /// Pass a read-only descriptor {u64 addr, u64 len} of this region in r1.
    #[arg(long, value_name = "LABEL")]
    arg: Option<String>,
    /// Raw value for r1; ignored when --arg is given.
    #[arg(long, default_value_t = 0)]
    r1: u64,
    #[arg(long, default_value_t = DEFAULT_FUEL)]
    fuel: u64,
    /// Script id selecting the local store namespace.
    #[arg(long, default_value_t = 1)]
    script_id: u32,
    /// Persist the key-value store in this JSON file.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Print a region's contents in hex after the run; may be repeated.
    #[arg(long = "dump", value_name = "LABEL")]
    dumps: Vec<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum DeviceCommand {
    /// Install applications, configure sensors and fire one trigger.
    Run(DeviceArgs),
}

#[derive(Args)]
struct DeviceArgs {
    /// `<path>=<prog.bin|prog.rbf>`; may be repeated.
    #[arg(long = "app", value_name = "PATH=FILE", required = true)]
    apps: Vec<String>,
    /// `<name>=<value>,<scale>`; sensors are numbered in the order given.
    #[arg(
        long = "sensor",
        value_name = "NAME=VALUE,SCALE",
        allow_hyphen_values = true
    )]
    sensors: Vec<String>,
    /// `GET <path>`.
    #[arg(long, num_args = 2, value_names = ["METHOD", "PATH"], required = true)]
    trigger: Vec<String>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FUEL)]
    fuel: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum StoreCommand {
    /// Print every entry.
    Dump,
    /// Read one key; prints `absent` when missing.
    Get { namespace: String, key: u32 },
    /// Write one key.
    Set {
        namespace: String,
        key: u32,
        #[arg(allow_hyphen_values = true)]
        value: i64,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Invalid(String),
    Fault(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Invalid(_) => EXIT_INVALID,
            Failure::Fault(_) => EXIT_FAULT,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Invalid(m) | Failure::Fault(m) => m,
        }
    }
}

type CliResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn invalid(msg: impl ToString) -> Failure {
    Failure::Invalid(msg.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            if !failure.message().is_empty() {
                eprintln!("rbpf: {}", failure.message());
            }
            ExitCode::from(failure.code())
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Asm { input, output } => cmd_asm(&input, output),
        Command::Disasm { input } => cmd_disasm(&input),
        Command::Verify { input } => cmd_verify(&input),
        Command::Run(args) => cmd_run(args),
        Command::Device {
            command: DeviceCommand::Run(args),
        } => cmd_device(args),
        Command::Compress {
            input,
            output,
            window_bits,
            lookahead_bits,
        } => cmd_compress(&input, &output, window_bits, lookahead_bits),
        Command::Decompress { input, output } => cmd_decompress(&input, &output),
        Command::Bench {
            size,
            iterations,
            json,
        } => cmd_bench(size, iterations, json),
        Command::Store { file, command } => cmd_store(&file, command),
    }
}

/// Writes to stdout, ignoring a closed pipe (e.g. `rbpf disasm x | head`).
fn emit(text: &str) {
    let _ = io::stdout().lock().write_all(text.as_bytes());
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write(path: &Path, data: &[u8]) -> CliResult {
    fs::write(path, data).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Reads a bytecode file, decompressing RBF1 containers.
fn read_bytecode(path: &Path) -> Result<Vec<u8>, Failure> {
    let bytes = read(path)?;
    if compress::is_compressed(&bytes) {
        compress::decompress_bytes(&bytes).map_err(|e| invalid(format!("{}: {e}", path.display())))
    } else {
        Ok(bytes)
    }
}

fn load_verified(
    path: &Path,
    script_id: u32,
    bindings: &BindingTable,
) -> Result<VerifiedProgram, Failure> {
    let bytes = read_bytecode(path)?;
    verify(&bytes, script_id, &bindings.ids())
        .map_err(|report| invalid(format!("{}: verification failed\n{report}", path.display())))
}

fn cmd_asm(input: &Path, output: Option<PathBuf>) -> CliResult {
    let source =
        fs::read_to_string(input).map_err(|e| invalid(format!("{}: {e}", input.display())))?;
    let code = asm::assemble(&source).map_err(|e| invalid(format!("{}: {e}", input.display())))?;
    let output = output.unwrap_or_else(|| input.with_extension("bin"));
    write(&output, &code)?;
    println!(
        "{}: {} bytes, {} slots",
        output.display(),
        code.len(),
        code.len() / isa::INSN_SIZE
    );
    Ok(())
}

fn cmd_disasm(input: &Path) -> CliResult {
    let code = read_bytecode(input)?;
    let insns =
        isa::decode_program(&code).map_err(|e| invalid(format!("{}: {e}", input.display())))?;
    let lines = isa::disassemble(&code).map_err(invalid)?;
    let mut out = String::new();
    let mut slot = 0;
    for line in lines {
        let insn = &insns[slot];
        match bindings::standard_name(insn.imm as u32).filter(|_| insn.opcode == isa::CALL) {
            Some(name) => out.push_str(&format!("{slot:5}: {line:<32} ; {name}\n")),
            None => out.push_str(&format!("{slot:5}: {line}\n")),
        }
        slot += if insn.is_wide_load() { 2 } else { 1 };
    }
    emit(&out);
    Ok(())
}

fn cmd_verify(input: &Path) -> CliResult {
    let program = load_verified(input, 0, &BindingTable::standard())?;
    println!("{}: ok, {} slots", input.display(), program.slot_count());
    Ok(())
}

struct RegionSpec {
    label: String,
    size: usize,
    flags: AccessFlags,
    init: Option<Vec<u8>>,
}

fn parse_region(spec: &str) -> Result<RegionSpec, Failure> {
    let parts: Vec<&str> = spec.splitn(4, ':').collect();
    if parts.len() < 3 || parts[0].is_empty() {
        return Err(usage(format!(
            "region `{spec}`: expected label:size:r|w|rw[:hexfile]"
        )));
    }
    let size: usize = parts[1]
        .parse()
        .map_err(|_| usage(format!("region `{spec}`: invalid size `{}`", parts[1])))?;
    let flags = match parts[2] {
        "r" => AccessFlags::READ,
        "w" => AccessFlags::WRITE,
        "rw" => AccessFlags::READ_WRITE,
        other => return Err(usage(format!("region `{spec}`: invalid access `{other}`"))),
    };
    let init = match parts.get(3) {
        Some(file) => {
            let text = fs::read_to_string(file).map_err(|e| invalid(format!("{file}: {e}")))?;
            let clean: String = text.split_whitespace().collect();
            let data = hex::decode(&clean).map_err(|e| invalid(format!("{file}: {e}")))?;
            if data.len() > size {
                return Err(invalid(format!(
                    "{file}: {} bytes do not fit in {size}",
                    data.len()
                )));
            }
            Some(data)
        }
        None => None,
    };
    Ok(RegionSpec {
        label: parts[0].to_string(),
        size,
        flags,
        init,
    })
}

fn load_store(path: Option<&Path>) -> Result<Arc<KeyValueStore>, Failure> {
    let Some(path) = path.filter(|p| p.exists()) else {
        return Ok(Arc::new(KeyValueStore::new(DEFAULT_CAPACITY)));
    };
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let snapshot: StoreSnapshot =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    KeyValueStore::from_snapshot(&snapshot)
        .map(Arc::new)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn save_store(path: Option<&Path>, store: &KeyValueStore) -> CliResult {
    if let Some(path) = path {
        let text = serde_json::to_string_pretty(&store.snapshot()).expect("snapshot serializes");
        write(path, text.as_bytes())?;
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> CliResult {
    let bindings = BindingTable::standard();
    let program = load_verified(&args.program, args.script_id, &bindings)?;
    let specs = args
        .regions
        .iter()
        .map(|s| parse_region(s))
        .collect::<Result<Vec<_>, _>>()?;
    for (i, spec) in specs.iter().enumerate() {
        if specs[..i].iter().any(|s| s.label == spec.label) {
            return Err(usage(format!("duplicate region label `{}`", spec.label)));
        }
    }
    for label in args.arg.iter().chain(&args.dumps) {
        if !specs.iter().any(|s| &s.label == label) {
            return Err(usage(format!("no region labelled `{label}`")));
        }
    }

    let mut buffers: Vec<Vec<u8>> = specs
        .iter()
        .map(|s| {
            let mut buf = vec![0u8; s.size];
            if let Some(init) = &s.init {
                buf[..init.len()].copy_from_slice(init);
            }
            buf
        })
        .collect();
    let mut descriptor = [0u8; 16];
    let store = load_store(args.store.as_deref())?;
    let mut env = HostEnv::new(Arc::clone(&store));

    let mut bases = Vec::new();
    let (outcome, elapsed) = {
        let mut memory = GuestMemory::new();
        for (spec, buf) in specs.iter().zip(buffers.iter_mut()) {
            let base = memory
                .map_next(spec.label.clone(), spec.flags, buf)
                .map_err(|e| usage(e.to_string()))?;
            bases.push(base);
        }
        let r1 = match &args.arg {
            Some(label) => {
                let i = specs
                    .iter()
                    .position(|s| &s.label == label)
                    .expect("checked above");
                descriptor[..8].copy_from_slice(&bases[i].to_le_bytes());
                descriptor[8..].copy_from_slice(&(specs[i].size as u64).to_le_bytes());
                memory
                    .map_next("arg", AccessFlags::READ, &mut descriptor)
                    .map_err(|e| usage(e.to_string()))?
            }
            None => args.r1,
        };
        let start = Instant::now();
        let outcome = vm::execute(&program, r1, &mut memory, &bindings, &mut env, args.fuel);
        (outcome, start.elapsed())
    };
    save_store(args.store.as_deref(), &store)?;

    let dumps: Vec<(String, String)> = args
        .dumps
        .iter()
        .map(|label| {
            let i = specs
                .iter()
                .position(|s| &s.label == label)
                .expect("checked above");
            (label.clone(), hex::encode(&buffers[i]))
        })
        .collect();
    let micros = elapsed.as_secs_f64() * 1e6;
    if args.json {
        let regions: Vec<_> = specs
            .iter()
            .zip(&bases)
            .map(|(s, b)| json!({"label": s.label, "base": b, "size": s.size}))
            .collect();
        let dumps: serde_json::Map<_, _> = dumps.into_iter().map(|(l, h)| (l, json!(h))).collect();
        let value = json!({
            "r0": outcome.return_value,
            "status": outcome.status.to_string(),
            "outcome": outcome,
            "time_us": micros,
            "regions": regions,
            "dumps": dumps,
        });
        println!("{}", serde_json::to_string_pretty(&value).expect("json"));
    } else {
        println!(
            "r0={} status={} insns={} host_calls={} time={:.1}us",
            outcome.return_value,
            outcome.status,
            outcome.instructions_executed,
            outcome.host_calls,
            micros
        );
        if let ExecStatus::Fault { kind, .. } = &outcome.status {
            println!("fault: {kind}");
        }
        for (label, hex) in dumps {
            println!("{label}: {hex}");
        }
    }
    // The status line above already explains a fault.
    match outcome.status {
        ExecStatus::Ok => Ok(()),
        _ => Err(Failure::Fault(String::new())),
    }
}

fn parse_sensor(spec: &str) -> Result<(String, SensorMeasurement), Failure> {
    let bad = || usage(format!("sensor `{spec}`: expected <name>=<value>,<scale>"));
    let (name, rest) = spec.split_once('=').ok_or_else(bad)?;
    let (value, scale) = rest.split_once(',').ok_or_else(bad)?;
    let value: i16 = value.trim().parse().map_err(|_| bad())?;
    let scale: i8 = scale.trim().parse().map_err(|_| bad())?;
    Ok((name.to_string(), SensorMeasurement::new(value, scale)))
}

fn printable(payload: &[u8]) -> String {
    payload
        .iter()
        .map(|&b| {
            if b.is_ascii_graphic() || b == b' ' {
                b as char
            } else {
                '.'
            }
        })
        .collect()
}

fn cmd_device(args: DeviceArgs) -> CliResult {
    let store = load_store(args.store.as_deref())?;
    let mut device = Device::new(Arc::clone(&store));
    device.fuel = args.fuel;
    for spec in &args.sensors {
        let (name, reading) = parse_sensor(spec)?;
        device.add_sensor(name, reading);
    }
    for app in &args.apps {
        let (path, file) = app
            .split_once('=')
            .ok_or_else(|| usage(format!("app `{app}`: expected <path>=<file>")))?;
        let bytes = read(Path::new(file))?;
        let image = ScriptImage::detect(&bytes).map_err(|e| invalid(format!("{file}: {e}")))?;
        device
            .install(EventType::coap(path), image)
            .map_err(|e| invalid(format!("{file}: {e}")))?;
    }
    let (method, path) = (&args.trigger[0], &args.trigger[1]);
    if !method.eq_ignore_ascii_case("GET") {
        return Err(usage(format!("unsupported method `{method}`, only GET")));
    }
    let response = device
        .trigger_coap(path, Method::Get)
        .map_err(|e| invalid(e.to_string()))?;
    save_store(args.store.as_deref(), &store)?;

    let code = response.code;
    if args.json {
        let value = json!({
            "code": format!("{}.{:02}", code >> 5, code & 0x1f),
            "code_raw": code,
            "payload_hex": hex::encode(&response.payload),
            "payload_text": String::from_utf8_lossy(&response.payload),
            "r0": response.outcome.return_value,
            "status": response.outcome.status.to_string(),
            "outcome": response.outcome,
        });
        println!("{}", serde_json::to_string_pretty(&value).expect("json"));
    } else {
        println!("code={}.{:02} ({code:#04x})", code >> 5, code & 0x1f);
        println!("payload_hex={}", hex::encode(&response.payload));
        println!("payload_text={}", printable(&response.payload));
        println!(
            "r0={} status={} insns={} host_calls={}",
            response.outcome.return_value,
            response.outcome.status,
            response.outcome.instructions_executed,
            response.outcome.host_calls
        );
    }
    match response.outcome.status {
        ExecStatus::Ok => Ok(()),
        _ => Err(Failure::Fault(String::new())),
    }
}

fn cmd_compress(input: &Path, output: &Path, window_bits: u8, lookahead_bits: u8) -> CliResult {
    let params = Params::new(window_bits, lookahead_bits).map_err(|e| usage(e.to_string()))?;
    let data = read(input)?;
    let packed = compress::compress(&data, params).map_err(invalid)?;
    let bytes = packed.to_bytes();
    write(output, &bytes)?;
    println!(
        "{} -> {}: {} -> {} bytes ({:.1}% smaller)",
        input.display(),
        output.display(),
        data.len(),
        bytes.len(),
        100.0 * (1.0 - bytes.len() as f64 / data.len() as f64)
    );
    Ok(())
}

fn cmd_decompress(input: &Path, output: &Path) -> CliResult {
    let bytes = read(input)?;
    let script = CompressedScript::from_bytes(&bytes)
        .map_err(|e| invalid(format!("{}: {e}", input.display())))?;
    let data =
        compress::decompress(&script).map_err(|e| invalid(format!("{}: {e}", input.display())))?;
    write(output, &data)?;
    println!(
        "{} -> {}: {} bytes",
        input.display(),
        output.display(),
        data.len()
    );
    Ok(())
}

fn cmd_bench(size: usize, iterations: u64, json: bool) -> CliResult {
    let report = match bench::bench_fletcher32(size, iterations) {
        Ok(report) => report,
        Err(e @ (bench::BenchError::InputTooSmall(_) | bench::BenchError::NoIterations)) => {
            return Err(usage(e.to_string()))
        }
        Err(e @ bench::BenchError::Execution(_)) => return Err(Failure::Fault(e.to_string())),
        Err(e) => return Err(invalid(e)),
    };
    if json {
        println!("{}", bench::report(&[report], ReportFormat::Json));
    } else {
        print!("{}", bench::report(&[report], ReportFormat::Text));
        for line in bench::reference_lines() {
            println!("{line}");
        }
    }
    Ok(())
}

fn cmd_store(file: &Path, command: StoreCommand) -> CliResult {
    let store = load_store(Some(file))?;
    let parse_ns = |s: &str| s.parse::<Namespace>().map_err(|e| usage(e.to_string()));
    match command {
        StoreCommand::Dump => {
            let out: String = store
                .dump()
                .into_iter()
                .map(|(ns, key, value)| format!("{ns}\t{key}\t{value}\n"))
                .collect();
            emit(&out);
        }
        StoreCommand::Get { namespace, key } => {
            let lookup = store.get(parse_ns(&namespace)?, key);
            if lookup.present {
                println!("{}", lookup.value);
            } else {
                println!("absent");
            }
        }
        StoreCommand::Set {
            namespace,
            key,
            value,
        } => {
            store
                .put(parse_ns(&namespace)?, key, value)
                .map_err(invalid)?;
            save_store(Some(file), &store)?;
        }
    }
    Ok(())
}
