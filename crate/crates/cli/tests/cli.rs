// SPDX-License-Identifier: (Apache-2.0 OR MIT)

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const PROGRAMS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/programs");

fn rbpf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rbpf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn program(name: &str) -> String {
    format!("{PROGRAMS}/{name}.asm")
}

fn assemble(dir: &Path, name: &str) -> PathBuf {
    let out = dir.join(format!("{name}.bin"));
    let res = rbpf(&["asm", &program(name), "-o", out.to_str().unwrap()]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn asm_disasm_verify() {
    let dir = TempDir::new().unwrap();
    let bin = assemble(dir.path(), "sensor_coap");
    assert_eq!(fs::read(&bin).unwrap().len(), 280);

    let out = rbpf(&["disasm", s(&bin)]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("call 1"));
    assert!(text.contains("; saul_reg_find_nth"));

    // The annotated listing assembles back to the same bytes.
    let listing: String = text
        .lines()
        .map(|l| l.split_once(": ").unwrap().1.to_string() + "\n")
        .collect();
    let src = dir.path().join("again.asm");
    fs::write(&src, listing).unwrap();
    let again = dir.path().join("again.bin");
    assert!(rbpf(&["asm", s(&src), "-o", s(&again)]).status.success());
    assert_eq!(fs::read(&again).unwrap(), fs::read(&bin).unwrap());

    let out = rbpf(&["verify", s(&bin)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("ok, 35 slots"));
}

#[test]
fn verify_failure_exits_one() {
    let dir = TempDir::new().unwrap();
    let src = dir.path().join("bad.asm");
    fs::write(&src, "ja +3\nmov r10, 1\nexit\n").unwrap();
    let bin = dir.path().join("bad.bin");
    assert!(rbpf(&["asm", s(&src), "-o", s(&bin)]).status.success());
    let out = rbpf(&["verify", s(&bin)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("JumpOutOfBounds"), "{err}");
    assert!(err.contains("ReadOnlyRegisterWrite"), "{err}");
}

#[test]
fn asm_errors_exit_one_with_line() {
    let dir = TempDir::new().unwrap();
    let src = dir.path().join("bad.asm");
    fs::write(&src, "mov r0, 0\nbogus r1\n").unwrap();
    let out = rbpf(&["asm", s(&src)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn run_fletcher_over_region() {
    let dir = TempDir::new().unwrap();
    let bin = assemble(dir.path(), "fletcher32");
    let hex = dir.path().join("input.hex");
    fs::write(&hex, "61 62 63 64 65\n").unwrap();
    let region = format!("data:5:r:{}", s(&hex));
    let out = rbpf(&["run", s(&bin), "--region", &region, "--arg", "data"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(
        text.starts_with(&format!("r0={} status=ok insns=", 0xf04f_c729u32)),
        "{text}"
    );

    let out = rbpf(&[
        "run",
        s(&bin),
        "--region",
        &region,
        "--arg",
        "data",
        "--json",
    ]);
    let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(value["r0"], 0xf04f_c729u32 as i64);
    assert_eq!(value["status"], "ok");
}

#[test]
fn run_faults_exit_two() {
    let dir = TempDir::new().unwrap();
    let bin = assemble(dir.path(), "fletcher32");
    // No descriptor in r1: the first load is unmapped.
    let out = rbpf(&["run", s(&bin)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("status=fault:memory-access-denied@0"));

    let src = dir.path().join("loop.asm");
    fs::write(&src, "ja -1\nexit\n").unwrap();
    let looped = dir.path().join("loop.bin");
    assert!(rbpf(&["asm", s(&src), "-o", s(&looped)]).status.success());
    let out = rbpf(&["run", s(&looped), "--fuel", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("status=fuel-exhausted@0 insns=10"));
}

#[test]
fn run_dumps_writable_region() {
    let dir = TempDir::new().unwrap();
    let src = dir.path().join("w.asm");
    fs::write(
        &src,
        "ldxdw r2, [r1+0]\nstw [r2+0], 0x04030201\nmov r0, 0\nexit\n",
    )
    .unwrap();
    let bin = dir.path().join("w.bin");
    assert!(rbpf(&["asm", s(&src), "-o", s(&bin)]).status.success());
    let out = rbpf(&[
        "run",
        s(&bin),
        "--region",
        "buf:6:rw",
        "--arg",
        "buf",
        "--dump",
        "buf",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("buf: 010203040000"));
    // Same program against a read-only region faults.
    let out = rbpf(&["run", s(&bin), "--region", "buf:6:r", "--arg", "buf"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(rbpf(&[]).status.code(), Some(64));
    assert_eq!(rbpf(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(rbpf(&["run"]).status.code(), Some(64));
    assert_eq!(rbpf(&["--help"]).status.code(), Some(0));
    assert_eq!(rbpf(&["--version"]).status.code(), Some(0));

    let dir = TempDir::new().unwrap();
    let bin = assemble(dir.path(), "fletcher32");
    assert_eq!(
        rbpf(&["run", s(&bin), "--region", "x:4:q"]).status.code(),
        Some(64)
    );
    assert_eq!(
        rbpf(&["run", s(&bin), "--arg", "missing"]).status.code(),
        Some(64)
    );
    let out = dir.path().join("x.rbf");
    let res = rbpf(&["compress", s(&bin), "-o", s(&out), "--window-bits", "3"]);
    assert_eq!(res.status.code(), Some(64));
    assert_eq!(rbpf(&["bench", "--size", "1"]).status.code(), Some(64));
}

#[test]
fn compress_round_trip_and_auto_decompress() {
    let dir = TempDir::new().unwrap();
    let bin = assemble(dir.path(), "fletcher32");
    let rbf = dir.path().join("f.rbf");
    let out = rbpf(&["compress", s(&bin), "-o", s(&rbf)]);
    assert!(out.status.success());
    let packed = fs::read(&rbf).unwrap();
    assert_eq!(&packed[..4], b"RBF1");
    assert!(packed.len() * 10 <= fs::read(&bin).unwrap().len() * 6);

    let back = dir.path().join("back.bin");
    assert!(rbpf(&["decompress", s(&rbf), "-o", s(&back)])
        .status
        .success());
    assert_eq!(fs::read(&back).unwrap(), fs::read(&bin).unwrap());

    // verify and disasm accept the container directly.
    assert_eq!(rbpf(&["verify", s(&rbf)]).status.code(), Some(0));
    assert!(stdout(&rbpf(&["disasm", s(&rbf)])).contains("ldxdw r2, [r1+0]"));

    let mut corrupt = packed.clone();
    corrupt.truncate(packed.len() - 4);
    fs::write(&rbf, corrupt).unwrap();
    assert_eq!(
        rbpf(&["decompress", s(&rbf), "-o", s(&back)]).status.code(),
        Some(1)
    );
}

#[test]
fn device_run_sensor_script() {
    let dir = TempDir::new().unwrap();
    let bin = assemble(dir.path(), "sensor_coap");
    let rbf = dir.path().join("sensor.rbf");
    assert!(rbpf(&["compress", s(&bin), "-o", s(&rbf)]).status.success());
    let app = format!("/sensor={}", s(&rbf));
    let out = rbpf(&[
        "device",
        "run",
        "--app",
        &app,
        "--sensor",
        "temp=1234,-2",
        "--trigger",
        "GET",
        "/sensor",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    assert!(text.contains("code=2.05 (0x45)"), "{text}");
    assert!(text.contains("payload_hex=31322e3334"));
    assert!(text.contains("payload_text=12.34"));
    assert!(text.contains("r0=8 status=ok"));

    let out = rbpf(&[
        "device",
        "run",
        "--app",
        &app,
        "--trigger",
        "GET",
        "/sensor",
        "--json",
    ]);
    let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(value["code"], "5.00");
    assert_eq!(value["payload_hex"], "");
    assert_eq!(value["r0"], -160);

    let out = rbpf(&["device", "run", "--app", &app, "--trigger", "GET", "/other"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no application installed"));
}

#[test]
fn store_commands_and_persistent_counter() {
    let dir = TempDir::new().unwrap();
    let kv = dir.path().join("kv.json");
    let bin = assemble(dir.path(), "counter");
    let out = rbpf(&["store", "--file", s(&kv), "get", "local:1", "0"]);
    assert_eq!(stdout(&out).trim(), "absent");
    assert!(
        rbpf(&["store", "--file", s(&kv), "set", "local:1", "0", "-5"])
            .status
            .success()
    );
    assert_eq!(
        stdout(&rbpf(&["store", "--file", s(&kv), "get", "local:1", "0"])).trim(),
        "-5"
    );

    let first = stdout(&rbpf(&["run", s(&bin), "--store", s(&kv)]));
    let second = stdout(&rbpf(&["run", s(&bin), "--store", s(&kv)]));
    assert!(first.starts_with("r0=-4 "), "{first}");
    assert!(second.starts_with("r0=-3 "), "{second}");
    // A different script id has its own namespace.
    let other = stdout(&rbpf(&[
        "run",
        s(&bin),
        "--store",
        s(&kv),
        "--script-id",
        "2",
    ]));
    assert!(other.starts_with("r0=1 "), "{other}");

    let dump = stdout(&rbpf(&["store", "--file", s(&kv), "dump"]));
    assert_eq!(dump, "local:1\t0\t-3\nlocal:2\t0\t1\n");
    assert_eq!(
        rbpf(&["store", "--file", s(&kv), "get", "nowhere", "0"])
            .status
            .code(),
        Some(64)
    );
}

#[test]
fn bench_text_and_json() {
    let out = rbpf(&["bench", "--iterations", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.lines().next().unwrap().contains("workload"));
    assert!(text.contains("fletcher32"));
    assert!(text.contains("456 B, 1923 us"));

    let out = rbpf(&["bench", "--iterations", "5", "--json"]);
    let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let row = &value[0];
    assert_eq!(row["workload"], "fletcher32");
    assert_eq!(row["input_size"], 361);
    assert_eq!(row["iterations"], 5);
    assert!(row["bytecode_size"].as_u64().unwrap() <= 512);
}
