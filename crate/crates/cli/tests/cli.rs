//! End-to-end runs of the `wpoe` binary.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_wpoe");
const DATA: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/data");

fn wpoe(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// First `n` bytes of a corpus file, copied into `dir`.
fn sample(dir: &Path, n: usize) -> PathBuf {
    let data = std::fs::read(format!("{DATA}/shakespeare.txt")).unwrap();
    let p = dir.join("input.txt");
    std::fs::write(&p, &data[..n]).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn file_round_trip_with_default_names() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample(dir.path(), 30_000);
    let out = wpoe(&["compress", s(&input), "--stats"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("rate (payload)"));
    let container = dir.path().join("input.txt.wpoe");
    assert!(container.is_file());

    std::fs::rename(&input, dir.path().join("original.txt")).unwrap();
    let out = wpoe(&["decompress", s(&container)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        std::fs::read(dir.path().join("input.txt")).unwrap(),
        std::fs::read(dir.path().join("original.txt")).unwrap()
    );
}

#[test]
fn stdin_to_stdout_round_trip() {
    let data = std::fs::read(format!("{DATA}/code.txt")).unwrap();
    let pipe = |args: &[&str], input: &[u8]| {
        let mut child = Command::new(BIN)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut stdin = child.stdin.take().unwrap();
        let input = input.to_vec();
        let feeder = std::thread::spawn(move || stdin.write_all(&input));
        let out = child.wait_with_output().unwrap();
        feeder.join().unwrap().unwrap();
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        out.stdout
    };
    let container = pipe(&["compress", "-", "-e", "nb,ctx:order=1", "-w", "per-chunk"], &data[..40_000]);
    assert_eq!(&container[..4], b"WPOE");
    assert_eq!(pipe(&["decompress", "-"], &container), &data[..40_000]);
}

#[test]
fn explicit_weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample(dir.path(), 10_000);
    let c = dir.path().join("c.wpoe");
    let back = dir.path().join("back.txt");
    let out = wpoe(&["compress", s(&input), "-o", s(&c), "-e", "nb,ctx,uniform", "-w", "0.5,0.3,0.2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = wpoe(&["decompress", s(&c), "-o", s(&back)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(back).unwrap(), std::fs::read(input).unwrap());
}

#[test]
fn corrupt_and_truncated_containers_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample(dir.path(), 20_000);
    let c = dir.path().join("c.wpoe");
    assert_eq!(code(&wpoe(&["compress", s(&input), "-o", s(&c)])), 0);
    let bytes = std::fs::read(&c).unwrap();

    let cut = dir.path().join("cut.wpoe");
    std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    let out = wpoe(&["decompress", s(&cut), "-o", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    let mut flipped = bytes.clone();
    flipped[12] ^= 0x10;
    std::fs::write(&cut, &flipped).unwrap();
    let out = wpoe(&["decompress", s(&cut), "-o", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).starts_with("wpoe: "));
}

#[test]
fn usage_and_io_errors() {
    let out = wpoe(&["compress", "/nonexistent/input.txt"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let out = wpoe(&["compress", "-", "--no-such-flag"]);
    assert_eq!(code(&out), 2);
    let out = wpoe(&["frobnicate"]);
    assert_eq!(code(&out), 2);

    let dir = tempfile::tempdir().unwrap();
    let input = sample(dir.path(), 1000);
    let out = wpoe(&["compress", s(&input), "-e", "ctx:order=99"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = wpoe(&["compress", s(&input), "-w", "0.5"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = wpoe(&["compress", s(&input), "-e", "bogus"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn help_lists_subcommands_and_flags() {
    let out = wpoe(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["compress", "decompress", "fit", "eval", "sweep", "multi", "stability", "serve-mock"] {
        assert!(text.contains(sub), "missing {sub} in help");
    }
    let out = wpoe(&["compress", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--experts", "--weights", "--calibration", "--chunk-size", "--threads", "--endpoint", "--max-iters"] {
        assert!(text.contains(flag), "missing {flag} in compress help");
    }
    assert_eq!(code(&wpoe(&["--version"])), 0);
}

#[test]
fn eval_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = format!("{DATA}/encyclopedia.txt:0:40000");
    let run = |name: &str, seed: &str| {
        let csv = dir.path().join(name);
        let out = wpoe(&["eval", "--corpus", &corpus, "--runs", "3", "--seed", seed, "--csv", s(&csv), "--verify"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        std::fs::read_to_string(csv).unwrap()
    };
    let a = run("a.csv", "7");
    let b = run("b.csv", "7");
    assert_eq!(a, b);
    assert!(a.starts_with("run,calibration_chunk,weights,rate_excl_header_pct"));
    assert_eq!(a.lines().count(), 4);
}

#[test]
fn fit_and_sweep_reports() {
    let corpus = format!("{DATA}/code.txt:0:20000");
    let out = wpoe(&["fit", "--corpus", &corpus, "--calibration", "0,3", "--grid", "0.05"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("final"));

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = wpoe(&["sweep", "--corpus", &corpus, "--contexts", "16,256", "--alphas", "1.0,0.1", "--csv", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("context,alpha,rate_pct,bits_per_byte"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn external_expert_through_an_exec_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample(dir.path(), 15_000);
    let c = dir.path().join("c.wpoe");
    let back = dir.path().join("back.txt");
    let mock = format!("exec:{BIN} serve-mock --seed 3");
    let out = wpoe(&["compress", s(&input), "-o", s(&c), "-e", "ext:context=128,nb", "--endpoint", &mock]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let out = wpoe(&["decompress", s(&c), "-o", s(&back), "--endpoint", &mock]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(&back).unwrap(), std::fs::read(&input).unwrap());

    // A different model behind the endpoint is caught by the digest check.
    let other = format!("exec:{BIN} serve-mock --seed 4");
    let out = wpoe(&["decompress", s(&c), "-o", s(&back), "--endpoint", &other]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    let out = wpoe(&["decompress", s(&c), "-o", s(&back)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn serve_mock_over_tcp() {
    let mut server = Command::new(BIN)
        .args(["serve-mock", "--endpoint", "tcp:127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let endpoint = line.trim().strip_prefix("listening on ").expect("announces its endpoint").to_string();
    assert!(endpoint.starts_with("tcp:127.0.0.1:"));

    let dir = tempfile::tempdir().unwrap();
    let input = sample(dir.path(), 8_000);
    let c = dir.path().join("c.wpoe");
    let back = dir.path().join("back.txt");
    let spec = format!("ext:endpoint={endpoint},ctx:order=1");
    let out = wpoe(&["compress", s(&input), "-o", s(&c), "-e", &spec]);
    let out2 = wpoe(&["decompress", s(&c), "-o", s(&back), "--endpoint", &endpoint]);
    server.kill().unwrap();
    server.wait().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(code(&out2), 0, "{}", stderr(&out2));
    assert_eq!(std::fs::read(&back).unwrap(), std::fs::read(&input).unwrap());
}

#[test]
fn unreachable_endpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample(dir.path(), 1000);
    let sock = dir.path().join("nobody.sock");
    let out = wpoe(&["compress", s(&input), "-e", "ext,nb", "--endpoint", &format!("unix:{}", s(&sock))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}
