use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dmapar"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn dmapar")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

/// On/off packet trace from a fixed xorshift stream.
fn write_trace(dir: &Path) -> PathBuf {
    let mut s: u64 = 0x9e3779b97f4a7c15;
    let mut next = || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut t = 0.0;
    let mut out = String::from("timestamp_s,size_bytes\n");
    for _ in 0..400 {
        let burst = 5 + (next() * 20.0) as usize;
        for _ in 0..burst {
            t += 2e-4 + 3e-4 * next();
            let size = 200 + (next() * 1300.0) as usize;
            out.push_str(&format!("{t},{size}\n"));
        }
        t += 0.01 + 0.04 * next();
    }
    let p = dir.join("trace.csv");
    fs::write(&p, out).unwrap();
    p
}

fn fit(trace: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "fit",
        trace.to_str().unwrap(),
        "--n",
        "1,2",
        "--p",
        "0,1",
        "--check-slots",
        "20000",
        "--out-dir",
        out.to_str().unwrap(),
        "--seed",
        "3",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = match fs::read_dir(dir) {
        Ok(rd) => rd.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect(),
        Err(_) => Vec::new(),
    };
    v.sort();
    v
}

#[test]
fn fit_and_synth_are_reproducible() {
    let tmp = TempDir::new().unwrap();
    let tr = write_trace(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&fit(&tr, &a, &[]));
    ok(&fit(&tr, &b, &[]));
    let ma = fs::read(a.join("model.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("model.json")).unwrap());
    assert_eq!(listing(&a), ["fit_report.json", "manifest.json", "model.json"]);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["invocation"]["seed"], 3);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);

    let model = a.join("model.json");
    for d in ["s1", "s2"] {
        let dir = tmp.path().join(d);
        ok(&run(&[
            "synth",
            model.to_str().unwrap(),
            "--slots",
            "5000",
            "--seed",
            "8",
            "--out-dir",
            dir.to_str().unwrap(),
        ]));
    }
    let s1 = fs::read(tmp.path().join("s1/synth.csv")).unwrap();
    assert_eq!(s1, fs::read(tmp.path().join("s2/synth.csv")).unwrap());
    assert!(s1.starts_with(b"timestamp_s,size_bytes\n"));
}

#[test]
fn dt_flag_overrides_slot_width() {
    let tmp = TempDir::new().unwrap();
    let tr = write_trace(tmp.path());
    let out = tmp.path().join("o");
    ok(&fit(&tr, &out, &["--dt", "0.002"]));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(m["dt"].as_f64(), Some(0.002));
}

#[test]
fn features_and_bound_write_tables() {
    let tmp = TempDir::new().unwrap();
    let tr = write_trace(tmp.path());
    let o = tmp.path().join("o");
    ok(&run(&[
        "baselines",
        tr.to_str().unwrap(),
        "--names",
        "poisson,normal",
        "--out-dir",
        o.to_str().unwrap(),
    ]));
    let model = o.join("baseline_poisson.json");
    ok(&run(&[
        "features",
        model.to_str().unwrap(),
        "--r-method",
        "identity",
        "--theta-grid",
        "1e-5:1e-2:8",
        "--out-dir",
        o.to_str().unwrap(),
    ]));
    let env = fs::read_to_string(o.join("envelope.csv")).unwrap();
    assert_eq!(env.lines().count(), 9);
    assert!(env.starts_with("theta,sigma_bytes,rho_bytes_per_s,valid_flag,method_flags"));

    fs::write(
        tmp.path().join("net.toml"),
        r#"
[[servers]]
id = "s1"
rate_mbps = 100.0

[[servers]]
id = "s2"
rate_mbps = 50.0

[[flows]]
id = "f"
path = ["s1", "s2"]
priority = 0
source = { model = "o/baseline_poisson.json" }

[[flows]]
id = "g"
path = ["s2"]
priority = 1
source = { model = "o/baseline_normal.json" }
"#,
    )
    .unwrap();
    let b = tmp.path().join("b");
    let net = tmp.path().join("net.toml");
    ok(&run(&[
        "bound",
        net.to_str().unwrap(),
        "--r-method",
        "identity",
        "--out-dir",
        b.to_str().unwrap(),
    ]));
    let bounds = fs::read_to_string(b.join("bounds.csv")).unwrap();
    let rows: Vec<&str> = bounds.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for r in rows {
        let t: f64 = r.split(',').nth(2).unwrap().parse().unwrap();
        assert!(t > 0.0);
    }

    let s = tmp.path().join("s");
    ok(&run(&[
        "simulate",
        net.to_str().unwrap(),
        "--duration",
        "2",
        "--seeds",
        "2",
        "--out-dir",
        s.to_str().unwrap(),
    ]));
    assert_eq!(
        listing(&s),
        ["manifest.json", "packets_seed0.csv", "packets_seed1.csv", "summary_seed0.csv", "summary_seed1.csv"]
    );
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = TempDir::new().unwrap();
    let tr = write_trace(tmp.path());
    let o = tmp.path().join("o");
    let o = o.to_str().unwrap();

    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["fit", "/nonexistent/trace.csv", "--out-dir", o])), 9);

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "0.1,100\n0.2,abc\n").unwrap();
    assert_eq!(code(&run(&["fit", bad.to_str().unwrap(), "--out-dir", o])), 3);

    assert_eq!(
        code(&run(&["baselines", tr.to_str().unwrap(), "--names", "pareto", "--out-dir", o])),
        4
    );
    assert_eq!(
        code(&run(&["fit", tr.to_str().unwrap(), "--epsilon", "1.5", "--out-dir", o])),
        4
    );
    ok(&run(&["baselines", tr.to_str().unwrap(), "--names", "poisson", "--out-dir", o]));
    let model = tmp.path().join("o/baseline_poisson.json");
    assert_eq!(
        code(&run(&["features", model.to_str().unwrap(), "--theta-grid", "1e-2:1e-3:4", "--out-dir", o])),
        4
    );
}

#[test]
fn failed_run_leaves_no_partial_output() {
    let tmp = TempDir::new().unwrap();
    let tr = write_trace(tmp.path());
    let o = tmp.path().join("o");
    let out = run(&[
        "baselines",
        tr.to_str().unwrap(),
        "--names",
        "poisson,normal,pareto",
        "--out-dir",
        o.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4);
    assert!(listing(&o).is_empty(), "{:?}", listing(&o));
}
