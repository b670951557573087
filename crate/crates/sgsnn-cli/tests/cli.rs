use std::path::Path;
use std::process::{Command, Output};

fn sgsnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgsnn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sgsnn(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

/// `(T, acc)` rows of an `infer` table.
fn accuracy(csv: &str) -> Vec<(u64, f64)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let (t, a) = l.split_once(',').unwrap();
            (t.parse().unwrap(), a.parse().unwrap())
        })
        .collect()
}

#[test]
fn synth_convert_infer_probe_energy() {
    let d = tempfile::tempdir().unwrap();
    let (m, x, y, s, a) = (p(d.path(), "m.json"), p(d.path(), "x.bin"), p(d.path(), "y.bin"), p(d.path(), "s.json"), p(d.path(), "a.json"));
    ok(&["synth-model", "--arch", "mlp", "--dims", "6,12,4", "--seed", "3", "--out", &m, "--data", &x, "--labels", &y, "--items", "8"]);
    ok(&["convert", "--model", &m, "--out", &s, "--ann-out", &a]);

    let rows = accuracy(&ok(&["infer", "--snn", &s, "--data", &x, "--labels", &y, "--steps", "2048", "--checkpoints", "1000"]));
    assert_eq!(rows.first().map(|r| r.0), Some(1));
    assert!(rows.iter().any(|r| r.0 == 1000));
    assert_eq!(rows.last(), Some(&(2048, 1.0)));

    let trace = p(d.path(), "trace.csv");
    ok(&["infer", "--snn", &s, "--data", &x, "--labels", &y, "--steps", "16", "--dense-trace", &trace, "--trace-item", "2"]);
    let text = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().next(), Some("t,class,logit0,logit1,logit2,logit3"));
    assert_eq!(text.lines().count(), 17);

    let probe = ok(&["probe", "--snn", &s, "--model", &a, "--data", &x, "--steps", "512", "--norm", "l2"]);
    assert_eq!(probe.lines().next(), Some("layer,t,err"));
    let last: f64 = probe.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(probe.lines().last().unwrap().starts_with("readout,512,"));
    assert!(last < 0.05, "readout error {last}");

    let energy = ok(&["energy", "--snn", &s, "--data", &x, "--steps", "32"]);
    assert_eq!(energy.lines().count(), 9);
    for line in energy.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f[1], 12.0);
        assert_eq!(f[2], f[4]);
        assert!((f[3] - f[2] / (32.0 * 12.0)).abs() < 1e-12);
    }
}

#[test]
fn label_count_mismatch_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let (m, x, y, s) = (p(d.path(), "m.json"), p(d.path(), "x.bin"), p(d.path(), "y.bin"), p(d.path(), "s.json"));
    ok(&["synth-model", "--arch", "mlp", "--dims", "3,2", "--out", &m, "--data", &x, "--items", "4"]);
    ok(&["synth-model", "--arch", "mlp", "--dims", "3,2", "--out", &p(d.path(), "n.json"), "--data", &p(d.path(), "z.bin"), "--labels", &y, "--items", "5"]);
    ok(&["convert", "--model", &m, "--out", &s]);
    let out = sgsnn(&["infer", "--snn", &s, "--data", &x, "--labels", &y]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("5 labels for 4 inputs"));
}

#[test]
fn subgrad_family_rejects_gelu_by_node() {
    let d = tempfile::tempdir().unwrap();
    let m = p(d.path(), "m.json");
    ok(&["synth-model", "--arch", "layernorm", "--dims", "4", "--classes", "2", "--out", &m]);
    let out = sgsnn(&["convert", "--model", &m, "--family", "subgrad", "--out", &p(d.path(), "s.json")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("conversion error at node"));
    ok(&["convert", "--model", &m, "--out", &p(d.path(), "s.json")]);
}

#[test]
fn oracle_checks_pass_and_the_negative_control_fails() {
    for n in ["if", "lif", "subgrad", "signgd:relu", "signgd:leaky:0.1", "signgd:gelu", "signgd:max2", "signgd:square", "signgd:misr"] {
        let line = ok(&["oracle-check", "--neuron", n, "--steps", "3000", "--seed", "7"]);
        assert!(line.starts_with("PASS"), "{line}");
    }
    let out = sgsnn(&[
        "oracle-check", "--neuron", "signgd:relu", "--schedule", "exp:0.15:0.965", "--param", "unit-current", "--corrupt-coefficients",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("FAIL"));
}

#[test]
fn encode_emits_a_deterministic_rate_train() {
    let out = ok(&["encode", "--x", "0.3", "--encoder", "rate", "--steps", "200"]);
    let mut sum = 0.0;
    for (k, line) in out.lines().skip(1).enumerate() {
        sum += line.split_once(',').unwrap().1.parse::<f64>().unwrap();
        let t = (k + 1) as f64;
        assert!((sum / t - 0.3).abs() <= 1.0 / t + 1e-12, "t={t}");
    }
    assert_eq!(out, ok(&["encode", "--x", "0.3", "--encoder", "rate", "--steps", "200"]));
    let out = ok(&["encode", "--x", "0.7", "--encoder", "det", "--steps", "8"]);
    assert_eq!(out.lines().count(), 9);
}

#[test]
fn sweep_error_shrinks() {
    let out = ok(&["neuron-sweep", "--neuron", "signgd:relu", "--xmin", "-1", "--xmax", "1", "--points", "5", "--steps", "4096"]);
    let errs: Vec<(u64, f64)> = out
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert!(errs.iter().filter(|e| e.0 == 4096).all(|e| e.1 < 0.01), "{errs:?}");
    let bad = sgsnn(&["neuron-sweep", "--neuron", "if", "--points", "1"]);
    assert!(!bad.status.success());
}
