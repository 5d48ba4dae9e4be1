use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_iontrap");

fn iontrap(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn iontrap")
}

fn iontrap_threads(threads: usize, args: &[&str]) -> Output {
    Command::new(BIN).env("RAYON_NUM_THREADS", threads.to_string()).args(args).output().expect("spawn iontrap")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn quiet_config(dir: &Path) -> String {
    let path = dir.join("quiet.toml");
    fs::write(&path, "[noise]\nenabled = false\n").unwrap();
    path.to_string_lossy().into_owned()
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

#[test]
fn dump_sequence_matches_golden() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let cases: [(&str, &[&str]); 2] = [
        ("dump_cnot.txt", &["dump-sequence"]),
        (
            "dump_identity_prep10_meas15.txt",
            &["--mode", "idealized", "dump-sequence", "--gate", "identity", "--prep", "10", "--meas", "15"],
        ),
    ];
    for (file, args) in cases {
        let out = iontrap(args);
        ok(&out);
        let expected = fs::read_to_string(golden.join(file)).unwrap();
        assert_eq!(String::from_utf8(out.stdout).unwrap(), expected, "{file}");
    }
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let commands: [&[&str]; 3] = [
        &["--trajectories", "8", "--shots", "200", "tomography", "cnot"],
        &["--trajectories", "8", "scan", "rabi", "--nbar", "0.05"],
        &["--trajectories", "50", "errorbudget", "--sources", "laser_frequency,laser_intensity"],
    ];
    for (k, args) in commands.iter().enumerate() {
        let mut runs = Vec::new();
        for (r, threads) in [1usize, 4, 4].into_iter().enumerate() {
            let dir = tmp.path().join(format!("c{k}_r{r}"));
            let dir_s = dir.to_string_lossy().into_owned();
            let mut full = vec!["--seed", "7", "--out", dir_s.as_str()];
            full.extend_from_slice(args);
            ok(&iontrap_threads(threads, &full));
            runs.push(read_dir(&dir));
        }
        assert!(!runs[0].is_empty());
        assert_eq!(runs[0], runs[1], "{args:?}: 1 vs 4 threads");
        assert_eq!(runs[1], runs[2], "{args:?}: rerun");
    }
}

#[test]
fn seed_changes_sampled_data() {
    let tmp = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for seed in ["1", "2"] {
        let dir = tmp.path().join(seed);
        let d = dir.to_string_lossy().into_owned();
        ok(&iontrap(&["--mode", "idealized", "--shots", "100", "--seed", seed, "--out", &d, "tomography", "identity"]));
        files.push(fs::read_to_string(dir.join("tomography_identity_data.csv")).unwrap());
    }
    assert_ne!(data_rows(&files[0]), data_rows(&files[1]));
}

#[test]
fn stark_scan_has_one_row_per_detuning() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_string_lossy().into_owned();
    ok(&iontrap(&["--trajectories", "1", "--out", &d, "scan", "stark", "--detunings", "0.8:2.0:0.1"]));
    let csv = fs::read_to_string(tmp.path().join("scan_stark.csv")).unwrap();
    assert!(csv.starts_with("# iontrap "));
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 13);
    assert!(rows[0].starts_with("8.0"));
    let summary = json(&tmp.path().join("scan_stark.json"));
    assert_eq!(summary["points"], 13);
    assert!(summary["provenance"]["config_sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn idealized_noiseless_identity_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quiet_config(tmp.path());
    let d = tmp.path().join("out").to_string_lossy().into_owned();
    ok(&iontrap(&["--config", &cfg, "--mode", "idealized", "--out", &d, "tomography", "identity"]));
    let s = json(&Path::new(&d).join("tomography_identity.json"));
    let fp = s["process_fidelity"].as_f64().unwrap();
    assert!((fp - 1.0).abs() < 1e-6, "{fp}");
    assert!((s["haar_mean_fidelity"].as_f64().unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn noiseless_budget_leaves_only_off_resonant_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quiet_config(tmp.path());
    let d = tmp.path().join("out").to_string_lossy().into_owned();
    ok(&iontrap(&["--config", &cfg, "--out", &d, "errorbudget"]));
    let s = json(&Path::new(&d).join("errorbudget.json"));
    for row in s["rows"].as_array().unwrap() {
        let deficit = row["deficit"].as_f64().unwrap();
        match row["source"].as_str().unwrap() {
            "off_resonant" => assert!(deficit > 0.01, "{deficit}"),
            other => assert!(deficit.abs() < 1e-3, "{other}: {deficit}"),
        }
    }
    let table = fs::read_to_string(Path::new(&d).join("errorbudget.txt")).unwrap();
    assert!(table.contains("product_rule"));
}

#[test]
fn single_source_run_matches_its_budget_row() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let single = tmp.path().join("single");
    let common = ["--trajectories", "50", "--seed", "3"];
    let run = |dir: &Path, extra: &[&str]| {
        let d = dir.to_string_lossy().into_owned();
        let mut args: Vec<&str> = common.to_vec();
        args.extend_from_slice(&["--out", &d, "errorbudget"]);
        args.extend_from_slice(extra);
        ok(&iontrap(&args));
        json(&dir.join("errorbudget.json"))
    };
    let f = run(&full, &[]);
    let s = run(&single, &["--sources", "laser_frequency"]);
    let pick = |v: &Value| {
        v["rows"].as_array().unwrap().iter().find(|r| r["source"] == "laser_frequency").unwrap()["process_fidelity"]
            .as_f64()
            .unwrap()
    };
    assert_eq!(pick(&f), pick(&s));
    assert_eq!(s["rows"].as_array().unwrap().len(), 1);
}

#[test]
fn config_errors_exit_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown.toml", "foo = 1\n"),
        ("type.toml", "execution.seed = \"x\"\n"),
        ("range.toml", "trap.eta = -0.1\n"),
        ("syntax.toml", "[trap\n"),
    ];
    for (name, body) in cases {
        let path = tmp.path().join(name);
        fs::write(&path, body).unwrap();
        let out = iontrap(&["--config", path.to_str().unwrap(), "dump-sequence"]);
        assert_eq!(out.status.code(), Some(3), "{name}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.starts_with("error: ") && err.lines().count() == 1, "{name}: {err}");
    }
    let missing = iontrap(&["--config", "/nonexistent/iontrap.toml", "dump-sequence"]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_with_code_2() {
    for args in [&["bogus"][..], &["--shots", "5", "--exact", "dump-sequence"], &["tomography", "swap"]] {
        assert_eq!(iontrap(args).status.code(), Some(2), "{args:?}");
    }
    let out = iontrap(&["--mode", "physical", "dump-sequence", "--prep", "17"]);
    assert_eq!(out.status.code(), Some(3));
    let out = iontrap(&["--mode", "idealized", "scan", "stark"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unwritable_output_exits_with_code_5() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    let d = blocker.join("sub").to_string_lossy().into_owned();
    let out = iontrap(&["--trajectories", "1", "--out", &d, "scan", "residual_stark"]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn empty_config_hashes_like_no_config() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.toml");
    fs::write(&empty, "").unwrap();
    let a = iontrap(&["dump-sequence"]);
    let b = iontrap(&["--config", empty.to_str().unwrap(), "dump-sequence"]);
    ok(&a);
    assert_eq!(a.stdout, b.stdout);
    let c = iontrap(&["--seed", "9", "dump-sequence"]);
    assert_ne!(a.stdout, c.stdout);
}
