use std::path::Path;
use std::process::{Command, Output};

fn lmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmd")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const FAST: [&str; 16] = [
    "--set", "stage1.epochs=10",
    "--set", "stage1.lr=0.05",
    "--set", "stage2.lr_classifier=0.05",
    "--set", "stage1.feature_dim=6",
    "--set", "stage1.lambda1=0.1",
    "--set", "stage1.gram_normalize=true",
    "--set", "stage2.r_virtual=200",
    "--set", "stage2.m_epochs=1",
];

fn gen(dir: &Path, name: &str) -> String {
    let p = dir.join(name).to_str().unwrap().to_string();
    let o = lmd(&["gen", "--classes", "4", "--n0", "150", "--imbalance", "10", "--dim", "4", "--noise-dims", "2", "--seed", "3", "--out", &p]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    p
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.lmds");
    let s1 = dir.path().join("s1");
    let s2 = dir.path().join("s2");
    let mut a = vec!["stage1", "--data", &data, "--out", s1.to_str().unwrap()];
    a.extend(FAST);
    let o = lmd(&a);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ck1 = s1.join("stage1.ckpt");
    let mut a = vec![
        "stage2", "--data", &data, "--ckpt", ck1.to_str().unwrap(), "--iters", "2",
        "--r-virtual", "100", "--lambda-e", "0.01", "--mode", "inverse", "--out", s2.to_str().unwrap(),
    ];
    a.extend(FAST);
    let o = lmd(&a);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(s2.join("stage2_trace.json")).unwrap()).unwrap();
    assert_eq!(trace["iterations"].as_array().unwrap().len(), 2);

    let ck2 = s2.join("stage2.ckpt");
    let report = dir.path().join("r.json");
    let o = lmd(&["eval", "--data", &data, "--ckpt", ck2.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["bacc"].as_f64().unwrap() > 0.25);

    let feats = dir.path().join("z.csv");
    let o = lmd(&["export-features", "--data", &data, "--ckpt", ck2.to_str().unwrap(), "--out", feats.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let rows = std::fs::read_to_string(&feats).unwrap().lines().count();
    let n = lmd_core::datagen::load_dataset(Path::new(&data)).unwrap().len();
    assert_eq!(rows, 1 + n);
}

#[test]
fn csv_and_binary_generation_agree() {
    let dir = tempfile::tempdir().unwrap();
    let bin = lmd_core::datagen::load_dataset(Path::new(&gen(dir.path(), "d.lmds"))).unwrap();
    let csv = lmd_core::datagen::load_dataset(Path::new(&gen(dir.path(), "d.csv"))).unwrap();
    assert_eq!(bin.features, csv.features);
    assert_eq!(bin.labels, csv.labels);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.lmds");
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();

    // Configuration errors.
    assert_eq!(code(&lmd(&["stage1", "--data", &data, "--out", out, "--set", "stage1.bogus=1"])), 1);
    assert_eq!(code(&lmd(&["stage1", "--data", &data, "--out", out, "--set", "stage1.lr=-1"])), 1);
    assert_eq!(code(&lmd(&["frobnicate"])), 1);
    assert_eq!(code(&lmd(&["run", "--set", "ablations=no_fdc", "--set", "baseline=ce"])), 1);
    assert_eq!(code(&lmd(&["gen", "--classes", "1", "--out", out])), 1);

    // Data errors.
    let missing = dir.path().join("missing.lmds");
    assert_eq!(code(&lmd(&["stage1", "--data", missing.to_str().unwrap(), "--out", out])), 2);
    let mut bytes = std::fs::read(&data).unwrap();
    bytes[40] ^= 0x10;
    let bad = dir.path().join("bad.lmds");
    std::fs::write(&bad, &bytes).unwrap();
    let o = lmd(&["stage1", "--data", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("crc"));

    // Numeric abort.
    let mut a = vec!["stage1", "--data", &data, "--out", out];
    a.extend(FAST);
    a.extend(["--set", "stage1.lr=1e200"]);
    assert_eq!(code(&lmd(&a)), 3);

    assert_eq!(code(&lmd(&["--help"])), 0);
}
