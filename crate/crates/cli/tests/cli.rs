use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mrla(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrla"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MRLA_OUT_DIR")
        .output()
        .expect("spawn mrla")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_train(dir: &Path) {
    fs::write(dir.join("cfg.txt"), "# tiny\nmode = light\nepochs = 2\narch.stages = 3,2\n").unwrap();
    let o = mrla(&["train", "--config", "cfg.txt", "--out-dir", "out"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unknown_suite_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = mrla(&["verify", "--suite", "everything"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn no_subcommand_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(mrla(&[], d.path()).status.code(), Some(2));
    assert_eq!(mrla(&["--help"], d.path()).status.code(), Some(0));
}

#[test]
fn verify_equivalence_one_seed() {
    let d = tempfile::tempdir().unwrap();
    let o = mrla(&["verify", "--suite", "equivalence", "--seeds", "1"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pass"], true);
    let suites = v["suites"].as_array().unwrap();
    assert_eq!(suites.len(), 1);
    // One seed per grid point: 3 head counts x 4 widths.
    for f in suites[0]["families"].as_array().unwrap() {
        assert_eq!(f["cases"], 12, "{f}");
    }
}

#[test]
fn verify_fault_fails_with_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let o = mrla(
        &["verify", "--suite", "equivalence", "--seeds", "1", "--lambda-fault", "0.01"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pass"], false);
    assert!(!v["suites"][0]["failures"].as_array().unwrap().is_empty());
}

#[test]
fn bench_base_counts() {
    let d = tempfile::tempdir().unwrap();
    let o = mrla(&["bench", "--mode", "base", "--depths", "4,8", "--no-time", "--out", "b.csv"], d.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.path().join("b.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,score_evals,state_values,wall_time_s,score_ratio,time_ratio"));
    let evals: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(evals, ["10", "36"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("x3.6"));
}

#[test]
fn bench_light_ratio_column() {
    let d = tempfile::tempdir().unwrap();
    let o = mrla(
        &["bench", "--mode", "light", "--depths", "4,8,16", "--out", "l.csv", "--trials", "2", "--reps", "2"],
        d.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.path().join("l.csv")).unwrap();
    let ratios: Vec<f64> = csv
        .lines()
        .skip(2)
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    assert_eq!(ratios, [2.0, 2.0]);
}

#[test]
fn bench_bad_depths_are_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    for depths in ["", ",", "8,4", "0,2", "x"] {
        let o = mrla(&["bench", "--mode", "light", "--depths", depths], d.path());
        assert_eq!(o.status.code(), Some(2), "depths {depths:?}");
    }
}

#[test]
fn bench_unwritable_out_is_io_error() {
    let d = tempfile::tempdir().unwrap();
    let o = mrla(
        &["bench", "--mode", "kernel", "--depths", "2", "--no-time", "--out", "missing/dir/x.csv"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_config_names_line() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.txt"), "mode = light\n\nlr: 0.1\n").unwrap();
    let o = mrla(&["train", "--config", "bad.txt"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn missing_config_is_io_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(mrla(&["train", "--config", "nope.txt"], d.path()).status.code(), Some(1));
}

#[test]
fn bad_overrides_are_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("cfg.txt"), "epochs = 1\n").unwrap();
    for arg in ["--bogus=1", "--lr=fast", "lr=0.1", "--lr"] {
        let o = mrla(&["train", "--config", "cfg.txt", arg], d.path());
        assert_eq!(o.status.code(), Some(2), "{arg}: {}", stderr(&o));
    }
}

#[test]
fn override_wins_over_file() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("cfg.txt"), "epochs = 5\narch.stages = 2,2\n").unwrap();
    let o = mrla(&["train", "--config", "cfg.txt", "--out-dir", "o", "--epochs=2"], d.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["epoch_mean_loss"].as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(d.path().join("o/loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,step,loss"));
}

#[test]
fn out_dir_from_environment() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("cfg.txt"), "epochs = 1\narch.stages = 1,1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mrla"))
        .args(["train", "--config", "cfg.txt"])
        .current_dir(d.path())
        .env("MRLA_OUT_DIR", "envout")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.path().join("envout/checkpoint.mrlt").exists());
    assert!(d.path().join("envout/loss.csv").exists());
}

#[test]
fn same_seed_same_loss_csv() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("cfg.txt"), "epochs = 2\nseed = 11\n").unwrap();
    for out in ["r1", "r2"] {
        let o = mrla(&["train", "--config", "cfg.txt", "--out-dir", out], d.path());
        assert!(o.status.success());
    }
    let a = fs::read(d.path().join("r1/loss.csv")).unwrap();
    let b = fs::read(d.path().join("r2/loss.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dump_attn_is_triangular() {
    let d = tempfile::tempdir().unwrap();
    small_train(d.path());
    for (stage, depth) in [(0usize, 3usize), (1, 2)] {
        let o = mrla(
            &["dump", "--checkpoint", "out/checkpoint.mrlt", "--what", "attn", "--out", "a.csv", "--stage", &stage.to_string()],
            d.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let csv = fs::read_to_string(d.path().join("a.csv")).unwrap();
        let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
        let heads: std::collections::BTreeSet<_> = rows.iter().map(|r| r[0].clone()).collect();
        assert!(!heads.is_empty());
        for h in &heads {
            let n = rows.iter().filter(|r| &r[0] == h).count();
            assert_eq!(n, depth * (depth + 1) / 2, "stage {stage} head {h}");
        }
        for r in &rows {
            let (t, s): (usize, usize) = (r[1].parse().unwrap(), r[2].parse().unwrap());
            assert!(s <= t && t <= depth);
        }
    }
    let o = mrla(
        &["dump", "--checkpoint", "out/checkpoint.mrlt", "--what", "attn", "--out", "a.csv", "--stage", "5"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn dump_cosine_histogram() {
    let d = tempfile::tempdir().unwrap();
    small_train(d.path());
    let o = mrla(
        &["dump", "--checkpoint", "out/checkpoint.mrlt", "--what", "cosine", "--out", "c.csv", "--bins", "4"],
        d.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.path().join("c.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "bin_lo,bin_hi,count");
    assert_eq!(lines.len(), 5);
    // 90 samples; 2 + 1 consecutive block pairs; 2 and 4 heads.
    let total: usize = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert!(total <= 90 * (2 * 2 + 4), "{total}");
    assert!(total > 0);
}

#[test]
fn dump_params_with_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    small_train(d.path());
    let o = mrla(
        &["dump", "--checkpoint", "out/checkpoint.mrlt", "--what", "params", "--out", "p.json"],
        d.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(d.path().join("p.json")).unwrap()).unwrap();
    assert_eq!(v["resnet50_light_params"], 151_200);
    let tensors = v["model"]["tensors"].as_array().unwrap();
    let sum: u64 = tensors
        .iter()
        .map(|t| t["shape"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).product::<u64>())
        .sum();
    assert_eq!(v["model"]["params"], sum);
}

#[test]
fn corrupt_checkpoint_is_format_error() {
    let d = tempfile::tempdir().unwrap();
    small_train(d.path());
    let path = d.path().join("out/checkpoint.mrlt");
    let mut bytes = fs::read(&path).unwrap();
    // First record: 2-byte name length, name, then the tensor magic.
    let name_len = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
    bytes[2 + name_len] ^= 0xff;
    fs::write(&path, bytes).unwrap();
    let o = mrla(&["dump", "--checkpoint", "out/checkpoint.mrlt", "--what", "attn", "--out", "a.csv"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("format error"), "{}", stderr(&o));
}

#[test]
fn dump_needs_checkpoint_for_model_dumps() {
    let d = tempfile::tempdir().unwrap();
    let o = mrla(&["dump", "--what", "attn", "--out", "a.csv"], d.path());
    assert_eq!(o.status.code(), Some(2));
}
