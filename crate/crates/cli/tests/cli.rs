use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: [&str; 10] = [
    "--clips-per-class",
    "2",
    "--val-clips-per-class",
    "1",
    "--epochs",
    "2",
    "--warmup-epochs",
    "1",
    "--batch-size",
    "4",
];

fn tds(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tds"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("TDS_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL).collect()
}

#[test]
fn rejects_unknown_flags_and_bad_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(tds(&["train", "--no-such-flag", "1"], out).status.code(), Some(1));
    assert_eq!(tds(&["train", "--layers", "x"], out).status.code(), Some(1));
    assert_eq!(tds(&["train", "--pool-kernel", "4"], out).status.code(), Some(1));
    assert_eq!(tds(&["train", "--preset", "huge"], out).status.code(), Some(1));
    assert_eq!(tds(&["profile", "--topology", "side,sideways"], out).status.code(), Some(1));
    assert_eq!(tds(&["dump-activations", "--layer", "4"], out).status.code(), Some(1));
    assert_eq!(tds(&["dump-activations", "--sme-mode", "off"], out).status.code(), Some(1));
    let missing = tds(&["eval", "--checkpoint", "/nonexistent/model.ckpt"], out);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());
}

#[test]
fn resolved_config_comes_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small\nside_dim = 16\nseed = 3\n").unwrap();
    let o = tds(&["profile", "--config", cfg.to_str().unwrap(), "--seed", "9", "--topology", "side"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("# resolved config (profile)\n"));
    assert!(text.contains("\nside_dim = 16\n"));
    assert!(text.contains("\nseed = 9\n"));

    let env = Command::new(env!("CARGO_BIN_EXE_tds"))
        .args(["profile", "--topology", "side", "--out"])
        .arg(dir.path())
        .env("TDS_SEED", "42")
        .output()
        .unwrap();
    assert!(stdout(&env).contains("\nseed = 42\n"));

    fs::write(&cfg, "bogus_key = 1\n").unwrap();
    assert_eq!(tds(&["profile", "--config", cfg.to_str().unwrap()], dir.path()).status.code(), Some(1));
}

#[test]
fn gen_data_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = tds(&with_small(&["gen-data"]), &data);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("train.tdsd").exists() && data.join("val.tdsd").exists());

    let o = tds(&with_small(&["train", "--data", data.to_str().unwrap()]), &run);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(run.join("model.ckpt").exists());
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().contains("epochs = 2"));

    let ev = dir.path().join("eval");
    let ckpt = run.join("model.ckpt");
    let o = tds(&with_small(&["eval", "--data", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]), &ev);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["metrics"]["top1"], lines[1]["val_top1"]);
    assert_eq!(report["metrics"]["loss"], lines[1]["val_loss"]);
}

#[test]
fn training_is_reproducible_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = tds(&with_small(&["train", "--seed", seed, "--jitter", "true", "--crop", "true"]), &out);
        assert_eq!(o.status.code(), Some(0));
        let metrics: Vec<Value> = fs::read_to_string(out.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v["seconds"] = Value::Null;
                v
            })
            .collect();
        (metrics, fs::read(out.join("model.ckpt")).unwrap())
    };
    let a = run("a", "5");
    let b = run("b", "5");
    let c = run("c", "6");
    assert_eq!(a, b);
    assert_ne!(a.1, c.1);
}

#[test]
fn profile_reports_strict_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let o = tds(&["profile", "--topology", "side,inbackbone,full"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("strictly increasing in listed order: true"));
    let reports: Vec<Value> = serde_json::from_str(&fs::read_to_string(dir.path().join("profile.json")).unwrap()).unwrap();
    let bytes: Vec<u64> = reports.iter().map(|r| r["total_retained_bytes"].as_u64().unwrap()).collect();
    assert_eq!(reports.len(), 3);
    assert!(bytes[0] < bytes[1] && bytes[1] < bytes[2]);
    assert_eq!(reports[0]["topology"], "side");
}

#[test]
fn ablate_writes_one_isolated_run_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "ablate", "--axis", "pool-kernel", "--values", "3,5,7", "--clips-per-class", "2", "--val-clips-per-class", "1",
        "--epochs", "1", "--warmup-epochs", "0", "--batch-size", "4",
    ];
    let o = tds(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut ckpts = Vec::new();
    for k in [3, 5, 7] {
        let sub = dir.path().join(format!("pool_kernel={k}"));
        let m: Value = serde_json::from_str(&fs::read_to_string(sub.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(m["value"], k.to_string());
        let seed_dir = sub.join("seed-0");
        assert!(fs::read_to_string(seed_dir.join("config.txt")).unwrap().contains(&format!("pool_kernel = {k}")));
        ckpts.push(fs::read(seed_dir.join("model.ckpt")).unwrap());
    }
    assert_ne!(ckpts[0], ckpts[1]);
    let summary: Vec<Value> = serde_json::from_str(&fs::read_to_string(dir.path().join("ablate.json")).unwrap()).unwrap();
    assert_eq!(summary.len(), 3);

    // one bad value is caught before any training starts
    let bad = dir.path().join("bad");
    assert_eq!(tds(&with_small(&["ablate", "--axis", "pool-kernel", "--values", "3,4"]), &bad).status.code(), Some(1));
    assert!(!bad.join("pool_kernel=3").exists());
    assert_eq!(tds(&["ablate", "--axis", "alpha+beta", "--values", "1"], &bad).status.code(), Some(1));
}

fn ppm_size(path: &Path) -> (usize, usize, usize) {
    let bytes = fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes[..16]).into_owned();
    let mut it = text.split_whitespace();
    assert_eq!(it.next(), Some("P6"));
    let w: usize = it.next().unwrap().parse().unwrap();
    let h: usize = it.next().unwrap().parse().unwrap();
    (w, h, bytes.len())
}

#[test]
fn activation_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let o = tds(&["dump-activations", "--layer", "1", "--scale", "2", "--class", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (w, h, len) = ppm_size(&dir.path().join("layer1_frame01.ppm"));
    // three 4×4 panels with two one-cell gutters, doubled
    assert_eq!((w, h), ((3 * 4 + 2) * 2, 4 * 2));
    assert_eq!(len, "P6\n28 8\n255\n".len() + 3 * w * h);
    let maps: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("activations.json")).unwrap()).unwrap();
    assert_eq!(maps["motion"].as_array().unwrap().len(), 8);
    assert!(maps["motion"][0].as_array().unwrap().iter().any(|v| v.as_f64().unwrap() > 0.0));

    let st = dir.path().join("static");
    let o = tds(&["dump-activations", "--static"], &st);
    assert_eq!(o.status.code(), Some(0));
    let maps: Value = serde_json::from_str(&fs::read_to_string(st.join("activations.json")).unwrap()).unwrap();
    for frame in maps["motion"].as_array().unwrap() {
        assert!(frame.as_array().unwrap().iter().all(|v| v.as_f64().unwrap().abs() <= 1e-12));
    }
}

#[test]
fn gradcheck_exit_code_tracks_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = tds(&["gradcheck", "--preset", "tiny"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("max relative error: ")).unwrap().to_string();
    let err: f64 = line["max relative error: ".len()..].parse().unwrap();
    assert!(err < 1e-4);
    // a step this large is dominated by truncation error
    let o = tds(&["gradcheck", "--preset", "tiny", "--eps", "0.5", "--per-tensor", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
