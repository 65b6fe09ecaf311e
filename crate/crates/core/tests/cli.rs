use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pfs_kd::trainer::{parse_step_csv, RunSummary};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pfs-kd"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_data(dir: &Path) {
    fs::write(dir.join("data.json"), r#"{"train_count": 16, "val_count": 8}"#).unwrap();
    let out = run(dir, &["gen-data", "--config", "data.json", "--out", "data"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_data_defaults_write_600_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen-data", "--out", "d"]);
    assert_eq!(code(&out), 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("d/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train_count"], 500);
    assert_eq!(manifest["val_count"], 100);
    let count = |s: &str| fs::read_dir(dir.path().join("d").join(s)).unwrap().count();
    assert_eq!(count("train") + count("val"), 2 * 600);
}

#[test]
fn pipeline_teacher_distill_eval_dump() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);

    let out = run(d, &["train-teacher", "--data", "data", "--out", "teacher", "--epochs", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("teacher/model.ckpt").exists());

    let distill = |out_dir: &str| {
        run(
            d,
            &[
                "distill", "--data", "data", "--teacher", "teacher/model.ckpt", "--out", out_dir, "--mode", "pfs+gap",
                "--epochs", "1", "--lambda", "1", "--seed", "3",
            ],
        )
    };
    let out = distill("s1");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.ckpt", "steps.csv", "epochs.csv", "summary.json"] {
        assert!(d.join("s1").join(f).exists(), "{f}");
    }
    assert_eq!(code(&distill("s2")), 0);
    let steps = fs::read(d.join("s1/steps.csv")).unwrap();
    assert_eq!(steps, fs::read(d.join("s2/steps.csv")).unwrap());
    assert_eq!(
        fs::read(d.join("s1/model.ckpt")).unwrap(),
        fs::read(d.join("s2/model.ckpt")).unwrap()
    );
    let parsed = parse_step_csv(std::str::from_utf8(&steps).unwrap()).unwrap();
    assert_eq!(parsed.len(), 2);
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(d.join("s1/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.mode, "pfs+gap");
    assert_eq!(summary.teacher_hash_before, summary.teacher_hash_after);

    let out = run(d, &["eval", "--data", "data", "--checkpoint", "s1/model.ckpt", "--out", "eval"]);
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(d.join("eval/eval.csv")).unwrap();
    assert!(csv.starts_with("class,iou\nbackground,"));
    assert!(csv.contains("mean_iou,"));

    let out = run(
        d,
        &[
            "pfs-dump", "--data", "data", "--checkpoint", "teacher/model.ckpt", "--index", "2", "--pixel", "10,20",
            "--pixel", "47,0", "--out", "dump",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pgm = fs::read(d.join("dump/val_00002_r10_c20.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n12 12\n255\n"));
    assert_eq!(pgm.len(), b"P5\n12 12\n255\n".len() + 144);
    let ppm = fs::read(d.join("dump/val_00002_r47_c0.marked.ppm")).unwrap();
    let header = b"P6\n48 48\n255\n".len();
    let at = header + 3 * (47 * 48);
    assert_eq!(&ppm[at..at + 3], &[255, 0, 0]);
    let row: Vec<f64> = fs::read_to_string(d.join("dump/val_00002_r10_c20.csv"))
        .unwrap()
        .lines()
        .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .collect();
    assert_eq!(row.len(), 144);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(fs::read_to_string(d.join("dump/val_00002_r10_c20.scale.txt")).unwrap().starts_with("min "));
}

#[test]
fn constant_image_gives_flat_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let net = pfs_kd::models::Network::<f32>::build(pfs_kd::models::SegNetSpec::default_teacher(4), 0).unwrap();
    pfs_kd::models::save_checkpoint(&net, d.join("t.ckpt")).unwrap();
    pfs_kd::tensor::save_tensor(&pfs_kd::Tensor::<f32>::full(&[3, 48, 48], 0.5), d.join("flat.pfst")).unwrap();
    let out = run(
        d,
        &["pfs-dump", "--checkpoint", "t.ckpt", "--image", "flat.pfst", "--pixel", "24,24", "--out", "o"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let values: Vec<f64> = fs::read_to_string(d.join("o/flat_r24_c24.csv"))
        .unwrap()
        .lines()
        .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .collect();
    let (lo, hi) = values.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi - lo < 1e-3, "not flat enough: {lo}..{hi}");
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    let net = pfs_kd::models::Network::<f32>::build(pfs_kd::models::SegNetSpec::default_teacher(4), 0).unwrap();
    pfs_kd::models::save_checkpoint(&net, d.join("t.ckpt")).unwrap();

    let out = run(
        d,
        &["pfs-dump", "--data", "data", "--checkpoint", "t.ckpt", "--index", "0", "--pixel", "-1,0", "--out", "o"],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("pixel"));
    let out = run(
        d,
        &["pfs-dump", "--data", "data", "--checkpoint", "t.ckpt", "--index", "0", "--pixel", "48,0", "--out", "o"],
    );
    assert_eq!(code(&out), 1);

    fs::write(d.join("bad.json"), r#"{"epochs": 2, "learning_rate": 0.1}"#).unwrap();
    let out = run(d, &["train-teacher", "--config", "bad.json", "--data", "data"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    fs::write(d.join("neg.json"), r#"{"loss": {"temperature": -1.0}}"#).unwrap();
    assert_eq!(code(&run(d, &["distill", "--config", "neg.json"])), 1);
    assert_eq!(code(&run(d, &["distill", "--mode", "bogus"])), 1);
    assert_eq!(code(&run(d, &["distill", "--data", "data", "--mode", "pfs"])), 1);
    assert_eq!(code(&run(d, &["gen-data", "--epochs", "3"])), 1);
    assert_eq!(code(&run(d, &["no-such-command"])), 1);
    assert_eq!(code(&run(d, &["eval", "--data", "data", "--checkpoint", "missing.ckpt"])), 2);
}

#[test]
fn config_precedence_defaults_json_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    fs::write(d.join("cfg.json"), r#"{"epochs": 2, "seed": 4, "out_dir": "from_json"}"#).unwrap();
    let out = run(d, &["train-teacher", "--config", "cfg.json", "--data", "data", "--epochs", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: RunSummary =
        serde_json::from_str(&fs::read_to_string(d.join("from_json/summary.json")).unwrap()).unwrap();
    assert_eq!((summary.epochs, summary.seed), (1, 4));
}

#[test]
fn verification_subcommands_pass() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(d, &["gradcheck", "--out", "g"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let csv = fs::read_to_string(d.join("g/gradcheck.csv")).unwrap();
    assert!(csv.starts_with("op_name,shape,max_rel_err,pass\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));

    fs::write(d.join("v.json"), r#"{"instances": 20}"#).unwrap();
    let out = run(d, &["oracle-check", "--config", "v.json", "--out", "o"]);
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(d.join("o/oracle.csv")).unwrap();
    for name in ["matmul", "conv2d", "s_pfs", "c_pfs", "pfs_loss", "augment", "hint", "attention"] {
        assert!(csv.contains(&format!("\n{name},20,")), "{name}");
    }
}
