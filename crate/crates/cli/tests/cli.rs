use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

const TINY: &str = "\
resolution = 32
d_g = 8
d_v = 4
width = 4
critic_width = 4
child_width = 4
inverse_width = 4
mapper_width = 16
batch_size = 4
epochs_step1 = 1
epochs_step2 = 1
epochs_step3 = 2
epochs_step4 = 1
child_iters_per_epoch = 2
inverse_iters_per_epoch = 2
progressive = 0
seed = 3
";

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_childpredictor"))
        .args(args)
        .env("CHILDPREDICTOR_CACHE", concat!(env!("CARGO_TARGET_TMPDIR"), "/childpredictor-cache"))
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    cli(args).status.code().unwrap()
}

fn hash_tree(dir: &Path) -> Vec<(PathBuf, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(std::fs::read(&p).unwrap());
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), format!("{digest:x}")));
            }
        }
    }
    out.sort();
    out
}

fn file_hash(p: &Path) -> String {
    format!("{:x}", Sha256::digest(std::fs::read(p).unwrap()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data plus a full tiny training run, shared by the tests below.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    fn ckpt(&self, step: u8) -> PathBuf {
        self.root.join("run").join(format!("step{step}.ckpt"))
    }

    fn config(&self) -> PathBuf {
        self.root.join("tiny.conf")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("tiny.conf"), TINY).unwrap();
        let data = root.join("data");
        ok(&["synth", "--families", "4", "--seed", "1", "--out", s(&data), "--resolution", "32", "--unpaired", "4", "--val-families", "3"]);
        let run = root.join("run");
        ok(&["train", "--config", s(&root.join("tiny.conf")), "--step", "all", "--manifest", s(&data.join("manifest.json")), "--out", s(&run)]);
        Fixture { _dir: dir, root }
    })
}

#[test]
fn synth_is_deterministic_and_validates_family_count() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--families", "10", "--seed", "1", "--out", s(out), "--resolution", "16"]);
    }
    assert_eq!(hash_tree(&a), hash_tree(&b));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["families"].as_array().unwrap().len(), 10);
    assert_eq!(code(&["synth", "--families", "0", "--out", s(&dir.path().join("c"))]), 2);
}

#[test]
fn train_writes_four_checkpoints_and_a_loss_log() {
    let f = fixture();
    for step in 1..=4 {
        assert!(f.ckpt(step).exists());
    }
    let log = std::fs::read_to_string(f.root.join("run/losses.csv")).unwrap();
    assert!(log.starts_with("step,epoch,iter,loss,value\n"));
    assert!(log.lines().skip(1).all(|l| l.split(',').count() == 5));
    assert!(log.contains(",child_mode_seek,"));
}

#[test]
fn train_exit_codes() {
    let f = fixture();
    let manifest = f.data().join("manifest.json");
    let (out, config, step1) = (f.root.join("dep"), f.config(), f.ckpt(1));
    let args = |step: &'static str| vec!["train", "--config", s(&config), "--step", step, "--manifest", s(&manifest), "--out", s(&out)];
    assert_eq!(code(&args("3")), 3);
    let mut with_step1 = args("3");
    with_step1.extend(["--resume", s(&step1)]);
    assert_eq!(code(&with_step1), 3);
    assert_eq!(code(&args("5")), 2);
}

#[test]
fn no_mode_seek_ablation_has_no_mode_seek_log_entries() {
    let f = fixture();
    let conf = f.root.join("ablation.conf");
    std::fs::write(&conf, format!("{TINY}no_mode_seek = 1\n")).unwrap();
    let out = f.root.join("ablation");
    ok(&["train", "--config", s(&conf), "--step", "1", "--manifest", s(&f.data().join("manifest.json")), "--out", s(&out)]);
    let log = std::fs::read_to_string(out.join("losses.csv")).unwrap();
    assert!(log.contains(",child_adv,"));
    assert!(!log.contains("mode_seek"));
}

#[test]
fn predict_writes_n_images_and_a_grid() {
    let f = fixture();
    let fam = f.data().join("images/train-0000");
    let (father, mother, ckpt) = (fam.join("father.png"), fam.join("mother.png"), f.ckpt(4));
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["predict", "--ckpt", s(&ckpt), "--father", s(&father), "--mother", s(&mother), "--out", s(out)];
        args.extend(extra);
        cli(&args)
    };
    let dir = f.root.join("pred");
    assert!(run(&dir.join("a"), &["--n", "40", "--seed", "2"]).status.success());
    let files = hash_tree(&dir.join("a"));
    assert_eq!(files.len(), 41);
    assert!(files.iter().any(|(p, _)| p == Path::new("grid.png")));
    // 40 faces tile into 7 columns and 6 rows of 32-pixel cells
    let grid = image_size(&dir.join("a/grid.png"));
    assert_eq!(grid, (7 * 32, 6 * 32));
    assert!(run(&dir.join("b"), &["--n", "40", "--seed", "2"]).status.success());
    assert_eq!(files, hash_tree(&dir.join("b")));

    assert_eq!(run(&dir.join("c"), &["--external", "gt"]).status.code(), Some(2));
    let sidecar = f.root.join("child_attrs.json");
    std::fs::write(&sidecar, r#"{"gender": 1, "age": 0, "expression": 1, "glasses": 1}"#).unwrap();
    assert!(run(&dir.join("d"), &["--external", "gt", "--attrs", s(&sidecar), "--n", "3"]).status.success());
    assert_eq!(hash_tree(&dir.join("d")).len(), 4);

    let early = cli(&["predict", "--ckpt", s(&f.ckpt(1)), "--father", s(&father), "--mother", s(&mother), "--out", s(&dir.join("e"))]);
    assert_eq!(early.status.code(), Some(3));
}

/// Width and height from the PNG header.
fn image_size(p: &Path) -> (u32, u32) {
    let bytes = std::fs::read(p).unwrap();
    let be = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    (be(16), be(20))
}

#[test]
fn eval_reports_requested_metrics_only() {
    let f = fixture();
    let (out, ckpt, val) = (f.root.join("report.json"), f.ckpt(4), f.data().join("val.json"));
    let args = ["eval", "--ckpt", s(&ckpt), "--manifest", s(&val), "--groups", "2", "--metrics", "cos", "--seed", "1", "--out", s(&out)];
    ok(&args);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["group_count"], 2);
    assert!(report["cosine_mean"].is_number() && report["shuffled_baseline"].is_number());
    assert!(report.get("fid_mean").is_none() && report.get("lpips_mean").is_none());
    let first = file_hash(&out);
    ok(&args);
    assert_eq!(first, file_hash(&out));

    let mut bad = args;
    bad[8] = "cos,psnr";
    assert_eq!(code(&bad), 2);
    assert_eq!(code(&["eval", "--ckpt", s(&f.ckpt(4)), "--manifest", s(&f.data().join("manifest.json")), "--out", s(&out)]), 2);
}

#[test]
fn latent_walk_frame_counts() {
    let f = fixture();
    let dir = f.root.join("walk");
    std::fs::create_dir_all(&dir).unwrap();
    let walk = |factor: &str, steps: &str, name: &str| {
        cli(&["latent-walk", "--ckpt", s(&f.ckpt(4)), "--factor", factor, "--steps", steps, "--seed", "4", "--out", s(&dir.join(name))])
    };
    assert!(walk("variety", "8", "v.png").status.success());
    assert_eq!(image_size(&dir.join("v.png")), (8 * 32, 32));
    assert!(walk("variety", "8", "v2.png").status.success());
    assert_eq!(file_hash(&dir.join("v.png")), file_hash(&dir.join("v2.png")));
    assert!(walk("external", "8", "e.png").status.success());
    assert_eq!(image_size(&dir.join("e.png")), (5 * 32, 32));
    assert!(walk("genetic", "3", "g.png").status.success());
    assert_eq!(walk("variety", "1", "x.png").status.code(), Some(2));
    assert_eq!(walk("hair", "4", "x.png").status.code(), Some(2));
}
