//! End-to-end checks of the command-line interface: exit codes, error
//! messages, determinism, and the offline-mode flag warning.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hsdacs"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hsdacs-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const SMALL_CFG: &str = "\
d_model = 16
heads = 2
enc_layers = 1
dec_layers = 1
d_ffn = 32
vocab_size = 10
max_lookahead = 6
halting_mode = hsdacs
subsample_factor = 2
model_seed = 11
epochs = 1
batch_size = 8
base_lr = 1.0
warmup_steps = 50
train_samples = 16
train_seed = 2
data_vocab = 8
len_min = 3
len_max = 5
dur_min = 2
dur_max = 3
d_feat = 6
";

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Train a small checkpoint once for the decode-side tests.
fn trained_checkpoint(dir: &Path) -> PathBuf {
    let cfg_path = dir.join("small.cfg");
    let ckpt = dir.join("small.ckpt");
    std::fs::write(&cfg_path, SMALL_CFG).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--checkpoint")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));
    ckpt
}

#[test]
fn unknown_flag_exits_one_and_names_it() {
    let out = bin()
        .args(["decode", "--checkponit", "x.ckpt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr_of(&out).contains("--checkponit"),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn unknown_command_exits_one() {
    let out = bin().args(["transcode"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("transcode"));
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tmp_dir("badkey");
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "d_modle = 16\n").unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("d_modle"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn unreadable_checkpoint_exits_two() {
    let out = bin()
        .args(["decode", "--checkpoint", "/nonexistent/nope.ckpt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
}

#[test]
fn train_decode_sweep_export_round_trip() {
    let dir = tmp_dir("full");
    let ckpt = trained_checkpoint(&dir);

    // Decode twice: identical command lines give identical output.
    let run_decode = || {
        let out = bin()
            .args(["decode", "--checkpoint"])
            .arg(&ckpt)
            .args(["--num-utts", "5", "--mode", "hsdacs", "--threshold", "2.0"])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr_of(&out));
        stdout_of(&out)
    };
    let a = run_decode();
    let b = run_decode();
    assert_eq!(a, b, "decode output not deterministic");
    assert!(a.contains("token error rate"));

    // Sweep produces one row per threshold in the table layout.
    let out = bin()
        .args(["sweep", "--checkpoint"])
        .arg(&ckpt)
        .args(["--thresholds", "2.0,1.0", "--num-utts", "4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let table = stdout_of(&out);
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("joint-thr\t"));
    assert_eq!(lines.len(), 3, "{table}");

    // Singleton threshold list: header plus exactly one row.
    let out = bin()
        .args(["sweep", "--checkpoint"])
        .arg(&ckpt)
        .args(["--thresholds", "2.0", "--num-utts", "2", "--mode", "dacs"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let table = stdout_of(&out);
    assert!(table.starts_with("thr\t"));
    assert_eq!(table.lines().count(), 2, "{table}");

    // Alignment export writes CSV + PGM per head.
    let align_dir = dir.join("align");
    let out = bin()
        .args(["export-align", "--checkpoint"])
        .arg(&ckpt)
        .args(["--utt-seed", "42", "--layer", "0", "--out"])
        .arg(&align_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(align_dir.join("layer0_head0.csv").exists());
    assert!(align_dir.join("layer0_head0.pgm").exists());
    assert!(align_dir.join("layer0_head1.pgm").exists());
    let pgm = std::fs::read_to_string(align_dir.join("layer0_head0.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n"));

    // Out-of-range layer is a usage error.
    let out = bin()
        .args(["export-align", "--checkpoint"])
        .arg(&ckpt)
        .args(["--utt-seed", "1", "--layer", "9", "--out"])
        .arg(&align_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn grad_check_exits_zero() {
    let out = bin().args(["grad-check"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(stdout_of(&out).contains("PASS"));
}

#[test]
fn offline_mode_warns_but_ignores_halting_flags() {
    let dir = tmp_dir("warn");
    let ckpt = trained_checkpoint(&dir);
    let out = bin()
        .args(["decode", "--checkpoint"])
        .arg(&ckpt)
        .args(["--mode", "offline", "--threshold", "3.0", "--num-utts", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("ignored"), "{}", stderr_of(&out));
    std::fs::remove_dir_all(&dir).ok();
}
