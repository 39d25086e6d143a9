use std::path::Path;
use std::process::{Command, Output};

fn sert(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sert"))
        .args(args)
        .current_dir(dir)
        .env("RUST_BACKTRACE", "0")
        .env("RUST_LIB_BACKTRACE", "0")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = sert(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TOY: &str = "bands = 4\nchannels = 8\nrank = 2\nmemory_entries = 3\nheads = 2\nrects = 4x2\nblocks = 2\n";

#[test]
fn synth_train_denoise_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("toy.cfg"), TOY).unwrap();
    std::fs::create_dir(d.join("data")).unwrap();
    for i in 0..3 {
        let clean = format!("texture:16x16x4:{i}");
        let out = format!("data/t{i}.hsr");
        ok(d, &["synth", "--clean", &clean, "--noise", "gaussian_iid,sigma=0", "--seed", "1", "--out", &out]);
    }
    ok(
        d,
        &[
            "synth", "--clean", "texture:16x16x4:9", "--noise", "gaussian_iid,sigma=50", "--seed", "1", "--out",
            "y.hsr", "--clean-out", "x.hsr",
        ],
    );
    let header = std::fs::read(d.join("y.hsr")).unwrap();
    let header = String::from_utf8_lossy(&header[..200]);
    assert!(header.starts_with("HSR1\n") && header.contains("seed=1\n") && header.contains("recipe.sigma=50\n"));

    let log = ok(
        d,
        &[
            "train", "--config", "toy.cfg", "--data", "data", "--epochs", "4", "--seed", "2", "--ckpt", "m.ck", "--lr",
            "1e-3",
        ],
    );
    assert!(log.contains("training 12 steps"));
    ok(d, &["denoise", "--ckpt", "m.ck", "--in", "y.hsr", "--out", "xh.hsr"]);
    let kv = ok(d, &["eval", "--ref", "x.hsr", "--test", "xh.hsr", "--format", "kv"]);
    let psnr: f64 = kv
        .lines()
        .find_map(|l| l.strip_prefix("psnr_db="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(psnr.is_finite() && psnr > 10.0);
    let table = ok(d, &["eval", "--ref", "x.hsr", "--ref", "x.hsr", "--test", "y.hsr", "--test", "xh.hsr"]);
    assert!(table.lines().last().unwrap().starts_with("average"));

    ok(d, &["dump-zl", "--ckpt", "m.ck", "--in", "y.hsr", "--out", "zl.tsv"]);
    let tsv = std::fs::read_to_string(d.join("zl.tsv")).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(lines.next().unwrap(), "layer\tblock\tpatch\tgrid_row\tgrid_col\tz0\tz1");
    // 16x16 input, 4x4 patches, 2 blocks
    assert_eq!(lines.count(), 2 * 16);

    let out = sert(
        d,
        &["train", "--data", "data", "--epochs", "5", "--seed", "2", "--ckpt", "n.ck", "--resume", "m.ck"],
    );
    assert!(!out.status.success(), "resuming with a different configuration must fail");
}

#[test]
fn synth_is_reproducible_and_requires_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let args = |out: &'static str| ["synth", "--clean", "texture:12x12x3", "--noise", "mixture", "--seed", "4", "--out", out];
    ok(d, &args("a.hsr"));
    ok(d, &args("b.hsr"));
    assert_eq!(std::fs::read(d.join("a.hsr")).unwrap(), std::fs::read(d.join("b.hsr")).unwrap());
    let out = sert(d, &["synth", "--clean", "texture:12x12x3", "--noise", "mixture", "--out", "c.hsr"]);
    assert!(!out.status.success());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.hsr"), b"HSR9\nheight=1\n\n").unwrap();
    let out = sert(d, &["eval", "--ref", "bad.hsr", "--test", "bad.hsr"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
    let out = sert(d, &["synth", "--clean", "texture:8x8x2", "--noise", "pink", "--seed", "1", "--out", "z.hsr"]);
    assert!(!out.status.success());
}

#[test]
fn stats_reports_the_default_breakdown() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["stats"]);
    assert!(out.contains("1459039"));
    assert!(out.contains("multiply-accumulates at 512x512x31"));
    assert!(out.contains("assumed"));
}

#[test]
fn gradcheck_reports_parameter_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["gradcheck", "--seed", "1", "--max-entries", "3"]);
    assert!(out.contains("layers.*.blocks.*.se.memory"));
    assert!(out.contains("max relative error"));
}
