//! End-to-end checks of the `dreg` binary: subcommand behavior, exit codes
//! and byte-level idempotence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dreg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dreg"))
}

fn run(args: &[&str]) -> Output {
    dreg().args(args).output().expect("spawn dreg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn tmpdir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn synth(dir: &Path, n: usize, seed: u64) {
    let out = run(&[
        "synth",
        "--shape",
        "32",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out-dir",
        &path_str(dir),
        "--max-disp",
        "6",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("train.cfg");
    fs::write(
        &cfg,
        "lr0=1e-3\nepochs=1\nsteps_per_epoch=2\nhalve_after=4,7\nseed=1\n\
         input_channels=1\nwidths=4,8,16,32\naffine_widths=4,8,16,32,32\n",
    )
    .unwrap();
    cfg
}

#[test]
fn synth_writes_readable_deterministic_pairs() {
    let dir = tmpdir();
    let d1 = dir.path().join("a");
    let d2 = dir.path().join("b");
    synth(&d1, 2, 9);
    synth(&d2, 2, 9);
    for stem in ["pair_000", "pair_001"] {
        for kind in ["moving", "fixed", "masks_moving", "masks_fixed", "gt_field"] {
            let f1 = d1.join(format!("{stem}.{kind}.dregvol"));
            let f2 = d2.join(format!("{stem}.{kind}.dregvol"));
            let v = dreg_core::io::read_volume(&f1).expect("readable volume");
            assert!(v.voxels() > 0);
            assert_eq!(
                fs::read(&f1).unwrap(),
                fs::read(&f2).unwrap(),
                "{stem}.{kind}"
            );
        }
    }
    // different seed differs
    let d3 = dir.path().join("c");
    synth(&d3, 1, 10);
    assert_ne!(
        fs::read(d1.join("pair_000.moving.dregvol")).unwrap(),
        fs::read(d3.join("pair_000.moving.dregvol")).unwrap()
    );
}

#[test]
fn synth_rejects_indivisible_shape_and_unknown_flags() {
    let dir = tmpdir();
    let out = run(&[
        "synth",
        "--shape",
        "48",
        "--n",
        "1",
        "--out-dir",
        &path_str(dir.path()),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("divisible by 32"));

    let out = run(&[
        "synth",
        "--shape",
        "32",
        "--n",
        "1",
        "--out-dir",
        "x",
        "--bogus",
    ]);
    assert_eq!(code(&out), 1, "unknown flags are usage errors");
}

#[test]
fn train_register_evaluate_roundtrip() {
    let dir = tmpdir();
    let data = dir.path().join("data");
    synth(&data, 2, 21);
    let cfg = write_config(dir.path());
    let ckpt = dir.path().join("model.dregckp");

    let out = run(&[
        "train",
        "--config",
        &path_str(&cfg),
        "--data-dir",
        &path_str(&data),
        "--out-ckpt",
        &path_str(&ckpt),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    let log = fs::read_to_string(dir.path().join("model.dregckp.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log
        .lines()
        .next()
        .unwrap()
        .starts_with("step=1 lr=0.001 l_aff="));

    // resumed run continues the step count
    let out = run(&[
        "train",
        "--config",
        &path_str(&cfg),
        "--data-dir",
        &path_str(&data),
        "--out-ckpt",
        &path_str(&ckpt),
        "--resume",
        &path_str(&ckpt),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let resumed = dreg_core::io::load_checkpoint(&ckpt).unwrap();
    assert_eq!(resumed.step, 4);

    // register writes moved volume and field
    let moved = dir.path().join("moved.dregvol");
    let field = dir.path().join("field.dregvol");
    let out = run(&[
        "register",
        "--ckpt",
        &path_str(&ckpt),
        "--moving",
        &path_str(&data.join("pair_000.moving.dregvol")),
        "--fixed",
        &path_str(&data.join("pair_000.fixed.dregvol")),
        "--out-moved",
        &path_str(&moved),
        "--out-field",
        &path_str(&field),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let field_vol = dreg_core::io::read_volume(&field).unwrap();
    assert_eq!(field_vol.channels, 3);

    // cascades=2 changes the output field
    let moved2 = dir.path().join("moved2.dregvol");
    let field2 = dir.path().join("field2.dregvol");
    let out = run(&[
        "register",
        "--ckpt",
        &path_str(&ckpt),
        "--moving",
        &path_str(&data.join("pair_000.moving.dregvol")),
        "--fixed",
        &path_str(&data.join("pair_000.fixed.dregvol")),
        "--out-moved",
        &path_str(&moved2),
        "--out-field",
        &path_str(&field2),
        "--cascades",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_ne!(fs::read(&field).unwrap(), fs::read(&field2).unwrap());

    // evaluate the registration against the fixed image
    let report = dir.path().join("report.txt");
    let out = run(&[
        "evaluate",
        "--moved",
        &path_str(&moved),
        "--fixed",
        &path_str(&data.join("pair_000.fixed.dregvol")),
        "--field",
        &path_str(&field),
        "--out",
        &path_str(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    for key in ["ncc ", "mi ", "mse ", "jacobian_std ", "folding_fraction "] {
        assert!(text.contains(key), "missing {key} in {text}");
    }

    // register is idempotent: identical inputs give identical bytes
    let moved3 = dir.path().join("moved3.dregvol");
    let field3 = dir.path().join("field3.dregvol");
    let out = run(&[
        "register",
        "--ckpt",
        &path_str(&ckpt),
        "--moving",
        &path_str(&data.join("pair_000.moving.dregvol")),
        "--fixed",
        &path_str(&data.join("pair_000.fixed.dregvol")),
        "--out-moved",
        &path_str(&moved3),
        "--out-field",
        &path_str(&field3),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(&moved).unwrap(), fs::read(&moved3).unwrap());
    assert_eq!(fs::read(&field).unwrap(), fs::read(&field3).unwrap());
}

#[test]
fn train_missing_data_dir_is_data_error() {
    let dir = tmpdir();
    let cfg = write_config(dir.path());
    let out = run(&[
        "train",
        "--config",
        &path_str(&cfg),
        "--data-dir",
        &path_str(&dir.path().join("nope")),
        "--out-ckpt",
        &path_str(&dir.path().join("m.dregckp")),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn register_mismatched_volume_is_data_error() {
    let dir = tmpdir();
    let data = dir.path().join("data");
    synth(&data, 1, 31);
    let cfg = write_config(dir.path());
    let ckpt = dir.path().join("m.dregckp");
    let out = run(&[
        "train",
        "--config",
        &path_str(&cfg),
        "--data-dir",
        &path_str(&data),
        "--out-ckpt",
        &path_str(&ckpt),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // masks volume has 4 channels; the checkpoint expects 1 input channel
    let out = run(&[
        "register",
        "--ckpt",
        &path_str(&ckpt),
        "--moving",
        &path_str(&data.join("pair_000.masks_moving.dregvol")),
        "--fixed",
        &path_str(&data.join("pair_000.masks_fixed.dregvol")),
        "--out-moved",
        &path_str(&dir.path().join("m.dregvol")),
        "--out-field",
        &path_str(&dir.path().join("f.dregvol")),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn evaluate_identical_inputs_and_mask_mismatch() {
    let dir = tmpdir();
    let data = dir.path().join("data");
    synth(&data, 1, 41);
    let fixed = data.join("pair_000.fixed.dregvol");
    let masks = data.join("pair_000.masks_fixed.dregvol");
    let out = run(&[
        "evaluate",
        "--moved",
        &path_str(&fixed),
        "--fixed",
        &path_str(&fixed),
        "--masks-moved",
        &path_str(&masks),
        "--masks-fixed",
        &path_str(&masks),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("dice 1\n"), "{text}");
    assert!(text.contains("mse 0\n"), "{text}");

    // channel mismatch between the mask volumes
    let out = run(&[
        "evaluate",
        "--moved",
        &path_str(&fixed),
        "--fixed",
        &path_str(&fixed),
        "--masks-moved",
        &path_str(&fixed),
        "--masks-fixed",
        &path_str(&masks),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_passes_and_broken_injection_fails() {
    let out = run(&["gradcheck", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("full_network"));
    assert!(text.lines().filter(|l| l.ends_with(" pass")).count() >= 20);

    let out = run(&["gradcheck", "--seed", "3", "--inject-broken"]);
    assert_eq!(code(&out), 3);
}
