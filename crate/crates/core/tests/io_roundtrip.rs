//! Container bit-exactness, structured error cases, the raw import shim and
//! synthetic-data contracts.

use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dreg_core::error::DregError;
use dreg_core::field::smoothness_report;
use dreg_core::io::{
    import_raw, load_checkpoint, read_volume, save_checkpoint, write_volume, Volume,
};
use dreg_core::net::{Model, NetConfig};
use dreg_core::synth::{synth_pair, SynthConfig};
use dreg_core::tensor::Tensor;

fn tmpdir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn random_volume(seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..2 * 4 * 5 * 6)
        .map(|_| rng.random_range(-10.0..10.0))
        .collect();
    Volume::new(2, (4, 5, 6), [0.5, 1.0, 2.0], data).unwrap()
}

#[test]
fn volume_roundtrip_is_bit_exact() {
    let dir = tmpdir();
    let path = dir.path().join("v.dregvol");
    let v = random_volume(1);
    write_volume(&path, &v).unwrap();
    let r = read_volume(&path).unwrap();
    assert_eq!(v, r);
    // second write produces identical bytes
    let path2 = dir.path().join("v2.dregvol");
    write_volume(&path2, &r).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
}

#[test]
fn volume_error_cases_are_distinct() {
    let dir = tmpdir();
    let path = dir.path().join("bad.dregvol");
    fs::write(&path, b"NOTMAGIC rest").unwrap();
    assert!(matches!(
        read_volume(&path),
        Err(DregError::BadMagic { .. })
    ));

    // valid header but truncated payload
    let good = dir.path().join("good.dregvol");
    write_volume(&good, &random_volume(2)).unwrap();
    let bytes = fs::read(&good).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(
        read_volume(&path),
        Err(DregError::Truncated { .. })
    ));

    // version bump
    let mut tampered = bytes.clone();
    tampered[8] = 9;
    fs::write(&path, &tampered).unwrap();
    assert!(matches!(
        read_volume(&path),
        Err(DregError::VersionMismatch { .. })
    ));
}

#[test]
fn checkpoint_roundtrip_and_bit_identity() {
    let dir = tmpdir();
    let cfg = NetConfig {
        input_channels: 1,
        encoder_widths: [2, 2, 4, 4],
        affine_widths: [2, 2, 2, 4, 4],
        ..NetConfig::default()
    };
    let model = Model::new(cfg, 7).unwrap();
    let opt = dreg_core::train::fresh_moments(model.params());
    let ckpt = model.to_checkpoint(42, Some(opt));
    let p1 = dir.path().join("a.dregckp");
    save_checkpoint(&p1, &ckpt).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    assert_eq!(loaded, ckpt);
    let p2 = dir.path().join("b.dregckp");
    save_checkpoint(&p2, &loaded).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    assert_eq!(loaded.step, 42);
}

#[test]
fn checkpoint_restores_forward_bit_exactly() {
    let cfg = NetConfig {
        input_channels: 1,
        encoder_widths: [2, 2, 4, 4],
        affine_widths: [2, 2, 2, 4, 4],
        ..NetConfig::default()
    };
    let model = Model::new(cfg, 11).unwrap();
    let dir = tmpdir();
    let path = dir.path().join("m.dregckp");
    save_checkpoint(&path, &model.to_checkpoint(0, None)).unwrap();
    let restored = Model::from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..16 * 16 * 16)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let img = Tensor::constant(data, &[1, 16, 16, 16]).unwrap();
    let a = model.forward(&img, &img, 1).unwrap();
    let b = restored.forward(&img, &img, 1).unwrap();
    assert_eq!(a.moved.data(), b.moved.data());
    assert_eq!(a.phi_def.data(), b.phi_def.data());
}

#[test]
fn checkpoint_mismatch_is_structured_error() {
    let cfg = NetConfig {
        input_channels: 1,
        encoder_widths: [2, 2, 4, 4],
        affine_widths: [2, 2, 2, 4, 4],
        ..NetConfig::default()
    };
    let model = Model::new(cfg, 1).unwrap();
    let mut ckpt = model.to_checkpoint(0, None);
    // tamper a parameter shape so it no longer matches the config
    ckpt.params[0].1 = vec![1, 1, 3, 3, 3];
    ckpt.params[0].2 = vec![0.0; 27];
    assert!(matches!(
        Model::from_checkpoint(&ckpt),
        Err(DregError::CheckpointMismatch(_))
    ));
}

#[test]
fn raw_import_shim_reads_sidecar_header() {
    let dir = tmpdir();
    let v = random_volume(5);
    let raw = dir.path().join("vol.raw");
    let hdr = dir.path().join("vol.hdr");
    let bytes: Vec<u8> = v.data.iter().flat_map(|f| f.to_le_bytes()).collect();
    fs::write(&raw, bytes).unwrap();
    fs::write(
        &hdr,
        "# raw import header\nchannels 2\ndepth 4\nheight 5\nwidth 6\nspacing_x 0.5\nspacing_y 1\nspacing_z 2\n",
    )
    .unwrap();
    let r = import_raw(&raw, &hdr).unwrap();
    assert_eq!(r, v);
    // truncated payload is a structured error
    fs::write(&raw, [0u8; 10]).unwrap();
    assert!(matches!(
        import_raw(&raw, &hdr),
        Err(DregError::Truncated { .. })
    ));
}

#[test]
fn synthetic_gt_field_never_folds_at_moderate_amplitude() {
    // empirical scan: max_disp <= 6 on 48^3 stays diffeomorphic
    let cfg = SynthConfig {
        max_disp: 6.0,
        noise_sigma: 0.0,
        ..SynthConfig::default()
    };
    for seed in 0..50u64 {
        let pair = synth_pair((48, 48, 48), &cfg, seed).unwrap();
        let rep = smoothness_report(pair.gt_field.vectors()).unwrap();
        assert_eq!(rep.folding_fraction, 0.0, "seed {seed} folded");
    }
}
