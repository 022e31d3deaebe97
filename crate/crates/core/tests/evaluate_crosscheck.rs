//! The aggregated report must agree with individually invoked metric ops,
//! plus distribution-level tensor invariants.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dreg_core::field::{apply_affine, smoothness_report, AffineParams, DisplacementField};
use dreg_core::io::Volume;
use dreg_core::metrics::{
    evaluate, modality_average, mse, mutual_information, ncc, region_metrics, MI_BINS,
};
use dreg_core::net::RegistrationResult;
use dreg_core::synth::{synth_pair, SynthConfig};
use dreg_core::tensor::{softmax, Tensor};

fn identity_result(fixed: &Volume, moved: Volume) -> RegistrationResult {
    let shape = fixed.shape;
    RegistrationResult {
        affine: AffineParams::identity(),
        phi_aff: apply_affine(&AffineParams::identity(), shape),
        velocities: vec![],
        phi_def: DisplacementField::zeros(shape),
        moved,
    }
}

#[test]
fn identity_registration_of_identical_pair_is_perfect() {
    let p = synth_pair((16, 16, 16), &SynthConfig::default(), 3).unwrap();
    let result = identity_result(&p.fixed, p.fixed.clone());
    let rep = evaluate(&p.fixed, &result, Some((&p.masks_f, &p.masks_f))).unwrap();
    assert_eq!(rep.dice, Some(1.0));
    assert_eq!(rep.hd, Some(0.0));
    assert_eq!(rep.assd, Some(0.0));
    assert_eq!(rep.mse, 0.0);
    assert_eq!(rep.folding_fraction, Some(0.0));
    assert!((rep.ncc - 1.0).abs() < 1e-7);
}

#[test]
fn report_matches_individually_invoked_metrics() {
    let p = synth_pair(
        (16, 16, 16),
        &SynthConfig {
            max_disp: 4.0,
            ..SynthConfig::default()
        },
        9,
    )
    .unwrap();
    // a deliberately imperfect "registration": moved = moving unchanged
    let result = identity_result(&p.fixed, p.moving.clone());
    let rep = evaluate(&p.fixed, &result, Some((&p.masks_m, &p.masks_f))).unwrap();
    assert!(rep.dice.unwrap() < 1.0);

    let want_ncc = modality_average(ncc, &p.moving, &p.fixed).unwrap();
    let want_mi = modality_average(
        |a, b, m| mutual_information(a, b, m, MI_BINS),
        &p.moving,
        &p.fixed,
    )
    .unwrap();
    let want_mse = modality_average(mse, &p.moving, &p.fixed).unwrap();
    assert_eq!(rep.ncc, want_ncc);
    assert_eq!(rep.mi, want_mi);
    assert_eq!(rep.mse, want_mse);

    let (d, h, a) =
        region_metrics(&p.masks_m, &p.masks_f, &result.phi_aff, &result.phi_def).unwrap();
    assert_eq!(rep.dice, Some(d));
    assert_eq!(rep.hd, Some(h));
    assert_eq!(rep.assd, Some(a));

    let smooth = smoothness_report(result.phi_def.vectors()).unwrap();
    assert_eq!(rep.jacobian_std, Some(smooth.jacobian_std));
    assert_eq!(rep.folding_fraction, Some(smooth.folding_fraction));

    // all fields finite
    for v in [rep.ncc, rep.mi, rep.mse] {
        assert!(v.is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Softmax outputs are positive and sum to 1 along the chosen axis to
    /// within 1e-12, for random shapes, axes and logits.
    #[test]
    fn softmax_is_a_distribution(seed in 0u64..10_000, axis in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [
            rng.random_range(1..5usize),
            rng.random_range(1..5usize),
            rng.random_range(1..5usize),
        ];
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let t = Tensor::constant(data, &shape).unwrap();
        let y = softmax(&t, axis).unwrap();
        prop_assert!(y.data().iter().all(|&v| v > 0.0));
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0;
                for j in 0..lane {
                    s += y.data()[o * lane * inner + j * inner + i];
                }
                prop_assert!((s - 1.0).abs() < 1e-12, "lane sum {}", s);
            }
        }
    }
}
