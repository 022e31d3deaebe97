//! Independent loop-based re-computations of every training objective, plus
//! the analytic affine-loss cases and invariance properties.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dreg_core::loss::{affine_loss, dice_loss, nlcc_loss, smoothness_loss};
use dreg_core::mat3;
use dreg_core::tensor::Tensor;

fn rand_volume(c: usize, e: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * e * e * e)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    Tensor::constant(data, &[c, e, e, e]).unwrap()
}

// ---- smoothness oracle ----

fn smoothness_oracle(phi: &[f64], shape: (usize, usize, usize)) -> f64 {
    let (d, h, w) = shape;
    let n = d * h * w;
    let mut acc = 0.0;
    for c in 0..3 {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let q = c * n + (z * h + y) * w + x;
                    if x + 1 < w {
                        let g = phi[q + 1] - phi[q];
                        acc += g * g;
                    }
                    if y + 1 < h {
                        let g = phi[q + w] - phi[q];
                        acc += g * g;
                    }
                    if z + 1 < d {
                        let g = phi[q + h * w] - phi[q];
                        acc += g * g;
                    }
                }
            }
        }
    }
    acc / n as f64
}

#[test]
fn smoothness_matches_loop_oracle() {
    for seed in [3u64, 4, 5] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..3 * 16 * 16 * 16)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let phi = Tensor::constant(data.clone(), &[3, 16, 16, 16]).unwrap();
        let got = smoothness_loss(&phi).unwrap().item();
        let want = smoothness_oracle(&data, (16, 16, 16));
        assert!((got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
    }
}

// ---- NLCC oracle ----

fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..x.len() {
        cov += (x[i] - mx) * (y[i] - my);
        vx += (x[i] - mx) * (x[i] - mx);
        vy += (y[i] - my) * (y[i] - my);
    }
    cov / (vx.sqrt() * vy.sqrt() + 1e-8)
}

fn nlcc_oracle(moved: &[f64], fixed: &[f64], c_n: usize, e: usize) -> f64 {
    let n = e * e * e;
    let mut total = 0.0;
    for c in 0..c_n {
        let mut acc = 0.0;
        let mut count = 0usize;
        let mut z = 0;
        while z + 8 <= e {
            let mut y = 0;
            while y + 8 <= e {
                let mut x = 0;
                while x + 8 <= e {
                    let mut pm = Vec::with_capacity(512);
                    let mut pf = Vec::with_capacity(512);
                    for dz in 0..8 {
                        for dy in 0..8 {
                            for dx in 0..8 {
                                let q = c * n + ((z + dz) * e + y + dy) * e + x + dx;
                                pm.push(moved[q]);
                                pf.push(fixed[q]);
                            }
                        }
                    }
                    let rho = pearson_oracle(&pm, &pf);
                    acc += rho * rho;
                    count += 1;
                    x += 3;
                }
                y += 3;
            }
            z += 3;
        }
        total += -acc / count as f64;
    }
    total
}

#[test]
fn nlcc_matches_loop_oracle() {
    for (seed, channels) in [(11u64, 1usize), (12, 2)] {
        let moved = rand_volume(channels, 16, seed);
        let fixed = rand_volume(channels, 16, seed + 50);
        let got = nlcc_loss(&moved, &fixed).unwrap().item();
        let want = nlcc_oracle(moved.data(), fixed.data(), channels, 16);
        assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn nlcc_affine_intensity_invariance() {
    let x = rand_volume(1, 16, 21);
    let baseline = nlcc_loss(&x, &x).unwrap().item();
    for (a, b) in [(2.0, 0.0), (0.5, 1.0), (3.0, -0.7)] {
        let y = x.mul_scalar(a).add_scalar(b);
        let l = nlcc_loss(&x, &y).unwrap().item();
        assert!(
            (l - baseline).abs() < 1e-9,
            "a={a} b={b}: {l} vs {baseline}"
        );
    }
}

// ---- Dice oracle ----

/// Test-local trilinear warp with border clamping, re-deriving the loss's
/// mask transport.
fn warp_oracle(vol: &[f64], field: &[f64], c_n: usize, e: usize) -> Vec<f64> {
    let n = e * e * e;
    let mut out = vec![0.0; c_n * n];
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                let q = (z * e + y) * e + x;
                let sx = (x as f64 + field[q]).clamp(0.0, (e - 1) as f64);
                let sy = (y as f64 + field[n + q]).clamp(0.0, (e - 1) as f64);
                let sz = (z as f64 + field[2 * n + q]).clamp(0.0, (e - 1) as f64);
                let (x0, y0, z0) = (
                    (sx.floor() as usize).min(e - 2),
                    (sy.floor() as usize).min(e - 2),
                    (sz.floor() as usize).min(e - 2),
                );
                let (fx, fy, fz) = (sx - x0 as f64, sy - y0 as f64, sz - z0 as f64);
                for c in 0..c_n {
                    let at = |zz: usize, yy: usize, xx: usize| vol[c * n + (zz * e + yy) * e + xx];
                    let v = (1.0 - fz)
                        * ((1.0 - fy) * ((1.0 - fx) * at(z0, y0, x0) + fx * at(z0, y0, x0 + 1))
                            + fy * ((1.0 - fx) * at(z0, y0 + 1, x0) + fx * at(z0, y0 + 1, x0 + 1)))
                        + fz * ((1.0 - fy)
                            * ((1.0 - fx) * at(z0 + 1, y0, x0) + fx * at(z0 + 1, y0, x0 + 1))
                            + fy * ((1.0 - fx) * at(z0 + 1, y0 + 1, x0)
                                + fx * at(z0 + 1, y0 + 1, x0 + 1)));
                    out[c * n + q] = v;
                }
            }
        }
    }
    out
}

fn dice_oracle(warped: &[f64], fixed: &[f64], c_n: usize, n: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..c_n {
        let a = &warped[c * n..(c + 1) * n];
        let b = &fixed[c * n..(c + 1) * n];
        let inter: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let sums: f64 = a.iter().sum::<f64>() + b.iter().sum::<f64>();
        acc += (2.0 * inter + 1e-5) / (sums + 1e-5);
    }
    -acc / c_n as f64
}

#[test]
fn dice_matches_loop_oracle() {
    let e = 16;
    let n = e * e * e;
    for seed in [31u64, 32] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks_m = rand_volume(2, e, seed + 1);
        let masks_f = rand_volume(2, e, seed + 2);
        let aff: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-0.8..0.8)).collect();
        let def: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-0.8..0.8)).collect();
        let phi_aff = Tensor::constant(aff.clone(), &[3, e, e, e]).unwrap();
        let phi_def = Tensor::constant(def.clone(), &[3, e, e, e]).unwrap();
        let got = dice_loss(&masks_m, &masks_f, &phi_aff, &phi_def)
            .unwrap()
            .item();
        let once = warp_oracle(masks_m.data(), &aff, 2, e);
        let twice = warp_oracle(&once, &def, 2, e);
        let want = dice_oracle(&twice, masks_f.data(), 2, n);
        assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn dice_single_structure_8cube_oracle() {
    let e = 8;
    let n = e * e * e;
    let mut mask_m = vec![0.0; n];
    let mut mask_f = vec![0.0; n];
    for z in 2..5 {
        for y in 2..5 {
            for x in 2..5 {
                mask_m[(z * e + y) * e + x] = 1.0;
                mask_f[(z * e + y) * e + x + 1] = 1.0;
            }
        }
    }
    let mm = Tensor::constant(mask_m.clone(), &[1, e, e, e]).unwrap();
    let mf = Tensor::constant(mask_f.clone(), &[1, e, e, e]).unwrap();
    let zero = Tensor::zeros(&[3, e, e, e]);
    let got = dice_loss(&mm, &mf, &zero, &zero).unwrap().item();
    let want = dice_oracle(&mask_m, &mask_f, 1, n);
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn dice_symmetric_under_mask_swap_with_identity_fields() {
    let a = rand_volume(3, 8, 41);
    let b = rand_volume(3, 8, 42);
    let zero = Tensor::zeros(&[3, 8, 8, 8]);
    let ab = dice_loss(&a, &b, &zero, &zero).unwrap().item();
    let ba = dice_loss(&b, &a, &zero, &zero).unwrap().item();
    assert!((ab - ba).abs() < 1e-12);
}

// ---- affine loss properties ----

fn rotation_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = mat3::matmul(
        &mat3::axis_rotation(2, rng.random_range(-3.1..3.1)),
        &mat3::matmul(
            &mat3::axis_rotation(1, rng.random_range(-3.1..3.1)),
            &mat3::axis_rotation(0, rng.random_range(-3.1..3.1)),
        ),
    );
    let mut a_star = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            a_star[3 * i + j] = r[i][j] - if i == j { 1.0 } else { 0.0 };
        }
    }
    affine_loss(&Tensor::constant(a_star.to_vec(), &[9]).unwrap())
        .unwrap()
        .item()
}

#[test]
fn affine_loss_zero_exactly_on_rotations() {
    for seed in 0..200u64 {
        let l = rotation_loss(seed);
        assert!(l.abs() < 1e-9, "seed {seed}: loss {l}");
    }
}

#[test]
fn affine_loss_positive_off_rotations() {
    // perturbed rotations and shears must score positive
    let cases: [[f64; 9]; 3] = [
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [-0.1, 0.05, 0.0, 0.02, 0.1, 0.0, 0.0, 0.0, -0.15],
    ];
    for a in cases {
        let l = affine_loss(&Tensor::constant(a.to_vec(), &[9]).unwrap())
            .unwrap()
            .item();
        assert!(l > 1e-4, "expected positive loss, got {l}");
    }
}

#[test]
fn affine_loss_transpose_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let mut a = [0.0f64; 9];
        for v in a.iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        let mut at = [0.0f64; 9];
        for i in 0..3 {
            for j in 0..3 {
                at[3 * j + i] = a[3 * i + j];
            }
        }
        let la = affine_loss(&Tensor::constant(a.to_vec(), &[9]).unwrap())
            .unwrap()
            .item();
        let lt = affine_loss(&Tensor::constant(at.to_vec(), &[9]).unwrap())
            .unwrap()
            .item();
        assert!((la - lt).abs() < 1e-9, "{la} vs {lt}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Scaling one axis by s yields the closed-form loss
    /// (s^2 + 1/s^2 - 2) + (s - 1)^2.
    #[test]
    fn affine_loss_axis_scaling_closed_form(s in 0.4f64..2.5) {
        let mut a = [0.0f64; 9];
        a[0] = s - 1.0;
        let l = affine_loss(&Tensor::constant(a.to_vec(), &[9]).unwrap()).unwrap().item();
        let want = (s * s + 1.0 / (s * s) - 2.0) + (s - 1.0) * (s - 1.0);
        prop_assert!((l - want).abs() < 1e-9, "{} vs {}", l, want);
    }
}
