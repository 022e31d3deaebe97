//! Synthetic volume pairs: smooth random backgrounds with ellipsoidal
//! structures, deformed by a random small affine composed with a random
//! B-spline field. Stands in for clinical data at desk scale; everything is
//! a pure function of (shape, config, seed).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DregError, Result};
use crate::field::{apply_affine, compose, warp, AffineParams, DisplacementField, Interp};
use crate::io::Volume;
use crate::mat3;
use crate::tensor::Tensor;

/// Interpolation basis of the synthetic control-lattice field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BsplineOrder {
    /// Uniform cubic B-spline (default).
    Cubic,
    /// Trilinear hat-function fallback.
    Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub n_structures: usize,
    pub noise_sigma: f64,
    /// Cap on the synthetic displacement magnitude (voxels).
    pub max_disp: f64,
    /// Control points per axis of the B-spline lattice.
    pub control_points: usize,
    pub order: BsplineOrder,
    /// Scale of the random affine jitter; 0 disables the affine part.
    pub affine_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_structures: 4,
            noise_sigma: 0.02,
            max_disp: 12.0,
            control_points: 5,
            order: BsplineOrder::Cubic,
            affine_jitter: 1.0,
        }
    }
}

/// A generated pair plus the deformation that produced it.
pub struct SyntheticPair {
    pub moving: Volume,
    pub fixed: Volume,
    pub masks_m: Volume,
    pub masks_f: Volume,
    pub gt_field: DisplacementField,
    pub seed: u64,
}

fn bspline3(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + a * a * a / 2.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

fn hat(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        1.0 - a
    } else {
        0.0
    }
}

/// Random control-lattice displacement field: `control^3` vectors drawn
/// uniformly, interpolated to the full grid, then globally rescaled so the
/// maximum vector norm stays within `max_disp`. Deterministic per seed.
pub fn synth_bspline_field(
    shape: (usize, usize, usize),
    control: usize,
    max_disp: f64,
    order: BsplineOrder,
    seed: u64,
) -> Result<DisplacementField> {
    if control < 2 {
        return Err(DregError::InvalidArgument(format!(
            "b-spline lattice needs >= 2 control points per axis, got {control}"
        )));
    }
    if max_disp < 0.0 {
        return Err(DregError::InvalidArgument(
            "max_disp must be non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nc = control * control * control;
    let mut ctrl = vec![[0.0f64; 3]; nc];
    for c in ctrl.iter_mut() {
        for v in c.iter_mut() {
            *v = if max_disp > 0.0 {
                rng.random_range(-max_disp..max_disp)
            } else {
                0.0
            };
        }
    }
    let (d, h, w) = shape;
    let n = d * h * w;
    let basis = match order {
        BsplineOrder::Cubic => bspline3,
        BsplineOrder::Linear => hat,
    };
    // per-axis lattice coordinates and basis weights
    let weights = |ext: usize| -> Vec<Vec<f64>> {
        (0..ext)
            .map(|i| {
                let u = if ext > 1 {
                    i as f64 * (control - 1) as f64 / (ext - 1) as f64
                } else {
                    0.0
                };
                (0..control).map(|c| basis(u - c as f64)).collect()
            })
            .collect()
    };
    let (wz, wy, wx) = (weights(d), weights(h), weights(w));
    let mut data = vec![0.0f64; 3 * n];
    let mut q = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                for cz in 0..control {
                    let bz = wz[z][cz];
                    if bz == 0.0 {
                        continue;
                    }
                    for cy in 0..control {
                        let byz = bz * wy[y][cy];
                        if byz == 0.0 {
                            continue;
                        }
                        for cx in 0..control {
                            let wgt = byz * wx[x][cx];
                            if wgt == 0.0 {
                                continue;
                            }
                            let c = &ctrl[(cz * control + cy) * control + cx];
                            acc[0] += wgt * c[0];
                            acc[1] += wgt * c[1];
                            acc[2] += wgt * c[2];
                        }
                    }
                }
                data[q] = acc[0];
                data[n + q] = acc[1];
                data[2 * n + q] = acc[2];
                q += 1;
            }
        }
    }
    // rescale to cap rather than reject
    let mut max_norm = 0.0f64;
    for q in 0..n {
        let norm2 =
            data[q] * data[q] + data[n + q] * data[n + q] + data[2 * n + q] * data[2 * n + q];
        max_norm = max_norm.max(norm2);
    }
    let max_norm = max_norm.sqrt();
    if max_norm > max_disp && max_norm > 0.0 {
        let s = max_disp / max_norm;
        for v in data.iter_mut() {
            *v *= s;
        }
    }
    DisplacementField::new(Tensor::constant(data, &[3, d, h, w])?)
}

fn random_small_affine(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize, usize),
    jitter: f64,
) -> AffineParams {
    let angle = |rng: &mut ChaCha8Rng| rng.random_range(-0.05..0.05) * jitter;
    let r = mat3::matmul(
        &mat3::axis_rotation(2, angle(rng)),
        &mat3::matmul(
            &mat3::axis_rotation(1, angle(rng)),
            &mat3::axis_rotation(0, angle(rng)),
        ),
    );
    let mut m = r;
    for row in m.iter_mut() {
        let s = 1.0 + rng.random_range(-0.02..0.02) * jitter;
        for v in row.iter_mut() {
            *v *= s;
        }
    }
    let delta = [
        rng.random_range(-1.5..1.5) * jitter,
        rng.random_range(-1.5..1.5) * jitter,
        rng.random_range(-1.5..1.5) * jitter,
    ];
    // rotate about the volume center: t = c - M c + delta
    let c = [
        (shape.2 as f64 - 1.0) / 2.0,
        (shape.1 as f64 - 1.0) / 2.0,
        (shape.0 as f64 - 1.0) / 2.0,
    ];
    let mut t = [0.0; 3];
    for i in 0..3 {
        t[i] = c[i] - (m[i][0] * c[0] + m[i][1] * c[1] + m[i][2] * c[2]) + delta[i];
    }
    let mut a_star = m;
    for i in 0..3 {
        a_star[i][i] -= 1.0;
    }
    AffineParams { a_star, t }
}

/// Generate one synthetic pair: a blob background with `n_structures`
/// ellipsoidal nuclei and per-structure masks, deformed by a random small
/// affine composed with a B-spline field, with independent Gaussian noise on
/// both outputs.
pub fn synth_pair(
    shape: (usize, usize, usize),
    cfg: &SynthConfig,
    seed: u64,
) -> Result<SyntheticPair> {
    let (d, h, w) = shape;
    if d < 8 || h < 8 || w < 8 {
        return Err(DregError::InvalidArgument(format!(
            "synthetic shape {shape:?} too small (need >= 8 per axis)"
        )));
    }
    let n = d * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_ext = d.min(h).min(w) as f64;

    // smooth background: a sum of random Gaussian blobs
    let mut base = vec![0.0f64; n];
    for _ in 0..8 {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let cz = rng.random_range(0.0..d as f64);
        let sigma = rng.random_range(0.15..0.30) * min_ext;
        let amp = rng.random_range(0.3..1.0);
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut q = 0;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let r2 =
                        (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) + (z as f64 - cz).powi(2);
                    base[q] += amp * (-r2 * inv).exp();
                    q += 1;
                }
            }
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &base {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in base.iter_mut() {
        *v = 0.6 * (*v - lo) / span;
    }

    // ellipsoidal structures with matching label masks
    let mut masks = vec![0.0f32; cfg.n_structures * n];
    let mut centers: Vec<[f64; 3]> = Vec::new();
    for s in 0..cfg.n_structures {
        let mut center = [0.0; 3];
        for _try in 0..100 {
            center = [
                rng.random_range(0.28..0.72) * w as f64,
                rng.random_range(0.28..0.72) * h as f64,
                rng.random_range(0.28..0.72) * d as f64,
            ];
            let ok = centers.iter().all(|c| {
                let d2: f64 = c.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= 0.22 * min_ext
            });
            if ok {
                break;
            }
        }
        centers.push(center);
        let semi = [
            rng.random_range(0.07..0.13) * min_ext,
            rng.random_range(0.07..0.13) * min_ext,
            rng.random_range(0.07..0.13) * min_ext,
        ];
        let amp = rng.random_range(0.4..0.7);
        let mut q = 0;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let r2 = ((x as f64 - center[0]) / semi[0]).powi(2)
                        + ((y as f64 - center[1]) / semi[1]).powi(2)
                        + ((z as f64 - center[2]) / semi[2]).powi(2);
                    if r2 <= 1.0 {
                        base[q] += amp * (1.0 - r2);
                        masks[s * n + q] = 1.0;
                    }
                    q += 1;
                }
            }
        }
    }
    for v in base.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    // deformation: small affine composed with a B-spline field
    let affine = random_small_affine(&mut rng, shape, cfg.affine_jitter);
    let bspline_seed = rng.random::<u64>();
    let bspline = synth_bspline_field(
        shape,
        cfg.control_points,
        cfg.max_disp,
        cfg.order,
        bspline_seed,
    )?;
    let aff_field = apply_affine(&affine, shape);
    let gt = compose(aff_field.vectors(), bspline.vectors())?;
    let gt_field = DisplacementField::new(gt.detach())?;

    let base_t = Tensor::constant(base.clone(), &[1, d, h, w])?;
    let fixed_clean = warp(&base_t, gt_field.vectors(), Interp::Trilinear)?;
    let masks_t = Tensor::constant(
        masks.iter().map(|&v| v as f64).collect(),
        &[cfg.n_structures.max(1), d, h, w],
    )?;
    let masks_f_t = warp(&masks_t, gt_field.vectors(), Interp::Nearest)?;

    let mut noise = |data: &[f64]| -> Vec<f32> {
        data.iter()
            .map(|&v| {
                let g: f64 =
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                (v + cfg.noise_sigma * g).clamp(0.0, 1.0) as f32
            })
            .collect()
    };
    let moving_data = noise(&base);
    let fixed_data = noise(fixed_clean.data());

    let masks_m = Volume::new(cfg.n_structures.max(1), shape, [1.0; 3], masks)?;
    let masks_f = Volume::from_tensor(&masks_f_t, [1.0; 3])?;
    Ok(SyntheticPair {
        moving: Volume::new(1, shape, [1.0; 3], moving_data)?,
        fixed: Volume::new(1, shape, [1.0; 3], fixed_data)?,
        masks_m,
        masks_f,
        gt_field,
        seed,
    })
}
