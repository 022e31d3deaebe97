//! Deformation-field algebra: identity grids, warping, field composition,
//! stationary-velocity integration by scaling and squaring, resampling across
//! pyramid levels, affine displacement maps and Jacobian analysis.
//!
//! Fields are `[3, D, H, W]` tensors of per-voxel displacement (or velocity)
//! vectors in voxel units of their own grid. Channel 0 is the x component
//! (along the W axis), channel 1 the y component (H axis) and channel 2 the
//! z component (D axis). Warping evaluates `result(p) = volume(p + field(p))`
//! with coordinates clamped to the grid (border replication).

use crate::error::{DregError, Result};
use crate::io::Volume;
use crate::mat3::{self, Mat3};
use crate::tensor::{grid_sample_trilinear, Tensor};

/// Per-voxel displacement vectors `[3,D,H,W]`, finite, in voxel units.
#[derive(Clone, Debug)]
pub struct DisplacementField {
    vectors: Tensor,
}

/// Per-voxel stationary velocity vectors `[3,D,H,W]`, finite.
#[derive(Clone, Debug)]
pub struct VelocityField {
    vectors: Tensor,
}

macro_rules! field_impl {
    ($ty:ident, $what:literal) => {
        impl $ty {
            pub fn new(vectors: Tensor) -> Result<Self> {
                let s = vectors.shape();
                if s.len() != 4 || s[0] != 3 {
                    return Err(DregError::ShapeMismatch {
                        context: concat!($what, " vectors"),
                        lhs: s.to_vec(),
                        rhs: vec![3, 0, 0, 0],
                    });
                }
                if !vectors.is_finite() {
                    return Err(DregError::Numerical(
                        concat!("non-finite entries in ", $what).into(),
                    ));
                }
                Ok(Self { vectors })
            }

            pub fn zeros(shape: (usize, usize, usize)) -> Self {
                Self {
                    vectors: Tensor::zeros(&[3, shape.0, shape.1, shape.2]),
                }
            }

            pub fn vectors(&self) -> &Tensor {
                &self.vectors
            }

            pub fn into_tensor(self) -> Tensor {
                self.vectors
            }

            pub fn spatial_shape(&self) -> (usize, usize, usize) {
                let s = self.vectors.shape();
                (s[1], s[2], s[3])
            }

            /// Serialize as a 3-channel volume (data-io container).
            pub fn to_volume(&self, spacing: [f64; 3]) -> Volume {
                Volume::from_tensor(&self.vectors, spacing).expect("field tensor is rank 4")
            }

            pub fn from_volume(v: &Volume) -> Result<Self> {
                Self::new(v.to_tensor())
            }
        }
    };
}

field_impl!(DisplacementField, "displacement field");
field_impl!(VelocityField, "velocity field");

/// Residual affine parameters: the realized linear map is `A* + I`.
#[derive(Clone, Copy, Debug)]
pub struct AffineParams {
    pub a_star: Mat3,
    pub t: [f64; 3],
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            a_star: [[0.0; 3]; 3],
            t: [0.0; 3],
        }
    }

    pub fn from_theta(theta: &[f64]) -> Result<Self> {
        if theta.len() != 12 {
            return Err(DregError::InvalidArgument(format!(
                "affine theta must have 12 entries, got {}",
                theta.len()
            )));
        }
        let mut a = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] = theta[3 * r + c];
            }
        }
        Ok(AffineParams {
            a_star: a,
            t: [theta[9], theta[10], theta[11]],
        })
    }

    pub fn theta(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = self.a_star[r][c];
            }
        }
        out[9..].copy_from_slice(&self.t);
        out
    }

    /// The full linear part `A* + I`.
    pub fn linear_part(&self) -> Mat3 {
        mat3::add(&self.a_star, &mat3::IDENTITY)
    }

    /// Determinant of the realized linear map (invertibility check).
    pub fn det(&self) -> f64 {
        mat3::det(&self.linear_part())
    }
}

/// Interpolation mode for warping. Trilinear is differentiable; nearest is
/// for label maps at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Absolute integer voxel coordinates `[3,D,H,W]`: channel 0 holds the W
/// coordinate of each voxel, channel 1 the H coordinate, channel 2 the D
/// coordinate.
pub fn identity_grid(shape: (usize, usize, usize)) -> Tensor {
    let (d, h, w) = shape;
    let n = d * h * w;
    let mut data = vec![0.0; 3 * n];
    let mut q = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                data[q] = x as f64;
                data[n + q] = y as f64;
                data[2 * n + q] = z as f64;
                q += 1;
            }
        }
    }
    Tensor::constant(data, &[3, d, h, w]).expect("grid shape consistent")
}

fn check_field_matches(volume: &Tensor, field: &Tensor, context: &'static str) -> Result<()> {
    let vs = volume.shape();
    let fs = field.shape();
    if vs.len() != 4 || fs.len() != 4 || fs[0] != 3 || vs[1..] != fs[1..] {
        return Err(DregError::ShapeMismatch {
            context,
            lhs: vs.to_vec(),
            rhs: fs.to_vec(),
        });
    }
    Ok(())
}

/// Warp `volume(p)` to `volume(p + field(p))`.
pub fn warp(volume: &Tensor, field: &Tensor, interp: Interp) -> Result<Tensor> {
    check_field_matches(volume, field, "warp volume vs field")?;
    match interp {
        Interp::Trilinear => {
            let s = field.shape();
            let grid = identity_grid((s[1], s[2], s[3]));
            let locations = grid.add(field)?;
            grid_sample_trilinear(volume, &locations)
        }
        Interp::Nearest => warp_nearest(volume, field),
    }
}

fn warp_nearest(volume: &Tensor, field: &Tensor) -> Result<Tensor> {
    let vs = volume.shape().to_vec();
    let (c_n, d, h, w) = (vs[0], vs[1], vs[2], vs[3]);
    let n = d * h * w;
    let vol = volume.data();
    let f = field.data();
    let mut out = vec![0.0; vol.len()];
    let mut q = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let xi = (x as f64 + f[q]).round().clamp(0.0, (w - 1) as f64) as usize;
                let yi = (y as f64 + f[n + q]).round().clamp(0.0, (h - 1) as f64) as usize;
                let zi = (z as f64 + f[2 * n + q]).round().clamp(0.0, (d - 1) as f64) as usize;
                let src = (zi * h + yi) * w + xi;
                for c in 0..c_n {
                    out[c * n + q] = vol[c * n + src];
                }
                q += 1;
            }
        }
    }
    Tensor::constant(out, &vs)
}

/// Warp a volume by a displacement field, preserving spacing.
pub fn warp_volume(volume: &Volume, field: &DisplacementField, interp: Interp) -> Result<Volume> {
    let t = warp(&volume.to_tensor(), field.vectors(), interp)?;
    Volume::from_tensor(&t, volume.spacing)
}

/// Composition of two displacement fields:
/// `compose(outer, inner)(p) = inner(p) + outer(p + inner(p))`,
/// so that `warp(v, compose(a, b))` equals `warp(warp(v, a), b)` up to
/// interpolation error. The outer field is resampled at displaced locations.
pub fn compose(outer: &Tensor, inner: &Tensor) -> Result<Tensor> {
    check_field_matches(outer, inner, "compose fields")?;
    let outer_at = warp(outer, inner, Interp::Trilinear)?;
    inner.add(&outer_at)
}

/// Integrate a stationary velocity field over unit time by scaling and
/// squaring: start from `v / 2^t` and square (self-compose) `t` times.
pub fn integrate_velocity(velocity: &Tensor, t_steps: u32) -> Result<Tensor> {
    let s = velocity.shape();
    if s.len() != 4 || s[0] != 3 {
        return Err(DregError::ShapeMismatch {
            context: "integrate_velocity input",
            lhs: s.to_vec(),
            rhs: vec![3, 0, 0, 0],
        });
    }
    let mut phi = velocity.mul_scalar(1.0 / (1u64 << t_steps) as f64);
    for _ in 0..t_steps {
        phi = compose(&phi, &phi)?;
    }
    Ok(phi)
}

/// Trilinear upsampling of a vector field to `factor`-times extents, with
/// vector values rescaled by `factor` to stay in voxel units of the target
/// grid. Output voxel `q` samples input coordinate `q / factor` (origin
/// aligned), so linear fields stay exact away from the far border.
pub fn upsample_field(field: &Tensor, factor: usize) -> Result<Tensor> {
    let s = field.shape();
    if s.len() != 4 || s[0] != 3 {
        return Err(DregError::ShapeMismatch {
            context: "upsample_field input",
            lhs: s.to_vec(),
            rhs: vec![3, 0, 0, 0],
        });
    }
    if factor < 1 || !factor.is_power_of_two() {
        return Err(DregError::InvalidArgument(format!(
            "upsample factor must be a positive power of 2, got {factor}"
        )));
    }
    if factor == 1 {
        return Ok(field.mul_scalar(1.0));
    }
    let (d, h, w) = (s[1], s[2], s[3]);
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let n = od * oh * ow;
    let inv = 1.0 / factor as f64;
    let mut loc = vec![0.0; 3 * n];
    let mut q = 0;
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                loc[q] = x as f64 * inv;
                loc[n + q] = y as f64 * inv;
                loc[2 * n + q] = z as f64 * inv;
                q += 1;
            }
        }
    }
    let locations = Tensor::constant(loc, &[3, od, oh, ow])?;
    let sampled = grid_sample_trilinear(field, &locations)?;
    Ok(sampled.mul_scalar(factor as f64))
}

/// Dense displacement field of the residual affine map `p -> A* p + t`
/// (the realized map is `p -> (A* + I) p + t`).
pub fn apply_affine(params: &AffineParams, shape: (usize, usize, usize)) -> DisplacementField {
    let (d, h, w) = shape;
    let n = d * h * w;
    let mut data = vec![0.0; 3 * n];
    let a = &params.a_star;
    let mut q = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64, y as f64, z as f64];
                for c in 0..3 {
                    data[c * n + q] =
                        a[c][0] * p[0] + a[c][1] * p[1] + a[c][2] * p[2] + params.t[c];
                }
                q += 1;
            }
        }
    }
    DisplacementField {
        vectors: Tensor::constant(data, &[3, d, h, w]).expect("shape consistent"),
    }
}

/// Per-voxel determinant of `I + grad(phi)` with forward differences
/// (backward difference on the far slice of each axis).
fn jacobian_determinants(field: &Tensor) -> Result<Vec<f64>> {
    let s = field.shape();
    if s.len() != 4 || s[0] != 3 {
        return Err(DregError::ShapeMismatch {
            context: "jacobian_map input",
            lhs: s.to_vec(),
            rhs: vec![3, 0, 0, 0],
        });
    }
    let (d, h, w) = (s[1], s[2], s[3]);
    if d < 2 || h < 2 || w < 2 {
        return Err(DregError::InvalidArgument(format!(
            "jacobian_map needs extents >= 2, got {:?}",
            (d, h, w)
        )));
    }
    let n = d * h * w;
    let f = field.data();
    // axis steps in flat index space: x -> W (1), y -> H (w), z -> D (h*w)
    let steps = [1usize, w, h * w];
    let extents = [w, h, d];
    let mut dets = vec![0.0; n];
    let mut q = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let pos = [x, y, z];
                let mut j = [[0.0; 3]; 3];
                for (axis, (&step, &ext)) in steps.iter().zip(&extents).enumerate() {
                    let (a, b) = if pos[axis] + 1 < ext {
                        (q + step, q)
                    } else {
                        (q, q - step)
                    };
                    for c in 0..3 {
                        j[c][axis] = f[c * n + a] - f[c * n + b];
                    }
                }
                for c in 0..3 {
                    j[c][c] += 1.0;
                }
                dets[q] = mat3::det(&j);
                q += 1;
            }
        }
    }
    Ok(dets)
}

/// Jacobian-determinant map of a displacement field as a 1-channel volume.
pub fn jacobian_map(field: &Tensor) -> Result<Volume> {
    let dets = jacobian_determinants(field)?;
    let s = field.shape();
    Volume::new(
        1,
        (s[1], s[2], s[3]),
        [1.0; 3],
        dets.iter().map(|&v| v as f32).collect(),
    )
}

#[derive(Clone, Copy, Debug)]
pub struct SmoothnessReport {
    /// Standard deviation of Jacobian determinants over all voxels.
    pub jacobian_std: f64,
    /// Fraction of voxels with a negative Jacobian determinant.
    pub folding_fraction: f64,
}

/// Smoothness summary of a displacement field: the spread of its Jacobian
/// determinants and the fraction of folding voxels.
pub fn smoothness_report(field: &Tensor) -> Result<SmoothnessReport> {
    let dets = jacobian_determinants(field)?;
    let n = dets.len() as f64;
    let mean = dets.iter().sum::<f64>() / n;
    let var = dets.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let folded = dets.iter().filter(|&&v| v < 0.0).count() as f64;
    Ok(SmoothnessReport {
        jacobian_std: var.sqrt(),
        folding_fraction: folded / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_field(shape: (usize, usize, usize), v: [f64; 3]) -> Tensor {
        let n = shape.0 * shape.1 * shape.2;
        let mut data = Vec::with_capacity(3 * n);
        for c in v {
            data.extend(std::iter::repeat(c).take(n));
        }
        Tensor::constant(data, &[3, shape.0, shape.1, shape.2]).unwrap()
    }

    #[test]
    fn identity_grid_coordinates() {
        let g = identity_grid((2, 2, 2));
        let n = 8;
        // first voxel is (0,0,0)
        assert_eq!(g.data()[0], 0.0);
        assert_eq!(g.data()[n], 0.0);
        assert_eq!(g.data()[2 * n], 0.0);
        // coordinates take values {0,1} per axis
        for c in 0..3 {
            let vals = &g.data()[c * n..(c + 1) * n];
            assert!(vals.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        // voxel (z=1,y=0,x=1) -> x channel 1, y 0, z 1
        let q = (1 * 2 + 0) * 2 + 1;
        assert_eq!(g.data()[q], 1.0);
        assert_eq!(g.data()[n + q], 0.0);
        assert_eq!(g.data()[2 * n + q], 1.0);
    }

    #[test]
    fn warp_zero_field_copies() {
        let vol = Tensor::constant((0..27).map(f64::from).collect(), &[1, 3, 3, 3]).unwrap();
        let zero = constant_field((3, 3, 3), [0.0; 3]);
        let out = warp(&vol, &zero, Interp::Trilinear).unwrap();
        assert_eq!(out.data(), vol.data());
    }

    #[test]
    fn warp_unit_shift_on_ramp() {
        let (d, h, w) = (3, 3, 5);
        let mut data = vec![0.0; d * h * w];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data[(z * h + y) * w + x] = x as f64;
                }
            }
        }
        let vol = Tensor::constant(data, &[1, d, h, w]).unwrap();
        let field = constant_field((d, h, w), [1.0, 0.0, 0.0]);
        let out = warp(&vol, &field, Interp::Trilinear).unwrap();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w - 1 {
                    assert_eq!(out.data()[(z * h + y) * w + x], (x + 1) as f64);
                }
            }
        }
    }

    #[test]
    fn nearest_warp_small_shift_is_identity() {
        let mut mask = vec![0.0; 27];
        mask[13] = 1.0;
        let vol = Tensor::constant(mask.clone(), &[1, 3, 3, 3]).unwrap();
        let field = constant_field((3, 3, 3), [0.4, 0.0, 0.0]);
        let out = warp(&vol, &field, Interp::Nearest).unwrap();
        assert_eq!(out.data(), &mask[..]);
    }

    #[test]
    fn warp_shape_mismatch_is_error() {
        let vol = Tensor::zeros(&[1, 4, 4, 4]);
        let field = Tensor::zeros(&[3, 4, 4, 2]);
        assert!(matches!(
            warp(&vol, &field, Interp::Trilinear),
            Err(DregError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn compose_with_zero_is_identity() {
        let shape = (4, 4, 4);
        let zero = constant_field(shape, [0.0; 3]);
        let n = 64;
        let mut data = vec![0.0; 3 * n];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64 - 5.0) * 0.05;
        }
        let f = Tensor::constant(data, &[3, 4, 4, 4]).unwrap();
        let a = compose(&zero, &f).unwrap();
        let b = compose(&f, &zero).unwrap();
        for i in 0..3 * n {
            assert!((a.data()[i] - f.data()[i]).abs() < 1e-12);
            assert!((b.data()[i] - f.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_constant_translations_add() {
        let shape = (4, 4, 4);
        let c1 = constant_field(shape, [0.5, -0.25, 1.0]);
        let c2 = constant_field(shape, [0.25, 0.5, -0.5]);
        let out = compose(&c1, &c2).unwrap();
        let n = 64;
        for q in 0..n {
            assert!((out.data()[q] - 0.75).abs() < 1e-12);
            assert!((out.data()[n + q] - 0.25).abs() < 1e-12);
            assert!((out.data()[2 * n + q] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn integrate_zero_velocity_is_identity_map() {
        let v = constant_field((4, 4, 4), [0.0; 3]);
        let phi = integrate_velocity(&v, 7).unwrap();
        assert!(phi.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn integrate_constant_velocity_is_translation() {
        let v = constant_field((4, 4, 4), [1.5, 0.0, 0.0]);
        let phi = integrate_velocity(&v, 7).unwrap();
        let n = 64;
        for q in 0..n {
            assert!((phi.data()[q] - 1.5).abs() < 1e-9);
            assert!(phi.data()[n + q].abs() < 1e-9);
            assert!(phi.data()[2 * n + q].abs() < 1e-9);
        }
    }

    #[test]
    fn upsample_constant_doubles_vectors() {
        let f = constant_field((2, 2, 2), [1.0, 0.0, 0.0]);
        let up = upsample_field(&f, 2).unwrap();
        assert_eq!(up.shape(), &[3, 4, 4, 4]);
        let n = 64;
        for q in 0..n {
            assert_eq!(up.data()[q], 2.0);
            assert_eq!(up.data()[n + q], 0.0);
        }
        let zeros = constant_field((2, 2, 2), [0.0; 3]);
        let up = upsample_field(&zeros, 4).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_rejects_bad_factor() {
        let f = constant_field((2, 2, 2), [0.0; 3]);
        assert!(upsample_field(&f, 0).is_err());
        assert!(upsample_field(&f, 3).is_err());
    }

    #[test]
    fn apply_affine_cases() {
        let id = apply_affine(&AffineParams::identity(), (3, 3, 3));
        assert!(id.vectors().data().iter().all(|&v| v == 0.0));

        let shift = AffineParams {
            a_star: [[0.0; 3]; 3],
            t: [1.0, 0.0, 0.0],
        };
        let f = apply_affine(&shift, (3, 3, 3));
        let n = 27;
        for q in 0..n {
            assert_eq!(f.vectors().data()[q], 1.0);
            assert_eq!(f.vectors().data()[n + q], 0.0);
        }
    }

    #[test]
    fn jacobian_of_zero_field_is_one() {
        let f = constant_field((4, 4, 4), [0.0; 3]);
        let j = jacobian_map(&f).unwrap();
        assert!(j.data.iter().all(|&v| v == 1.0));
        let rep = smoothness_report(&f).unwrap();
        assert_eq!(rep.jacobian_std, 0.0);
        assert_eq!(rep.folding_fraction, 0.0);
    }

    #[test]
    fn jacobian_of_uniform_expansion() {
        // phi(p) = 0.1 p -> det = 1.1^3 everywhere (linear field: forward and
        // backward differences agree)
        let (d, h, w) = (4, 4, 4);
        let grid = identity_grid((d, h, w));
        let f = grid.mul_scalar(0.1);
        let j = jacobian_map(&f).unwrap();
        for &v in &j.data {
            assert!((v as f64 - 1.331).abs() < 1e-6);
        }
        let rep = smoothness_report(&f).unwrap();
        assert!(rep.jacobian_std < 1e-9);
        assert_eq!(rep.folding_fraction, 0.0);
    }

    #[test]
    fn constructed_fold_has_negative_dets() {
        // swap two adjacent x-slices in a 2-voxel-wide band: phi_x = +1 at
        // x=3, -1 at x=4 for exactly 4 (y,z) positions
        let (d, h, w) = (8, 8, 8);
        let n = d * h * w;
        let mut data = vec![0.0; 3 * n];
        let mut flipped = 0;
        for z in 2..4 {
            for y in 2..4 {
                data[(z * h + y) * w + 3] = 1.0;
                data[(z * h + y) * w + 4] = -1.0;
                flipped += 1;
            }
        }
        assert_eq!(flipped, 4);
        let f = Tensor::constant(data, &[3, d, h, w]).unwrap();
        let dets = jacobian_determinants(&f).unwrap();
        let neg = dets.iter().filter(|&&v| v < 0.0).count();
        assert_eq!(neg, 4);
        let rep = smoothness_report(&f).unwrap();
        assert!((rep.folding_fraction - 4.0 / 512.0).abs() < 1e-15);
    }

    #[test]
    fn affine_params_det() {
        let p = AffineParams {
            a_star: [[0.1, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
            t: [0.0; 3],
        };
        assert!((p.det() - 1.1).abs() < 1e-12);
    }
}
