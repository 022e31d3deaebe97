//! Training objectives: affine regularity, field smoothness, patch-wise
//! normalized local correlation, soft Dice, and their weighted total.

use crate::error::{DregError, Result};
use crate::mat3;
use crate::net::warp_tensor;
use crate::tensor::{forward_diff, Tensor};

/// Weights of the total loss, all non-negative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 0.1,
            alpha2: 1.0,
            alpha3: 1.0,
            alpha4: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha1, self.alpha2, self.alpha3, self.alpha4];
        if all.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(DregError::InvalidArgument(format!(
                "loss weights must be finite and non-negative, got {all:?}"
            )));
        }
        Ok(())
    }
}

pub const PEARSON_EPS: f64 = 1e-8;
pub const DICE_EPS: f64 = 1e-5;
pub const NLCC_PATCH: usize = 8;
/// 8-voxel windows with 5 voxels overlapped slide by 3.
pub const NLCC_STRIDE: usize = 3;
const AFFINE_SINGULAR_MIN: f64 = 1e-12;

/// Affine regularity loss over the residual matrix `a_star` (a 9-element
/// tensor, row-major): with `M = A* + I`,
/// `(-6 + tr(M'M) + tr((M'M)^-1)) + (det(M) - 1)^2`.
/// The trace pair equals the sum of squared singular values plus the sum of
/// their inverse squares, so no SVD is differentiated; the inverse trace is
/// evaluated through the closed-form 3x3 adjugate.
pub fn affine_loss(a_star: &Tensor) -> Result<Tensor> {
    if a_star.shape() != [9] {
        return Err(DregError::ShapeMismatch {
            context: "affine_loss a_star",
            lhs: a_star.shape().to_vec(),
            rhs: vec![9],
        });
    }
    // singularity guard on the raw values
    let mut m_raw = [[0.0f64; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m_raw[r][c] = a_star.data()[3 * r + c] + if r == c { 1.0 } else { 0.0 };
        }
    }
    let det_raw = mat3::det(&m_raw);
    if det_raw * det_raw < AFFINE_SINGULAR_MIN {
        return Err(DregError::SingularAffine {
            det: det_raw * det_raw,
            min: AFFINE_SINGULAR_MIN,
        });
    }

    let eye = Tensor::constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[9])?;
    let m = a_star.add(&eye)?;
    let e = |i: usize| m.narrow(0, i, 1);
    let (m0, m1, m2) = (e(0)?, e(1)?, e(2)?);
    let (m3, m4, m5) = (e(3)?, e(4)?, e(5)?);
    let (m6, m7, m8) = (e(6)?, e(7)?, e(8)?);

    // det(M) via cofactor expansion
    let det = m0
        .mul(&m4.mul(&m8)?.sub(&m5.mul(&m7)?)?)?
        .sub(&m1.mul(&m3.mul(&m8)?.sub(&m5.mul(&m6)?)?)?)?
        .add(&m2.mul(&m3.mul(&m7)?.sub(&m4.mul(&m6)?)?)?)?;

    // tr(M'M) = sum of squared entries
    let tr_mtm = m.square().sum();

    // C = M'M, tr(C^-1) = tr(adj(C)) / det(C), det(C) = det(M)^2
    let col = |a: &Tensor,
               b: &Tensor,
               c: &Tensor,
               d: &Tensor,
               e2: &Tensor,
               f: &Tensor|
     -> Result<Tensor> { a.mul(d)?.add(&b.mul(e2)?)?.add(&c.mul(f)?) };
    let c00 = col(&m0, &m3, &m6, &m0, &m3, &m6)?;
    let c11 = col(&m1, &m4, &m7, &m1, &m4, &m7)?;
    let c22 = col(&m2, &m5, &m8, &m2, &m5, &m8)?;
    let c01 = col(&m0, &m3, &m6, &m1, &m4, &m7)?;
    let c02 = col(&m0, &m3, &m6, &m2, &m5, &m8)?;
    let c12 = col(&m1, &m4, &m7, &m2, &m5, &m8)?;
    let tr_adj = c11
        .mul(&c22)?
        .sub(&c12.square())?
        .add(&c00.mul(&c22)?.sub(&c02.square())?)?
        .add(&c00.mul(&c11)?.sub(&c01.square())?)?;
    let tr_c_inv = tr_adj.div(&det.square())?;

    let ortho = tr_mtm.add(&tr_c_inv)?.add_scalar(-6.0);
    let det_term = det.add_scalar(-1.0).square();
    ortho.add(&det_term)?.reshape(&[1])
}

/// Mean squared forward-difference gradient of a displacement field
/// `[3,D,H,W]`, normalized by the voxel count (differences on the far slice
/// of each axis count as 0).
pub fn smoothness_loss(phi: &Tensor) -> Result<Tensor> {
    let s = phi.shape();
    if s.len() != 4 || s[0] != 3 {
        return Err(DregError::ShapeMismatch {
            context: "smoothness_loss field",
            lhs: s.to_vec(),
            rhs: vec![3, 0, 0, 0],
        });
    }
    let n = (s[1] * s[2] * s[3]) as f64;
    let mut total: Option<Tensor> = None;
    for axis in 1..=3 {
        let term = forward_diff(phi, axis)?.square().sum();
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.unwrap().mul_scalar(1.0 / n))
}

/// Pearson correlation coefficient of two equally-shaped tensors, guarded by
/// a small epsilon in the denominator (constant inputs yield ~0).
pub fn pearson(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(DregError::ShapeMismatch {
            context: "pearson inputs",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let n = x.numel();
    let xf = x.reshape(&[n])?;
    let yf = y.reshape(&[n])?;
    let dx = xf.sub(&xf.mean())?;
    let dy = yf.sub(&yf.mean())?;
    let cov = dx.mul(&dy)?.sum();
    let sx = dx.square().sum().sqrt();
    let sy = dy.square().sum().sqrt();
    cov.div(&sx.mul(&sy)?.add_scalar(PEARSON_EPS))
}

/// Patch-wise normalized local correlation loss: 8x8x8 windows at stride 3
/// (trailing partial windows dropped), `-rho^2` averaged over the patches of
/// each channel and summed over channels.
pub fn nlcc_loss(moved: &Tensor, fixed: &Tensor) -> Result<Tensor> {
    if moved.shape() != fixed.shape() {
        return Err(DregError::ShapeMismatch {
            context: "nlcc_loss inputs",
            lhs: moved.shape().to_vec(),
            rhs: fixed.shape().to_vec(),
        });
    }
    let s = moved.shape();
    if s.len() != 4 {
        return Err(DregError::ShapeMismatch {
            context: "nlcc_loss rank",
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let (c_n, d, h, w) = (s[0], s[1], s[2], s[3]);
    if d < NLCC_PATCH || h < NLCC_PATCH || w < NLCC_PATCH {
        return Err(DregError::InvalidArgument(format!(
            "nlcc_loss needs extents >= {NLCC_PATCH}, got {:?}",
            (d, h, w)
        )));
    }
    let starts = |ext: usize| -> Vec<usize> {
        (0..=(ext - NLCC_PATCH) / NLCC_STRIDE)
            .map(|i| i * NLCC_STRIDE)
            .collect()
    };
    let (zs, ys, xs) = (starts(d), starts(h), starts(w));
    let mut total: Option<Tensor> = None;
    let patch_elems = NLCC_PATCH * NLCC_PATCH * NLCC_PATCH;
    for c in 0..c_n {
        let mut rhos = Vec::with_capacity(zs.len() * ys.len() * xs.len());
        for &z in &zs {
            for &y in &ys {
                for &x in &xs {
                    let start = [c, z, y, x];
                    let size = [1, NLCC_PATCH, NLCC_PATCH, NLCC_PATCH];
                    let pm = moved.slice(&start, &size)?.reshape(&[patch_elems])?;
                    let pf = fixed.slice(&start, &size)?.reshape(&[patch_elems])?;
                    rhos.push(pearson(&pm, &pf)?.square());
                }
            }
        }
        let channel_term = Tensor::concat(&rhos, 0)?.mean().neg();
        total = Some(match total {
            None => channel_term,
            Some(acc) => acc.add(&channel_term)?,
        });
    }
    Ok(total.unwrap())
}

/// Soft Dice segmentation loss: the moving masks are warped (trilinearly, so
/// the loss stays differentiable) by the affine then deformable field, and
/// per-structure Dice values are averaged and negated.
pub fn dice_loss(
    masks_m: &Tensor,
    masks_f: &Tensor,
    phi_aff: &Tensor,
    phi_def: &Tensor,
) -> Result<Tensor> {
    if masks_m.shape() != masks_f.shape() {
        return Err(DregError::ShapeMismatch {
            context: "dice_loss mask channels",
            lhs: masks_m.shape().to_vec(),
            rhs: masks_f.shape().to_vec(),
        });
    }
    let warped = warp_tensor(&warp_tensor(masks_m, phi_aff)?, phi_def)?;
    let c_n = warped.shape()[0];
    let mut dices = Vec::with_capacity(c_n);
    for c in 0..c_n {
        let a = warped.narrow(0, c, 1)?;
        let b = masks_f.narrow(0, c, 1)?;
        let num = a.mul(&b)?.sum().mul_scalar(2.0).add_scalar(DICE_EPS);
        let den = a.sum().add(&b.sum())?.add_scalar(DICE_EPS);
        dices.push(num.div(&den)?);
    }
    Ok(Tensor::concat(&dices, 0)?.mean().neg())
}

/// Unweighted loss components of one step. `seg` is absent in unsupervised
/// mode.
pub struct LossParts {
    pub aff: Tensor,
    pub reg: Tensor,
    pub sim: Tensor,
    pub seg: Option<Tensor>,
}

/// Weighted total `a1*L_aff + a2*L_reg + a3*L_sim (+ a4*L_seg)`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    let mut total = parts
        .aff
        .mul_scalar(weights.alpha1)
        .add(&parts.reg.mul_scalar(weights.alpha2))?
        .add(&parts.sim.mul_scalar(weights.alpha3))?;
    if let Some(seg) = &parts.seg {
        total = total.add(&seg.mul_scalar(weights.alpha4))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_loss_identity_is_zero() {
        let a = Tensor::zeros(&[9]);
        let l = affine_loss(&a).unwrap().item();
        assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn affine_loss_reflection_is_four() {
        // M = diag(-1,1,1): orthogonality term 0, determinant term 4
        let mut a = vec![0.0; 9];
        a[0] = -2.0;
        let l = affine_loss(&Tensor::constant(a, &[9]).unwrap())
            .unwrap()
            .item();
        assert!((l - 4.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn affine_loss_axis_stretch() {
        // M = diag(2,1,1): (-6 + (4+1+1) + (0.25+1+1)) + 1 = 3.25
        let mut a = vec![0.0; 9];
        a[0] = 1.0;
        let l = affine_loss(&Tensor::constant(a, &[9]).unwrap())
            .unwrap()
            .item();
        assert!((l - 3.25).abs() < 1e-12, "{l}");
    }

    #[test]
    fn affine_loss_singular_matrix_is_error() {
        let mut a = vec![0.0; 9];
        a[0] = -1.0; // M = diag(0,1,1)
        assert!(matches!(
            affine_loss(&Tensor::constant(a, &[9]).unwrap()),
            Err(DregError::SingularAffine { .. })
        ));
    }

    #[test]
    fn smoothness_of_constant_field_is_zero() {
        let f = Tensor::full(&[3, 4, 4, 4], 2.5);
        assert_eq!(smoothness_loss(&f).unwrap().item(), 0.0);
    }

    #[test]
    fn smoothness_of_unit_ramp() {
        // phi_x(p) = p_x: squared unit gradient along W except the last
        // column -> (W-1)/W
        let (d, h, w) = (4, 4, 5);
        let n = d * h * w;
        let mut data = vec![0.0; 3 * n];
        let mut q = 0;
        for _z in 0..d {
            for _y in 0..h {
                for x in 0..w {
                    data[q] = x as f64;
                    q += 1;
                }
            }
        }
        let f = Tensor::constant(data, &[3, d, h, w]).unwrap();
        let l = smoothness_loss(&f).unwrap().item();
        assert!((l - (w as f64 - 1.0) / w as f64).abs() < 1e-12, "{l}");
    }

    #[test]
    fn pearson_affine_relations() {
        let x = Tensor::constant(vec![0.2, -1.0, 0.5, 2.0, -0.3, 0.9], &[6]).unwrap();
        let same = pearson(&x, &x).unwrap().item();
        assert!((same - 1.0).abs() < 1e-7);
        let scaled = x.mul_scalar(2.0).add_scalar(3.0);
        assert!((pearson(&x, &scaled).unwrap().item() - 1.0).abs() < 1e-7);
        let negated = x.neg();
        assert!((pearson(&x, &negated).unwrap().item() + 1.0).abs() < 1e-7);
    }

    #[test]
    fn pearson_constant_input_is_near_zero() {
        let x = Tensor::full(&[8], 1.0);
        let y = Tensor::constant((0..8).map(f64::from).collect(), &[8]).unwrap();
        assert_eq!(pearson(&x, &y).unwrap().item(), 0.0);
    }

    #[test]
    fn nlcc_of_identical_images() {
        let data: Vec<f64> = (0..2 * 16 * 16 * 16)
            .map(|i| ((i as u64 * 2654435761) % 1000) as f64 / 1000.0)
            .collect();
        let v = Tensor::constant(data, &[2, 16, 16, 16]).unwrap();
        let l = nlcc_loss(&v, &v).unwrap().item();
        assert!((l + 2.0).abs() < 1e-9, "{l}");
        let one = v.narrow(0, 0, 1).unwrap();
        let l1 = nlcc_loss(&one, &one).unwrap().item();
        assert!((l1 + 1.0).abs() < 1e-9, "{l1}");
    }

    #[test]
    fn nlcc_rejects_small_extents() {
        let v = Tensor::zeros(&[1, 6, 8, 8]);
        assert!(nlcc_loss(&v, &v).is_err());
    }

    #[test]
    fn dice_loss_identity_and_disjoint() {
        let (d, h, w) = (8, 8, 8);
        let n = d * h * w;
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    a[(z * h + y) * w + x] = 1.0;
                    b[((z + 4) * h + y) * w + x] = 1.0;
                }
            }
        }
        let zero = Tensor::zeros(&[3, d, h, w]);
        let ta = Tensor::constant(a, &[1, d, h, w]).unwrap();
        let tb = Tensor::constant(b, &[1, d, h, w]).unwrap();
        let same = dice_loss(&ta, &ta, &zero, &zero).unwrap().item();
        assert!((same + 1.0).abs() < 1e-6, "{same}");
        let disjoint = dice_loss(&ta, &tb, &zero, &zero).unwrap().item();
        assert!(disjoint.abs() < 1e-4, "{disjoint}");
    }

    #[test]
    fn dice_loss_channel_mismatch() {
        let zero = Tensor::zeros(&[3, 8, 8, 8]);
        let a = Tensor::zeros(&[2, 8, 8, 8]);
        let b = Tensor::zeros(&[1, 8, 8, 8]);
        assert!(dice_loss(&a, &b, &zero, &zero).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let one = Tensor::scalar(1.0);
        let parts = LossParts {
            aff: one.mul_scalar(1.0),
            reg: one.mul_scalar(1.0),
            sim: one.mul_scalar(1.0),
            seg: Some(one.mul_scalar(1.0)),
        };
        let w = LossWeights::default();
        assert!((total_loss(&parts, &w).unwrap().item() - 4.1).abs() < 1e-12);
        let zero_parts = LossParts {
            aff: Tensor::scalar(0.0),
            reg: Tensor::scalar(0.0),
            sim: Tensor::scalar(0.0),
            seg: None,
        };
        assert_eq!(total_loss(&zero_parts, &w).unwrap().item(), 0.0);
        // unsupervised mode drops the alpha4 term exactly
        let unsup = LossParts {
            aff: one.mul_scalar(1.0),
            reg: one.mul_scalar(1.0),
            sim: one.mul_scalar(1.0),
            seg: None,
        };
        assert!((total_loss(&unsup, &w).unwrap().item() - 2.1).abs() < 1e-12);
    }
}
