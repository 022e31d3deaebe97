//! Evaluation-only measures: Dice, directed Hausdorff and average symmetric
//! surface distance over mask surfaces, NCC, mutual information and MSE over
//! the fixed-image foreground, modality averaging, and report aggregation.

use crate::error::{DregError, Result};
use crate::field::{smoothness_report, warp_volume, DisplacementField, Interp};
use crate::io::Volume;
use crate::net::RegistrationResult;

pub const MI_BINS: usize = 32;

/// Dice overlap of two binary masks; two empty masks count as 1, an empty
/// mask against a non-empty one as 0.
pub fn dice_score(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DregError::ShapeMismatch {
            context: "dice_score masks",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = a.iter().filter(|&&v| v).count();
    let nb = b.iter().filter(|&&v| v).count();
    if na + nb == 0 {
        return Ok(1.0);
    }
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Voxels of a mask with at least one 6-neighbor outside the mask or on the
/// boundary of the grid region. Returned as (x, y, z) index triples.
pub fn surface_voxels(mask: &[bool], shape: (usize, usize, usize)) -> Vec<[usize; 3]> {
    let (d, h, w) = shape;
    debug_assert_eq!(mask.len(), d * h * w);
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let boundary = x == 0
                    || x + 1 == w
                    || y == 0
                    || y + 1 == h
                    || z == 0
                    || z + 1 == d
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x);
                if boundary {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Exact nearest-surface distances by expanding-shell search over an
/// occupancy grid (independent of the brute-force pairwise oracle used in
/// tests). Distances are Euclidean in spacing units.
fn nearest_distances(
    from: &[[usize; 3]],
    to: &[[usize; 3]],
    shape: (usize, usize, usize),
    spacing: [f64; 3],
) -> Vec<f64> {
    let (d, h, w) = shape;
    let mut occ = vec![false; d * h * w];
    for p in to {
        occ[(p[2] * h + p[1]) * w + p[0]] = true;
    }
    let min_sp = spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_r = d.max(h).max(w);
    let mut out = Vec::with_capacity(from.len());
    for p in from {
        let (px, py, pz) = (p[0] as isize, p[1] as isize, p[2] as isize);
        let mut best = f64::INFINITY;
        for r in 0..=max_r as isize {
            // every voxel closer than this shell has already been seen
            let shell_min = (r as f64) * min_sp;
            if best.is_finite() && shell_min * shell_min > best {
                break;
            }
            let (zl, zh) = ((pz - r).max(0), (pz + r).min(d as isize - 1));
            let (yl, yh) = ((py - r).max(0), (py + r).min(h as isize - 1));
            let (xl, xh) = ((px - r).max(0), (px + r).min(w as isize - 1));
            for z in zl..=zh {
                for y in yl..=yh {
                    for x in xl..=xh {
                        // shell only: Chebyshev distance exactly r
                        let cheb = (z - pz).abs().max((y - py).abs()).max((x - px).abs());
                        if cheb != r {
                            continue;
                        }
                        if occ[(z as usize * h + y as usize) * w + x as usize] {
                            let dx = (x - px) as f64 * spacing[0];
                            let dy = (y - py) as f64 * spacing[1];
                            let dz = (z - pz) as f64 * spacing[2];
                            best = best.min(dx * dx + dy * dy + dz * dz);
                        }
                    }
                }
            }
        }
        out.push(best.sqrt());
    }
    out
}

type SurfacePair = (Vec<[usize; 3]>, Vec<[usize; 3]>);

fn mask_pair_surfaces(
    a: &[bool],
    b: &[bool],
    shape: (usize, usize, usize),
    context: &'static str,
) -> Result<SurfacePair> {
    if a.iter().all(|&v| !v) || b.iter().all(|&v| !v) {
        return Err(DregError::EmptyMask(context));
    }
    Ok((surface_voxels(a, shape), surface_voxels(b, shape)))
}

/// Directed Hausdorff distance `max_{a in S(A)} min_{b in S(B)} |a-b|` over
/// surface voxels.
pub fn hausdorff(
    a: &[bool],
    b: &[bool],
    shape: (usize, usize, usize),
    spacing: [f64; 3],
) -> Result<f64> {
    let (sa, sb) = mask_pair_surfaces(a, b, shape, "hausdorff")?;
    let dists = nearest_distances(&sa, &sb, shape, spacing);
    Ok(dists.into_iter().fold(0.0, f64::max))
}

/// Symmetric Hausdorff variant: `max(hd(A,B), hd(B,A))`. Not used in
/// reports; the directed form above is the reported one.
pub fn hausdorff_symmetric(
    a: &[bool],
    b: &[bool],
    shape: (usize, usize, usize),
    spacing: [f64; 3],
) -> Result<f64> {
    Ok(hausdorff(a, b, shape, spacing)?.max(hausdorff(b, a, shape, spacing)?))
}

/// Average symmetric surface distance.
pub fn assd(
    a: &[bool],
    b: &[bool],
    shape: (usize, usize, usize),
    spacing: [f64; 3],
) -> Result<f64> {
    let (sa, sb) = mask_pair_surfaces(a, b, shape, "assd")?;
    let dab = nearest_distances(&sa, &sb, shape, spacing);
    let dba = nearest_distances(&sb, &sa, shape, spacing);
    // per-direction partial sums keep the result exactly symmetric
    let total = dab.iter().sum::<f64>() + dba.iter().sum::<f64>();
    Ok(total / (sa.len() + sb.len()) as f64)
}

fn masked_iter<'a>(
    a: &'a [f32],
    b: &'a [f32],
    mask: Option<&'a [bool]>,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    a.iter()
        .zip(b)
        .enumerate()
        .filter_map(move |(i, (&x, &y))| match mask {
            Some(m) if !m[i] => None,
            _ => Some((x as f64, y as f64)),
        })
}

/// Global normalized cross-correlation (Pearson coefficient) over the masked
/// voxels.
pub fn ncc(a: &[f32], b: &[f32], mask: Option<&[bool]>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DregError::ShapeMismatch {
            context: "ncc inputs",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let n = masked_iter(a, b, mask).count();
    if n == 0 {
        return Err(DregError::EmptyMask("ncc"));
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for (x, y) in masked_iter(a, b, mask) {
        sx += x;
        sy += y;
    }
    let (mx, my) = (sx / n as f64, sy / n as f64);
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (x, y) in masked_iter(a, b, mask) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt() + 1e-8))
}

fn entropy(counts: impl Iterator<Item = u64>, total: f64) -> f64 {
    let mut h = 0.0;
    for c in counts {
        if c > 0 {
            let p = c as f64 / total;
            h -= p * p.ln();
        }
    }
    h
}

/// Mutual information from a `bins x bins` joint histogram over the masked
/// voxels (intensities expected in [0,1]; values outside are clamped into
/// the edge bins). Natural logarithm; marginals are the histogram sums, so
/// `MI(A,A)` equals `H(A)` exactly.
pub fn mutual_information(a: &[f32], b: &[f32], mask: Option<&[bool]>, bins: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DregError::ShapeMismatch {
            context: "mutual_information inputs",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if bins < 2 {
        return Err(DregError::InvalidArgument(
            "mutual_information needs >= 2 bins".into(),
        ));
    }
    let bin_of =
        |v: f64| -> usize { ((v * bins as f64) as isize).clamp(0, bins as isize - 1) as usize };
    let mut joint = vec![0u64; bins * bins];
    let mut n = 0u64;
    for (x, y) in masked_iter(a, b, mask) {
        joint[bin_of(x) * bins + bin_of(y)] += 1;
        n += 1;
    }
    if n == 0 {
        return Err(DregError::EmptyMask("mutual_information"));
    }
    let total = n as f64;
    let row = |i: usize| -> u64 { joint[i * bins..(i + 1) * bins].iter().sum() };
    let col = |j: usize| -> u64 { (0..bins).map(|i| joint[i * bins + j]).sum() };
    let h_a = entropy((0..bins).map(row), total);
    let h_b = entropy((0..bins).map(col), total);
    let h_ab = entropy(joint.iter().copied(), total);
    Ok(h_a + h_b - h_ab)
}

/// Marginal entropy of one image, from the same binning as
/// `mutual_information`.
pub fn entropy_of(a: &[f32], mask: Option<&[bool]>, bins: usize) -> Result<f64> {
    mutual_information(a, a, mask, bins)
}

/// Mean squared error over the masked voxels.
pub fn mse(a: &[f32], b: &[f32], mask: Option<&[bool]>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DregError::ShapeMismatch {
            context: "mse inputs",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let mut acc = 0.0;
    let mut n = 0u64;
    for (x, y) in masked_iter(a, b, mask) {
        acc += (x - y) * (x - y);
        n += 1;
    }
    if n == 0 {
        return Err(DregError::EmptyMask("mse"));
    }
    Ok(acc / n as f64)
}

/// Apply an image-wise metric per modality (channel) and average: the
/// foreground mask of each fixed channel (intensity > 0) restricts the
/// computation. A single-modality volume passes its value through.
pub fn modality_average<F>(metric: F, moved: &Volume, fixed: &Volume) -> Result<f64>
where
    F: Fn(&[f32], &[f32], Option<&[bool]>) -> Result<f64>,
{
    if moved.channels != fixed.channels || moved.shape != fixed.shape {
        return Err(DregError::ShapeMismatch {
            context: "modality_average volumes",
            lhs: vec![moved.channels, moved.shape.0, moved.shape.1, moved.shape.2],
            rhs: vec![fixed.channels, fixed.shape.0, fixed.shape.1, fixed.shape.2],
        });
    }
    let mut acc = 0.0;
    for c in 0..moved.channels {
        let f = fixed.channel(c);
        let fg: Vec<bool> = f.iter().map(|&v| v > 0.0).collect();
        acc += metric(moved.channel(c), f, Some(&fg))?;
    }
    Ok(acc / moved.channels as f64)
}

/// Flat evaluation record. Region metrics are present only when masks were
/// supplied; smoothness metrics only when a field was supplied.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub dice: Option<f64>,
    pub hd: Option<f64>,
    pub assd: Option<f64>,
    pub ncc: f64,
    pub mi: f64,
    pub mse: f64,
    pub jacobian_std: Option<f64>,
    pub folding_fraction: Option<f64>,
}

impl MetricReport {
    /// One metric per line, fixed key names, for harness parsing.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                out.push_str(&format!("{k} {v}\n"));
            }
        };
        line("dice", self.dice);
        line("hd", self.hd);
        line("assd", self.assd);
        line("ncc", Some(self.ncc));
        line("mi", Some(self.mi));
        line("mse", Some(self.mse));
        line("jacobian_std", self.jacobian_std);
        line("folding_fraction", self.folding_fraction);
        out
    }
}

fn binarize(v: &[f32]) -> Vec<bool> {
    v.iter().map(|&x| x > 0.5).collect()
}

/// Average the region-wise metrics of per-structure mask channels: the
/// moving masks are warped with nearest-neighbor interpolation through the
/// affine then deformable field, and each structure's Dice/HD/ASSD against
/// the fixed masks is averaged.
pub fn region_metrics(
    masks_moving: &Volume,
    masks_fixed: &Volume,
    phi_aff: &DisplacementField,
    phi_def: &DisplacementField,
) -> Result<(f64, f64, f64)> {
    if masks_moving.channels != masks_fixed.channels || masks_moving.shape != masks_fixed.shape {
        return Err(DregError::ShapeMismatch {
            context: "region_metrics masks",
            lhs: vec![masks_moving.channels],
            rhs: vec![masks_fixed.channels],
        });
    }
    let warped = warp_volume(
        &warp_volume(masks_moving, phi_aff, Interp::Nearest)?,
        phi_def,
        Interp::Nearest,
    )?;
    region_metrics_prewarped(&warped, masks_fixed)
}

/// Region metrics over masks that are already in the fixed space.
pub fn region_metrics_prewarped(warped: &Volume, masks_fixed: &Volume) -> Result<(f64, f64, f64)> {
    if warped.channels != masks_fixed.channels || warped.shape != masks_fixed.shape {
        return Err(DregError::ShapeMismatch {
            context: "region_metrics masks",
            lhs: vec![
                warped.channels,
                warped.shape.0,
                warped.shape.1,
                warped.shape.2,
            ],
            rhs: vec![
                masks_fixed.channels,
                masks_fixed.shape.0,
                masks_fixed.shape.1,
                masks_fixed.shape.2,
            ],
        });
    }
    let shape = masks_fixed.shape;
    let spacing = masks_fixed.spacing;
    let c_n = masks_fixed.channels;
    let (mut d_acc, mut h_acc, mut a_acc) = (0.0, 0.0, 0.0);
    for c in 0..c_n {
        let wa = binarize(warped.channel(c));
        let fb = binarize(masks_fixed.channel(c));
        d_acc += dice_score(&wa, &fb)?;
        h_acc += hausdorff(&wa, &fb, shape, spacing)?;
        a_acc += assd(&wa, &fb, shape, spacing)?;
    }
    let n = c_n as f64;
    Ok((d_acc / n, h_acc / n, a_acc / n))
}

/// Full evaluation of a registration result against the fixed image:
/// modality-averaged image metrics over the fixed foreground, optional
/// region metrics over structure masks, and smoothness of the predicted
/// deformable field.
pub fn evaluate(
    fixed: &Volume,
    result: &RegistrationResult,
    masks: Option<(&Volume, &Volume)>,
) -> Result<MetricReport> {
    let moved = &result.moved;
    let mut report = MetricReport {
        ncc: modality_average(ncc, moved, fixed)?,
        mi: modality_average(|a, b, m| mutual_information(a, b, m, MI_BINS), moved, fixed)?,
        mse: modality_average(mse, moved, fixed)?,
        ..MetricReport::default()
    };
    if let Some((mm, mf)) = masks {
        let (d, h, a) = region_metrics(mm, mf, &result.phi_aff, &result.phi_def)?;
        report.dice = Some(d);
        report.hd = Some(h);
        report.assd = Some(a);
    }
    let smooth = smoothness_report(result.phi_def.vectors())?;
    report.jacobian_std = Some(smooth.jacobian_std);
    report.folding_fraction = Some(smooth.folding_fraction);
    Ok(report)
}
