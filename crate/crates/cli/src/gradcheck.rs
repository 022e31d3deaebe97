//! The gradient-integrity battery behind `dreg gradcheck`: every
//! differentiable operation validated against central finite differences,
//! one line per op.

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dreg_core::field::upsample_field;
use dreg_core::loss::{
    affine_loss, dice_loss, nlcc_loss, pearson, smoothness_loss, LossParts, LossWeights,
};
use dreg_core::net::{Model, NetConfig};
use dreg_core::tensor::{
    affine_field_op, conv3d, forward_diff, global_avg_pool, grad_check, grid_sample_trilinear,
    instance_norm, leaky_relu, linear, softmax, transposed_conv3d, Tensor,
};

pub struct CheckRow {
    pub name: &'static str,
    pub max_err: f64,
    pub tol: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_err < self.tol
    }
}

const OP_TOL: f64 = 1e-4;
const SAMPLER_TOL: f64 = 1e-3;
const STEP: f64 = 1e-5;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::constant(data, shape).expect("valid shape")
}

fn toy_model(seed: u64) -> Model {
    let cfg = NetConfig {
        input_channels: 1,
        encoder_widths: [4, 4, 8, 8],
        affine_widths: [4, 4, 8, 8, 8],
        ..NetConfig::default()
    };
    Model::new(cfg, seed).expect("toy config")
}

/// Run every check once for one seed.
fn battery(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut push = |name: &'static str, tol: f64, err: f64| {
        rows.push(CheckRow {
            name,
            max_err: err,
            tol,
        });
    };

    {
        let x = rand_tensor(&[2, 6, 6, 6], &mut r);
        let w = rand_tensor(&[4, 2, 3, 3, 3], &mut r);
        let b = rand_tensor(&[4], &mut r);
        let err = grad_check(
            |i| Ok(conv3d(&i[0], &i[1], &i[2], 2, 1)?.square().mean()),
            &[x, w, b],
            STEP,
            Some(50),
            &mut r,
        )?;
        push("conv3d", OP_TOL, err);
    }
    {
        let x = rand_tensor(&[2, 3, 3, 3], &mut r);
        let w = rand_tensor(&[2, 3, 4, 4, 4], &mut r);
        let b = rand_tensor(&[3], &mut r);
        let err = grad_check(
            |i| Ok(transposed_conv3d(&i[0], &i[1], &i[2])?.square().mean()),
            &[x, w, b],
            STEP,
            Some(50),
            &mut r,
        )?;
        push("transposed_conv3d", OP_TOL, err);
    }
    {
        let x = rand_tensor(&[3, 4, 4, 4], &mut r);
        let weights = rand_tensor(&[3, 4, 4, 4], &mut ChaCha8Rng::seed_from_u64(seed ^ 0xa5));
        let err = grad_check(
            |i| Ok(instance_norm(&i[0], 1e-5)?.mul(&weights)?.sum()),
            &[x],
            STEP,
            Some(60),
            &mut r,
        )?;
        push("instance_norm", OP_TOL, err);
    }
    {
        let data: Vec<f64> = (0..48)
            .map(|_| {
                let v: f64 = r.random_range(0.1..1.0);
                if r.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::constant(data, &[48])?;
        let err = grad_check(
            |i| Ok(leaky_relu(&i[0], 0.1).square().mean()),
            &[x],
            STEP,
            None,
            &mut r,
        )?;
        push("leaky_relu", 1e-6, err);
    }
    {
        let x = rand_tensor(&[4, 3, 3, 3], &mut r);
        let weights = rand_tensor(&[4, 3, 3, 3], &mut ChaCha8Rng::seed_from_u64(seed ^ 0xb6));
        let err = grad_check(
            |i| Ok(softmax(&i[0], 0)?.mul(&weights)?.sum()),
            &[x],
            STEP,
            Some(60),
            &mut r,
        )?;
        push("softmax", OP_TOL, err);
    }
    {
        let a = rand_tensor(&[3, 1, 1, 1], &mut r);
        let b = rand_tensor(&[3, 4, 4, 4], &mut r);
        let err = grad_check(
            |i| Ok(i[0].mul(&i[1])?.add(&i[1].square())?.sqrt().sum()),
            &[a, b],
            STEP,
            Some(60),
            &mut r,
        )?;
        push("elementwise_broadcast", OP_TOL, err);
    }
    {
        let a = rand_tensor(&[2, 3, 3, 3], &mut r);
        let b = rand_tensor(&[3, 3, 3, 3], &mut r);
        let err = grad_check(
            |i| {
                let cat = Tensor::concat(&[i[0].clone(), i[1].clone()], 0)?;
                Ok(cat.narrow(0, 1, 3)?.square().sum())
            },
            &[a, b],
            STEP,
            Some(60),
            &mut r,
        )?;
        push("concat_slice", OP_TOL, err);
    }
    {
        let x = rand_tensor(&[6], &mut r);
        let w = rand_tensor(&[4, 6], &mut r);
        let b = rand_tensor(&[4], &mut r);
        let err = grad_check(
            |i| Ok(linear(&i[0], &i[1], &i[2])?.square().sum()),
            &[x, w, b],
            STEP,
            None,
            &mut r,
        )?;
        push("linear", OP_TOL, err);
    }
    {
        let x = rand_tensor(&[4, 3, 3, 3], &mut r);
        let err = grad_check(
            |i| Ok(global_avg_pool(&i[0])?.square().sum()),
            &[x],
            STEP,
            Some(40),
            &mut r,
        )?;
        push("global_avg_pool", OP_TOL, err);
    }
    {
        let volume = rand_tensor(&[2, 6, 6, 6], &mut r);
        let grid = dreg_core::field::identity_grid((6, 6, 6));
        let mut loc = grid.data().to_vec();
        for v in loc.iter_mut() {
            *v = (*v).clamp(1.0, 4.0) - r.random_range(0.2..0.45);
        }
        let locations = Tensor::constant(loc, &[3, 6, 6, 6])?;
        let err = grad_check(
            |i| Ok(grid_sample_trilinear(&i[0], &i[1])?.square().mean()),
            &[volume, locations],
            STEP,
            Some(60),
            &mut r,
        )?;
        push("grid_sample_trilinear", SAMPLER_TOL, err);
    }
    {
        let x = rand_tensor(&[3, 4, 4, 4], &mut r);
        let w = rand_tensor(&[3, 4, 4, 4], &mut ChaCha8Rng::seed_from_u64(seed ^ 0xc7));
        let err = grad_check(
            |i| {
                let mut loss = forward_diff(&i[0], 1)?.mul(&w)?.sum();
                for axis in 2..=3 {
                    loss = loss.add(&forward_diff(&i[0], axis)?.square().sum())?;
                }
                Ok(loss)
            },
            &[x],
            STEP,
            Some(60),
            &mut r,
        )?;
        push("forward_diff", OP_TOL, err);
    }
    {
        let v = rand_tensor(&[3, 3, 3, 3], &mut r);
        let err = grad_check(
            |i| Ok(upsample_field(&i[0], 2)?.square().mean()),
            &[v],
            STEP,
            Some(40),
            &mut r,
        )?;
        push("upsample_field", SAMPLER_TOL, err);
    }
    {
        let theta = rand_tensor(&[12], &mut r).mul_scalar(0.1);
        let w = rand_tensor(&[3, 4, 4, 4], &mut ChaCha8Rng::seed_from_u64(seed ^ 0xd8));
        let err = grad_check(
            |i| Ok(affine_field_op(&i[0], (4, 4, 4))?.mul(&w)?.sum()),
            &[theta],
            STEP,
            None,
            &mut r,
        )?;
        push("affine_field", OP_TOL, err);
    }
    {
        let a_star = rand_tensor(&[9], &mut r).mul_scalar(0.2);
        let err = grad_check(|i| affine_loss(&i[0]), &[a_star], STEP, None, &mut r)?;
        push("affine_loss", OP_TOL, err);
    }
    {
        let phi = rand_tensor(&[3, 5, 5, 5], &mut r);
        let err = grad_check(|i| smoothness_loss(&i[0]), &[phi], STEP, Some(60), &mut r)?;
        push("smoothness_loss", OP_TOL, err);
    }
    {
        let x = rand_tensor(&[20], &mut r);
        let y = rand_tensor(&[20], &mut r);
        let err = grad_check(|i| pearson(&i[0], &i[1]), &[x, y], STEP, None, &mut r)?;
        push("pearson", OP_TOL, err);
    }
    {
        let m = rand_tensor(&[1, 9, 9, 9], &mut r);
        let f = rand_tensor(&[1, 9, 9, 9], &mut r);
        let err = grad_check(|i| nlcc_loss(&i[0], &i[1]), &[m, f], STEP, Some(40), &mut r)?;
        push("nlcc_loss", SAMPLER_TOL, err);
    }
    {
        let mm = rand_tensor(&[2, 6, 6, 6], &mut r)
            .add_scalar(1.2)
            .mul_scalar(0.4);
        let mf = rand_tensor(&[2, 6, 6, 6], &mut r)
            .add_scalar(1.2)
            .mul_scalar(0.4);
        let pa = rand_tensor(&[3, 6, 6, 6], &mut r).mul_scalar(0.3);
        let pd = rand_tensor(&[3, 6, 6, 6], &mut r).mul_scalar(0.3);
        let err = grad_check(
            |i| dice_loss(&i[0], &i[1], &i[2], &i[3]),
            &[mm, mf, pa, pd],
            STEP,
            Some(30),
            &mut r,
        )?;
        push("dice_loss", SAMPLER_TOL, err);
    }
    {
        let model = toy_model(seed);
        let v0 = rand_tensor(&[3, 4, 4, 4], &mut r).mul_scalar(0.5);
        let v1 = rand_tensor(&[3, 8, 8, 8], &mut r).mul_scalar(0.5);
        let v2 = rand_tensor(&[3, 16, 16, 16], &mut r).mul_scalar(0.5);
        let err = grad_check(
            |i| {
                let (_, phi) = model.dfi(i, 2)?;
                Ok(phi.square().mean())
            },
            &[v0, v1, v2],
            STEP,
            Some(20),
            &mut r,
        )?;
        push("dfi", SAMPLER_TOL, err);
    }
    {
        let model = toy_model(seed);
        let c = model.config().width_at_level(1);
        let e_m = rand_tensor(&[c, 8, 8, 8], &mut r);
        let e_f = rand_tensor(&[c, 8, 8, 8], &mut r);
        let d_up = rand_tensor(&[c, 8, 8, 8], &mut r);
        let err = grad_check(
            |i| Ok(model.nff(&i[0], &i[1], &i[2], 1)?.square().mean()),
            &[e_m, e_f, d_up],
            STEP,
            Some(25),
            &mut r,
        )?;
        push("nff", SAMPLER_TOL, err);
    }
    {
        let mut model = toy_model(seed);
        // the zero-initialized affine head parks every sampling location on
        // an exact voxel corner (a trilinear kink); nudge it to a generic
        // point before probing, as for any interpolation gradient check
        for name in ["affine.head.w", "affine.head.b"] {
            let t = model.params().get(name).expect("head param");
            let shape = t.shape().to_vec();
            let data = (0..t.numel())
                .map(|_| r.random_range(-0.01..0.01))
                .collect();
            model
                .params_mut()
                .replace(name, Tensor::leaf(data, &shape, true).expect("head shape"))
                .expect("replace head");
        }
        let i_m = rand_tensor(&[1, 8, 8, 8], &mut r)
            .add_scalar(1.0)
            .mul_scalar(0.5);
        let i_f = rand_tensor(&[1, 8, 8, 8], &mut r)
            .add_scalar(1.0)
            .mul_scalar(0.5);
        let masks_m = rand_tensor(&[1, 8, 8, 8], &mut r)
            .add_scalar(1.2)
            .mul_scalar(0.4);
        let masks_f = rand_tensor(&[1, 8, 8, 8], &mut r)
            .add_scalar(1.2)
            .mul_scalar(0.4);
        let names = [
            "affine.b0.down.w",
            "affine.head.w",
            "enc_m.b0.conv.w",
            "enc_f.b1.down.w",
            "dec.d0.conv.w",
            "dec.up1.w",
            "dec.nff2.ch.w",
            "dec.nff3.sp.w",
            "dec.v0.w",
            "dfi4.w",
        ];
        let inputs: Vec<Tensor> = names
            .iter()
            .map(|n| model.params().get(n).map(|t| t.detach()))
            .collect::<dreg_core::Result<_>>()?;
        // smaller probe step: the deep composite crosses interpolation and
        // activation kinks under wider perturbations
        let err = grad_check(
            |ins| {
                let mut m = model.clone();
                for (name, t) in names.iter().zip(ins) {
                    m.params_mut().replace(name, t.clone())?;
                }
                let pass = m.forward(&i_m, &i_f, 1)?;
                let parts = LossParts {
                    aff: affine_loss(&pass.theta.narrow(0, 0, 9)?)?,
                    reg: smoothness_loss(&pass.phi_def)?,
                    sim: nlcc_loss(&pass.moved, &i_f)?,
                    seg: Some(dice_loss(&masks_m, &masks_f, &pass.phi_aff, &pass.phi_def)?),
                };
                dreg_core::loss::total_loss(&parts, &LossWeights::default())
            },
            &inputs,
            1e-6,
            Some(5),
            &mut r,
        )?;
        push("full_network", SAMPLER_TOL, err);
    }
    Ok(rows)
}

/// Run the battery over three consecutive seeds and fold to the per-op
/// worst case. `inject_broken` appends a deliberately wrong gradient row
/// (diagnostic for the harness itself).
pub fn run(seed: u64, inject_broken: bool) -> Result<Vec<CheckRow>> {
    let mut worst: Vec<CheckRow> = Vec::new();
    for s in seed..seed + 3 {
        let rows = battery(s)?;
        if worst.is_empty() {
            worst = rows;
        } else {
            for (acc, row) in worst.iter_mut().zip(rows) {
                acc.max_err = acc.max_err.max(row.max_err);
            }
        }
    }
    if inject_broken {
        // emulate an op whose backward is mis-scaled: the first (analytic)
        // evaluation sees sum(2x), the finite-difference probes see sum(x)
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[8], &mut r);
        let calls = std::cell::Cell::new(0usize);
        let err = grad_check(
            |i| {
                let first = calls.get() == 0;
                calls.set(calls.get() + 1);
                Ok(if first {
                    i[0].mul_scalar(2.0).sum()
                } else {
                    i[0].sum()
                })
            },
            &[x],
            STEP,
            None,
            &mut r,
        )?;
        worst.push(CheckRow {
            name: "injected_broken",
            max_err: err,
            tol: OP_TOL,
        });
    }
    Ok(worst)
}
