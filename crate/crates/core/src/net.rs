//! The registration model: an affine sub-network cascaded with a
//! dual-encoder / single-decoder deformable network whose decoding blocks
//! fuse velocity sub-fields (DFI) and features (NFF).
//!
//! Resolution levels are indexed 0..=3 with level 3 at full resolution and
//! each deeper level halving every spatial extent. The encoder produces one
//! feature map per level; each decoding block predicts a 3-channel velocity
//! sub-field at its level. DFI gathers the sub-fields predicted so far,
//! upsamples them to the target grid, gates each one with a learned
//! weighting map, sums them and integrates the result to a displacement
//! field by scaling and squaring. NFF fuses the warped moving features, the
//! fixed features and the upsampled previous decoder state with channel and
//! spatial attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DregError, Result};
use crate::field::{
    apply_affine, compose, identity_grid, integrate_velocity, upsample_field, AffineParams,
    DisplacementField, Interp, VelocityField,
};
use crate::io::{AdamMoments, Checkpoint, Volume};
use crate::tensor::{
    affine_field_op, conv3d, global_avg_pool, grid_sample_trilinear, instance_norm, leaky_relu,
    linear, sigmoid, softmax, transposed_conv3d, ParamSet, Tensor,
};

pub const LEVELS: usize = 4;
const IN_EPS: f64 = 1e-5;

/// Architecture hyperparameters. Serialized losslessly into checkpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    /// Channels per image (1 single-modality, 2 for a T1w/T2w pair).
    pub input_channels: usize,
    /// Channel widths of the four encoding blocks, shallow (full
    /// resolution) first.
    pub encoder_widths: [usize; 4],
    /// Scaling-and-squaring steps for velocity integration.
    pub t_steps: u32,
    pub leaky_slope: f64,
    /// Kernel extent of the NFF spatial-attention convolution.
    pub nff_spatial_kernel: usize,
    /// Channel widths of the five affine tower blocks.
    pub affine_widths: [usize; 5],
    /// Diagnostic switch: force every DFI weighting map to 1 so the fused
    /// field degenerates to the plain sum of upsampled sub-fields.
    pub dfi_identity_gate: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_channels: 2,
            encoder_widths: [8, 16, 32, 64],
            t_steps: 7,
            leaky_slope: 0.1,
            nff_spatial_kernel: 3,
            affine_widths: [8, 16, 32, 64, 64],
            dfi_identity_gate: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(DregError::InvalidArgument(
                "input_channels must be positive".into(),
            ));
        }
        if self.encoder_widths.contains(&0) || self.affine_widths.contains(&0) {
            return Err(DregError::InvalidArgument(
                "channel widths must be positive".into(),
            ));
        }
        if self.nff_spatial_kernel.is_multiple_of(2) {
            return Err(DregError::InvalidArgument(
                "nff_spatial_kernel must be odd".into(),
            ));
        }
        Ok(())
    }

    /// Channel width of the encoder feature map at `level` (3 = full res).
    pub fn width_at_level(&self, level: usize) -> usize {
        self.encoder_widths[LEVELS - 1 - level]
    }

    /// Channel count of the decoder output at `level`.
    pub fn decoder_channels(&self, level: usize) -> usize {
        if level == 0 {
            self.encoder_widths[3]
        } else {
            3 * self.width_at_level(level)
        }
    }
}

/// Side outputs of one encoder branch, indexed by level (3 = full res).
pub struct EncoderPyramid {
    levels: [Tensor; LEVELS],
}

impl EncoderPyramid {
    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l]
    }
}

#[derive(Clone, Copy, Debug)]
pub enum EncoderBranch {
    Moving,
    Fixed,
}

impl EncoderBranch {
    fn prefix(self) -> &'static str {
        match self {
            EncoderBranch::Moving => "enc_m",
            EncoderBranch::Fixed => "enc_f",
        }
    }
}

/// Graph-connected outputs of one forward pass (training view).
pub struct ForwardPass {
    /// Affine head output: 12 entries, row-major residual matrix then
    /// translation.
    pub theta: Tensor,
    pub phi_aff: Tensor,
    /// The moving image after the affine warp.
    pub moving_affine: Tensor,
    /// Velocity sub-fields v^0..v^3 of the first deformable pass.
    pub velocities: Vec<Tensor>,
    /// Full-resolution deformation field (composed across cascades).
    pub phi_def: Tensor,
    pub moved: Tensor,
}

/// Inference result with domain-typed fields.
pub struct RegistrationResult {
    pub affine: AffineParams,
    pub phi_aff: DisplacementField,
    pub velocities: Vec<VelocityField>,
    pub phi_def: DisplacementField,
    pub moved: Volume,
}

#[derive(Clone)]
pub struct Model {
    cfg: NetConfig,
    params: ParamSet,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut self.rng) * std
            })
            .collect()
    }

    /// Kaiming-style fan-in scaled draw for a conv kernel. Convolutions
    /// feeding an instance-norm layer carry no bias (the normalization
    /// subtracts the per-channel mean, which would leave the bias without
    /// any gradient).
    fn conv(
        &mut self,
        ps: &mut ParamSet,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        biased: bool,
    ) -> Result<()> {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        ps.register(
            &format!("{name}.w"),
            Tensor::leaf(self.normal(n, std), shape, true)?,
        )?;
        if biased {
            let out = shape[if shape.len() == 5 && shape[2] == 4 {
                1
            } else {
                0
            }];
            ps.register(
                &format!("{name}.b"),
                Tensor::leaf(vec![0.0; out], &[out], true)?,
            )?;
        }
        Ok(())
    }
}

impl Model {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut ps = ParamSet::new();
        let k3 = 3usize;

        // affine tower: 5 stride-2 blocks, then a zero-initialized head
        let mut prev = 2 * cfg.input_channels;
        for (i, &w) in cfg.affine_widths.iter().enumerate() {
            init.conv(
                &mut ps,
                &format!("affine.b{i}.down"),
                &[w, prev, k3, k3, k3],
                prev * 27,
                false,
            )?;
            init.conv(
                &mut ps,
                &format!("affine.b{i}.res.c1"),
                &[w, w, k3, k3, k3],
                w * 27,
                false,
            )?;
            init.conv(
                &mut ps,
                &format!("affine.b{i}.res.c2"),
                &[w, w, k3, k3, k3],
                w * 27,
                false,
            )?;
            prev = w;
        }
        let aw = cfg.affine_widths[4];
        ps.register(
            "affine.head.w",
            Tensor::leaf(vec![0.0; 12 * aw], &[12, aw], true)?,
        )?;
        ps.register("affine.head.b", Tensor::leaf(vec![0.0; 12], &[12], true)?)?;

        // dual encoder: identical architecture, separate parameters
        for branch in ["enc_m", "enc_f"] {
            let w0 = cfg.encoder_widths[0];
            init.conv(
                &mut ps,
                &format!("{branch}.b0.conv"),
                &[w0, cfg.input_channels, k3, k3, k3],
                cfg.input_channels * 27,
                false,
            )?;
            let mut prev = w0;
            for i in 1..LEVELS {
                let w = cfg.encoder_widths[i];
                init.conv(
                    &mut ps,
                    &format!("{branch}.b{i}.down"),
                    &[w, prev, k3, k3, k3],
                    prev * 27,
                    false,
                )?;
                init.conv(
                    &mut ps,
                    &format!("{branch}.b{i}.res.c1"),
                    &[w, w, k3, k3, k3],
                    w * 27,
                    false,
                )?;
                init.conv(
                    &mut ps,
                    &format!("{branch}.b{i}.res.c2"),
                    &[w, w, k3, k3, k3],
                    w * 27,
                    false,
                )?;
                prev = w;
            }
        }

        // decoder: bottleneck conv, per-block transposed conv + NFF, and
        // one velocity head per level
        let d0 = cfg.decoder_channels(0);
        init.conv(
            &mut ps,
            "dec.d0.conv",
            &[d0, 2 * cfg.encoder_widths[3], k3, k3, k3],
            2 * cfg.encoder_widths[3] * 27,
            true,
        )?;
        init.conv(&mut ps, "dec.v0", &[3, d0, k3, k3, k3], d0 * 27, true)?;
        for l in 1..LEVELS {
            let c = cfg.width_at_level(l);
            let c_prev = cfg.decoder_channels(l - 1);
            init.conv(
                &mut ps,
                &format!("dec.up{l}"),
                &[c_prev, c, 4, 4, 4],
                c_prev * 64,
                true,
            )?;
            let cat = 3 * c;
            let std = (2.0 / cat as f64).sqrt();
            ps.register(
                &format!("dec.nff{l}.ch.w"),
                Tensor::leaf(init.normal(cat * cat, std), &[cat, cat], true)?,
            )?;
            ps.register(
                &format!("dec.nff{l}.ch.b"),
                Tensor::leaf(vec![0.0; cat], &[cat], true)?,
            )?;
            let ks = cfg.nff_spatial_kernel;
            init.conv(
                &mut ps,
                &format!("dec.nff{l}.sp"),
                &[3, cat, ks, ks, ks],
                cat * ks * ks * ks,
                true,
            )?;
            init.conv(
                &mut ps,
                &format!("dec.v{l}"),
                &[3, cat, k3, k3, k3],
                cat * 27,
                true,
            )?;
        }
        // DFI weighting convolutions: stage s fuses s sub-fields
        for s in 1..=LEVELS {
            init.conv(
                &mut ps,
                &format!("dfi{s}"),
                &[s, 3 * s, k3, k3, k3],
                3 * s * 27,
                true,
            )?;
        }

        Ok(Model { cfg, params: ps })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_elements()
    }

    pub fn affine_parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("affine."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Parameters of the deformable part (everything but the affine tower).
    pub fn deformable_parameter_count(&self) -> usize {
        self.parameter_count() - self.affine_parameter_count()
    }

    fn p(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }

    fn act(&self, x: &Tensor) -> Tensor {
        leaky_relu(x, self.cfg.leaky_slope)
    }

    /// Instance norm, skipped at a 1x1x1 spatial extent where normalizing
    /// over a single voxel would zero the feature map and stall gradients.
    fn norm(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s[1] * s[2] * s[3] == 1 {
            Ok(x.clone())
        } else {
            instance_norm(x, IN_EPS)
        }
    }

    /// Bias-less convolution, instance norm, LeakyReLU.
    fn conv_in_act(&self, x: &Tensor, name: &str, stride: usize) -> Result<Tensor> {
        let w = self.p(&format!("{name}.w"))?;
        let zero_bias = Tensor::zeros(&[w.shape()[0]]);
        let y = conv3d(x, w, &zero_bias, stride, 1)?;
        Ok(self.act(&self.norm(&y)?))
    }

    /// Two 3x3x3 convolutions with an identity skip.
    fn res_block(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let h = self.conv_in_act(x, &format!("{prefix}.c1"), 1)?;
        let c2w = self.p(&format!("{prefix}.c2.w"))?;
        let h = conv3d(&h, c2w, &Tensor::zeros(&[c2w.shape()[0]]), 1, 1)?;
        let h = self.norm(&h)?;
        Ok(self.act(&x.add(&h)?))
    }

    fn check_divisible(extents: (usize, usize, usize), by: usize) -> Result<()> {
        let (d, h, w) = extents;
        if d % by != 0 || h % by != 0 || w % by != 0 {
            return Err(DregError::InvalidArgument(format!(
                "spatial extents {extents:?} must be divisible by {by}"
            )));
        }
        Ok(())
    }

    fn spatial(t: &Tensor) -> (usize, usize, usize) {
        let s = t.shape();
        (s[1], s[2], s[3])
    }

    /// One encoder branch: four blocks yielding the feature pyramid.
    pub fn encode(&self, image: &Tensor, branch: EncoderBranch) -> Result<EncoderPyramid> {
        Self::check_divisible(Self::spatial(image), 8)?;
        let pre = branch.prefix();
        let e3 = self.conv_in_act(image, &format!("{pre}.b0.conv"), 1)?;
        let mut levels = vec![e3];
        for i in 1..LEVELS {
            let prev = levels.last().unwrap();
            let down = self.conv_in_act(prev, &format!("{pre}.b{i}.down"), 2)?;
            levels.push(self.res_block(&down, &format!("{pre}.b{i}.res"))?);
        }
        // block i produces level 3-i
        let e0 = levels.pop().unwrap();
        let e1 = levels.pop().unwrap();
        let e2 = levels.pop().unwrap();
        let e3 = levels.pop().unwrap();
        Ok(EncoderPyramid {
            levels: [e0, e1, e2, e3],
        })
    }

    /// Affine sub-network: 5 stride-2 ResBlocks over the concatenated pair,
    /// pooled and mapped to 12 parameters. The head is zero-initialized so
    /// the initial transform is the identity.
    pub fn affine_net(&self, moving: &Tensor, fixed: &Tensor) -> Result<Tensor> {
        if moving.shape() != fixed.shape() {
            return Err(DregError::ShapeMismatch {
                context: "affine_net inputs",
                lhs: moving.shape().to_vec(),
                rhs: fixed.shape().to_vec(),
            });
        }
        Self::check_divisible(Self::spatial(moving), 8)?;
        let mut x = Tensor::concat(&[moving.clone(), fixed.clone()], 0)?;
        for i in 0..self.cfg.affine_widths.len() {
            x = self.conv_in_act(&x, &format!("affine.b{i}.down"), 2)?;
            x = self.res_block(&x, &format!("affine.b{i}.res"))?;
        }
        let pooled = global_avg_pool(&x)?;
        linear(&pooled, self.p("affine.head.w")?, self.p("affine.head.b")?)
    }

    /// Deformation Field Integration: upsample the given velocity sub-fields
    /// (`velocities[m]` lives at level `m`) to the grid of `level`, gate each
    /// with a learned weighting map, sum, and integrate.
    /// Returns the fused velocity field and the integrated displacement.
    pub fn dfi(&self, velocities: &[Tensor], level: usize) -> Result<(Tensor, Tensor)> {
        if velocities.is_empty() {
            return Err(DregError::InvalidArgument(
                "dfi needs at least one sub-field".into(),
            ));
        }
        if level >= LEVELS || velocities.len() > level + 1 {
            return Err(DregError::InvalidArgument(format!(
                "dfi: {} sub-fields cannot target level {level}",
                velocities.len()
            )));
        }
        let stage = velocities.len();
        let upsampled: Vec<Tensor> = velocities
            .iter()
            .enumerate()
            .map(|(m, v)| upsample_field(v, 1 << (level - m)))
            .collect::<Result<_>>()?;
        let cat = Tensor::concat(&upsampled, 0)?;
        let maps = conv3d(
            &cat,
            self.p(&format!("dfi{stage}.w"))?,
            self.p(&format!("dfi{stage}.b"))?,
            1,
            1,
        )?;
        let gates = if self.cfg.dfi_identity_gate {
            Tensor::full(maps.shape(), 1.0)
        } else {
            sigmoid(&maps)
        };
        let mut fused: Option<Tensor> = None;
        for (m, up) in upsampled.iter().enumerate() {
            let gate = gates.narrow(0, m, 1)?;
            let weighted = gate.mul(up)?;
            fused = Some(match fused {
                None => weighted,
                Some(acc) => acc.add(&weighted)?,
            });
        }
        let fused = fused.unwrap();
        let phi = integrate_velocity(&fused, self.cfg.t_steps)?;
        Ok((fused, phi))
    }

    /// Non-rigid Feature Fusion: channel and spatial attention over the
    /// warped moving features, the fixed features and the upsampled previous
    /// decoder state; the attended maps are concatenated.
    pub fn nff(
        &self,
        e_m_warped: &Tensor,
        e_f: &Tensor,
        d_prev_up: &Tensor,
        block: usize,
    ) -> Result<Tensor> {
        if e_m_warped.shape() != e_f.shape() {
            return Err(DregError::ShapeMismatch {
                context: "nff warped-moving vs fixed features",
                lhs: e_m_warped.shape().to_vec(),
                rhs: e_f.shape().to_vec(),
            });
        }
        let cat = Tensor::concat(&[e_m_warped.clone(), e_f.clone(), d_prev_up.clone()], 0)?;
        let total_c = cat.shape()[0];

        // channel attention: pooled, mixed, soft-maxed over the whole axis
        let pooled = global_avg_pool(&cat)?;
        let mixed = linear(
            &pooled,
            self.p(&format!("dec.nff{block}.ch.w"))?,
            self.p(&format!("dec.nff{block}.ch.b"))?,
        )?;
        let c = softmax(&mixed, 0)?;

        // spatial attention: 3 maps soft-maxed per voxel
        let pad = (self.cfg.nff_spatial_kernel - 1) / 2;
        let sp = conv3d(
            &cat,
            self.p(&format!("dec.nff{block}.sp.w"))?,
            self.p(&format!("dec.nff{block}.sp.b"))?,
            1,
            pad,
        )?;
        let wmaps = softmax(&sp, 0)?;

        let parts = [e_m_warped, e_f, d_prev_up];
        let mut channel_start = 0;
        let mut outputs = Vec::with_capacity(3);
        for (i, part) in parts.iter().enumerate() {
            let pc = part.shape()[0];
            debug_assert!(channel_start + pc <= total_c);
            let ci = c.narrow(0, channel_start, pc)?.reshape(&[pc, 1, 1, 1])?;
            let wi = wmaps.narrow(0, i, 1)?;
            outputs.push(ci.mul(&wi.mul(part)?)?);
            channel_start += pc;
        }
        Tensor::concat(&outputs, 0)
    }

    /// Map a decoder feature map to a 3-channel velocity sub-field.
    pub fn velocity_head(&self, d: &Tensor, level: usize) -> Result<Tensor> {
        conv3d(
            d,
            self.p(&format!("dec.v{level}.w"))?,
            self.p(&format!("dec.v{level}.b"))?,
            1,
            1,
        )
    }

    /// One deformable pass: encode both images, decode coarse-to-fine and
    /// return the velocity sub-fields plus the integrated full-resolution
    /// deformation field.
    pub fn deformable_pass(
        &self,
        moving: &Tensor,
        fixed: &Tensor,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let em = self.encode(moving, EncoderBranch::Moving)?;
        let ef = self.encode(fixed, EncoderBranch::Fixed)?;
        let cat0 = Tensor::concat(&[em.level(0).clone(), ef.level(0).clone()], 0)?;
        let mut d_prev = conv3d(
            &cat0,
            self.p("dec.d0.conv.w")?,
            self.p("dec.d0.conv.b")?,
            1,
            1,
        )?;
        let mut velocities = vec![self.velocity_head(&d_prev, 0)?];
        for l in 1..LEVELS {
            let (_, phi_l) = self.dfi(&velocities, l)?;
            let grid = identity_grid(Self::spatial(em.level(l)));
            let warped_em = grid_sample_trilinear(em.level(l), &grid.add(&phi_l)?)?;
            let up = transposed_conv3d(
                &d_prev,
                self.p(&format!("dec.up{l}.w"))?,
                self.p(&format!("dec.up{l}.b"))?,
            )?;
            let d_l = self.nff(&warped_em, ef.level(l), &up, l)?;
            velocities.push(self.velocity_head(&d_l, l)?);
            d_prev = d_l;
        }
        let (_, phi_def) = self.dfi(&velocities, LEVELS - 1)?;
        Ok((velocities, phi_def))
    }

    /// Full forward pass: affine alignment, then `cascades` deformable passes
    /// whose fields are composed.
    pub fn forward(&self, moving: &Tensor, fixed: &Tensor, cascades: u32) -> Result<ForwardPass> {
        if moving.shape() != fixed.shape() {
            return Err(DregError::ShapeMismatch {
                context: "forward inputs",
                lhs: moving.shape().to_vec(),
                rhs: fixed.shape().to_vec(),
            });
        }
        if moving.shape()[0] != self.cfg.input_channels {
            return Err(DregError::ShapeMismatch {
                context: "forward input channels vs config",
                lhs: moving.shape().to_vec(),
                rhs: vec![self.cfg.input_channels],
            });
        }
        if cascades == 0 {
            return Err(DregError::InvalidArgument("cascades must be >= 1".into()));
        }
        Self::check_divisible(Self::spatial(moving), 8)?;
        let spatial = Self::spatial(moving);

        let theta = self.affine_net(moving, fixed)?;
        let phi_aff = affine_field_op(&theta, spatial)?;
        let grid = identity_grid(spatial);
        let moving_affine = grid_sample_trilinear(moving, &grid.add(&phi_aff)?)?;

        let (velocities, mut phi_def) = self.deformable_pass(&moving_affine, fixed)?;
        let mut moved = grid_sample_trilinear(&moving_affine, &grid.add(&phi_def)?)?;
        for _ in 1..cascades {
            let (_, phi_next) = self.deformable_pass(&moved, fixed)?;
            phi_def = compose(&phi_def, &phi_next)?;
            moved = grid_sample_trilinear(&moving_affine, &grid.add(&phi_def)?)?;
        }

        Ok(ForwardPass {
            theta,
            phi_aff,
            moving_affine,
            velocities,
            phi_def,
            moved,
        })
    }

    /// Inference entry point over volumes, producing domain-typed results.
    pub fn register(
        &self,
        moving: &Volume,
        fixed: &Volume,
        cascades: u32,
    ) -> Result<RegistrationResult> {
        let pass = self.forward(&moving.to_tensor(), &fixed.to_tensor(), cascades)?;
        let affine = AffineParams::from_theta(pass.theta.data())?;
        Ok(RegistrationResult {
            affine,
            phi_aff: DisplacementField::new(pass.phi_aff.detach())?,
            velocities: pass
                .velocities
                .into_iter()
                .map(|v| VelocityField::new(v.detach()))
                .collect::<Result<_>>()?,
            phi_def: DisplacementField::new(pass.phi_def.detach())?,
            moved: Volume::from_tensor(&pass.moved, moving.spacing)?,
        })
    }

    // ---- checkpoint plumbing ----

    pub fn to_checkpoint(&self, step: u64, opt: Option<AdamMoments>) -> Checkpoint {
        Checkpoint {
            config: self.cfg,
            step,
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().to_vec()))
                .collect(),
            opt,
        }
    }

    /// Rebuild a model from a checkpoint; parameter names and shapes must
    /// match the architecture implied by the stored config exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        let mut model = Model::new(ckpt.config, 0)?;
        if ckpt.params.len() != model.params.len() {
            return Err(DregError::CheckpointMismatch(format!(
                "checkpoint has {} parameters, model expects {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for ((name, shape, data), expected) in ckpt
            .params
            .iter()
            .zip(model.params.names().map(str::to_string).collect::<Vec<_>>())
        {
            if name != &expected {
                return Err(DregError::CheckpointMismatch(format!(
                    "parameter order mismatch: checkpoint {name:?}, model {expected:?}"
                )));
            }
            let current = model.params.get(name)?;
            if current.shape() != &shape[..] {
                return Err(DregError::CheckpointMismatch(format!(
                    "parameter {name:?} shape {:?} does not match model {:?}",
                    shape,
                    current.shape()
                )));
            }
            model
                .params
                .replace(name, Tensor::leaf(data.clone(), shape, true)?)?;
        }
        Ok(model)
    }

    /// Affine warp of the moving volume alone (baseline for evaluation).
    pub fn affine_only_field(&self, result: &RegistrationResult) -> DisplacementField {
        apply_affine(&result.affine, result.phi_aff.spatial_shape())
    }
}

/// Warp helper shared by training and evaluation: `volume(p + field(p))`
/// through the differentiable sampler.
pub fn warp_tensor(volume: &Tensor, field: &Tensor) -> Result<Tensor> {
    let s = field.shape();
    let grid = identity_grid((s[1], s[2], s[3]));
    grid_sample_trilinear(volume, &grid.add(field)?)
}

/// Nearest-neighbor warp for label volumes at evaluation time.
pub fn warp_volume_nearest(volume: &Volume, field: &DisplacementField) -> Result<Volume> {
    crate::field::warp_volume(volume, field, Interp::Nearest)
}
