//! Optimization loop: bias-corrected Adam, the stepped learning-rate
//! schedule, loss assembly and per-step logging.

use crate::error::{DregError, Result};
use crate::io::{AdamMoments, Checkpoint, Volume};
use crate::loss::{
    affine_loss, dice_loss, nlcc_loss, smoothness_loss, total_loss, LossParts, LossWeights,
};
use crate::net::Model;
use crate::tensor::{ParamSet, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: u32,
    /// Learning rate halves after each of these (1-based) epochs.
    pub halve_after_epochs: Vec<u32>,
    pub batch_size: usize,
    pub steps_per_epoch: u32,
    pub weights: LossWeights,
    pub seed: u64,
    pub supervised: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            epochs: 10,
            halve_after_epochs: vec![4, 7],
            batch_size: 1,
            steps_per_epoch: 100,
            weights: LossWeights::default(),
            seed: 0,
            supervised: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0.is_nan() || self.lr0 <= 0.0 {
            return Err(DregError::InvalidArgument(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(DregError::InvalidArgument(
                "epochs and steps_per_epoch must be positive".into(),
            ));
        }
        if self.batch_size != 1 {
            return Err(DregError::InvalidArgument(
                "only batch_size 1 is supported (one image pair per batch)".into(),
            ));
        }
        // boundaries past the horizon are inert (short fine-tuning runs)
        if self.halve_after_epochs.contains(&0) {
            return Err(DregError::InvalidArgument(format!(
                "halve_after_epochs {:?} must be 1-based epoch numbers",
                self.halve_after_epochs
            )));
        }
        self.weights.validate()
    }
}

/// Learning rate of a (1-based) epoch: `lr0` halved once per configured
/// boundary already passed.
pub fn lr_at(epoch: u32, cfg: &TrainConfig) -> f64 {
    let halvings = cfg
        .halve_after_epochs
        .iter()
        .filter(|&&h| epoch > h)
        .count();
    cfg.lr0 * 0.5f64.powi(halvings as i32)
}

/// One bias-corrected Adam update over every parameter, in registration
/// order. Parameters without an accumulated gradient are treated as having
/// gradient zero.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamMoments,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    if state.m.len() != names.len() || state.v.len() != names.len() {
        return Err(DregError::CheckpointMismatch(format!(
            "optimizer state tracks {} parameters, model has {}",
            state.m.len(),
            names.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (i, name) in names.iter().enumerate() {
        let tensor = params.get(name)?;
        let grad = tensor.grad().unwrap_or_else(|| vec![0.0; tensor.numel()]);
        if grad.len() != state.m[i].len() {
            return Err(DregError::CheckpointMismatch(format!(
                "optimizer moment size mismatch for {name:?}"
            )));
        }
        let mut data = tensor.data().to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..data.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        let shape = tensor.shape().to_vec();
        params.replace(name, Tensor::leaf(data, &shape, true)?)?;
    }
    Ok(())
}

/// Zeroed optimizer moments matching a parameter set.
pub fn fresh_moments(params: &ParamSet) -> AdamMoments {
    AdamMoments {
        t: 0,
        m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
    }
}

/// One training example; masks must be present in supervised mode.
pub struct TrainSample {
    pub moving: Volume,
    pub fixed: Volume,
    pub masks_moving: Option<Volume>,
    pub masks_fixed: Option<Volume>,
}

/// Loss components of one optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub l_aff: f64,
    pub l_reg: f64,
    pub l_sim: f64,
    pub l_seg: Option<f64>,
    pub total: f64,
}

impl StepRecord {
    /// One text record per step.
    pub fn to_line(&self) -> String {
        match self.l_seg {
            Some(seg) => format!(
                "step={} lr={} l_aff={} l_reg={} l_sim={} l_seg={} total={}",
                self.step, self.lr, self.l_aff, self.l_reg, self.l_sim, seg, self.total
            ),
            None => format!(
                "step={} lr={} l_aff={} l_reg={} l_sim={} total={}",
                self.step, self.lr, self.l_aff, self.l_reg, self.l_sim, self.total
            ),
        }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

/// Resume state carried in a checkpoint.
pub struct ResumePoint {
    pub step: u64,
    pub opt: AdamMoments,
}

/// Run the training loop: per step, forward -> weighted loss -> backward ->
/// Adam, cycling through `data` in order. The checkpoint callback fires at
/// the end of every epoch. Fully deterministic given the model and config.
pub fn train<F>(
    model: &mut Model,
    cfg: &TrainConfig,
    data: &[TrainSample],
    resume: Option<ResumePoint>,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(u32, &Checkpoint) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(DregError::InvalidArgument("empty training dataset".into()));
    }
    if cfg.supervised {
        for (i, s) in data.iter().enumerate() {
            if s.masks_moving.is_none() || s.masks_fixed.is_none() {
                return Err(DregError::InvalidArgument(format!(
                    "supervised training needs masks; sample {i} has none"
                )));
            }
        }
    }
    let (mut global_step, mut opt) = match resume {
        Some(r) => (r.step, r.opt),
        None => (0, fresh_moments(model.params())),
    };
    let mut log = Vec::with_capacity((cfg.epochs * cfg.steps_per_epoch) as usize);
    let mut local_step: usize = 0;
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch, cfg);
        for _ in 0..cfg.steps_per_epoch {
            let sample = &data[local_step % data.len()];
            local_step += 1;
            global_step += 1;

            let moving = sample.moving.to_tensor();
            let fixed = sample.fixed.to_tensor();
            let pass = model.forward(&moving, &fixed, 1)?;
            let a_star = pass.theta.narrow(0, 0, 9)?;
            let parts = LossParts {
                aff: affine_loss(&a_star)?,
                reg: smoothness_loss(&pass.phi_def)?,
                sim: nlcc_loss(&pass.moved, &fixed)?,
                seg: if cfg.supervised {
                    let mm = sample.masks_moving.as_ref().unwrap().to_tensor();
                    let mf = sample.masks_fixed.as_ref().unwrap().to_tensor();
                    Some(dice_loss(&mm, &mf, &pass.phi_aff, &pass.phi_def)?)
                } else {
                    None
                },
            };
            let total = total_loss(&parts, &cfg.weights)?;
            let record = StepRecord {
                step: global_step,
                lr,
                l_aff: parts.aff.item(),
                l_reg: parts.reg.item(),
                l_sim: parts.sim.item(),
                l_seg: parts.seg.as_ref().map(Tensor::item),
                total: total.item(),
            };
            if !record.total.is_finite() {
                return Err(DregError::Numerical(format!(
                    "non-finite loss at step {}: l_aff={} l_reg={} l_sim={} l_seg={:?}",
                    record.step, record.l_aff, record.l_reg, record.l_sim, record.l_seg
                )));
            }
            total.backward()?;
            adam_step(
                model.params_mut(),
                &mut opt,
                lr,
                ADAM_BETA1,
                ADAM_BETA2,
                ADAM_EPS,
            )?;
            log.push(record);
        }
        let ckpt = model.to_checkpoint(global_step, Some(opt.clone()));
        on_epoch(epoch, &ckpt)?;
    }
    let checkpoint = model.to_checkpoint(global_step, Some(opt));
    Ok(TrainOutcome { checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_matches_stated_epochs() {
        let cfg = TrainConfig::default();
        for epoch in 1..=4 {
            assert_eq!(lr_at(epoch, &cfg), 1e-4);
        }
        assert_eq!(lr_at(5, &cfg), 5e-5);
        assert_eq!(lr_at(6, &cfg), 5e-5);
        assert_eq!(lr_at(7, &cfg), 5e-5);
        assert_eq!(lr_at(8, &cfg), 2.5e-5);
        assert_eq!(lr_at(10, &cfg), 2.5e-5);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut ps = ParamSet::new();
        ps.register("p", Tensor::leaf(vec![0.0, 0.0], &[2], true).unwrap())
            .unwrap();
        {
            let t = ps.get("p").unwrap();
            let loss = t.sum();
            loss.backward().unwrap(); // gradient 1 everywhere
        }
        let mut state = fresh_moments(&ps);
        adam_step(&mut ps, &mut state, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        let p = ps.get("p").unwrap();
        for &v in p.data() {
            assert!((v + 0.1 / (1.0 + ADAM_EPS)).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut ps = ParamSet::new();
        ps.register("p", Tensor::leaf(vec![1.5, -0.5], &[2], true).unwrap())
            .unwrap();
        let mut state = fresh_moments(&ps);
        adam_step(&mut ps, &mut state, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        assert_eq!(ps.get("p").unwrap().data(), &[1.5, -0.5]);
    }

    #[test]
    fn step_record_line_formats() {
        let rec = StepRecord {
            step: 3,
            lr: 1e-4,
            l_aff: 0.5,
            l_reg: 0.25,
            l_sim: -0.75,
            l_seg: None,
            total: 0.0,
        };
        let line = rec.to_line();
        assert!(line.starts_with("step=3 "));
        assert!(
            !line.contains("l_seg"),
            "unsupervised record must omit l_seg: {line}"
        );
        let sup = StepRecord {
            l_seg: Some(-1.0),
            ..rec
        };
        assert!(sup.to_line().contains("l_seg=-1"));
    }
}
