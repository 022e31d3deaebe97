//! `dreg`: batch entry points for synthetic data generation, training,
//! registration, evaluation and gradient checking.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod config;
mod gradcheck;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dreg_core::error::DregError;
use dreg_core::field::{smoothness_report, DisplacementField};
use dreg_core::io::{
    load_checkpoint, read_volume, save_checkpoint, write_atomic, write_volume, Volume,
};
use dreg_core::metrics::{
    modality_average, mse, mutual_information, ncc, region_metrics_prewarped, MetricReport, MI_BINS,
};
use dreg_core::net::Model;
use dreg_core::synth::{synth_pair, SynthConfig};
use dreg_core::train::{train, ResumePoint, TrainSample};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "dreg",
    version,
    about = "Deformable 3D image registration at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic volume pairs with structure masks and the
    /// ground-truth deformation field.
    Synth {
        /// Cube extent (e.g. 32) or explicit DxHxW (e.g. 32x64x64); must be
        /// divisible by 32.
        #[arg(long)]
        shape: String,
        /// Number of pairs to generate.
        #[arg(long)]
        n: usize,
        /// Gaussian intensity noise sigma.
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Cap on the synthetic displacement magnitude (voxels).
        #[arg(long, default_value_t = 12.0)]
        max_disp: f64,
        /// Ellipsoidal structures (mask channels) per pair.
        #[arg(long, default_value_t = 4)]
        structures: usize,
    },
    /// Train a model on a directory of synthetic pairs.
    Train {
        /// Flat key=value config file (architecture and schedule).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Drop the segmentation loss term.
        #[arg(long)]
        unsupervised: bool,
        /// Continue from an existing checkpoint (step count carries on).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-step log destination (default: <out-ckpt>.log).
        #[arg(long)]
        out_log: Option<PathBuf>,
    },
    /// Register a moving volume onto a fixed volume with a trained model.
    Register {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        out_moved: PathBuf,
        /// Deformable displacement field output (3-channel volume).
        #[arg(long)]
        out_field: PathBuf,
        /// Deformable passes; fields are composed.
        #[arg(long, default_value_t = 1)]
        cascades: u32,
    },
    /// Compare a moved volume against the fixed one and write a metric
    /// report.
    Evaluate {
        #[arg(long)]
        moved: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        /// Structure masks already resampled into the fixed space.
        #[arg(long)]
        masks_moved: Option<PathBuf>,
        #[arg(long)]
        masks_fixed: Option<PathBuf>,
        /// Displacement field for smoothness metrics.
        #[arg(long)]
        field: Option<PathBuf>,
        /// Report file (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference pass/fail table over every differentiable op
    /// (three consecutive seeds).
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Diagnostic: append a deliberately broken gradient row.
        #[arg(long, hide = true)]
        inject_broken: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version are not usage errors
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// Map error causes onto the exit-code contract.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<DregError>() {
        return match e {
            DregError::Numerical(_)
            | DregError::SingularAffine { .. }
            | DregError::NonScalarLoss(_) => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        };
    }
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    EXIT_DATA
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn parse_shape(s: &str) -> anyhow::Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("bad --shape {s:?}: expected N or DxHxW")))?;
    match dims.as_slice() {
        [e] => Ok((*e, *e, *e)),
        [d, h, w] => Ok((*d, *h, *w)),
        _ => Err(usage(format!("bad --shape {s:?}: expected N or DxHxW"))),
    }
}

fn run(cmd: Command) -> anyhow::Result<u8> {
    match cmd {
        Command::Synth {
            shape,
            n,
            noise,
            seed,
            out_dir,
            max_disp,
            structures,
        } => {
            let shape = parse_shape(&shape)?;
            if shape.0 % 32 != 0 || shape.1 % 32 != 0 || shape.2 % 32 != 0 {
                return Err(usage(format!("--shape {shape:?} must be divisible by 32")));
            }
            if n == 0 {
                return Err(usage("--n must be positive"));
            }
            std::fs::create_dir_all(&out_dir).map_err(|e| DregError::io(&out_dir, e))?;
            let cfg = SynthConfig {
                n_structures: structures,
                noise_sigma: noise,
                max_disp,
                ..SynthConfig::default()
            };
            for i in 0..n {
                let pair = synth_pair(shape, &cfg, seed.wrapping_add(i as u64))?;
                let stem = format!("pair_{i:03}");
                write_volume(
                    &out_dir.join(format!("{stem}.moving.dregvol")),
                    &pair.moving,
                )?;
                write_volume(&out_dir.join(format!("{stem}.fixed.dregvol")), &pair.fixed)?;
                write_volume(
                    &out_dir.join(format!("{stem}.masks_moving.dregvol")),
                    &pair.masks_m,
                )?;
                write_volume(
                    &out_dir.join(format!("{stem}.masks_fixed.dregvol")),
                    &pair.masks_f,
                )?;
                write_volume(
                    &out_dir.join(format!("{stem}.gt_field.dregvol")),
                    &pair.gt_field.to_volume([1.0; 3]),
                )?;
            }
            println!("wrote {n} pairs to {}", out_dir.display());
            Ok(0)
        }

        Command::Train {
            config,
            data_dir,
            out_ckpt,
            unsupervised,
            resume,
            out_log,
        } => {
            let (net_cfg, mut train_cfg) = config::load(&config)?;
            if unsupervised {
                train_cfg.supervised = false;
            }
            let data = load_dataset(&data_dir, train_cfg.supervised)?;
            let (mut model, resume_point) = match resume {
                Some(path) => {
                    let ckpt = load_checkpoint(&path)?;
                    if ckpt.config != net_cfg {
                        return Err(DregError::CheckpointMismatch(format!(
                            "checkpoint config {:?} does not match --config {:?}",
                            ckpt.config, net_cfg
                        ))
                        .into());
                    }
                    let opt = ckpt.opt.clone().ok_or_else(|| {
                        DregError::CheckpointMismatch(
                            "checkpoint carries no optimizer state to resume from".into(),
                        )
                    })?;
                    let model = Model::from_checkpoint(&ckpt)?;
                    (
                        model,
                        Some(ResumePoint {
                            step: ckpt.step,
                            opt,
                        }),
                    )
                }
                None => (Model::new(net_cfg, train_cfg.seed)?, None),
            };
            println!(
                "parameters: total {} (affine {}, deformable {})",
                model.parameter_count(),
                model.affine_parameter_count(),
                model.deformable_parameter_count()
            );
            let outcome = train(
                &mut model,
                &train_cfg,
                &data,
                resume_point,
                |_epoch, ckpt| save_checkpoint(&out_ckpt, ckpt),
            )?;
            save_checkpoint(&out_ckpt, &outcome.checkpoint)?;
            let log_path = out_log.unwrap_or_else(|| {
                let mut p = out_ckpt.as_os_str().to_owned();
                p.push(".log");
                PathBuf::from(p)
            });
            let mut text = String::new();
            for rec in &outcome.log {
                text.push_str(&rec.to_line());
                text.push('\n');
            }
            write_atomic(&log_path, text.as_bytes())?;
            println!(
                "trained {} steps; checkpoint {} log {}",
                outcome.checkpoint.step,
                out_ckpt.display(),
                log_path.display()
            );
            Ok(0)
        }

        Command::Register {
            ckpt,
            moving,
            fixed,
            out_moved,
            out_field,
            cascades,
        } => {
            if cascades == 0 {
                return Err(usage("--cascades must be >= 1"));
            }
            let model = Model::from_checkpoint(&load_checkpoint(&ckpt)?)?;
            let moving = read_volume(&moving)?;
            let fixed = read_volume(&fixed)?;
            let result = model.register(&moving, &fixed, cascades)?;
            write_volume(&out_moved, &result.moved)?;
            write_volume(&out_field, &result.phi_def.to_volume(moving.spacing))?;
            let rep = smoothness_report(result.phi_def.vectors())?;
            println!(
                "registered: det(A*+I)={:.6} jacobian_std={:.6} folding_fraction={:.6e}",
                result.affine.det(),
                rep.jacobian_std,
                rep.folding_fraction
            );
            Ok(0)
        }

        Command::Evaluate {
            moved,
            fixed,
            masks_moved,
            masks_fixed,
            field,
            out,
        } => {
            let moved = read_volume(&moved)?;
            let fixed = read_volume(&fixed)?;
            let mut report = MetricReport {
                ncc: modality_average(ncc, &moved, &fixed)?,
                mi: modality_average(
                    |a, b, m| mutual_information(a, b, m, MI_BINS),
                    &moved,
                    &fixed,
                )?,
                mse: modality_average(mse, &moved, &fixed)?,
                ..MetricReport::default()
            };
            match (masks_moved, masks_fixed) {
                (Some(mm), Some(mf)) => {
                    let mm = read_volume(&mm)?;
                    let mf = read_volume(&mf)?;
                    let (d, h, a) = region_metrics_prewarped(&mm, &mf)?;
                    report.dice = Some(d);
                    report.hd = Some(h);
                    report.assd = Some(a);
                }
                (None, None) => {}
                _ => {
                    return Err(usage(
                        "--masks-moved and --masks-fixed must be given together",
                    ))
                }
            }
            if let Some(fpath) = field {
                let fv = read_volume(&fpath)?;
                let disp = DisplacementField::from_volume(&fv)?;
                let rep = smoothness_report(disp.vectors())?;
                report.jacobian_std = Some(rep.jacobian_std);
                report.folding_fraction = Some(rep.folding_fraction);
            }
            let text = report.to_text();
            print!("{text}");
            if let Some(out) = out {
                write_atomic(&out, text.as_bytes())?;
            }
            Ok(0)
        }

        Command::Gradcheck {
            seed,
            inject_broken,
        } => {
            let rows = gradcheck::run(seed, inject_broken)?;
            let mut all_ok = true;
            println!("{:<24} {:>12} {:>9} verdict", "op", "max_rel_err", "tol");
            for row in &rows {
                let ok = row.passed();
                all_ok &= ok;
                println!(
                    "{:<24} {:>12.3e} {:>9.0e} {}",
                    row.name,
                    row.max_err,
                    row.tol,
                    if ok { "pass" } else { "FAIL" }
                );
            }
            if all_ok {
                println!("all {} checks passed", rows.len());
                Ok(0)
            } else {
                eprintln!("gradient check failed");
                Ok(EXIT_NUMERICAL)
            }
        }
    }
}

/// Load `pair_*.moving.dregvol` samples (sorted) with their fixed partners
/// and optional masks.
fn load_dataset(dir: &Path, require_masks: bool) -> anyhow::Result<Vec<TrainSample>> {
    let entries = std::fs::read_dir(dir).map_err(|e| DregError::io(dir, e))?;
    let mut stems: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(".moving.dregvol").map(str::to_string))
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(DregError::InvalidArgument(format!(
            "no *.moving.dregvol files in {}",
            dir.display()
        ))
        .into());
    }
    let mut out = Vec::with_capacity(stems.len());
    for stem in stems {
        let vol = |suffix: &str| -> dreg_core::Result<Volume> {
            read_volume(&dir.join(format!("{stem}.{suffix}.dregvol")))
        };
        let opt_vol = |suffix: &str| -> Option<Volume> {
            read_volume(&dir.join(format!("{stem}.{suffix}.dregvol"))).ok()
        };
        let moving = vol("moving")?;
        let fixed = vol("fixed")?;
        let masks_moving = opt_vol("masks_moving");
        let masks_fixed = opt_vol("masks_fixed");
        if require_masks && (masks_moving.is_none() || masks_fixed.is_none()) {
            return Err(DregError::InvalidArgument(format!(
                "supervised training needs masks for {stem}"
            ))
            .into());
        }
        out.push(TrainSample {
            moving,
            fixed,
            masks_moving,
            masks_fixed,
        });
    }
    Ok(out)
}
