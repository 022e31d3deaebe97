//! Flat `key=value` training/architecture config files. Blank lines and
//! `#` comments are skipped; unknown keys are rejected.

use std::path::Path;

use anyhow::Result;

use dreg_core::error::DregError;
use dreg_core::net::NetConfig;
use dreg_core::train::TrainConfig;

fn bad(path: &Path, line_no: usize, msg: &str) -> anyhow::Error {
    super::usage(format!("{}:{}: {msg}", path.display(), line_no + 1))
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',')
        .map(|p| p.trim().parse::<T>().ok())
        .collect::<Option<Vec<T>>>()
}

/// Read a config file into the architecture and schedule structs.
pub fn load(path: &Path) -> Result<(NetConfig, TrainConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| DregError::io(path, e))?;
    let mut net = NetConfig {
        input_channels: 1,
        ..NetConfig::default()
    };
    let mut train = TrainConfig::default();
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(path, line_no, "expected key=value"))?;
        let (key, value) = (key.trim(), value.trim());
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| bad(path, line_no, &format!("bad number {v:?}")))
        };
        match key {
            "lr0" => train.lr0 = num(value)?,
            "epochs" => train.epochs = num(value)? as u32,
            "steps_per_epoch" => train.steps_per_epoch = num(value)? as u32,
            "halve_after" => {
                train.halve_after_epochs =
                    parse_list::<u32>(value).ok_or_else(|| bad(path, line_no, "bad epoch list"))?;
            }
            "seed" => train.seed = num(value)? as u64,
            "alpha1" => train.weights.alpha1 = num(value)?,
            "alpha2" => train.weights.alpha2 = num(value)?,
            "alpha3" => train.weights.alpha3 = num(value)?,
            "alpha4" => train.weights.alpha4 = num(value)?,
            "supervised" => {
                train.supervised = value
                    .parse::<bool>()
                    .map_err(|_| bad(path, line_no, "expected true/false"))?;
            }
            "input_channels" => net.input_channels = num(value)? as usize,
            "widths" => {
                let v = parse_list::<usize>(value)
                    .filter(|v| v.len() == 4)
                    .ok_or_else(|| bad(path, line_no, "widths needs 4 integers"))?;
                net.encoder_widths = [v[0], v[1], v[2], v[3]];
            }
            "affine_widths" => {
                let v = parse_list::<usize>(value)
                    .filter(|v| v.len() == 5)
                    .ok_or_else(|| bad(path, line_no, "affine_widths needs 5 integers"))?;
                net.affine_widths = [v[0], v[1], v[2], v[3], v[4]];
            }
            "t_steps" => net.t_steps = num(value)? as u32,
            "leaky_slope" => net.leaky_slope = num(value)?,
            "nff_spatial_kernel" => net.nff_spatial_kernel = num(value)? as usize,
            other => return Err(bad(path, line_no, &format!("unknown key {other:?}"))),
        }
    }
    net.validate()?;
    train.validate()?;
    Ok((net, train))
}
