//! Volume and checkpoint containers, min-max normalization and a raw-float
//! import shim.
//!
//! Containers are bespoke and minimal. All integers are little-endian.
//!
//! `DREGVOL1` volume container:
//! magic (8 bytes) | u32 version | u32 C | u32 D | u32 H | u32 W |
//! 3 x f64 spacing | C*D*H*W x f32 payload.
//!
//! `DREGCKP1` checkpoint container:
//! magic | u32 version | config echo | u64 step | u8 has_opt | u64 adam_t |
//! u32 n_entries | manifest of (name, shape, offset, length) entries |
//! f64 payload blobs. Optimizer moments are ordinary manifest entries named
//! `adam.m.<param>` / `adam.v.<param>`.

use std::fs;
use std::path::Path;

use crate::error::{DregError, Result};
use crate::net::NetConfig;
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 8] = b"DREGVOL1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DREGCKP1";
pub const VOLUME_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

/// C-channel 3D scalar grid with voxel spacing. Data is row-major
/// channel-major `[C, D, H, W]` 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub channels: usize,
    /// Spatial extents (D, H, W).
    pub shape: (usize, usize, usize),
    /// Voxel spacing in mm per voxel (x, y, z).
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(
        channels: usize,
        shape: (usize, usize, usize),
        spacing: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Volume> {
        let n = channels * shape.0 * shape.1 * shape.2;
        if data.len() != n {
            return Err(DregError::InvalidArgument(format!(
                "volume data length {} does not match {channels} x {shape:?}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(DregError::InvalidArgument(format!(
                "volume spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Volume {
            channels,
            shape,
            spacing,
            data,
        })
    }

    pub fn zeros(channels: usize, shape: (usize, usize, usize)) -> Volume {
        Volume {
            channels,
            shape,
            spacing: [1.0; 3],
            data: vec![0.0; channels * shape.0 * shape.1 * shape.2],
        }
    }

    pub fn voxels(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Widen to a constant (non-tracked) f64 tensor `[C,D,H,W]`.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        Tensor::constant(
            data,
            &[self.channels, self.shape.0, self.shape.1, self.shape.2],
        )
        .expect("volume invariant")
    }

    /// Narrow a rank-4 tensor to an f32 volume.
    pub fn from_tensor(t: &Tensor, spacing: [f64; 3]) -> Result<Volume> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(DregError::ShapeMismatch {
                context: "Volume::from_tensor",
                lhs: s.to_vec(),
                rhs: vec![0, 0, 0, 0],
            });
        }
        Volume::new(
            s[0],
            (s[1], s[2], s[3]),
            spacing,
            t.data().iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Per-channel min-max normalization to [0,1]; constant channels map to 0.
pub fn normalize_minmax(v: &Volume) -> Volume {
    let n = v.voxels();
    let mut out = v.clone();
    for c in 0..v.channels {
        let ch = &mut out.data[c * n..(c + 1) * n];
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &x in ch.iter() {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        if hi > lo {
            let inv = 1.0 / (hi - lo);
            for x in ch.iter_mut() {
                *x = (*x - lo) * inv;
            }
        } else {
            ch.fill(0.0);
        }
    }
    out
}

// ---- little-endian plumbing ----

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &Path) -> Self {
        Reader {
            buf,
            pos: 0,
            path: path.display().to_string(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DregError::Truncated {
                path: self.path.clone(),
                needed: (self.pos + n) as u64,
                available: self.buf.len() as u64,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Write a file atomically: temp sibling, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| DregError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DregError::io(path, e))?;
    Ok(())
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(VOLUME_MAGIC);
    w.u32(VOLUME_VERSION);
    w.u32(v.channels as u32);
    w.u32(v.shape.0 as u32);
    w.u32(v.shape.1 as u32);
    w.u32(v.shape.2 as u32);
    for s in v.spacing {
        w.f64(s);
    }
    for &x in &v.data {
        w.f32(x);
    }
    write_atomic(path, &w.buf)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| DregError::io(path, e))?;
    let mut r = Reader::new(&bytes, path);
    let magic = r.take(8)?;
    if magic != VOLUME_MAGIC {
        return Err(DregError::BadMagic {
            path: r.path,
            expected: String::from_utf8_lossy(VOLUME_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32()?;
    if version != VOLUME_VERSION {
        return Err(DregError::VersionMismatch {
            path: r.path,
            expected: VOLUME_VERSION,
            found: version,
        });
    }
    let channels = r.u32()? as usize;
    let d = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w_ = r.u32()? as usize;
    let spacing = [r.f64()?, r.f64()?, r.f64()?];
    let n = channels
        .checked_mul(d)
        .and_then(|x| x.checked_mul(h))
        .and_then(|x| x.checked_mul(w_))
        .ok_or_else(|| DregError::InvalidArgument("volume header overflow".into()))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f32()?);
    }
    Volume::new(channels, (d, h, w_), spacing, data)
}

/// Import shim for raw little-endian f32 volumes with a side-car text header
/// of `key value` lines: `channels`, `depth`, `height`, `width` and optional
/// `spacing_x`/`spacing_y`/`spacing_z` (default 1).
pub fn import_raw(raw_path: &Path, header_path: &Path) -> Result<Volume> {
    let text = fs::read_to_string(header_path).map_err(|e| DregError::io(header_path, e))?;
    let mut channels = None;
    let mut dims = [None; 3];
    let mut spacing = [1.0f64; 3];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (key, value) = (it.next().unwrap_or(""), it.next().unwrap_or(""));
        let parse = |v: &str| -> Result<f64> {
            v.parse::<f64>().map_err(|_| {
                DregError::InvalidArgument(format!(
                    "bad header line {} in {}: {line:?}",
                    lineno + 1,
                    header_path.display()
                ))
            })
        };
        match key {
            "channels" => channels = Some(parse(value)? as usize),
            "depth" => dims[0] = Some(parse(value)? as usize),
            "height" => dims[1] = Some(parse(value)? as usize),
            "width" => dims[2] = Some(parse(value)? as usize),
            "spacing_x" => spacing[0] = parse(value)?,
            "spacing_y" => spacing[1] = parse(value)?,
            "spacing_z" => spacing[2] = parse(value)?,
            _ => {
                return Err(DregError::InvalidArgument(format!(
                    "unknown header key {key:?} in {}",
                    header_path.display()
                )))
            }
        }
    }
    let channels =
        channels.ok_or_else(|| DregError::InvalidArgument("raw header missing channels".into()))?;
    let (d, h, w) = match dims {
        [Some(d), Some(h), Some(w)] => (d, h, w),
        _ => {
            return Err(DregError::InvalidArgument(
                "raw header missing depth/height/width".into(),
            ))
        }
    };
    let bytes = fs::read(raw_path).map_err(|e| DregError::io(raw_path, e))?;
    let n = channels * d * h * w;
    if bytes.len() != 4 * n {
        return Err(DregError::Truncated {
            path: raw_path.display().to_string(),
            needed: 4 * n as u64,
            available: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(channels, (d, h, w), spacing, data)
}

// ---- checkpoint ----

/// Optimizer moments stored alongside parameters, aligned with the parameter
/// order of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    /// Number of optimizer steps taken (bias-correction counter).
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Named, ordered collection of parameter tensors plus optimizer state and
/// training metadata. Round-trips bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub step: u64,
    /// (name, shape, data) in model registration order.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub opt: Option<AdamMoments>,
}

fn write_config(w: &mut Writer, cfg: &NetConfig) {
    w.u32(cfg.input_channels as u32);
    for e in cfg.encoder_widths {
        w.u32(e as u32);
    }
    w.u32(cfg.t_steps);
    w.f64(cfg.leaky_slope);
    w.u32(cfg.nff_spatial_kernel as u32);
    for e in cfg.affine_widths {
        w.u32(e as u32);
    }
    w.u8(u8::from(cfg.dfi_identity_gate));
}

fn read_config(r: &mut Reader) -> Result<NetConfig> {
    let input_channels = r.u32()? as usize;
    let mut encoder_widths = [0usize; 4];
    for e in encoder_widths.iter_mut() {
        *e = r.u32()? as usize;
    }
    let t_steps = r.u32()?;
    let leaky_slope = r.f64()?;
    let nff_spatial_kernel = r.u32()? as usize;
    let mut affine_widths = [0usize; 5];
    for e in affine_widths.iter_mut() {
        *e = r.u32()? as usize;
    }
    let dfi_identity_gate = r.u8()? != 0;
    Ok(NetConfig {
        input_channels,
        encoder_widths,
        t_steps,
        leaky_slope,
        nff_spatial_kernel,
        affine_widths,
        dfi_identity_gate,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for (name, shape, data) in &ckpt.params {
        entries.push((name.clone(), shape.clone(), data));
    }
    if let Some(opt) = &ckpt.opt {
        for ((name, shape, _), m) in ckpt.params.iter().zip(&opt.m) {
            entries.push((format!("adam.m.{name}"), shape.clone(), m));
        }
        for ((name, shape, _), v) in ckpt.params.iter().zip(&opt.v) {
            entries.push((format!("adam.v.{name}"), shape.clone(), v));
        }
    }
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    write_config(&mut w, &ckpt.config);
    w.u64(ckpt.step);
    w.u8(u8::from(ckpt.opt.is_some()));
    w.u64(ckpt.opt.as_ref().map(|o| o.t).unwrap_or(0));
    w.u32(entries.len() as u32);
    let mut offset = 0u64;
    for (name, shape, data) in &entries {
        w.u32(name.len() as u32);
        w.bytes(name.as_bytes());
        w.u32(shape.len() as u32);
        for &e in shape {
            w.u64(e as u64);
        }
        let len = 8 * data.len() as u64;
        w.u64(offset);
        w.u64(len);
        offset += len;
    }
    for (_, _, data) in &entries {
        for &v in data.iter() {
            w.f64(v);
        }
    }
    write_atomic(path, &w.buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| DregError::io(path, e))?;
    let mut r = Reader::new(&bytes, path);
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(DregError::BadMagic {
            path: r.path,
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DregError::VersionMismatch {
            path: r.path,
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let config = read_config(&mut r)?;
    let step = r.u64()?;
    let has_opt = r.u8()? != 0;
    let adam_t = r.u64()?;
    let n_entries = r.u32()? as usize;
    let mut manifest: Vec<(String, Vec<usize>, u64, u64)> = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()?;
        let len = r.u64()?;
        manifest.push((name, shape, offset, len));
    }
    let payload_base = r.pos;
    let mut params = Vec::new();
    let mut m_blobs: Vec<(String, Vec<f64>)> = Vec::new();
    let mut v_blobs: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, shape, offset, len) in manifest {
        let start = payload_base + offset as usize;
        let end = start + len as usize;
        if end > bytes.len() {
            return Err(DregError::Truncated {
                path: path.display().to_string(),
                needed: end as u64,
                available: bytes.len() as u64,
            });
        }
        let expect = 8 * shape.iter().product::<usize>();
        if len as usize != expect {
            return Err(DregError::CheckpointMismatch(format!(
                "entry {name:?} length {len} does not match shape {shape:?}"
            )));
        }
        let data: Vec<f64> = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(p) = name.strip_prefix("adam.m.") {
            m_blobs.push((p.to_string(), data));
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            v_blobs.push((p.to_string(), data));
        } else {
            params.push((name, shape, data));
        }
    }
    let opt = if has_opt {
        if m_blobs.len() != params.len() || v_blobs.len() != params.len() {
            return Err(DregError::CheckpointMismatch(
                "optimizer moment count does not match parameter count".into(),
            ));
        }
        for (i, (name, _, _)) in params.iter().enumerate() {
            if &m_blobs[i].0 != name || &v_blobs[i].0 != name {
                return Err(DregError::CheckpointMismatch(format!(
                    "optimizer moments out of order near {name:?}"
                )));
            }
        }
        Some(AdamMoments {
            t: adam_t,
            m: m_blobs.into_iter().map(|(_, d)| d).collect(),
            v: v_blobs.into_iter().map(|(_, d)| d).collect(),
        })
    } else {
        None
    };
    Ok(Checkpoint {
        config,
        step,
        params,
        opt,
    })
}
