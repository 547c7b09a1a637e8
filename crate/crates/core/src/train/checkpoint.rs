//! Binary checkpoints of parameters and optimizer state.
//!
//! All integers are little-endian. The layout is
//!
//! ```text
//! magic        4 bytes  "MDEQ"
//! version      u32      1
//! epoch        u32      epochs completed
//! fingerprint  u64      hash of the model configuration
//! opt_step     u64      optimizer steps taken
//! count        u32      number of entries
//! entries      count ×  { name_len u32, name (UTF-8), ndim u32, dims ndim×u32, data f32×prod(dims) }
//! ```
//!
//! Parameters are stored under their own names, optimizer state under
//! `opt/m/<name>` (momentum or first moment) and `opt/v/<name>` (Adam second
//! moment). Values are written as f32, so an f32 model round-trips bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use crate::cell::MdeqParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::optim::Optimizer;

pub const MAGIC: &[u8; 4] = b"MDEQ";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub epoch: u32,
    pub fingerprint: u64,
    pub opt_step: u64,
}

fn write_entry<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend((v.to_f64_lossy() as f32).to_le_bytes());
    }
}

/// Serializes parameters and optimizer state.
pub fn encode<T: Scalar>(
    header: CheckpointHeader,
    params: &MdeqParams<T>,
    optimizer: Option<&Optimizer<T>>,
) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut count = 0u32;
    for p in params.iter() {
        write_entry(&mut entries, &p.name, &p.value);
        count += 1;
    }
    if let Some(opt) = optimizer {
        for p in opt.first.iter() {
            write_entry(&mut entries, &format!("opt/m/{}", p.name), &p.value);
            count += 1;
        }
        for p in opt.second.iter().flat_map(|s| s.iter()) {
            write_entry(&mut entries, &format!("opt/v/{}", p.name), &p.value);
            count += 1;
        }
    }
    let mut out = Vec::with_capacity(32 + entries.len());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(header.epoch.to_le_bytes());
    out.extend(header.fingerprint.to_le_bytes());
    out.extend(header.opt_step.to_le_bytes());
    out.extend(count.to_le_bytes());
    out.extend(entries);
    out
}

pub fn save<T: Scalar>(
    path: &Path,
    header: CheckpointHeader,
    params: &MdeqParams<T>,
    optimizer: Option<&Optimizer<T>>,
) -> Result<()> {
    let bytes = encode(header, params, optimizer);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: format!("offset {}: {}", self.at, message.into()),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.fail("truncated"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub entries: Vec<(String, Tensor<f32>)>,
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.fail("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let header = CheckpointHeader {
        epoch: r.u32()?,
        fingerprint: r.u64()?,
        opt_step: r.u64()?,
    };
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = match std::str::from_utf8(r.take(len)?) {
            Ok(s) => s.to_string(),
            Err(_) => return Err(r.fail("entry name is not UTF-8")),
        };
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let Some(bytes_needed) = n.checked_mul(4) else {
            return Err(r.fail("entry too large"));
        };
        let raw = r.take(bytes_needed)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push((name, Tensor::new(&dims, data)?));
    }
    if r.at != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(Checkpoint { header, entries })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes, path)
}

impl Checkpoint {
    fn find(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn fill<T: Scalar>(&self, target: &mut MdeqParams<T>, prefix: &str) -> Result<()> {
        for p in target.iter_mut() {
            let key = format!("{prefix}{}", p.name);
            let t = self
                .find(&key)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {key}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("checkpoint", p.value.shape(), t.shape()));
            }
            p.value = t.cast();
        }
        Ok(())
    }

    /// Overwrites `params` with the stored values. Every parameter must be present.
    pub fn restore_params<T: Scalar>(&self, params: &mut MdeqParams<T>) -> Result<()> {
        self.fill(params, "")
    }

    /// Overwrites the optimizer state, if the checkpoint carries one.
    pub fn restore_optimizer<T: Scalar>(&self, opt: &mut Optimizer<T>) -> Result<bool> {
        if !self.entries.iter().any(|(n, _)| n.starts_with("opt/m/")) {
            return Ok(false);
        }
        self.fill(&mut opt.first, "opt/m/")?;
        if let Some(second) = &mut opt.second {
            self.fill(second, "opt/v/")?;
        }
        opt.step = self.header.opt_step;
        Ok(true)
    }

    /// Fails unless the checkpoint was written for a model with `fingerprint`.
    pub fn check_fingerprint(&self, fingerprint: u64) -> Result<()> {
        if self.header.fingerprint != fingerprint {
            return Err(Error::Config(format!(
                "checkpoint fingerprint {:016x} does not match model {:016x}",
                self.header.fingerprint, fingerprint
            )));
        }
        Ok(())
    }
}
