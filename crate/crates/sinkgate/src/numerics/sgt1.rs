//! "SGT1" tensor file format.
//!
//! ASCII header line `SGT1 <ndim> <d0> <d1> ... f32|f64\n` followed by a
//! little-endian payload in row-major order. Used by every dump/load path
//! in the repo (checkpoints, traces, dataset sidecars).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Payload precision of an SGT1 file. Computation stays f64 either way;
/// f32 only narrows the on-disk payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn token(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

pub fn write_tensor(path: &Path, t: &Tensor, prec: Precision) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t, prec)
}

pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor, prec: Precision) -> Result<()> {
    let mut header = format!("SGT1 {}", t.shape().len());
    for d in t.shape() {
        header.push_str(&format!(" {d}"));
    }
    header.push(' ');
    header.push_str(prec.token());
    header.push('\n');
    w.write_all(header.as_bytes())?;
    match prec {
        Precision::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Precision::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor_from(&mut r)
}

pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)
            .map_err(|_| Error::BadTensorFile("truncated header".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        if header.len() > 4096 {
            return Err(Error::BadTensorFile("header too long".into()));
        }
        header.push(byte[0]);
    }
    let header = String::from_utf8(header)
        .map_err(|_| Error::BadTensorFile("header not utf-8".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("SGT1") {
        return Err(Error::BadTensorFile("missing SGT1 magic".into()));
    }
    let ndim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::BadTensorFile("bad ndim".into()))?;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::BadTensorFile("bad dimension".into()))?;
        shape.push(d);
    }
    let prec: Precision = parts
        .next()
        .ok_or_else(|| Error::BadTensorFile("missing dtype".into()))?
        .parse()?;
    if parts.next().is_some() {
        return Err(Error::BadTensorFile("trailing header tokens".into()));
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match prec {
        Precision::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::BadTensorFile("truncated payload".into()))?;
                data.push(f64::from_le_bytes(buf));
            }
        }
        Precision::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::BadTensorFile("truncated payload".into()))?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
    }
    Tensor::new(shape, data)
}
