//! Binary checkpoint format.
//!
//! Little-endian: magic `AVZC`, `u32` version, the eight architecture dims as
//! `u32` in [`ArchitectureSpec`] declaration order, then for each layer in
//! [`ModelParams::layers`] order the row-major weight followed by the bias,
//! all as `f64`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{ArchitectureSpec, ModelError, ModelParams, Result};
use crate::tensor::{DenseMatrix, LayerParams};

pub const MAGIC: [u8; 4] = *b"AVZC";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for d in params.arch.as_array() {
        let d = u32::try_from(d)
            .map_err(|_| ModelError::ShapeInconsistent(format!("dim {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for layer in params.layers() {
        for v in layer.weight.data().iter().chain(&layer.bias) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    crate::io_util::atomic_write(path, |w| write_checkpoint(params, w))
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], section: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ModelError::Truncated { section },
        _ => ModelError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, section: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, section)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize, section: &'static str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    read_exact_or(r, &mut bytes, section)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = read_u32(&mut r, "architecture")? as usize;
    }
    let arch = ArchitectureSpec::from_array(dims);
    arch.validate()
        .map_err(|e| ModelError::ShapeInconsistent(e.to_string()))?;

    let mut layers = Vec::with_capacity(7);
    for (din, dout) in arch.layer_shapes() {
        let w = read_f64s(&mut r, din * dout, "layer weight")?;
        let b = read_f64s(&mut r, dout, "layer bias")?;
        let weight = DenseMatrix::from_vec(dout, din, w)
            .map_err(|e| ModelError::ShapeInconsistent(e.to_string()))?;
        layers.push(
            LayerParams::new(weight, b).map_err(|e| ModelError::ShapeInconsistent(e.to_string()))?,
        );
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ModelError::ShapeInconsistent(
            "trailing bytes after the last layer".into(),
        ));
    }
    ModelParams::from_layers(arch, layers)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_checkpoint(io::BufReader::new(fs::File::open(path)?))
}
