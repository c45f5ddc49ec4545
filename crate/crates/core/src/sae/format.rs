//! `S3SA` parameter file: magic, version, `d_in`, `d_latent`, `k` as u32, then
//! `W_enc`, `b_enc`, `W_dec`, `b_dec` as row-major little-endian f32.

use std::fmt;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{SaeParams, SaeShape};
use crate::error::{Error, Result};

pub const SAE_MAGIC: &[u8; 4] = b"S3SA";
pub const SAE_FORMAT_VERSION: u32 = 1;

/// SHA-256 of the serialized parameter file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Fingerprint(pub [u8; 32]);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

pub fn write_params<W: Write>(mut w: W, params: &SaeParams) -> Result<()> {
    let shape = params.shape();
    w.write_all(SAE_MAGIC)?;
    w.write_u32::<LittleEndian>(SAE_FORMAT_VERSION)?;
    for dim in [shape.d_in, shape.d_latent, shape.k] {
        w.write_u32::<LittleEndian>(dim as u32)?;
    }
    for block in [
        params.w_enc(),
        params.b_enc(),
        params.w_dec(),
        params.b_dec(),
    ] {
        for &v in block {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<SaeParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != SAE_MAGIC {
        return Err(Error::format("not an SAE parameter file (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != SAE_FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported SAE format version {version}"
        )));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    }
    let shape = SaeShape {
        d_in: dims[0],
        d_latent: dims[1],
        k: dims[2],
    };
    shape
        .validate()
        .map_err(|e| Error::format(format!("invalid SAE header: {e}")))?;
    let matrix = shape.d_latent * shape.d_in;
    let mut read_block = |n: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut buf)
            .map_err(truncated)?;
        Ok(buf.into_iter().map(f64::from).collect())
    };
    let w_enc = read_block(matrix)?;
    let b_enc = read_block(shape.d_latent)?;
    let w_dec = read_block(matrix)?;
    let b_dec = read_block(shape.d_in)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("trailing bytes after SAE parameters"));
    }
    SaeParams::from_parts(shape, w_enc, b_enc, w_dec, b_dec)
        .map_err(|e| Error::format(format!("invalid SAE parameters: {e}")))
}

pub(super) fn fingerprint(params: &SaeParams) -> Fingerprint {
    let mut bytes = Vec::new();
    write_params(&mut bytes, params).expect("writing to a Vec cannot fail");
    Fingerprint(Sha256::digest(&bytes).into())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("SAE parameter file is truncated")
    } else {
        Error::Io(e)
    }
}
