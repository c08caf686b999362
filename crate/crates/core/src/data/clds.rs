//! `.clds` binary dataset files.
//!
//! Little-endian layout:
//!
//! | field      | type |
//! |------------|------|
//! | magic      | u32 = 0x434C4453 |
//! | version    | u16 = 1 |
//! | n_samples  | u32 |
//! | height     | u16 |
//! | width      | u16 |
//! | channels   | u16 |
//! | n_classes  | u16 |
//! | pixels     | n_samples·h·w·c × f32, row-major per sample |
//! | labels     | n_samples × u16 |

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const CLDS_MAGIC: u32 = 0x434C_4453;
pub const CLDS_VERSION: u16 = 1;
pub const CLDS_HEADER_LEN: usize = 18;

fn u16_field(field: &'static str, v: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format {
        field,
        msg: format!("{v} does not fit in u16"),
    })
}

pub fn encode_clds(ds: &Dataset) -> Result<Vec<u8>> {
    let n = u32::try_from(ds.len()).map_err(|_| Error::Format {
        field: "n_samples",
        msg: format!("{} does not fit in u32", ds.len()),
    })?;
    let mut out = Vec::with_capacity(CLDS_HEADER_LEN + ds.images.len() * 4 + ds.len() * 2);
    out.extend_from_slice(&CLDS_MAGIC.to_le_bytes());
    out.extend_from_slice(&CLDS_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&u16_field("height", ds.height)?.to_le_bytes());
    out.extend_from_slice(&u16_field("width", ds.width)?.to_le_bytes());
    out.extend_from_slice(&u16_field("channels", ds.channels)?.to_le_bytes());
    out.extend_from_slice(&u16_field("n_classes", ds.n_classes)?.to_le_bytes());
    for v in &ds.images {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&u16_field("labels", l)?.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_clds(bytes: &[u8]) -> Result<Dataset> {
    let truncated = |field: &'static str| Error::Format {
        field,
        msg: format!("file truncated ({} bytes)", bytes.len()),
    };
    if bytes.len() < CLDS_HEADER_LEN {
        return Err(truncated("header"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
    let magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != CLDS_MAGIC {
        return Err(Error::Format {
            field: "magic",
            msg: format!("expected {CLDS_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let version = u16_at(4) as u16;
    if version != CLDS_VERSION {
        return Err(Error::Format {
            field: "version",
            msg: format!("unsupported version {version}"),
        });
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let (h, w, c, k) = (u16_at(10), u16_at(12), u16_at(14), u16_at(16));
    let px = h * w * c;
    let pix_end = CLDS_HEADER_LEN + n * px * 4;
    let expected = pix_end + n * 2;
    if bytes.len() < pix_end {
        return Err(truncated("pixels"));
    }
    if bytes.len() < expected {
        return Err(truncated("labels"));
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            field: "labels",
            msg: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let images = bytes[CLDS_HEADER_LEN..pix_end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let labels = bytes[pix_end..]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    Dataset::new((h, w, c), k, images, labels).map_err(|e| Error::Format {
        field: "labels",
        msg: e.to_string(),
    })
}

pub fn write_clds(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_clds(ds)?;
    fs::write(path, bytes).map_err(|e| Error::storage(path, e))
}

pub fn read_clds(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_clds(&bytes)
}
