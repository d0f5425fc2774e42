//! Bag files.
//!
//! ```text
//! "BOSF" | version u32 | dim u32 | bag_count u32
//! per bag: label i32 (−1 = unlabeled) | n u32 | n·dim f32
//! ```
//!
//! All integers and floats are little-endian. Descriptors are written as
//! `f32` and widened to `f64` when read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;

use super::{expect_eof, read_i32, read_u32, to_u32, truncated};
use crate::descriptors::{DescriptorBag, EmbeddingTag};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BOSF";
pub const VERSION: u32 = 1;

pub fn write_bags<W: Write>(w: &mut W, bags: &[DescriptorBag]) -> Result<()> {
    let dim = bags.first().map_or(0, |b| b.dim());
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&to_u32(dim, "descriptor dimension")?.to_le_bytes())?;
    w.write_all(&to_u32(bags.len(), "bag count")?.to_le_bytes())?;
    for b in bags {
        if b.dim() != dim {
            return Err(Error::dim(dim, b.dim(), "bag file"));
        }
        let label = match b.label {
            None => -1i32,
            Some(l) => i32::try_from(l)
                .map_err(|_| Error::Format(format!("label {l} does not fit in i32")))?,
        };
        w.write_all(&label.to_le_bytes())?;
        w.write_all(&to_u32(b.len(), "bag size")?.to_le_bytes())?;
        for d in &b.descriptors {
            for v in d.iter() {
                if !v.is_finite() {
                    return Err(Error::InvalidDescriptor(
                        "non-finite descriptor value".into(),
                    ));
                }
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads a bag file, tagging every bag with `tag` (the format does not record
/// which embedding produced the descriptors).
pub fn read_bags<R: Read>(r: &mut R, tag: EmbeddingTag) -> Result<Vec<DescriptorBag>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a bag file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported bag file version {version}"
        )));
    }
    let dim = read_u32(r)? as usize;
    let count = read_u32(r)? as usize;
    if dim == 0 && count > 0 {
        return Err(Error::Format("zero descriptor dimension".into()));
    }
    let mut bags = Vec::with_capacity(count.min(1 << 20));
    let mut buf = vec![0u8; 4 * dim];
    for i in 0..count {
        let label = read_i32(r)?;
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(Error::Format(format!("bag {i} has invalid label {l}"))),
        };
        let n = read_u32(r)? as usize;
        if n == 0 {
            return Err(Error::Format(format!("bag {i} is empty")));
        }
        let mut descriptors = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(truncated)?;
            descriptors.push(DVector::from_iterator(
                dim,
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
            ));
        }
        bags.push(DescriptorBag::new(descriptors, tag, label)?);
    }
    expect_eof(r)?;
    Ok(bags)
}

pub fn save_bags(path: impl AsRef<Path>, bags: &[DescriptorBag]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_bags(&mut w, bags)?;
    w.flush()?;
    Ok(())
}

pub fn load_bags(path: impl AsRef<Path>, tag: EmbeddingTag) -> Result<Vec<DescriptorBag>> {
    let mut r = BufReader::new(File::open(path)?);
    read_bags(&mut r, tag)
}
