//! Encoding files.
//!
//! ```text
//! "BOSE" | version u32 | model u32 | variant u32 | K u32 | D u32 | R u32
//! | power_flag u32 | power f64 | l2 u32 | count u32 | length u32
//! per encoding: label i32 (−1 = unlabeled) | length f64
//! ```
//!
//! Everything little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;

use super::{expect_eof, read_f64, read_i32, read_u32, to_u32, truncated};
use crate::encoders::{EncodingLayout, FisherEncoding, ModelKind, NormFlags, Variant};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BOSE";
pub const VERSION: u32 = 1;

/// A set of encodings sharing one layout, with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingSet {
    pub layout: EncodingLayout,
    pub normalized: NormFlags,
    pub vectors: Vec<DVector<f64>>,
    pub labels: Vec<Option<usize>>,
}

impl EncodingSet {
    pub fn from_encodings(
        encodings: &[FisherEncoding],
        labels: Vec<Option<usize>>,
    ) -> Result<Self> {
        let first = encodings.first().ok_or(Error::Empty("encoding set"))?;
        if labels.len() != encodings.len() {
            return Err(Error::dim(encodings.len(), labels.len(), "encoding labels"));
        }
        for e in encodings {
            if e.layout != first.layout || e.normalized != first.normalized {
                return Err(Error::InvalidArgument(
                    "encodings in a set must share a layout".into(),
                ));
            }
        }
        Ok(Self {
            layout: first.layout,
            normalized: first.normalized,
            vectors: encodings.iter().map(|e| e.vector.clone()).collect(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.layout
            .variant
            .length(self.layout.k, self.layout.d, self.layout.r)
    }
}

const MODELS: [ModelKind; 3] = [ModelKind::Gmm, ModelKind::Dmm, ModelKind::Mfa];
const VARIANTS: [Variant; 7] = [
    Variant::GmmMu,
    Variant::GmmSigma,
    Variant::DmmAlpha,
    Variant::MfaMu,
    Variant::MfaLambda,
    Variant::MfaMuLambda,
    Variant::Generic,
];

fn code<T: PartialEq>(table: &[T], v: &T) -> u32 {
    table
        .iter()
        .position(|x| x == v)
        .expect("value listed in table") as u32
}

fn decode<T: Copy>(table: &[T], c: u32, what: &str) -> Result<T> {
    table
        .get(c as usize)
        .copied()
        .ok_or_else(|| Error::Format(format!("unknown {what} code {c}")))
}

pub fn write_encodings<W: Write>(w: &mut W, set: &EncodingSet) -> Result<()> {
    let len = set.dim();
    if set.labels.len() != set.vectors.len() {
        return Err(Error::dim(
            set.vectors.len(),
            set.labels.len(),
            "encoding labels",
        ));
    }
    let l = &set.layout;
    w.write_all(MAGIC)?;
    for v in [
        VERSION,
        code(&MODELS, &l.model),
        code(&VARIANTS, &l.variant),
        to_u32(l.k, "K")?,
        to_u32(l.d, "D")?,
        to_u32(l.r, "R")?,
        set.normalized.power.is_some() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&set.normalized.power.unwrap_or(0.0).to_le_bytes())?;
    w.write_all(&(set.normalized.l2 as u32).to_le_bytes())?;
    w.write_all(&to_u32(set.vectors.len(), "encoding count")?.to_le_bytes())?;
    w.write_all(&to_u32(len, "encoding length")?.to_le_bytes())?;
    for (v, label) in set.vectors.iter().zip(&set.labels) {
        if v.len() != len {
            return Err(Error::dim(len, v.len(), "encoding length"));
        }
        let label = label.map_or(Ok(-1), |l| {
            i32::try_from(l).map_err(|_| Error::Format("label overflow".into()))
        })?;
        w.write_all(&label.to_le_bytes())?;
        for x in v.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_encodings<R: Read>(r: &mut R) -> Result<EncodingSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an encoding file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported encoding file version {version}"
        )));
    }
    let model = decode(&MODELS, read_u32(r)?, "model")?;
    let variant = decode(&VARIANTS, read_u32(r)?, "variant")?;
    let (k, d, rr) = (
        read_u32(r)? as usize,
        read_u32(r)? as usize,
        read_u32(r)? as usize,
    );
    let has_power = read_u32(r)? != 0;
    let power = read_f64(r)?;
    let l2 = read_u32(r)? != 0;
    let count = read_u32(r)? as usize;
    let len = read_u32(r)? as usize;
    let layout = EncodingLayout {
        model,
        variant,
        k,
        d,
        r: rr,
    };
    if variant.length(k, d, rr) != len {
        return Err(Error::Format(format!(
            "declared length {len} does not match layout ({} expected)",
            variant.length(k, d, rr)
        )));
    }
    let mut vectors = Vec::with_capacity(count.min(1 << 16));
    let mut labels = Vec::with_capacity(count.min(1 << 16));
    let mut buf = vec![0u8; 8 * len];
    for _ in 0..count {
        let label = read_i32(r)?;
        labels.push(match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(Error::Format(format!("invalid label {l}"))),
        });
        r.read_exact(&mut buf).map_err(truncated)?;
        vectors.push(DVector::from_iterator(
            len,
            buf.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))),
        ));
    }
    expect_eof(r)?;
    Ok(EncodingSet {
        layout,
        normalized: NormFlags {
            power: has_power.then_some(power),
            l2,
        },
        vectors,
        labels,
    })
}

pub fn save_encodings(path: impl AsRef<Path>, set: &EncodingSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_encodings(&mut w, set)?;
    w.flush()?;
    Ok(())
}

pub fn load_encodings(path: impl AsRef<Path>) -> Result<EncodingSet> {
    read_encodings(&mut BufReader::new(File::open(path)?))
}
