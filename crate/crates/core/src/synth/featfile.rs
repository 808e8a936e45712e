//! Per-frame feature files.
//!
//! Header (little-endian): magic `MTFV`, version `u32`, `N` `u32`, `T` `u32`,
//! `d` `u32`, `has_labels` `u8`, `domain` `u8`; 22 bytes in total. The payload
//! is `N·T·d` `f32` values ordered by sample, frame, feature, followed by `N`
//! `u32` labels when `has_labels` is 1.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::data::{Domain, VideoSet};
use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

pub const FEATURE_MAGIC: &[u8; 4] = b"MTFV";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 22;

fn u32_field(v: usize, field: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::format(field, format!("{v} exceeds u32")))
}

pub fn encode_feature_set<S: Scalar>(set: &VideoSet<S>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + set.data.len() * 4 + set.n * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend(FEATURE_VERSION.to_le_bytes());
    out.extend(u32_field(set.n, "N")?);
    out.extend(u32_field(set.t, "T")?);
    out.extend(u32_field(set.d, "d")?);
    out.push(u8::from(set.labels.is_some()));
    out.push(set.domain as u8);
    for &v in &set.data {
        out.extend((to_f64(v) as f32).to_le_bytes());
    }
    if let Some(labels) = &set.labels {
        for &l in labels {
            out.extend(u32_field(l, "labels")?);
        }
    }
    Ok(out)
}

fn take<R: Read>(r: &mut R, n: usize, field: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::format(field, "truncated"),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn take_u32<R: Read>(r: &mut R, field: &str) -> Result<usize> {
    let b = take(r, 4, field)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
}

pub fn decode_feature_set<S: Scalar, R: Read>(r: &mut R) -> Result<VideoSet<S>> {
    let magic = take(r, 4, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(Error::format("magic", format!("expected MTFV, found {magic:?}")));
    }
    let version = take_u32(r, "version")?;
    if version != FEATURE_VERSION as usize {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}, expected {FEATURE_VERSION}"),
        ));
    }
    let n = take_u32(r, "N")?;
    let t = take_u32(r, "T")?;
    let d = take_u32(r, "d")?;
    if t == 0 || d == 0 {
        return Err(Error::format(if t == 0 { "T" } else { "d" }, "must be positive"));
    }
    let has_labels = match take(r, 1, "has_labels")?[0] {
        0 => false,
        1 => true,
        v => return Err(Error::format("has_labels", format!("expected 0 or 1, found {v}"))),
    };
    let domain_byte = take(r, 1, "domain")?[0];
    let domain =
        Domain::from_u8(domain_byte).ok_or_else(|| Error::format("domain", format!("expected 0 or 1, found {domain_byte}")))?;
    let count = n
        .checked_mul(t)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::format("N", "payload size overflows"))?;
    let payload = take(r, count * 4, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| lit::<S>(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    let labels = if has_labels {
        let raw = take(r, n * 4, "labels")?;
        Some(
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
                .collect(),
        )
    } else {
        None
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("payload", "trailing bytes after the declared payload"));
    }
    VideoSet::new(t, d, data, labels, domain)
}

pub fn write_feature_file<S: Scalar>(set: &VideoSet<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_feature_set(set)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_feature_file<S: Scalar>(path: impl AsRef<Path>) -> Result<VideoSet<S>> {
    let mut r = BufReader::new(File::open(path)?);
    decode_feature_set(&mut r)
}
