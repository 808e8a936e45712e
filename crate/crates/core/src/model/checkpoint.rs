//! Binary checkpoints.
//!
//! Layout: magic `MTCK`, version `u32`, then per tensor: name length `u32`,
//! UTF-8 name, rank `u32`, each dimension `u32`, then the values as
//! little-endian `f64`. All integers are little-endian. Tensors follow each
//! other until the end of the file.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::MetaTransModel;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub(crate) const POS_TABLE: &str = "pos_emb.table";

fn put_u32<W: Write>(w: &mut W, v: usize, field: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(field, format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Writes the header and every `(name, tensor)` pair.
pub fn write_params<'a, S, W, I>(w: &mut W, tensors: I) -> Result<()>
where
    S: Scalar,
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor<S>)>,
{
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        put_u32(w, name.len(), "name length")?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len(), "rank")?;
        for &dim in t.shape() {
            put_u32(w, dim, "dims")?;
        }
        for &v in t.data() {
            w.write_all(&to_f64(v).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads exactly `buf.len()` bytes; a short read is a format error on `field`.
fn fill<R: Read>(r: &mut R, buf: &mut [u8], field: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::format(field, "truncated"),
        _ => Error::Io(e),
    })
}

fn get_u32<R: Read>(r: &mut R, field: &str) -> Result<usize> {
    let mut b = [0u8; 4];
    fill(r, &mut b, field)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Reads a whole checkpoint stream into named tensors, in file order.
pub fn read_params<S: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<S>)>> {
    let mut magic = [0u8; 4];
    fill(r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", format!("expected MTCK, found {magic:?}")));
    }
    let version = get_u32(r, "version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let mut out = Vec::new();
    loop {
        // a clean end of file is only legal between tensors
        let mut first = [0u8; 4];
        let got = r.read(&mut first)?;
        if got == 0 {
            break;
        }
        if got < 4 {
            fill(r, &mut first[got..], "name length")?;
        }
        let len = u32::from_le_bytes(first) as usize;
        let mut name = vec![0u8; len];
        fill(r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::format("name", "not UTF-8"))?;
        let rank = get_u32(r, "rank")?;
        if rank == 0 {
            return Err(Error::format("rank", format!("tensor `{name}` has rank 0")));
        }
        let shape = (0..rank).map(|_| get_u32(r, "dims")).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        fill(r, &mut bytes, "payload")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| lit::<S>(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format("dims", format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Saves the parameters and the positional table.
pub fn write_checkpoint<S: Scalar>(model: &MetaTransModel<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let entries = model
        .params
        .iter()
        .chain(std::iter::once((POS_TABLE, model.pos.table())));
    write_params(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<MetaTransModel<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let tensors = read_params::<S, _>(&mut r)?;
    let mut store = ParamStore::new();
    let mut table = None;
    for (name, t) in tensors {
        if name == POS_TABLE {
            table = Some(t);
        } else if store.find(&name).is_some() {
            return Err(Error::format("name", format!("duplicate tensor `{name}`")));
        } else {
            store.add(name, t);
        }
    }
    let table = table.ok_or_else(|| Error::format(POS_TABLE, "missing"))?;
    MetaTransModel::from_params(store, table)
}
