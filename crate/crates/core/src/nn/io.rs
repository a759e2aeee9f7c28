//! Checkpoint blob format: named parameter and state arrays, stored as
//! little-endian f64 regardless of the in-memory scalar type.

use super::HasParams;
use crate::error::{Error, Result};
use crate::num::Scalar;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MMILCKP1";

const KIND_PARAM: u8 = 0;
const KIND_STATE: u8 = 1;

fn collect_entries<S: Scalar, M: HasParams<S>>(
    model: &mut M,
) -> Vec<(String, u8, Vec<usize>, Vec<f64>)> {
    let mut entries = Vec::new();
    model.visit_params(&mut |name, v, _| {
        entries.push((
            name.to_string(),
            KIND_PARAM,
            v.shape().to_vec(),
            v.iter().map(|x| x.as_f64()).collect(),
        ));
    });
    model.visit_state(&mut |name, v| {
        entries.push((
            name.to_string(),
            KIND_STATE,
            v.shape().to_vec(),
            v.iter().cloned().collect(),
        ));
    });
    entries
}

/// Write every parameter and state array of the model to `path`.
pub fn save_model<S: Scalar, M: HasParams<S>>(model: &mut M, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let entries = collect_entries(model);
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let dtype = S::DTYPE.as_bytes();
    w.write_u8(dtype.len() as u8)?;
    w.write_all(dtype)?;
    w.write_u32::<LittleEndian>(entries.len() as u32)?;
    for (name, kind, shape, data) in entries {
        let nb = name.as_bytes();
        w.write_u16::<LittleEndian>(nb.len() as u16)?;
        w.write_all(nb)?;
        w.write_u8(kind)?;
        w.write_u8(shape.len() as u8)?;
        for d in &shape {
            w.write_u64::<LittleEndian>(*d as u64)?;
        }
        for v in data {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint written by [`save_model`] into a model of identical
/// architecture. Every stored entry must match a visited array by name and
/// shape; anything missing or extra is an error.
pub fn load_model<S: Scalar, M: HasParams<S>>(model: &mut M, path: &Path) -> Result<()> {
    let mut r = BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::missing(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::validation(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let dl = r.read_u8()? as usize;
    let mut dtype = vec![0u8; dl];
    r.read_exact(&mut dtype)?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut entries: BTreeMap<String, (u8, Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let nl = r.read_u16::<LittleEndian>()? as usize;
        let mut nb = vec![0u8; nl];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|_| Error::validation("checkpoint entry name not utf-8"))?;
        let kind = r.read_u8()?;
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        entries.insert(name, (kind, shape, data));
    }

    let mut err: Option<Error> = None;
    model.visit_params(&mut |name, mut v, _| {
        if err.is_some() {
            return;
        }
        match entries.remove(name) {
            Some((KIND_PARAM, shape, data)) if shape == v.shape() => {
                for (dst, src) in v.iter_mut().zip(data) {
                    *dst = S::of_f64(src);
                }
            }
            Some((_, shape, _)) => {
                err = Some(Error::validation(format!(
                    "checkpoint entry `{name}`: shape {shape:?} does not match model {:?}",
                    v.shape()
                )));
            }
            None => err = Some(Error::missing(format!("checkpoint entry `{name}`"))),
        }
    });
    model.visit_state(&mut |name, mut v| {
        if err.is_some() {
            return;
        }
        match entries.remove(name) {
            Some((KIND_STATE, shape, data)) if shape == v.shape() => {
                for (dst, src) in v.iter_mut().zip(data) {
                    *dst = src;
                }
            }
            Some((_, shape, _)) => {
                err = Some(Error::validation(format!(
                    "checkpoint entry `{name}`: shape {shape:?} does not match model {:?}",
                    v.shape()
                )));
            }
            None => err = Some(Error::missing(format!("checkpoint entry `{name}`"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if !entries.is_empty() {
        return Err(Error::validation(format!(
            "checkpoint has {} entr(ies) the model does not expect: {}",
            entries.len(),
            entries.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(())
}

/// Content hash of the model parameters, used for provenance checks.
pub fn model_hash<S: Scalar, M: HasParams<S>>(model: &mut M) -> String {
    let mut h = Sha256::new();
    for (name, kind, shape, data) in collect_entries(model) {
        h.update(name.as_bytes());
        h.update([kind]);
        for d in shape {
            h.update((d as u64).to_le_bytes());
        }
        for v in data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..16])
}
