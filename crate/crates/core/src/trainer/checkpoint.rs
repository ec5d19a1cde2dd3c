//! Versioned single-file checkpoints.
//!
//! Layout: 8-byte magic, format version (u32 LE), header length (u64 LE), a
//! JSON header, then the little-endian payload of every named array. The
//! header records the payload length and SHA-256 digest, so truncated or
//! corrupted files are rejected before any state is built.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stylefat_autograd::Scalar;

use crate::error::{ensure, Error, Result};
use crate::params::ParamStore;

use super::{TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"STYFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    iteration: u64,
    config: TrainConfig,
    arrays: Vec<ArrayEntry>,
    payload_len: u64,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_array<T: Scalar>(
    arrays: &mut Vec<ArrayEntry>,
    payload: &mut Vec<u8>,
    name: String,
    shape: &[usize],
    values: &[T],
) {
    let bytes = T::to_le_bytes_vec(values);
    arrays.push(ArrayEntry {
        name,
        shape: shape.to_vec(),
        offset: payload.len() as u64,
        len: bytes.len() as u64,
    });
    payload.extend_from_slice(&bytes);
}

fn push_store<T: Scalar>(arrays: &mut Vec<ArrayEntry>, payload: &mut Vec<u8>, prefix: &str, store: &ParamStore<T>) {
    for (name, t) in store.iter() {
        push_array(arrays, payload, format!("{prefix}/{name}"), t.shape(), t.data());
    }
}

fn push_square_avg<T: Scalar>(
    arrays: &mut Vec<ArrayEntry>,
    payload: &mut Vec<u8>,
    prefix: &str,
    store: &ParamStore<T>,
    avg: &[Vec<T>],
) {
    for ((name, t), v) in store.iter().zip(avg) {
        push_array(arrays, payload, format!("{prefix}/{name}"), t.shape(), v);
    }
}

/// Writes `state` to `path` atomically (temporary file, then rename).
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    push_store(&mut arrays, &mut payload, "gen", state.generator.params());
    push_store(&mut arrays, &mut payload, "ema", state.ema.params());
    push_store(&mut arrays, &mut payload, "disc", state.discriminator.params());
    push_square_avg(&mut arrays, &mut payload, "opt_g", state.generator.params(), state.opt_g.square_avg());
    push_square_avg(&mut arrays, &mut payload, "opt_d", state.discriminator.params(), state.opt_d.square_avg());
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        iteration: state.iteration,
        config: state.config.clone(),
        arrays,
        payload_len: payload.len() as u64,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&payload)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

fn fill_store<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    lookup: &dyn Fn(&str, &[usize]) -> Result<Vec<T>>,
) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let values = lookup(&format!("{prefix}/{}", store.name(id)), &shape)?;
        store.set(id, values);
    }
    Ok(())
}

fn fill_square_avg<T: Scalar>(
    store: &ParamStore<T>,
    avg: &mut [Vec<T>],
    prefix: &str,
    lookup: &dyn Fn(&str, &[usize]) -> Result<Vec<T>>,
) -> Result<()> {
    for ((name, t), v) in store.iter().zip(avg.iter_mut()) {
        *v = lookup(&format!("{prefix}/{name}"), t.shape())?;
    }
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`] with the same element
/// type. Any inconsistency is reported before state is returned.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut at = 0;
    ensure!(
        take(&bytes, &mut at, MAGIC.len())? == MAGIC,
        Checkpoint,
        "{} is not a checkpoint file",
        path.display()
    );
    let version = u32::from_le_bytes(take(&bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    ensure!(
        version == FORMAT_VERSION,
        Checkpoint,
        "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
    );
    let header_len = u64::from_le_bytes(take(&bytes, &mut at, 8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: Header = serde_json::from_slice(take(&bytes, &mut at, header_len)?)
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    ensure!(
        header.format_version == FORMAT_VERSION,
        Checkpoint,
        "header format version {} does not match {FORMAT_VERSION}",
        header.format_version
    );
    ensure!(
        header.dtype == T::DTYPE,
        Checkpoint,
        "checkpoint holds {} values, expected {}",
        header.dtype,
        T::DTYPE
    );
    let payload = &bytes[at..];
    ensure!(
        payload.len() as u64 == header.payload_len,
        Checkpoint,
        "payload is {} bytes, header says {} (file truncated?)",
        payload.len(),
        header.payload_len
    );
    ensure!(
        hex(&Sha256::digest(payload)) == header.payload_sha256,
        Checkpoint,
        "payload checksum mismatch"
    );

    let lookup = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
        let entry = header
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        ensure!(
            entry.shape == shape,
            Checkpoint,
            "array {name} has shape {:?}, model expects {:?}",
            entry.shape,
            shape
        );
        let (start, len) = (entry.offset as usize, entry.len as usize);
        let raw = payload
            .get(start..start + len)
            .ok_or_else(|| Error::Checkpoint(format!("array {name} lies outside the payload")))?;
        let values = T::from_le_bytes_slice(raw);
        ensure!(
            values.len() == shape.iter().product::<usize>(),
            Checkpoint,
            "array {name} has {} values for shape {shape:?}",
            values.len()
        );
        Ok(values)
    };

    let mut state = TrainState::<T>::new(&header.config)?;
    // live, EMA and optimizer arrays per generator parameter; live and
    // optimizer arrays per discriminator parameter
    let expected = 3 * state.generator.params().len() + 2 * state.discriminator.params().len();
    ensure!(
        header.arrays.len() == expected,
        Checkpoint,
        "checkpoint has {} arrays, model expects {expected}",
        header.arrays.len()
    );
    fill_store(state.generator.params_mut(), "gen", &lookup)?;
    fill_store(state.ema.params_mut(), "ema", &lookup)?;
    fill_store(state.discriminator.params_mut(), "disc", &lookup)?;
    fill_square_avg(state.generator.params(), &mut state.opt_g.square_avg, "opt_g", &lookup)?;
    fill_square_avg(state.discriminator.params(), &mut state.opt_d.square_avg, "opt_d", &lookup)?;
    state.iteration = header.iteration;
    Ok(state)
}
