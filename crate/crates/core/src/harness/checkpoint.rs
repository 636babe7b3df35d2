//! Model checkpoints.
//!
//! Little-endian layout: magic `STFM`, format version (u32), config blob
//! (u64 length + canonical config text), tensor count (u64), then per tensor
//! the name (u32 length + UTF-8 bytes), rank (u32), dims (u64 each) and the
//! f64 values in row-major order. Tensors appear in parameter creation order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::model::SetModel;
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"STFM";
pub const CHECKPOINT_VERSION: u32 = 1;

// Upper bounds that keep a corrupt header from requesting absurd buffers.
const MAX_BLOB: u64 = 1 << 20;
const MAX_NAME: u32 = 1 << 12;

pub struct Checkpoint {
    pub config: RunConfig,
    pub model: SetModel,
}

pub fn write_checkpoint(w: &mut impl Write, config: &RunConfig, model: &SetModel) -> Result<()> {
    if config.train.model != *model.config() {
        return Err(Error::Contract("run config does not describe this model".into()));
    }
    let blob = config.to_text();
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(blob.len() as u64).to_le_bytes())?;
    w.write_all(blob.as_bytes())?;
    let store = model.params();
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for p in store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(p.value.rows() as u64).to_le_bytes())?;
        w.write_all(&(p.value.cols() as u64).to_le_bytes())?;
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Writes to a sibling temporary file and renames it into place, so an
/// existing checkpoint at `path` survives a failed save.
pub fn save_checkpoint(path: &Path, config: &RunConfig, model: &SetModel) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, config, model)?;
    let tmp = path.with_extension("stfm.tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, field: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Format(format!("file truncated while reading {field}")),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, field)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint> {
    let mut r = Reader { inner: r };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::Format("magic: not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("version: unsupported checkpoint version {version}")));
    }
    let blob_len = r.u64("config length")?;
    if blob_len > MAX_BLOB {
        return Err(Error::Format(format!("config length: {blob_len} bytes is implausible")));
    }
    let blob = String::from_utf8(r.bytes(blob_len as usize, "config")?)
        .map_err(|_| Error::Format("config: not UTF-8".into()))?;
    let config = RunConfig::parse(&blob).map_err(|e| Error::Format(format!("config: {e}")))?;
    // the initial values are overwritten below; only the layout matters
    let mut model = SetModel::new(config.train.model.clone(), &mut Rng::new(0))?;
    let count = r.u64("tensor count")?;
    if count != model.params().len() as u64 {
        return Err(Error::Format(format!(
            "tensor count: file has {count}, config implies {}",
            model.params().len()
        )));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let expected = model.params().get(id);
        let name_len = r.u32(&format!("tensor {i} name length"))?;
        if name_len > MAX_NAME {
            return Err(Error::Format(format!("tensor {i} name length: {name_len} is implausible")));
        }
        let name = String::from_utf8(r.bytes(name_len as usize, &format!("tensor {i} name"))?)
            .map_err(|_| Error::Format(format!("tensor {i} name: not UTF-8")))?;
        if name != expected.name {
            return Err(Error::Format(format!(
                "tensor {i} name: file has `{name}`, config implies `{}`",
                expected.name
            )));
        }
        let rank = r.u32(&format!("`{name}` rank"))?;
        if rank != 2 {
            return Err(Error::Format(format!("`{name}` rank: expected 2, found {rank}")));
        }
        let dims = (r.u64(&format!("`{name}` dims"))?, r.u64(&format!("`{name}` dims"))?);
        let want = (expected.value.rows() as u64, expected.value.cols() as u64);
        if dims != want {
            return Err(Error::Format(format!(
                "`{name}` dims: file has {}x{}, config implies {}x{}",
                dims.0, dims.1, want.0, want.1
            )));
        }
        let len = expected.value.len();
        let raw = r.bytes(len * 8, &format!("`{name}` values"))?;
        let dst = model.params_mut().get_mut(id).value.data_mut();
        for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(Checkpoint { config, model })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(io::BufReader::new(fs::File::open(path)?))
}
