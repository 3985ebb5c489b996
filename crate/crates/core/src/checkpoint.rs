//! Checkpoint container: a little-endian binary file holding the resolved
//! config, the named parameter tree (trainables and buffers), Adam moment
//! tensors with per-parameter step counts, and the run counters. The format
//! is byte-stable: save -> load -> save reproduces the file bit for bit.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GLDMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

impl EntryKind {
    fn to_byte(self) -> u8 {
        match self {
            EntryKind::Param => 0,
            EntryKind::Buffer => 1,
            EntryKind::AdamM => 2,
            EntryKind::AdamV => 3,
        }
    }
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => EntryKind::Param,
            1 => EntryKind::Buffer,
            2 => EntryKind::AdamM,
            3 => EntryKind::AdamV,
            other => return Err(Error::Checkpoint(format!("bad entry kind {other}"))),
        })
    }
}

fn dtype_to_byte(dt: DType) -> Result<u8> {
    Ok(match dt {
        DType::F32 => 0,
        DType::F64 => 1,
        other => return Err(Error::Checkpoint(format!("unsupported checkpoint dtype {other:?}"))),
    })
}

fn dtype_from_byte(b: u8) -> Result<DType> {
    Ok(match b {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::Checkpoint(format!("bad dtype byte {other}"))),
    })
}

pub struct CheckpointData {
    pub config_text: String,
    pub config_hash: String,
    /// Number of completed epochs.
    pub epoch: u64,
    pub global_step: u64,
    pub seed: u64,
    pub tensors: Vec<(String, EntryKind, Tensor)>,
    /// Per-trainable Adam step counts, keyed by parameter name.
    pub adam_steps: Vec<(String, u64)>,
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len > 1 << 30 {
        return Err(Error::Checkpoint("unreasonable string length".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_u8(dtype_to_byte(t.dtype())?)?;
    let dims = t.dims();
    w.write_u8(dims.len() as u8)?;
    for &d in dims {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    match t.dtype() {
        DType::F32 => {
            let v = t.flatten_all()?.to_vec1::<f32>()?;
            w.write_u64::<LittleEndian>((v.len() * 4) as u64)?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        DType::F64 => {
            let v = t.flatten_all()?.to_vec1::<f64>()?;
            w.write_u64::<LittleEndian>((v.len() * 8) as u64)?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        _ => unreachable!(),
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R, device: &Device) -> Result<Tensor> {
    let dtype = dtype_from_byte(r.read_u8()?)?;
    let ndim = r.read_u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let byte_len = r.read_u64::<LittleEndian>()? as usize;
    let mut raw = vec![0u8; byte_len];
    r.read_exact(&mut raw)?;
    let t = match dtype {
        DType::F32 => {
            let vals: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::from_vec(vals, dims, device)?
        }
        DType::F64 => {
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            Tensor::from_vec(vals, dims, device)?
        }
        _ => unreachable!(),
    };
    Ok(t)
}

pub fn save_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    write_string(&mut w, &data.config_text)?;
    write_string(&mut w, &data.config_hash)?;
    w.write_u64::<LittleEndian>(data.epoch)?;
    w.write_u64::<LittleEndian>(data.global_step)?;
    w.write_u64::<LittleEndian>(data.seed)?;
    w.write_u64::<LittleEndian>(data.tensors.len() as u64)?;
    for (name, kind, tensor) in &data.tensors {
        write_string(&mut w, name)?;
        w.write_u8(kind.to_byte())?;
        write_tensor(&mut w, tensor)?;
    }
    w.write_u64::<LittleEndian>(data.adam_steps.len() as u64)?;
    for (name, t) in &data.adam_steps {
        write_string(&mut w, name)?;
        w.write_u64::<LittleEndian>(*t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<CheckpointData> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let config_text = read_string(&mut r)?;
    let config_hash = read_string(&mut r)?;
    let epoch = r.read_u64::<LittleEndian>()?;
    let global_step = r.read_u64::<LittleEndian>()?;
    let seed = r.read_u64::<LittleEndian>()?;
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name = read_string(&mut r)?;
        let kind = EntryKind::from_byte(r.read_u8()?)?;
        let tensor = read_tensor(&mut r, device)?;
        tensors.push((name, kind, tensor));
    }
    let n_steps = r.read_u64::<LittleEndian>()? as usize;
    let mut adam_steps = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let name = read_string(&mut r)?;
        let t = r.read_u64::<LittleEndian>()?;
        adam_steps.push((name, t));
    }
    Ok(CheckpointData {
        config_text,
        config_hash,
        epoch,
        global_step,
        seed,
        tensors,
        adam_steps,
    })
}

impl CheckpointData {
    pub fn tensor_map(&self, kind: EntryKind) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(_, k, _)| *k == kind)
            .map(|(n, _, t)| (n.clone(), t.clone()))
            .collect()
    }

    /// Trainables and buffers together, for loading into a parameter store.
    pub fn model_values(&self) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(_, k, _)| matches!(k, EntryKind::Param | EntryKind::Buffer))
            .map(|(n, _, t)| (n.clone(), t.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() -> Result<()> {
        let dev = Device::Cpu;
        let dir = tempfile::tempdir()?;
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let data = CheckpointData {
            config_text: "train.epochs = 3\n".into(),
            config_hash: "deadbeef".into(),
            epoch: 2,
            global_step: 19,
            seed: 42,
            tensors: vec![
                (
                    "w".into(),
                    EntryKind::Param,
                    Tensor::randn(0f32, 1f32, (3, 4), &dev)?,
                ),
                (
                    "bn.running_mean".into(),
                    EntryKind::Buffer,
                    Tensor::randn(0f32, 1f32, 5, &dev)?,
                ),
                (
                    "w".into(),
                    EntryKind::AdamM,
                    Tensor::randn(0f32, 0.01f32, (3, 4), &dev)?,
                ),
            ],
            adam_steps: vec![("w".into(), 19)],
        };
        save_checkpoint(&a, &data)?;
        let loaded = load_checkpoint(&a, &dev)?;
        assert_eq!(loaded.epoch, 2);
        assert_eq!(loaded.global_step, 19);
        assert_eq!(loaded.config_text, data.config_text);
        save_checkpoint(&b, &loaded)?;
        assert_eq!(std::fs::read(&a)?, std::fs::read(&b)?, "bitwise round trip");
        Ok(())
    }

    #[test]
    fn corrupt_file_rejected() -> Result<()> {
        let dir = tempfile::tempdir()?;
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"not a checkpoint at all")?;
        assert!(matches!(
            load_checkpoint(&p, &Device::Cpu),
            Err(Error::Checkpoint(_))
        ));
        Ok(())
    }
}
