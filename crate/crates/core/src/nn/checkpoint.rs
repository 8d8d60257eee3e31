//! Model checkpoint files.
//!
//! All integers and floats are little-endian; floats are IEEE-754 `f64`.
//!
//! ```text
//! "CBHM"                      magic, 4 bytes
//! u16                         format version (1)
//! u32 n, n bytes              architecture string (UTF-8, canonical form)
//! u32 n, n x f64              pixel mean, channel-major
//! u32 L                       parameterized layer count
//!   L x { u32 n, n x f64 weights; u32 m, m x f64 biases }
//! f64 initial_lr, f64 decay_factor
//! u32 n, n x u32              phase boundaries
//! u32 total_epochs, f64 momentum, f64 weight_decay, u32 batch_size, u64 seed
//! u32 n, n x f64              init sigmas
//! f64 final_train_error
//! u8 has_validation, f64 validation_error (NaN when absent)
//! u32 n, n x f64              per-epoch training loss
//! ```
//!
//! Weight and bias shapes are implied by the architecture.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{param_shapes, LayerParams, TrainMeta, TrainSchedule, TrainedModel};
use crate::arch::{parse_arch, ArchError};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"CBHM";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("architecture: {0}")]
    Arch(#[from] ArchError),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.0.write_all(&[v])
    }
    fn u16(&mut self, v: u16) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn u32(&mut self, v: usize) -> std::io::Result<()> {
        self.0.write_all(&(v as u32).to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64s(&mut self, v: &[f64]) -> std::io::Result<()> {
        self.u32(v.len())?;
        v.iter().try_for_each(|&x| self.f64(x))
    }
}

struct In<R: Read>(R);

impl<R: Read> In<R> {
    fn bytes<const N: usize>(&mut self) -> std::io::Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }
    fn u8(&mut self) -> std::io::Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> std::io::Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> std::io::Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> std::io::Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, limit: usize) -> Result<Vec<f64>, CheckpointError> {
        let n = self.u32()?;
        if n > limit {
            return Err(CheckpointError::Corrupt(format!("array of {n} values exceeds {limit}")));
        }
        (0..n).map(|_| self.f64().map_err(Into::into)).collect()
    }
}

pub fn write_model<W: Write>(model: &TrainedModel, w: W) -> Result<(), CheckpointError> {
    let mut o = Out(w);
    o.0.write_all(MODEL_MAGIC)?;
    o.u16(VERSION)?;
    let arch = model.arch.to_string();
    o.u32(arch.len())?;
    o.0.write_all(arch.as_bytes())?;
    o.f64s(model.pixel_mean.data())?;
    o.u32(model.params.len())?;
    for p in &model.params {
        o.f64s(p.weights.data())?;
        o.f64s(p.biases.data())?;
    }
    let s = &model.meta.schedule;
    o.f64(s.initial_lr)?;
    o.f64(s.decay_factor)?;
    o.u32(s.boundaries.len())?;
    s.boundaries.iter().try_for_each(|&b| o.u32(b))?;
    o.u32(s.total_epochs)?;
    o.f64(s.momentum)?;
    o.f64(s.weight_decay)?;
    o.u32(s.batch_size)?;
    o.u64(s.seed)?;
    o.f64s(&s.init_sigmas)?;
    o.f64(model.meta.final_train_error)?;
    o.u8(u8::from(model.meta.validation_error.is_some()))?;
    o.f64(model.meta.validation_error.unwrap_or(f64::NAN))?;
    o.f64s(&model.meta.epoch_losses)?;
    o.0.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(r: R) -> Result<TrainedModel, CheckpointError> {
    let mut i = In(r);
    if &i.bytes::<4>()? != MODEL_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = i.u16()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let n = i.u32()?;
    if n > 1 << 16 {
        return Err(CheckpointError::Corrupt("architecture string too long".into()));
    }
    let mut arch = vec![0u8; n];
    i.0.read_exact(&mut arch)?;
    let arch = String::from_utf8(arch).map_err(|_| CheckpointError::Corrupt("architecture is not UTF-8".into()))?;
    let arch = parse_arch(&arch)?;
    let (c, h, w) = arch.input;

    let mean = i.f64s(c * h * w)?;
    if mean.len() != c * h * w {
        return Err(CheckpointError::Corrupt("pixel mean length".into()));
    }
    let shapes = param_shapes(&arch);
    if i.u32()? != shapes.len() {
        return Err(CheckpointError::Corrupt("parameter layer count".into()));
    }
    let mut params = Vec::with_capacity(shapes.len());
    for (wshape, nb) in shapes {
        let nw: usize = wshape.iter().product();
        let weights = i.f64s(nw)?;
        let biases = i.f64s(nb)?;
        if weights.len() != nw || biases.len() != nb {
            return Err(CheckpointError::Corrupt("parameter block size".into()));
        }
        params.push(LayerParams {
            weights: Tensor::from_parts(wshape, weights),
            biases: Tensor::from_parts(vec![nb], biases),
        });
    }

    let initial_lr = i.f64()?;
    let decay_factor = i.f64()?;
    let nb = i.u32()?;
    if nb > 1 << 16 {
        return Err(CheckpointError::Corrupt("too many boundaries".into()));
    }
    let boundaries = (0..nb).map(|_| i.u32()).collect::<Result<Vec<_>, _>>()?;
    let schedule = TrainSchedule {
        initial_lr,
        decay_factor,
        boundaries,
        total_epochs: i.u32()?,
        momentum: i.f64()?,
        weight_decay: i.f64()?,
        batch_size: i.u32()?,
        seed: i.u64()?,
        init_sigmas: i.f64s(1 << 16)?,
    };
    let final_train_error = i.f64()?;
    let has_val = i.u8()? != 0;
    let val = i.f64()?;
    let epoch_losses = i.f64s(1 << 24)?;
    Ok(TrainedModel {
        arch,
        params,
        pixel_mean: Tensor::from_parts(vec![c, h, w], mean),
        meta: TrainMeta {
            schedule,
            epoch_losses,
            final_train_error,
            validation_error: has_val.then_some(val),
        },
    })
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<(), CheckpointError> {
    let f = std::fs::File::create(path)?;
    write_model(model, std::io::BufWriter::new(f))
}

pub fn load_model(path: &Path) -> Result<TrainedModel, CheckpointError> {
    let f = std::fs::File::open(path)?;
    read_model(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;
    use crate::nn::init_params;

    fn model() -> TrainedModel {
        let arch = parse_arch("1x6x6-2C3P0-MP2S2-H4-D0.5-H3").unwrap();
        TrainedModel {
            params: init_params(&arch, &[0.3], 1).unwrap(),
            pixel_mean: Tensor::from_parts(vec![1, 6, 6], (0..36).map(|i| i as f64 / 36.0).collect()),
            arch,
            meta: TrainMeta {
                schedule: TrainSchedule::mnist(),
                epoch_losses: vec![2.3, 1.1, 0.5],
                final_train_error: 0.125,
                validation_error: Some(0.25),
            },
        }
    }

    #[test]
    fn round_trip() {
        let m = model();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CBHM");
        assert_eq!(&buf[4..6], &[1, 0]);
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, m);

        let mut no_val = m.clone();
        no_val.meta.validation_error = None;
        let mut buf = Vec::new();
        write_model(&no_val, &mut buf).unwrap();
        assert_eq!(read_model(buf.as_slice()).unwrap(), no_val);
    }

    #[test]
    fn rejects_bad_input() {
        let mut buf = Vec::new();
        write_model(&model(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(bad.as_slice()), Err(CheckpointError::BadMagic)));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_model(bad.as_slice()), Err(CheckpointError::Version(9))));
        assert!(matches!(read_model(&buf[..buf.len() - 3]), Err(CheckpointError::Io(_))));
    }
}
