//! Binary checkpoint format.
//!
//! Layout: magic "LCKP", u32 LE version (=1), u8 phase marker, u32 LE epoch,
//! u32 LE tensor count; then per tensor: u16 LE name length, UTF-8 name,
//! u8 dtype tag (0 = f32, 1 = f64), u8 rank, rank x u64 LE dims, raw
//! little-endian element data. Round trips are bit-exact.

use std::collections::HashMap;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::cascade::CascadeModel;
use crate::error::{LcError, Result};
use crate::ops::optim::OptimizerState;
use crate::tensor::{Dtype, Elem, Shape4, Tensor};

pub const MAGIC: &[u8; 4] = b"LCKP";
pub const VERSION: u32 = 1;

/// Velocity tensors are stored alongside parameters under this prefix.
const OPT_PREFIX: &str = "opt.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    Initial,
    Cascade,
}

impl TrainPhase {
    pub fn marker(self) -> u8 {
        match self {
            TrainPhase::Initial => 0,
            TrainPhase::Cascade => 1,
        }
    }

    pub fn from_marker(m: u8) -> Option<TrainPhase> {
        match m {
            0 => Some(TrainPhase::Initial),
            1 => Some(TrainPhase::Cascade),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainPhase::Initial => "initial",
            TrainPhase::Cascade => "cascade",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Elem> {
    pub phase: TrainPhase,
    pub epoch: u32,
    pub tensors: Vec<(String, Tensor<T>)>,
}

pub fn write_checkpoint<T: Elem>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(ckpt.phase.marker());
    buf.extend_from_slice(&ckpt.epoch.to_le_bytes());
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(LcError::config(format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(T::DTYPE.tag());
        buf.push(4u8);
        let s = tensor.shape();
        for d in [s.n, s.c, s.h, s.w] {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            T::write_le(v, &mut buf);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.buf.len() {
            return Err(LcError::Format {
                offset: self.offset as u64,
                msg: format!(
                    "truncated while reading {what} ({} bytes needed, {} left)",
                    n,
                    self.buf.len() - self.offset
                ),
            });
        }
        let out = &self.buf[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64_le(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn read_checkpoint<T: Elem>(path: &Path) -> Result<Checkpoint<T>> {
    let buf = std::fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        offset: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(LcError::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32_le("version")?;
    if version != VERSION {
        return Err(LcError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let phase_marker = r.u8("phase marker")?;
    let phase = TrainPhase::from_marker(phase_marker).ok_or_else(|| LcError::Format {
        offset: (r.offset - 1) as u64,
        msg: format!("unknown phase marker {phase_marker}"),
    })?;
    let epoch = r.u32_le("epoch")?;
    let count = r.u32_le("tensor count")?;

    let mut tensors = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = r.u16_le(&format!("name length of tensor {i}"))? as usize;
        let name_bytes = r.take(name_len, &format!("name of tensor {i}"))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| LcError::Format {
                offset: (r.offset - name_len) as u64,
                msg: format!("tensor {i} name is not valid UTF-8"),
            })?
            .to_string();
        let tag = r.u8(&format!("dtype of '{name}'"))?;
        let dtype = Dtype::from_tag(tag).ok_or_else(|| LcError::Format {
            offset: (r.offset - 1) as u64,
            msg: format!("unknown dtype tag {tag} for tensor '{name}'"),
        })?;
        if dtype != T::DTYPE {
            return Err(LcError::Format {
                offset: (r.offset - 1) as u64,
                msg: format!(
                    "tensor '{name}' has dtype {dtype:?}, expected {:?}",
                    T::DTYPE
                ),
            });
        }
        let rank = r.u8(&format!("rank of '{name}'"))? as usize;
        if rank != 4 {
            return Err(LcError::Format {
                offset: (r.offset - 1) as u64,
                msg: format!("tensor '{name}' has rank {rank}, expected 4"),
            });
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = r.u64_le(&format!("dims of '{name}'"))? as usize;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let elem_size = dtype.size_bytes();
        let raw = r.take(shape.len() * elem_size, &format!("data of tensor '{name}'"))?;
        let data: Vec<T> = raw.chunks_exact(elem_size).map(T::read_le).collect();
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(Checkpoint {
        phase,
        epoch,
        tensors,
    })
}

/// Snapshot a model (and optionally its optimizer velocities) to disk.
pub fn save_model<T: Elem>(
    path: &Path,
    model: &CascadeModel<T>,
    phase: TrainPhase,
    epoch: u32,
    opt: Option<&OptimizerState<T>>,
) -> Result<()> {
    let mut tensors = model.state_dict();
    if let Some(opt) = opt {
        let mut entries: Vec<(String, Vec<T>)> = opt
            .velocity_entries()
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, v) in entries {
            let len = v.len();
            tensors.push((
                format!("{OPT_PREFIX}{name}"),
                Tensor::from_vec(Shape4::new(1, 1, 1, len), v)?,
            ));
        }
    }
    write_checkpoint(
        path,
        &Checkpoint {
            phase,
            epoch,
            tensors,
        },
    )
}

/// Build a model from `config` and load parameters from a checkpoint.
/// Returns the model, its recorded phase and epoch, and any stored
/// optimizer velocities.
pub fn load_model<T: Elem>(
    path: &Path,
    config: &BackboneConfig,
) -> Result<(CascadeModel<T>, TrainPhase, u32, HashMap<String, Vec<T>>)> {
    let ckpt = read_checkpoint::<T>(path)?;
    let mut model = crate::backbone::build_model::<T>(config)?;
    let mut params = Vec::new();
    let mut velocities = HashMap::new();
    for (name, tensor) in ckpt.tensors {
        if let Some(stripped) = name.strip_prefix(OPT_PREFIX) {
            velocities.insert(stripped.to_string(), tensor.into_data());
        } else {
            params.push((name, tensor));
        }
    }
    model.load_state_dict(&params)?;
    model.trained_phase = Some(ckpt.phase);
    Ok((model, ckpt.phase, ckpt.epoch, velocities))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_model;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            stem_channels: vec![4],
            stage_blocks: vec![1, 1],
            stage_channels: vec![4, 6],
            stage_dilations: vec![1, 2],
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lckp");
        let model = build_model::<f32>(&small_config()).unwrap();
        save_model(&path, &model, TrainPhase::Initial, 7, None).unwrap();
        let (loaded, phase, epoch, vel) = load_model::<f32>(&path, &small_config()).unwrap();
        assert_eq!(phase, TrainPhase::Initial);
        assert_eq!(epoch, 7);
        assert!(vel.is_empty());
        for ((na, ta), (nb, tb)) in model.state_dict().iter().zip(loaded.state_dict().iter()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "tensor {na} not bit-equal");
        }
    }

    #[test]
    fn truncated_file_names_failing_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lckp");
        let model = build_model::<f32>(&small_config()).unwrap();
        save_model(&path, &model, TrainPhase::Cascade, 1, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_checkpoint::<f32>(&path).unwrap_err();
        match err {
            LcError::Format { msg, .. } => {
                assert!(msg.contains("truncated"), "msg: {msg}");
                assert!(msg.contains("tensor"), "msg: {msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lckp");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(&path),
            Err(LcError::Format { offset: 0, .. })
        ));

        let model = build_model::<f32>(&small_config()).unwrap();
        save_model(&path, &model, TrainPhase::Initial, 0, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // version
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(&path),
            Err(LcError::Version { found: 9, .. })
        ));
    }

    #[test]
    fn shape_mismatch_lists_offending_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lckp");
        let model = build_model::<f32>(&small_config()).unwrap();
        save_model(&path, &model, TrainPhase::Initial, 0, None).unwrap();
        // different widths -> shape mismatch on load
        let other = BackboneConfig {
            stage_channels: vec![6, 6],
            stem_channels: vec![6],
            ..small_config()
        };
        let err = load_model::<f32>(&path, &other).unwrap_err();
        match err {
            LcError::Shape(msg) => assert!(msg.contains("stem.0.weight"), "msg: {msg}"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn param_count_matches_checkpoint_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lckp");
        let model = build_model::<f32>(&small_config()).unwrap();
        save_model(&path, &model, TrainPhase::Initial, 0, None).unwrap();
        let ckpt = read_checkpoint::<f32>(&path).unwrap();
        let stored: usize = ckpt.tensors.iter().map(|(_, t)| t.len()).sum();
        assert_eq!(model.param_count(), stored);
    }

    #[test]
    fn optimizer_velocities_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lckp");
        let model = build_model::<f32>(&small_config()).unwrap();
        let mut opt = OptimizerState::<f32>::new(0.1, 0.9, 0.0);
        opt.insert_velocity("stem.0.weight".into(), vec![0.5; 4 * 3 * 9]);
        save_model(&path, &model, TrainPhase::Cascade, 3, Some(&opt)).unwrap();
        let (_, _, _, vel) = load_model::<f32>(&path, &small_config()).unwrap();
        assert_eq!(vel.get("stem.0.weight").unwrap(), &vec![0.5f32; 4 * 3 * 9]);
    }
}
