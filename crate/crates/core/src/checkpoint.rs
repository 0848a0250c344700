//! Checkpoint persistence: magic "RZ3D", a version word, a named-tensor
//! table (little-endian f32), and a trailing CRC32 over everything before it.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::backbone::{Backbone, ParamSelector};
use crate::numerics::Scalar;
use crate::util::crc32;

pub const MAGIC: &[u8; 4] = b"RZ3D";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("tensor {name}: shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    Missing(String),
    #[error("numerics: {0}")]
    Numerics(#[from] crate::numerics::NumericsError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// In-memory state dict: name -> (shape, values).
pub type StateDict = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

pub fn state_dict<F: Scalar>(model: &Backbone<F>) -> Result<StateDict> {
    let mut out = StateDict::new();
    for (name, p) in model.param_groups(&ParamSelector::All)? {
        let data: Vec<f32> = p.data().into_iter().map(|v| Scalar::to_f64(v) as f32).collect();
        out.insert(name, (p.shape().to_vec(), data));
    }
    Ok(out)
}

/// Load tensors into the model by name. With `partial`, names absent from
/// the dict are left untouched (used when attaching adapters to a base
/// checkpoint); otherwise the name sets must match exactly.
pub fn load_state_dict<F: Scalar>(model: &Backbone<F>, dict: &StateDict, partial: bool) -> Result<()> {
    let params = model.param_groups(&ParamSelector::All)?;
    let mut used = 0usize;
    for (name, p) in &params {
        match dict.get(name) {
            Some((shape, data)) => {
                if shape != p.shape() {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        expected: p.shape().to_vec(),
                        found: shape.clone(),
                    });
                }
                let vals: Vec<F> = data.iter().map(|&v| F::from_f64(v as f64)).collect();
                p.set_data(&vals);
                used += 1;
            }
            None if partial => {}
            None => return Err(CheckpointError::Missing(name.clone())),
        }
    }
    if !partial && used != dict.len() {
        let have: std::collections::BTreeSet<_> = params.iter().map(|(n, _)| n.clone()).collect();
        let extra = dict.keys().find(|k| !have.contains(*k)).cloned().unwrap_or_default();
        return Err(CheckpointError::Format(format!(
            "checkpoint holds tensor {extra} unknown to the model"
        )));
    }
    Ok(())
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn save(path: &Path, dict: &StateDict) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, dict.len() as u32);
    for (name, (shape, data)) in dict {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, shape.len() as u32);
        for &d in shape {
            push_u32(&mut buf, d as u32);
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    push_u32(&mut buf, crc);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load(path: &Path) -> Result<StateDict> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(CheckpointError::Format("file too small".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::Format("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut dict = StateDict::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Format("non-UTF-8 tensor name".into()))?
            .to_string();
        let ndims = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if dict.insert(name.clone(), (shape, data)).is_some() {
            return Err(CheckpointError::Format(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Format("trailing bytes after tensor table".into()));
    }
    Ok(dict)
}

pub fn save_model<F: Scalar>(path: &Path, model: &Backbone<F>) -> Result<()> {
    save(path, &state_dict(model)?)
}

pub fn load_model<F: Scalar>(path: &Path, model: &Backbone<F>, partial: bool) -> Result<()> {
    load_state_dict(model, &load(path)?, partial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::util::rng_from;

    fn tiny() -> Backbone<f32> {
        let cfg = BackboneConfig {
            image_side: 8,
            d_model: 16,
            n_heads: 2,
            n_blocks: 4,
            mlp_ratio: 1,
            ..BackboneConfig::default()
        };
        Backbone::new(cfg, &mut rng_from(1)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny();
        let p1 = dir.path().join("a.rz3d");
        let p2 = dir.path().join("b.rz3d");
        save_model(&p1, &model).unwrap();
        let dict = load(&p1).unwrap();
        save(&p2, &dict).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let other = tiny();
        // Perturb, then restore from the checkpoint.
        for (_, p) in other.param_groups(&ParamSelector::All).unwrap() {
            let mut d = p.data();
            for v in &mut d {
                *v += 1.0;
            }
            p.set_data(&d);
        }
        load_model(&p1, &other, false).unwrap();
        assert_eq!(state_dict(&model).unwrap(), state_dict(&other).unwrap());
    }

    #[test]
    fn crc_corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny();
        let p = dir.path().join("c.rz3d");
        save_model(&p, &model).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        match load(&p) {
            Err(CheckpointError::Crc { .. }) => {}
            other => panic!("expected CRC error, got {other:?}"),
        }
    }

    #[test]
    fn partial_load_for_adapter_attach() {
        let dir = tempfile::tempdir().unwrap();
        let base = tiny();
        let p = dir.path().join("base.rz3d");
        save_model(&p, &base).unwrap();

        let mut with_shifters = tiny();
        with_shifters.attach_shifters(4, &mut rng_from(2)).unwrap();
        // Strict load must fail (shifter tensors missing from the file)...
        assert!(load_model(&p, &with_shifters, false).is_err());
        // ...partial load fills the backbone and leaves shifters alone.
        load_model(&p, &with_shifters, true).unwrap();
        let a = state_dict(&base).unwrap();
        let b = state_dict(&with_shifters).unwrap();
        for (name, v) in &a {
            assert_eq!(b.get(name), Some(v), "backbone tensor {name} mismatch");
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.rz3d");
        let mut buf = b"NOPE".to_vec();
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        let crc = crate::util::crc32(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        std::fs::write(&p, &buf).unwrap();
        assert!(matches!(load(&p), Err(CheckpointError::Format(_))));
    }
}
