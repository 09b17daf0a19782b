//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "BGCNNCKP"
//! version      u32      = 1
//! desc_len     u64
//! descriptor   desc_len bytes of UTF-8 (ArchDescriptor::to_text)
//! n_params     u32
//! repeated n_params times, in descriptor order:
//!   name_len   u16
//!   name       name_len bytes of UTF-8
//!   rank       u8
//!   dims       rank x u64
//!   values     product(dims) x f32
//! ```
//!
//! Nothing may follow the last parameter.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::descriptor::ArchDescriptor;
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BGCNNCKP";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let desc = model.descriptor().to_text();
    let params = model.parameters();
    let mut out = Vec::with_capacity(64 + desc.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u64).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses and validates a checkpoint. Every parameter's name and shape must
/// agree with the embedded descriptor before a model is returned.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic").map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let desc_len =
        usize::try_from(r.u64("descriptor length")?).map_err(|_| CheckpointError::Truncated("descriptor"))?;
    let text = std::str::from_utf8(r.take(desc_len, "descriptor")?)
        .map_err(|_| CheckpointError::Descriptor("descriptor is not UTF-8".into()))?;
    let desc = ArchDescriptor::parse(text)?;
    let expected = desc
        .param_shapes()
        .map_err(|e| CheckpointError::Descriptor(e.to_string()))?;
    let n = r.u32("parameter count")? as usize;
    if n != expected.len() {
        return Err(CheckpointError::Descriptor(format!(
            "file holds {n} parameter tensors, descriptor implies {}",
            expected.len()
        ))
        .into());
    }
    let mut tensors = Vec::with_capacity(n);
    for (exp_name, exp_shape) in &expected {
        let name_len = r.u16("parameter name length")? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, "parameter name")?).into_owned();
        if &name != exp_name {
            return Err(CheckpointError::NameMismatch {
                stored: name,
                expected: exp_name.clone(),
            }
            .into());
        }
        let rank = r.u8("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("parameter shape")? as usize);
        }
        if &shape != exp_shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                stored: shape,
                expected: exp_shape.clone(),
            }
            .into());
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4, "parameter values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    let trailing = bytes.len() - r.pos;
    if trailing != 0 {
        return Err(CheckpointError::TrailingBytes(trailing).into());
    }
    let mut model = Model::<f32>::from_descriptor(&desc, 0)?;
    for (dst, src) in model.parameters_mut().into_iter().zip(tensors) {
        *dst = src;
    }
    Ok(model)
}

/// Writes to a sibling temporary file first, then renames over `path`.
pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::vgg::{build_vgg_prefix, VggHead};

    fn model() -> Model<f32> {
        build_vgg_prefix([8, 8, 3], 2, 16, VggHead::Classifier { hidden: 6, classes: 2 }, 4).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let back = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
        assert_eq!(back.descriptor(), m.descriptor());
        for ((n1, a), (n2, b)) in m.parameters().into_iter().zip(back.parameters()) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn each_corruption_has_its_own_error() {
        let good = encode_checkpoint(&model());
        let err = |b: &[u8]| match decode_checkpoint(b) {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("expected checkpoint error, got {other:?}"),
        };

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(err(&bad), CheckpointError::BadMagic);

        let mut bad = good.clone();
        bad[8] = 2;
        assert!(matches!(
            err(&bad),
            CheckpointError::UnsupportedVersion { found: 2, .. }
        ));

        assert!(matches!(err(&good[..good.len() - 1]), CheckpointError::Truncated(_)));
        assert!(matches!(err(&good[..5]), CheckpointError::BadMagic));

        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(err(&bad), CheckpointError::TrailingBytes(1));
    }

    #[test]
    fn shape_disagreement_is_detected() {
        let good = encode_checkpoint(&model());
        // First parameter: conv1_1.kernel, shape [3,3,3,4]; bump the last dim.
        let desc_len = u64::from_le_bytes(good[12..20].try_into().unwrap()) as usize;
        let name_len_at = 20 + desc_len + 4;
        let name_len = u16::from_le_bytes(good[name_len_at..name_len_at + 2].try_into().unwrap()) as usize;
        let last_dim_at = name_len_at + 2 + name_len + 1 + 3 * 8;
        let mut bad = good.clone();
        bad[last_dim_at] = 5;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { .. }))
        ));
    }
}
