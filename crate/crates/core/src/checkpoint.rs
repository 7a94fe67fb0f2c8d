//! Binary parameter checkpoints.
//!
//! ```text
//! "PMKD" | version u32 | tensor count u32
//! per tensor: name_len u16 | UTF-8 name | dtype u8 (0 = f32) | rank u8 | dims u32 × rank | f32 LE payload
//! FNV-1a 64 of every preceding byte, u64 LE
//! ```

use std::fs;
use std::path::Path;

use crate::distill::Pacemaker;
use crate::error::{Error, Result};
use crate::model::{ArchSpec, FilterMode, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PMKD";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Serializes named tensors in the given order.
pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut seen = std::collections::HashSet::new();
    for (name, t) in tensors {
        if !seen.insert(name) {
            return Err(Error::ParamMismatch {
                name: name.to_string(),
                msg: "duplicate tensor name".into(),
            });
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::ParamMismatch {
            name: name.to_string(),
            msg: "name longer than 65535 bytes".into(),
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 + 8 {
        return Err(Error::Malformed(format!("{} bytes is too short", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Cursor { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Malformed(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Malformed(format!("`{name}`: unsupported dtype {dtype}")));
        }
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Malformed(format!("`{name}`: {e}")))?;
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::Malformed(format!("duplicate tensor `{name}`")));
        }
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Malformed(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Every model tensor, running statistics included, with an optional name prefix.
pub fn model_tensors<'a>(model: &'a Model, prefix: &'a str) -> Vec<(String, &'a Tensor)> {
    model
        .params()
        .iter()
        .map(|(_, name, p)| (format!("{prefix}{name}"), &p.tensor))
        .collect()
}

pub fn model_bytes(model: &Model) -> Result<Vec<u8>> {
    let named = model_tensors(model, "");
    encode(named.iter().map(|(n, t)| (n.as_str(), *t)))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write_bytes(path, &model_bytes(model)?)
}

/// Checksum stored in a checkpoint file's trailer.
pub fn file_checksum(path: &Path) -> Result<u64> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)?;
    Ok(u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()))
}

/// Copies tensors named `prefix + param` into `model`. Every parameter must be present
/// with the registered shape; the first offending parameter in model order is reported.
pub fn assign(model: &mut Model, tensors: &[(String, Tensor)], prefix: &str) -> Result<()> {
    let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let mut updates = Vec::new();
    for (id, name, p) in model.params().iter() {
        let key = format!("{prefix}{name}");
        let t = find(&key).ok_or_else(|| Error::ParamMismatch {
            name: key.clone(),
            msg: "missing from checkpoint".into(),
        })?;
        if t.dims() != p.tensor.dims() {
            return Err(Error::ParamMismatch {
                name: key,
                msg: format!("checkpoint shape {:?}, model expects {:?}", t.dims(), p.tensor.dims()),
            });
        }
        updates.push((id, t.clone()));
    }
    let expected = model.params().len();
    let available = tensors.iter().filter(|(n, _)| n.starts_with(prefix)).count();
    if available != expected {
        let extra = tensors
            .iter()
            .map(|(n, _)| n)
            .find(|n| n.starts_with(prefix) && model.params().id(&n[prefix.len()..]).is_none());
        return Err(Error::ParamMismatch {
            name: extra.cloned().unwrap_or_default(),
            msg: "not a parameter of the target model".into(),
        });
    }
    for (id, t) in updates {
        *model.params_mut().tensor_mut(id) = t;
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Builds `spec` in `mode` and fills it from the checkpoint at `path`.
pub fn load_checkpoint(path: &Path, spec: &ArchSpec, mode: FilterMode) -> Result<Model> {
    let mut model = Model::build(spec, mode)?;
    assign(&mut model, &read_checkpoint(path)?, "")?;
    Ok(model)
}

/// True when the tensors look like a pacemaker checkpoint (`row.`/`col.` prefixes).
pub fn is_pacemaker(tensors: &[(String, Tensor)]) -> bool {
    !tensors.is_empty() && tensors.iter().all(|(n, _)| n.starts_with("row.") || n.starts_with("col."))
}

/// Rebuilds a pacemaker; the presence of `row.` tensors decides its mode.
pub fn pacemaker_from_tensors(tensors: &[(String, Tensor)], spec: &ArchSpec) -> Result<Pacemaker> {
    if !is_pacemaker(tensors) {
        return Err(Error::ParamMismatch {
            name: tensors.first().map(|(n, _)| n.clone()).unwrap_or_default(),
            msg: "not a pacemaker checkpoint (expected row./col. prefixes)".into(),
        });
    }
    let row = if tensors.iter().any(|(n, _)| n.starts_with("row.")) {
        let mut m = Model::build(spec, FilterMode::RowStudent)?;
        assign(&mut m, tensors, "row.")?;
        Some(m)
    } else {
        None
    };
    let mut col = Model::build(spec, FilterMode::Column)?;
    assign(&mut col, tensors, "col.")?;
    Ok(Pacemaker { row, col })
}

pub fn save_pacemaker(pm: &Pacemaker, path: &Path) -> Result<()> {
    let named = pm.named_tensors();
    write_bytes(path, &encode(named.iter().map(|(n, t)| (n.as_str(), *t)))?)
}

pub fn load_pacemaker(path: &Path, spec: &ArchSpec) -> Result<Pacemaker> {
    pacemaker_from_tensors(&read_checkpoint(path)?, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn tiny(mode: FilterMode) -> Model {
        let spec = ArchSpec::parse("tiny4", 3).unwrap().with_input(3, 8, 8);
        init_weights(Model::build(&spec, mode).unwrap(), 11)
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn pacemaker_round_trip() {
        use crate::distill::PacemakerMode;
        let spec = ArchSpec::parse("tiny4", 3).unwrap().with_input(3, 8, 8);
        for mode in [PacemakerMode::Ensemble, PacemakerMode::ColumnOnly] {
            let pm = Pacemaker::new(&spec, mode, 3).unwrap();
            let named = pm.named_tensors();
            let bytes = encode(named.iter().map(|(n, t)| (n.as_str(), *t))).unwrap();
            assert_eq!(pacemaker_from_tensors(&decode(&bytes).unwrap(), &spec).unwrap(), pm);
        }
        let student = decode(&model_bytes(&tiny(FilterMode::RowStudent)).unwrap()).unwrap();
        assert!(pacemaker_from_tensors(&student, &spec).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = tiny(FilterMode::RowStudent);
        let bytes = model_bytes(&m).unwrap();
        let mut back = Model::build(m.arch().unwrap(), FilterMode::RowStudent).unwrap();
        assign(&mut back, &decode(&bytes).unwrap(), "").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = model_bytes(&tiny(FilterMode::Teacher)).unwrap();
        let err = decode(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic)));
    }

    #[test]
    fn teacher_into_student_names_first_conv() {
        let teacher = tiny(FilterMode::Teacher);
        let tensors = decode(&model_bytes(&teacher).unwrap()).unwrap();
        let mut student = Model::build(teacher.arch().unwrap(), FilterMode::RowStudent).unwrap();
        match assign(&mut student, &tensors, "") {
            Err(Error::ParamMismatch { name, .. }) => assert_eq!(name, "conv1.weight"),
            other => panic!("{other:?}"),
        }
    }
}
