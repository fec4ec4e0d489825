//! Binary container for named f64 arrays.
//!
//! Layout (all integers little-endian):
//!   magic "FRZN" | version u32 | array count u32
//!   per array: name length u32 | name bytes | rank u32
//!              | extents u64 x rank | payload f64 x product
//!
//! Round-tripping is bit-exact; a version mismatch is a hard error.

use crate::model::{ModelDims, ParamSet};
use crate::tensor::NdArray;
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"FRZN";
pub const VERSION: u32 = 1;

/// An ordered list of (name, array) pairs. Order is preserved so that
/// saved bytes are reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedArrays {
    entries: Vec<(String, NdArray)>,
}

impl NamedArrays {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, array: NdArray) {
        debug_assert!(
            self.get(&name).is_none(),
            "duplicate checkpoint entry `{name}`"
        );
        self.entries.push((name, array));
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, NdArray)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, arr) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(arr.shape().len() as u32).to_le_bytes())?;
            for &e in arr.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in arr.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, want {MAGIC:?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {VERSION}"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("array name is not utf-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let arr = NdArray::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("array `{name}`: {e}")))?;
            entries.push((name, arr));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

const PARAM_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "class_embed", "scale"];

/// Serialize model parameters into the container.
pub fn params_to_arrays(p: &ParamSet) -> NamedArrays {
    let mut out = NamedArrays::new();
    out.push("w1".into(), p.w1.clone());
    out.push("b1".into(), p.b1.clone());
    out.push("w2".into(), p.w2.clone());
    out.push("b2".into(), p.b2.clone());
    out.push("class_embed".into(), p.class_embed.clone());
    out.push(
        "scale".into(),
        NdArray::new(vec![1], vec![p.scale]).expect("finite scale"),
    );
    out
}

/// Rebuild model parameters from a container.
pub fn params_from_arrays(arrays: &NamedArrays) -> Result<ParamSet> {
    let get = |name: &str| {
        arrays
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    };
    for (name, _) in arrays.iter() {
        if !PARAM_NAMES.contains(&name.as_str()) {
            return Err(Error::Checkpoint(format!("unexpected array `{name}`")));
        }
    }
    let p = ParamSet {
        w1: get("w1")?,
        b1: get("b1")?,
        w2: get("w2")?,
        b2: get("b2")?,
        class_embed: get("class_embed")?,
        scale: get("scale")?.data()[0],
    };
    p.check_finite()?;
    let d = p.dims();
    let want = ModelDims {
        input_channels: p.w1.cols(),
        hidden: p.w1.rows(),
        feature: p.w2.rows(),
        classes: p.class_embed.rows(),
    };
    if d != want || p.w2.cols() != d.hidden || p.b1.len() != d.hidden || p.b2.len() != d.feature {
        return Err(Error::Checkpoint("inconsistent parameter shapes".into()));
    }
    Ok(p)
}

pub fn save_params(path: &Path, p: &ParamSet) -> Result<()> {
    params_to_arrays(p).save(path)
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    params_from_arrays(&NamedArrays::load(path)?)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn dims() -> ModelDims {
        ModelDims {
            input_channels: 3,
            hidden: 5,
            feature: 4,
            classes: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let p = init_params(77, &dims());
        let mut buf = Vec::new();
        params_to_arrays(&p).write_to(&mut buf).unwrap();
        let loaded = params_from_arrays(&NamedArrays::read_from(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(loaded, p);

        let mut buf2 = Vec::new();
        params_to_arrays(&loaded).write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn version_mismatch_is_hard_error() {
        let p = init_params(1, &dims());
        let mut buf = Vec::new();
        params_to_arrays(&p).write_to(&mut buf).unwrap();
        buf[4] = 99; // bump version field
        assert!(matches!(
            NamedArrays::read_from(buf.as_slice()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00";
        assert!(NamedArrays::read_from(&bytes[..]).is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let p = init_params(2, &dims());
        let mut buf = Vec::new();
        params_to_arrays(&p).write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(NamedArrays::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn missing_array_reported_by_name() {
        let mut arrays = params_to_arrays(&init_params(3, &dims()));
        arrays.entries.retain(|(n, _)| n != "w2");
        let err = params_from_arrays(&arrays).unwrap_err();
        assert!(err.to_string().contains("w2"));
    }
}
