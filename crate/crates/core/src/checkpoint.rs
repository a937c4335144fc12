//! Binary container for model parameters and optimizer state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DGLR"            4-byte magic
//! version: u32
//! count:   u64      number of records
//! per record:
//!   name_len: u32, name: UTF-8 bytes
//!   rank:     u32, extents: rank x u64
//!   payload:  prod(extents) x f64
//! ```
//!
//! Optimizer state lives under the reserved `opt/` prefix and scalar
//! metadata under `cfg/`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::adam::AdamState;
use crate::error::{GlrError, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DGLR";
pub const FORMAT_VERSION: u32 = 1;
pub const OPT_PREFIX: &str = "opt/";
pub const CFG_PREFIX: &str = "cfg/";

/// Ordered named records, the in-memory image of a checkpoint file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    records: IndexMap<String, Tensor>,
}

fn bad(msg: impl Into<String>) -> GlrError {
    GlrError::Checkpoint(msg.into())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated file: {e}")))?;
    Ok(buf)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.records.contains_key(&name) {
            return Err(bad(format!("duplicate record {name:?}")));
        }
        self.records.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.get(name)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for (name, t) in &self.records {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_exact::<4>(r)? != MAGIC {
            return Err(bad("missing DGLR magic"));
        }
        let version = u32::from_le_bytes(read_exact(r)?);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let count = u64::from_le_bytes(read_exact(r)?);
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(read_exact(r)?) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|e| bad(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| bad("record name is not UTF-8"))?;
            let rank = u32::from_le_bytes(read_exact(r)?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(read_exact(r)?) as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &b| a.checked_mul(b))
                .ok_or_else(|| bad(format!("record {name:?} has overflowing extents")))?;
            let mut data = Vec::with_capacity(numel.min(1 << 24));
            for _ in 0..numel {
                data.push(f64::from_le_bytes(read_exact(r)?));
            }
            ck.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| GlrError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| GlrError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| GlrError::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn add_params(&mut self, params: &ModelParams) -> Result<()> {
        for (name, t) in params.iter() {
            if name.starts_with(OPT_PREFIX) || name.starts_with(CFG_PREFIX) {
                return Err(bad(format!(
                    "parameter name {name:?} uses a reserved prefix"
                )));
            }
            let mut t = t.clone();
            t.clear_grad();
            self.insert(name, t)?;
        }
        Ok(())
    }

    /// All records outside the reserved prefixes.
    pub fn params(&self) -> Result<ModelParams> {
        let mut p = ModelParams::new();
        for (name, t) in &self.records {
            if !name.starts_with(OPT_PREFIX) && !name.starts_with(CFG_PREFIX) {
                p.insert(name.clone(), t.clone())?;
            }
        }
        Ok(p)
    }

    pub fn add_adam(&mut self, state: &AdamState) -> Result<()> {
        self.insert(
            format!("{OPT_PREFIX}hyper"),
            Tensor::from_vec(vec![state.lr, state.beta1, state.beta2, state.eps]),
        )?;
        self.insert(
            format!("{OPT_PREFIX}step"),
            Tensor::scalar(state.step() as f64),
        )?;
        let (first, second) = state.moments();
        for (name, m) in first {
            self.insert(format!("{OPT_PREFIX}m/{name}"), Tensor::from_vec(m.clone()))?;
        }
        for (name, v) in second {
            self.insert(format!("{OPT_PREFIX}v/{name}"), Tensor::from_vec(v.clone()))?;
        }
        Ok(())
    }

    /// Optimizer state, if the checkpoint carries one.
    pub fn adam(&self) -> Result<Option<AdamState>> {
        let Some(hyper) = self.get(&format!("{OPT_PREFIX}hyper")) else {
            return Ok(None);
        };
        let hyper: [f64; 4] = hyper
            .data()
            .try_into()
            .map_err(|_| bad("optimizer hyperparameters must have 4 entries"))?;
        let step = self
            .get(&format!("{OPT_PREFIX}step"))
            .ok_or_else(|| bad("optimizer step counter missing"))?
            .data()[0] as u64;
        let mut first = IndexMap::new();
        let mut second = IndexMap::new();
        for (name, t) in &self.records {
            if let Some(p) = name.strip_prefix(&format!("{OPT_PREFIX}m/")) {
                first.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = name.strip_prefix(&format!("{OPT_PREFIX}v/")) {
                second.insert(p.to_string(), t.data().to_vec());
            }
        }
        Ok(Some(AdamState::from_parts(hyper, step, first, second)))
    }

    pub fn set_meta(&mut self, key: &str, value: f64) -> Result<()> {
        self.insert(format!("{CFG_PREFIX}{key}"), Tensor::scalar(value))
    }

    pub fn meta(&self, key: &str) -> Option<f64> {
        self.get(&format!("{CFG_PREFIX}{key}")).map(|t| t.data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adam::adam_update;
    use crate::params::Gradients;

    #[test]
    fn header_bytes() {
        let mut ck = Checkpoint::new();
        ck.insert("w", Tensor::new([1, 2], vec![1.5, -2.0]).unwrap())
            .unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DGLR");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..20], &1u32.to_le_bytes());
        assert_eq!(&buf[20..21], b"w");
        assert_eq!(&buf[21..25], &2u32.to_le_bytes());
        assert_eq!(&buf[25..33], &1u64.to_le_bytes());
        assert_eq!(&buf[33..41], &2u64.to_le_bytes());
        assert_eq!(&buf[41..49], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 57);
    }

    #[test]
    fn params_and_optimizer_round_trip() {
        let mut p = ModelParams::new();
        p.insert(
            "conv.w",
            Tensor::new([2, 1, 3, 3], (0..18).map(f64::from).collect()).unwrap(),
        )
        .unwrap();
        p.insert("conv.b", Tensor::from_vec(vec![0.1, 0.2]))
            .unwrap();
        let mut s = AdamState::new(&p, 1e-3);
        let mut g = Gradients::default();
        g.insert("conv.w", vec![0.5; 18]);
        g.insert("conv.b", vec![-1.0; 2]);
        adam_update(&mut p, &g, &mut s).unwrap();

        let mut ck = Checkpoint::new();
        ck.add_params(&p).unwrap();
        ck.add_adam(&s).unwrap();
        ck.set_meta("cascades", 2.0).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.params().unwrap(), p);
        assert_eq!(back.adam().unwrap().unwrap(), s);
        assert_eq!(back.meta("cascades"), Some(2.0));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::read_from(&mut &b"XXXX\x01\0\0\0"[..]).is_err());
        let mut ck = Checkpoint::new();
        ck.insert("a", Tensor::from_vec(vec![1.0; 4])).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Checkpoint::read_from(&mut buf.as_slice()),
            Err(GlrError::Checkpoint(_))
        ));
    }
}
