//! Named parameter store, initialisation and the `MAECKPT1` checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "MAECKPT1"
//! u32 count
//! count × { u32 name_len, name (UTF-8), u32 rank, rank × u32 extent }
//! raw f32 values of every array, in manifest order
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MAECKPT1";

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T: Real = f32> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self { map: IndexMap::new() }
    }
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies every entry of `other` whose name starts with `prefix`,
    /// checking shapes when the entry already exists.
    pub fn load_prefix(&mut self, other: &Params<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, value) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            if let Some(existing) = self.map.get(name) {
                if existing.shape() != value.shape() {
                    return Err(Error::shape("load parameters", existing.shape(), value.shape()));
                }
            }
            self.map.insert(name.to_string(), value.clone());
            copied += 1;
        }
        Ok(copied)
    }

    /// FNV-1a digest over names, shapes and value bits of the selected entries.
    pub fn digest(&self, select: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in self.iter().filter(|(n, _)| select(n)) {
            eat(name.as_bytes());
            for &e in t.shape() {
                eat(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Places every parameter on `tape`; names for which `trainable` is false
    /// become constants and receive no gradient.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        let vars = self
            .iter()
            .map(|(name, value)| {
                let var = tape.leaf(value.clone(), trainable(name));
                (name.to_string(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.map.len() as u32).to_le_bytes())?;
        for (name, t) in &self.map {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
        }
        for t in self.map.values() {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

impl Params<f32> {
    pub fn read_checkpoint(r: impl Read) -> Result<Self> {
        let mut r = CountingReader { inner: r, offset: 0 };
        let mut magic = [0u8; 8];
        r.fill(&mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad checkpoint magic".into(),
            });
        }
        let count = r.u32("array count")? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.offset;
            let mut name = vec![0u8; len];
            r.fill(&mut name, "name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Format {
                offset: at,
                msg: "parameter name is not UTF-8".into(),
            })?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            manifest.push((name, shape));
        }
        let mut map = IndexMap::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.fill(&mut bytes, "array data")?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            map.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { map })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format {
                offset: self.offset,
                msg: format!("truncated while reading {what}"),
            },
            _ => Error::Io(e),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Parameters placed on a tape, looked up by name.
pub struct Bound<'t, T: Real> {
    vars: HashMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    /// Gradients of every trainable parameter, keyed by name.
    pub fn gradients(&self, grads: &Gradients<T>) -> HashMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), grads.wrt(*v)))
            .collect()
    }
}

impl<'t, T: Real> FromIterator<(String, Var<'t, T>)> for Bound<'t, T> {
    fn from_iter<I: IntoIterator<Item = (String, Var<'t, T>)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

/// Uniform Xavier (Glorot) initialisation for a `[fan_in, fan_out]` weight.
pub fn xavier_uniform<T: Real>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::of(rng.random_range(-a..a)))
}

pub fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

pub(crate) fn init_linear<T: Real>(
    params: &mut Params<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) {
    params.insert(format!("{prefix}.weight"), xavier_uniform(fan_in, fan_out, rng));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn init_norm<T: Real>(params: &mut Params<T>, prefix: &str, width: usize) {
    params.insert(format!("{prefix}.weight"), Tensor::ones(&[width]));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[width]));
}
