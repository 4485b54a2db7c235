//! Named parameter storage, Adam, and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian `u32`):
//!
//! ```text
//! "WECN1"
//! repeated: name_len, name bytes, rank, dims[rank], f32 values (row-major)
//! crc32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"WECN1";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterTable<T> {
    params: BTreeMap<String, Tensor<T>>,
    moments: BTreeMap<String, Moments<T>>,
    step: u64,
}

impl<T: Real> Default for ParameterTable<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterTable<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Same parameter values in another float type. Optimizer state is dropped.
    pub fn cast<U: Real>(&self) -> ParameterTable<U> {
        ParameterTable {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            moments: BTreeMap::new(),
            step: self.step,
        }
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) matrix.
    pub fn init_matrix(&mut self, rng: &mut impl Rng, name: &str, rows: usize, cols: usize) -> Result<()> {
        let bound = 1.0 / (rows as f64).sqrt();
        let vals = (0..rows * cols)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, vals)?)
    }

    pub fn init_bias(&mut self, name: &str, width: usize) -> Result<()> {
        self.insert(name, Tensor::zeros(&[width]))
    }

    pub fn init_gain(&mut self, name: &str, width: usize) -> Result<()> {
        self.insert(name, Tensor::filled(&[width], T::one()))
    }

    /// One Adam update with decoupled weight decay. Parameters absent from
    /// `grads` are left untouched. Any non-finite gradient rejects the whole
    /// step before anything is modified.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Vec<T>>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            let p = self.get(name)?;
            if g.len() != p.len() {
                return Err(shape_err("adam_step", format!("`{name}`: {} vs {}", g.len(), p.len())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let bc1 = T::one() - T::of(cfg.beta1.powi(t));
        let bc2 = T::one() - T::of(cfg.beta2.powi(t));
        let (lr, wd, eps) = (T::of(cfg.lr), T::of(cfg.weight_decay), T::of(cfg.eps));
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked above");
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
            });
            for (i, x) in p.values_mut().iter_mut().enumerate() {
                let gi = g[i];
                mom.m[i] = b1 * mom.m[i] + (T::one() - b1) * gi;
                mom.v[i] = b2 * mom.v[i] + (T::one() - b2) * gi * gi;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                *x = *x - lr * wd * *x - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(bad("missing WECN1 magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(bad("CRC32 mismatch"));
        }
        let mut cur = Cursor { buf: body, pos: 5 };
        let mut table = Self::new();
        while cur.pos < body.len() {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| bad("parameter name is not UTF-8"))?
                .to_string();
            let rank = cur.u32()? as usize;
            if rank > 2 {
                return Err(bad("rank above 2"));
            }
            let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = cur.take(count * 4)?;
            let vals = raw
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect();
            table.insert(name, Tensor::new(shape, vals)?)?;
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_table() -> ParameterTable<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = ParameterTable::new();
        t.init_matrix(&mut rng, "w", 3, 2).unwrap();
        t.init_bias("b", 2).unwrap();
        t.init_gain("g", 2).unwrap();
        t
    }

    #[test]
    fn zero_gradient_no_decay_leaves_parameters() {
        let mut t = small_table();
        let before = t.clone();
        let grads = t.iter().map(|(k, v)| (k.clone(), vec![0.0; v.len()])).collect();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        t.adam_step(&grads, &cfg).unwrap();
        for (name, v) in before.iter() {
            assert_eq!(v.values(), t.get(name).unwrap().values());
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut t: ParameterTable<f64> = small_table().cast();
        let before = t.clone();
        let grads: BTreeMap<String, Vec<f64>> = t
            .iter()
            .map(|(k, v)| (k.clone(), (0..v.len()).map(|i| if i % 2 == 0 { 0.3 } else { -2.0 }).collect()))
            .collect();
        let cfg = AdamConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        t.adam_step(&grads, &cfg).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε) ≈ lr·sign(g).
        for (name, g) in &grads {
            let (a, b) = (before.get(name).unwrap(), t.get(name).unwrap());
            for i in 0..g.len() {
                let delta = b.values()[i] - a.values()[i];
                let expected = -1e-3 * g[i] / (g[i].abs() + 1e-8);
                assert!((delta - expected).abs() < 1e-12, "{name}[{i}]: {delta} vs {expected}");
            }
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut t = small_table();
        let before = t.clone();
        let mut grads: BTreeMap<String, Vec<f32>> =
            t.iter().map(|(k, v)| (k.clone(), vec![1.0; v.len()])).collect();
        grads.get_mut("w").unwrap()[2] = f32::NAN;
        assert!(t.adam_step(&grads, &AdamConfig::default()).is_err());
        assert_eq!(t, before);
    }

    #[test]
    fn adam_is_deterministic() {
        let grads: BTreeMap<String, Vec<f32>> = small_table()
            .iter()
            .map(|(k, v)| (k.clone(), (0..v.len()).map(|i| i as f32 * 0.1 - 0.2).collect()))
            .collect();
        let run = || {
            let mut t = small_table();
            for _ in 0..5 {
                t.adam_step(&grads, &AdamConfig::default()).unwrap();
            }
            t.to_checkpoint_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let t = small_table();
        let bytes = t.to_checkpoint_bytes();
        assert_eq!(&bytes[..5], b"WECN1");
        let back = ParameterTable::<f32>::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.to_checkpoint_bytes(), bytes);

        let mut corrupt = bytes.clone();
        corrupt[10] ^= 0xff;
        assert!(ParameterTable::<f32>::from_checkpoint_bytes(&corrupt).is_err());
        assert!(ParameterTable::<f32>::from_checkpoint_bytes(b"WECN0abcd").is_err());
    }

    #[test]
    fn checkpoint_layout_is_little_endian() {
        let mut t = ParameterTable::<f32>::new();
        t.insert("ab", Tensor::new(vec![2], vec![1.0, -2.5]).unwrap()).unwrap();
        let bytes = t.to_checkpoint_bytes();
        let mut expected = b"WECN1".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        let crc = crc32fast::hash(&expected);
        expected.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut t = small_table();
        assert!(t.init_bias("b", 2).is_err());
        assert!(t.get("missing").is_err());
    }
}
