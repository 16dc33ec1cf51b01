//! Named trainable parameters, plain SGD, and the `AGP1` checkpoint format.
//!
//! Checkpoint layout (little-endian): the magic `AGP1`, then for each
//! parameter in name order: name length `u16`, UTF-8 name bytes, rank `u8`,
//! one `u32` per dimension, and the values as `f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::ParamError;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AGP1";

/// Trainable tensors keyed by unique name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        if self.params.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Mutable access to the values; the shape cannot change through it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Replaces the values of an existing parameter of identical shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(ParamError::Shape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.num_values() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ParamError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(ParamError::Checkpoint {
                reason: "bad magic".into(),
                offset: 0,
            });
        }
        let mut store = Self::new();
        while r.pos < bytes.len() {
            let start = r.pos;
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error("parameter name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.array().map(|b| u32::from_le_bytes(b) as usize))
                .collect::<Result<_, _>>()?;
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(r.array()?));
            }
            let tensor = Tensor::new(&shape, data).map_err(|e| ParamError::Checkpoint {
                reason: e.to_string(),
                offset: start,
            })?;
            store.insert(&name, tensor).map_err(|_| ParamError::Checkpoint {
                reason: format!("duplicate parameter `{name}`"),
                offset: start,
            })?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ParamError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ParamError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn error(&self, reason: &str) -> ParamError {
        ParamError::Checkpoint {
            reason: reason.to_string(),
            offset: self.pos,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ParamError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ParamError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// One plain gradient-descent update `w <- w - lr * g` for every parameter.
pub fn sgd_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<(), ParamError> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(ParamError::LearningRate(lr));
    }
    for (name, w) in &params.params {
        match grads.get(name) {
            None => return Err(ParamError::MissingGradient(name.clone())),
            Some(g) if g.shape() != w.shape() => {
                return Err(ParamError::Shape {
                    name: name.clone(),
                    expected: w.shape().to_vec(),
                    got: g.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    for (name, w) in params.params.iter_mut() {
        let g = &grads[name];
        for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
            *wv -= lr * gv;
        }
    }
    Ok(())
}

/// Adam optimizer state, used for fitting the fixture networks.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<(), ParamError> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (name, w) in params.params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| ParamError::MissingGradient(name.clone()))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; w.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; w.numel()]);
            for (i, (wv, &gv)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                *wv -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
