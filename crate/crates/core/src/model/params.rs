//! Named parameter tensors, the Adam optimizer and the `RPM1` checkpoint
//! container.
//!
//! `RPM1` layout (little-endian):
//!
//! ```text
//! magic        4 bytes "RPM1"
//! count        u32
//! per tensor:  name (u32 length + UTF-8), ndim u32, dims u64 x ndim,
//!              offset u64 (in f32 elements from the start of the data block)
//! data_len     u64 (f32 elements)
//! data         f32 x data_len
//! ```

use std::io::{self, Read, Write};

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RPM1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    pub tensors: IndexMap<String, Array2<f64>>,
}

impl Params {
    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn add_uniform(&mut self, rng: &mut ChaCha8Rng, name: String, rows: usize, cols: usize, fan_in: usize) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound));
        self.tensors.insert(name, t);
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Array2::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Accumulates `g` into the tensor `name` (gradient buffers).
    pub fn accumulate(&mut self, name: &str, g: &Array2<f64>) {
        let t = self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing gradient slot `{name}`"));
        *t += g;
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_checkpoint(self, &mut out).expect("writing to a Vec cannot fail");
        out
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(params: &Params, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (name, p) in params.tensors.iter_mut() {
            let g = grads.get(name);
            let m = self.m.tensors.get_mut(name).expect("adam state");
            let v = self.v.tensors.get_mut(name).expect("adam state");
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

pub fn write_checkpoint<W: Write>(params: &Params, mut w: W) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(params.tensors.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for (name, t) in &params.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        offset += t.len() as u64;
    }
    w.write_all(&offset.to_le_bytes())?;
    for t in params.tensors.values() {
        for x in t.iter() {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Params, ModelError> {
    let corrupt = |m: &str| ModelError::Checkpoint(m.to_string());
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], ModelError> {
        let s = buf.get(pos..pos + n).ok_or_else(|| corrupt("truncated checkpoint"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let u64_of = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    let count = u32_of(take(4)?) as usize;
    let mut directory = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_of(take(4)?) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| corrupt("tensor name is not utf-8"))?;
        let ndim = u32_of(take(4)?) as usize;
        if ndim != 2 {
            return Err(corrupt("only rank-2 tensors are supported"));
        }
        let rows = u64_of(take(8)?) as usize;
        let cols = u64_of(take(8)?) as usize;
        let offset = u64_of(take(8)?) as usize;
        directory.push((name, rows, cols, offset));
    }
    let total = u64_of(take(8)?) as usize;
    let data: Vec<f64> = take(total.checked_mul(4).ok_or_else(|| corrupt("size overflow"))?)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let mut params = Params::default();
    for (name, rows, cols, offset) in directory {
        let n = rows * cols;
        let slice = data
            .get(offset..offset + n)
            .ok_or_else(|| corrupt("tensor extends past data block"))?;
        let t = Array2::from_shape_vec((rows, cols), slice.to_vec()).map_err(|_| corrupt("bad shape"))?;
        params.tensors.insert(name, t);
    }
    Ok(params)
}
