//! Minimal dense-layer toolkit with explicit backward passes.
//!
//! All parameters of a network live in one [`ParamStore`]: a flat `f64`
//! buffer plus a table of named, shaped slices. Layers hold offsets into the
//! buffer, so gradients and optimizer state are plain vectors of equal length.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and fills it from `init`; returns its offset.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], mut init: impl FnMut() -> f64) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let offset = self.data.len();
        let len: usize = shape.iter().product();
        self.data.extend((0..len).map(|_| init()));
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, shape: shape.to_vec(), offset });
        offset
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entry(name).map(|e| &self.data[e.offset..e.offset + e.len()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let (offset, len) = self.entry(name).map(|e| (e.offset, e.len()))?;
        Some(&mut self.data[offset..offset + len])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Name of the tensor owning flat index `i`.
    pub fn name_of(&self, i: usize) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| (e.offset..e.offset + e.len()).contains(&i))
            .map(|e| e.name.as_str())
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for s in &e.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in &self.data[e.offset..e.offset + e.len()] {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Named tensors, in registration order.
    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.entries
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                values: self.data[e.offset..e.offset + e.len()].to_vec(),
            })
            .collect()
    }

    /// Overwrites values from `tensors`, which must match this store's
    /// layout name for name and shape for shape.
    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", self.entries.len(), tensors.len())));
        }
        for t in tensors {
            let e = self
                .entry(&t.name)
                .ok_or_else(|| Error::Format(format!("unknown tensor {}", t.name)))?
                .clone();
            if e.shape != t.shape || t.values.len() != e.len() {
                return Err(Error::Format(format!("tensor {} has shape {:?}, expected {:?}", t.name, t.shape, e.shape)));
            }
            self.data[e.offset..e.offset + e.len()].copy_from_slice(&t.values);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// How a freshly registered layer is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)` for weights and biases.
    Uniform,
    Zero,
}

/// Affine layer `y = x·Wᵀ + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    weight: usize,
    bias: usize,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut draw = || match init {
            Init::Uniform => rng.random_range(-bound..bound),
            Init::Zero => 0.0,
        };
        let weight = store.add(format!("{name}.weight"), &[fan_out, fan_in], &mut draw);
        let bias = store.add(format!("{name}.bias"), &[fan_out], &mut draw);
        Self { fan_in, fan_out, weight, bias }
    }

    fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        let n = self.fan_in * self.fan_out;
        ArrayView2::from_shape((self.fan_out, self.fan_in), &p[self.weight..self.weight + n]).expect("layout")
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let b = ndarray::ArrayView1::from(&p[self.bias..self.bias + self.fan_out]);
        let mut y = x.dot(&self.weight(p).t());
        y += &b;
        y
    }

    /// Accumulates parameter gradients into `grads` (if given) and returns
    /// the gradient with respect to the input.
    pub fn backward(&self, p: &[f64], x: ArrayView2<f64>, dy: ArrayView2<f64>, grads: Option<&mut [f64]>) -> Array2<f64> {
        if let Some(g) = grads {
            self.accumulate(g, x, dy);
        }
        dy.dot(&self.weight(p))
    }

    pub fn accumulate(&self, g: &mut [f64], x: ArrayView2<f64>, dy: ArrayView2<f64>) {
        let n = self.fan_in * self.fan_out;
        let mut gw = ArrayViewMut2::from_shape((self.fan_out, self.fan_in), &mut g[self.weight..self.weight + n])
            .expect("layout");
        ndarray::linalg::general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut gw);
        let gb = &mut g[self.bias..self.bias + self.fan_out];
        for (acc, v) in gb.iter_mut().zip(dy.sum_axis(Axis(0))) {
            *acc += v;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth nonlinearity used throughout. Recorded in checkpoints by tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
}

impl Activation {
    pub fn apply(self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Silu => x.mapv(|v| v * sigmoid(v)),
        }
    }

    /// `dy ⊙ f'(x)`.
    pub fn backward(self, x: &Array2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Activation::Silu => {
                let mut out = x.mapv(|v| {
                    let s = sigmoid(v);
                    s * (1.0 + v * (1.0 - s))
                });
                out *= &dy;
                out
            }
        }
    }
}

/// Sinusoidal embedding of per-row step indices: `[sin(t·f_i), cos(t·f_i)]`
/// with `f_i = 10000^{−i/half}`. Odd `dim` leaves the last column zero.
pub fn timestep_embedding(ts: &[f64], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let freqs: Array1<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    let mut out = Array2::zeros((ts.len(), dim));
    for (r, &t) in ts.iter().enumerate() {
        for (i, f) in freqs.iter().enumerate() {
            out[[r, i]] = (t * f).sin();
            out[[r, half + i]] = (t * f).cos();
        }
    }
    out
}

/// Horizontal concatenation of two row-aligned blocks.
pub fn hconcat(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a, b]).expect("row counts agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_layout_and_checksum() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::register(&mut s, "fc", 3, 2, Init::Uniform, &mut rng);
        assert_eq!(s.len(), 8);
        assert_eq!(s.entry("fc.weight").unwrap().shape, vec![2, 3]);
        assert_eq!(s.name_of(7), Some("fc.bias"));
        let before = s.checksum();
        s.data_mut()[0] += 1.0;
        assert_ne!(before, s.checksum());
        assert_eq!((l.fan_in, l.fan_out), (3, 2));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::new();
        s.add("a", &[1], || 0.0);
        s.add("a", &[1], || 0.0);
    }

    #[test]
    fn linear_forward_matches_hand_computation() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::register(&mut s, "fc", 2, 1, Init::Zero, &mut rng);
        s.get_mut("fc.weight").unwrap().copy_from_slice(&[2.0, -1.0]);
        s.get_mut("fc.bias").unwrap().copy_from_slice(&[0.5]);
        let y = l.forward(s.data(), array![[1.0, 3.0], [0.0, 1.0]].view());
        assert_eq!(y, array![[-0.5], [-0.5]]);
    }

    #[test]
    fn named_round_trip() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Linear::register(&mut s, "a", 3, 4, Init::Uniform, &mut rng);
        let named = s.to_named();
        let mut t = s.clone();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        t.load_named(&named).unwrap();
        assert_eq!(t, s);
        let mut bad = named.clone();
        bad[0].shape = vec![3, 4];
        assert!(t.load_named(&bad).is_err());
    }

    #[test]
    fn silu_derivative_matches_finite_difference() {
        let xs = array![[-3.0, -0.5, 0.0, 0.7, 4.0]];
        let d = Activation::Silu.backward(&xs, Array2::ones(xs.dim()).view());
        let h = 1e-6;
        for (i, &x) in xs.iter().enumerate() {
            let f = |v: f64| v * sigmoid(v);
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            assert!((fd - d[[0, i]]).abs() < 1e-8);
        }
    }

    #[test]
    fn embedding_shape_and_values() {
        let e = timestep_embedding(&[0.0, 3.0], 8);
        assert_eq!(e.dim(), (2, 8));
        assert_eq!(e.row(0).to_vec(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!((e[[1, 0]] - 3f64.sin()).abs() < 1e-15);
    }
}
