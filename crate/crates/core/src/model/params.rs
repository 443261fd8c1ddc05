//! Named parameter tensors.
//!
//! Parameters are stored as little-endian `f32` in row-major order — the
//! same representation the checkpoint format uses — while all forward and
//! backward arithmetic runs in `f64`. Values cross the boundary through
//! [`Param::to_tensor`] (exact widening) and [`Param::set_from_tensor`]
//! (rounding), so a saved and reloaded store is bitwise identical to the
//! one in memory.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Param {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn constant(rows: usize, cols: usize, v: f32) -> Self {
        Param {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| (gauss(rng) * std) as f32)
            .collect();
        Param { rows, cols, data }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn set_from_tensor(&mut self, t: &Tensor) {
        assert_eq!((self.rows, self.cols), t.shape(), "param shape mismatch");
        for (dst, &src) in self.data.iter_mut().zip(t.data()) {
            *dst = src as f32;
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Box-Muller standard normal.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Ordered map of named parameters. Iteration order is the name order,
/// which keeps every serialization and update walk deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, p: Param) {
        self.map.insert(name.into(), p);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.map
            .get(name)
            .ok_or_else(|| Error::state(format!("missing parameter tensor {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::state(format!("missing parameter tensor {name:?}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.map.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count, for reporting.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|p| p.data.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};

    #[test]
    fn roundtrip_through_tensor_is_exact() {
        let mut rng = derive(1, Stream::Init);
        let p = Param::gaussian(3, 4, 0.02, &mut rng);
        let mut q = Param::zeros(3, 4);
        q.set_from_tensor(&p.to_tensor());
        assert_eq!(p.data, q.data);
    }

    #[test]
    fn store_iteration_is_name_ordered() {
        let mut s = ParamStore::new();
        s.insert("b", Param::zeros(1, 1));
        s.insert("a", Param::zeros(1, 1));
        s.insert("c", Param::zeros(1, 1));
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }

    #[test]
    fn missing_param_is_state_error() {
        let s = ParamStore::new();
        assert!(matches!(s.get("nope"), Err(Error::State(_))));
    }
}
