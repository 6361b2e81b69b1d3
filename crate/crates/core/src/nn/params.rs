//! Named parameter tensors.
//!
//! Modules declare their parameters into a [`ParamLayout`] (names, shapes and
//! initializers, no storage), which is enough for parameter accounting. A
//! [`ParamStore`] materializes a layout with seeded values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-a, a)` with `a = gain * sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize, gain: f64 },
    /// `U(-bound, bound)`.
    Uniform { bound: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            rows,
            cols,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn total(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Scalars in parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(ParamSpec::numel)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    layout: ParamLayout,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    /// Draws every parameter from its initializer in declaration order.
    /// Values are drawn in `f64` and rounded, so `f32` and `f64` stores built
    /// from the same seed agree to `f32` precision.
    pub fn initialize(layout: ParamLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = layout
            .specs
            .iter()
            .map(|spec| {
                let bound = match spec.init {
                    Init::Zeros => return Tensor::zeros(spec.rows, spec.cols),
                    Init::Ones => return Tensor::filled(spec.rows, spec.cols, T::one()),
                    Init::Xavier { fan_in, fan_out, gain } => gain * (6.0 / (fan_in + fan_out) as f64).sqrt(),
                    Init::Uniform { bound } => bound,
                };
                Tensor::from_fn(spec.rows, spec.cols, |_, _| {
                    T::from_f64_lossy(rng.gen_range(-bound..=bound))
                })
            })
            .collect();
        Self { layout, values }
    }

    /// Store with every tensor set to zero.
    pub fn zeros(layout: ParamLayout) -> Self {
        let values = layout.specs.iter().map(|s| Tensor::zeros(s.rows, s.cols)).collect();
        Self { layout, values }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.layout.specs[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.layout.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn total(&self) -> usize {
        self.layout.total()
    }

    /// All parameters concatenated in declaration order, widened to `f64`.
    pub fn flatten(&self) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.as_f64()))
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total() {
            return Err(Error::Shape(format!(
                "parameter blob has {} values, model needs {}",
                flat.len(),
                self.total()
            )));
        }
        let mut off = 0;
        for t in &mut self.values {
            let n = t.len();
            for (d, &s) in t.data_mut().iter_mut().zip(&flat[off..off + n]) {
                *d = T::from_f64_lossy(s);
            }
            off += n;
        }
        Ok(())
    }

    /// Scalar at flat position `i` (declaration order).
    pub fn flat_get(&self, mut i: usize) -> T {
        for t in &self.values {
            if i < t.len() {
                return t.data()[i];
            }
            i -= t.len();
        }
        panic!("flat index out of range")
    }

    pub fn flat_set(&mut self, mut i: usize, v: T) {
        for t in &mut self.values {
            if i < t.len() {
                t.data_mut()[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("flat index out of range")
    }

    /// Flat position -> `(param name, offset within it)`.
    pub fn locate(&self, mut i: usize) -> (String, usize) {
        for (spec, t) in self.layout.specs.iter().zip(&self.values) {
            if i < t.len() {
                return (spec.name.clone(), i);
            }
            i -= t.len();
        }
        panic!("flat index out of range")
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            layout: self.layout.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> ParamLayout {
        let mut l = ParamLayout::new();
        l.declare("a.w", 3, 4, Init::Xavier { fan_in: 3, fan_out: 4, gain: 1.0 });
        l.declare("a.b", 1, 4, Init::Zeros);
        l.declare("n.g", 1, 4, Init::Ones);
        l
    }

    #[test]
    fn seeded_init_is_reproducible_and_bounded() {
        let a = ParamStore::<f64>::initialize(layout(), 9);
        assert_eq!(a, ParamStore::<f64>::initialize(layout(), 9));
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(a.values()[0].data().iter().all(|v| v.abs() <= bound));
        assert!(a.values()[1].data().iter().all(|&v| v == 0.0));
        assert!(a.values()[2].data().iter().all(|&v| v == 1.0));
        assert_eq!(a.total(), 20);
        assert_eq!(a.layout().count_prefix("a."), 16);
    }

    #[test]
    fn flatten_round_trip_and_flat_access() {
        let a = ParamStore::<f32>::initialize(layout(), 1);
        let mut b = ParamStore::<f32>::zeros(layout());
        b.load_flat(&a.flatten()).unwrap();
        assert_eq!(a, b);
        b.flat_set(13, 5.0);
        assert_eq!(b.flat_get(13), 5.0);
        assert_eq!(b.locate(13), ("a.b".to_string(), 1));
        assert!(b.load_flat(&[0.0; 3]).is_err());
    }
}
