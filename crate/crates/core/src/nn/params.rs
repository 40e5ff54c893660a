//! Flat parameter storage shared by the network layers.
//!
//! Layers hold [`ParamId`] handles into a [`ParamSet`]; gradients live in a
//! parallel [`GradSet`] with identical shapes. Keeping tensors in one arena
//! makes optimizer steps, EMA tracking and checkpointing uniform.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::num::{real, Float};

/// Handle of one parameter tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter tensors of one model.
#[derive(Debug, Clone)]
pub struct ParamSet<T: Float> {
    pub tensors: Vec<ArrayD<T>>,
    pub names: Vec<String>,
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: ArrayD<T>) -> ParamId {
        self.tensors.push(tensor);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.tensors[id.0]
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&self) -> GradSet<T> {
        GradSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    /// Blend `source` into `self`: `self = decay*self + (1-decay)*source`.
    ///
    /// Shapes must match; callers keep target and source architecturally
    /// identical.
    pub fn ema_from(&mut self, source: &ParamSet<T>, decay: T) {
        let one_minus = T::one() - decay;
        for (dst, src) in self.tensors.iter_mut().zip(&source.tensors) {
            dst.zip_mut_with(src, |d, &s| *d = *d * decay + s * one_minus);
        }
    }
}

impl<T: Float> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient tensors aligned index-for-index with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradSet<T: Float> {
    pub tensors: Vec<ArrayD<T>>,
}

impl<T: Float> GradSet<T> {
    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.tensors[id.0]
    }

    /// Elementwise accumulate another gradient set.
    pub fn add_assign(&mut self, other: &GradSet<T>) {
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.zip_mut_with(src, |d, &s| *d += s);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors.iter_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gaussian init with the given standard deviation.
pub fn normal_init<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    let mut out = ArrayD::<T>::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        let z: f64 = f64::standard_normal(rng);
        *v = real::<T>(z * std);
    }
    out
}

pub fn zeros_init<T: Float>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones_init<T: Float>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ema_matches_direct_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut target = ParamSet::<f64>::new();
        let id = target.register("w", normal_init(&mut rng, &[4, 3], 1.0));
        let mut expected: Vec<f64> = target.get(id).iter().copied().collect();

        let decay = 0.9;
        for step in 0..50 {
            let mut source = ParamSet::<f64>::new();
            source.register("w", normal_init(&mut rng, &[4, 3], 1.0 + step as f64 * 0.01));
            for (e, s) in expected.iter_mut().zip(source.get(ParamId(0)).iter()) {
                *e = *e * decay + s * (1.0 - decay);
            }
            target.ema_from(&source, decay);
        }
        for (got, want) in target.get(id).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn grads_align_with_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::<f32>::new();
        ps.register("a", normal_init(&mut rng, &[2, 2], 0.1));
        ps.register("b", zeros_init(&[5]));
        let mut g = ps.zero_grads();
        assert_eq!(g.tensors.len(), 2);
        assert_eq!(g.tensors[1].len(), 5);
        g.get_mut(ParamId(0))[[0, 0]] = 1.0;
        let other = g.clone();
        g.add_assign(&other);
        assert_eq!(g.tensors[0][[0, 0]], 2.0);
        g.scale(0.5);
        assert_eq!(g.tensors[0][[0, 0]], 1.0);
        assert!(g.is_finite());
    }
}
