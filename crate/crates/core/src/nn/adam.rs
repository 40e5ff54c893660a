//! Adam optimizer over a [`ParamSet`].

use ndarray::ArrayD;

use super::params::{GradSet, ParamSet};
use crate::num::{real, Float};

#[derive(Debug, Clone)]
pub struct Adam<T: Float> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        Self {
            lr: real(lr),
            beta1: real(0.9),
            beta2: real(0.999),
            eps: real(1e-8),
            step: 0,
            m: params
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
            v: params
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradSet<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (one - self.beta1) * g;
                    *v = self.beta2 * *v + (one - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::normal_init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ps = ParamSet::<f64>::new();
        let id = ps.register("x", normal_init(&mut rng, &[8], 2.0));
        let mut opt = Adam::new(&ps, 0.05);
        let loss = |ps: &ParamSet<f64>| -> f64 { ps.get(id).iter().map(|v| v * v).sum() };
        let start = loss(&ps);
        for _ in 0..400 {
            let mut grads = ps.zero_grads();
            let g = grads.get_mut(id);
            for (gv, &pv) in g.iter_mut().zip(ps.get(id).iter()) {
                *gv = 2.0 * pv;
            }
            opt.step(&mut ps, &grads);
        }
        let end = loss(&ps);
        assert!(end < start * 1e-3, "start {start} end {end}");
    }

    #[test]
    fn adam_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let init = normal_init::<f64>(&mut rng, &[4], 1.0);
        let run = || {
            let mut ps = ParamSet::<f64>::new();
            let id = ps.register("x", init.clone());
            let mut opt = Adam::new(&ps, 0.01);
            for step in 0..20 {
                let mut grads = ps.zero_grads();
                let g = grads.get_mut(id);
                for (i, gv) in g.iter_mut().enumerate() {
                    *gv = (i as f64 + 1.0) * 0.1 * (step as f64 + 1.0).sin();
                }
                opt.step(&mut ps, &grads);
            }
            ps.get(id).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
