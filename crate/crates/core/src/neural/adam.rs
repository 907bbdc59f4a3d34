//! Adam with bias correction over a [`Weights`] set.

use super::config::OptimizerConfig;
use super::real::Real;
use super::weights::Weights;

#[derive(Debug, Clone)]
pub struct Adam<F> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    clip_norm: Option<f64>,
    step: i32,
    m: Weights<F>,
    v: Weights<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: &OptimizerConfig, like: &Weights<F>) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            clip_norm: cfg.clip_norm,
            step: 0,
            m: Weights::zeros(like.layout),
            v: Weights::zeros(like.layout),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update. Returns the global L2 norm of `grads` before any
    /// clipping.
    pub fn update(&mut self, params: &mut Weights<F>, grads: &Weights<F>) -> f64 {
        let norm = grads
            .slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| {
                let g = g.to_f64_lossless();
                g * g
            })
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let b1 = F::lit(self.beta1);
        let b2 = F::lit(self.beta2);
        let one = F::one();
        let lr_t = F::lit(self.lr / (1.0 - self.beta1.powi(self.step)));
        let v_corr = F::lit(1.0 / (1.0 - self.beta2.powi(self.step)));
        let eps = F::lit(self.epsilon);
        let scale = F::lit(scale);
        let mut ms = self.m.slices_mut();
        let mut vs = self.v.slices_mut();
        let gs = grads.slices();
        for (((p, m), v), g) in params.slices_mut().into_iter().zip(ms.iter_mut()).zip(vs.iter_mut()).zip(gs) {
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                p[i] -= lr_t * m[i] / ((v[i] * v_corr).sqrt() + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::config::ModelConfig;
    use crate::neural::weights::Layout;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = ModelConfig { cells: 2, embedding_dim: 2, ..Default::default() };
        let layout = Layout::new(&cfg, 3, 4);
        let mut w: Weights<f64> = Weights::zeros(layout);
        let mut g: Weights<f64> = Weights::zeros(layout);
        g.out_b[0] = 0.5;
        g.out_b[1] = -3.0;
        let opt_cfg = OptimizerConfig::default();
        let mut adam = Adam::new(&opt_cfg, &w);
        adam.update(&mut w, &g);
        assert!((w.out_b[0] + 0.001).abs() < 1e-9);
        assert!((w.out_b[1] - 0.001).abs() < 1e-9);
        assert_eq!(w.out_b[2], 0.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let cfg = ModelConfig { cells: 2, embedding_dim: 2, ..Default::default() };
        let layout = Layout::new(&cfg, 3, 4);
        let mut w: Weights<f64> = Weights::zeros(layout);
        let mut g: Weights<f64> = Weights::zeros(layout);
        g.out_b[0] = 30.0;
        g.out_b[1] = 40.0;
        let opt_cfg = OptimizerConfig { clip_norm: Some(1.0), ..Default::default() };
        let mut adam = Adam::new(&opt_cfg, &w);
        assert!((adam.update(&mut w, &g) - 50.0).abs() < 1e-12);
        assert_eq!(adam.steps_taken(), 1);
    }
}
