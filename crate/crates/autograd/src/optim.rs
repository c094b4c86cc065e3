use crate::params::ParamStore;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let step_size: T = cast(self.lr * bc2.sqrt() / bc1);
        let (b1, b2, eps): (T, T, T) = (cast(self.beta1), cast(self.beta2), cast(self.eps * bc2.sqrt()));
        let one = T::one();
        for ((p, g), (m, v)) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                *pv -= step_size * *mv / (vv.sqrt() + eps);
            }
        }
    }
}

/// Cosine decay from `base` at step 0 to `base * final_frac` at the last
/// of `total` steps.
pub fn cosine_lr(base: f64, final_frac: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let p = step as f64 / (total - 1) as f64;
    base * (final_frac + (1.0 - final_frac) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.sq_norm().to_f64().unwrap_or(f64::INFINITY))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s: T = cast(max_norm / norm);
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(1e-3, 0.1, 0, 11), 1e-3);
        assert!((cosine_lr(1e-3, 0.1, 10, 11) - 1e-4).abs() < 1e-15);
        assert!((cosine_lr(1e-3, 0.1, 5, 11) - 0.55e-3).abs() < 1e-15);
        assert_eq!(cosine_lr(2.0, 0.0, 0, 1), 2.0);
        let lrs: Vec<f64> = (0..20).map(|s| cosine_lr(1.0, 0.05, s, 20)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
