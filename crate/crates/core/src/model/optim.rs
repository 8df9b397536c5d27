//! AdamW with decoupled weight decay and per-parameter step counts.

use std::collections::BTreeMap;

use crate::numerics::{Gradients, Tensor2D};

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the joint gradient to this global L2 norm when exceeded.
    pub clip_norm: Option<f64>,
    state: BTreeMap<String, Moments>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: None,
            state: BTreeMap::new(),
        }
    }
}

impl AdamW {
    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    /// Steps taken for `name`.
    pub fn steps(&self, name: &str) -> i32 {
        self.state.get(name).map_or(0, |s| s.t)
    }

    /// Scale applied to a set of gradients by the clipping rule.
    pub fn clip_scale(&self, grads: &Gradients) -> f64 {
        match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .values()
                    .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        }
    }

    /// One update of `param` with gradient `grad * grad_scale`.
    pub fn update(&mut self, name: &str, param: &mut Tensor2D, grad: &Tensor2D, grad_scale: f64, lr: f64) {
        assert_eq!(param.shape(), grad.shape(), "AdamW shape mismatch for {name}");
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            t: 0,
        });
        st.t += 1;
        let bc1 = 1.0 - self.beta1.powi(st.t);
        let bc2 = 1.0 - self.beta2.powi(st.t);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            let g = g * grad_scale;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p *= decay;
            *p -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar AdamW written out longhand.
    fn scalar_reference(mut w: f64, lr: f64, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
        let (b1, b2, eps, wd) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let (mut m, mut v) = (0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = grad(w);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * wd * w;
            w -= lr * mh / (vh.sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn quadratic_probe_matches_scalar_reference() {
        // loss = (w - 3)^2
        let grad = |w: f64| 2.0 * (w - 3.0);
        let expected = scalar_reference(0.5, 0.1, 10, grad);
        let mut opt = AdamW::default();
        let mut p = Tensor2D::filled(1, 1, 0.5);
        for want in expected {
            let g = Tensor2D::filled(1, 1, grad(p.get(0, 0)));
            opt.update("w", &mut p, &g, 1.0, 0.1);
            assert!((p.get(0, 0) - want).abs() < 1e-12);
        }
        assert_eq!(opt.steps("w"), 10);
    }

    #[test]
    fn zero_learning_rate_is_exact_no_op() {
        let mut opt = AdamW::default();
        let mut p = Tensor2D::from_fn(2, 2, |i, j| i as f64 * 0.3 - j as f64 * 1.7);
        let before = p.clone();
        opt.update("w", &mut p, &Tensor2D::filled(2, 2, 5.0), 1.0, 0.0);
        assert_eq!(p, before);
    }
}
