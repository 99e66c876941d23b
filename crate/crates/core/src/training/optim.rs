use crate::numerics::Tensor2;

/// Adam with decoupled weight decay and global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap; non-positive disables clipping.
    pub grad_clip: f64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor2], lr: f64, betas: (f64, f64), weight_decay: f64, grad_clip: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor2::zeros(p.rows(), p.cols())).collect();
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            grad_clip,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut [Tensor2], grads: &[Tensor2]) -> f64 {
        let norm = grads.iter().map(Tensor2::sum_sq).sum::<f64>().sqrt();
        let clip = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] -= self.lr * (update + self.weight_decay * p[i]);
            }
        }
        norm
    }
}
