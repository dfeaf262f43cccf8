//! Adam optimizer over a flat parameter vector.

/// Adam with bias correction. Betas are fixed at (0.9, 0.999), eps 1e-8;
/// the learning rate is passed per step so schedules stay caller-side.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(param_len: usize) -> Self {
        Adam {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_bit_exact() {
        let mut p = vec![0.5, -1.25, 3.0];
        let snapshot = p.clone();
        let mut opt = Adam::new(3);
        opt.step(&mut p, &[1.0, -2.0, 0.3], 0.0);
        assert_eq!(p, snapshot);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize f(x) = (x - 3)^2 from x = 0
        let mut p = vec![0.0];
        let mut opt = Adam::new(1);
        for _ in 0..2000 {
            let g = 2.0 * (p[0] - 3.0);
            opt.step(&mut p, &[g], 0.01);
        }
        assert!((p[0] - 3.0).abs() < 1e-3, "{}", p[0]);
    }
}
