use serde::{Deserialize, Serialize};

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of `params` in place.
    ///
    /// # Panics
    /// If `params` and `grads` lengths differ from the state length.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter length changed");
        assert_eq!(grads.len(), self.m.len(), "adam: gradient length mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powf(self.t as f64);
        let bc2 = 1.0 - self.beta2.powf(self.t as f64);
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
    fn zero_gradient_is_a_fixed_point() {
        let mut a = Adam::new(3);
        let mut p = vec![0.1, -2.0, 5.0];
        for _ in 0..10 {
            a.step(&mut p, &[0.0; 3], 0.1);
        }
        assert_eq!(p, vec![0.1, -2.0, 5.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut a = Adam::new(3);
        let mut p = vec![0.0; 3];
        a.step(&mut p, &[3.0, -1e-3, 40.0], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-8);
        assert!((p[1] - 0.01).abs() < 1e-4);
        assert!((p[2] + 0.01).abs() < 1e-8);
    }

    #[test]
    fn quadratic_converges() {
        let mut a = Adam::new(1);
        let mut x = vec![1.5];
        for _ in 0..2000 {
            let g = [2.0 * x[0]];
            a.step(&mut x, &g, 1e-2);
        }
        assert!(x[0].abs() < 1e-3, "{}", x[0]);
        assert_eq!(a.steps(), 2000);
    }
}
