//! Adam with per-attribute learning rates over the primitive soup.
//!
//! One `Adam` instance counts training steps; moments live per primitive so
//! densification can rebuild them alongside the primitive array.

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moment {
    pub m: f64,
    pub v: f64,
}

/// Moment state for every learnable field of one primitive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrimMoments {
    pub position: [Moment; 3],
    pub z: Moment,
    pub log_scale: [Moment; 3],
    pub rotation: [Moment; 4],
    pub opacity: Moment,
    pub sh: Vec<[Moment; 3]>,
}

impl PrimMoments {
    pub fn new(sh_coeffs: usize) -> Self {
        Self {
            sh: vec![[Moment::default(); 3]; sh_coeffs],
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub params: AdamParams,
    t: u64,
    bias1: f64,
    bias2: f64,
}

impl Adam {
    pub fn new(params: AdamParams) -> Self {
        Self {
            params,
            t: 0,
            bias1: 1.0,
            bias2: 1.0,
        }
    }

    /// Advance the step counter; call once per training iteration before any
    /// `update` calls.
    pub fn begin_step(&mut self) {
        self.t += 1;
        self.bias1 = 1.0 - self.params.beta1.powi(self.t as i32);
        self.bias2 = 1.0 - self.params.beta2.powi(self.t as i32);
    }

    #[inline]
    pub fn update(&self, lr: f64, param: &mut f64, grad: f64, moment: &mut Moment) {
        let p = &self.params;
        moment.m = p.beta1 * moment.m + (1.0 - p.beta1) * grad;
        moment.v = p.beta2 * moment.v + (1.0 - p.beta2) * grad * grad;
        let m_hat = moment.m / self.bias1;
        let v_hat = moment.v / self.bias2;
        *param -= lr * m_hat / (v_hat.sqrt() + p.epsilon);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction, the very first Adam step is ~lr * sign(g).
        let mut adam = Adam::new(AdamParams::default());
        adam.begin_step();
        let mut p = 1.0;
        let mut mom = Moment::default();
        adam.update(0.01, &mut p, 3.7, &mut mom);
        assert_relative_eq!(p, 1.0 - 0.01, epsilon = 1e-10);
    }

    #[test]
    fn zero_gradient_with_fresh_state_is_a_no_op() {
        let mut adam = Adam::new(AdamParams::default());
        adam.begin_step();
        let mut p = 2.5;
        let mut mom = Moment::default();
        adam.update(0.1, &mut p, 0.0, &mut mom);
        assert_eq!(p, 2.5);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut adam = Adam::new(AdamParams::default());
        let mut p = 5.0f64;
        let mut mom = Moment::default();
        for _ in 0..2000 {
            adam.begin_step();
            let grad = 2.0 * (p - 1.5);
            adam.update(0.05, &mut p, grad, &mut mom);
        }
        assert!((p - 1.5).abs() < 1e-3, "p = {p}");
    }
}
