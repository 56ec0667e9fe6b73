//! Parameter traversal, Adam and the warm-up learning-rate schedule.

/// A set of named, flat trainable tensors.
///
/// Implementors must visit tensors in the same order in both methods, and a
/// gradient container of the same type must visit matching shapes.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.len());
        n
    }

    /// Named copies of every tensor, in visit order.
    fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, p| out.push((name.to_string(), p.to_vec())));
        out
    }
}

/// Adam with bias correction and the usual default decay constants.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    // moment estimates and a gradient scratch buffer, flattened in visit order
    first: Vec<f64>,
    second: Vec<f64>,
    grad: Vec<f64>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new(), grad: Vec::new() }
    }
}

impl Adam {
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.grad.clear();
        grads.visit(&mut |_, g| self.grad.extend_from_slice(g));
        if self.first.len() != self.grad.len() {
            self.first = vec![0.0; self.grad.len()];
            self.second = vec![0.0; self.grad.len()];
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut offset = 0;
        let (first, second, grad) = (&mut self.first, &mut self.second, &self.grad);
        params.visit_mut(&mut |name, p| {
            let end = offset + p.len();
            assert!(end <= grad.len(), "gradient shape mismatch for {name}");
            let moments = first[offset..end].iter_mut().zip(&mut second[offset..end]);
            for ((x, g), (m, v)) in p.iter_mut().zip(&grad[offset..end]).zip(moments) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
            offset = end;
        });
        assert_eq!(offset, grad.len(), "gradient and parameter sizes differ");
    }
}

/// Linear warm-up from zero to `base_lr` over `warmup_steps`, constant after.
#[derive(Clone, Copy, Debug)]
pub struct WarmupSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
}

impl WarmupSchedule {
    /// Learning rate for the zero-based optimisation step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.base_lr
        } else {
            self.base_lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        x: Vec<f64>,
    }

    impl Parameters for Quadratic {
        fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
            f("x", &self.x);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
            f("x", &mut self.x);
        }
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = Quadratic { x: vec![3.0, -2.0] };
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let g = Quadratic { x: p.x.iter().map(|x| 2.0 * x).collect() };
            opt.step(&mut p, &g, 0.01);
        }
        assert!(p.x.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Quadratic { x: vec![1.0] };
        let g = Quadratic { x: vec![123.0] };
        Adam::default().step(&mut p, &g, 0.1);
        assert!((p.x[0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        let s = WarmupSchedule { base_lr: 1e-4, warmup_steps: 4 };
        let lrs: Vec<f64> = (0..6).map(|i| s.lr(i)).collect();
        assert!((lrs[0] - 2.5e-5).abs() < 1e-18);
        assert!((lrs[3] - 1e-4).abs() < 1e-18);
        assert_eq!(lrs[4], lrs[5]);
        assert_eq!(WarmupSchedule { base_lr: 0.5, warmup_steps: 0 }.lr(0), 0.5);
    }
}
