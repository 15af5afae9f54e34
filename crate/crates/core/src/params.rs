//! Named parameter traversal shared by optimisers, checkpoints and gradient checks.

use crate::rng::Rng;
use crate::tensor::GridTensor;

pub trait Parameterized {
    /// Visits every trainable tensor in a fixed order with a dotted name.
    fn visit(&self, f: &mut dyn FnMut(&str, &GridTensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut GridTensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| v.extend_from_slice(t.data()));
        v
    }

    /// Overwrites every parameter from a flat vector produced by [`flatten`](Self::flatten).
    fn load_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.visit_mut(&mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        });
        assert_eq!(at, flat.len(), "flat parameter vector length");
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.data_mut().fill(0.0));
        z
    }

    fn names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.visit(&mut |n, _| v.push(n.to_string()));
        v
    }
}

/// Gaussian tensor with standard deviation `std`.
pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> GridTensor {
    GridTensor::from_fn(shape, |_| std * rng.normal())
}
