//! Helpers shared by unit tests.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::rng::SeedStream;
use crate::tensor::Tensor;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeedStream::new(seed).rng();
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Central finite-difference gradient of a scalar function of one tensor.
pub fn central_difference(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut grad = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad).unwrap()
}
