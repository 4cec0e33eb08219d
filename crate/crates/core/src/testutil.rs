use crate::rng::Rng;
use crate::tensor::Tensor;

pub use crate::nn::param_grad_check;

pub fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}
