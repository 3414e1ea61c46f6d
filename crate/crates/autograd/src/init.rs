use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Element;

/// Parameter initializers. All draws happen in f64 and are cast to the
/// working precision, so f32 and f64 instantiations of the same model see the
/// same underlying sample stream.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    UniformFanIn(usize),
    /// Gaussian with the given standard deviation.
    Normal(f64),
    Const(f64),
}

impl Init {
    pub fn build<E: Element>(self, shape: IxDyn, rng: &mut ChaCha8Rng) -> ArrayD<E> {
        match self {
            Init::Zeros => ArrayD::zeros(shape),
            Init::Ones => ArrayD::ones(shape),
            Init::Const(c) => ArrayD::from_elem(shape, E::from_f64(c)),
            Init::UniformFanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut out = ArrayD::<E>::zeros(shape);
                for v in out.iter_mut() {
                    let u: f64 = rng.random::<f64>() * 2.0 - 1.0;
                    *v = E::from_f64(u * bound);
                }
                out
            }
            Init::Normal(std) => {
                let mut out = ArrayD::<E>::zeros(shape);
                for v in out.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = E::from_f64(z * std);
                }
                out
            }
        }
    }
}

/// Fills an array with unit Gaussian draws in a deterministic element order.
pub fn randn<E: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<E> {
    let mut out = ArrayD::<E>::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = E::from_f64(z);
    }
    out
}
