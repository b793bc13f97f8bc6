//! Training, attacking and certifying dense ReLU classifiers against
//! norm-bounded input perturbations.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`tape`]: dense arithmetic and a reverse-mode autodiff tape.
//! - [`network`]: the feed-forward ReLU classifier, its forward trace, masks and
//!   input Jacobian, plus the on-disk weight format.
//! - [`objectives`]: nominal, gradient-norm baseline and first-order robust
//!   (aRUB) training losses.
//! - [`robust_bound`]: the exact L1 robust upper bound (RUB), its training loss
//!   and sample certification.
//! - [`attacks`]: FGSM, FGM and PGD with exact Lp-ball projections.
//! - [`data`], [`trainer`], [`report`]: datasets, SGD with grid search, and
//!   result tables.
//!
//! All numeric code is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below are the double-precision instantiations used by the CLI.

pub mod attacks;
pub mod data;
pub mod error;
pub mod network;
pub mod objectives;
pub mod report;
pub mod rng;
pub mod robust_bound;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{Example, ForwardTrace, Layer, NetworkParams};
pub use objectives::{ObjectiveKind, RobustConfig};
pub use scalar::Real;
pub use tape::{NodeId, Tape};
pub use tensor::{Norm, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Network64 = NetworkParams<f64>;
pub type Network32 = NetworkParams<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;

#[cfg(test)]
pub(crate) mod test_support {
    use crate::network::NetworkParams;
    use crate::rng::SeededRng;

    /// Glorot-initialised network with random biases in `[-0.5, 0.5]`.
    pub fn random_net(widths: &[usize], seed: u64) -> NetworkParams<f64> {
        let mut net = NetworkParams::<f64>::init(widths, seed).unwrap();
        let mut rng = SeededRng::new(seed ^ 0xABCD);
        for l in net.layers_mut() {
            for b in l.bias.data_mut() {
                *b = rng.uniform(-0.5, 0.5);
            }
        }
        net
    }

    pub fn random_x(m: usize, seed: u64) -> Vec<f64> {
        let mut rng = SeededRng::new(seed);
        (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }
}
