//! Speech-feature-driven 3D facial animation without emotion or identity
//! labels.
//!
//! The crate is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`). Training and inference run in `f32`; the same networks
//! are instantiated in `f64` for finite-difference gradient checks. The
//! aliases below name the concrete instantiations.

pub mod ablation;
pub mod binio;
pub mod config;
pub mod corpus;
pub mod error;
pub mod features;
pub mod flame;
pub mod gradsuite;
pub mod hifb;
pub mod metrics;
pub mod motion;
pub mod numerics;
pub mod pipeline;
pub mod scalar;
pub mod train;
pub mod vqvae;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type ParamStore32 = numerics::ParamStore<f32>;
pub type ParamStore64 = numerics::ParamStore<f64>;

/// Seeded generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Deterministic generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mut r = Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
