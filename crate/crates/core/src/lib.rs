//! Personalized retrieval tokens.
//!
//! A small mapping network projects image embeddings from a frozen
//! joint-embedding encoder pair into the text encoder's token-embedding
//! space. Fine-tuned on a few template images of one object instance, it
//! yields a continuous token that can be dropped into free-form text queries
//! to retrieve images and videos of that instance.
//!
//! The core is generic over the scalar type; [`f64`] aliases are exported at
//! the crate root and [`f32`] aliases live in [`single`].

pub mod caption;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod localize;
pub mod objectives;
pub mod pimap;
pub mod retrieval;
pub mod scalar;
pub mod seed;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Embedding = encoder::Embedding<f64>;
pub type TokenSequence = encoder::TokenSequence<f64>;
pub type PiMapParams = pimap::PiMapParams<f64>;
pub type ToyEncoder = world::ToyEncoder<f64>;
pub type Batch = objectives::Batch<f64>;

/// Single-precision aliases.
pub mod single {
    pub type Embedding = crate::encoder::Embedding<f32>;
    pub type TokenSequence = crate::encoder::TokenSequence<f32>;
    pub type PiMapParams = crate::pimap::PiMapParams<f32>;
    pub type ToyEncoder = crate::world::ToyEncoder<f32>;
    pub type Batch = crate::objectives::Batch<f32>;
}
