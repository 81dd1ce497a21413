//! Masked-diffusion decoding simulator with approximate feature caching,
//! attention decay and entropy-guided unmasking.

pub mod cache;
pub mod cota;
pub mod decoder;
pub mod metrics;
pub mod model;
pub mod numerics;
