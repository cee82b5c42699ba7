//! Shared numerical machinery: special functions, quadrature rules,
//! dense linear-algebra helpers, a small simplex optimizer and seeded
//! RNG stream derivation.

pub mod linalg;
pub mod optim;
pub mod quadrature;
pub mod rng;
pub mod special;
