//! Elliptical distributions: generator kernels, 1-d transforms, sampling and rectangle probabilities.

pub mod generator;
pub mod mixing;
pub mod mvn;
pub mod qmc;
pub mod special;

pub use generator::{gamma_quantile, Generator, Mixing};
pub use mvn::{log_density, rectangle_prob, sample, submatrix, EllipticalMV, RectProb};
pub use mixing::mixing_nodes;
