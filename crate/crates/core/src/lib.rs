pub mod covariance;
pub mod design;
pub mod error;
pub mod eval;
pub mod geo;
pub mod mcmc;
pub mod model;
pub mod nngp;
pub mod predict;
pub mod special;
pub mod stats;
pub mod transform;
