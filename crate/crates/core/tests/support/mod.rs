pub mod scalar;
pub mod sweeps;
