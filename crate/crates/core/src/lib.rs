pub mod diagnostics;
pub mod dpf;
pub mod gaussian;
pub mod kalman;
pub mod mcmc;
pub mod noise;
pub mod params;
pub mod ssm;
pub mod tolerances;
