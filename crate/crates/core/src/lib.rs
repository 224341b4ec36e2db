pub mod autodiff;
pub mod numerics;
pub mod ph;
pub mod residuals;
pub mod simulator;
pub mod surrogate;
pub mod trainer;
