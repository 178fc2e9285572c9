//! Forward corruption and reverse Euler sampling on SE(3).

pub mod igso3;
pub mod reverse;
pub mod schedule;

pub use igso3::Igso3Table;
pub use reverse::{reverse_step, StepNoise};
pub use schedule::{gaussian_vec, project_zero_mean, HeatKernelConvention, NoiseSchedule};
