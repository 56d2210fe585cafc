pub mod archive;
pub mod autograd;
pub mod error;
pub mod experiments;
pub mod haze;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod training;
pub mod util;
