pub mod audio;
pub mod dataset;
pub mod diff;
pub mod error;
pub mod gradsuite;
pub mod imaging;
pub mod losses;
pub mod mvnet;
pub mod stnets;
pub mod trainer;
pub mod video;

pub use error::{Error, Result};
