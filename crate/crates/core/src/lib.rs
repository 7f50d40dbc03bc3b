pub mod error;
pub mod fusion;
pub mod harness;
pub mod imaging;
pub mod losses;
pub mod maskgen;
pub mod mattingnet;
pub mod metrics;

pub use error::{MattingError, Result};
