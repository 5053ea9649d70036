pub mod archive;
pub mod backbone;
pub mod error;
pub mod evalx;
pub mod explainer;
pub mod mvarch;
pub mod mvcore;
pub mod nn;
pub mod synthgen;
pub mod train;

pub use error::{MvError, Result};
