pub mod autodiff;
pub mod error;
pub mod generator;
pub mod layout;
pub mod pipeline;
pub mod render;
pub mod style;

pub use error::{Error, Result};
