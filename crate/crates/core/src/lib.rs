pub mod cal;
pub mod error;
pub mod harness;
pub mod kaa;
pub mod model;
pub mod objectives;
pub mod synthdata;
pub mod tensorops;

pub use error::{Error, Result};
