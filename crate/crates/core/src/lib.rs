pub mod autodiff;
pub mod bench;
pub mod config;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod mgda;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod schema;
pub mod seed;
pub mod split;
pub mod trainer;

pub use error::{Error, Result};
