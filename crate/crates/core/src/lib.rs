pub mod altretrieval;
pub mod analysis;
pub mod error;
pub mod gmb;
pub mod io;
pub mod local;
pub mod nn;
pub mod pcl;
pub mod pipeline;
pub mod plot;
pub mod predictor;
pub mod series;
pub mod synthetic;

pub use error::{ErrorClass, PfrpError, Result};
