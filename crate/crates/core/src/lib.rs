pub mod curves;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod io;
pub mod motion;
pub mod optim;
pub mod projection;
pub mod rasterizer;
pub mod stage1;
pub mod trace;

pub use error::{Error, Result};
