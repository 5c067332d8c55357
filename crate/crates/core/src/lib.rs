//! End-to-end toolchain for tiny neural networks on analog compute-in-memory
//! hardware: hardware-aware two-stage training, crossbar mapping, a calibrated
//! PCM noise simulator, and an analytic latency/energy/area model of a
//! layer-serial always-on accelerator.

pub mod converters;
pub mod error;
pub mod fixtures;
pub mod linalg;
pub mod mapper;
pub mod net;
pub mod pcm;
pub mod perf;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
