//! File formats: tensor container, graph manifests, quantized models and
//! calibration sets.

pub mod blob;
pub mod calib;
pub mod graph;
pub mod quantized;
