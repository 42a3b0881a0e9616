//! Simulation testbed for a far-edge / edge / cloud face-recognition
//! pipeline: chunked transfers over two transport styles, a discrete-event
//! engine for reproducible timing, and a loopback TCP mode.

pub mod calibration;
pub mod chunkwire;
pub mod domain;
pub mod metrics;
pub mod netsim;
pub mod nodes;
pub mod presets;
pub mod transport;
pub mod workload;
