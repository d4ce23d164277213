//! Hardware-constrained evolutionary architecture search for 1D-CNN traffic
//! classifiers: capture parsing, session preprocessing, cost model, search,
//! a CPU training engine and post-training quantization.

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod arch;
pub mod engine;
pub mod pcap;
pub mod quant;
pub mod report;
pub mod search;
pub mod session;
pub mod space;
pub mod synth;
