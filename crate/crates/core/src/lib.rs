//! Trace-driven, cycle-level multicore out-of-order CPU simulator.
//!
//! The crate models a Sandy Bridge-class machine: a superscalar out-of-order
//! pipeline per core (rename, issue window, reorder buffer, load/store
//! queues, TAGE branch prediction), private write-through L1 and write-back
//! L2 caches kept coherent with a snooping MESI protocol over a shared bus,
//! a shared L3, and a flat-latency main memory. Simulations are
//! cycle-stepped and bit-deterministic for fixed inputs.
//!
//! A validation harness compares simulated cycle counts against reference
//! hardware measurements using absolute percentage error.

pub mod config;
pub mod engine;
pub mod interconnect;
pub mod memhier;
pub mod pipeline;
pub mod predictor;
pub mod report;
pub mod trace;
pub mod util;
pub mod validate;

pub use config::{default_sandybridge, parse_config, validate_config, MachineConfig};
pub use engine::{simulate, simulate_with_options, SimOptions, SimReport};
pub use pipeline::{run_core, CoreStats};
pub use trace::{gen_microtrace, GenParams, MicroOp, TracePattern, TraceStream};
