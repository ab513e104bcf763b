//! Write-aware scheduling for ReRAM crossbar accelerators whose weights do
//! not all fit on chip at once.

pub mod banks;
pub mod config;
pub mod error;
pub mod mapping;
pub mod model;
pub mod replication;
pub mod report;
pub mod reuse;
pub mod schedule;
pub mod sim;
pub mod synth;

pub use config::{validate_config, AcceleratorConfig, CheckedConfig};
pub use error::{Error, Result};
pub use model::{load_network, LayerDescriptor, LayerKind, NetworkModel};
