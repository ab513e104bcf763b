//! Accelerator configuration.
//!
//! Every field has a default taken from the reference accelerator (96 PEs of
//! 6x4 APUs, 128x128 crossbars of 2-bit cells, 1 GHz). A config file only
//! needs to name the fields it overrides.

use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const KIB: u64 = 1024;

/// How the simulator charges a crossbar row write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RowLatencyMode {
    /// Row latency follows the largest decrease and increase pulse counts of
    /// the row's deltas.
    #[default]
    Delta,
    /// Every row with at least one nonzero delta costs the full two-phase
    /// worst case.
    WorstCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    /// Joules per programming pulse.
    pub energy_per_pulse: f64,
    /// Joules per crossbar per bit-iteration per window.
    pub energy_per_crossbar_read: f64,
    /// Fixed part of a Gbuffer bank's leakage, joules/cycle.
    pub bank_leakage_fixed: f64,
    /// Capacity-proportional part of a bank's leakage, joules/cycle per KiB.
    pub bank_leakage_per_kib: f64,
    /// Leakage of everything outside the Gbuffer, joules/cycle.
    pub base_leakage: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            energy_per_pulse: 1.0e-11,
            energy_per_crossbar_read: 1.0e-11,
            bank_leakage_fixed: 1.0e-12,
            bank_leakage_per_kib: 5.0e-14,
            base_leakage: 5.0e-11,
        }
    }
}

impl EnergyParams {
    pub fn bank_leakage(&self, capacity: u64) -> f64 {
        self.bank_leakage_fixed + self.bank_leakage_per_kib * (capacity as f64 / KIB as f64)
    }
}

/// One bank entry as written in a config file. The leakage falls back to the
/// affine table in [`EnergyParams`] when omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankEntry {
    pub capacity: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leakage: Option<f64>,
}

impl BankEntry {
    fn sized(capacity: u64) -> Self {
        BankEntry {
            capacity,
            leakage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSpec {
    pub id: usize,
    /// Bytes.
    pub capacity: u64,
    /// Joules/cycle while enabled.
    pub leakage: f64,
}

pub fn heterogeneous_inventory() -> Vec<BankEntry> {
    [1, 1, 2, 4, 64, 128, 256, 512, 1024, 2048]
        .iter()
        .map(|&k| BankEntry::sized(k * KIB))
        .collect()
}

pub fn homogeneous_inventory() -> Vec<BankEntry> {
    vec![BankEntry::sized(256 * KIB); 15]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceleratorConfig {
    pub num_pes: usize,
    pub apu_rows_per_pe: usize,
    pub apu_cols_per_pe: usize,
    pub crossbar_rows: usize,
    pub crossbar_cols: usize,
    pub bits_per_cell: u32,
    pub weight_bits: u32,
    pub activation_bits: u32,
    /// Cycles per bit-iteration of one window.
    pub crossbar_compute_latency: u64,
    /// Cycles per programming pulse.
    pub pulse_latency: u64,
    pub frequency_hz: f64,
    /// Main-memory bandwidth, bytes/cycle.
    pub mm_bandwidth: f64,
    pub row_latency: RowLatencyMode,
    /// Heterogeneous Gbuffer banks used when adaptive bank selection is on.
    pub bank_inventory: Vec<BankEntry>,
    /// Homogeneous Gbuffer banks used otherwise.
    pub baseline_inventory: Vec<BankEntry>,
    pub energy: EnergyParams,
}

impl Default for AcceleratorConfig {
    fn default() -> Self {
        AcceleratorConfig {
            num_pes: 96,
            apu_rows_per_pe: 6,
            apu_cols_per_pe: 4,
            crossbar_rows: 128,
            crossbar_cols: 128,
            bits_per_cell: 2,
            weight_bits: 8,
            activation_bits: 8,
            crossbar_compute_latency: 96,
            pulse_latency: 1000,
            frequency_hz: 1.0e9,
            // LPDDR4 single channel, 19.2 GB/s at 1 GHz.
            mm_bandwidth: 19.2,
            row_latency: RowLatencyMode::Delta,
            bank_inventory: heterogeneous_inventory(),
            baseline_inventory: homogeneous_inventory(),
            energy: EnergyParams::default(),
        }
    }
}

impl AcceleratorConfig {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|message| Error::Parse {
            path: path.to_owned(),
            message,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// A validated configuration with its derived constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckedConfig {
    config: AcceleratorConfig,
    pub cells_per_weight: usize,
    pub max_pulses_per_phase: u64,
    /// Worst-case latency of writing a full crossbar, cycles.
    pub crossbar_write_latency: u64,
    pub total_pe_rows: usize,
    pub bank_inventory: Vec<BankSpec>,
    pub baseline_inventory: Vec<BankSpec>,
}

impl Deref for CheckedConfig {
    type Target = AcceleratorConfig;

    fn deref(&self) -> &AcceleratorConfig {
        &self.config
    }
}

impl CheckedConfig {
    pub fn config(&self) -> &AcceleratorConfig {
        &self.config
    }

    /// Number of distinct cell levels.
    pub fn cell_levels(&self) -> u32 {
        1 << self.bits_per_cell
    }

    pub fn max_weight(&self) -> u32 {
        (1u32 << self.weight_bits) - 1
    }

    pub fn inventory(&self, heterogeneous: bool) -> &[BankSpec] {
        if heterogeneous {
            &self.bank_inventory
        } else {
            &self.baseline_inventory
        }
    }
}

impl Default for CheckedConfig {
    fn default() -> Self {
        validate_config(AcceleratorConfig::default()).expect("defaults are valid")
    }
}

fn resolve_inventory(
    field: &'static str,
    entries: &[BankEntry],
    energy: &EnergyParams,
) -> Result<Vec<BankSpec>> {
    let mut banks = Vec::with_capacity(entries.len());
    for (id, entry) in entries.iter().enumerate() {
        if entry.capacity == 0 {
            return Err(Error::config(field, format!("bank {id} has zero capacity")));
        }
        let leakage = entry
            .leakage
            .unwrap_or_else(|| energy.bank_leakage(entry.capacity));
        if !(leakage > 0.0) || !leakage.is_finite() {
            return Err(Error::config(field, format!("bank {id} leakage must be positive")));
        }
        banks.push(BankSpec {
            id,
            capacity: entry.capacity,
            leakage,
        });
    }
    let mut by_capacity: Vec<&BankSpec> = banks.iter().collect();
    by_capacity.sort_by_key(|b| b.capacity);
    if by_capacity
        .windows(2)
        .any(|w| w[1].capacity > w[0].capacity && w[1].leakage < w[0].leakage)
    {
        log::warn!("{field}: leakage is not nondecreasing in capacity");
    }
    Ok(banks)
}

pub fn validate_config(config: AcceleratorConfig) -> Result<CheckedConfig> {
    macro_rules! positive {
        ($field:ident) => {
            if config.$field == 0 {
                return Err(Error::config(stringify!($field), "must be positive"));
            }
        };
    }
    positive!(num_pes);
    positive!(apu_rows_per_pe);
    positive!(apu_cols_per_pe);
    positive!(crossbar_rows);
    positive!(crossbar_cols);
    positive!(bits_per_cell);
    positive!(weight_bits);
    positive!(activation_bits);
    positive!(crossbar_compute_latency);
    positive!(pulse_latency);

    if config.weight_bits > 8 {
        return Err(Error::config("weight_bits", "at most 8 bits are supported"));
    }
    if config.bits_per_cell > 4 {
        return Err(Error::config("bits_per_cell", "at most 4 bits per cell are supported"));
    }
    if !config.weight_bits.is_multiple_of(config.bits_per_cell) {
        return Err(Error::config(
            "bits_per_cell",
            format!(
                "weight_bits {} is not divisible by bits_per_cell {}",
                config.weight_bits, config.bits_per_cell
            ),
        ));
    }
    let cells_per_weight = (config.weight_bits / config.bits_per_cell) as usize;
    if cells_per_weight > config.crossbar_cols {
        return Err(Error::config(
            "crossbar_cols",
            "a crossbar row must hold at least one weight",
        ));
    }
    if !(config.mm_bandwidth > 0.0) || !config.mm_bandwidth.is_finite() {
        return Err(Error::config("mm_bandwidth", "must be positive"));
    }
    if !(config.frequency_hz > 0.0) || !config.frequency_hz.is_finite() {
        return Err(Error::config("frequency_hz", "must be positive"));
    }
    let e = &config.energy;
    for (field, value) in [
        ("energy.energy_per_pulse", e.energy_per_pulse),
        ("energy.energy_per_crossbar_read", e.energy_per_crossbar_read),
        ("energy.bank_leakage_fixed", e.bank_leakage_fixed),
        ("energy.bank_leakage_per_kib", e.bank_leakage_per_kib),
        ("energy.base_leakage", e.base_leakage),
    ] {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::config(field, "must be nonnegative"));
        }
    }

    let bank_inventory = resolve_inventory("bank_inventory", &config.bank_inventory, e)?;
    let baseline_inventory = resolve_inventory("baseline_inventory", &config.baseline_inventory, e)?;

    let max_pulses_per_phase = (1u64 << config.bits_per_cell) - 1;
    let crossbar_write_latency =
        config.crossbar_rows as u64 * 2 * max_pulses_per_phase * config.pulse_latency;
    let total_pe_rows = config.num_pes * config.apu_rows_per_pe;

    Ok(CheckedConfig {
        config,
        cells_per_weight,
        max_pulses_per_phase,
        crossbar_write_latency,
        total_pe_rows,
        bank_inventory,
        baseline_inventory,
    })
}
