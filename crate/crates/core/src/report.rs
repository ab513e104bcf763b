//! Run reports, comparison tables and weight-reuse analysis.
//!
//! Reports serialize to TOML and parse back to equal values. Tables and CSV
//! use fixed formatting so the same inputs always give the same bytes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::CheckedConfig;
use crate::error::{Error, Result};
use crate::model::NetworkModel;
use crate::reuse::{cell_distribution, skipping_ratio, CenterScore, LayerShift};
use crate::schedule::{shift_trial, Schedule, ScheduleOptions, Variant};
use crate::sim::Metrics;

/// `value / base`, with `0 / 0 = 1`.
fn ratio(value: f64, base: f64) -> f64 {
    if value == base {
        1.0
    } else {
        value / base
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub baseline: String,
    /// Baseline makespan over this run's makespan.
    pub speedup: f64,
    pub makespan: f64,
    pub energy_total: f64,
    pub energy_write: f64,
    pub energy_compute: f64,
    pub energy_static: f64,
    pub pulses: f64,
}

impl Ratios {
    pub fn between(metrics: &Metrics, baseline_label: &str, baseline: &Metrics) -> Self {
        Ratios {
            baseline: baseline_label.to_string(),
            speedup: ratio(baseline.makespan as f64, metrics.makespan as f64),
            makespan: ratio(metrics.makespan as f64, baseline.makespan as f64),
            energy_total: ratio(metrics.energy_total(), baseline.energy_total()),
            energy_write: ratio(metrics.energy_write, baseline.energy_write),
            energy_compute: ratio(metrics.energy_compute, baseline.energy_compute),
            energy_static: ratio(metrics.energy_static, baseline.energy_static),
            pulses: ratio(metrics.total_pulses as f64, baseline.total_pulses as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub variant: Variant,
    pub network: String,
    pub planner: String,
    /// Center applied by weight shifting, if any.
    pub shift_center: Option<u32>,
    pub ratios: Ratios,
    pub metrics: Metrics,
}

impl RunReport {
    pub fn new(variant: Variant, network: &NetworkModel, schedule: &Schedule, metrics: Metrics) -> Self {
        let label = schedule.label.clone();
        let ratios = Ratios::between(&metrics, &label, &metrics);
        RunReport {
            label,
            variant,
            network: network.name.clone(),
            planner: schedule.planner.clone(),
            shift_center: schedule.shift.center,
            ratios,
            metrics,
        }
    }

    pub fn normalize_to(&mut self, baseline: &RunReport) {
        self.ratios = Ratios::between(&self.metrics, &baseline.label, &baseline.metrics);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run report serializes")
    }

    /// Header plus this run's row, in the [`Comparison::to_csv`] layout.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        self.csv_row(&mut out);
        out
    }

    fn csv_row(&self, out: &mut String) {
        let m = &self.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{:e},{:e},{:e},{:e},{},{},{},{},{:.6},{:.6},{:.6}",
            self.label,
            self.variant.flag(),
            m.makespan,
            m.energy_write,
            m.energy_compute,
            m.energy_static,
            m.energy_total(),
            m.total_pulses,
            m.changed_cells,
            m.overlap_cycles,
            m.max_writes_per_cell,
            self.ratios.speedup,
            self.ratios.energy_total,
            self.ratios.pulses
        );
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

const CSV_HEADER: &str = "label,variant,makespan,energy_write,energy_compute,energy_static,energy_total,\
total_pulses,changed_cells,overlap_cycles,max_writes_per_cell,speedup,energy_ratio,pulse_ratio";

/// Runs normalized to a common baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub runs: Vec<RunReport>,
}

impl Comparison {
    /// Normalizes every run to `runs[baseline]`.
    pub fn new(mut runs: Vec<RunReport>, baseline: usize) -> Result<Self> {
        if runs.len() < 2 {
            return Err(Error::InvalidArgument("a comparison needs at least two runs".into()));
        }
        let base = runs
            .get(baseline)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("baseline index {baseline} out of range")))?;
        for run in &mut runs {
            run.normalize_to(&base);
        }
        Ok(Comparison {
            baseline: base.label,
            runs,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("comparison serializes")
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.runs {
            r.csv_row(&mut out);
        }
        out
    }

    /// Aligned text table, one row per run.
    pub fn to_table(&self) -> String {
        let header = [
            "config", "makespan", "E_write", "E_compute", "E_static", "E_total", "pulses", "speedup", "energy",
            "pulse",
        ];
        let rows: Vec<[String; 10]> = self
            .runs
            .iter()
            .map(|r| {
                let m = &r.metrics;
                [
                    r.label.clone(),
                    m.makespan.to_string(),
                    format!("{:.4e}", m.energy_write),
                    format!("{:.4e}", m.energy_compute),
                    format!("{:.4e}", m.energy_static),
                    format!("{:.4e}", m.energy_total()),
                    m.total_pulses.to_string(),
                    format!("{:.3}", r.ratios.speedup),
                    format!("{:.3}", r.ratios.energy_total),
                    format!("{:.3}", r.ratios.pulses),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "# normalized to {}", self.baseline);
        let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
            let parts: Vec<String> = cells
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  "));
        };
        line(&mut out, &mut header.iter().copied());
        for row in &rows {
            line(&mut out, &mut row.iter().map(String::as_str));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReuse {
    pub from: usize,
    pub to: usize,
    /// Skipping ratio per cell position, least significant first.
    pub skipping: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReuseReport {
    pub network: String,
    pub clip_threshold: f64,
    /// Center picked by skipping ratio.
    pub selected: Option<u32>,
    /// Whether the selected center was kept after the pulse comparison.
    pub applied: bool,
    pub fallback: bool,
    pub pulses_without_shift: u64,
    /// Pulses with the selected center, whether or not it was kept.
    pub pulses_with_shift: u64,
    /// Pulses of the schedule actually produced.
    pub pulses_final: u64,
    pub note: Option<String>,
    pub centers: Vec<CenterScore>,
    pub layers: Vec<LayerShift>,
    /// Per consecutive layer pair, with the selected center applied.
    pub pairs: Vec<PairReuse>,
}

impl ReuseReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("reuse report serializes")
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "network {}", self.network);
        if let Some(note) = &self.note {
            let _ = writeln!(out, "note {note}");
        }
        let _ = writeln!(
            out,
            "selected {} applied {} fallback {}",
            self.selected.map_or("none".to_string(), |c| c.to_string()),
            self.applied,
            self.fallback
        );
        let _ = writeln!(
            out,
            "pulses without_shift {} with_shift {} final {}",
            self.pulses_without_shift, self.pulses_with_shift, self.pulses_final
        );
        if !self.centers.is_empty() {
            let _ = writeln!(out, "\n{:>6}  {:>9}  {:>10}  {:>10}  {:>7}", "center", "skipping", "worst_clip", "total_clip", "admit");
            for c in &self.centers {
                let _ = writeln!(
                    out,
                    "{:>6}  {:>9.6}  {:>10.6}  {:>10.6}  {:>7}",
                    c.center, c.skipping_ratio, c.worst_clip_fraction, c.total_clip_fraction, c.admissible
                );
            }
        }
        let _ = writeln!(out, "\n{:>5}  {:>6}  {:>9}  {:>9}", "layer", "offset", "clip", "zero_pt");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:>5}  {:>6}  {:>9.6}  {:>9}",
                l.layer, l.offset, l.clip_fraction, l.adjusted_zero_point
            );
        }
        if !self.pairs.is_empty() {
            let _ = writeln!(out, "\n{:>4}  skipping by cell (lsb first)", "pair");
            for p in &self.pairs {
                let cells: Vec<String> = p.skipping.iter().map(|r| format!("{r:.6}")).collect();
                let _ = writeln!(out, "{:>4}  {}", format!("{}-{}", p.from, p.to), cells.join(" "));
            }
        }
        out
    }
}

/// Runs the weight-shift selection and the pulse comparison for `options`
/// (replication and bank settings are taken from it; shifting is forced on).
pub fn analyze_reuse(network: &NetworkModel, config: &CheckedConfig, options: &ScheduleOptions) -> Result<ReuseReport> {
    let trial = shift_trial(network, config, options)?;
    let without = trial.unshifted.total_pulses();
    let with = trial.shifted.as_ref().map_or(without, Schedule::total_pulses);
    let plan = trial.plan.clone();
    let schedule = trial.resolve();
    let shifted_net = plan.apply(network);
    let dists = shifted_net
        .layers
        .iter()
        .map(|l| cell_distribution(&l.weights, config))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for (i, w) in dists.windows(2).enumerate() {
        let skipping = (1..=w[0].positions())
            .map(|p| skipping_ratio(&w[0], &w[1], p))
            .collect::<Result<Vec<_>>>()?;
        pairs.push(PairReuse {
            from: i,
            to: i + 1,
            skipping,
        });
    }
    Ok(ReuseReport {
        network: network.name.clone(),
        clip_threshold: options.clip_threshold,
        selected: plan.center,
        applied: schedule.shift.center.is_some(),
        fallback: plan.fallback,
        pulses_without_shift: without,
        pulses_with_shift: with,
        pulses_final: schedule.total_pulses(),
        note: (network.len() < 2).then(|| "no overwrite pairs".to_string()),
        centers: plan.candidates,
        layers: plan.layers,
        pairs,
    })
}
