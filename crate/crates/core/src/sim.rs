//! Timing and energy of a schedule.
//!
//! Instructions start as soon as their dependencies end. Main-memory fetches
//! additionally share one channel served in instruction order, each at full
//! bandwidth. Since every dependency points to a lower id, one pass in id
//! order yields every start and end time; the event list is then sorted by
//! timestamp for the timed trace.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{CheckedConfig, RowLatencyMode};
use crate::error::{Error, Result};
use crate::model::NetworkModel;
use crate::replication::compute_latency;
use crate::reuse::{CellDeltaMatrix, RowPulses};
use crate::schedule::{fetch_duration, InstrKind, Instruction, Payload, Schedule};

pub const SECONDS_PER_YEAR: f64 = 3.15576e7;

fn row_cost(p: &RowPulses, config: &CheckedConfig) -> u64 {
    (p.max_decrease as u64 + p.max_increase as u64) * config.pulse_latency
}

pub fn row_write_latency(deltas: &CellDeltaMatrix, row: usize, config: &CheckedConfig) -> Result<u64> {
    let p = deltas.row_pulses.get(row).ok_or(Error::OutOfRange {
        value: row as i64,
        max: deltas.rows as i64 - 1,
    })?;
    Ok(row_cost(p, config))
}

/// Rows are written one after another.
pub fn crossbar_write_latency(deltas: &CellDeltaMatrix, config: &CheckedConfig) -> u64 {
    deltas.row_pulses.iter().map(|p| row_cost(p, config)).sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Replays the schedule with compute taking no time.
    pub zero_compute: bool,
}

pub fn instruction_duration(ins: &Instruction, config: &CheckedConfig, options: &SimOptions) -> u64 {
    match &ins.payload {
        Payload::Fetch { bytes } => fetch_duration(*bytes, config),
        Payload::Write {
            rows, populated_rows, ..
        } => match config.row_latency {
            RowLatencyMode::Delta => rows.iter().map(|p| row_cost(p, config)).sum(),
            RowLatencyMode::WorstCase => *populated_rows as u64 * 2 * config.max_pulses_per_phase * config.pulse_latency,
        },
        Payload::Compute { windows, replicas, .. } if !options.zero_compute => {
            compute_latency(*windows, *replicas, config)
        }
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timing {
    pub start: Vec<u64>,
    pub end: Vec<u64>,
    pub makespan: u64,
}

pub fn timeline(schedule: &Schedule, config: &CheckedConfig, options: &SimOptions) -> Result<Timing> {
    let n = schedule.instructions.len();
    let mut start = vec![0u64; n];
    let mut end = vec![0u64; n];
    let mut channel_free = 0u64;
    for (i, ins) in schedule.instructions.iter().enumerate() {
        if ins.id != i {
            return Err(Error::Schedule(format!("instruction at position {i} has id {}", ins.id)));
        }
        let mut t = 0;
        for &d in &ins.deps {
            if d >= i {
                return Err(Error::Schedule(format!("instruction {i} depends on later instruction {d}")));
            }
            t = t.max(end[d]);
        }
        if let Some(&r) = ins.rows.iter().find(|&&r| r >= schedule.total_pe_rows) {
            return Err(Error::Schedule(format!("instruction {i} references unbound row {r}")));
        }
        let dur = instruction_duration(ins, config, options);
        if ins.kind == InstrKind::FetchDeltas {
            t = t.max(channel_free);
            channel_free = t + dur;
        }
        start[i] = t;
        end[i] = t + dur;
    }
    let makespan = end.iter().copied().max().unwrap_or(0);
    Ok(Timing { start, end, makespan })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub write_pulses: u64,
    pub energy_write: f64,
    pub energy_compute: f64,
    /// Leakage of the layer's enabled banks over the time they are on.
    pub energy_banks: f64,
    pub compute_cycles: u64,
    pub compute_start: u64,
    pub compute_end: u64,
    pub max_replicas: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub makespan: u64,
    pub energy_write: f64,
    pub energy_compute: f64,
    pub energy_static: f64,
    pub total_pulses: u64,
    pub changed_cells: u64,
    pub fetch_bytes: u64,
    /// Cycles during which some write and some compute are both running.
    pub overlap_cycles: u64,
    pub max_writes_per_cell: u64,
    pub write_histogram: Vec<u64>,
    pub layers: Vec<LayerMetrics>,
}

impl Metrics {
    pub fn energy_total(&self) -> f64 {
        self.energy_write + self.energy_compute + self.energy_static
    }
}

/// Measure of the union of half-open intervals.
fn union_intervals(mut v: Vec<(u64, u64)>) -> Vec<(u64, u64)> {
    v.retain(|(a, b)| b > a);
    v.sort_unstable();
    let mut out: Vec<(u64, u64)> = Vec::new();
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn intersection_measure(a: &[(u64, u64)], b: &[(u64, u64)]) -> u64 {
    let (mut i, mut j, mut total) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// PE-row exclusivity: every row is owned by one job at a time, from the
/// start of its first fetch until its release ends.
fn audit_rows(schedule: &Schedule, timing: &Timing) -> Result<()> {
    let mut spans: Vec<Vec<(u64, u64, usize)>> = vec![Vec::new(); schedule.total_pe_rows];
    let mut open: Vec<Option<(u64, usize)>> = vec![None; schedule.total_pe_rows];
    for ins in &schedule.instructions {
        let Some(job) = ins.job else { continue };
        for &r in &ins.rows {
            match ins.kind {
                InstrKind::FetchDeltas => {
                    if let Some((_, owner)) = open[r] {
                        if owner != job {
                            return Err(Error::Schedule(format!(
                                "row {r} written for job {job} while held by job {owner}"
                            )));
                        }
                    } else {
                        open[r] = Some((timing.start[ins.id], job));
                    }
                }
                InstrKind::Release => {
                    let (s, owner) = open[r]
                        .take()
                        .ok_or_else(|| Error::Schedule(format!("row {r} released while free")))?;
                    if owner != job {
                        return Err(Error::Schedule(format!("row {r} released by job {job}, held by {owner}")));
                    }
                    spans[r].push((s, timing.end[ins.id], job));
                }
                _ => {}
            }
        }
    }
    for (r, s) in spans.iter_mut().enumerate() {
        s.sort_unstable();
        if let Some(w) = s.windows(2).find(|w| w[1].0 < w[0].1) {
            return Err(Error::Schedule(format!(
                "row {r} held by jobs {} and {} at once",
                w[0].2, w[1].2
            )));
        }
    }
    Ok(())
}

fn audit_channel(schedule: &Schedule, timing: &Timing) -> Result<()> {
    let mut fetches: Vec<(u64, u64)> = schedule
        .instructions
        .iter()
        .filter(|i| i.kind == InstrKind::FetchDeltas)
        .map(|i| (timing.start[i.id], timing.end[i.id]))
        .collect();
    fetches.sort_unstable();
    if fetches.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(Error::Schedule("concurrent fetches exceed the memory bandwidth".into()));
    }
    Ok(())
}

fn audit_dependencies(schedule: &Schedule, timing: &Timing) -> Result<()> {
    for ins in &schedule.instructions {
        if let Some(&d) = ins.deps.iter().find(|&&d| timing.end[d] > timing.start[ins.id]) {
            return Err(Error::Schedule(format!("instruction {} starts before {d} ends", ins.id)));
        }
    }
    Ok(())
}

pub struct Simulation {
    pub metrics: Metrics,
    pub timing: Timing,
}

pub fn simulate(schedule: &Schedule, network: &NetworkModel, config: &CheckedConfig) -> Result<Metrics> {
    simulate_with(schedule, network, config, &SimOptions::default()).map(|s| s.metrics)
}

pub fn simulate_with(
    schedule: &Schedule,
    network: &NetworkModel,
    config: &CheckedConfig,
    options: &SimOptions,
) -> Result<Simulation> {
    let timing = timeline(schedule, config, options)?;
    audit_dependencies(schedule, &timing)?;
    audit_channel(schedule, &timing)?;
    audit_rows(schedule, &timing)?;

    let e = &config.energy;
    let mut layers: Vec<LayerMetrics> = network
        .descriptors()
        .map(|d| LayerMetrics {
            layer: d.id,
            write_pulses: 0,
            energy_write: 0.0,
            energy_compute: 0.0,
            energy_banks: 0.0,
            compute_cycles: 0,
            compute_start: u64::MAX,
            compute_end: 0,
            max_replicas: 1,
        })
        .collect();
    let layer_mut = |layers: &mut Vec<LayerMetrics>, l: usize| -> Result<usize> {
        if l < layers.len() {
            Ok(l)
        } else {
            Err(Error::Schedule(format!("instruction references unknown layer {l}")))
        }
    };

    let (mut total_pulses, mut changed_cells, mut fetch_bytes) = (0u64, 0u64, 0u64);
    let mut writes = Vec::new();
    let mut computes = Vec::new();
    let mut enables: Vec<(u64, usize, f64)> = Vec::new();
    for ins in &schedule.instructions {
        let l = layer_mut(&mut layers, ins.layer)?;
        let (s, t) = (timing.start[ins.id], timing.end[ins.id]);
        match &ins.payload {
            Payload::Fetch { bytes } => fetch_bytes += bytes,
            Payload::Write {
                pulses, changed_cells: c, ..
            } => {
                total_pulses += pulses;
                changed_cells += c;
                layers[l].write_pulses += pulses;
                writes.push((s, t));
            }
            Payload::Compute {
                windows,
                replicas,
                crossbars,
            } => {
                let lm = &mut layers[l];
                lm.energy_compute +=
                    (*crossbars as u64 * config.activation_bits as u64 * windows) as f64 * e.energy_per_crossbar_read;
                lm.compute_cycles += t - s;
                lm.compute_start = lm.compute_start.min(s);
                lm.compute_end = lm.compute_end.max(t);
                lm.max_replicas = lm.max_replicas.max(*replicas);
                computes.push((s, t));
            }
            Payload::Banks { leakage, .. } => enables.push((s, l, *leakage)),
            _ => {}
        }
    }
    let makespan = timing.makespan;
    let mut energy_static = e.base_leakage * makespan as f64;
    enables.sort_by_key(|&(t, l, _)| (t, l));
    for (i, &(t, l, leakage)) in enables.iter().enumerate() {
        let until = enables.get(i + 1).map_or(makespan, |n| n.0);
        let energy = leakage * (until - t) as f64;
        layers[l].energy_banks += energy;
        energy_static += energy;
    }
    for lm in &mut layers {
        lm.energy_write = lm.write_pulses as f64 * e.energy_per_pulse;
        if lm.compute_start == u64::MAX {
            lm.compute_start = 0;
        }
    }
    let energy_compute = layers.iter().map(|l| l.energy_compute).sum();
    let overlap_cycles = intersection_measure(&union_intervals(writes), &union_intervals(computes));
    let metrics = Metrics {
        makespan,
        energy_write: total_pulses as f64 * e.energy_per_pulse,
        energy_compute,
        energy_static,
        total_pulses,
        changed_cells,
        fetch_bytes,
        overlap_cycles,
        max_writes_per_cell: schedule.max_writes_per_cell() as u64,
        write_histogram: schedule.write_histogram.clone(),
        layers,
    };
    Ok(Simulation { metrics, timing })
}

/// Timestamped START/END events, ordered by time, then END before START,
/// then instruction id.
pub fn timed_trace(schedule: &Schedule, timing: &Timing) -> String {
    let mut events: Vec<(u64, u8, usize)> = Vec::with_capacity(2 * schedule.instructions.len());
    for ins in &schedule.instructions {
        events.push((timing.start[ins.id], 1, ins.id));
        events.push((timing.end[ins.id], 0, ins.id));
    }
    events.sort_unstable();
    let mut out = String::new();
    for (t, phase, id) in events {
        let ins = &schedule.instructions[id];
        let _ = writeln!(
            out,
            "{t} {} {id} {} layer={}",
            if phase == 1 { "START" } else { "END" },
            ins.kind,
            ins.layer
        );
    }
    out
}

/// Years until the most-written cell reaches `endurance_cycles`.
pub fn lifespan_estimate(max_writes_per_inference: u64, inferences_per_second: f64, endurance_cycles: f64) -> Result<f64> {
    if !(inferences_per_second > 0.0) || !inferences_per_second.is_finite() {
        return Err(Error::InvalidArgument("inferences per second must be positive".into()));
    }
    if !(endurance_cycles > 0.0) || !endurance_cycles.is_finite() {
        return Err(Error::InvalidArgument("endurance must be positive".into()));
    }
    if max_writes_per_inference == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(endurance_cycles / (max_writes_per_inference as f64 * inferences_per_second * SECONDS_PER_YEAR))
}
