//! Instruction streams for the naive and ARAS schedulers.
//!
//! A layer is split into jobs: one per layer, or several segments when the
//! layer needs more PE rows than the chip has. Each job consists of units,
//! one per (vertical slice, horizontal group), and each unit occupies one PE
//! row. Jobs compute strictly in network order. Writing is planned at time
//! zero and again after every RELEASE, by a [`Planner`] deciding how many
//! rows of which upcoming jobs to write, and with how many replicas.
//!
//! The scheduler also tracks the cell image of every physical crossbar, so
//! each WRITE_CROSSBAR carries the exact pulses needed to move from the
//! previous occupant's levels to the new ones.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::banks::{plan_banks, LayerBanks};
use crate::config::CheckedConfig;
use crate::error::{Error, Result};
use crate::mapping::{fill_slice, map_layer, slice_extent, CrossbarCoord};
use crate::model::{LayerKind, NetworkModel};
use crate::replication::{
    greedy_fill, guarded_replication_scheme, replication_scheme, Branch, JobCost, PlannedWrite,
    ReplicationPlan,
};
use crate::reuse::{select_center, DeltaSummary, RowPulses, ShiftPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InstrKind {
    FetchDeltas,
    WriteCrossbar,
    ComputeLayerSegment,
    Release,
    BankEnable,
    Accumulate,
    Transfer,
}

impl fmt::Display for InstrKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InstrKind::FetchDeltas => "FETCH_DELTAS",
            InstrKind::WriteCrossbar => "WRITE_CROSSBAR",
            InstrKind::ComputeLayerSegment => "COMPUTE_LAYER_SEGMENT",
            InstrKind::Release => "RELEASE",
            InstrKind::BankEnable => "BANK_ENABLE",
            InstrKind::Accumulate => "ACCUMULATE",
            InstrKind::Transfer => "TRANSFER",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    None,
    Fetch {
        bytes: u64,
    },
    Write {
        pulses: u64,
        changed_cells: u64,
        /// Crossbar rows carrying weights of the new occupant.
        populated_rows: usize,
        rows: Vec<RowPulses>,
    },
    Compute {
        windows: u64,
        replicas: u32,
        /// Crossbars of one copy of the job.
        crossbars: usize,
    },
    Banks {
        input: Vec<usize>,
        output: Vec<usize>,
        leakage: f64,
        segments: u64,
    },
    Transfer {
        bytes: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: usize,
    pub kind: InstrKind,
    pub layer: usize,
    pub job: Option<usize>,
    /// PE rows, numbered `pe * apu_rows_per_pe + apu_row`.
    pub rows: Vec<usize>,
    pub crossbar: Option<CrossbarCoord>,
    pub payload: Payload,
    /// Always lower ids.
    pub deps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: usize,
    pub layer: usize,
    pub segment: usize,
    pub segments: usize,
    /// `(vertical slice, horizontal group)` per unit.
    pub units: Vec<(usize, usize)>,
    pub windows: u64,
    pub replicable: bool,
    pub replicas: u32,
    /// Physical rows of every copy, in write order.
    pub rows: Vec<usize>,
    pub crossbars: usize,
    pub fetch_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub label: String,
    pub instructions: Vec<Instruction>,
    pub jobs: Vec<Job>,
    pub banks: Vec<LayerBanks>,
    pub shift: ShiftPlan,
    /// One entry per planning point that wrote anything.
    pub plans: Vec<ReplicationPlan>,
    /// `write_histogram[k]` = physical cells changed exactly `k` times.
    pub write_histogram: Vec<u64>,
    pub total_pe_rows: usize,
    /// Name of the planner that chose the writes.
    pub planner: String,
}

impl Schedule {
    pub fn count(&self, kind: InstrKind) -> usize {
        self.instructions.iter().filter(|i| i.kind == kind).count()
    }

    pub fn total_pulses(&self) -> u64 {
        self.instructions
            .iter()
            .map(|i| match &i.payload {
                Payload::Write { pulses, .. } => *pulses,
                _ => 0,
            })
            .sum()
    }

    pub fn max_writes_per_cell(&self) -> usize {
        self.write_histogram.iter().rposition(|&n| n > 0).unwrap_or(0)
    }

    /// One line per instruction, preceded by `#` lines for the bank, shift
    /// and replication decisions.
    pub fn to_trace(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# schedule {}", self.label);
        let _ = writeln!(out, "# planner {}", self.planner);
        match self.shift.center {
            Some(c) => {
                let offsets: Vec<String> = self.shift.layers.iter().map(|l| l.offset.to_string()).collect();
                let _ = writeln!(out, "# shift center={c} offsets={}", offsets.join(","));
            }
            None => {
                let rejected = self.shift.rejected.map_or("none".to_string(), |c| c.to_string());
                let _ = writeln!(out, "# shift none fallback={} rejected={rejected}", self.shift.fallback);
            }
        }
        for b in &self.banks {
            let _ = writeln!(
                out,
                "# banks layer={} in={} out={} segments={} carried={}",
                b.assignment.layer,
                ids(&b.assignment.input_banks),
                ids(&b.assignment.output_banks),
                b.segments,
                b.carried_input
            );
        }
        for (i, p) in self.plans.iter().enumerate() {
            let writes: Vec<String> = p
                .writes
                .iter()
                .map(|w| format!("{}:{}x{}", w.job, w.units, w.replicas))
                .collect();
            let _ = writeln!(
                out,
                "# plan {i} branch={:?} free={} window={} deferred={} iterations={} wl={} writes={}",
                p.branch,
                p.free_rows,
                p.window.map_or("-".into(), |(a, b)| format!("{a}-{b}")),
                p.deferred.map_or("-".into(), |d| d.to_string()),
                p.iterations,
                p.write_threshold.map_or("-".into(), |w| w.to_string()),
                writes.join(",")
            );
        }
        for ins in &self.instructions {
            let _ = write!(out, "{} {} layer={}", ins.id, ins.kind, ins.layer);
            if let Some(j) = ins.job {
                let _ = write!(out, " job={j}");
            }
            if !ins.rows.is_empty() {
                let _ = write!(out, " rows={}", ranges(&ins.rows));
            }
            if let Some(c) = ins.crossbar {
                let _ = write!(out, " xbar={}.{}.{}", c.pe, c.apu_row, c.apu_col);
            }
            match &ins.payload {
                Payload::None => {}
                Payload::Fetch { bytes } | Payload::Transfer { bytes } => {
                    let _ = write!(out, " bytes={bytes}");
                }
                Payload::Write {
                    pulses, changed_cells, ..
                } => {
                    let _ = write!(out, " pulses={pulses} changed={changed_cells}");
                }
                Payload::Compute {
                    windows,
                    replicas,
                    crossbars,
                } => {
                    let _ = write!(out, " windows={windows} replicas={replicas} crossbars={crossbars}");
                }
                Payload::Banks { input, output, .. } => {
                    let _ = write!(out, " in={} out={}", ids(input), ids(output));
                }
            }
            let _ = writeln!(out, " deps={}", ids(&ins.deps));
        }
        out
    }
}

fn ids(v: &[usize]) -> String {
    if v.is_empty() {
        return "-".into();
    }
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// `0-3,7,9-10` style.
fn ranges(v: &[usize]) -> String {
    let mut sorted = v.to_vec();
    sorted.sort_unstable();
    let mut parts = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[j] + 1 {
            j += 1;
        }
        parts.push(if i == j {
            sorted[i].to_string()
        } else {
            format!("{}-{}", sorted[i], sorted[j])
        });
        i = j + 1;
    }
    parts.join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOptions {
    pub heterogeneous_banks: bool,
    pub replication: bool,
    pub weight_shift: bool,
    pub clip_threshold: f64,
    pub centers: Vec<u32>,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            heterogeneous_banks: false,
            replication: false,
            weight_shift: false,
            clip_threshold: crate::reuse::DEFAULT_CLIP_THRESHOLD,
            centers: crate::reuse::DEFAULT_CENTERS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Naive,
    Base,
    B,
    Br,
    Brw,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Naive, Variant::Base, Variant::B, Variant::Br, Variant::Brw];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::Base => "ARAS",
            Variant::B => "ARAS_B",
            Variant::Br => "ARAS_BR",
            Variant::Brw => "ARAS_BRW",
        }
    }

    pub fn flag(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::Base => "base",
            Variant::B => "b",
            Variant::Br => "br",
            Variant::Brw => "brw",
        }
    }

    /// Options for the ARAS variants; `None` for naive.
    pub fn options(self) -> Option<ScheduleOptions> {
        let o = ScheduleOptions::default();
        match self {
            Variant::Naive => None,
            Variant::Base => Some(o),
            Variant::B => Some(ScheduleOptions {
                heterogeneous_banks: true,
                ..o
            }),
            Variant::Br => Some(ScheduleOptions {
                heterogeneous_banks: true,
                replication: true,
                ..o
            }),
            Variant::Brw => Some(ScheduleOptions {
                heterogeneous_banks: true,
                replication: true,
                weight_shift: true,
                ..o
            }),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.flag().eq_ignore_ascii_case(s) || v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// What a planner sees at a planning point.
pub struct PlanContext<'a> {
    pub point: usize,
    pub free_rows: usize,
    /// Job computed next.
    pub next_compute: usize,
    /// First job with unwritten rows.
    pub next_job: usize,
    /// `units` counts unwritten rows only.
    pub jobs: &'a [JobCost],
    pub config: &'a CheckedConfig,
}

pub trait Planner {
    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<ReplicationPlan>;

    fn name(&self) -> &str {
        "custom"
    }
}

impl<F> Planner for F
where
    F: FnMut(&PlanContext<'_>) -> Result<ReplicationPlan>,
{
    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<ReplicationPlan> {
        self(ctx)
    }
}

/// Writes as many upcoming rows as fit, one copy each.
pub struct GreedyPlanner;

impl Planner for GreedyPlanner {
    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<ReplicationPlan> {
        Ok(ReplicationPlan {
            branch: Branch::External,
            writes: greedy_fill(ctx.free_rows, ctx.next_job, ctx.jobs),
            ..ReplicationPlan::idle(ctx.free_rows)
        })
    }

    fn name(&self) -> &str {
        "greedy"
    }
}

/// The adaptive replication scheme as stated.
pub struct ReplicationPlanner;

impl Planner for ReplicationPlanner {
    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<ReplicationPlan> {
        replication_scheme(ctx.free_rows, ctx.next_job, ctx.jobs, ctx.config)
    }

    fn name(&self) -> &str {
        "replication"
    }
}

/// The adaptive replication scheme with its deferral cost check.
pub struct GuardedReplicationPlanner;

impl Planner for GuardedReplicationPlanner {
    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<ReplicationPlan> {
        guarded_replication_scheme(ctx.free_rows, ctx.next_job, ctx.jobs, ctx.config)
    }

    fn name(&self) -> &str {
        "guarded-replication"
    }
}

/// Writes only the job computed next.
pub struct SerialPlanner;

impl Planner for SerialPlanner {
    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<ReplicationPlan> {
        let job = &ctx.jobs[ctx.next_compute];
        let writes = if job.units > 0 {
            vec![PlannedWrite {
                job: job.id,
                units: job.units.min(ctx.free_rows),
                replicas: 1,
            }]
        } else {
            Vec::new()
        };
        Ok(ReplicationPlan {
            branch: Branch::External,
            writes,
            ..ReplicationPlan::idle(ctx.free_rows)
        })
    }

    fn name(&self) -> &str {
        "serial"
    }
}

/// Splits every layer into jobs of at most `total_pe_rows` units.
pub fn build_jobs(network: &NetworkModel, config: &CheckedConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    let cols = config.apu_cols_per_pe;
    for layer in &network.layers {
        let desc = &layer.desc;
        let req = map_layer(desc, config);
        let units: Vec<(usize, usize)> = (0..req.vertical_slices)
            .flat_map(|v| (0..req.horizontal_groups).map(move |g| (v, g)))
            .collect();
        let chunks: Vec<&[(usize, usize)]> = units.chunks(config.total_pe_rows).collect();
        let segments = chunks.len();
        for (segment, chunk) in chunks.into_iter().enumerate() {
            let mut crossbars = 0;
            let mut fetch_cycles = 0;
            for &(v, g) in chunk {
                for h in g * cols..((g + 1) * cols).min(req.horizontal_slices) {
                    crossbars += 1;
                    fetch_cycles += fetch_duration(fetch_bytes(desc, v, h, config), config);
                }
            }
            jobs.push(Job {
                id: jobs.len(),
                layer: desc.id,
                segment,
                segments,
                units: chunk.to_vec(),
                windows: req.num_windows,
                replicable: desc.kind == LayerKind::Conv && segments == 1 && req.num_windows > 1,
                replicas: 1,
                rows: Vec::new(),
                crossbars,
                fetch_cycles,
            });
        }
    }
    jobs
}

/// One signed nibble per populated cell.
pub fn fetch_bytes(desc: &crate::model::LayerDescriptor, v: usize, h: usize, config: &CheckedConfig) -> u64 {
    (crate::mapping::populated_cells(desc, v, h, config) as u64).div_ceil(2)
}

pub fn fetch_duration(bytes: u64, config: &CheckedConfig) -> u64 {
    (bytes as f64 / config.mm_bandwidth).ceil() as u64
}

struct Builder<'a> {
    network: &'a NetworkModel,
    config: &'a CheckedConfig,
    jobs: Vec<Job>,
    written: Vec<usize>,
    job_writes: Vec<Vec<usize>>,
    instructions: Vec<Instruction>,
    row_owner: Vec<Option<usize>>,
    row_release: Vec<Option<usize>>,
    images: Vec<Option<Vec<u8>>>,
    counts: Vec<Option<Vec<u16>>>,
    scratch: Vec<u8>,
}

impl<'a> Builder<'a> {
    fn new(network: &'a NetworkModel, config: &'a CheckedConfig) -> Self {
        let rows = config.total_pe_rows;
        let jobs = build_jobs(network, config);
        let n = jobs.len();
        Builder {
            network,
            config,
            jobs,
            written: vec![0; n],
            job_writes: vec![Vec::new(); n],
            instructions: Vec::new(),
            row_owner: vec![None; rows],
            row_release: vec![None; rows],
            images: vec![None; rows * config.apu_cols_per_pe],
            counts: vec![None; rows * config.apu_cols_per_pe],
            scratch: vec![0; config.crossbar_rows * config.crossbar_cols],
        }
    }

    fn push(
        &mut self,
        kind: InstrKind,
        layer: usize,
        job: Option<usize>,
        rows: Vec<usize>,
        crossbar: Option<CrossbarCoord>,
        payload: Payload,
        mut deps: Vec<usize>,
    ) -> usize {
        deps.sort_unstable();
        deps.dedup();
        let id = self.instructions.len();
        self.instructions.push(Instruction {
            id,
            kind,
            layer,
            job,
            rows,
            crossbar,
            payload,
            deps,
        });
        id
    }

    fn free_rows(&self) -> usize {
        self.row_owner.iter().filter(|o| o.is_none()).count()
    }

    fn first_pending(&self) -> usize {
        (0..self.jobs.len())
            .find(|&j| self.written[j] < self.jobs[j].units.len())
            .unwrap_or(self.jobs.len())
    }

    fn costs(&self) -> Vec<JobCost> {
        self.jobs
            .iter()
            .map(|j| JobCost {
                id: j.id,
                layer: j.layer,
                units: j.units.len() - self.written[j.id],
                windows: j.windows,
                replicable: j.replicable && self.written[j.id] == 0,
                fetch_cycles: j.fetch_cycles,
            })
            .collect()
    }

    fn apply(&mut self, plan: &ReplicationPlan, trigger: Option<usize>) -> Result<()> {
        if plan.allocated_rows() > self.free_rows() {
            return Err(Error::Schedule(format!(
                "plan allocates {} rows with {} free",
                plan.allocated_rows(),
                self.free_rows()
            )));
        }
        for w in &plan.writes {
            self.apply_write(w, trigger)?;
        }
        Ok(())
    }

    fn apply_write(&mut self, w: &PlannedWrite, trigger: Option<usize>) -> Result<()> {
        let expected = self.first_pending();
        if w.job != expected {
            return Err(Error::Schedule(format!(
                "write of job {} out of order, next pending is {expected}",
                w.job
            )));
        }
        let remaining = self.jobs[w.job].units.len() - self.written[w.job];
        if w.units == 0 || w.units > remaining {
            return Err(Error::Schedule(format!(
                "job {} has {remaining} unwritten rows, plan writes {}",
                w.job, w.units
            )));
        }
        if w.replicas == 0 {
            return Err(Error::ZeroReplication);
        }
        if w.replicas > 1 && !(self.jobs[w.job].replicable && self.written[w.job] == 0 && w.units == remaining) {
            return Err(Error::Schedule(format!("job {} cannot be replicated", w.job)));
        }
        let start = self.written[w.job];
        for _ in 0..w.replicas {
            for u in start..start + w.units {
                let row = self.row_owner.iter().position(|o| o.is_none()).ok_or_else(|| {
                    Error::Schedule(format!("no free row for job {}", w.job))
                })?;
                self.row_owner[row] = Some(w.job);
                self.jobs[w.job].rows.push(row);
                let (v, g) = self.jobs[w.job].units[u];
                self.write_unit(w.job, row, v, g, trigger)?;
            }
        }
        self.jobs[w.job].replicas = w.replicas;
        self.written[w.job] += w.units;
        Ok(())
    }

    fn write_unit(&mut self, job: usize, row: usize, v: usize, g: usize, trigger: Option<usize>) -> Result<()> {
        let cfg = self.config;
        let layer_idx = self.jobs[job].layer;
        let layer = &self.network.layers[layer_idx];
        let desc = &layer.desc;
        let req = map_layer(desc, cfg);
        let apu_cols = cfg.apu_cols_per_pe;
        let (xr, xc) = (cfg.crossbar_rows, cfg.crossbar_cols);
        let mut deps: Vec<usize> = trigger.into_iter().collect();
        deps.extend(self.row_release[row]);
        for h in g * apu_cols..((g + 1) * apu_cols).min(req.horizontal_slices) {
            let col = h - g * apu_cols;
            let coord = CrossbarCoord {
                pe: row / cfg.apu_rows_per_pe,
                apu_row: row % cfg.apu_rows_per_pe,
                apu_col: col,
            };
            let xbar = row * apu_cols + col;
            fill_slice(desc, &layer.weights, v, h, cfg, &mut self.scratch);
            let (prows, kernels) = slice_extent(desc, v, h, cfg);
            let width = kernels * cfg.cells_per_weight;
            let image = self.images[xbar].get_or_insert_with(|| vec![0; xr * xc]);
            let counts = self.counts[xbar].get_or_insert_with(|| vec![0; xr * xc]);
            let mut summary = DeltaSummary {
                rows: vec![RowPulses::default(); xr],
                ..Default::default()
            };
            for r in 0..prows {
                let span = r * xc..r * xc + width;
                let (mut inc, mut dec, mut pulses, mut changed) = (0u8, 0u8, 0u32, 0u32);
                for ((o, c), &n) in image[span.clone()]
                    .iter_mut()
                    .zip(&mut counts[span.clone()])
                    .zip(&self.scratch[span])
                {
                    let up = n.saturating_sub(*o);
                    let down = o.saturating_sub(n);
                    inc = inc.max(up);
                    dec = dec.max(down);
                    pulses = pulses.wrapping_add((up | down) as u32);
                    let hit = (up | down != 0) as u16;
                    changed = changed.wrapping_add(hit as u32);
                    *c = c.saturating_add(hit);
                    *o = n;
                }
                summary.rows[r] = RowPulses {
                    max_decrease: dec,
                    max_increase: inc,
                };
                summary.total_pulses += pulses as u64;
                summary.changed_cells += changed as u64;
            }
            let bytes = fetch_bytes(desc, v, h, cfg);
            let fetch = self.push(
                InstrKind::FetchDeltas,
                layer_idx,
                Some(job),
                vec![row],
                Some(coord),
                Payload::Fetch { bytes },
                deps.clone(),
            );
            let write = self.push(
                InstrKind::WriteCrossbar,
                layer_idx,
                Some(job),
                vec![row],
                Some(coord),
                Payload::Write {
                    pulses: summary.total_pulses,
                    changed_cells: summary.changed_cells,
                    populated_rows: prows,
                    rows: summary.rows,
                },
                vec![fetch],
            );
            self.job_writes[job].push(write);
        }
        Ok(())
    }

    fn write_histogram(&self) -> Vec<u64> {
        let cells = self.config.crossbar_rows * self.config.crossbar_cols;
        let mut hist = vec![0u64; 1];
        for c in &self.counts {
            match c {
                None => hist[0] += cells as u64,
                Some(c) => {
                    for &k in c {
                        let k = k as usize;
                        if k >= hist.len() {
                            hist.resize(k + 1, 0);
                        }
                        hist[k] += 1;
                    }
                }
            }
        }
        hist
    }
}

fn shift_plan(network: &NetworkModel, config: &CheckedConfig, options: &ScheduleOptions) -> Result<ShiftPlan> {
    if options.weight_shift && network.len() >= 2 {
        select_center(network, config, options.clip_threshold, &options.centers)
    } else {
        Ok(ShiftPlan::identity(network))
    }
}

fn build(
    label: &str,
    network: &NetworkModel,
    config: &CheckedConfig,
    heterogeneous: bool,
    shift: ShiftPlan,
    planner: &mut dyn Planner,
) -> Result<Schedule> {
    if network.is_empty() {
        return Err(Error::EmptyNetwork);
    }
    let shifted;
    let net = if shift.center.is_some() {
        shifted = shift.apply(network);
        &shifted
    } else {
        network
    };
    let banks = plan_banks(net, config.inventory(heterogeneous), true)?;
    let mut b = Builder::new(net, config);
    let mut plans = Vec::new();

    let first = &net.layers[0].desc;
    let mut chain = b.push(
        InstrKind::Transfer,
        first.id,
        None,
        Vec::new(),
        None,
        Payload::Transfer {
            bytes: first.input_bytes,
        },
        Vec::new(),
    );
    let mut trigger = None;
    for c in 0..b.jobs.len() {
        let free = b.free_rows();
        let next_job = b.first_pending();
        if free > 0 && next_job < b.jobs.len() {
            let costs = b.costs();
            let ctx = PlanContext {
                point: c,
                free_rows: free,
                next_compute: c,
                next_job,
                jobs: &costs,
                config,
            };
            let plan = planner.plan(&ctx)?;
            b.apply(&plan, trigger)?;
            if !plan.writes.is_empty() {
                plans.push(plan);
            }
        }
        let missing = b.jobs[c].units.len() - b.written[c];
        if missing > 0 {
            // The planner left the next job incomplete; finish it.
            if b.first_pending() != c || b.free_rows() < missing {
                return Err(Error::Schedule(format!("job {c} cannot be completed")));
            }
            let w = PlannedWrite {
                job: c,
                units: missing,
                replicas: 1,
            };
            b.apply_write(&w, trigger)?;
        }

        let (layer, segment, segments) = (b.jobs[c].layer, b.jobs[c].segment, b.jobs[c].segments);
        let mut compute_deps = b.job_writes[c].clone();
        compute_deps.push(chain);
        if segment == 0 {
            let lb = &banks[layer];
            let enable = b.push(
                InstrKind::BankEnable,
                layer,
                None,
                Vec::new(),
                None,
                Payload::Banks {
                    input: lb.assignment.input_banks.clone(),
                    output: lb.assignment.output_banks.clone(),
                    leakage: lb.assignment.total_leakage,
                    segments: lb.segments,
                },
                vec![chain],
            );
            compute_deps.push(enable);
        }
        let rows = b.jobs[c].rows.clone();
        let payload = Payload::Compute {
            windows: b.jobs[c].windows,
            replicas: b.jobs[c].replicas,
            crossbars: b.jobs[c].crossbars,
        };
        let compute = b.push(
            InstrKind::ComputeLayerSegment,
            layer,
            Some(c),
            rows.clone(),
            None,
            payload,
            compute_deps,
        );
        let release = b.push(InstrKind::Release, layer, Some(c), rows.clone(), None, Payload::None, vec![compute]);
        for &r in &rows {
            b.row_owner[r] = None;
            b.row_release[r] = Some(release);
        }
        chain = compute;
        if segments > 1 && segment + 1 == segments {
            chain = b.push(
                InstrKind::Accumulate,
                layer,
                Some(c),
                Vec::new(),
                None,
                Payload::None,
                vec![compute],
            );
        }
        trigger = Some(release);
    }
    let last = &net.layers[net.len() - 1].desc;
    b.push(
        InstrKind::Transfer,
        last.id,
        None,
        Vec::new(),
        None,
        Payload::Transfer {
            bytes: last.output_bytes,
        },
        vec![chain],
    );
    let write_histogram = b.write_histogram();
    Ok(Schedule {
        label: label.into(),
        instructions: b.instructions,
        jobs: b.jobs,
        banks,
        shift,
        plans,
        write_histogram,
        total_pe_rows: config.total_pe_rows,
        planner: planner.name().to_string(),
    })
}

/// Strictly serial: write a job, compute it, release it, repeat.
pub fn naive_schedule(network: &NetworkModel, config: &CheckedConfig) -> Result<Schedule> {
    build(
        Variant::Naive.label(),
        network,
        config,
        false,
        ShiftPlan::identity(network),
        &mut SerialPlanner,
    )
}

/// With replication on, the schedules from the replication scheme as stated,
/// its guarded form and plain greedy writing are all built on unshifted
/// weights, and the one with the shortest simulated makespan is kept
/// (earliest on ties). With weight shifting on, the selected center is then
/// applied under the same planner and kept only if it lowers total pulses.
pub fn aras_schedule(network: &NetworkModel, config: &CheckedConfig, options: &ScheduleOptions) -> Result<Schedule> {
    if !options.weight_shift {
        return unshifted_schedule(network, config, options);
    }
    Ok(shift_trial(network, config, options)?.resolve())
}

/// Both sides of the weight-shift decision.
#[derive(Debug, Clone)]
pub struct ShiftTrial {
    pub unshifted: Schedule,
    /// Built only when a center was selected.
    pub shifted: Option<Schedule>,
    /// Selection result before the pulse comparison.
    pub plan: ShiftPlan,
}

impl ShiftTrial {
    /// The schedule [`aras_schedule`] returns for these options.
    pub fn resolve(self) -> Schedule {
        let ShiftTrial {
            mut unshifted,
            shifted,
            plan,
        } = self;
        match shifted {
            Some(s) if s.total_pulses() < unshifted.total_pulses() => s,
            Some(_) => {
                unshifted.shift.rejected = plan.center;
                unshifted.shift.candidates = plan.candidates;
                unshifted
            }
            None => {
                unshifted.shift = plan;
                unshifted
            }
        }
    }
}

/// Builds the unshifted schedule for `options` and, when a center is
/// selected, the shifted one under the same planner. `options.weight_shift`
/// is treated as set.
pub fn shift_trial(network: &NetworkModel, config: &CheckedConfig, options: &ScheduleOptions) -> Result<ShiftTrial> {
    let shifting = ScheduleOptions {
        weight_shift: true,
        ..options.clone()
    };
    let mut unshifted = unshifted_schedule(network, config, options)?;
    unshifted.label = variant_label(&shifting);
    let plan = shift_plan(network, config, &shifting)?;
    let shifted = match plan.center {
        Some(_) => {
            let planner = unshifted.planner.clone();
            Some(aras_schedule_with(network, config, &shifting, named_planner(&planner).as_mut())?)
        }
        None => None,
    };
    Ok(ShiftTrial {
        unshifted,
        shifted,
        plan,
    })
}

fn unshifted_schedule(network: &NetworkModel, config: &CheckedConfig, options: &ScheduleOptions) -> Result<Schedule> {
    let unshifted = ScheduleOptions {
        weight_shift: false,
        ..options.clone()
    };
    let mut best = if options.replication {
        let mut best: Option<(u64, Schedule)> = None;
        for name in ["replication", "guarded-replication", "greedy"] {
            let schedule = aras_schedule_with(network, config, &unshifted, named_planner(name).as_mut())?;
            let makespan = crate::sim::timeline(&schedule, config, &crate::sim::SimOptions::default())?.makespan;
            if best.as_ref().is_none_or(|(m, _)| makespan < *m) {
                best = Some((makespan, schedule));
            }
        }
        best.expect("three candidates").1
    } else {
        aras_schedule_with(network, config, &unshifted, &mut GreedyPlanner)?
    };
    best.label = variant_label(options);
    Ok(best)
}

fn named_planner(name: &str) -> Box<dyn Planner> {
    match name {
        "replication" => Box::new(ReplicationPlanner),
        "guarded-replication" => Box::new(GuardedReplicationPlanner),
        _ => Box::new(GreedyPlanner),
    }
}

fn variant_label(options: &ScheduleOptions) -> String {
    match (options.heterogeneous_banks, options.replication, options.weight_shift) {
        (false, false, false) => "ARAS".to_string(),
        (h, r, w) => format!(
            "ARAS_{}{}{}",
            if h { "B" } else { "" },
            if r { "R" } else { "" },
            if w { "W" } else { "" }
        ),
    }
}

/// [`aras_schedule`] with a caller-supplied planner; `options.replication`
/// is ignored.
pub fn aras_schedule_with(
    network: &NetworkModel,
    config: &CheckedConfig,
    options: &ScheduleOptions,
    planner: &mut dyn Planner,
) -> Result<Schedule> {
    let shift = shift_plan(network, config, options)?;
    build(&variant_label(options), network, config, options.heterogeneous_banks, shift, planner)
}

pub fn variant_schedule(network: &NetworkModel, config: &CheckedConfig, variant: Variant) -> Result<Schedule> {
    match variant.options() {
        None => naive_schedule(network, config),
        Some(o) => aras_schedule(network, config, &o),
    }
}

/// Makespan of `schedule` with every COMPUTE taking zero cycles. Never
/// exceeds the schedule's simulated makespan.
pub fn write_only_makespan(schedule: &Schedule, config: &CheckedConfig) -> Result<u64> {
    let opts = crate::sim::SimOptions { zero_compute: true };
    Ok(crate::sim::timeline(schedule, config, &opts)?.makespan)
}

/// Time to write every layer once with all the write concurrency the chip
/// allows: the fastest write-only replay among the naive, ARAS, ARAS_BR and
/// ARAS_BRW schedules. ARAS_B shares the ARAS timeline.
pub fn lower_bound_makespan(network: &NetworkModel, config: &CheckedConfig) -> Result<u64> {
    let mut best = u64::MAX;
    for variant in [Variant::Naive, Variant::Base, Variant::Br, Variant::Brw] {
        let schedule = variant_schedule(network, config, variant)?;
        best = best.min(write_only_makespan(&schedule, config)?);
    }
    Ok(best)
}

/// [`lower_bound_makespan`] from schedules already built for the network.
pub fn lower_bound_from<'a>(
    schedules: impl IntoIterator<Item = &'a Schedule>,
    config: &CheckedConfig,
) -> Result<u64> {
    let mut best = u64::MAX;
    for schedule in schedules {
        best = best.min(write_only_makespan(schedule, config)?);
    }
    Ok(best)
}
