//! Adaptive weight replication.
//!
//! Whenever PE rows free up, the planner decides which upcoming jobs to write
//! and with how many replicas. A replica is a full copy of a CONV job's
//! kernels; `R` replicas split the output windows so compute takes
//! `ceil(windows / R)` window steps.

use serde::{Deserialize, Serialize};

use crate::config::CheckedConfig;
use crate::error::{Error, Result};

/// Planning view of one job (a layer, or one segment of an oversized layer).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobCost {
    pub id: usize,
    pub layer: usize,
    /// PE rows still to be written for one copy of the job.
    pub units: usize,
    pub windows: u64,
    /// CONV, not segmented, more than one window, and nothing written yet.
    pub replicable: bool,
    /// Main-memory fetch cycles of the whole job, fetches back to back.
    pub fetch_cycles: u64,
}

pub fn compute_latency(windows: u64, replicas: u32, config: &CheckedConfig) -> u64 {
    windows.div_ceil(replicas.max(1) as u64) * config.activation_bits as u64 * config.crossbar_compute_latency
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedWrite {
    pub job: usize,
    /// Rows of each copy written now, taken from the job's next unwritten ones.
    pub units: usize,
    pub replicas: u32,
}

impl PlannedWrite {
    pub fn rows(&self) -> usize {
        self.units * self.replicas as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Nothing to write or no free rows.
    Idle,
    /// Not even the next job fits: write what fits.
    Partial,
    /// Room for the next job only: replicate it into the free rows.
    Single,
    /// Room for several jobs: defer trailing jobs to replicate slow ones.
    Iterative,
    /// Written by another planner.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationPlan {
    pub branch: Branch,
    pub free_rows: usize,
    /// First and last job of the replication window.
    pub window: Option<(usize, usize)>,
    pub deferred: Option<usize>,
    pub iterations: usize,
    /// Write-latency threshold the interior compute latencies were held to.
    pub write_threshold: Option<u64>,
    pub writes: Vec<PlannedWrite>,
}

impl ReplicationPlan {
    pub fn idle(free_rows: usize) -> Self {
        ReplicationPlan {
            branch: Branch::Idle,
            free_rows,
            window: None,
            deferred: None,
            iterations: 0,
            write_threshold: None,
            writes: Vec::new(),
        }
    }

    pub fn allocated_rows(&self) -> usize {
        self.writes.iter().map(PlannedWrite::rows).sum()
    }

    pub fn replicas_of(&self, job: usize) -> u32 {
        self.writes.iter().find(|w| w.job == job).map_or(1, |w| w.replicas)
    }
}

/// Largest `K` such that jobs `first..first + K` fit in `free_rows`, capped
/// at the jobs remaining.
pub fn get_number_of_layers(free_rows: usize, first: usize, jobs: &[JobCost]) -> usize {
    let mut used = 0;
    let mut k = 0;
    for job in jobs.iter().skip(first) {
        used += job.units;
        if used > free_rows {
            break;
        }
        k += 1;
    }
    k
}

/// Greedy replica grants. Each round gives one whole replica to the
/// candidate with the highest current compute latency whose replica still
/// fits and would actually shorten it, lowest id first on ties. Returns the
/// extra replicas per candidate.
pub fn replicate_longest_layers(free_rows: usize, candidates: &[JobCost], config: &CheckedConfig) -> Vec<u32> {
    let mut extra = vec![0u32; candidates.len()];
    let mut free = free_rows;
    loop {
        let mut pick: Option<(usize, u64)> = None;
        for (i, c) in candidates.iter().enumerate() {
            if !c.replicable || c.units == 0 || c.units > free {
                continue;
            }
            let r = 1 + extra[i];
            let now = compute_latency(c.windows, r, config);
            if compute_latency(c.windows, r + 1, config) >= now {
                continue;
            }
            let better = match pick {
                None => true,
                Some((j, best)) => now > best || (now == best && c.id < candidates[j].id),
            };
            if better {
                pick = Some((i, now));
            }
        }
        let Some((i, _)) = pick else { break };
        extra[i] += 1;
        free -= candidates[i].units;
    }
    extra
}

/// Fills `free_rows` with the unwritten rows of jobs from `first` onward,
/// one copy each, stopping at the first job that does not fit entirely
/// (which gets the remaining rows).
pub fn greedy_fill(free_rows: usize, first: usize, jobs: &[JobCost]) -> Vec<PlannedWrite> {
    let mut free = free_rows;
    let mut writes = Vec::new();
    for job in jobs.iter().skip(first) {
        if free == 0 {
            break;
        }
        if job.units == 0 {
            continue;
        }
        let units = job.units.min(free);
        writes.push(PlannedWrite {
            job: job.id,
            units,
            replicas: 1,
        });
        free -= units;
        if units < job.units {
            break;
        }
    }
    writes
}

fn first_pending(first: usize, jobs: &[JobCost]) -> Option<usize> {
    (first..jobs.len()).find(|&j| jobs[j].units > 0)
}

/// Write latency of a deferred job once it can start: its fetches back to
/// back plus one worst-case crossbar write, since crossbars write
/// concurrently.
pub fn deferred_write_latency(job: &JobCost, config: &CheckedConfig) -> u64 {
    job.fetch_cycles + config.crossbar_write_latency
}

/// The replication scheme for the planning point where job `first` is the
/// next job with unwritten rows. Rows left after the plan are filled with
/// the following jobs' rows, one copy each.
pub fn replication_scheme(
    free_rows: usize,
    first: usize,
    jobs: &[JobCost],
    config: &CheckedConfig,
) -> Result<ReplicationPlan> {
    if first >= jobs.len() {
        return Err(Error::InvalidArgument(format!(
            "job {first} out of range for {} jobs",
            jobs.len()
        )));
    }
    let Some(l) = first_pending(first, jobs) else {
        return Ok(ReplicationPlan::idle(free_rows));
    };
    if free_rows == 0 {
        return Ok(ReplicationPlan::idle(0));
    }
    let job = &jobs[l];
    let next = first_pending(l + 1, jobs);

    if free_rows < job.units {
        return Ok(ReplicationPlan {
            branch: Branch::Partial,
            window: Some((l, l)),
            writes: vec![PlannedWrite {
                job: l,
                units: free_rows,
                replicas: 1,
            }],
            ..ReplicationPlan::idle(free_rows)
        });
    }

    let fits_two = next.is_some_and(|n| free_rows >= job.units + jobs[n].units);
    if !fits_two {
        let replicas = if job.replicable {
            let by_rows = (free_rows / job.units) as u64;
            by_rows.min(job.windows).max(1) as u32
        } else {
            1
        };
        let mut writes = vec![PlannedWrite {
            job: l,
            units: job.units,
            replicas,
        }];
        writes.extend(greedy_fill(free_rows - job.units * replicas as usize, l + 1, jobs));
        return Ok(ReplicationPlan {
            branch: Branch::Single,
            window: Some((l, l)),
            writes,
            ..ReplicationPlan::idle(free_rows)
        });
    }

    let mut k = get_number_of_layers(free_rows, l, jobs);
    debug_assert!(k >= 2);
    let mut iterations = 0;
    let (window_end, extra, threshold) = loop {
        iterations += 1;
        let deferred = &jobs[l + k - 1];
        let window = &jobs[l..l + k - 1];
        let used: usize = window.iter().map(|j| j.units).sum();
        let extra = replicate_longest_layers(free_rows - used, window, config);
        let threshold = deferred_write_latency(deferred, config);
        let interior: u64 = window
            .iter()
            .zip(&extra)
            .skip(1)
            .map(|(j, &e)| compute_latency(j.windows, 1 + e, config))
            .sum();
        if k == 2 || interior <= threshold {
            break (l + k - 2, extra, threshold);
        }
        k -= 1;
    };
    let mut writes: Vec<PlannedWrite> = jobs[l..=window_end]
        .iter()
        .zip(&extra)
        .map(|(j, &e)| PlannedWrite {
            job: j.id,
            units: j.units,
            replicas: 1 + e,
        })
        .collect();
    let used: usize = writes.iter().map(PlannedWrite::rows).sum();
    writes.extend(greedy_fill(free_rows - used, window_end + 1, jobs));
    Ok(ReplicationPlan {
        branch: Branch::Iterative,
        free_rows,
        window: Some((l, window_end)),
        deferred: Some(window_end + 1),
        iterations,
        write_threshold: Some(threshold),
        writes,
    })
}

/// [`replication_scheme`] with a cost check on its deferral: the deferred
/// job's write is exposed wherever the interior compute cannot cover it, and
/// if the compute the replicas save does not exceed that exposure by more
/// than replicating into the leftover rows alone would save, every fitting
/// job is written now instead.
pub fn guarded_replication_scheme(
    free_rows: usize,
    first: usize,
    jobs: &[JobCost],
    config: &CheckedConfig,
) -> Result<ReplicationPlan> {
    let plan = replication_scheme(free_rows, first, jobs, config)?;
    let (Some((l, end)), Some(threshold)) = (plan.window, plan.write_threshold) else {
        return Ok(plan);
    };
    let window = &jobs[l..=end];
    let extra: Vec<u32> = (l..=end).map(|j| plan.replicas_of(j) - 1).collect();
    let saved = saved_cycles(window, &extra, config);
    let interior: u64 = window
        .iter()
        .zip(&extra)
        .skip(1)
        .map(|(j, &e)| compute_latency(j.windows, 1 + e, config))
        .sum();
    let fitting = get_number_of_layers(free_rows, l, jobs);
    let (direct, direct_saved) = without_deferral(free_rows, l, fitting, jobs, config, plan.iterations);
    if saved.saturating_sub(threshold.saturating_sub(interior)) <= direct_saved {
        Ok(direct)
    } else {
        Ok(plan)
    }
}

/// Writes all `count` jobs from `first` and replicates into the rows left
/// over, deferring nothing. Also returns the compute cycles the replicas save.
fn without_deferral(
    free_rows: usize,
    first: usize,
    count: usize,
    jobs: &[JobCost],
    config: &CheckedConfig,
    iterations: usize,
) -> (ReplicationPlan, u64) {
    let window = &jobs[first..first + count];
    let used: usize = window.iter().map(|j| j.units).sum();
    let extra = replicate_longest_layers(free_rows - used, window, config);
    let mut writes: Vec<PlannedWrite> = window
        .iter()
        .zip(&extra)
        .map(|(j, &e)| PlannedWrite {
            job: j.id,
            units: j.units,
            replicas: 1 + e,
        })
        .collect();
    let used: usize = writes.iter().map(PlannedWrite::rows).sum();
    writes.extend(greedy_fill(free_rows - used, first + count, jobs));
    let plan = ReplicationPlan {
        branch: Branch::Iterative,
        free_rows,
        window: Some((first, first + count - 1)),
        deferred: None,
        iterations,
        write_threshold: None,
        writes,
    };
    (plan, saved_cycles(window, &extra, config))
}

fn saved_cycles(window: &[JobCost], extra: &[u32], config: &CheckedConfig) -> u64 {
    window
        .iter()
        .zip(extra)
        .map(|(j, &e)| compute_latency(j.windows, 1, config) - compute_latency(j.windows, 1 + e, config))
        .sum()
}
