//! Adaptive Gbuffer bank selection.
//!
//! For each layer, choose which banks hold the input activations and which
//! hold the output activations so both fit, no bank serves both roles, and
//! the summed leakage of enabled banks is minimal. Unselected banks are
//! power-gated. The search is an exact branch and bound over the three-way
//! role of every bank.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::config::BankSpec;
use crate::error::{Error, Result};
use crate::model::NetworkModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Unused,
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankAssignment {
    pub layer: usize,
    pub input_banks: Vec<usize>,
    pub output_banks: Vec<usize>,
    /// Joules/cycle.
    pub total_leakage: f64,
}

impl BankAssignment {
    pub fn empty(layer: usize) -> Self {
        BankAssignment {
            layer,
            input_banks: Vec::new(),
            output_banks: Vec::new(),
            total_leakage: 0.0,
        }
    }

    /// Enabled banks in ascending id order.
    pub fn enabled(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.input_banks.iter().chain(&self.output_banks).copied().collect();
        all.sort_unstable();
        all
    }
}

pub fn static_power_of_assignment(assignment: &BankAssignment, inventory: &[BankSpec]) -> Result<f64> {
    let mut total = 0.0;
    for id in assignment.enabled() {
        let bank = inventory.iter().find(|b| b.id == id).ok_or(Error::UnknownBank(id))?;
        total += bank.leakage;
    }
    Ok(total)
}

/// Leakage summed in ascending bank order so equal sets compare equal.
fn leakage_of(roles: &[Role], inventory: &[BankSpec]) -> f64 {
    roles
        .iter()
        .zip(inventory)
        .filter(|(r, _)| **r != Role::Unused)
        .map(|(_, b)| b.leakage)
        .sum()
}

fn selection_key(roles: &[Role], inventory: &[BankSpec]) -> (Vec<usize>, Vec<usize>) {
    let mut selected = Vec::new();
    let mut inputs = Vec::new();
    for (r, b) in roles.iter().zip(inventory) {
        if *r != Role::Unused {
            selected.push(b.id);
        }
        if *r == Role::Input {
            inputs.push(b.id);
        }
    }
    selected.sort_unstable();
    inputs.sort_unstable();
    (selected, inputs)
}

/// Orders two complete role vectors: lower leakage first, then the
/// lexicographically smaller selected-id set, then the smaller input set.
pub fn compare_solutions(a: &[Role], b: &[Role], inventory: &[BankSpec]) -> Ordering {
    leakage_of(a, inventory)
        .total_cmp(&leakage_of(b, inventory))
        .then_with(|| selection_key(a, inventory).cmp(&selection_key(b, inventory)))
}

fn assignment_from(layer: usize, roles: &[Role], inventory: &[BankSpec]) -> BankAssignment {
    let pick = |role| {
        let mut ids: Vec<usize> = roles
            .iter()
            .zip(inventory)
            .filter(|(r, _)| **r == role)
            .map(|(_, b)| b.id)
            .collect();
        ids.sort_unstable();
        ids
    };
    BankAssignment {
        layer,
        input_banks: pick(Role::Input),
        output_banks: pick(Role::Output),
        total_leakage: leakage_of(roles, inventory),
    }
}

struct Search<'a> {
    inventory: &'a [BankSpec],
    forced: &'a [Option<Role>],
    suffix_capacity: Vec<u64>,
    roles: Vec<Role>,
    best: Option<(f64, Vec<Role>)>,
}

impl Search<'_> {
    fn visit(&mut self, i: usize, need_in: u64, need_out: u64, leakage: f64) {
        if need_in == 0 && need_out == 0 {
            // Adding any further bank only adds leakage.
            let mut roles = self.roles.clone();
            roles[i..].fill(Role::Unused);
            self.offer(roles);
            return;
        }
        if i == self.inventory.len() || self.suffix_capacity[i] < need_in + need_out {
            return;
        }
        if let Some((best, _)) = &self.best {
            if leakage >= *best {
                return;
            }
        }
        let bank = &self.inventory[i];
        let choices: &[Role] = match self.forced[i] {
            Some(Role::Input) => &[Role::Input],
            Some(Role::Output) => &[Role::Output],
            Some(Role::Unused) => &[Role::Unused],
            None => &[Role::Input, Role::Output, Role::Unused],
        };
        for &role in choices {
            self.roles[i] = role;
            match role {
                Role::Input => self.visit(
                    i + 1,
                    need_in.saturating_sub(bank.capacity),
                    need_out,
                    leakage + bank.leakage,
                ),
                Role::Output => self.visit(
                    i + 1,
                    need_in,
                    need_out.saturating_sub(bank.capacity),
                    leakage + bank.leakage,
                ),
                Role::Unused => self.visit(i + 1, need_in, need_out, leakage),
            }
        }
        self.roles[i] = Role::Unused;
    }

    fn offer(&mut self, roles: Vec<Role>) {
        let better = match &self.best {
            None => true,
            Some((_, best)) => compare_solutions(&roles, best, self.inventory) == Ordering::Less,
        };
        if better {
            self.best = Some((leakage_of(&roles, self.inventory), roles));
        }
    }
}

fn solve(
    layer: usize,
    input_bytes: u64,
    output_bytes: u64,
    inventory: &[BankSpec],
    forced: &[Option<Role>],
) -> Result<BankAssignment> {
    let total: u64 = inventory
        .iter()
        .zip(forced)
        .filter(|(_, f)| **f != Some(Role::Unused))
        .map(|(b, _)| b.capacity)
        .sum();
    if total < input_bytes + output_bytes {
        return Err(Error::SegmentRequired {
            shortfall: input_bytes + output_bytes - total,
        });
    }
    // Forced banks count toward their role before the search starts.
    let mut need_in = input_bytes;
    let mut need_out = output_bytes;
    for (f, b) in forced.iter().zip(inventory) {
        match f {
            Some(Role::Input) => need_in = need_in.saturating_sub(b.capacity),
            Some(Role::Output) => need_out = need_out.saturating_sub(b.capacity),
            _ => {}
        }
    }
    let free: Vec<Option<Role>> = forced
        .iter()
        .map(|f| match f {
            Some(Role::Input | Role::Output) => Some(Role::Unused),
            other => *other,
        })
        .collect();
    // Search the free banks only; forced ones are merged back afterwards.
    let mut free_suffix = vec![0u64; inventory.len() + 1];
    for i in (0..inventory.len()).rev() {
        let usable = if free[i].is_some() { 0 } else { inventory[i].capacity };
        free_suffix[i] = free_suffix[i + 1] + usable;
    }
    let mut search = Search {
        inventory,
        forced: &free,
        suffix_capacity: free_suffix,
        roles: vec![Role::Unused; inventory.len()],
        best: None,
    };
    search.visit(0, need_in, need_out, 0.0);
    let (_, mut roles) = search.best.ok_or_else(|| Error::SegmentRequired {
        shortfall: (need_in + need_out).saturating_sub(search.suffix_capacity[0]),
    })?;
    for (r, f) in roles.iter_mut().zip(forced) {
        if let Some(role @ (Role::Input | Role::Output)) = f {
            *r = *role;
        }
    }
    Ok(assignment_from(layer, &roles, inventory))
}

/// Leakage-minimal disjoint cover of `input_bytes` and `output_bytes`.
pub fn solve_bank_selection(
    layer: usize,
    input_bytes: u64,
    output_bytes: u64,
    inventory: &[BankSpec],
) -> Result<BankAssignment> {
    solve(layer, input_bytes, output_bytes, inventory, &vec![None; inventory.len()])
}

/// Like [`solve_bank_selection`] with `fixed_input` banks pinned to the input
/// role; more input banks may be added if they fall short.
pub fn solve_with_fixed_input(
    layer: usize,
    input_bytes: u64,
    output_bytes: u64,
    inventory: &[BankSpec],
    fixed_input: &[usize],
) -> Result<BankAssignment> {
    let mut forced = vec![None; inventory.len()];
    for &id in fixed_input {
        let pos = inventory.iter().position(|b| b.id == id).ok_or(Error::UnknownBank(id))?;
        forced[pos] = Some(Role::Input);
    }
    solve(layer, input_bytes, output_bytes, inventory, &forced)
}

/// Bank plan of one layer. `segments > 1` means the activations did not fit
/// and were processed in that many passes with every bank enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBanks {
    pub assignment: BankAssignment,
    pub segments: u64,
    pub carried_input: bool,
}

fn solve_segmented(layer: usize, input_bytes: u64, output_bytes: u64, inventory: &[BankSpec]) -> Result<LayerBanks> {
    let mut segments = 1u64;
    loop {
        match solve_bank_selection(
            layer,
            input_bytes.div_ceil(segments),
            output_bytes.div_ceil(segments),
            inventory,
        ) {
            Ok(mut assignment) => {
                if segments > 1 {
                    // The buffer runs full while the rest streams from main memory.
                    let enabled = assignment.enabled();
                    assignment
                        .input_banks
                        .extend(inventory.iter().map(|b| b.id).filter(|id| !enabled.contains(id)));
                    assignment.input_banks.sort_unstable();
                    assignment.total_leakage = static_power_of_assignment(&assignment, inventory)?;
                }
                return Ok(LayerBanks {
                    assignment,
                    segments,
                    carried_input: false,
                });
            }
            Err(Error::SegmentRequired { shortfall }) => {
                if segments >= input_bytes.max(output_bytes).max(1) {
                    return Err(Error::SegmentRequired { shortfall });
                }
                segments += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Banks with equal capacity and leakage are interchangeable, so bank sets
/// are counted per class. A state is a mixed-radix vector of counts.
struct Classes {
    /// Inventory positions per class, ascending.
    members: Vec<Vec<usize>>,
    capacity: Vec<u64>,
    leakage: Vec<f64>,
    stride: Vec<usize>,
    states: usize,
}

impl Classes {
    fn new(inventory: &[BankSpec]) -> Self {
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut capacity = Vec::new();
        let mut leakage: Vec<f64> = Vec::new();
        for (pos, b) in inventory.iter().enumerate() {
            match (0..members.len()).find(|&c| capacity[c] == b.capacity && leakage[c].to_bits() == b.leakage.to_bits()) {
                Some(c) => members[c].push(pos),
                None => {
                    members.push(vec![pos]);
                    capacity.push(b.capacity);
                    leakage.push(b.leakage);
                }
            }
        }
        let mut stride = Vec::with_capacity(members.len());
        let mut states = 1;
        for m in &members {
            stride.push(states);
            states *= m.len() + 1;
        }
        Classes {
            members,
            capacity,
            leakage,
            stride,
            states,
        }
    }

    fn count(&self, state: usize, class: usize) -> usize {
        state / self.stride[class] % (self.members[class].len() + 1)
    }

    /// Every `(input, output)` state pair that fits the inventory.
    fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(0usize, 0usize)];
        for (c, m) in self.members.iter().enumerate() {
            let n = m.len();
            let mut next = Vec::with_capacity(out.len() * (n + 1) * (n + 2) / 2);
            for &(i, b) in &out {
                for ic in 0..=n {
                    for bc in 0..=n - ic {
                        next.push((i + ic * self.stride[c], b + bc * self.stride[c]));
                    }
                }
            }
            out = next;
        }
        out
    }
}

#[derive(Clone, Copy)]
enum Step {
    /// Input state, carried state it extends, output state.
    Carry { input: usize, from: usize },
    /// Activations split; the next layer starts from a free input set.
    Segmented { from: usize },
}

/// Per-layer bank plan.
///
/// With `carryover`, the output banks of a layer stay enabled as (part of)
/// the input banks of the next layer, and the output sets are chosen
/// jointly along the network to minimize the summed per-layer leakage.
/// Without it every layer is solved on its own. A layer that fits in no
/// bank selection has its activations segmented, and the following layer
/// starts from a free input set.
pub fn plan_banks(network: &NetworkModel, inventory: &[BankSpec], carryover: bool) -> Result<Vec<LayerBanks>> {
    if !carryover {
        return network
            .descriptors()
            .map(|d| solve_segmented(d.id, d.input_bytes, d.output_bytes, inventory))
            .collect();
    }
    let cl = Classes::new(inventory);
    let nc = cl.members.len();
    let state_cap: Vec<u64> = (0..cl.states)
        .map(|s| (0..nc).map(|c| cl.count(s, c) as u64 * cl.capacity[c]).sum())
        .collect();
    let state_leak: Vec<f64> = (0..cl.states)
        .map(|s| (0..nc).map(|c| cl.count(s, c) as f64 * cl.leakage[c]).sum())
        .collect();
    let pairs = cl.pairs();

    let descs: Vec<_> = network.descriptors().collect();
    let mut dp = vec![f64::INFINITY; cl.states];
    dp[0] = 0.0;
    let mut steps: Vec<Vec<Option<Step>>> = Vec::with_capacity(descs.len());
    let mut segmented: Vec<Option<LayerBanks>> = Vec::with_capacity(descs.len());
    for d in &descs {
        // best[i] = cheapest carried state contained in input state i.
        let mut best: Vec<(f64, usize)> = dp.iter().enumerate().map(|(s, &v)| (v, s)).collect();
        for c in 0..nc {
            let (stride, radix) = (cl.stride[c], cl.members[c].len() + 1);
            for s in 0..cl.states {
                if s / stride % radix > 0 && best[s - stride].0 < best[s].0 {
                    best[s] = best[s - stride];
                }
            }
        }
        let mut next = vec![f64::INFINITY; cl.states];
        let mut step = vec![None; cl.states];
        for &(i, b) in &pairs {
            if state_cap[i] < d.input_bytes || state_cap[b] < d.output_bytes || !best[i].0.is_finite() {
                continue;
            }
            let v = best[i].0 + state_leak[i] + state_leak[b];
            if v < next[b] {
                next[b] = v;
                step[b] = Some(Step::Carry {
                    input: i,
                    from: best[i].1,
                });
            }
        }
        if next.iter().all(|v| !v.is_finite()) {
            let lb = solve_segmented(d.id, d.input_bytes, d.output_bytes, inventory)?;
            let (from, prev) = argmin(&dp);
            next[0] = prev + lb.assignment.total_leakage;
            step[0] = Some(Step::Segmented { from });
            segmented.push(Some(lb));
        } else {
            segmented.push(None);
        }
        steps.push(step);
        dp = next;
    }

    // Walk back to recover the state sequence.
    let mut chosen: Vec<(Option<usize>, usize)> = vec![(None, 0); descs.len()];
    let mut state = argmin(&dp).0;
    for l in (0..descs.len()).rev() {
        match steps[l][state].expect("reachable state") {
            Step::Carry { input, from } => {
                chosen[l] = (Some(input), state);
                state = from;
            }
            Step::Segmented { from } => {
                chosen[l] = (None, 0);
                state = from;
            }
        }
    }

    let mut plan = Vec::with_capacity(descs.len());
    let mut carried: Vec<usize> = Vec::new();
    let mut prev_segmented = true;
    for (l, d) in descs.iter().enumerate() {
        let (input, output) = chosen[l];
        let Some(input) = input else {
            plan.push(segmented[l].take().expect("segmented layer plan"));
            carried.clear();
            prev_segmented = true;
            continue;
        };
        let mut in_pos = carried.clone();
        for c in 0..nc {
            let have = cl.members[c].iter().filter(|p| in_pos.contains(p)).count();
            let extra: Vec<usize> = cl.members[c]
                .iter()
                .filter(|p| !in_pos.contains(p))
                .take(cl.count(input, c) - have)
                .copied()
                .collect();
            in_pos.extend(extra);
        }
        let mut out_pos = Vec::new();
        for c in 0..nc {
            out_pos.extend(
                cl.members[c]
                    .iter()
                    .filter(|p| !in_pos.contains(p))
                    .take(cl.count(output, c))
                    .copied(),
            );
        }
        let mut roles = vec![Role::Unused; inventory.len()];
        for &p in &in_pos {
            roles[p] = Role::Input;
        }
        for &p in &out_pos {
            roles[p] = Role::Output;
        }
        plan.push(LayerBanks {
            assignment: assignment_from(d.id, &roles, inventory),
            segments: 1,
            carried_input: !prev_segmented && l > 0,
        });
        carried = out_pos;
        prev_segmented = false;
    }
    Ok(plan)
}

fn argmin(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x < best.1 {
            best = (i, x);
        }
    }
    best
}
