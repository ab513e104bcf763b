//! Partial weight reuse.
//!
//! Cells keep their level across overwrites when the old and new weight
//! share a digit, and the pulse count of a cell update is the magnitude of
//! the level change. Shifting every layer's weights so their means land on a
//! common center lines up the most significant cells across layers; the
//! shift is undone for free by moving the weight zero point the other way.

use serde::{Deserialize, Serialize};

use crate::config::CheckedConfig;
use crate::error::{Error, Result};
use crate::mapping::{CellImage, CrossbarCoord};
use crate::model::{NetworkModel, QuantParams, QuantizedWeights};

/// Centers that line up the top two cells without pushing weights into the
/// ends of the 8-bit range.
pub const DEFAULT_CENTERS: [u32; 6] = [88, 104, 96, 160, 152, 168];

pub const DEFAULT_CLIP_THRESHOLD: f64 = 0.001;

/// Per cell position (index 0 = least significant), the probability of each
/// cell level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDistribution {
    pub probs: Vec<Vec<f64>>,
}

impl CellDistribution {
    pub fn positions(&self) -> usize {
        self.probs.len()
    }

    pub fn levels(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    /// Distribution of the cells of values drawn from `histogram` (indexed by
    /// weight value).
    pub fn from_histogram(histogram: &[u64], bits_per_cell: u32, cells_per_weight: usize) -> Result<Self> {
        let total: u64 = histogram.iter().sum();
        if total == 0 {
            return Err(Error::InvalidArgument("empty weight tensor".into()));
        }
        let levels = 1usize << bits_per_cell;
        let mask = levels - 1;
        let mut counts = vec![vec![0u64; levels]; cells_per_weight];
        for (value, &n) in histogram.iter().enumerate() {
            if n == 0 {
                continue;
            }
            for (i, per) in counts.iter_mut().enumerate() {
                per[(value >> (i * bits_per_cell as usize)) & mask] += n;
            }
        }
        let probs = counts
            .into_iter()
            .map(|per| per.into_iter().map(|c| c as f64 / total as f64).collect())
            .collect();
        Ok(CellDistribution { probs })
    }
}

pub fn histogram(values: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in values {
        h[v as usize] += 1;
    }
    h
}

pub fn cell_distribution(weights: &QuantizedWeights, config: &CheckedConfig) -> Result<CellDistribution> {
    CellDistribution::from_histogram(&histogram(&weights.values), config.bits_per_cell, config.cells_per_weight)
}

/// Probability that cell position `position` (1-based, 1 = least significant)
/// keeps its level when a weight drawn from `py` overwrites one from `px`.
pub fn skipping_ratio(px: &CellDistribution, py: &CellDistribution, position: usize) -> Result<f64> {
    if px.levels() != py.levels() {
        return Err(Error::InvalidArgument(format!(
            "alphabet sizes differ: {} vs {}",
            px.levels(),
            py.levels()
        )));
    }
    if position == 0 || position > px.positions() || position > py.positions() {
        return Err(Error::InvalidArgument(format!("cell position {position} out of range")));
    }
    let (a, b) = (&px.probs[position - 1], &py.probs[position - 1]);
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedWeights {
    pub weights: QuantizedWeights,
    pub offset: i64,
    pub clip_fraction: f64,
}

/// `round(center - mean)`.
pub fn shift_offset(mean: f64, center: u32) -> i64 {
    (center as f64 - mean).round() as i64
}

pub fn apply_offset(weights: &QuantizedWeights, offset: i64, weight_bits: u32) -> (QuantizedWeights, f64) {
    let max = (1i64 << weight_bits) - 1;
    let mut clipped = 0usize;
    let values = weights
        .values
        .iter()
        .map(|&w| {
            let s = w as i64 + offset;
            if s < 0 || s > max {
                clipped += 1;
            }
            s.clamp(0, max) as u8
        })
        .collect();
    let fraction = if weights.is_empty() {
        0.0
    } else {
        clipped as f64 / weights.len() as f64
    };
    (
        QuantizedWeights {
            layer: weights.layer,
            shape: weights.shape,
            values,
        },
        fraction,
    )
}

/// Moves the tensor mean onto `center`, clipping at the range ends.
pub fn shift_weights(weights: &QuantizedWeights, center: u32, weight_bits: u32) -> Result<ShiftedWeights> {
    let max = (1u32 << weight_bits) - 1;
    if center > max {
        return Err(Error::OutOfRange {
            value: center as i64,
            max: max as i64,
        });
    }
    let offset = shift_offset(weights.mean(), center);
    let (shifted, clip_fraction) = apply_offset(weights, offset, weight_bits);
    Ok(ShiftedWeights {
        weights: shifted,
        offset,
        clip_fraction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShift {
    pub layer: usize,
    pub offset: i64,
    pub clip_fraction: f64,
    /// Mean |clip(w + offset) - (w + offset)| over the tensor.
    pub mean_abs_clip_error: f64,
    pub adjusted_zero_point: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterScore {
    pub center: u32,
    /// Mean over consecutive layer pairs of the averaged top-two-cell
    /// skipping ratios.
    pub skipping_ratio: f64,
    pub worst_clip_fraction: f64,
    pub total_clip_fraction: f64,
    pub total_abs_offset: u64,
    pub admissible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftPlan {
    /// `None` when no shift is applied.
    pub center: Option<u32>,
    pub layers: Vec<LayerShift>,
    /// Set when every candidate center was rejected.
    pub fallback: bool,
    /// A selected center that was not applied because the schedule built
    /// with it needed more programming pulses than the unshifted one.
    #[serde(default)]
    pub rejected: Option<u32>,
    pub candidates: Vec<CenterScore>,
}

impl ShiftPlan {
    pub fn identity(network: &NetworkModel) -> Self {
        ShiftPlan {
            center: None,
            layers: network
                .layers
                .iter()
                .map(|l| LayerShift {
                    layer: l.desc.id,
                    offset: 0,
                    clip_fraction: 0.0,
                    mean_abs_clip_error: 0.0,
                    adjusted_zero_point: l.quant.zp_w,
                })
                .collect(),
            fallback: false,
            rejected: None,
            candidates: Vec::new(),
        }
    }

    pub fn offset(&self, layer: usize) -> i64 {
        self.layers.get(layer).map_or(0, |l| l.offset)
    }

    /// The network with every layer's weights moved by its offset.
    pub fn apply(&self, network: &NetworkModel) -> NetworkModel {
        let mut shifted = network.clone();
        for (layer, shift) in shifted.layers.iter_mut().zip(&self.layers) {
            if shift.offset != 0 {
                layer.weights = apply_offset(&layer.weights, shift.offset, network.weight_bits).0;
            }
        }
        shifted
    }
}

fn shift_histogram(h: &[u64; 256], offset: i64, max: i64) -> ([u64; 256], u64, u64) {
    let mut out = [0u64; 256];
    let mut clipped = 0u64;
    let mut abs_err = 0u64;
    for (v, &n) in h.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let s = v as i64 + offset;
        let c = s.clamp(0, max);
        if c != s {
            clipped += n;
            abs_err += n * (c - s).unsigned_abs();
        }
        out[c as usize] += n;
    }
    (out, clipped, abs_err)
}

fn histogram_mean(h: &[u64; 256]) -> f64 {
    let total: u64 = h.iter().sum();
    let sum: u64 = h.iter().enumerate().map(|(v, &n)| v as u64 * n).sum();
    sum as f64 / total as f64
}

fn top_positions(cells_per_weight: usize) -> std::ops::RangeInclusive<usize> {
    cells_per_weight.saturating_sub(1).max(1)..=cells_per_weight
}

/// Mean over consecutive pairs of the averaged skipping ratio of the top two
/// cell positions.
pub fn top_cell_skipping_ratio(dists: &[CellDistribution], cells_per_weight: usize) -> f64 {
    if dists.len() < 2 {
        return 0.0;
    }
    let positions = top_positions(cells_per_weight);
    let per_pair = positions.clone().count() as f64;
    let total: f64 = dists
        .windows(2)
        .map(|pair| {
            positions
                .clone()
                .map(|p| skipping_ratio(&pair[0], &pair[1], p).expect("same geometry"))
                .sum::<f64>()
                / per_pair
        })
        .sum();
    total / (dists.len() - 1) as f64
}

/// Picks the shared center for all layers after the first.
///
/// Candidates whose worst per-layer clip fraction exceeds `clip_threshold`
/// are discarded. Survivors are ranked by top-cell skipping ratio (higher
/// first), then total clip fraction, then total offset magnitude, then
/// center value. With no survivor the identity plan is returned with
/// `fallback` set.
pub fn select_center(
    network: &NetworkModel,
    config: &CheckedConfig,
    clip_threshold: f64,
    centers: &[u32],
) -> Result<ShiftPlan> {
    if network.len() < 2 {
        return Err(Error::InvalidArgument("weight shifting needs at least two layers".into()));
    }
    let max = (1i64 << network.weight_bits) - 1;
    if let Some(&c) = centers.iter().find(|&&c| c as i64 > max) {
        return Err(Error::OutOfRange { value: c as i64, max });
    }
    let bits = config.bits_per_cell;
    let cpw = config.cells_per_weight;
    let histograms: Vec<[u64; 256]> = network.layers.iter().map(|l| histogram(&l.weights.values)).collect();
    let means: Vec<f64> = histograms.iter().map(histogram_mean).collect();

    let mut scored = Vec::with_capacity(centers.len());
    for &center in centers {
        let mut dists = Vec::with_capacity(network.len());
        let mut shifts = Vec::with_capacity(network.len());
        let mut worst = 0.0f64;
        let mut total = 0.0f64;
        for (i, (h, layer)) in histograms.iter().zip(&network.layers).enumerate() {
            let offset = if i == 0 { 0 } else { shift_offset(means[i], center) };
            let (shifted, clipped, abs_err) = shift_histogram(h, offset, max);
            let n = layer.weights.len() as f64;
            let fraction = clipped as f64 / n;
            worst = worst.max(fraction);
            total += fraction;
            dists.push(CellDistribution::from_histogram(&shifted, bits, cpw)?);
            shifts.push(LayerShift {
                layer: layer.desc.id,
                offset,
                clip_fraction: fraction,
                mean_abs_clip_error: abs_err as f64 / n,
                adjusted_zero_point: layer.quant.zp_w - offset,
            });
        }
        let score = CenterScore {
            center,
            skipping_ratio: top_cell_skipping_ratio(&dists, cpw),
            worst_clip_fraction: worst,
            total_clip_fraction: total,
            total_abs_offset: shifts.iter().map(|s| s.offset.unsigned_abs()).sum(),
            admissible: worst <= clip_threshold,
        };
        scored.push((score, shifts));
    }

    let best = scored
        .iter()
        .filter(|(s, _)| s.admissible)
        .min_by(|(a, _), (b, _)| {
            b.skipping_ratio
                .total_cmp(&a.skipping_ratio)
                .then(a.total_clip_fraction.total_cmp(&b.total_clip_fraction))
                .then(a.total_abs_offset.cmp(&b.total_abs_offset))
                .then(a.center.cmp(&b.center))
        });
    let candidates: Vec<CenterScore> = scored.iter().map(|(s, _)| s.clone()).collect();
    Ok(match best {
        Some((score, shifts)) => ShiftPlan {
            center: Some(score.center),
            layers: shifts.clone(),
            fallback: false,
            rejected: None,
            candidates,
        },
        None => {
            log::warn!("no candidate center within clip threshold {clip_threshold}; weights left unshifted");
            ShiftPlan {
                fallback: true,
                candidates,
                ..ShiftPlan::identity(network)
            }
        }
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowPulses {
    pub max_decrease: u8,
    pub max_increase: u8,
}

impl RowPulses {
    pub fn is_zero(&self) -> bool {
        self.max_decrease == 0 && self.max_increase == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellDeltaMatrix {
    pub coord: CrossbarCoord,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `new - old`.
    pub deltas: Vec<i8>,
    pub row_pulses: Vec<RowPulses>,
}

impl CellDeltaMatrix {
    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.deltas[row * self.cols + col]
    }

    pub fn summary(&self) -> DeltaSummary {
        DeltaSummary {
            total_pulses: total_pulses(self),
            changed_cells: self.deltas.iter().filter(|&&d| d != 0).count() as u64,
            rows: self.row_pulses.clone(),
        }
    }
}

/// The parts of a delta matrix the timing and energy models consume.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DeltaSummary {
    pub total_pulses: u64,
    pub changed_cells: u64,
    pub rows: Vec<RowPulses>,
}

pub fn compute_cell_deltas(old: &CellImage, new: &CellImage) -> Result<CellDeltaMatrix> {
    if old.rows != new.rows || old.cols != new.cols || old.cells.len() != new.cells.len() {
        return Err(Error::Geometry(format!(
            "{}x{} vs {}x{}",
            old.rows, old.cols, new.rows, new.cols
        )));
    }
    let erased;
    let old_cells: &[u8] = if old.occupant.is_none() {
        erased = vec![0u8; new.cells.len()];
        &erased
    } else {
        &old.cells
    };
    let deltas: Vec<i8> = old_cells
        .iter()
        .zip(&new.cells)
        .map(|(&o, &n)| n as i8 - o as i8)
        .collect();
    let row_pulses = deltas
        .chunks(new.cols)
        .map(|row| RowPulses {
            max_increase: row.iter().map(|&d| d.max(0) as u8).max().unwrap_or(0),
            max_decrease: row.iter().map(|&d| (-d).max(0) as u8).max().unwrap_or(0),
        })
        .collect();
    Ok(CellDeltaMatrix {
        coord: new.coord,
        rows: new.rows,
        cols: new.cols,
        deltas,
        row_pulses,
    })
}

/// Summary of the update from `old` to `new` cell levels without
/// materializing the delta matrix. `None` for `old` means erased.
pub fn delta_summary(old: Option<&[u8]>, new: &[u8], cols: usize) -> DeltaSummary {
    let mut summary = DeltaSummary {
        rows: Vec::with_capacity(new.len() / cols),
        ..Default::default()
    };
    for (r, new_row) in new.chunks(cols).enumerate() {
        let mut rp = RowPulses::default();
        match old {
            Some(old) => {
                for (&o, &n) in old[r * cols..(r + 1) * cols].iter().zip(new_row) {
                    if n > o {
                        let d = n - o;
                        rp.max_increase = rp.max_increase.max(d);
                        summary.total_pulses += d as u64;
                        summary.changed_cells += 1;
                    } else if o > n {
                        let d = o - n;
                        rp.max_decrease = rp.max_decrease.max(d);
                        summary.total_pulses += d as u64;
                        summary.changed_cells += 1;
                    }
                }
            }
            None => {
                for &n in new_row {
                    if n > 0 {
                        rp.max_increase = rp.max_increase.max(n);
                        summary.total_pulses += n as u64;
                        summary.changed_cells += 1;
                    }
                }
            }
        }
        summary.rows.push(rp);
    }
    summary
}

/// Programming pulses needed to apply `deltas`.
pub fn total_pulses(deltas: &CellDeltaMatrix) -> u64 {
    deltas.deltas.iter().map(|&d| d.unsigned_abs() as u64).sum()
}

/// A dot product's integer accumulation and its de-quantized value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DotProduct {
    /// `sum_i (x_q + zp_x) * (w + zp)`.
    pub accumulator: i64,
    pub value: f64,
}

fn dequantized_dot(x_q: &[i64], w: &[i64], zp_w: i64, qp: &QuantParams, channel: usize) -> Result<DotProduct> {
    if x_q.len() != w.len() {
        return Err(Error::LengthMismatch {
            left: x_q.len(),
            right: w.len(),
        });
    }
    let accumulator = x_q
        .iter()
        .zip(w)
        .map(|(&x, &w)| (x + qp.zp_x) * (w + zp_w))
        .sum::<i64>();
    Ok(DotProduct {
        accumulator,
        value: accumulator as f64 / (qp.q_x * qp.q_w) + qp.bias_for(channel),
    })
}

/// De-quantized dot product over the original weights.
pub fn dot_product(x_q: &[i64], w_q: &[i64], qp: &QuantParams, channel: usize) -> Result<DotProduct> {
    dequantized_dot(x_q, w_q, qp.zp_w, qp, channel)
}

/// De-quantized dot product over shifted weights, compensated by the
/// adjusted zero point `zp_w - offset`.
pub fn compensated_dot_product(
    x_q: &[i64],
    w_shifted: &[i64],
    offset: i64,
    qp: &QuantParams,
    channel: usize,
) -> Result<DotProduct> {
    dequantized_dot(x_q, w_shifted, qp.zp_w - offset, qp, channel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CheckedConfig;
    use crate::model::{GaussianSpec, LayerDescriptor, LayerSpec, NetworkSpec, WeightSource};
    use crate::synth::gaussian_weights;
    use proptest::prelude::*;
    use std::path::Path;

    fn tensor(values: Vec<u8>) -> QuantizedWeights {
        let n = values.len();
        QuantizedWeights::new(0, [n, 1, 1, 1], values, 8).unwrap()
    }

    fn uniform() -> CellDistribution {
        CellDistribution::from_histogram(&[1u64; 256], 2, 4).unwrap()
    }

    fn point(k: usize) -> CellDistribution {
        CellDistribution {
            probs: vec![(0..4).map(|i| if i == k { 1.0 } else { 0.0 }).collect(); 4],
        }
    }

    #[test]
    fn uniform_weights_give_uniform_cells() {
        let c = CheckedConfig::default();
        let d = cell_distribution(&tensor((0..=255).collect()), &c).unwrap();
        for per in &d.probs {
            assert_eq!(per.len(), 4);
            for &p in per {
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn point_mass_distribution() {
        let c = CheckedConfig::default();
        let d = cell_distribution(&tensor(vec![180; 10]), &c).unwrap();
        for (i, &digit) in [0usize, 1, 3, 2].iter().enumerate() {
            assert_eq!(d.probs[i][digit], 1.0);
            assert!((d.probs[i].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn narrow_gaussian_top_cell() {
        let c = CheckedConfig::default();
        let w = tensor(gaussian_weights(100_000, 160.0, 10.0, 255, 9));
        let d = cell_distribution(&w, &c).unwrap();
        // 128..=191 share top digit 2; N(160, 10) essentially never leaves it.
        assert!(d.probs[3][2] > 0.99, "{:?}", d.probs[3]);
    }

    #[test]
    fn empty_tensor_rejected() {
        let c = CheckedConfig::default();
        let w = QuantizedWeights {
            layer: 0,
            shape: [0, 1, 1, 1],
            values: vec![],
        };
        assert!(cell_distribution(&w, &c).is_err());
    }

    #[test]
    fn skipping_ratio_examples() {
        assert!((skipping_ratio(&uniform(), &uniform(), 1).unwrap() - 0.25).abs() < 1e-9);
        assert_eq!(skipping_ratio(&point(2), &point(2), 4).unwrap(), 1.0);
        assert!((skipping_ratio(&uniform(), &point(1), 3).unwrap() - 0.25).abs() < 1e-12);
        assert!(skipping_ratio(&uniform(), &uniform(), 5).is_err());
        assert!(skipping_ratio(&uniform(), &uniform(), 0).is_err());
    }

    #[test]
    fn shift_examples() {
        // mean 120 -> center 96 gives offset -24
        let w = tensor(vec![110, 130]);
        let s = shift_weights(&w, 96, 8).unwrap();
        assert_eq!(s.offset, -24);
        assert_eq!(s.weights.values, vec![86, 106]);
        assert_eq!(s.clip_fraction, 0.0);

        let (clipped, fraction) = apply_offset(&tensor(vec![250, 100]), 10, 8);
        assert_eq!(clipped.values, vec![255, 110]);
        assert_eq!(fraction, 0.5);

        let w = tensor(vec![3, 77, 255]);
        let (same, fraction) = apply_offset(&w, 0, 8);
        assert_eq!(same, w);
        assert_eq!(fraction, 0.0);
    }

    fn network(layers: &[(f64, f64)], seed: u64) -> NetworkModel {
        let spec = NetworkSpec {
            name: "t".into(),
            weight_bits: 8,
            layers: layers
                .iter()
                .enumerate()
                .map(|(i, &(mean, std))| LayerSpec {
                    desc: LayerDescriptor::fc(i, 64, 64),
                    quant: None,
                    weights: WeightSource::Gaussian(GaussianSpec {
                        mean,
                        std,
                        seed: seed + i as u64,
                    }),
                })
                .collect(),
        };
        spec.materialize(Path::new(".")).unwrap()
    }

    #[test]
    fn centered_network_keeps_center() {
        let c = CheckedConfig::default();
        let net = network(&[(96.0, 0.0), (96.0, 0.0), (96.0, 0.0)], 1);
        let plan = select_center(&net, &c, DEFAULT_CLIP_THRESHOLD, &DEFAULT_CENTERS).unwrap();
        assert_eq!(plan.center, Some(96));
        assert_eq!(plan.layers[0].offset, 0);
        assert!(plan.layers.iter().all(|l| l.offset.abs() <= 1), "{:?}", plan.layers);
    }

    #[test]
    fn shared_center_aligns_distinct_layers() {
        let c = CheckedConfig::default();
        let net = network(&[(70.0, 5.0), (180.0, 5.0)], 7);
        let plan = select_center(&net, &c, DEFAULT_CLIP_THRESHOLD, &DEFAULT_CENTERS).unwrap();
        assert!(!plan.fallback);
        let dist = |n: &NetworkModel| -> Vec<CellDistribution> {
            n.layers.iter().map(|l| cell_distribution(&l.weights, &c).unwrap()).collect()
        };
        let before = top_cell_skipping_ratio(&dist(&net), 4);
        let after = top_cell_skipping_ratio(&dist(&plan.apply(&net)), 4);
        assert!(after > before, "before {before}, after {after}");
    }

    #[test]
    fn zero_threshold_with_mass_at_both_ends_falls_back() {
        let c = CheckedConfig::default();
        let mut net = network(&[(100.0, 5.0), (128.0, 5.0)], 3);
        net.layers[1].weights.values[0] = 0;
        net.layers[1].weights.values[1] = 255;
        let plan = select_center(&net, &c, 0.0, &DEFAULT_CENTERS).unwrap();
        assert!(plan.fallback);
        assert_eq!(plan.center, None);
        assert!(plan.layers.iter().all(|l| l.offset == 0));
    }

    #[test]
    fn single_layer_rejected() {
        let c = CheckedConfig::default();
        let net = network(&[(100.0, 5.0)], 3);
        assert!(select_center(&net, &c, 0.001, &DEFAULT_CENTERS).is_err());
    }

    fn image(cells: Vec<u8>, rows: usize, cols: usize, occupied: bool) -> CellImage {
        CellImage {
            coord: CrossbarCoord { pe: 0, apu_row: 0, apu_col: 0 },
            rows,
            cols,
            cells,
            occupant: occupied.then_some(0),
        }
    }

    #[test]
    fn delta_examples() {
        let d = compute_cell_deltas(&image(vec![3], 1, 1, true), &image(vec![1], 1, 1, true)).unwrap();
        assert_eq!(d.get(0, 0), -2);
        assert_eq!(total_pulses(&d), 2);

        let a = image(vec![1, 2, 3, 0], 2, 2, true);
        let d = compute_cell_deltas(&a, &a).unwrap();
        assert!(d.deltas.iter().all(|&x| x == 0));
        assert_eq!(total_pulses(&d), 0);

        let full = image(vec![3; 4], 2, 2, true);
        let d = compute_cell_deltas(&image(vec![0; 4], 2, 2, false), &full).unwrap();
        assert!(d.deltas.iter().all(|&x| x == 3));
        assert_eq!(d.row_pulses[0], RowPulses { max_decrease: 0, max_increase: 3 });

        // an unoccupied crossbar reads as erased whatever its cells say
        let d = compute_cell_deltas(&image(vec![2; 4], 2, 2, false), &full).unwrap();
        assert_eq!(total_pulses(&d), 12);

        assert!(compute_cell_deltas(&image(vec![0; 4], 2, 2, true), &image(vec![0; 2], 1, 2, true)).is_err());
    }

    #[test]
    fn pulses_are_magnitude_sums() {
        let d = compute_cell_deltas(&image(vec![3, 0], 1, 2, true), &image(vec![1, 3], 1, 2, true)).unwrap();
        assert_eq!(total_pulses(&d), 5);
    }

    #[test]
    fn compensation_with_zero_offset_is_identity() {
        let qp = QuantParams::default();
        let x = [1, 5, 9];
        let w = [100, 3, 250];
        assert_eq!(
            compensated_dot_product(&x, &w, 0, &qp, 0).unwrap(),
            dot_product(&x, &w, &qp, 0).unwrap()
        );
        assert!(dot_product(&x, &w[..2], &qp, 0).is_err());
    }

    #[test]
    fn clipped_weight_error_matches_oracle() {
        let qp = QuantParams {
            bias: vec![0.5],
            ..Default::default()
        };
        let x = [3i64, 7, 11];
        let w = [250i64, 10, 128];
        let offset = 10;
        let shifted: Vec<i64> = w.iter().map(|&v| (v + offset).clamp(0, 255)).collect();
        let comp = compensated_dot_product(&x, &shifted, offset, &qp, 0).unwrap();
        let orig = dot_product(&x, &w, &qp, 0).unwrap();
        // weight 0 lost 5 levels to clipping
        let clip_error = 255 - (250 + offset);
        let expected = clip_error as f64 * (x[0] + qp.zp_x) as f64 / (qp.q_w * qp.q_x);
        assert!((comp.value - orig.value - expected).abs() < 1e-12);
    }

    fn random_image(seed: u64, rows: usize, cols: usize) -> CellImage {
        let cells = gaussian_weights(rows * cols, 1.5, 1.2, 3, seed);
        image(cells, rows, cols, true)
    }

    /// Per-cell loop, independent of [`total_pulses`] and [`delta_summary`].
    fn pulses_oracle(old: &CellImage, new: &CellImage) -> u64 {
        let mut total = 0u64;
        for r in 0..old.rows {
            for c in 0..old.cols {
                let (a, b) = (old.get(r, c) as i64, new.get(r, c) as i64);
                total += (a - b).unsigned_abs();
            }
        }
        total
    }

    proptest! {
        #[test]
        fn pulse_totals_match_oracle(a in any::<u64>(), b in any::<u64>()) {
            let old = random_image(a, 8, 12);
            let new = random_image(b, 8, 12);
            let d = compute_cell_deltas(&old, &new).unwrap();
            prop_assert_eq!(total_pulses(&d), pulses_oracle(&old, &new));
            let s = delta_summary(Some(&old.cells), &new.cells, 12);
            prop_assert_eq!(s, d.summary());
        }

        #[test]
        fn pulses_symmetric_and_triangle(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
            let (x, y, z) = (random_image(a, 4, 8), random_image(b, 4, 8), random_image(c, 4, 8));
            let p = |u: &CellImage, v: &CellImage| total_pulses(&compute_cell_deltas(u, v).unwrap());
            prop_assert_eq!(p(&x, &y), p(&y, &x));
            prop_assert!(p(&x, &z) <= p(&x, &y) + p(&y, &z));
        }

        #[test]
        fn skipping_ratio_bounds_and_symmetry(a in prop::collection::vec(0u64..50, 256), b in prop::collection::vec(0u64..50, 256)) {
            prop_assume!(a.iter().sum::<u64>() > 0 && b.iter().sum::<u64>() > 0);
            let pa = CellDistribution::from_histogram(&a, 2, 4).unwrap();
            let pb = CellDistribution::from_histogram(&b, 2, 4).unwrap();
            for i in 1..=4 {
                let s = skipping_ratio(&pa, &pb, i).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
                prop_assert_eq!(s, skipping_ratio(&pb, &pa, i).unwrap());
                prop_assert!((pa.probs[i - 1].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn compensation_exact_without_clipping(
            (offset, xw) in (-255i64..=255).prop_flat_map(|off| {
                let range = off.max(0) - off..256 - off.max(0);
                (Just(off), prop::collection::vec((0i64..256, range), 1..64))
            }),
        ) {
            let qp = QuantParams::default();
            let x: Vec<i64> = xw.iter().map(|p| p.0).collect();
            let w: Vec<i64> = xw.iter().map(|p| p.1).collect();
            let shifted: Vec<i64> = w.iter().map(|&v| v + offset).collect();
            let a = compensated_dot_product(&x, &shifted, offset, &qp, 0).unwrap();
            let b = dot_product(&x, &w, &qp, 0).unwrap();
            prop_assert_eq!(a.accumulator, b.accumulator);
            prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
        }
    }
}
