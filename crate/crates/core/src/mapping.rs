//! Conventional CONV/FC mapping onto crossbars.
//!
//! Each kernel is unrolled into one crossbar column group: input channel
//! major, then kernel row, then kernel column. A weight spans
//! `cells_per_weight` adjacent columns, least significant slice first. Tall
//! kernels split into vertical slices of `crossbar_rows`, wide layers into
//! horizontal slices of `crossbar_cols / cells_per_weight` kernels. One PE row
//! holds one vertical slice across up to `apu_cols_per_pe` horizontal slices.

use serde::{Deserialize, Serialize};

use crate::config::CheckedConfig;
use crate::error::{Error, Result};
use crate::model::{LayerDescriptor, QuantizedWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CrossbarCoord {
    pub pe: usize,
    pub apu_row: usize,
    pub apu_col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceRequirement {
    pub layer: usize,
    pub vertical_slices: usize,
    pub horizontal_slices: usize,
    /// Horizontal slices grouped by PE row width.
    pub horizontal_groups: usize,
    pub pe_rows_needed: usize,
    pub num_windows: u64,
}

impl ResourceRequirement {
    pub fn crossbars(&self) -> usize {
        self.vertical_slices * self.horizontal_slices
    }
}

pub fn decompose_weight_to_cells(w: u32, weight_bits: u32, bits_per_cell: u32) -> Result<Vec<u8>> {
    if bits_per_cell == 0 || !weight_bits.is_multiple_of(bits_per_cell) {
        return Err(Error::InvalidArgument(format!(
            "{bits_per_cell} bits per cell does not divide {weight_bits}"
        )));
    }
    let max = (1u64 << weight_bits) - 1;
    if w as u64 > max {
        return Err(Error::OutOfRange {
            value: w as i64,
            max: max as i64,
        });
    }
    let mask = (1u32 << bits_per_cell) - 1;
    Ok((0..weight_bits / bits_per_cell)
        .map(|i| ((w >> (i * bits_per_cell)) & mask) as u8)
        .collect())
}

pub fn compose_cells_to_weight(cells: &[u8], bits_per_cell: u32) -> Result<u32> {
    let levels = 1u32 << bits_per_cell;
    let mut w = 0u32;
    for (i, &c) in cells.iter().enumerate() {
        if c as u32 >= levels {
            return Err(Error::OutOfRange {
                value: c as i64,
                max: levels as i64 - 1,
            });
        }
        w |= (c as u32) << (i as u32 * bits_per_cell);
    }
    Ok(w)
}

pub fn kernels_per_slice(config: &CheckedConfig) -> usize {
    config.crossbar_cols / config.cells_per_weight
}

pub fn map_layer(layer: &LayerDescriptor, config: &CheckedConfig) -> ResourceRequirement {
    let vertical_slices = layer.kernel_len().div_ceil(config.crossbar_rows);
    let horizontal_slices = layer.out_channels.div_ceil(kernels_per_slice(config));
    let horizontal_groups = horizontal_slices.div_ceil(config.apu_cols_per_pe);
    ResourceRequirement {
        layer: layer.id,
        vertical_slices,
        horizontal_slices,
        horizontal_groups,
        pe_rows_needed: vertical_slices * horizontal_groups,
        num_windows: layer.num_windows(),
    }
}

/// Cycles to compute every window of a layer with `replicas` copies of its
/// kernels, all slices in lockstep.
pub fn layer_compute_latency(req: &ResourceRequirement, replicas: u32, config: &CheckedConfig) -> Result<u64> {
    if replicas == 0 {
        return Err(Error::ZeroReplication);
    }
    Ok(req.num_windows.div_ceil(replicas as u64)
        * config.activation_bits as u64
        * config.crossbar_compute_latency)
}

/// Rows (unrolled kernel positions) and kernels that land in slice `(v, h)`.
pub fn slice_extent(layer: &LayerDescriptor, v: usize, h: usize, config: &CheckedConfig) -> (usize, usize) {
    let rows = (layer.kernel_len() - v * config.crossbar_rows).min(config.crossbar_rows);
    let kps = kernels_per_slice(config);
    let kernels = (layer.out_channels - h * kps).min(kps);
    (rows, kernels)
}

/// Weight cells actually carrying data in slice `(v, h)`.
pub fn populated_cells(layer: &LayerDescriptor, v: usize, h: usize, config: &CheckedConfig) -> usize {
    let (rows, kernels) = slice_extent(layer, v, h, config);
    rows * kernels * config.cells_per_weight
}

/// Fills `cells` (row-major, `crossbar_rows x crossbar_cols`) with slice
/// `(v, h)` of the layer. Unused cells are 0.
pub fn fill_slice(
    layer: &LayerDescriptor,
    weights: &QuantizedWeights,
    v: usize,
    h: usize,
    config: &CheckedConfig,
    cells: &mut [u8],
) {
    let cols = config.crossbar_cols;
    debug_assert_eq!(cells.len(), config.crossbar_rows * cols);
    cells.fill(0);
    let (rows, kernels) = slice_extent(layer, v, h, config);
    let kps = kernels_per_slice(config);
    let cpw = config.cells_per_weight;
    let bits = config.bits_per_cell;
    let mask = (1u8 << bits) - 1;
    let mut table = [[0u8; 8]; 256];
    for (w, levels) in table.iter_mut().enumerate() {
        for (j, level) in levels.iter_mut().enumerate().take(cpw) {
            *level = ((w as u32 >> (j as u32 * bits)) as u8) & mask;
        }
    }
    let kernel_len = layer.kernel_len();
    for k in 0..kernels {
        // Tensor layout (c, r, s) is already channel-major.
        let kernel = &weights.values[(h * kps + k) * kernel_len + v * config.crossbar_rows..][..rows];
        for (row, &w) in kernel.iter().enumerate() {
            let base = row * cols + k * cpw;
            cells[base..base + cpw].copy_from_slice(&table[w as usize][..cpw]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellImage {
    pub coord: CrossbarCoord,
    pub rows: usize,
    pub cols: usize,
    /// Row-major cell levels.
    pub cells: Vec<u8>,
    pub occupant: Option<usize>,
}

impl CellImage {
    /// An erased crossbar: every cell at level 0, no occupant.
    pub fn erased(coord: CrossbarCoord, rows: usize, cols: usize) -> Self {
        CellImage {
            coord,
            rows,
            cols,
            cells: vec![0; rows * cols],
            occupant: None,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.cells[row * self.cols..(row + 1) * self.cols]
    }
}

/// Images of every slice of `layer`, slice `(v, h)` placed at
/// `assignment[v * horizontal_slices + h]`.
pub fn build_cell_images(
    layer: &LayerDescriptor,
    weights: &QuantizedWeights,
    assignment: &[CrossbarCoord],
    config: &CheckedConfig,
) -> Result<Vec<CellImage>> {
    let req = map_layer(layer, config);
    if assignment.len() < req.crossbars() {
        return Err(Error::Geometry(format!(
            "layer {} needs {} crossbars, assignment has {}",
            layer.id,
            req.crossbars(),
            assignment.len()
        )));
    }
    if weights.len() != layer.weight_count() {
        return Err(Error::Geometry(format!(
            "layer {} weight tensor has {} values, expected {}",
            layer.id,
            weights.len(),
            layer.weight_count()
        )));
    }
    let mut images = Vec::with_capacity(req.crossbars());
    for v in 0..req.vertical_slices {
        for h in 0..req.horizontal_slices {
            let coord = assignment[v * req.horizontal_slices + h];
            let mut image = CellImage::erased(coord, config.crossbar_rows, config.crossbar_cols);
            fill_slice(layer, weights, v, h, config, &mut image.cells);
            image.occupant = Some(layer.id);
            images.push(image);
        }
    }
    Ok(images)
}
