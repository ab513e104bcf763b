//! Network data model and the network file format.
//!
//! A network file is a JSON document:
//!
//! ```json
//! {
//!   "name": "tiny",
//!   "weight_bits": 8,
//!   "layers": [
//!     { "id": 0, "kind": "conv", "kernel_h": 3, "kernel_w": 3,
//!       "in_channels": 3, "out_channels": 8, "input_h": 8, "input_w": 8,
//!       "stride": 1, "padding": 1, "input_bytes": 192, "output_bytes": 512,
//!       "weights": { "file": "tiny.l0.bin" } }
//!   ]
//! }
//! ```
//!
//! Weights come from one of three sources: `{"file": path}` names a raw
//! sidecar with one byte per weight (relative paths resolve against the
//! network file's directory), `{"base64": text}` inlines the same bytes, and
//! `{"gaussian": {"mean", "std", "seed"}}` draws rounded, clipped normal
//! samples from a seeded ChaCha8 stream. Tensor layout is
//! `(out_channels, in_channels, kernel_h, kernel_w)`, row-major.
//!
//! `quant` is optional per layer; omitted fields take the defaults of
//! [`QuantParams`].

use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub id: usize,
    pub kind: LayerKind,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    pub input_bytes: u64,
    pub output_bytes: u64,
}

fn one() -> usize {
    1
}

impl LayerDescriptor {
    pub fn conv(
        id: usize,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        input_hw: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let mut layer = LayerDescriptor {
            id,
            kind: LayerKind::Conv,
            kernel_h: kernel,
            kernel_w: kernel,
            in_channels,
            out_channels,
            input_h: input_hw,
            input_w: input_hw,
            stride,
            padding,
            input_bytes: 0,
            output_bytes: 0,
        };
        layer.input_bytes = (input_hw * input_hw * in_channels) as u64;
        layer.output_bytes = (layer.output_h() * layer.output_w() * out_channels) as u64;
        layer
    }

    pub fn fc(id: usize, inputs: usize, outputs: usize) -> Self {
        LayerDescriptor {
            id,
            kind: LayerKind::Fc,
            kernel_h: 1,
            kernel_w: 1,
            in_channels: inputs,
            out_channels: outputs,
            input_h: 1,
            input_w: 1,
            stride: 1,
            padding: 0,
            input_bytes: inputs as u64,
            output_bytes: outputs as u64,
        }
    }

    fn output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
        let padded = input + 2 * padding;
        if stride == 0 || padded < kernel {
            0
        } else {
            (padded - kernel) / stride + 1
        }
    }

    pub fn output_h(&self) -> usize {
        Self::output_dim(self.input_h, self.kernel_h, self.stride, self.padding)
    }

    pub fn output_w(&self) -> usize {
        Self::output_dim(self.input_w, self.kernel_w, self.stride, self.padding)
    }

    /// Sliding-window positions; 1 for FC layers.
    pub fn num_windows(&self) -> u64 {
        (self.output_h() * self.output_w()) as u64
    }

    /// Weights in one kernel (one crossbar column group).
    pub fn kernel_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }

    pub fn weight_count(&self) -> usize {
        self.kernel_len() * self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::layer(self.id, m));
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return err("kernel dimensions must be positive");
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return err("channel counts must be positive");
        }
        if self.stride == 0 {
            return err("stride must be positive");
        }
        if self.output_h() == 0 || self.output_w() == 0 {
            return err("output dimensions are not positive");
        }
        if self.kind == LayerKind::Fc
            && (self.kernel_h != 1 || self.kernel_w != 1 || self.input_h != 1 || self.input_w != 1)
        {
            return err("FC layers must have 1x1 kernels and 1x1 inputs");
        }
        Ok(())
    }
}

/// Uniform quantization parameters of one layer.
///
/// Real values relate to quantized ones as `w_f = (w_q + zp_w) / q_w` and
/// `x_f = (x_q + zp_x) / q_x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantParams {
    pub q_w: f64,
    pub zp_w: i64,
    pub q_x: f64,
    pub zp_x: i64,
    /// Per output channel; empty means all zero.
    pub bias: Vec<f64>,
}

impl Default for QuantParams {
    fn default() -> Self {
        QuantParams {
            q_w: 64.0,
            zp_w: -128,
            q_x: 16.0,
            zp_x: 0,
            bias: Vec::new(),
        }
    }
}

impl QuantParams {
    pub fn bias_for(&self, channel: usize) -> f64 {
        self.bias.get(channel).copied().unwrap_or(0.0)
    }

    pub fn validate(&self, layer: usize, weight_bits: u32, out_channels: usize) -> Result<()> {
        if !(self.q_w > 0.0 && self.q_w.is_finite()) {
            return Err(Error::layer(layer, "q_w must be positive"));
        }
        if !(self.q_x > 0.0 && self.q_x.is_finite()) {
            return Err(Error::layer(layer, "q_x must be positive"));
        }
        // Adjusted zero points (zp_w - offset) must stay representable for
        // any offset within the weight range.
        let limit = 1i64 << (weight_bits + 1);
        if self.zp_w.abs() > limit {
            return Err(Error::layer(layer, format!("zp_w {} outside [-{limit}, {limit}]", self.zp_w)));
        }
        if !self.bias.is_empty() && self.bias.len() != out_channels {
            return Err(Error::layer(
                layer,
                format!("bias has {} entries for {out_channels} channels", self.bias.len()),
            ));
        }
        Ok(())
    }
}

/// Quantized weight tensor, shape `(out_channels, in_channels, kernel_h, kernel_w)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedWeights {
    pub layer: usize,
    pub shape: [usize; 4],
    pub values: Vec<u8>,
}

impl QuantizedWeights {
    pub fn new(layer: usize, shape: [usize; 4], values: Vec<u8>, weight_bits: u32) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::layer(
                layer,
                format!("weight tensor has {} values, descriptor needs {expected}", values.len()),
            ));
        }
        let max = (1u32 << weight_bits) - 1;
        if let Some(&bad) = values.iter().find(|&&v| v as u32 > max) {
            return Err(Error::layer(
                layer,
                Error::OutOfRange {
                    value: bad as i64,
                    max: max as i64,
                }
                .to_string(),
            ));
        }
        Ok(QuantizedWeights { layer, shape, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Weight of kernel `out`, input channel `c`, kernel row `r`, column `s`.
    pub fn get(&self, out: usize, c: usize, r: usize, s: usize) -> u8 {
        let [_, ci, kh, kw] = self.shape;
        self.values[((out * ci + c) * kh + r) * kw + s]
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let sum: u64 = self.values.iter().map(|&v| v as u64).sum();
        sum as f64 / self.values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub desc: LayerDescriptor,
    pub quant: QuantParams,
    pub weights: QuantizedWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub name: String,
    pub weight_bits: u32,
    pub layers: Vec<Layer>,
}

impl NetworkModel {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &LayerDescriptor> {
        self.layers.iter().map(|l| &l.desc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    File(PathBuf),
    Base64(String),
    Gaussian(GaussianSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub desc: LayerDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantParams>,
    pub weights: WeightSource,
}

/// On-disk form of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default = "eight")]
    pub weight_bits: u32,
    pub layers: Vec<LayerSpec>,
}

fn eight() -> u32 {
    8
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network spec serializes")
    }

    /// Re-seeds every generated layer, leaving file and inline weights alone.
    pub fn reseed(&mut self, seed: u64) {
        for layer in &mut self.layers {
            if let WeightSource::Gaussian(g) = &mut layer.weights {
                g.seed = synth::mix_seed(seed, g.seed);
            }
        }
    }

    /// Resolves weight sources and validates the result. `base_dir` anchors
    /// relative sidecar paths.
    pub fn materialize(&self, base_dir: &Path) -> Result<NetworkModel> {
        if self.layers.is_empty() {
            return Err(Error::EmptyNetwork);
        }
        if self.weight_bits == 0 || self.weight_bits > 8 {
            return Err(Error::InvalidArgument(format!(
                "weight_bits {} not in 1..=8",
                self.weight_bits
            )));
        }
        let max = (1u32 << self.weight_bits) - 1;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (position, spec) in self.layers.iter().enumerate() {
            let desc = spec.desc.clone();
            if desc.id != position {
                return Err(Error::layer(
                    desc.id,
                    format!("layer ids must be contiguous from 0; expected {position}"),
                ));
            }
            desc.validate()?;
            let shape = [desc.out_channels, desc.in_channels, desc.kernel_h, desc.kernel_w];
            let count = desc.weight_count();
            let values = match &spec.weights {
                WeightSource::File(path) => {
                    let full = if path.is_absolute() {
                        path.clone()
                    } else {
                        base_dir.join(path)
                    };
                    std::fs::read(&full).map_err(|source| Error::Io { path: full, source })?
                }
                WeightSource::Base64(text) => base64::engine::general_purpose::STANDARD
                    .decode(text.trim())
                    .map_err(|e| Error::layer(desc.id, format!("bad base64 weights: {e}")))?,
                WeightSource::Gaussian(g) => {
                    if !(g.std >= 0.0) || !g.mean.is_finite() || !g.std.is_finite() {
                        return Err(Error::layer(desc.id, "gaussian mean/std must be finite, std >= 0"));
                    }
                    synth::gaussian_weights(count, g.mean, g.std, max, g.seed)
                }
            };
            let weights = QuantizedWeights::new(desc.id, shape, values, self.weight_bits)?;
            let quant = spec.quant.clone().unwrap_or_default();
            quant.validate(desc.id, self.weight_bits, desc.out_channels)?;
            layers.push(Layer { desc, quant, weights });
        }
        Ok(NetworkModel {
            name: self.name.clone(),
            weight_bits: self.weight_bits,
            layers,
        })
    }
}

pub fn load_network(path: &Path) -> Result<NetworkModel> {
    load_network_spec(path)?.materialize(path.parent().unwrap_or(Path::new(".")))
}

pub fn load_network_spec(path: &Path) -> Result<NetworkSpec> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    NetworkSpec::from_json(&text).map_err(|message| Error::Parse {
        path: path.to_owned(),
        message,
    })
}

/// Writes `model` to `path` with one raw sidecar per layer named
/// `<stem>.l<id>.bin` next to it.
pub fn save_network(model: &NetworkModel, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "network".into());
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let name = format!("{stem}.l{}.bin", layer.desc.id);
        let full = dir.join(&name);
        std::fs::write(&full, &layer.weights.values).map_err(|source| Error::Io { path: full, source })?;
        layers.push(LayerSpec {
            desc: layer.desc.clone(),
            quant: Some(layer.quant.clone()),
            weights: WeightSource::File(PathBuf::from(name)),
        });
    }
    let spec = NetworkSpec {
        name: model.name.clone(),
        weight_bits: model.weight_bits,
        layers,
    };
    std::fs::write(path, spec.to_json()).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer_spec() -> NetworkSpec {
        let conv = LayerDescriptor::conv(0, 3, 3, 8, 4, 1, 1);
        let fc = LayerDescriptor::fc(1, 8, 4);
        NetworkSpec {
            name: "two".into(),
            weight_bits: 8,
            layers: vec![
                LayerSpec {
                    desc: conv,
                    quant: None,
                    weights: WeightSource::Gaussian(GaussianSpec {
                        mean: 128.0,
                        std: 20.0,
                        seed: 1,
                    }),
                },
                LayerSpec {
                    desc: fc,
                    quant: None,
                    weights: WeightSource::Base64(
                        base64::engine::general_purpose::STANDARD.encode([7u8; 32]),
                    ),
                },
            ],
        }
    }

    #[test]
    fn two_layer_weight_counts() {
        let model = two_layer_spec().materialize(Path::new(".")).unwrap();
        assert_eq!(model.len(), 2);
        assert_eq!(model.layers[0].weights.len(), 216);
        assert_eq!(model.layers[1].weights.len(), 32);
        assert!(model.layers[1].weights.values.iter().all(|&v| v == 7));
    }

    #[test]
    fn empty_network_rejected() {
        let spec = NetworkSpec {
            name: String::new(),
            weight_bits: 8,
            layers: vec![],
        };
        let err = spec.materialize(Path::new(".")).unwrap_err();
        assert_eq!(err.to_string(), "empty network");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut spec = two_layer_spec();
        spec.layers[1].weights =
            WeightSource::Base64(base64::engine::general_purpose::STANDARD.encode([1u8; 31]));
        let err = spec.materialize(Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("31 values"), "{err}");
    }

    #[test]
    fn out_of_range_value_rejected() {
        let mut spec = two_layer_spec();
        spec.weight_bits = 4;
        spec.layers[0].weights = WeightSource::Base64(
            base64::engine::general_purpose::STANDARD.encode([16u8; 216]),
        );
        let err = spec.materialize(Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn non_contiguous_ids_rejected() {
        let mut spec = two_layer_spec();
        spec.layers[1].desc.id = 5;
        assert!(spec.materialize(Path::new(".")).is_err());
    }

    #[test]
    fn fc_must_be_one_by_one() {
        let mut d = LayerDescriptor::fc(0, 4, 4);
        d.kernel_h = 3;
        assert!(d.validate().is_err());
    }

    #[test]
    fn output_shape() {
        let d = LayerDescriptor::conv(0, 3, 3, 64, 224, 1, 1);
        assert_eq!(d.num_windows(), 224 * 224);
        let d = LayerDescriptor::conv(0, 7, 3, 64, 224, 2, 3);
        assert_eq!(d.output_h(), 112);
        let bad = LayerDescriptor::conv(0, 5, 3, 4, 2, 1, 0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn save_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let model = two_layer_spec().materialize(Path::new(".")).unwrap();
        let path = dir.path().join("net.json");
        save_network(&model, &path).unwrap();
        assert!(dir.path().join("net.l0.bin").exists());
        let back = load_network(&path).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn unparsable_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{ not json").unwrap();
        let err = load_network(&path).unwrap_err();
        assert!(err.to_string().contains("bad.json"), "{err}");
    }
}
