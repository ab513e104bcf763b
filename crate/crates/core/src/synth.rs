//! Synthetic networks with seeded Gaussian weights.
//!
//! Real checkpoints are out of reach here, so the shipped sample networks and
//! the randomized test suites are built from these generators. Every output
//! is a pure function of its seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::{GaussianSpec, LayerDescriptor, LayerKind, LayerSpec, NetworkSpec, WeightSource};

/// splitmix64 finalizer over the pair.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` samples of `round(N(mean, std²))` clipped to `[0, max]`.
pub fn gaussian_weights(count: usize, mean: f64, std: f64, max: u32, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(mean, std).expect("finite nonnegative std");
    (0..count)
        .map(|_| normal.sample(&mut rng).round().clamp(0.0, max as f64) as u8)
        .collect()
}

fn gaussian_layer(desc: LayerDescriptor, mean: f64, std: f64, seed: u64) -> LayerSpec {
    LayerSpec {
        desc,
        quant: None,
        weights: WeightSource::Gaussian(GaussianSpec { mean, std, seed }),
    }
}

/// Assigns each layer a distinct-ish mean in [48, 208) and std in [6, 16).
fn with_random_stats(name: &str, descs: Vec<LayerDescriptor>, seed: u64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = descs
        .into_iter()
        .map(|d| {
            let mean = rng.random_range(48.0..208.0f64).round();
            let std = rng.random_range(6.0..16.0f64).round();
            let layer_seed = mix_seed(seed, d.id as u64);
            gaussian_layer(d, mean, std, layer_seed)
        })
        .collect();
    NetworkSpec {
        name: name.into(),
        weight_bits: 8,
        layers,
    }
}

/// Output bytes after an optional 2x2 pooling stage.
fn pooled(mut d: LayerDescriptor, pool: bool) -> LayerDescriptor {
    if pool {
        d.output_bytes = ((d.output_h() / 2) * (d.output_w() / 2) * d.out_channels) as u64;
    }
    d
}

/// VGG-16: 13 CONV layers and 3 FC layers at 224x224 input.
pub fn vgg16(seed: u64) -> NetworkSpec {
    // (in, out, spatial, pool after)
    let convs = [
        (3, 64, 224, false),
        (64, 64, 224, true),
        (64, 128, 112, false),
        (128, 128, 112, true),
        (128, 256, 56, false),
        (256, 256, 56, false),
        (256, 256, 56, true),
        (256, 512, 28, false),
        (512, 512, 28, false),
        (512, 512, 28, true),
        (512, 512, 14, false),
        (512, 512, 14, false),
        (512, 512, 14, true),
    ];
    let mut descs: Vec<LayerDescriptor> = convs
        .iter()
        .enumerate()
        .map(|(id, &(i, o, hw, pool))| pooled(LayerDescriptor::conv(id, 3, i, o, hw, 1, 1), pool))
        .collect();
    let n = descs.len();
    descs.push(LayerDescriptor::fc(n, 512 * 7 * 7, 4096));
    descs.push(LayerDescriptor::fc(n + 1, 4096, 4096));
    descs.push(LayerDescriptor::fc(n + 2, 4096, 1000));
    with_random_stats("vgg16-synthetic", descs, seed)
}

/// ResNet-50-shaped chain (skip connections flattened away): stem, one
/// bottleneck per stage, and the classifier.
pub fn resnet_like(seed: u64) -> NetworkSpec {
    let mut descs = vec![pooled(LayerDescriptor::conv(0, 7, 3, 64, 224, 2, 3), true)];
    let stages = [(64, 256, 56), (128, 512, 28), (256, 1024, 14), (512, 2048, 7)];
    let mut in_ch = 64;
    for &(mid, out, hw) in &stages {
        let id = descs.len();
        descs.push(LayerDescriptor::conv(id, 1, in_ch, mid, hw, 1, 0));
        descs.push(LayerDescriptor::conv(id + 1, 3, mid, mid, hw, 1, 1));
        descs.push(LayerDescriptor::conv(id + 2, 1, mid, out, hw, 1, 0));
        in_ch = out;
    }
    let id = descs.len();
    descs.push(LayerDescriptor::fc(id, 2048, 1000));
    with_random_stats("resnet-like-synthetic", descs, seed)
}

/// BERT-Base-shaped FC-only stack: `blocks` encoder blocks of QKV, output
/// projection, and the two feed-forward layers.
pub fn bert_like(blocks: usize, seed: u64) -> NetworkSpec {
    let mut descs = Vec::new();
    for _ in 0..blocks {
        for (i, o) in [(768, 2304), (768, 768), (768, 3072), (3072, 768)] {
            descs.push(LayerDescriptor::fc(descs.len(), i, o));
        }
    }
    with_random_stats("bert-like-synthetic", descs, seed)
}

/// Two identically shaped layers with the given weight means and std.
pub fn gaussian_pair(kind: LayerKind, means: (f64, f64), std: f64, seed: u64) -> NetworkSpec {
    let descs = match kind {
        LayerKind::Conv => vec![
            LayerDescriptor::conv(0, 3, 32, 64, 16, 1, 1),
            LayerDescriptor::conv(1, 3, 64, 32, 16, 1, 1),
        ],
        LayerKind::Fc => vec![LayerDescriptor::fc(0, 512, 512), LayerDescriptor::fc(1, 512, 512)],
    };
    let layers = descs
        .into_iter()
        .zip([means.0, means.1])
        .map(|(d, mean)| {
            let s = mix_seed(seed, d.id as u64);
            gaussian_layer(d, mean, std, s)
        })
        .collect();
    NetworkSpec {
        name: "gaussian-pair".into(),
        weight_bits: 8,
        layers,
    }
}

/// A small random chain of 1..=`max_layers` layers mixing CONV and FC, with
/// per-layer Gaussian weights (distinct means, std <= 16).
pub fn random_network(seed: u64, max_layers: usize) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=max_layers.max(1));
    let mut descs = Vec::with_capacity(count);
    let mut channels = *[3usize, 8, 16].get(rng.random_range(0..3)).unwrap();
    let mut hw = rng.random_range(4..=32usize);
    let mut flat = false;
    for id in 0..count {
        let fc = flat || (id > 0 && rng.random_bool(0.25));
        if fc {
            let inputs = if flat { channels } else { channels * hw * hw };
            let outputs = rng.random_range(8..=512usize);
            descs.push(LayerDescriptor::fc(id, inputs, outputs));
            channels = outputs;
            flat = true;
        } else {
            let kernel = if rng.random_bool(0.7) { 3 } else { 1 };
            let out = rng.random_range(4..=128usize);
            let d = LayerDescriptor::conv(id, kernel, channels, out, hw, 1, kernel / 2);
            channels = out;
            descs.push(d);
            if hw > 4 && rng.random_bool(0.3) {
                let last = descs.pop().unwrap();
                descs.push(pooled(last, true));
                hw /= 2;
            }
        }
    }
    with_random_stats("random", descs, mix_seed(seed, 0xA5A5))
}

/// A chain of CONV layers only, sized for exhaustive replication searches on
/// tiny accelerators.
pub fn small_conv_chain(seed: u64, layers: usize) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels = rng.random_range(8..=64usize);
    let mut descs = Vec::with_capacity(layers);
    for id in 0..layers {
        let out = rng.random_range(8..=64usize);
        let hw = rng.random_range(6..=40usize);
        descs.push(LayerDescriptor::conv(id, 3, channels, out, hw, 1, 1));
        channels = out;
    }
    with_random_stats("conv-chain", descs, mix_seed(seed, 0x5A5A))
}
