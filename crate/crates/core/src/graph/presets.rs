//! Named CIFAR architectures.
//!
//! Every preset takes 3×32×32 inputs and accepts a width multiplier that scales
//! all channel counts (at least one channel survives), so the same topology can
//! be exercised at desk scale.

use std::collections::BTreeMap;

use super::{Network, NetworkBuilder, NodeId, StructureKind};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PresetOptions {
    pub num_classes: usize,
    /// Channel multiplier; 1.0 gives the reference widths.
    pub width: f64,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions {
            num_classes: 10,
            width: 1.0,
            seed: 0,
        }
    }
}

impl PresetOptions {
    pub fn new(num_classes: usize) -> Self {
        PresetOptions {
            num_classes,
            ..Self::default()
        }
    }

    pub fn width(mut self, width: f64) -> Self {
        self.width = width;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn scale(&self, channels: usize) -> usize {
        ((channels as f64 * self.width).round() as usize).max(1)
    }

    fn check(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::Config(format!("width multiplier {} must be positive", self.width)));
        }
        Ok(())
    }
}

pub trait Preset: Send + Sync {
    fn name(&self) -> &'static str;
    fn summary(&self) -> &'static str;
    fn build(&self, opts: &PresetOptions) -> Result<Network>;
}

/// Architectures addressable by name.
pub struct PresetRegistry {
    entries: BTreeMap<&'static str, Box<dyn Preset>>,
}

impl PresetRegistry {
    pub fn empty() -> Self {
        PresetRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Vgg16Cifar));
        r.register(Box::new(GoogLeNetCifar));
        r.register(Box::new(ResNetCifar { depth: 56 }));
        r.register(Box::new(ResNetCifar { depth: 110 }));
        r.register(Box::new(DenseNet40));
        r
    }

    /// Adds or replaces the preset under its name.
    pub fn register(&mut self, preset: Box<dyn Preset>) {
        self.entries.insert(preset.name(), preset);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Preset> {
        self.entries.get(name).map(|b| b.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn build(&self, name: &str, opts: &PresetOptions) -> Result<Network> {
        let preset = self.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown preset {name:?}; available: {}",
                self.names().join(", ")
            ))
        })?;
        opts.check()?;
        let mut net = preset.build(opts)?;
        net.metadata.insert("preset".into(), name.into());
        net.metadata.insert("width".into(), opts.width.to_string());
        net.metadata.insert("init_seed".into(), opts.seed.to_string());
        Ok(net)
    }
}

impl Default for PresetRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

pub fn build_preset(name: &str, opts: &PresetOptions) -> Result<Network> {
    PresetRegistry::with_defaults().build(name, opts)
}

fn cifar_builder(seed: u64) -> NetworkBuilder {
    NetworkBuilder::new(3, 32, 32, seed)
}

struct Vgg16Cifar;

/// Conv widths; 0 marks a 2×2 max pool.
const VGG16: [usize; 17] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512];

impl Preset for Vgg16Cifar {
    fn name(&self) -> &'static str {
        "vgg16_cifar"
    }

    fn summary(&self) -> &'static str {
        "13 conv-BN-ReLU layers, avgpool, 512-wide hidden dense layer with BN"
    }

    fn build(&self, opts: &PresetOptions) -> Result<Network> {
        let mut b = cifar_builder(opts.seed);
        let mut x = b.input();
        let mut layer = 0;
        for &c in &VGG16 {
            if c == 0 {
                x = b.max_pool(x, 2, 2, 0)?;
                continue;
            }
            layer += 1;
            b.begin_block(StructureKind::Plain, format!("conv{layer}"));
            x = b.conv_bn_relu(x, opts.scale(c), 3, 1, 1, false)?;
            b.end_block();
        }
        x = b.avg_pool(x, 2, 2)?;
        x = b.dense(x, opts.scale(512))?;
        x = b.batch_norm(x)?;
        x = b.relu(x)?;
        let logits = b.dense(x, opts.num_classes)?;
        b.finish(logits)
    }
}

struct ResNetCifar {
    depth: usize,
}

impl Preset for ResNetCifar {
    fn name(&self) -> &'static str {
        match self.depth {
            56 => "resnet56",
            110 => "resnet110",
            _ => "resnet",
        }
    }

    fn summary(&self) -> &'static str {
        "basic-block residual network, 3 stages of 16/32/64 channels, zero-padded shortcuts"
    }

    fn build(&self, opts: &PresetOptions) -> Result<Network> {
        let n = (self.depth - 2) / 6;
        let mut b = cifar_builder(opts.seed);
        let mut x = b.conv_bn_relu(b.input(), opts.scale(16), 3, 1, 1, false)?;
        for (stage, planes) in [16, 32, 64].into_iter().enumerate() {
            let planes = opts.scale(planes);
            for i in 0..n {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                b.begin_block(StructureKind::Residual, format!("layer{}.{i}", stage + 1));
                x = basic_block(&mut b, x, planes, stride)?;
                b.end_block();
            }
        }
        let pooled = b.global_avg_pool(x)?;
        let logits = b.dense(pooled, opts.num_classes)?;
        b.finish(logits)
    }
}

fn basic_block(b: &mut NetworkBuilder, x: NodeId, planes: usize, stride: usize) -> Result<NodeId> {
    let in_planes = b.channels(x);
    let h = b.conv_bn_relu(x, planes, 3, stride, 1, false)?;
    let h = b.conv(h, planes, 3, 1, 1, false)?;
    let h = b.zero_batch_norm(h)?;
    let shortcut = if stride != 1 || in_planes != planes {
        let extra = planes.checked_sub(in_planes).ok_or_else(|| {
            Error::Config(format!("residual stage narrows from {in_planes} to {planes} channels"))
        })?;
        b.channel_pad(x, stride, extra / 2, extra - extra / 2)?
    } else {
        x
    };
    let sum = b.add(h, shortcut)?;
    b.relu(sum)
}

struct DenseNet40;

impl Preset for DenseNet40 {
    fn name(&self) -> &'static str {
        "densenet40"
    }

    fn summary(&self) -> &'static str {
        "3 dense blocks of 12 BN-ReLU-conv layers, growth 12, width-preserving transitions"
    }

    fn build(&self, opts: &PresetOptions) -> Result<Network> {
        let growth = opts.scale(12);
        let mut b = cifar_builder(opts.seed);
        b.begin_block(StructureKind::Plain, "stem");
        let mut x = b.conv(b.input(), 2 * growth, 3, 1, 1, false)?;
        b.end_block();
        for stage in 0..3 {
            b.begin_block(StructureKind::Dense, format!("dense{}", stage + 1));
            for _ in 0..12 {
                let h = b.batch_norm(x)?;
                let h = b.relu(h)?;
                let h = b.conv(h, growth, 3, 1, 1, false)?;
                x = b.concat(&[x, h])?;
            }
            b.end_block();
            if stage < 2 {
                b.begin_block(StructureKind::Plain, format!("trans{}", stage + 1));
                let c = b.channels(x);
                let h = b.batch_norm(x)?;
                let h = b.relu(h)?;
                let h = b.conv(h, c, 1, 1, 0, false)?;
                x = b.avg_pool(h, 2, 2)?;
                b.end_block();
            }
        }
        let h = b.batch_norm(x)?;
        let h = b.relu(h)?;
        let pooled = b.global_avg_pool(h)?;
        let logits = b.dense(pooled, opts.num_classes)?;
        b.finish(logits)
    }
}

struct GoogLeNetCifar;

/// `(n1x1, n3x3red, n3x3, n5x5red, n5x5, pool_planes)` per inception module;
/// `None` marks a stride-2 max pool. The "5×5" branch is two stacked 3×3 convs.
const INCEPTIONS: [Option<(&str, [usize; 6])>; 11] = [
    Some(("a3", [64, 96, 128, 16, 32, 32])),
    Some(("b3", [128, 128, 192, 32, 96, 64])),
    None,
    Some(("a4", [192, 96, 208, 16, 48, 64])),
    Some(("b4", [160, 112, 224, 24, 64, 64])),
    Some(("c4", [128, 128, 256, 24, 64, 64])),
    Some(("d4", [112, 144, 288, 32, 64, 64])),
    Some(("e4", [256, 160, 320, 32, 128, 128])),
    None,
    Some(("a5", [256, 160, 320, 32, 128, 128])),
    Some(("b5", [384, 192, 384, 48, 128, 128])),
];

impl Preset for GoogLeNetCifar {
    fn name(&self) -> &'static str {
        "googlenet_cifar"
    }

    fn summary(&self) -> &'static str {
        "192-channel 3x3 stem, nine inception modules, global pooling and a class-count dense head"
    }

    fn build(&self, opts: &PresetOptions) -> Result<Network> {
        let mut b = cifar_builder(opts.seed);
        b.begin_block(StructureKind::Plain, "pre_layers");
        let mut x = b.conv_bn_relu(b.input(), opts.scale(192), 3, 1, 1, true)?;
        b.end_block();
        for entry in INCEPTIONS {
            match entry {
                None => x = b.max_pool(x, 3, 2, 1)?,
                Some((name, cfg)) => {
                    let [n1, r3, n3, r5, n5, pool] = cfg.map(|c| opts.scale(c));
                    b.begin_block(StructureKind::Inception, name);
                    let y1 = b.conv_bn_relu(x, n1, 1, 1, 0, true)?;
                    let y2 = b.conv_bn_relu(x, r3, 1, 1, 0, true)?;
                    let y2 = b.conv_bn_relu(y2, n3, 3, 1, 1, true)?;
                    let y3 = b.conv_bn_relu(x, r5, 1, 1, 0, true)?;
                    let y3 = b.conv_bn_relu(y3, n5, 3, 1, 1, true)?;
                    let y3 = b.conv_bn_relu(y3, n5, 3, 1, 1, true)?;
                    let y4 = b.max_pool(x, 3, 1, 1)?;
                    let y4 = b.conv_bn_relu(y4, pool, 1, 1, 0, true)?;
                    x = b.concat(&[y1, y2, y3, y4])?;
                    b.end_block();
                }
            }
        }
        let pooled = b.global_avg_pool(x)?;
        let logits = b.dense(pooled, opts.num_classes)?;
        b.finish(logits)
    }
}
