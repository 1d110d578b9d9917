//! Small convolutional feature extractor with a pooled-context branch.
//!
//! Three 3×3 conv stages (the first with stride 2) form the trunk. A
//! pyramid-pooling branch averages the last stage over each bin grid,
//! projects it with a 1×1 conv and upsamples it back. The segmentation
//! feature map is a 1×1 fusion of the last stage with the upsampled branches.
//! Every tap shares the latent spatial size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, Parameterized};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Feature level handed to the calibration module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureTap {
    #[serde(rename = "layer2")]
    Layer2,
    #[serde(rename = "layer3")]
    Layer3,
    #[serde(rename = "layer4")]
    Layer4,
    #[serde(rename = "high")]
    High,
    #[serde(rename = "layer4+high")]
    Layer4High,
}

impl FeatureTap {
    pub const ALL: [FeatureTap; 5] = [
        FeatureTap::Layer2,
        FeatureTap::Layer3,
        FeatureTap::Layer4,
        FeatureTap::High,
        FeatureTap::Layer4High,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureTap::Layer2 => "layer2",
            FeatureTap::Layer3 => "layer3",
            FeatureTap::Layer4 => "layer4",
            FeatureTap::High => "high",
            FeatureTap::Layer4High => "layer4+high",
        }
    }
}

impl std::str::FromStr for FeatureTap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureTap::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown feature tap '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Input height and width.
    pub input_size: usize,
    pub trunk_channels: Vec<usize>,
    pub fused_channels: usize,
    pub ppm_bins: Vec<usize>,
    pub ppm_channels: usize,
    pub feature_tap: FeatureTap,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            input_size: 32,
            trunk_channels: vec![16, 16, 32],
            fused_channels: 32,
            ppm_bins: vec![1, 2],
            ppm_channels: 16,
            feature_tap: FeatureTap::Layer4High,
        }
    }
}

impl BackboneConfig {
    /// Spatial side of every feature tap (one stride-2 stage).
    pub fn latent_size(&self) -> usize {
        (self.input_size + 2 - 3) / 2 + 1
    }

    pub fn latent_pixels(&self) -> usize {
        self.latent_size() * self.latent_size()
    }

    /// Channel count `m` of a tap.
    pub fn tap_channels(&self, tap: FeatureTap) -> usize {
        match tap {
            FeatureTap::Layer2 => self.trunk_channels[0],
            FeatureTap::Layer3 => self.trunk_channels[1],
            FeatureTap::Layer4 => self.trunk_channels[2],
            FeatureTap::High => self.ppm_bins.len() * self.ppm_channels,
            FeatureTap::Layer4High => self.fused_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk_channels.len() != 3 || self.trunk_channels.contains(&0) {
            return Err(Error::Config(format!("trunk_channels must list 3 positive stage widths, got {:?}", self.trunk_channels)));
        }
        if self.input_size < 4 || self.input_size % 2 != 0 {
            return Err(Error::Config(format!("input_size {} must be even and >= 4", self.input_size)));
        }
        let latent = self.latent_size();
        if self.ppm_bins.is_empty() || self.ppm_bins.iter().any(|&b| b == 0 || latent % b != 0) {
            return Err(Error::Config(format!("ppm_bins {:?} must divide the latent size {latent}", self.ppm_bins)));
        }
        if self.fused_channels == 0 || self.ppm_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Every feature level produced by one forward pass.
#[derive(Clone, Debug)]
pub struct FeatureTaps<V> {
    pub layer2: V,
    pub layer3: V,
    pub layer4: V,
    pub high: V,
    pub fused: V,
}

impl<V: Clone> FeatureTaps<V> {
    pub fn tap(&self, tap: FeatureTap) -> V {
        match tap {
            FeatureTap::Layer2 => self.layer2.clone(),
            FeatureTap::Layer3 => self.layer3.clone(),
            FeatureTap::Layer4 => self.layer4.clone(),
            FeatureTap::High => self.high.clone(),
            FeatureTap::Layer4High => self.fused.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    config: BackboneConfig,
    stages: Vec<Conv2dLayer<T>>,
    ppm: Vec<Conv2dLayer<T>>,
    fuse: Conv2dLayer<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::BackboneInit, 0);
        let tc = &config.trunk_channels;
        let stages = vec![
            Conv2dLayer::kaiming(tc[0], config.in_channels, 3, 1, 2, &mut rng),
            Conv2dLayer::kaiming(tc[1], tc[0], 3, 1, 1, &mut rng),
            Conv2dLayer::kaiming(tc[2], tc[1], 3, 1, 1, &mut rng),
        ];
        let ppm = config
            .ppm_bins
            .iter()
            .map(|_| Conv2dLayer::kaiming(config.ppm_channels, tc[2], 1, 0, 1, &mut rng))
            .collect();
        let fuse_in = tc[2] + config.ppm_bins.len() * config.ppm_channels;
        let fuse = Conv2dLayer::kaiming(config.fused_channels, fuse_in, 1, 0, 1, &mut rng);
        Ok(Self { config, stages, ppm, fuse })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Feature channels seen by the classifiers.
    pub fn feature_channels(&self) -> usize {
        self.config.fused_channels
    }

    fn layers(&self) -> impl Iterator<Item = &Conv2dLayer<T>> {
        self.stages.iter().chain(&self.ppm).chain(std::iter::once(&self.fuse))
    }

    /// Records the forward pass of `x[in×H×W]`; `vars` comes from [`Parameterized::bind`].
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<FeatureTaps<Var>> {
        let expect = [self.config.in_channels, self.config.input_size, self.config.input_size];
        if tape.shape(x) != expect {
            return Err(Error::dim(format!("backbone input {:?}, expected {expect:?}", tape.shape(x))));
        }
        let mut h = x;
        let mut outs = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            let z = stage.forward(tape, &vars[2 * i..2 * i + 2], h)?;
            h = tape.relu(z);
            outs.push(h);
        }
        let layer4 = outs[2];
        let latent = self.config.latent_size();
        let mut branches = Vec::with_capacity(self.ppm.len());
        for (j, (conv, &bins)) in self.ppm.iter().zip(&self.config.ppm_bins).enumerate() {
            let off = 2 * (self.stages.len() + j);
            let pooled = tape.adaptive_avg_pool(layer4, bins)?;
            let z = conv.forward(tape, &vars[off..off + 2], pooled)?;
            let z = tape.relu(z);
            branches.push(tape.upsample_nearest(z, latent / bins)?);
        }
        let high = tape.concat(&branches, 0)?;
        let both = tape.concat(&[layer4, high], 0)?;
        let off = 2 * (self.stages.len() + self.ppm.len());
        let fused = self.fuse.forward(tape, &vars[off..off + 2], both)?;
        let fused = tape.relu(fused);
        Ok(FeatureTaps {
            layer2: outs[0],
            layer3: outs[1],
            layer4,
            high,
            fused,
        })
    }

    /// All taps of one image as constants.
    pub fn extract_all(&self, x: &Tensor<T>) -> Result<FeatureTaps<Tensor<T>>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.named_params().into_iter().map(|(_, p)| tape.constant(p.detached())).collect();
        let xv = tape.constant(x.detached());
        let taps = self.forward(&mut tape, &vars, xv)?;
        Ok(FeatureTaps {
            layer2: tape.to_tensor(taps.layer2),
            layer3: tape.to_tensor(taps.layer3),
            layer4: tape.to_tensor(taps.layer4),
            high: tape.to_tensor(taps.high),
            fused: tape.to_tensor(taps.fused),
        })
    }

    /// Feature map `[m×h×w]` at the configured tap.
    pub fn extract_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.extract_all(x)?.tap(self.config.feature_tap))
    }
}

impl<T: Scalar> Parameterized<T> for Backbone<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            s.push_named(&format!("backbone.stage{}", i + 1), &mut out);
        }
        for (j, p) in self.ppm.iter().enumerate() {
            p.push_named(&format!("backbone.ppm{j}"), &mut out);
        }
        self.fuse.push_named("backbone.fuse", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            s.push_mut(&mut out);
        }
        for p in &mut self.ppm {
            p.push_mut(&mut out);
        }
        self.fuse.push_mut(&mut out);
        out
    }
}

impl<T: Scalar> Backbone<T> {
    pub fn num_layers(&self) -> usize {
        self.layers().count()
    }
}
