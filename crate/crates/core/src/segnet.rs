//! Encoder-decoder segmentation backbone with per-level decoder taps.
//!
//! The decoder exposes one feature map per level, deepest first, at strides
//! 2^(depth-1) .. 1 of the input; the expert bank turns the last N of them
//! into same-resolution expert features.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Parameter, PixelMlp};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of encoder/decoder levels, bottleneck included.
    pub depth: usize,
    pub base_channels: usize,
    /// Expert taps taken from the last `expert_count` decoder blocks.
    pub expert_count: usize,
    pub expert_dim: usize,
    /// Hidden width of the per-block and fusion MLPs.
    pub mlp_hidden: usize,
    /// Hidden width of the gating convolution stack.
    pub gate_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            num_classes: 2,
            depth: 3,
            base_channels: 8,
            expert_count: 3,
            expert_dim: 256,
            mlp_hidden: 256,
            gate_hidden: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config("backbone depth must be >= 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.expert_count < 1 || self.expert_count > self.depth {
            return Err(Error::Config(format!(
                "expert_count must be in [1, depth]; got {} with depth {}",
                self.expert_count, self.depth
            )));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.expert_dim == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channel counts of the decoder taps, deepest first.
    pub fn tap_channels(&self) -> Vec<usize> {
        let mut all: Vec<usize> = Vec::new();
        all.push(self.level_channels(self.depth - 1)); // bottleneck
        for level in (0..self.depth - 1).rev() {
            all.push(self.level_channels(level));
        }
        all.split_off(all.len() - self.expert_count)
    }
}

struct ConvBlock<T: Scalar> {
    c1: Conv2d<T>,
    c2: Conv2d<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            c1: Conv2d::new(&format!("{name}.c1"), cin, cout, 3, rng),
            c2: Conv2d::new(&format!("{name}.c2"), cout, cout, 3, rng),
        }
    }

    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let x = self.c1.forward_relu(tape, x)?;
        self.c2.forward_relu(tape, x)
    }

    fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = self.c1.params();
        p.extend(self.c2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p = self.c1.params_mut();
        p.extend(self.c2.params_mut());
        p
    }
}

/// Coarse forward products: backbone logits plus the raw decoder taps at
/// their native resolutions (deepest first, gradients attached).
pub struct CoarseOutput {
    pub logits: Var,
    pub block_features: Vec<Var>,
}

pub struct SegNet<T: Scalar> {
    pub cfg: BackboneConfig,
    enc: Vec<ConvBlock<T>>,
    dec: Vec<ConvBlock<T>>,
    head: Conv2d<T>,
}

impl<T: Scalar> SegNet<T> {
    pub fn new(cfg: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut enc = Vec::with_capacity(cfg.depth);
        for level in 0..cfg.depth {
            let cin = if level == 0 {
                cfg.in_channels
            } else {
                cfg.level_channels(level - 1)
            };
            enc.push(ConvBlock::new(
                &format!("backbone.enc{level}"),
                cin,
                cfg.level_channels(level),
                rng,
            ));
        }
        // Decoder blocks from deepest to shallowest; each consumes the
        // upsampled deeper features concatenated with the skip at its level.
        let mut dec = Vec::with_capacity(cfg.depth - 1);
        for level in (0..cfg.depth - 1).rev() {
            let cin = cfg.level_channels(level + 1) + cfg.level_channels(level);
            dec.push(ConvBlock::new(
                &format!("backbone.dec{level}"),
                cin,
                cfg.level_channels(level),
                rng,
            ));
        }
        let head = Conv2d::new(
            "backbone.head",
            cfg.base_channels,
            cfg.num_classes,
            1,
            rng,
        );
        Ok(SegNet { cfg, enc, dec, head })
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn forward_coarse(&self, tape: &Tape<T>, image: Var) -> Result<CoarseOutput> {
        let shape = tape.shape(image);
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                op: "forward_coarse",
                detail: format!(
                    "expected [{}, h, w], got {:?}",
                    self.cfg.in_channels, shape
                ),
            });
        }
        let down = 1usize << (self.cfg.depth - 1);
        if shape[1] % down != 0 || shape[2] % down != 0 {
            return Err(Error::ShapeMismatch {
                op: "forward_coarse",
                detail: format!("spatial dims {:?} must divide by {down}", &shape[1..]),
            });
        }

        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut x = image;
        for (level, block) in self.enc.iter().enumerate() {
            x = block.forward(tape, x)?;
            if level + 1 < self.cfg.depth {
                skips.push(x);
                x = tape.maxpool2(x)?;
            }
        }

        // x is now the bottleneck; taps collect every decoder-side feature.
        let mut taps = Vec::with_capacity(self.cfg.depth);
        taps.push(x);
        for (i, block) in self.dec.iter().enumerate() {
            let skip = skips[self.cfg.depth - 2 - i];
            let target = tape.shape(skip);
            let up = tape.upsample(x, target[1], target[2])?;
            let cat = tape.concat0(&[up, skip])?;
            x = block.forward(tape, cat)?;
            taps.push(x);
        }

        let logits = self.head.forward(tape, x)?;
        let block_features = taps.split_off(taps.len() - self.cfg.expert_count);
        Ok(CoarseOutput {
            logits,
            block_features,
        })
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut p: Vec<&Parameter<T>> = Vec::new();
        for b in &self.enc {
            p.extend(b.params());
        }
        for b in &self.dec {
            p.extend(b.params());
        }
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p: Vec<&mut Parameter<T>> = Vec::new();
        for b in &mut self.enc {
            p.extend(b.params_mut());
        }
        for b in &mut self.dec {
            p.extend(b.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }
}

/// Per-block pixel-wise MLPs that lift decoder taps to `expert_dim` channels
/// and upsample them to the input resolution.
pub struct ExpertBank<T: Scalar> {
    mlps: Vec<PixelMlp<T>>,
}

impl<T: Scalar> ExpertBank<T> {
    pub fn new(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let mlps = cfg
            .tap_channels()
            .iter()
            .enumerate()
            .map(|(i, &cin)| {
                PixelMlp::new(
                    &format!("experts.{i}"),
                    &[cin, cfg.mlp_hidden, cfg.mlp_hidden, cfg.expert_dim],
                    rng,
                )
            })
            .collect();
        ExpertBank { mlps }
    }

    /// Expert features F_1..F_N, each [expert_dim, h, w].
    pub fn forward(
        &self,
        tape: &Tape<T>,
        blocks: &[Var],
        h: usize,
        w: usize,
    ) -> Result<Vec<Var>> {
        if blocks.len() != self.mlps.len() {
            return Err(Error::ShapeMismatch {
                op: "expert_features",
                detail: format!("{} taps for {} experts", blocks.len(), self.mlps.len()),
            });
        }
        blocks
            .iter()
            .zip(&self.mlps)
            .map(|(&b, mlp)| {
                let f = mlp.forward(tape, b)?;
                tape.upsample(f, h, w)
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.mlps.iter().flat_map(|m| m.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.mlps.iter_mut().flat_map(|m| m.params_mut()).collect()
    }
}
