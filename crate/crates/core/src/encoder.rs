//! Residual encoder producing a three-level feature pyramid.
//!
//! Topology: a fixed input standardization, a 7×7 stride-2 stem
//! convolution, a 3×3 stride-2 convolution in place of max pooling, then
//! three residual stages whose first block halves the resolution. Stage outputs sit at strides 8, 16 and 32 and are the
//! `conv3`, `conv4` and `conv5` levels of the pyramid.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, GroupNorm};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Real;

/// Downsampling factor between the input and the deepest pyramid level.
pub const OUTPUT_STRIDE: usize = 32;

/// Frames in `[0, 1]` are mapped to `(x - INPUT_MEAN) * INPUT_SCALE`
/// before the stem, roughly zero mean and unit spread.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Channel widths of the conv3, conv4 and conv5 stages.
    #[serde(default = "default_stage_channels")]
    pub stage_channels: [usize; 3],
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
    /// Group normalization after every convolution, with this many groups;
    /// `None` leaves the convolutions unnormalized.
    #[serde(default = "default_norm_groups")]
    pub norm_groups: Option<usize>,
}

fn default_in_channels() -> usize {
    3
}

fn default_stage_channels() -> [usize; 3] {
    [32, 64, 128]
}

fn default_blocks() -> usize {
    2
}

fn default_norm_groups() -> Option<usize> {
    None
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: default_in_channels(),
            stage_channels: default_stage_channels(),
            blocks_per_stage: default_blocks(),
            norm_groups: default_norm_groups(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let [c3, c4, c5] = self.stage_channels;
        if self.in_channels == 0 || c3 == 0 || self.blocks_per_stage == 0 {
            return Err(Error::param("encoder channels and block count must be positive"));
        }
        if !(c3 < c4 && c4 < c5) {
            return Err(Error::param(format!(
                "encoder stage channels must increase strictly, got {:?}",
                self.stage_channels
            )));
        }
        if let Some(g) = self.norm_groups {
            if g == 0 || self.stage_channels.iter().any(|c| c % g != 0) {
                return Err(Error::param(format!(
                    "norm_groups {g} must divide every stage width {:?}",
                    self.stage_channels
                )));
            }
        }
        Ok(())
    }

    /// Width of the stem convolutions.
    pub fn stem_channels(&self) -> usize {
        self.stage_channels[0]
    }
}

/// Encoder outputs at strides 8, 16 and 32.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub conv3: Var,
    pub conv4: Var,
    pub conv5: Var,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [Var; 3] {
        [self.conv3, self.conv4, self.conv5]
    }
}

/// Convolution followed by optional group normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub norm: Option<GroupNorm>,
}

impl ConvUnit {
    /// The normalization registers under `<name>.norm`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        norm_groups: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, name, in_channels, out_channels, kernel, stride, rng)?;
        let norm = norm_groups
            .map(|g| GroupNorm::new(store, &format!("{name}.norm"), out_channels, g))
            .transpose()?;
        Ok(Self { conv, norm })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        match &self.norm {
            Some(n) => n.forward(tape, store, y),
            None => Ok(y),
        }
    }
}

/// `relu(conv2(relu(conv1(x))) + proj(x))`; `proj` is a strided 1×1
/// convolution when the block changes width or resolution, else identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualBlock {
    pub conv1: ConvUnit,
    pub conv2: ConvUnit,
    pub proj: Option<ConvUnit>,
}

impl ResidualBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        norm_groups: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let g = norm_groups;
        let conv1 = ConvUnit::new(store, &format!("{name}.conv1"), in_channels, out_channels, 3, stride, g, rng)?;
        let conv2 = ConvUnit::new(store, &format!("{name}.conv2"), out_channels, out_channels, 3, 1, g, rng)?;
        let proj = if stride != 1 || in_channels != out_channels {
            Some(ConvUnit::new(store, &format!("{name}.proj"), in_channels, out_channels, 1, stride, g, rng)?)
        } else {
            None
        };
        Ok(Self { conv1, conv2, proj })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.conv1.forward(tape, store, x)?;
        let a = tape.relu(a);
        let f = self.conv2.forward(tape, store, a)?;
        let skip = match &self.proj {
            Some(p) => p.forward(tape, store, x)?,
            None => x,
        };
        let sum = tape.add(f, skip)?;
        Ok(tape.relu(sum))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stem: ConvUnit,
    pub pool: ConvUnit,
    /// Blocks of the conv3, conv4 and conv5 stages.
    pub stages: [Vec<ResidualBlock>; 3],
}

impl Encoder {
    /// Registers parameters under `<prefix>.stem`, `<prefix>.pool` and
    /// `<prefix>.stage{3,4,5}.block{i}`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let stem_c = config.stem_channels();
        let g = config.norm_groups;
        let stem = ConvUnit::new(store, &format!("{prefix}.stem"), config.in_channels, stem_c, 7, 2, g, rng)?;
        let pool = ConvUnit::new(store, &format!("{prefix}.pool"), stem_c, stem_c, 3, 2, g, rng)?;
        let mut in_c = stem_c;
        let mut stages: [Vec<ResidualBlock>; 3] = Default::default();
        for (s, (&out_c, blocks)) in config.stage_channels.iter().zip(stages.iter_mut()).enumerate() {
            for b in 0..config.blocks_per_stage {
                let stride = if b == 0 { 2 } else { 1 };
                let name = format!("{prefix}.stage{}.block{b}", s + 3);
                blocks.push(ResidualBlock::new(store, &name, in_c, out_c, stride, g, rng)?);
                in_c = out_c;
            }
        }
        Ok(Self {
            config,
            stem,
            pool,
            stages,
        })
    }

    /// Runs one frame batch `n × in_channels × h × w` through the encoder.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, frame: Var) -> Result<FeaturePyramid> {
        let s = tape.value(frame).shape();
        check_input_dims(s.h, s.w)?;
        if s.c != self.config.in_channels {
            return Err(Error::shape(format!(
                "encoder expects {} input channels, got {s}",
                self.config.in_channels
            )));
        }
        let x = tape.affine(frame, INPUT_SCALE, -INPUT_MEAN * INPUT_SCALE);
        let x = self.stem.forward(tape, store, x)?;
        let x = tape.relu(x);
        let x = self.pool.forward(tape, store, x)?;
        let mut x = tape.relu(x);
        let mut outs = [x; 3];
        for (stage, out) in self.stages.iter().zip(outs.iter_mut()) {
            for block in stage {
                x = block.forward(tape, store, x)?;
            }
            *out = x;
        }
        Ok(FeaturePyramid {
            conv3: outs[0],
            conv4: outs[1],
            conv5: outs[2],
        })
    }
}

pub fn check_input_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
        return Err(Error::shape(format!(
            "input {h}x{w}: height and width must be positive multiples of {OUTPUT_STRIDE}"
        )));
    }
    Ok(())
}
