//! The four segmentation architectures behind one forward interface.
//!
//! | kind   | order K | temporal stage               |
//! |--------|---------|------------------------------|
//! | FCN    | 1       | none                         |
//! | MSFCN  | 2 or 3  | [`FusionParams`] (1×1 fuse)  |
//! | RFCN   | 2       | [`RecurrentParams`] (ConvLSTM)|
//!
//! Frames go in oldest first; stream `k` is encoded by `encoder{k}` (all
//! streams share `encoder0` when `tie_encoders` is set). The decoder is the
//! same for every kind:
//!
//! ```text
//! d4     = relu(conv3x3(concat(up2(conv5), conv4)))
//! d3     = relu(conv3x3(concat(up2(d4), conv3)))
//! logits = conv1x1(up8(d3))
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{check_input_dims, Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, RecurrentParams};
use crate::layers::Conv2d;
use crate::mask::LabelMask;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModelKind {
    Fcn,
    Msfcn,
    Rfcn,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Fcn => "FCN",
            ModelKind::Msfcn => "MSFCN",
            ModelKind::Rfcn => "RFCN",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Number of consecutive frames consumed per prediction.
    pub order: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub tie_encoders: bool,
    /// Training and evaluation resolution `(h, w)`.
    pub input_size: (usize, usize),
}

impl ModelSpec {
    pub fn fcn(num_classes: usize, input_size: (usize, usize)) -> Self {
        Self {
            kind: ModelKind::Fcn,
            order: 1,
            num_classes,
            encoder: EncoderConfig::default(),
            tie_encoders: false,
            input_size,
        }
    }

    pub fn msfcn(order: usize, num_classes: usize, input_size: (usize, usize)) -> Self {
        Self {
            kind: ModelKind::Msfcn,
            order,
            ..Self::fcn(num_classes, input_size)
        }
    }

    pub fn rfcn(num_classes: usize, input_size: (usize, usize)) -> Self {
        Self {
            kind: ModelKind::Rfcn,
            order: 2,
            ..Self::fcn(num_classes, input_size)
        }
    }

    pub fn with_encoder(self, encoder: EncoderConfig) -> Self {
        Self { encoder, ..self }
    }

    pub fn with_tied_encoders(self, tie: bool) -> Self {
        Self {
            tie_encoders: tie,
            ..self
        }
    }

    /// Short name such as `MSFCN-3`.
    pub fn label(&self) -> String {
        match self.kind {
            ModelKind::Fcn => "FCN".to_string(),
            kind => format!("{kind}-{}", self.order),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let order_ok = match self.kind {
            ModelKind::Fcn => self.order == 1,
            ModelKind::Msfcn => (2..=3).contains(&self.order),
            ModelKind::Rfcn => self.order == 2,
        };
        if !order_ok {
            return Err(Error::param(format!(
                "order {} is not valid for {} (FCN: 1, MSFCN: 2 or 3, RFCN: 2)",
                self.order, self.kind
            )));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::param(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        self.encoder.validate()?;
        let (h, w) = self.input_size;
        check_input_dims(h, w).map_err(|e| Error::param(e.to_string()))
    }

    fn encoder_count(&self) -> usize {
        if self.tie_encoders {
            1
        } else {
            self.order
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Temporal {
    None,
    Fused(FusionParams),
    Recurrent(RecurrentParams),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoder {
    pub d4: Conv2d,
    pub d3: Conv2d,
    pub classifier: Conv2d,
}

impl Decoder {
    fn new<T: Real>(store: &mut ParamStore<T>, enc: &EncoderConfig, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        let [c3, c4, c5] = enc.stage_channels;
        Ok(Self {
            d4: Conv2d::new(store, "decoder.d4", c5 + c4, c4, 3, 1, rng)?,
            d3: Conv2d::new(store, "decoder.d3", c4 + c3, c3, 3, 1, rng)?,
            classifier: Conv2d::new(store, "decoder.classifier", c3, num_classes, 1, 1, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, p: &FeaturePyramid) -> Result<Var> {
        let up = tape.upsample_bilinear(p.conv5, 2)?;
        let cat = tape.concat_channels(&[up, p.conv4])?;
        let d4 = self.d4.forward(tape, store, cat)?;
        let d4 = tape.relu(d4);
        let up = tape.upsample_bilinear(d4, 2)?;
        let cat = tape.concat_channels(&[up, p.conv3])?;
        let d3 = self.d3.forward(tape, store, cat)?;
        let d3 = tape.relu(d3);
        let full = tape.upsample_bilinear(d3, 8)?;
        self.classifier.forward(tape, store, full)
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
    /// One entry per stream; with tied encoders all entries are equal.
    pub encoders: Vec<Encoder>,
    pub temporal: Temporal,
    pub decoder: Decoder,
}

impl<T: Real> Model<T> {
    /// Deterministic initialization from `seed`. Parameters are registered
    /// encoders first, then the temporal stage, then the decoder.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        let mut unique = Vec::new();
        for k in 0..spec.encoder_count() {
            unique.push(Encoder::new(&mut params, &format!("encoder{k}"), spec.encoder, &mut rng)?);
        }
        let encoders = (0..spec.order)
            .map(|k| unique[if spec.tie_encoders { 0 } else { k }].clone())
            .collect();
        let temporal = match spec.kind {
            ModelKind::Fcn => Temporal::None,
            ModelKind::Msfcn => Temporal::Fused(FusionParams::new(&mut params, spec.order, &spec.encoder, &mut rng)?),
            ModelKind::Rfcn => Temporal::Recurrent(RecurrentParams::new(&mut params, &spec.encoder, &mut rng)?),
        };
        let decoder = Decoder::new(&mut params, &spec.encoder, spec.num_classes, &mut rng)?;
        Ok(Self {
            spec,
            params,
            encoders,
            temporal,
            decoder,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Same architecture with parameters converted to another scalar type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec,
            params: self.params.cast(),
            encoders: self.encoders.clone(),
            temporal: self.temporal.clone(),
            decoder: self.decoder.clone(),
        }
    }

    fn check_frames(&self, tape: &Tape<T>, frames: &[Var]) -> Result<()> {
        if frames.len() != self.spec.order {
            return Err(Error::Contract(format!(
                "{} expects {} frames, got {}",
                self.spec.label(),
                self.spec.order,
                frames.len()
            )));
        }
        let first = tape.value(frames[0]).shape();
        if frames.iter().any(|&f| tape.value(f).shape() != first) {
            return Err(Error::shape("frames of one sample must share a shape"));
        }
        Ok(())
    }

    /// Logits `n × C × h × w` for frames ordered oldest first.
    pub fn forward(&self, tape: &mut Tape<T>, frames: &[Var]) -> Result<Var> {
        self.check_frames(tape, frames)?;
        let pyramids = frames
            .iter()
            .zip(&self.encoders)
            .map(|(&f, enc)| enc.encode(tape, &self.params, f))
            .collect::<Result<Vec<_>>>()?;
        let fused = match &self.temporal {
            Temporal::None => pyramids[0],
            Temporal::Fused(f) => f.fuse_streams(tape, &self.params, &pyramids)?,
            Temporal::Recurrent(r) => r.recurrent_fuse(tape, &self.params, &pyramids)?,
        };
        self.decoder.forward(tape, &self.params, &fused)
    }

    /// Forward pass on a throwaway tape.
    pub fn infer(&self, frames: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
        let logits = self.forward(&mut tape, &vars)?;
        Ok(tape.value(logits).clone())
    }

    pub fn predict_mask(&self, frames: &[Tensor<T>]) -> Result<LabelMask> {
        Ok(argmax_mask(&self.infer(frames)?))
    }
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn argmax_mask<T: Real>(logits: &Tensor<T>) -> LabelMask {
    let s = logits.shape();
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let img = logits.image(n);
        for p in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if img[c * plane + p] > img[best * plane + p] {
                    best = c;
                }
            }
            data.push(best as u8);
        }
    }
    LabelMask {
        n: s.n,
        h: s.h,
        w: s.w,
        data,
    }
}
