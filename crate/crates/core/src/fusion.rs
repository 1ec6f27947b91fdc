//! Temporal fusion of per-frame feature pyramids.
//!
//! Streams are always ordered oldest frame first, current frame last.
//!
//! * [`FusionParams::fuse_streams`]: per level, concatenate the K pyramids'
//!   maps along channels and reduce `K·c → c` with a 1×1 convolution.
//! * [`RecurrentParams::recurrent_fuse`]: a ConvLSTM runs over the K conv5
//!   maps from a zero state and its final hidden map becomes conv5; conv4
//!   and conv3 are a 3×3 convolution over the concatenation of the last two
//!   frames' maps.
//!
//! Both return a pyramid with the single-stream shapes, so one decoder
//! serves every architecture.

use crate::autodiff::{Tape, Var};
use crate::encoder::{EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvLstmCell};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Real, Shape4};

fn pyramid_shapes<T: Real>(tape: &Tape<T>, p: &FeaturePyramid) -> [Shape4; 3] {
    p.levels().map(|v| tape.value(v).shape())
}

fn check_streams<T: Real>(tape: &Tape<T>, pyramids: &[FeaturePyramid], channels: [usize; 3]) -> Result<()> {
    if pyramids.len() < 2 {
        return Err(Error::param(format!(
            "temporal fusion needs at least 2 streams, got {}",
            pyramids.len()
        )));
    }
    let first = pyramid_shapes(tape, &pyramids[0]);
    for (k, p) in pyramids.iter().enumerate().skip(1) {
        if pyramid_shapes(tape, p) != first {
            return Err(Error::shape(format!("stream {k} pyramid differs in shape from stream 0")));
        }
    }
    if first.map(|s| s.c) != channels {
        return Err(Error::shape(format!(
            "pyramid channels {:?} do not match the fusion widths {channels:?}",
            first.map(|s| s.c)
        )));
    }
    Ok(())
}

/// One `K·c → c` channel-mixing convolution per pyramid level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionParams {
    pub streams: usize,
    pub levels: [Conv2d; 3],
}

impl FusionParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, streams: usize, encoder: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        if streams < 2 {
            return Err(Error::param("multi-stream fusion needs at least 2 streams"));
        }
        let mut make = |level: usize, c: usize| Conv2d::new(store, &format!("fusion.conv{level}"), streams * c, c, 1, 1, rng);
        let [c3, c4, c5] = encoder.stage_channels;
        Ok(Self {
            streams,
            levels: [make(3, c3)?, make(4, c4)?, make(5, c5)?],
        })
    }

    pub fn fuse_streams<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pyramids: &[FeaturePyramid],
    ) -> Result<FeaturePyramid> {
        check_streams(tape, pyramids, self.levels.map(|l| l.out_channels))?;
        if pyramids.len() != self.streams {
            return Err(Error::param(format!(
                "fusion built for {} streams, got {}",
                self.streams,
                pyramids.len()
            )));
        }
        let mut out = [None; 3];
        for (level, (conv, slot)) in self.levels.iter().zip(out.iter_mut()).enumerate() {
            let maps: Vec<Var> = pyramids.iter().map(|p| p.levels()[level]).collect();
            let cat = tape.concat_channels(&maps)?;
            *slot = Some(conv.forward(tape, store, cat)?);
        }
        let [conv3, conv4, conv5] = out.map(|v| v.expect("every level fused"));
        Ok(FeaturePyramid { conv3, conv4, conv5 })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecurrentParams {
    pub lstm: ConvLstmCell,
    /// `2·c4 → c4` and `2·c3 → c3` 3×3 merges.
    pub merge4: Conv2d,
    pub merge3: Conv2d,
}

impl RecurrentParams {
    /// The ConvLSTM hidden width equals the conv5 width.
    pub fn new<T: Real>(store: &mut ParamStore<T>, encoder: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let [c3, c4, c5] = encoder.stage_channels;
        let lstm = ConvLstmCell::new(store, "recurrent.lstm", c5, c5, rng)?;
        let merge4 = Conv2d::new(store, "recurrent.merge4", 2 * c4, c4, 3, 1, rng)?;
        let merge3 = Conv2d::new(store, "recurrent.merge3", 2 * c3, c3, 3, 1, rng)?;
        Ok(Self { lstm, merge4, merge3 })
    }

    pub fn recurrent_fuse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pyramids: &[FeaturePyramid],
    ) -> Result<FeaturePyramid> {
        check_streams(
            tape,
            pyramids,
            [self.merge3.out_channels, self.merge4.out_channels, self.lstm.hidden],
        )?;
        let s5 = tape.value(pyramids[0].conv5).shape();
        let mut state = self.lstm.zero_state(tape, s5.n, s5.h, s5.w)?;
        for p in pyramids {
            state = self.lstm.step(tape, store, p.conv5, state)?;
        }
        let [prev, cur] = [&pyramids[pyramids.len() - 2], &pyramids[pyramids.len() - 1]];
        let cat4 = tape.concat_channels(&[prev.conv4, cur.conv4])?;
        let conv4 = self.merge4.forward(tape, store, cat4)?;
        let cat3 = tape.concat_channels(&[prev.conv3, cur.conv3])?;
        let conv3 = self.merge3.forward(tape, store, cat3)?;
        Ok(FeaturePyramid {
            conv3,
            conv4,
            conv5: state.h,
        })
    }
}

/// Sets a `K·c → c` convolution to copy the channels of stream `stream`
/// (identity on that block, zero elsewhere, zero bias). A 3×3 kernel gets
/// the identity at its center tap.
pub fn set_selector<T: Real>(store: &mut ParamStore<T>, conv: &Conv2d, stream: usize) {
    let c = conv.out_channels;
    assert_eq!(conv.in_channels % c, 0, "selector needs in_channels to be a multiple of out_channels");
    let k = conv.kernel;
    let w = store.get_mut(conv.weight).value.data_mut();
    w.fill(T::zero());
    for o in 0..c {
        let i = stream * c + o;
        w[((o * conv.in_channels + i) * k + k / 2) * k + k / 2] = T::one();
    }
    store.get_mut(conv.bias).value.data_mut().fill(T::zero());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    const WIDTHS: [usize; 3] = [2, 3, 4];

    fn config() -> EncoderConfig {
        EncoderConfig {
            stage_channels: WIDTHS,
            ..Default::default()
        }
    }

    /// Random pyramid with conv5 at `h×w`.
    fn random_pyramid(tape: &mut Tape<f64>, n: usize, h: usize, w: usize, seed: u64) -> FeaturePyramid {
        let mut mk = |c: usize, scale: usize, s: u64| {
            tape.constant(Tensor::randn(Shape4::new(n, c, h * scale, w * scale).unwrap(), s, 1.0).unwrap())
        };
        FeaturePyramid {
            conv3: mk(WIDTHS[0], 4, seed),
            conv4: mk(WIDTHS[1], 2, seed + 1),
            conv5: mk(WIDTHS[2], 1, seed + 2),
        }
    }

    fn level_values(tape: &Tape<f64>, p: &FeaturePyramid) -> [Tensor<f64>; 3] {
        p.levels().map(|v| tape.value(v).clone())
    }

    /// Direct per-pixel 1×1 convolution over an explicit concatenation.
    fn oracle_fuse(parts: &[&Tensor<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let cat = Tensor::concat_channels(parts).unwrap();
        let s = cat.shape();
        let co = w.shape().n;
        let mut out = Tensor::zeros(s.with_channels(co)).unwrap();
        for n in 0..s.n {
            for o in 0..co {
                for y in 0..s.h {
                    for x in 0..s.w {
                        let mut acc = b.data()[o];
                        for i in 0..s.c {
                            acc += w.get(o, i, 0, 0) * cat.get(n, i, y, x);
                        }
                        let idx = out.shape().index(n, o, y, x);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn selector_returns_current_stream() {
        let mut store = ParamStore::<f64>::new();
        let fusion = FusionParams::new(&mut store, 2, &config(), &mut Rng::new(1)).unwrap();
        for l in &fusion.levels {
            set_selector(&mut store, l, 1);
        }
        let mut tape = Tape::new();
        let p0 = random_pyramid(&mut tape, 2, 2, 3, 10);
        let p1 = random_pyramid(&mut tape, 2, 2, 3, 20);
        let fused = fusion.fuse_streams(&mut tape, &store, &[p0, p1]).unwrap();
        assert_eq!(level_values(&tape, &fused), level_values(&tape, &p1));
    }

    #[test]
    fn averaging_identical_streams() {
        let mut store = ParamStore::<f64>::new();
        let fusion = FusionParams::new(&mut store, 2, &config(), &mut Rng::new(1)).unwrap();
        for l in &fusion.levels {
            let c = l.out_channels;
            let w = store.get_mut(l.weight).value.data_mut();
            w.fill(0.0);
            for o in 0..c {
                w[o * 2 * c + o] = 0.5;
                w[o * 2 * c + c + o] = 0.5;
            }
        }
        let mut tape = Tape::new();
        let p = random_pyramid(&mut tape, 1, 1, 2, 30);
        let fused = fusion.fuse_streams(&mut tape, &store, &[p, p]).unwrap();
        for (a, b) in level_values(&tape, &fused).iter().zip(level_values(&tape, &p).iter()) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn three_streams_match_oracle() {
        let mut store = ParamStore::<f64>::new();
        let fusion = FusionParams::new(&mut store, 3, &config(), &mut Rng::new(2)).unwrap();
        for l in &fusion.levels {
            let b = store.get_mut(l.bias).value.data_mut();
            b.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 - 0.2);
        }
        let mut tape = Tape::new();
        let ps: Vec<_> = (0..3).map(|k| random_pyramid(&mut tape, 2, 2, 2, 40 + 10 * k)).collect();
        let fused = fusion.fuse_streams(&mut tape, &store, &ps).unwrap();
        for level in 0..3 {
            let parts: Vec<&Tensor<f64>> = ps.iter().map(|p| tape.value(p.levels()[level])).collect();
            let l = &fusion.levels[level];
            let want = oracle_fuse(&parts, &store.get(l.weight).value, &store.get(l.bias).value);
            let got = tape.value(fused.levels()[level]);
            assert!(got.max_abs_diff(&want) < 1e-12, "level {level}");
        }
    }

    #[test]
    fn fusion_errors() {
        let mut store = ParamStore::<f64>::new();
        assert!(FusionParams::new(&mut store, 1, &config(), &mut Rng::new(0)).is_err());
        let fusion = FusionParams::new(&mut store, 2, &config(), &mut Rng::new(0)).unwrap();
        let mut tape = Tape::new();
        let a = random_pyramid(&mut tape, 1, 1, 2, 1);
        let b = random_pyramid(&mut tape, 1, 2, 2, 2);
        assert!(matches!(fusion.fuse_streams(&mut tape, &store, &[a]), Err(Error::Parameter(_))));
        assert!(matches!(fusion.fuse_streams(&mut tape, &store, &[a, b]), Err(Error::Shape(_))));
        let rec = RecurrentParams::new(&mut store, &config(), &mut Rng::new(0)).unwrap();
        assert!(matches!(rec.recurrent_fuse(&mut tape, &store, &[a]), Err(Error::Parameter(_))));
        assert!(matches!(rec.recurrent_fuse(&mut tape, &store, &[a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn order_matters_for_generic_weights() {
        let mut store = ParamStore::<f64>::new();
        let fusion = FusionParams::new(&mut store, 3, &config(), &mut Rng::new(5)).unwrap();
        let mut tape = Tape::new();
        let ps: Vec<_> = (0..3).map(|k| random_pyramid(&mut tape, 1, 1, 2, 70 + 10 * k)).collect();
        let fwd = fusion.fuse_streams(&mut tape, &store, &ps).unwrap();
        let rev: Vec<_> = ps.iter().rev().copied().collect();
        let bwd = fusion.fuse_streams(&mut tape, &store, &rev).unwrap();
        for level in 0..3 {
            assert_ne!(tape.value(fwd.levels()[level]), tape.value(bwd.levels()[level]));
        }
    }

    #[test]
    fn zero_lstm_weights_give_zero_conv5() {
        let mut store = ParamStore::<f64>::new();
        let rec = RecurrentParams::new(&mut store, &config(), &mut Rng::new(6)).unwrap();
        store.get_mut(rec.lstm.gates.weight).value.data_mut().fill(0.0);
        store.get_mut(rec.lstm.gates.bias).value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let ps: Vec<_> = (0..2).map(|k| random_pyramid(&mut tape, 1, 2, 3, 80 + 10 * k)).collect();
        let out = rec.recurrent_fuse(&mut tape, &store, &ps).unwrap();
        assert!(tape.value(out.conv5).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merge_selector_returns_current_levels() {
        let mut store = ParamStore::<f64>::new();
        let rec = RecurrentParams::new(&mut store, &config(), &mut Rng::new(7)).unwrap();
        set_selector(&mut store, &rec.merge3, 1);
        set_selector(&mut store, &rec.merge4, 1);
        let mut tape = Tape::new();
        let ps: Vec<_> = (0..3).map(|k| random_pyramid(&mut tape, 1, 2, 2, 90 + 10 * k)).collect();
        let out = rec.recurrent_fuse(&mut tape, &store, &ps).unwrap();
        assert_eq!(tape.value(out.conv3), tape.value(ps[2].conv3));
        assert_eq!(tape.value(out.conv4), tape.value(ps[2].conv4));
    }

    #[test]
    fn output_shapes_match_single_stream() {
        for k in 2..=4 {
            for (h, w) in [(1, 1), (2, 3), (3, 2)] {
                let mut store = ParamStore::<f64>::new();
                let fusion = FusionParams::new(&mut store, k, &config(), &mut Rng::new(8)).unwrap();
                let rec = RecurrentParams::new(&mut store, &config(), &mut Rng::new(9)).unwrap();
                let mut tape = Tape::new();
                let ps: Vec<_> = (0..k).map(|i| random_pyramid(&mut tape, 2, h, w, 100 + 10 * i as u64)).collect();
                let want = pyramid_shapes(&tape, &ps[0]);
                let a = fusion.fuse_streams(&mut tape, &store, &ps).unwrap();
                let b = rec.recurrent_fuse(&mut tape, &store, &ps).unwrap();
                assert_eq!(pyramid_shapes(&tape, &a), want);
                assert_eq!(pyramid_shapes(&tape, &b), want);
            }
        }
    }
}
