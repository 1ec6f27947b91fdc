//! Parameterized layers that bind [`ParamStore`] entries to tape operations.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Shape4, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Registers `<name>.weight` (He normal) and `<name>.bias` (zeros).
    /// Padding is `kernel / 2`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let shape = Shape4::new(out_channels, in_channels, kernel, kernel)?;
        let weight = store.insert_conv_weight(format!("{name}.weight"), shape, rng)?;
        let bias = store.insert_zeros(format!("{name}.bias"), out_channels)?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.in_channels * self.kernel * self.kernel + 1)
    }
}

/// Per-channel scale (`<name>.gamma`, ones) and shift (`<name>.beta`,
/// zeros) after standardizing `groups` channel groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::param(format!("{groups} groups do not divide {channels} channels in {name}")));
        }
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full(Shape4::new(1, channels, 1, 1)?, T::one())?)?;
        let beta = store.insert_zeros(format!("{name}.beta"), channels)?;
        Ok(Self { gamma, beta, groups })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.group_norm(x, gamma, beta, self.groups)
    }
}

/// Hidden and cell maps of a [`ConvLstmCell`].
#[derive(Debug, Clone, Copy)]
pub struct ConvLstmState {
    pub h: Var,
    pub c: Var,
}

/// LSTM cell whose four gates are one 3×3 convolution over `[x, h]`.
///
/// Gate channel blocks are ordered input, forget, candidate, output. The
/// forget-gate bias starts at +1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLstmCell {
    pub gates: Conv2d,
    pub input_channels: usize,
    pub hidden: usize,
}

impl ConvLstmCell {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input_channels: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let gates = Conv2d::new(store, &format!("{name}.gates"), input_channels + hidden, 4 * hidden, 3, 1, rng)?;
        let bias = store.get_mut(gates.bias);
        bias.value.data_mut()[hidden..2 * hidden].fill(T::one());
        Ok(Self {
            gates,
            input_channels,
            hidden,
        })
    }

    pub fn zero_state<T: Real>(&self, tape: &mut Tape<T>, n: usize, h: usize, w: usize) -> Result<ConvLstmState> {
        let shape = Shape4::new(n, self.hidden, h, w)?;
        Ok(ConvLstmState {
            h: tape.constant(Tensor::zeros(shape)?),
            c: tape.constant(Tensor::zeros(shape)?),
        })
    }

    /// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
    pub fn step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        state: ConvLstmState,
    ) -> Result<ConvLstmState> {
        let xs = tape.value(x).shape();
        let hs = tape.value(state.h).shape();
        if xs.c != self.input_channels || (xs.n, xs.h, xs.w) != (hs.n, hs.h, hs.w) || hs.c != self.hidden {
            return Err(Error::shape(format!(
                "conv-lstm step: input {xs} and hidden {hs} incompatible with cell ({} -> {})",
                self.input_channels, self.hidden
            )));
        }
        if tape.value(state.c).shape() != hs {
            return Err(Error::shape("conv-lstm hidden and cell maps differ in shape"));
        }
        let xh = tape.concat_channels(&[x, state.h])?;
        let z = self.gates.forward(tape, store, xh)?;
        let hd = self.hidden;
        let zi = tape.slice_channels(z, 0..hd)?;
        let zf = tape.slice_channels(z, hd..2 * hd)?;
        let zg = tape.slice_channels(z, 2 * hd..3 * hd)?;
        let zo = tape.slice_channels(z, 3 * hd..4 * hd)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(ConvLstmState { h, c })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    /// Per-pixel LSTM evaluated with explicit loops in f64. `w` is the gate
    /// kernel `4H × (Cx + H) × 3 × 3`, `b` its bias; returns (h, c).
    fn scalar_lstm(xs: &[Tensor<f64>], w: &Tensor<f64>, b: &[f64], hidden: usize) -> (Vec<f64>, Vec<f64>) {
        let s = xs[0].shape();
        let cx = s.c;
        let idx = |n: usize, c: usize, y: usize, x: usize| ((n * hidden + c) * s.h + y) * s.w + x;
        let mut h = vec![0.0; s.n * hidden * s.plane()];
        let mut c = h.clone();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for x_t in xs {
            let input = |n: usize, ch: usize, y: isize, xx: isize, h: &[f64]| -> f64 {
                if y < 0 || xx < 0 || y >= s.h as isize || xx >= s.w as isize {
                    return 0.0;
                }
                let (y, xx) = (y as usize, xx as usize);
                if ch < cx {
                    x_t.get(n, ch, y, xx)
                } else {
                    h[idx(n, ch - cx, y, xx)]
                }
            };
            let mut h_new = h.clone();
            let mut c_new = c.clone();
            for n in 0..s.n {
                for y in 0..s.h {
                    for xx in 0..s.w {
                        for k in 0..hidden {
                            let pre = |gate: usize| {
                                let o = gate * hidden + k;
                                let mut acc = b[o];
                                for ch in 0..cx + hidden {
                                    for ky in 0..3 {
                                        for kx in 0..3 {
                                            let v = input(n, ch, y as isize + ky as isize - 1, xx as isize + kx as isize - 1, &h);
                                            acc += w.get(o, ch, ky, kx) * v;
                                        }
                                    }
                                }
                                acc
                            };
                            let (i, f, g, o) = (sig(pre(0)), sig(pre(1)), pre(2).tanh(), sig(pre(3)));
                            let cc = f * c[idx(n, k, y, xx)] + i * g;
                            c_new[idx(n, k, y, xx)] = cc;
                            h_new[idx(n, k, y, xx)] = o * cc.tanh();
                        }
                    }
                }
            }
            h = h_new;
            c = c_new;
        }
        (h, c)
    }

    fn run_cell(store: &ParamStore<f32>, cell: &ConvLstmCell, xs: &[Tensor<f32>]) -> (Tensor<f32>, Tensor<f32>) {
        let mut tape = Tape::new();
        let s = xs[0].shape();
        let mut state = cell.zero_state(&mut tape, s.n, s.h, s.w).unwrap();
        for x in xs {
            let xv = tape.constant(x.clone());
            state = cell.step(&mut tape, store, xv, state).unwrap();
        }
        (tape.value(state.h).clone(), tape.value(state.c).clone())
    }

    #[test]
    fn zero_gates_give_zero_hidden() {
        let mut store = ParamStore::<f32>::new();
        let cell = ConvLstmCell::new(&mut store, "lstm", 3, 4, &mut Rng::new(1)).unwrap();
        store.get_mut(cell.gates.weight).value.data_mut().fill(0.0);
        store.get_mut(cell.gates.bias).value.data_mut().fill(0.0);
        let x = Tensor::randn(Shape4::new(1, 3, 2, 3).unwrap(), 2, 1.0).unwrap();
        let (h, c) = run_cell(&store, &cell, &[x]);
        assert_eq!(h.shape(), Shape4::new(1, 4, 2, 3).unwrap());
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut store = ParamStore::<f32>::new();
        let cell = ConvLstmCell::new(&mut store, "lstm", 2, 3, &mut Rng::new(1)).unwrap();
        let b = store.get(cell.gates.bias).value.data();
        assert_eq!(b, &[0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn matches_scalar_lstm_over_two_steps() {
        let mut store = ParamStore::<f32>::new();
        let cell = ConvLstmCell::new(&mut store, "lstm", 3, 2, &mut Rng::new(3)).unwrap();
        {
            let b = store.get_mut(cell.gates.bias).value.data_mut();
            b.iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * i as f32 - 0.2);
        }
        let x = Tensor::<f32>::randn(Shape4::new(2, 3, 3, 4).unwrap(), 4, 1.0).unwrap();
        let (h, c) = run_cell(&store, &cell, &[x.clone(), x.clone()]);
        let w64 = store.get(cell.gates.weight).value.cast::<f64>();
        let b64: Vec<f64> = store.get(cell.gates.bias).value.data().iter().map(|&v| v as f64).collect();
        let x64 = x.cast::<f64>();
        let (want_h, want_c) = scalar_lstm(&[x64.clone(), x64], &w64, &b64, 2);
        let dh = h.data().iter().zip(&want_h).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max);
        let dc = c.data().iter().zip(&want_c).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(dh <= 1e-5 && dc <= 1e-5, "h {dh} c {dc}");
    }

    #[test]
    fn step_rejects_mismatched_state() {
        let mut store = ParamStore::<f32>::new();
        let cell = ConvLstmCell::new(&mut store, "lstm", 3, 2, &mut Rng::new(3)).unwrap();
        let mut tape = Tape::new();
        let state = cell.zero_state(&mut tape, 1, 2, 2).unwrap();
        let x = tape.constant(Tensor::zeros(Shape4::new(1, 3, 3, 3).unwrap()).unwrap());
        assert!(matches!(cell.step(&mut tape, &store, x, state), Err(Error::Shape(_))));
        let x = tape.constant(Tensor::zeros(Shape4::new(1, 4, 2, 2).unwrap()).unwrap());
        assert!(matches!(cell.step(&mut tape, &store, x, state), Err(Error::Shape(_))));
    }

    #[test]
    fn gradcheck_three_unrolled_steps() {
        let mut store = ParamStore::<f64>::new();
        let cell = ConvLstmCell::new(&mut store, "lstm", 2, 3, &mut Rng::new(5)).unwrap();
        let xs: Vec<Tensor<f64>> = (0..3)
            .map(|t| Tensor::randn(Shape4::new(1, 2, 3, 3).unwrap(), 10 + t, 1.0).unwrap())
            .collect();
        let r = Tensor::<f64>::randn(Shape4::new(1, 3, 3, 3).unwrap(), 20, 1.0).unwrap();
        let report = gradcheck::check(&mut store, 1e-3, 300, 6, |tape, st| {
            let mut state = cell.zero_state(tape, 1, 3, 3)?;
            for x in &xs {
                let xv = tape.constant(x.clone());
                state = cell.step(tape, st, xv, state)?;
            }
            let rv = tape.constant(r.clone());
            let p = tape.mul(state.h, rv)?;
            Ok(tape.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-3, "{:?}", report.worst());
    }
}
