//! Convolutional LSTM cells and the insertable recurrent units built on them.
//!
//! Both cells use the peephole formulation
//!
//! ```text
//! i  = σ(Wxi * x + Whi * h + wci ∘ c  + bi)
//! f  = σ(Wxf * x + Whf * h + wcf ∘ c  + bf)
//! c' = f ∘ c + i ∘ tanh(Wxc * x + Whc * h + bc)
//! o  = σ(Wxo * x + Who * h + wco ∘ c' + bo)
//! h' = o ∘ tanh(c')
//! ```
//!
//! with eight gate convolutions per step. In the dense cell they mix channels;
//! in the depthwise cell every convolution acts on one channel, so the cell
//! needs equal input and hidden widths. Peephole weights are per channel and
//! broadcast over the feature map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Pointwise;
use crate::params::{Bound, ParamId, ParamSet};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Hidden and cell maps carried between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> CellState<T> {
    pub fn zeros(shape: Shape) -> Self {
        CellState {
            h: Tensor::zeros(shape),
            c: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> Shape {
        self.h.shape()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> StateVars {
        StateVars {
            h: tape.constant(self.h.clone()),
            c: tape.constant(self.c.clone()),
        }
    }

    pub fn read(tape: &Tape<T>, vars: StateVars) -> Self {
        CellState {
            h: tape.value(vars.h).clone(),
            c: tape.value(vars.c).clone(),
        }
    }
}

/// A [`CellState`] recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    /// Dense gate convolutions.
    Dense,
    /// Per-channel gate convolutions.
    Depthwise,
}

/// Gate order of the weight arrays: input, forget, candidate, output.
pub const GATES: [&str; 4] = ["i", "f", "c", "o"];
const I: usize = 0;
const F: usize = 1;
const G: usize = 2;
const O: usize = 3;

#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    pub kind: CellKind,
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: (usize, usize),
    /// Input-to-gate kernels.
    pub wx: [ParamId; 4],
    /// Hidden-to-gate kernels.
    pub wh: [ParamId; 4],
    pub bias: [ParamId; 4],
    /// Peepholes for the input, forget and output gates.
    pub peephole: [ParamId; 3],
}

impl ConvLstmCell {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        kind: CellKind,
        in_channels: usize,
        hidden: usize,
        kernel: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.0.is_multiple_of(2) || kernel.1.is_multiple_of(2) {
            return Err(Error::EvenKernel(kernel.0, kernel.1));
        }
        if in_channels == 0 || hidden == 0 {
            return Err(Error::Config("cell widths must be positive".into()));
        }
        if kind == CellKind::Depthwise && in_channels != hidden {
            return Err(Error::shape(
                "sep_convlstm",
                format!("depthwise cell needs equal widths, got {in_channels} -> {hidden}"),
            ));
        }
        let taps = kernel.0 * kernel.1;
        let (xshape, hshape, xfan, hfan) = match kind {
            CellKind::Dense => (
                Shape::new(hidden, in_channels, kernel.0, kernel.1),
                Shape::new(hidden, hidden, kernel.0, kernel.1),
                in_channels * taps,
                hidden * taps,
            ),
            CellKind::Depthwise => {
                let s = Shape::new(1, hidden, kernel.0, kernel.1);
                (s, s, taps, taps)
            }
        };
        let vec_shape = Shape::new(1, hidden, 1, 1);
        let mut add = |suffix: String, t: Tensor<T>| params.add(format!("{name}.{suffix}"), t);
        let wx = GATES.map(|g| {
            add(
                format!("wx_{g}"),
                Tensor::uniform(xshape, 1.0 / (xfan as f64).sqrt(), rng),
            )
        });
        let wh = GATES.map(|g| {
            add(
                format!("wh_{g}"),
                Tensor::uniform(hshape, 1.0 / (hfan as f64).sqrt(), rng),
            )
        });
        let bias = GATES.map(|g| {
            let init = if g == "f" { T::one() } else { T::zero() };
            add(format!("b_{g}"), Tensor::full(vec_shape, init))
        });
        let peephole = ["i", "f", "o"].map(|g| add(format!("wc_{g}"), Tensor::zeros(vec_shape)));
        Ok(ConvLstmCell {
            kind,
            in_channels,
            hidden,
            kernel,
            wx,
            wh,
            bias,
            peephole,
        })
    }

    pub fn state_shape(&self, input: Shape) -> Shape {
        input.with_c(self.hidden)
    }

    fn gate_conv<T: Real>(&self, tape: &mut Tape<T>, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        match self.kind {
            CellKind::Dense => tape.conv2d(x, k, b),
            CellKind::Depthwise => tape.depthwise_conv2d(x, k, b),
        }
    }

    fn pre_activation<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, h: Var, gate: usize) -> Result<Var> {
        let xc = self.gate_conv(tape, x, p.var(self.wx[gate]), Some(p.var(self.bias[gate])))?;
        let hc = self.gate_conv(tape, h, p.var(self.wh[gate]), None)?;
        tape.add(xc, hc)
    }

    fn check<T: Real>(&self, tape: &Tape<T>, x: Var, state: StateVars) -> Result<()> {
        let (xs, hs, cs) = (tape.shape(x), tape.shape(state.h), tape.shape(state.c));
        if xs.c != self.in_channels {
            return Err(Error::shape(
                "convlstm_step",
                format!("input has {} channels, cell expects {}", xs.c, self.in_channels),
            ));
        }
        if hs != cs || hs != self.state_shape(xs) {
            return Err(Error::shape(
                "convlstm_step",
                format!(
                    "state h {hs:?} c {cs:?} does not fit input {xs:?} with {} hidden",
                    self.hidden
                ),
            ));
        }
        Ok(())
    }

    /// One time step on `tape`.
    pub fn step<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, state: StateVars) -> Result<StateVars> {
        self.check(tape, x, state)?;
        let StateVars { h, c } = state;

        let pi = self.pre_activation(tape, p, x, h, I)?;
        let pc = tape.channel_mul(c, p.var(self.peephole[0]))?;
        let pi = tape.add(pi, pc)?;
        let i = tape.sigmoid(pi)?;

        let pf = self.pre_activation(tape, p, x, h, F)?;
        let pc = tape.channel_mul(c, p.var(self.peephole[1]))?;
        let pf = tape.add(pf, pc)?;
        let f = tape.sigmoid(pf)?;

        let pg = self.pre_activation(tape, p, x, h, G)?;
        let g = tape.tanh(pg)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;

        let po = self.pre_activation(tape, p, x, h, O)?;
        let pc = tape.channel_mul(c_next, p.var(self.peephole[2]))?;
        let po = tape.add(po, pc)?;
        let o = tape.sigmoid(po)?;

        let squashed = tape.tanh(c_next)?;
        let h_next = tape.mul(o, squashed)?;
        Ok(StateVars { h: h_next, c: c_next })
    }
}

fn run_cell<T: Real>(
    cell: &ConvLstmCell,
    params: &ParamSet<T>,
    x: &Tensor<T>,
    state: &CellState<T>,
) -> Result<(Tensor<T>, CellState<T>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let sv = state.bind(&mut tape);
    let next = cell.step(&mut tape, &p, xv, sv)?;
    let state = CellState::read(&tape, next);
    Ok((state.h.clone(), state))
}

/// One step of a dense convLSTM cell outside of any training tape.
pub fn convlstm_step<T: Real>(
    cell: &ConvLstmCell,
    params: &ParamSet<T>,
    x: &Tensor<T>,
    state: &CellState<T>,
) -> Result<(Tensor<T>, CellState<T>)> {
    if cell.kind != CellKind::Dense {
        return Err(Error::Invalid("convlstm_step needs a dense cell".into()));
    }
    run_cell(cell, params, x, state)
}

/// One step of a depthwise convLSTM cell outside of any training tape.
pub fn sep_convlstm_step<T: Real>(
    cell: &ConvLstmCell,
    params: &ParamSet<T>,
    x: &Tensor<T>,
    state: &CellState<T>,
) -> Result<(Tensor<T>, CellState<T>)> {
    if cell.kind != CellKind::Depthwise {
        return Err(Error::Invalid("sep_convlstm_step needs a depthwise cell".into()));
    }
    run_cell(cell, params, x, state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitDesign {
    /// Full-width dense convLSTM.
    Standard,
    /// Half-width dense convLSTM beside a 1x1 convolution.
    Fast,
    /// 1x1 reduction into a half-width depthwise convLSTM, beside a 1x1 convolution.
    Faster,
}

impl UnitDesign {
    pub const ALL: [UnitDesign; 3] = [UnitDesign::Standard, UnitDesign::Fast, UnitDesign::Faster];

    pub fn name(self) -> &'static str {
        match self {
            UnitDesign::Standard => "standard",
            UnitDesign::Fast => "fast",
            UnitDesign::Faster => "faster",
        }
    }
}

impl std::str::FromStr for UnitDesign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(UnitDesign::Standard),
            "fast" => Ok(UnitDesign::Fast),
            "faster" => Ok(UnitDesign::Faster),
            other => Err(Error::Invalid(format!("unknown unit design {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentUnitSpec {
    pub design: UnitDesign,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
}

impl RecurrentUnitSpec {
    pub fn new(design: UnitDesign, channels: usize, kernel: usize) -> Self {
        RecurrentUnitSpec {
            design,
            in_channels: channels,
            out_channels: channels,
            kernel: (kernel, kernel),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("recurrent unit needs at least one channel".into()));
        }
        if self.out_channels != self.in_channels {
            return Err(Error::Config(format!(
                "recurrent unit output width {} must equal input width {}",
                self.out_channels, self.in_channels
            )));
        }
        if self.design != UnitDesign::Standard && !self.in_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{} unit needs an even channel count, got {}",
                self.design.name(),
                self.in_channels
            )));
        }
        if self.kernel.0.is_multiple_of(2) || self.kernel.1.is_multiple_of(2) {
            return Err(Error::EvenKernel(self.kernel.0, self.kernel.1));
        }
        Ok(())
    }

    /// Width of the carried state.
    pub fn state_channels(&self) -> usize {
        match self.design {
            UnitDesign::Standard => self.out_channels,
            UnitDesign::Fast | UnitDesign::Faster => self.out_channels / 2,
        }
    }
}

/// An insertable recurrent block whose output width equals its input width.
#[derive(Debug, Clone)]
pub struct RecurrentUnit {
    pub spec: RecurrentUnitSpec,
    pub cell: ConvLstmCell,
    /// 1x1 reduction feeding the depthwise cell (Faster only).
    pub reduce: Option<Pointwise>,
    /// Parallel 1x1 branch concatenated after the cell output (Fast, Faster).
    pub side: Option<Pointwise>,
}

impl RecurrentUnit {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        spec: RecurrentUnitSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let ch = spec.in_channels;
        let half = spec.state_channels();
        let cell_name = format!("{name}.cell");
        let unit = match spec.design {
            UnitDesign::Standard => RecurrentUnit {
                spec,
                cell: ConvLstmCell::new(params, &cell_name, CellKind::Dense, ch, ch, spec.kernel, rng)?,
                reduce: None,
                side: None,
            },
            UnitDesign::Fast => RecurrentUnit {
                spec,
                cell: ConvLstmCell::new(params, &cell_name, CellKind::Dense, ch, half, spec.kernel, rng)?,
                reduce: None,
                side: Some(Pointwise::new(params, &format!("{name}.side"), ch, half, rng)),
            },
            UnitDesign::Faster => {
                let reduce = Pointwise::new(params, &format!("{name}.reduce"), ch, half, rng);
                let cell = ConvLstmCell::new(params, &cell_name, CellKind::Depthwise, half, half, spec.kernel, rng)?;
                RecurrentUnit {
                    spec,
                    cell,
                    reduce: Some(reduce),
                    side: Some(Pointwise::new(params, &format!("{name}.side"), ch, half, rng)),
                }
            }
        };
        Ok(unit)
    }

    pub fn state_shape(&self, input: Shape) -> Shape {
        input.with_c(self.spec.state_channels())
    }

    pub fn zero_state<T: Real>(&self, input: Shape) -> CellState<T> {
        CellState::zeros(self.state_shape(input))
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        state: StateVars,
    ) -> Result<(Var, StateVars)> {
        let xs = tape.shape(x);
        if xs.c != self.spec.in_channels {
            return Err(Error::shape(
                "recurrent_unit_forward",
                format!("input has {} channels, unit expects {}", xs.c, self.spec.in_channels),
            ));
        }
        if tape.shape(state.h) != self.state_shape(xs) {
            return Err(Error::shape(
                "recurrent_unit_forward",
                format!(
                    "{} unit expects state {:?}, got {:?}",
                    self.spec.design.name(),
                    self.state_shape(xs),
                    tape.shape(state.h)
                ),
            ));
        }
        let cell_in = match &self.reduce {
            Some(r) => r.forward(tape, p, x)?,
            None => x,
        };
        let next = self.cell.step(tape, p, cell_in, state)?;
        let y = match &self.side {
            Some(side) => {
                let s = side.forward(tape, p, x)?;
                tape.concat_channels(next.h, s)?
            }
            None => next.h,
        };
        Ok((y, next))
    }
}

/// One step of a recurrent unit outside of any training tape.
pub fn recurrent_unit_forward<T: Real>(
    unit: &RecurrentUnit,
    params: &ParamSet<T>,
    x: &Tensor<T>,
    state: &CellState<T>,
) -> Result<(Tensor<T>, CellState<T>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let sv = state.bind(&mut tape);
    let (y, next) = unit.forward(&mut tape, &p, xv, sv)?;
    Ok((tape.value(y).clone(), CellState::read(&tape, next)))
}
