//! Three-branch cascade segmentation network with optional recurrent units.
//!
//! Branches read the frame at full, half and quarter resolution; the deepest
//! stack runs on the coarsest input. Two fusion stages merge coarse into fine
//! features (1x1 projections of both inputs, the coarse one upsampled, summed,
//! ReLU), and a 1x1 classifier produces per-pixel class logits at input
//! resolution.
//!
//! Recurrent unit placements per version:
//!
//! | version | placements                               |
//! |---------|------------------------------------------|
//! | Base    | none                                     |
//! | V2      | on the class logits, before the softmax  |
//! | V5      | at the end of each of the three branches |
//! | V6      | V2 and V5 together                       |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{CellState, RecurrentUnit, RecurrentUnitSpec, StateVars, UnitDesign};
use crate::error::{Error, Result};
use crate::layers::{ConvBlock, Pointwise};
use crate::ops::Resize;
use crate::params::{Bound, ParamSet};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Version {
    Base,
    V2,
    V5,
    V6,
}

impl Version {
    pub const ALL: [Version; 4] = [Version::Base, Version::V2, Version::V5, Version::V6];

    pub fn placements(self) -> &'static [Placement] {
        use Placement::*;
        match self {
            Version::Base => &[],
            Version::V2 => &[Head],
            Version::V5 => &[Full, Half, Quarter],
            Version::V6 => &[Full, Half, Quarter, Head],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Version::Base => "base",
            Version::V2 => "v2",
            Version::V5 => "v5",
            Version::V6 => "v6",
        }
    }
}

impl FromStr for Version {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Version::Base),
            "v2" | "2" => Ok(Version::V2),
            "v5" | "5" => Ok(Version::V5),
            "v6" | "6" => Ok(Version::V6),
            other => Err(Error::Invalid(format!("unknown network version {other:?}"))),
        }
    }
}

/// Where a recurrent unit sits in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// End of the full-resolution branch.
    Full,
    /// End of the half-resolution branch.
    Half,
    /// End of the quarter-resolution branch.
    Quarter,
    /// On the class logits.
    Head,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::Full => "full",
            Placement::Half => "half",
            Placement::Quarter => "quarter",
            Placement::Head => "head",
        }
    }

    fn branch(self) -> Option<usize> {
        match self {
            Placement::Full => Some(0),
            Placement::Half => Some(1),
            Placement::Quarter => Some(2),
            Placement::Head => None,
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub num_classes: usize,
    /// Width of the fused features after each fusion stage.
    pub base_channels: usize,
    /// Widths of the full, half and quarter resolution branches.
    pub branch_widths: [usize; 3],
    /// Number of conv blocks per branch.
    pub branch_depths: [usize; 3],
    pub version: Version,
    pub unit_design: UnitDesign,
    pub unit_kernel: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_classes: 8,
            base_channels: 16,
            branch_widths: [16, 32, 64],
            branch_depths: [1, 2, 3],
            version: Version::Base,
            unit_design: UnitDesign::Standard,
            unit_kernel: 3,
            height: 64,
            width: 128,
        }
    }
}

impl NetworkConfig {
    pub fn with_version(mut self, version: Version, design: UnitDesign) -> Self {
        self.version = version;
        self.unit_design = design;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "input extents {}x{} must be positive multiples of 4",
                self.height, self.width
            )));
        }
        if self.base_channels == 0 || self.branch_widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.branch_depths.contains(&0) {
            return Err(Error::Config("every branch needs at least one conv block".into()));
        }
        for &p in self.version.placements() {
            self.unit_spec(p)
                .validate()
                .map_err(|e| Error::Config(format!("{p} unit: {e}")))?;
        }
        Ok(())
    }

    pub fn placements(&self) -> &'static [Placement] {
        self.version.placements()
    }

    /// Channel width and feature-map extents seen by the unit at `p`.
    pub fn placement_geometry(&self, p: Placement) -> (usize, usize, usize) {
        match p.branch() {
            Some(b) => (self.branch_widths[b], self.height >> b, self.width >> b),
            None => (self.num_classes, self.height, self.width),
        }
    }

    pub fn unit_spec(&self, p: Placement) -> RecurrentUnitSpec {
        RecurrentUnitSpec::new(self.unit_design, self.placement_geometry(p).0, self.unit_kernel)
    }

    /// Stable digest of the configuration, stored in checkpoints.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serialises");
        let hash = Sha256::digest(&json);
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
struct Fusion {
    coarse: Pointwise,
    fine: Pointwise,
}

impl Fusion {
    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, coarse: Var, fine: Var) -> Result<Var> {
        // 1x1 projection commutes with bilinear upsampling, so project first.
        let c = self.coarse.forward(tape, p, coarse)?;
        let c = tape.resize_bilinear(c, Resize::Double)?;
        let f = self.fine.forward(tape, p, fine)?;
        let s = tape.add(c, f)?;
        tape.relu(s)
    }
}

/// Recurrent state of every unit in a network, keyed by placement.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<T> {
    pub cells: BTreeMap<Placement, CellState<T>>,
}

impl<T: Real> NetworkState<T> {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Per-frame outputs recorded by [`Network::trace`].
pub struct Trace {
    /// Class logits per frame; `None` for frames whose head was not evaluated.
    pub logits: Vec<Option<Var>>,
    pub state: BTreeMap<Placement, StateVars>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub params: ParamSet<T>,
    branches: [Vec<ConvBlock>; 3],
    fuse_quarter: Fusion,
    fuse_half: Fusion,
    classifier: Pointwise,
    units: BTreeMap<Placement, RecurrentUnit>,
}

/// Name prefix of every recurrent-unit parameter.
pub const UNIT_PREFIX: &str = "unit.";

impl<T: Real> Network<T> {
    /// Builds a network. Backbone and recurrent parameters come from separate
    /// streams of `seed`, so every version built from one seed shares the
    /// same backbone initialisation.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut backbone_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit_rng = ChaCha8Rng::seed_from_u64(seed);
        unit_rng.set_stream(1);
        let mut params = ParamSet::new();

        let branches = [0usize, 1, 2].map(|b| {
            let width = config.branch_widths[b];
            (0..config.branch_depths[b])
                .map(|d| {
                    let inc = if d == 0 { 3 } else { width };
                    ConvBlock::new(&mut params, &format!("branch{b}.{d}"), inc, width, &mut backbone_rng)
                })
                .collect::<Vec<_>>()
        });
        let [w1, w2, w4] = config.branch_widths;
        let wc = config.base_channels;
        let fuse_quarter = Fusion {
            coarse: Pointwise::new(&mut params, "fuse_quarter.coarse", w4, wc, &mut backbone_rng),
            fine: Pointwise::new(&mut params, "fuse_quarter.fine", w2, wc, &mut backbone_rng),
        };
        let fuse_half = Fusion {
            coarse: Pointwise::new(&mut params, "fuse_half.coarse", wc, wc, &mut backbone_rng),
            fine: Pointwise::new(&mut params, "fuse_half.fine", w1, wc, &mut backbone_rng),
        };
        let classifier = Pointwise::new(&mut params, "classifier", wc, config.num_classes, &mut backbone_rng);

        let mut units = BTreeMap::new();
        for &p in config.placements() {
            let name = format!("{UNIT_PREFIX}{}", p.name());
            units.insert(
                p,
                RecurrentUnit::new(&mut params, &name, config.unit_spec(p), &mut unit_rng)?,
            );
        }
        Ok(Network {
            config,
            params,
            branches,
            fuse_quarter,
            fuse_half,
            classifier,
            units,
        })
    }

    pub fn units(&self) -> &BTreeMap<Placement, RecurrentUnit> {
        &self.units
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn recurrent_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(UNIT_PREFIX))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, 3, self.config.height, self.config.width)
    }

    pub fn zero_state(&self, batch: usize) -> NetworkState<T> {
        let cells = self
            .units
            .iter()
            .map(|(&p, u)| {
                let (c, h, w) = self.config.placement_geometry(p);
                (p, u.zero_state(Shape::new(batch, c, h, w)))
            })
            .collect();
        NetworkState { cells }
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        if s.c != 3 || s.h != self.config.height || s.w != self.config.width {
            return Err(Error::shape(
                "forward_frame",
                format!(
                    "frame {s:?} does not match configured 3x{}x{}",
                    self.config.height, self.config.width
                ),
            ));
        }
        Ok(())
    }

    /// Backbone and units for one frame; returns the class logits.
    pub fn frame_logits(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        state: &mut BTreeMap<Placement, StateVars>,
    ) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let half = tape.resize_bilinear(x, Resize::Half)?;
        let quarter = tape.resize_bilinear(half, Resize::Half)?;
        let inputs = [x, half, quarter];
        let mut feats = [x; 3];
        for (b, blocks) in self.branches.iter().enumerate() {
            let mut f = inputs[b];
            for block in blocks {
                f = block.forward(tape, p, f)?;
            }
            feats[b] = f;
        }
        for (&placement, unit) in &self.units {
            if let Some(b) = placement.branch() {
                let s = state[&placement];
                let (y, next) = unit.forward(tape, p, feats[b], s)?;
                feats[b] = y;
                state.insert(placement, next);
            }
        }
        let fused = self.fuse_quarter.forward(tape, p, feats[2], feats[1])?;
        let fused = self.fuse_half.forward(tape, p, fused, feats[0])?;
        let mut logits = self.classifier.forward(tape, p, fused)?;
        if let Some(unit) = self.units.get(&Placement::Head) {
            let (y, next) = unit.forward(tape, p, logits, state[&Placement::Head])?;
            logits = y;
            state.insert(Placement::Head, next);
        }
        Ok(logits)
    }

    /// Runs `frames` in order from a zero state. Without recurrent units only
    /// the last frame is evaluated.
    pub fn trace(&self, tape: &mut Tape<T>, p: &Bound, frames: &[Var]) -> Result<Trace> {
        let last = frames
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Invalid("empty frame sequence".into()))?;
        let batch = tape.shape(frames[0]).n;
        let zero = self.zero_state(batch);
        let mut state: BTreeMap<_, _> = zero.cells.iter().map(|(&k, s)| (k, s.bind(tape))).collect();
        let mut logits = vec![None; frames.len()];
        let start = if self.units.is_empty() { last } else { 0 };
        for (t, &frame) in frames.iter().enumerate().skip(start) {
            logits[t] = Some(self.frame_logits(tape, p, frame, &mut state)?);
        }
        Ok(Trace { logits, state })
    }

    /// Cross-entropy of the final frame only, plus the recorded trace.
    pub fn sequence_loss(&self, tape: &mut Tape<T>, p: &Bound, frames: &[Var], labels: &[u8]) -> Result<(Var, Trace)> {
        let trace = self.trace(tape, p, frames)?;
        let last = trace.logits.last().copied().flatten().expect("final frame evaluated");
        let loss = tape.cross_entropy(last, labels)?;
        Ok((loss, trace))
    }

    /// Per-pixel class probabilities for one frame given the incoming state.
    pub fn forward_frame(&self, x: &Tensor<T>, state: &NetworkState<T>) -> Result<(Tensor<T>, NetworkState<T>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mut sv: BTreeMap<_, _> = self
            .units
            .keys()
            .map(|k| {
                state
                    .cells
                    .get(k)
                    .map(|s| (*k, s.bind(&mut tape)))
                    .ok_or_else(|| Error::Invalid(format!("state lacks the {k} unit")))
            })
            .collect::<Result<_>>()?;
        let logits = self.frame_logits(&mut tape, &p, xv, &mut sv)?;
        let probs = tape.softmax_channels(logits)?;
        let cells = sv.into_iter().map(|(k, v)| (k, CellState::read(&tape, v))).collect();
        Ok((tape.value(probs).clone(), NetworkState { cells }))
    }

    /// Final-frame probabilities after threading a fresh state through `frames`.
    pub fn forward_sequence(&self, frames: &[Tensor<T>]) -> Result<(Tensor<T>, NetworkState<T>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let vars: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
        let trace = self.trace(&mut tape, &p, &vars)?;
        let last = trace.logits.last().copied().flatten().expect("final frame evaluated");
        let probs = tape.softmax_channels(last)?;
        let cells = trace
            .state
            .into_iter()
            .map(|(k, v)| (k, CellState::read(&tape, v)))
            .collect();
        Ok((tape.value(probs).clone(), NetworkState { cells }))
    }

    /// Probabilities for every frame of a sequence, state threaded throughout.
    pub fn predict_frames(&self, frames: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let batch = frames
            .first()
            .ok_or_else(|| Error::Invalid("empty frame sequence".into()))?
            .shape()
            .n;
        let mut state = self.zero_state(batch);
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            let (probs, next) = self.forward_frame(f, &state)?;
            out.push(probs);
            state = next;
        }
        Ok(out)
    }
}

/// Per-pixel argmax over channels of a `[1, k, h, w]` map.
pub fn argmax_labels<T: Real>(probs: &Tensor<T>) -> Vec<u8> {
    let s = probs.shape();
    let p = s.plane();
    let d = probs.data();
    let mut out = Vec::with_capacity(s.n * p);
    for n in 0..s.n {
        let base = n * s.c * p;
        for px in 0..p {
            let mut best = 0;
            for c in 1..s.c {
                if d[base + c * p + px] > d[base + best * p + px] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
