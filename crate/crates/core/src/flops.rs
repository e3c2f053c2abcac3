//! Analytic FLOP accounting for the recurrent units and the networks using them.
//!
//! Per-unit costs, with `D = Dx·Dy` and one multiply-accumulate counted as two FLOPs:
//!
//! ```text
//! standard: (16·Kx·Ky·I + 37)·O·D
//! fast:     ((16·Kx·Ky·I + 37)·O/2 + 2·I·O/2)·D
//! faster:   ((2·I + 16·Kx·Ky + 37)·O/2 + 2·I·O/2)·D
//! ```
//!
//! The `37` is the elementwise budget per output element and is taken as
//! given; only the convolution terms are checked against instrumented runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{RecurrentUnit, RecurrentUnitSpec, UnitDesign};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::segnet::{NetworkConfig, Placement, Version};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

const ELEMENTWISE: u64 = 37;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitCostInputs {
    pub i: u64,
    pub o: u64,
    pub kx: u64,
    pub ky: u64,
    pub dx: u64,
    pub dy: u64,
}

impl UnitCostInputs {
    pub fn new(i: u64, o: u64, k: u64, dx: u64, dy: u64) -> Self {
        UnitCostInputs {
            i,
            o,
            kx: k,
            ky: k,
            dx,
            dy,
        }
    }

    fn check(&self, design: UnitDesign) -> Result<()> {
        let UnitCostInputs { i, o, kx, ky, dx, dy } = *self;
        if [i, o, kx, ky, dx, dy].contains(&0) {
            return Err(Error::Invalid(format!("cost inputs must be positive: {self:?}")));
        }
        if design != UnitDesign::Standard && o % 2 != 0 {
            return Err(Error::Invalid(format!(
                "{} unit needs an even O, got {o}",
                design.name()
            )));
        }
        Ok(())
    }

    fn area(&self) -> u64 {
        self.dx * self.dy
    }

    fn taps(&self) -> u64 {
        self.kx * self.ky
    }
}

pub fn flops_standard_unit(c: &UnitCostInputs) -> Result<u64> {
    c.check(UnitDesign::Standard)?;
    Ok((16 * c.taps() * c.i + ELEMENTWISE) * c.o * c.area())
}

pub fn flops_fast_unit(c: &UnitCostInputs) -> Result<u64> {
    c.check(UnitDesign::Fast)?;
    let half = c.o / 2;
    Ok(((16 * c.taps() * c.i + ELEMENTWISE) * half + 2 * c.i * half) * c.area())
}

pub fn flops_faster_unit(c: &UnitCostInputs) -> Result<u64> {
    c.check(UnitDesign::Faster)?;
    let half = c.o / 2;
    Ok(((2 * c.i + 16 * c.taps() + ELEMENTWISE) * half + 2 * c.i * half) * c.area())
}

pub fn unit_flops(design: UnitDesign, c: &UnitCostInputs) -> Result<u64> {
    match design {
        UnitDesign::Standard => flops_standard_unit(c),
        UnitDesign::Fast => flops_fast_unit(c),
        UnitDesign::Faster => flops_faster_unit(c),
    }
}

/// The convolution part of each formula: everything except the `37` term.
pub fn conv_flops(design: UnitDesign, c: &UnitCostInputs) -> Result<u64> {
    c.check(design)?;
    let half = c.o / 2;
    Ok(match design {
        UnitDesign::Standard => 16 * c.taps() * c.i * c.o,
        UnitDesign::Fast => 16 * c.taps() * c.i * half + 2 * c.i * half,
        UnitDesign::Faster => (2 * c.i + 16 * c.taps()) * half + 2 * c.i * half,
    } * c.area())
}

/// Multiply-accumulates of one forward step of a freshly initialised unit,
/// counted by an instrumented tape.
pub fn measured_unit_macs(spec: RecurrentUnitSpec, dx: usize, dy: usize) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ParamSet::<f32>::new();
    let unit = RecurrentUnit::new(&mut params, "unit", spec, &mut rng)?;
    let shape = Shape::chw(spec.in_channels, dy, dx);
    let mut tape = Tape::instrumented();
    let p = params.bind(&mut tape);
    let x = tape.constant(Tensor::uniform(shape, 1.0, &mut rng));
    let state = unit.zero_state::<f32>(shape).bind(&mut tape);
    unit.forward(&mut tape, &p, x, state)?;
    tape.macs()
}

/// The three unit designs side by side at one operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitComparison {
    pub inputs: UnitCostInputs,
    pub standard: u64,
    pub fast: u64,
    pub faster: u64,
    pub fast_over_standard: f64,
    pub faster_over_standard: f64,
    pub faster_over_fast: f64,
}

impl UnitComparison {
    pub fn new(inputs: UnitCostInputs) -> Result<Self> {
        let standard = flops_standard_unit(&inputs)?;
        let fast = flops_fast_unit(&inputs)?;
        let faster = flops_faster_unit(&inputs)?;
        Ok(UnitComparison {
            inputs,
            standard,
            fast,
            faster,
            fast_over_standard: fast as f64 / standard as f64,
            faster_over_standard: faster as f64 / standard as f64,
            faster_over_fast: faster as f64 / fast as f64,
        })
    }

    pub fn table(&self) -> String {
        let c = &self.inputs;
        let mut s = format!(
            "I={} O={} K={}x{} D={}x{}\n{:<10} {:>16} {:>12}\n",
            c.i, c.o, c.kx, c.ky, c.dx, c.dy, "unit", "FLOPs", "vs standard"
        );
        for (name, v) in [
            ("standard", self.standard),
            ("fast", self.fast),
            ("faster", self.faster),
        ] {
            let _ = writeln!(
                s,
                "{name:<10} {v:>16} {:>11.2}%",
                100.0 * v as f64 / self.standard as f64
            );
        }
        let _ = writeln!(s, "faster/fast {:.2}%", 100.0 * self.faster_over_fast);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementCost {
    pub placement: Placement,
    pub inputs: UnitCostInputs,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub version: Version,
    pub design: UnitDesign,
    pub placements: Vec<PlacementCost>,
    pub recurrent_flops: u64,
    /// Two FLOPs per convolution MAC of the non-recurrent layers.
    pub backbone_flops: u64,
    pub total_flops: u64,
    /// Recurrent FLOPs of this version under each unit design.
    pub recurrent_by_design: BTreeMap<UnitDesign, u64>,
    /// Cheaper-over-costlier ratios.
    pub ratios: BTreeMap<String, f64>,
}

fn placement_costs(config: &NetworkConfig, design: UnitDesign) -> Result<Vec<PlacementCost>> {
    config
        .placements()
        .iter()
        .map(|&p| {
            let (c, h, w) = config.placement_geometry(p);
            let inputs = UnitCostInputs::new(c as u64, c as u64, config.unit_kernel as u64, w as u64, h as u64);
            Ok(PlacementCost {
                placement: p,
                inputs,
                flops: unit_flops(design, &inputs)?,
            })
        })
        .collect()
}

fn backbone_flops(config: &NetworkConfig) -> u64 {
    let (h, w) = (config.height as u64, config.width as u64);
    let mut macs = 0;
    for b in 0..3 {
        let pixels = (h >> b) * (w >> b);
        let width = config.branch_widths[b] as u64;
        for d in 0..config.branch_depths[b] {
            let inc = if d == 0 { 3 } else { width };
            macs += inc * width * 9 * pixels;
        }
    }
    let [w1, w2, w4] = config.branch_widths.map(|v| v as u64);
    let wc = config.base_channels as u64;
    let quarter = (h / 4) * (w / 4);
    let half = (h / 2) * (w / 2);
    macs += (w4 * wc) * quarter + (w2 * wc) * half;
    macs += (wc * wc) * half + (w1 * wc) * h * w;
    macs += wc * config.num_classes as u64 * h * w;
    2 * macs
}

pub fn network_cost_report(config: &NetworkConfig) -> Result<CostReport> {
    config.validate()?;
    let placements = placement_costs(config, config.unit_design)?;
    let recurrent_flops = placements.iter().map(|p| p.flops).sum();
    let backbone = backbone_flops(config);
    let mut recurrent_by_design = BTreeMap::new();
    for design in UnitDesign::ALL {
        let mut c = config.clone();
        c.unit_design = design;
        if c.validate().is_ok() {
            let total = placement_costs(&c, design)?.iter().map(|p| p.flops).sum();
            recurrent_by_design.insert(design, total);
        }
    }
    let total_flops = backbone + recurrent_flops;
    let mut ratios = BTreeMap::new();
    ratios.insert("base_over_total".to_string(), backbone as f64 / total_flops as f64);
    if config.version != Version::Base {
        let get = |d| recurrent_by_design.get(&d).copied();
        let pairs = [
            ("fast_over_standard", UnitDesign::Fast, UnitDesign::Standard),
            ("faster_over_standard", UnitDesign::Faster, UnitDesign::Standard),
            ("faster_over_fast", UnitDesign::Faster, UnitDesign::Fast),
        ];
        for (name, cheap, costly) in pairs {
            if let (Some(a), Some(b)) = (get(cheap), get(costly)) {
                ratios.insert(name.to_string(), a as f64 / b as f64);
            }
        }
    }
    Ok(CostReport {
        version: config.version,
        design: config.unit_design,
        placements,
        recurrent_flops,
        backbone_flops: backbone,
        total_flops,
        recurrent_by_design,
        ratios,
    })
}

impl CostReport {
    pub fn table(&self) -> String {
        let mut s = format!("version {} / {} units\n", self.version.name(), self.design.name());
        let _ = writeln!(s, "{:<10} {:>6} {:>10} {:>16}", "placement", "I=O", "D", "FLOPs");
        for p in &self.placements {
            let d = format!("{}x{}", p.inputs.dx, p.inputs.dy);
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>10} {:>16}",
                p.placement.name(),
                p.inputs.i,
                d,
                p.flops
            );
        }
        let _ = writeln!(s, "{:<29} {:>16}", "recurrent total", self.recurrent_flops);
        let _ = writeln!(s, "{:<29} {:>16}", "backbone", self.backbone_flops);
        let _ = writeln!(s, "{:<29} {:>16}", "total", self.total_flops);
        for (k, v) in &self.ratios {
            let _ = writeln!(s, "{k:<29} {:>15.2}%", 100.0 * v);
        }
        s
    }
}
