//! Wall-clock timing of single recurrent-unit forward steps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cells::{recurrent_unit_forward, CellState, RecurrentUnit, RecurrentUnitSpec, UnitDesign};
use crate::error::{Error, Result};
use crate::flops::{unit_flops, UnitCostInputs};
use crate::params::ParamSet;
use crate::seed::rng;
use crate::tensor::{Shape, Tensor};

pub const MIN_REPEATS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub designs: Vec<UnitDesign>,
    pub i: usize,
    pub o: usize,
    pub kx: usize,
    pub ky: usize,
    pub dx: usize,
    pub dy: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            designs: UnitDesign::ALL.to_vec(),
            i: 128,
            o: 128,
            kx: 3,
            ky: 3,
            dx: 64,
            dy: 64,
            repeats: 30,
            warmup: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignTiming {
    pub design: UnitDesign,
    pub median_ms: f64,
    pub timings_ms: Vec<f64>,
    /// Analytic cost of one step at the benchmarked extents.
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub designs: Vec<DesignTiming>,
    /// Designs from fastest to slowest median.
    pub ordering: Vec<UnitDesign>,
    /// `a_over_b` ratios of medians and of analytic FLOPs.
    pub time_ratios: BTreeMap<String, f64>,
    pub flop_ratios: BTreeMap<String, f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_design(cfg: &BenchConfig, design: UnitDesign) -> Result<DesignTiming> {
    let spec = RecurrentUnitSpec {
        design,
        in_channels: cfg.i,
        out_channels: cfg.o,
        kernel: (cfg.ky, cfg.kx),
    };
    spec.validate()?;
    let mut r = rng(cfg.seed);
    let mut params = ParamSet::<f32>::new();
    let unit = RecurrentUnit::new(&mut params, "unit", spec, &mut r)?;
    let shape = Shape::chw(cfg.i, cfg.dy, cfg.dx);
    let x = Tensor::<f32>::uniform(shape, 1.0, &mut r);
    let state_shape = unit.state_shape(shape);
    let state = CellState {
        h: Tensor::uniform(state_shape, 1.0, &mut r),
        c: Tensor::uniform(state_shape, 1.0, &mut r),
    };
    for _ in 0..cfg.warmup {
        recurrent_unit_forward(&unit, &params, &x, &state)?;
    }
    let mut timings_ms = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let start = Instant::now();
        let out = recurrent_unit_forward(&unit, &params, &x, &state)?;
        timings_ms.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let cost = UnitCostInputs {
        i: cfg.i as u64,
        o: cfg.o as u64,
        kx: cfg.kx as u64,
        ky: cfg.ky as u64,
        dx: cfg.dx as u64,
        dy: cfg.dy as u64,
    };
    Ok(DesignTiming {
        design,
        median_ms: median(&timings_ms),
        timings_ms,
        flops: unit_flops(design, &cost)?,
    })
}

pub fn bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats < MIN_REPEATS {
        return Err(Error::Invalid(format!(
            "bench needs at least {MIN_REPEATS} repeats, got {}",
            cfg.repeats
        )));
    }
    if cfg.designs.is_empty() {
        return Err(Error::Invalid("no unit designs to benchmark".into()));
    }
    let designs: Vec<DesignTiming> = cfg
        .designs
        .iter()
        .map(|&d| time_design(cfg, d))
        .collect::<Result<_>>()?;
    let mut ordering: Vec<&DesignTiming> = designs.iter().collect();
    ordering.sort_by(|a, b| a.median_ms.total_cmp(&b.median_ms));
    let mut time_ratios = BTreeMap::new();
    let mut flop_ratios = BTreeMap::new();
    for a in &designs {
        for b in &designs {
            if a.design < b.design {
                let key = format!("{}_over_{}", b.design.name(), a.design.name());
                time_ratios.insert(key.clone(), b.median_ms / a.median_ms);
                flop_ratios.insert(key, b.flops as f64 / a.flops as f64);
            }
        }
    }
    Ok(BenchReport {
        config: cfg.clone(),
        ordering: ordering.iter().map(|t| t.design).collect(),
        designs,
        time_ratios,
        flop_ratios,
    })
}

impl BenchReport {
    pub fn median_of(&self, design: UnitDesign) -> Option<f64> {
        self.designs.iter().find(|t| t.design == design).map(|t| t.median_ms)
    }

    pub fn table(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "I={} O={} K={}x{} D={}x{} repeats={}\n{:<10} {:>12} {:>16}\n",
            c.i, c.o, c.kx, c.ky, c.dx, c.dy, c.repeats, "unit", "median ms", "FLOPs"
        );
        for t in &self.designs {
            let _ = writeln!(s, "{:<10} {:>12.3} {:>16}", t.design.name(), t.median_ms, t.flops);
        }
        for (k, v) in &self.time_ratios {
            let _ = writeln!(
                s,
                "{k:<22} time {:>7.2}%  flops {:>7.2}%",
                100.0 * v,
                100.0 * self.flop_ratios[k]
            );
        }
        s
    }
}
