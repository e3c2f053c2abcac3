//! Shared fixtures for the criterion benchmarks.

use vidseg::cells::{CellState, RecurrentUnit, RecurrentUnitSpec, UnitDesign};
use vidseg::seed::rng;
use vidseg::{ParamSet, Shape, Tensor};

pub struct UnitFixture {
    pub unit: RecurrentUnit,
    pub params: ParamSet<f32>,
    pub input: Tensor<f32>,
    pub state: CellState<f32>,
}

/// A freshly initialised unit with a random input and state of `extent x extent`.
pub fn unit_fixture(design: UnitDesign, channels: usize, extent: usize) -> UnitFixture {
    let mut r = rng(7);
    let mut params = ParamSet::new();
    let spec = RecurrentUnitSpec::new(design, channels, 3);
    let unit = RecurrentUnit::new(&mut params, "unit", spec, &mut r).expect("valid unit");
    let shape = Shape::chw(channels, extent, extent);
    let s = unit.state_shape(shape);
    UnitFixture {
        input: Tensor::uniform(shape, 1.0, &mut r),
        state: CellState {
            h: Tensor::uniform(s, 1.0, &mut r),
            c: Tensor::uniform(s, 1.0, &mut r),
        },
        unit,
        params,
    }
}

pub fn random(shape: Shape, seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}
