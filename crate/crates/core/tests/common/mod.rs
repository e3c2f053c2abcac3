//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use vidseg::cells::{CellKind, ConvLstmCell, StateVars};
use vidseg::params::Bound;
use vidseg::seed::rng;
use vidseg::{
    Network, NetworkConfig, ParamId, ParamSet, RecurrentUnit, RecurrentUnitSpec, Shape, Tape, Tensor, UnitDesign, Var,
    Version,
};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor: entries whose gradient is smaller than this are
/// compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

pub fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

/// Records `sum(out * w)` for a fixed random `w`, which gives every output
/// element a distinct, non-trivial upstream gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let w = tape.constant(random(tape.shape(out), seed));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compares reverse-mode gradients with central differences.
///
/// `build` records a scalar loss from the given input values and returns it
/// together with the tape variables holding those inputs, in order.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Tensor<f64>]) -> (Var, Vec<Var>),
{
    let mut tape = Tape::new();
    let (loss, vars) = build(&mut tape, inputs);
    assert_eq!(vars.len(), inputs.len(), "build must return one var per input");
    let mut grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |values: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let (loss, _) = build(&mut tape, values);
        tape.value(loss).data()[0]
    };
    let mut values = inputs.to_vec();
    let mut max_rel_err = 0f64;
    let mut checked = 0;
    for k in 0..inputs.len() {
        for j in 0..inputs[k].len() {
            let orig = values[k].data()[j];
            values[k].data_mut()[j] = orig + FD_EPS;
            let up = eval(&values);
            values[k].data_mut()[j] = orig - FD_EPS;
            let down = eval(&values);
            values[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic[k].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    GradReport { checked, max_rel_err }
}

/// Every parameter of `params` replaced by a fresh random tensor, so zero
/// initialisations (peepholes) still exercise their gradient paths.
pub fn randomised(params: &ParamSet<f64>, seed: u64) -> Vec<Tensor<f64>> {
    params
        .ids()
        .enumerate()
        .map(|(i, id)| random(params.get(id).shape(), seed + i as u64).map(|v| 0.5 * v))
        .collect()
}

pub fn bind_values(tape: &mut Tape<f64>, params: &ParamSet<f64>, values: &[Tensor<f64>]) -> (Bound, Vec<Var>) {
    let mut ps = params.clone();
    let ids: Vec<ParamId> = ps.ids().collect();
    for (&id, v) in ids.iter().zip(values) {
        *ps.get_mut(id) = v.clone();
    }
    let bound = ps.bind(tape);
    let vars = ids.iter().map(|&id| bound.var(id)).collect();
    (bound, vars)
}

/// Convolution kind for [`conv_case`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Dense,
    Depthwise,
    Pointwise,
}

/// Input, kernel and bias gradients of one convolution with a `kh x kw` kernel.
pub fn conv_case(kind: ConvKind, kh: usize, kw: usize) -> GradReport {
    let x = random(Shape::new(2, 3, 5, 6), 20);
    let (kshape, out_c) = match kind {
        ConvKind::Dense => (Shape::new(4, 3, kh, kw), 4),
        ConvKind::Depthwise => (Shape::new(1, 3, kh, kw), 3),
        ConvKind::Pointwise => (Shape::new(4, 3, 1, 1), 4),
    };
    let inputs = [x, random(kshape, 21), random(Shape::new(1, out_c, 1, 1), 22)];
    check_gradients(&inputs, |tape, v| {
        let a = tape.leaf(v[0].clone(), true);
        let k = tape.leaf(v[1].clone(), true);
        let b = tape.leaf(v[2].clone(), true);
        let y = match kind {
            ConvKind::Dense => tape.conv2d(a, k, Some(b)),
            ConvKind::Depthwise => tape.depthwise_conv2d(a, k, Some(b)),
            ConvKind::Pointwise => tape.pointwise_conv2d(a, k, Some(b)),
        }
        .unwrap();
        (weighted_sum(tape, y, 23), vec![a, k, b])
    })
}

/// One convLSTM step: gradients of input, incoming state and every parameter.
pub fn cell_case(kind: CellKind, in_c: usize, hidden: usize, kernel: (usize, usize)) -> GradReport {
    let mut params = ParamSet::<f64>::new();
    let cell = ConvLstmCell::new(&mut params, "cell", kind, in_c, hidden, kernel, &mut rng(30)).unwrap();
    let mut inputs = vec![
        random(Shape::new(2, in_c, 4, 5), 31),
        random(Shape::new(2, hidden, 4, 5), 32),
        random(Shape::new(2, hidden, 4, 5), 33),
    ];
    inputs.extend(randomised(&params, 40));
    check_gradients(&inputs, |tape, v| {
        let x = tape.leaf(v[0].clone(), true);
        let h = tape.leaf(v[1].clone(), true);
        let c = tape.leaf(v[2].clone(), true);
        let (bound, pvars) = bind_values(tape, &params, &v[3..]);
        let next = cell.step(tape, &bound, x, StateVars { h, c }).unwrap();
        let lh = weighted_sum(tape, next.h, 34);
        let lc = weighted_sum(tape, next.c, 35);
        let loss = tape.add(lh, lc).unwrap();
        let mut vars = vec![x, h, c];
        vars.extend(pvars);
        (loss, vars)
    })
}

/// One step of a 4-channel recurrent unit of the given design.
pub fn unit_case(design: UnitDesign) -> GradReport {
    let mut params = ParamSet::<f64>::new();
    let spec = RecurrentUnitSpec::new(design, 4, 3);
    let unit = RecurrentUnit::new(&mut params, "unit", spec, &mut rng(50)).unwrap();
    let xs = Shape::new(1, 4, 4, 4);
    let ss = unit.state_shape(xs);
    let mut inputs = vec![random(xs, 51), random(ss, 52), random(ss, 53)];
    inputs.extend(randomised(&params, 60));
    check_gradients(&inputs, |tape, v| {
        let x = tape.leaf(v[0].clone(), true);
        let h = tape.leaf(v[1].clone(), true);
        let c = tape.leaf(v[2].clone(), true);
        let (bound, pvars) = bind_values(tape, &params, &v[3..]);
        let (y, next) = unit.forward(tape, &bound, x, StateVars { h, c }).unwrap();
        let ly = weighted_sum(tape, y, 54);
        let lc = weighted_sum(tape, next.c, 55);
        let loss = tape.add(ly, lc).unwrap();
        let mut vars = vec![x, h, c];
        vars.extend(pvars);
        (loss, vars)
    })
}

/// Final-frame loss of a two-frame, 8x8 network with a head unit, through
/// every parameter and both frames.
pub fn micro_network_case() -> GradReport {
    let config = NetworkConfig {
        num_classes: 3,
        base_channels: 2,
        branch_widths: [2, 2, 2],
        branch_depths: [1, 1, 1],
        height: 8,
        width: 8,
        ..NetworkConfig::default()
    }
    .with_version(Version::V2, UnitDesign::Standard);
    let net = Network::<f64>::build(config, 70).unwrap();
    let labels: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
    let mut inputs = vec![random(Shape::new(1, 3, 8, 8), 71), random(Shape::new(1, 3, 8, 8), 72)];
    inputs.extend(randomised(&net.params, 80));
    check_gradients(&inputs, |tape, v| {
        let f: Vec<Var> = v[..2].iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let (bound, pvars) = bind_values(tape, &net.params, &v[2..]);
        let (loss, _) = net.sequence_loss(tape, &bound, &f, &labels).unwrap();
        let mut vars = f;
        vars.extend(pvars);
        (loss, vars)
    })
}

/// Every file below `root` with its contents, sorted by relative path.
pub fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
