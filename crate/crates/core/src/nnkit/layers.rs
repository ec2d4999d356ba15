//! Layer kinds with analytic forward and backward passes.
//!
//! Every layer maps a `rows x cols` tensor to another. Sequences keep one
//! time step per row. Weight matrices are stored `inputs x outputs` so that
//! the forward pass walks contiguous rows.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const CONV_KERNEL: usize = 3;
pub const POOL_SIZE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

/// What a recurrent layer emits: the full hidden sequence or the final step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReturnMode {
    Sequence,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    /// Fully connected, applied to every row.
    Dense {
        inputs: usize,
        units: usize,
        activation: Activation,
    },
    /// Valid-padded convolution over rows, kernel 3, stride 1, ReLU.
    Conv1D { in_channels: usize, filters: usize },
    /// Non-overlapping max over pairs of rows; a trailing odd row is dropped.
    MaxPool1D,
    /// Gates ordered (update, reset, candidate).
    Gru {
        inputs: usize,
        units: usize,
        ret: ReturnMode,
    },
    /// Gates ordered (input, forget, cell, output).
    Lstm {
        inputs: usize,
        units: usize,
        ret: ReturnMode,
    },
    /// `rows x cols` to `1 x (rows*cols)`, row-major (time-major for sequences).
    Flatten,
}

/// Shape of one parameter tensor owned by a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub suffix: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub is_bias: bool,
}

impl ParamShape {
    fn weight(suffix: &'static str, rows: usize, cols: usize) -> Self {
        Self {
            suffix,
            rows,
            cols,
            is_bias: false,
        }
    }

    fn bias(suffix: &'static str, cols: usize) -> Self {
        Self {
            suffix,
            rows: 1,
            cols,
            is_bias: true,
        }
    }
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv1D { .. } => "conv1d",
            LayerKind::MaxPool1D => "maxpool1d",
            LayerKind::Gru { .. } => "gru",
            LayerKind::Lstm { .. } => "lstm",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn param_shapes(&self) -> Vec<ParamShape> {
        match *self {
            LayerKind::Dense { inputs, units, .. } => vec![
                ParamShape::weight("w", inputs, units),
                ParamShape::bias("b", units),
            ],
            LayerKind::Conv1D {
                in_channels,
                filters,
            } => vec![
                ParamShape::weight("w", CONV_KERNEL * in_channels, filters),
                ParamShape::bias("b", filters),
            ],
            LayerKind::Gru { inputs, units, .. } => gate_params(inputs, units, 3),
            LayerKind::Lstm { inputs, units, .. } => gate_params(inputs, units, 4),
            LayerKind::MaxPool1D | LayerKind::Flatten => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|p| p.rows * p.cols).sum()
    }

    pub fn output_shape(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        let (rows, cols) = input;
        let check_cols = |want: usize| {
            if cols == want {
                Ok(())
            } else {
                Err(Error::shape(
                    format!("{} input columns", self.name()),
                    want,
                    cols,
                ))
            }
        };
        match *self {
            LayerKind::Dense { inputs, units, .. } => {
                check_cols(inputs)?;
                Ok((rows, units))
            }
            LayerKind::Conv1D {
                in_channels,
                filters,
            } => {
                check_cols(in_channels)?;
                if rows < CONV_KERNEL {
                    return Err(Error::Config(format!(
                        "conv1d needs at least {CONV_KERNEL} rows, got {rows}"
                    )));
                }
                Ok((rows - CONV_KERNEL + 1, filters))
            }
            LayerKind::MaxPool1D => {
                if rows < POOL_SIZE {
                    return Err(Error::Config(format!(
                        "maxpool1d needs at least {POOL_SIZE} rows, got {rows}"
                    )));
                }
                Ok((rows / POOL_SIZE, cols))
            }
            LayerKind::Gru { inputs, units, ret } | LayerKind::Lstm { inputs, units, ret } => {
                check_cols(inputs)?;
                if rows == 0 {
                    return Err(Error::Config(
                        "recurrent layer given an empty sequence".into(),
                    ));
                }
                Ok(match ret {
                    ReturnMode::Sequence => (rows, units),
                    ReturnMode::Last => (1, units),
                })
            }
            LayerKind::Flatten => Ok((1, rows * cols)),
        }
    }
}

fn gate_params(inputs: usize, units: usize, gates: usize) -> Vec<ParamShape> {
    vec![
        ParamShape::weight("w", inputs, gates * units),
        ParamShape::weight("u", units, gates * units),
        ParamShape::bias("b", gates * units),
    ]
}

/// Intermediates kept by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub enum LayerCache {
    Dense {
        input: Tensor2,
        output: Tensor2,
    },
    Conv1D {
        input: Tensor2,
        output: Tensor2,
    },
    MaxPool1D {
        input_shape: (usize, usize),
        argmax: Vec<usize>,
    },
    Gru(RecurrentCache),
    Lstm(RecurrentCache),
    Flatten {
        input_shape: (usize, usize),
    },
}

/// Per-step recurrent state. `hidden` and `cell` have `steps + 1` rows,
/// row 0 being the zero initial state. `gates` has one row per step holding
/// the post-nonlinearity gate values side by side.
#[derive(Clone, Debug)]
pub struct RecurrentCache {
    input: Tensor2,
    hidden: Tensor2,
    cell: Tensor2,
    gates: Tensor2,
}

impl LayerCache {
    /// Discrete state of the piecewise-linear units: ReLU on/off flags and
    /// pooling winners. Finite differences are only meaningful while this
    /// pattern stays fixed.
    pub fn pattern(&self, out: &mut Vec<u32>) {
        match self {
            LayerCache::Dense { output, .. } | LayerCache::Conv1D { output, .. } => {
                out.extend(output.as_slice().iter().map(|&v| u32::from(v > 0.0)))
            }
            LayerCache::MaxPool1D { argmax, .. } => out.extend(argmax.iter().map(|&i| i as u32)),
            _ => {}
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `tanh` through `expm1`, accurate to a few ulps and about twice as fast as
/// the libm routine.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp_m1();
    (-e / (e + 2.0)).copysign(x)
}

/// `out[j] += sum_i x[i] * w[i, j]` for `w` stored row-major `x.len() x out.len()`.
#[inline]
fn accumulate_xw(x: &[f64], w: &[f64], out: &mut [f64]) {
    let n = out.len();
    debug_assert_eq!(w.len(), x.len() * n);
    for (&xi, row) in x.iter().zip(w.chunks_exact(n)) {
        if xi == 0.0 {
            continue;
        }
        axpy(xi, row, out);
    }
}

/// `out += a * row`, unrolled by four.
#[inline(always)]
fn axpy(a: f64, row: &[f64], out: &mut [f64]) {
    let mut oc = out.chunks_exact_mut(4);
    let mut rc = row.chunks_exact(4);
    for (o, r) in (&mut oc).zip(&mut rc) {
        o[0] += a * r[0];
        o[1] += a * r[1];
        o[2] += a * r[2];
        o[3] += a * r[3];
    }
    for (o, &r) in oc.into_remainder().iter_mut().zip(rc.remainder()) {
        *o += a * r;
    }
}

/// `dw[i, j] += x[i] * d[j]`.
#[inline]
fn accumulate_outer(x: &[f64], d: &[f64], dw: &mut [f64]) {
    let n = d.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut dw[i * n..(i + 1) * n];
        for (g, &dj) in row.iter_mut().zip(d) {
            *g += xi * dj;
        }
    }
}

/// `dx[i] += sum_j w[i, j] * d[j]`.
#[inline]
fn accumulate_wd(w: &[f64], d: &[f64], dx: &mut [f64]) {
    let n = d.len();
    for (i, g) in dx.iter_mut().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        *g += row.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Forward pass of one layer. `params` are the layer's tensors in
/// `param_shapes` order.
pub fn forward(kind: &LayerKind, params: &[&Tensor2], input: Tensor2) -> (Tensor2, LayerCache) {
    match *kind {
        LayerKind::Dense {
            units, activation, ..
        } => {
            let (w, b) = (params[0].as_slice(), params[1].as_slice());
            let mut output = Tensor2::zeros(input.rows(), units);
            for r in 0..input.rows() {
                let out = output.row_slice_mut(r);
                out.copy_from_slice(b);
                accumulate_xw(input.row_slice(r), w, out);
                if activation == Activation::Relu {
                    out.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            (output.clone(), LayerCache::Dense { input, output })
        }
        LayerKind::Conv1D { filters, .. } => {
            let (w, b) = (params[0].as_slice(), params[1].as_slice());
            let out_rows = input.rows() + 1 - CONV_KERNEL;
            let cin = input.cols();
            let mut output = Tensor2::zeros(out_rows, filters);
            for t in 0..out_rows {
                // the kernel window is contiguous in row-major storage
                let window = &input.as_slice()[t * cin..(t + CONV_KERNEL) * cin];
                let out = output.row_slice_mut(t);
                out.copy_from_slice(b);
                accumulate_xw(window, w, out);
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            (output.clone(), LayerCache::Conv1D { input, output })
        }
        LayerKind::MaxPool1D => {
            let (rows, cols) = input.shape();
            let out_rows = rows / POOL_SIZE;
            let mut output = Tensor2::zeros(out_rows, cols);
            let mut argmax = Vec::with_capacity(out_rows * cols);
            for t in 0..out_rows {
                for c in 0..cols {
                    let mut best = POOL_SIZE * t;
                    for k in 1..POOL_SIZE {
                        if input.get(POOL_SIZE * t + k, c) > input.get(best, c) {
                            best = POOL_SIZE * t + k;
                        }
                    }
                    output.set(t, c, input.get(best, c));
                    argmax.push(best);
                }
            }
            let cache = LayerCache::MaxPool1D {
                input_shape: (rows, cols),
                argmax,
            };
            (output, cache)
        }
        LayerKind::Gru { units, ret, .. } => {
            let cache = gru_forward(params, input, units);
            let out = recurrent_output(&cache.hidden, ret);
            (out, LayerCache::Gru(cache))
        }
        LayerKind::Lstm { units, ret, .. } => {
            let cache = lstm_forward(params, input, units);
            let out = recurrent_output(&cache.hidden, ret);
            (out, LayerCache::Lstm(cache))
        }
        LayerKind::Flatten => {
            let input_shape = input.shape();
            let out = Tensor2::row(input.into_vec());
            (out, LayerCache::Flatten { input_shape })
        }
    }
}

fn recurrent_output(hidden: &Tensor2, ret: ReturnMode) -> Tensor2 {
    let steps = hidden.rows() - 1;
    let units = hidden.cols();
    match ret {
        ReturnMode::Sequence => {
            Tensor2::new(steps, units, hidden.as_slice()[units..].to_vec()).expect("shape")
        }
        ReturnMode::Last => Tensor2::row(hidden.row_slice(steps).to_vec()),
    }
}

fn gru_forward(params: &[&Tensor2], input: Tensor2, units: usize) -> RecurrentCache {
    let (w, u, b) = (
        params[0].as_slice(),
        params[1].as_slice(),
        params[2].as_slice(),
    );
    let steps = input.rows();
    let g3 = 3 * units;
    let mut hidden = Tensor2::zeros(steps + 1, units);
    let mut gates = Tensor2::zeros(steps, g3);
    let mut pre = vec![0.0; g3];
    let mut rh = vec![0.0; units];
    let mut recur_n = vec![0.0; units];
    for t in 0..steps {
        pre.copy_from_slice(b);
        accumulate_xw(input.row_slice(t), w, &mut pre);
        let (prev, next) = hidden.as_mut_slice().split_at_mut((t + 1) * units);
        let h_prev = &prev[t * units..];
        let h_next = &mut next[..units];
        // update and reset gates see h_prev; the candidate sees r * h_prev
        for (k, &hk) in h_prev.iter().enumerate() {
            axpy(hk, &u[k * g3..k * g3 + 2 * units], &mut pre[..2 * units]);
        }
        let g = gates.row_slice_mut(t);
        for j in 0..2 * units {
            g[j] = sigmoid(pre[j]);
        }
        for k in 0..units {
            rh[k] = g[units + k] * h_prev[k];
        }
        recur_n.iter_mut().for_each(|v| *v = 0.0);
        for (k, &rk) in rh.iter().enumerate() {
            axpy(rk, &u[k * g3 + 2 * units..(k + 1) * g3], &mut recur_n);
        }
        for k in 0..units {
            let n = tanh(pre[2 * units + k] + recur_n[k]);
            g[2 * units + k] = n;
            let z = g[k];
            h_next[k] = z * h_prev[k] + (1.0 - z) * n;
        }
    }
    RecurrentCache {
        input,
        hidden,
        cell: Tensor2::zeros(0, 0),
        gates,
    }
}

fn lstm_forward(params: &[&Tensor2], input: Tensor2, units: usize) -> RecurrentCache {
    let (w, u, b) = (
        params[0].as_slice(),
        params[1].as_slice(),
        params[2].as_slice(),
    );
    let steps = input.rows();
    let g4 = 4 * units;
    let mut hidden = Tensor2::zeros(steps + 1, units);
    let mut cell = Tensor2::zeros(steps + 1, units);
    let mut gates = Tensor2::zeros(steps, g4);
    let mut pre = vec![0.0; g4];
    for t in 0..steps {
        pre.copy_from_slice(b);
        accumulate_xw(input.row_slice(t), w, &mut pre);
        accumulate_xw(hidden.row_slice(t), u, &mut pre);
        let g = gates.row_slice_mut(t);
        for k in 0..units {
            let i = sigmoid(pre[k]);
            let f = sigmoid(pre[units + k]);
            let c_in = tanh(pre[2 * units + k]);
            let o = sigmoid(pre[3 * units + k]);
            g[k] = i;
            g[units + k] = f;
            g[2 * units + k] = c_in;
            g[3 * units + k] = o;
            let c = f * cell.get(t, k) + i * c_in;
            cell.set(t + 1, k, c);
            hidden.set(t + 1, k, o * tanh(c));
        }
    }
    RecurrentCache {
        input,
        hidden,
        cell,
        gates,
    }
}

/// Backward pass of one layer: accumulates into `grads` (same order as
/// `params`) and returns the gradient with respect to the layer input.
pub fn backward(
    kind: &LayerKind,
    params: &[&Tensor2],
    grads: &mut [&mut Tensor2],
    cache: &LayerCache,
    grad_out: &Tensor2,
) -> Result<Tensor2> {
    let mismatch = || Error::Usage(format!("cache does not belong to a {} layer", kind.name()));
    match (kind, cache) {
        (LayerKind::Dense { activation, .. }, LayerCache::Dense { input, output }) => {
            let w = params[0].as_slice();
            let mut dx = Tensor2::zeros(input.rows(), input.cols());
            let mut d = vec![0.0; output.cols()];
            for r in 0..input.rows() {
                d.copy_from_slice(grad_out.row_slice(r));
                if *activation == Activation::Relu {
                    relu_mask(&mut d, output.row_slice(r));
                }
                accumulate_outer(input.row_slice(r), &d, grads[0].as_mut_slice());
                add_into(grads[1].as_mut_slice(), &d);
                accumulate_wd(w, &d, dx.row_slice_mut(r));
            }
            Ok(dx)
        }
        (LayerKind::Conv1D { .. }, LayerCache::Conv1D { input, output }) => {
            let w = params[0].as_slice();
            let cin = input.cols();
            let mut dx = Tensor2::zeros(input.rows(), cin);
            let mut d = vec![0.0; output.cols()];
            for t in 0..output.rows() {
                d.copy_from_slice(grad_out.row_slice(t));
                relu_mask(&mut d, output.row_slice(t));
                let span = t * cin..(t + CONV_KERNEL) * cin;
                accumulate_outer(&input.as_slice()[span.clone()], &d, grads[0].as_mut_slice());
                add_into(grads[1].as_mut_slice(), &d);
                accumulate_wd(w, &d, &mut dx.as_mut_slice()[span]);
            }
            Ok(dx)
        }
        (
            LayerKind::MaxPool1D,
            LayerCache::MaxPool1D {
                input_shape,
                argmax,
            },
        ) => {
            let (rows, cols) = *input_shape;
            let mut dx = Tensor2::zeros(rows, cols);
            for (idx, &src) in argmax.iter().enumerate() {
                let (t, c) = (idx / cols, idx % cols);
                let cur = dx.get(src, c);
                dx.set(src, c, cur + grad_out.get(t, c));
            }
            Ok(dx)
        }
        (LayerKind::Gru { units, ret, .. }, LayerCache::Gru(cache)) => {
            Ok(gru_backward(params, grads, cache, grad_out, *units, *ret))
        }
        (LayerKind::Lstm { units, ret, .. }, LayerCache::Lstm(cache)) => {
            Ok(lstm_backward(params, grads, cache, grad_out, *units, *ret))
        }
        (LayerKind::Flatten, LayerCache::Flatten { input_shape }) => {
            grad_out.clone().reshape(input_shape.0, input_shape.1)
        }
        _ => Err(mismatch()),
    }
}

#[inline]
fn relu_mask(d: &mut [f64], out: &[f64]) {
    for (g, &o) in d.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

#[inline]
fn add_into(acc: &mut [f64], d: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(d) {
        *a += v;
    }
}

/// Gradient flowing into the hidden state at step `t` from the layer output.
#[inline]
fn output_grad_at(grad_out: &Tensor2, ret: ReturnMode, t: usize, steps: usize) -> Option<&[f64]> {
    match ret {
        ReturnMode::Sequence => Some(grad_out.row_slice(t)),
        ReturnMode::Last if t == steps - 1 => Some(grad_out.row_slice(0)),
        ReturnMode::Last => None,
    }
}

fn gru_backward(
    params: &[&Tensor2],
    grads: &mut [&mut Tensor2],
    cache: &RecurrentCache,
    grad_out: &Tensor2,
    units: usize,
    ret: ReturnMode,
) -> Tensor2 {
    let (w, u) = (params[0].as_slice(), params[1].as_slice());
    let steps = cache.input.rows();
    let g3 = 3 * units;
    let mut dx = Tensor2::zeros(steps, cache.input.cols());
    let mut dh = vec![0.0; units];
    let mut dh_prev = vec![0.0; units];
    let mut da = vec![0.0; g3];
    let mut rh = vec![0.0; units];
    let mut d_rh = vec![0.0; units];
    for t in (0..steps).rev() {
        if let Some(g) = output_grad_at(grad_out, ret, t, steps) {
            add_into(&mut dh, g);
        }
        let h_prev = cache.hidden.row_slice(t);
        let gate = cache.gates.row_slice(t);
        let (z, r, n) = (&gate[..units], &gate[units..2 * units], &gate[2 * units..]);
        for k in 0..units {
            dh_prev[k] = dh[k] * z[k];
            // candidate pre-activation
            da[2 * units + k] = dh[k] * (1.0 - z[k]) * (1.0 - n[k] * n[k]);
            // update gate pre-activation
            da[k] = dh[k] * (h_prev[k] - n[k]) * z[k] * (1.0 - z[k]);
            rh[k] = r[k] * h_prev[k];
        }
        // back through the candidate's recurrent term (r * h_prev) U_n
        d_rh.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..units {
            let row = &u[k * g3 + 2 * units..(k + 1) * g3];
            d_rh[k] = row.iter().zip(&da[2 * units..]).map(|(a, b)| a * b).sum();
        }
        for k in 0..units {
            da[units + k] = d_rh[k] * h_prev[k] * r[k] * (1.0 - r[k]);
            dh_prev[k] += d_rh[k] * r[k];
        }
        let x = cache.input.row_slice(t);
        accumulate_outer(x, &da, grads[0].as_mut_slice());
        add_into(grads[2].as_mut_slice(), &da);
        accumulate_wd(w, &da, dx.row_slice_mut(t));
        {
            let du = grads[1].as_mut_slice();
            for k in 0..units {
                let row = &mut du[k * g3..(k + 1) * g3];
                let (hk, rk) = (h_prev[k], rh[k]);
                for j in 0..2 * units {
                    row[j] += hk * da[j];
                }
                for j in 2 * units..g3 {
                    row[j] += rk * da[j];
                }
            }
        }
        // recurrent contributions of the update and reset gates
        for k in 0..units {
            let row = &u[k * g3..k * g3 + 2 * units];
            dh_prev[k] += row
                .iter()
                .zip(&da[..2 * units])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        std::mem::swap(&mut dh, &mut dh_prev);
    }
    dx
}

fn lstm_backward(
    params: &[&Tensor2],
    grads: &mut [&mut Tensor2],
    cache: &RecurrentCache,
    grad_out: &Tensor2,
    units: usize,
    ret: ReturnMode,
) -> Tensor2 {
    let (w, u) = (params[0].as_slice(), params[1].as_slice());
    let steps = cache.input.rows();
    let mut dx = Tensor2::zeros(steps, cache.input.cols());
    let mut dh = vec![0.0; units];
    let mut dc = vec![0.0; units];
    let mut da = vec![0.0; 4 * units];
    for t in (0..steps).rev() {
        if let Some(g) = output_grad_at(grad_out, ret, t, steps) {
            add_into(&mut dh, g);
        }
        let gate = cache.gates.row_slice(t);
        let c_prev = cache.cell.row_slice(t);
        let c = cache.cell.row_slice(t + 1);
        for k in 0..units {
            let (i, f, g, o) = (
                gate[k],
                gate[units + k],
                gate[2 * units + k],
                gate[3 * units + k],
            );
            let tc = tanh(c[k]);
            let d_o = dh[k] * tc;
            let dck = dc[k] + dh[k] * o * (1.0 - tc * tc);
            da[k] = dck * g * i * (1.0 - i);
            da[units + k] = dck * c_prev[k] * f * (1.0 - f);
            da[2 * units + k] = dck * i * (1.0 - g * g);
            da[3 * units + k] = d_o * o * (1.0 - o);
            dc[k] = dck * f;
        }
        let h_prev = cache.hidden.row_slice(t);
        accumulate_outer(cache.input.row_slice(t), &da, grads[0].as_mut_slice());
        accumulate_outer(h_prev, &da, grads[1].as_mut_slice());
        add_into(grads[2].as_mut_slice(), &da);
        accumulate_wd(w, &da, dx.row_slice_mut(t));
        dh.iter_mut().for_each(|v| *v = 0.0);
        accumulate_wd(u, &da, &mut dh);
    }
    dx
}
