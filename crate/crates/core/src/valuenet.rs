//! Scalar value network `V(x, t[, label])`.
//!
//! A dense feed-forward network whose input is the state `x`, a sinusoidal
//! embedding of the normalized time `t`, and (for conditional networks) a
//! learned label embedding. Hidden layers use a smooth activation so that the
//! input gradient exists everywhere; the output layer is linear.
//!
//! Parameters live in one flat array. The order is, for every layer from the
//! input side to the output: the weight matrix (row-major, `fan_out x fan_in`)
//! followed by the bias vector; the label embedding table
//! (`(num_labels + 1) x label_embed_dim`, the last row being the
//! unconditional token) comes last. Within the first layer the input columns
//! are ordered state, time embedding, label embedding.
//!
//! Batched evaluation splits the point list into fixed-size chunks that are
//! processed on the ambient rayon pool; reductions over chunks are summed in
//! chunk order, so results do not depend on the number of workers.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, VdtError};
use crate::scalar::{gemm, MatRef, Scalar};

/// Points per evaluation chunk.
const CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    /// `x * sigmoid(x)`
    #[default]
    #[serde(rename = "smooth-gated")]
    SmoothGated,
    #[serde(rename = "tanh")]
    Tanh,
}

impl Activation {
    /// Returns `(a(z), a'(z))`.
    #[inline]
    fn eval<T: Scalar>(self, z: T) -> (T, T) {
        match self {
            Activation::SmoothGated => {
                let s = T::one() / (T::one() + (-z).exp());
                (z * s, s * (T::one() + z * (T::one() - s)))
            }
            Activation::Tanh => {
                let a = z.tanh();
                (a, T::one() - a * a)
            }
        }
    }

    #[inline]
    fn value<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::SmoothGated => z / (T::one() + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}
fn default_input_dim() -> usize {
    2
}
fn default_time_embed_dim() -> usize {
    32
}
fn default_label_embed_dim() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    /// Widths of the hidden layers. An empty list gives a linear model, which
    /// is only useful for tests.
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_time_embed_dim")]
    pub time_embed_dim: usize,
    /// Number of class labels; 0 means unconditional.
    #[serde(default)]
    pub num_labels: usize,
    #[serde(default = "default_label_embed_dim")]
    pub label_embed_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: default_input_dim(),
            hidden_dims: default_hidden(),
            time_embed_dim: default_time_embed_dim(),
            num_labels: 0,
            label_embed_dim: default_label_embed_dim(),
            activation: Activation::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(VdtError::Config("network.input_dim must be positive".into()));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(VdtError::Config(format!(
                "network.time_embed_dim must be even and at least 2, got {}",
                self.time_embed_dim
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(VdtError::Config("network.hidden_dims entries must be positive".into()));
        }
        if self.num_labels > 0 && self.label_embed_dim == 0 {
            return Err(VdtError::Config(
                "network.label_embed_dim must be positive for a conditional network".into(),
            ));
        }
        Ok(())
    }

    pub fn is_conditional(&self) -> bool {
        self.num_labels > 0
    }

    fn label_width(&self) -> usize {
        if self.is_conditional() {
            self.label_embed_dim
        } else {
            0
        }
    }

    /// Width of the first layer's input: state, time embedding, label embedding.
    pub fn first_fan_in(&self) -> usize {
        self.input_dim + self.time_embed_dim + self.label_width()
    }

    /// `(fan_in, fan_out)` for every dense layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.first_fan_in();
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, 1));
        dims
    }

    pub fn num_params(&self) -> usize {
        let dense: usize = self.layer_dims().iter().map(|(i, o)| i * o + o).sum();
        let table = if self.is_conditional() { (self.num_labels + 1) * self.label_embed_dim } else { 0 };
        dense + table
    }
}

/// Sinusoidal embedding `[sin(w_0 t), cos(w_0 t), ...]` with `w_j = 10000^(-2j/dim)`.
pub fn time_embed<T: Scalar>(t: T, dim: usize) -> Result<Vec<T>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(VdtError::Config(format!("time embedding dimension must be even and >= 2, got {dim}")));
    }
    let mut out = vec![T::zero(); dim];
    fill_time_embed(t, &mut out);
    Ok(out)
}

fn fill_time_embed<T: Scalar>(t: T, out: &mut [T]) {
    let dim = out.len();
    let log_base = 10000f64.ln();
    for (j, pair) in out.chunks_exact_mut(2).enumerate() {
        let omega = T::of((-log_base * (2 * j) as f64 / dim as f64).exp());
        let (s, c) = (omega * t).sin_cos();
        pair[0] = s;
        pair[1] = c;
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
pub struct ValueNetwork<T> {
    config: NetworkConfig,
    shapes: Vec<LayerShape>,
    label_offset: Option<usize>,
    params: Vec<T>,
}

/// Distinct `(time, label)` pairs of a batch with their first-layer offsets.
struct Groups<T> {
    /// Group index of every point.
    of_point: Vec<usize>,
    /// Conditioning input of every group: time embedding then label embedding.
    cond_inputs: Vec<Vec<T>>,
    label_rows: Vec<Option<usize>>,
    /// `groups x fan_out(0)`: first-layer bias plus the conditioning contribution.
    bias: Vec<T>,
}

/// Per-chunk activations kept for the backward pass.
struct Tape<T> {
    n: usize,
    /// Post-activation outputs of hidden layers.
    acts: Vec<Vec<T>>,
    /// Activation derivatives of hidden layers.
    dacts: Vec<Vec<T>>,
    out: Vec<T>,
}

impl<T: Scalar> ValueNetwork<T> {
    /// Seeded Glorot-uniform weights, zero biases.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in net.shapes.clone() {
            let bound = (6.0 / (s.fan_in + s.fan_out) as f64).sqrt();
            for w in &mut net.params[s.w..s.w + s.fan_in * s.fan_out] {
                *w = T::of(rng.random_range(-bound..bound));
            }
        }
        if let Some(off) = net.label_offset {
            let rows = net.config.num_labels + 1;
            let width = net.config.label_embed_dim;
            let bound = (6.0 / (rows + width) as f64).sqrt();
            for w in &mut net.params[off..off + rows * width] {
                *w = T::of(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    /// All parameters zero, so `V` is identically zero.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut shapes = Vec::new();
        let mut off = 0;
        for (fan_in, fan_out) in config.layer_dims() {
            shapes.push(LayerShape { fan_in, fan_out, w: off, b: off + fan_in * fan_out });
            off += fan_in * fan_out + fan_out;
        }
        let label_offset = config.is_conditional().then_some(off);
        let params = vec![T::zero(); config.num_params()];
        Ok(Self { config, shapes, label_offset, params })
    }

    /// Network with the given flat parameters (see the module docs for the order).
    pub fn from_params(config: NetworkConfig, params: Vec<T>) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        check_dim("parameter count", net.params.len(), params.len())?;
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    /// `(weights, bias)` of dense layer `l`; weights are `fan_out x fan_in` row-major.
    pub fn layer(&self, l: usize) -> (&[T], &[T]) {
        let s = self.shapes[l];
        (&self.params[s.w..s.b], &self.params[s.b..s.b + s.fan_out])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [T], &mut [T]) {
        let s = self.shapes[l];
        let (w, rest) = self.params[s.w..s.b + s.fan_out].split_at_mut(s.b - s.w);
        (w, rest)
    }

    pub fn label_table(&self) -> Option<&[T]> {
        self.label_offset.map(|off| &self.params[off..])
    }

    pub fn label_table_mut(&mut self) -> Option<&mut [T]> {
        self.label_offset.map(move |off| &mut self.params[off..])
    }

    /// `V(x, t, label)`.
    pub fn forward(&self, x: &[T], t: T, label: Option<usize>) -> Result<T> {
        Ok(self.forward_batch(x, &[t], label_slice(&[label], self.config.is_conditional()))?[0])
    }

    /// Gradient of `V` with respect to the state only.
    pub fn grad_input(&self, x: &[T], t: T, label: Option<usize>) -> Result<Vec<T>> {
        self.grad_input_batch(x, &[t], label_slice(&[label], self.config.is_conditional()))
    }

    /// Adds `scale * grad_theta V(x, t, label)` to `buf`.
    pub fn grad_params(&self, x: &[T], t: T, label: Option<usize>, scale: T, buf: &mut [T]) -> Result<()> {
        self.grad_params_batch(x, &[t], label_slice(&[label], self.config.is_conditional()), &[scale], buf)
            .map(|_| ())
    }

    /// Values at `times.len()` points; `xs` holds the states row-major.
    ///
    /// `labels`, when given, has one entry per point; `None` entries select the
    /// unconditional token.
    pub fn forward_batch(&self, xs: &[T], times: &[T], labels: Option<&[Option<usize>]>) -> Result<Vec<T>> {
        let groups = self.groups(xs, times, labels)?;
        let d = self.config.input_dim;
        let out: Vec<Vec<T>> = xs
            .par_chunks(CHUNK * d)
            .zip(groups.of_point.par_chunks(CHUNK))
            .map(|(x, g)| self.forward_values(x, g, &groups))
            .collect();
        Ok(out.concat())
    }

    /// Input gradients at every point, row-major `n x input_dim`.
    pub fn grad_input_batch(&self, xs: &[T], times: &[T], labels: Option<&[Option<usize>]>) -> Result<Vec<T>> {
        let groups = self.groups(xs, times, labels)?;
        let d = self.config.input_dim;
        let out: Vec<Vec<T>> = xs
            .par_chunks(CHUNK * d)
            .zip(groups.of_point.par_chunks(CHUNK))
            .map(|(x, g)| {
                let tape = self.forward_tape(x, g, &groups);
                let seeds = vec![T::one(); tape.n];
                self.backward(&tape, x, g, &groups, &seeds, true, None).unwrap_or_default()
            })
            .collect();
        Ok(out.concat())
    }

    /// Adds `sum_n scales[n] * grad_theta V(x_n, t_n)` to `buf` and returns the
    /// values `V(x_n, t_n)`.
    pub fn grad_params_batch(
        &self,
        xs: &[T],
        times: &[T],
        labels: Option<&[Option<usize>]>,
        scales: &[T],
        buf: &mut [T],
    ) -> Result<Vec<T>> {
        check_dim("gradient buffer", self.params.len(), buf.len())?;
        check_dim("scale count", times.len(), scales.len())?;
        let groups = self.groups(xs, times, labels)?;
        let d = self.config.input_dim;
        let parts: Vec<(Vec<T>, Vec<T>)> = xs
            .par_chunks(CHUNK * d)
            .zip(groups.of_point.par_chunks(CHUNK))
            .zip(scales.par_chunks(CHUNK))
            .map(|((x, g), s)| {
                let tape = self.forward_tape(x, g, &groups);
                let mut local = vec![T::zero(); self.params.len()];
                self.backward(&tape, x, g, &groups, s, false, Some(&mut local));
                (local, tape.out)
            })
            .collect();
        let mut values = Vec::with_capacity(times.len());
        for (local, out) in parts {
            for (b, l) in buf.iter_mut().zip(&local) {
                *b += *l;
            }
            values.extend(out);
        }
        Ok(values)
    }

    fn label_row(&self, label: Option<usize>) -> Result<Option<usize>> {
        let k = self.config.num_labels;
        match (self.config.is_conditional(), label) {
            (false, None) => Ok(None),
            (false, Some(l)) => Err(VdtError::Label { label: l, num_labels: 0 }),
            (true, None) => Ok(Some(k)),
            (true, Some(l)) if l < k => Ok(Some(l)),
            (true, Some(l)) => Err(VdtError::Label { label: l, num_labels: k }),
        }
    }

    fn groups(&self, xs: &[T], times: &[T], labels: Option<&[Option<usize>]>) -> Result<Groups<T>> {
        let d = self.config.input_dim;
        let n = times.len();
        check_dim("state coordinates", n * d, xs.len())?;
        if let Some(l) = labels {
            check_dim("label count", n, l.len())?;
        }
        let e = self.config.time_embed_dim;
        let lw = self.config.label_width();
        let mut index: HashMap<(u64, Option<usize>), usize> = HashMap::new();
        let mut of_point = Vec::with_capacity(n);
        let mut cond_inputs = Vec::new();
        let mut label_rows = Vec::new();
        for p in 0..n {
            let row = self.label_row(labels.and_then(|l| l[p]))?;
            let key = (times[p].as_f64().to_bits(), row);
            let next = cond_inputs.len();
            let g = *index.entry(key).or_insert(next);
            if g == next {
                let mut v = vec![T::zero(); e + lw];
                fill_time_embed(times[p], &mut v[..e]);
                if let (Some(r), Some(off)) = (row, self.label_offset) {
                    v[e..].copy_from_slice(&self.params[off + r * lw..off + (r + 1) * lw]);
                }
                cond_inputs.push(v);
                label_rows.push(row);
            }
            of_point.push(g);
        }
        let s0 = self.shapes[0];
        let w0 = &self.params[s0.w..s0.b];
        let b0 = &self.params[s0.b..s0.b + s0.fan_out];
        let mut bias = Vec::with_capacity(cond_inputs.len() * s0.fan_out);
        for v in &cond_inputs {
            for o in 0..s0.fan_out {
                let row = &w0[o * s0.fan_in + d..(o + 1) * s0.fan_in];
                bias.push(b0[o] + row.iter().zip(v).fold(T::zero(), |a, (&w, &c)| a + w * c));
            }
        }
        Ok(Groups { of_point, cond_inputs, label_rows, bias })
    }

    /// First-layer pre-activations `x W_x^T + bias_g` for a chunk.
    fn first_layer(&self, xs: &[T], g: &[usize], groups: &Groups<T>) -> Vec<T> {
        let s0 = self.shapes[0];
        let d = self.config.input_dim;
        let n = g.len();
        let mut z = vec![T::zero(); n * s0.fan_out];
        for (p, &gi) in g.iter().enumerate() {
            z[p * s0.fan_out..(p + 1) * s0.fan_out]
                .copy_from_slice(&groups.bias[gi * s0.fan_out..(gi + 1) * s0.fan_out]);
        }
        let wx = MatRef { data: &self.params[s0.w..s0.b], rows: s0.fan_out, cols: d, row_stride: s0.fan_in, col_stride: 1 };
        gemm(T::one(), MatRef::row_major(xs, n, d), wx.t(), T::one(), &mut z, s0.fan_out);
        z
    }

    fn dense(&self, l: usize, input: &[T], n: usize) -> Vec<T> {
        let s = self.shapes[l];
        let mut z = Vec::with_capacity(n * s.fan_out);
        let b = &self.params[s.b..s.b + s.fan_out];
        for _ in 0..n {
            z.extend_from_slice(b);
        }
        let w = MatRef::row_major(&self.params[s.w..s.b], s.fan_out, s.fan_in);
        gemm(T::one(), MatRef::row_major(input, n, s.fan_in), w.t(), T::one(), &mut z, s.fan_out);
        z
    }

    fn forward_values(&self, xs: &[T], g: &[usize], groups: &Groups<T>) -> Vec<T> {
        let n = g.len();
        let act = self.config.activation;
        let mut z = self.first_layer(xs, g, groups);
        for l in 1..self.shapes.len() {
            z.iter_mut().for_each(|v| *v = act.value(*v));
            z = self.dense(l, &z, n);
        }
        z
    }

    fn forward_tape(&self, xs: &[T], g: &[usize], groups: &Groups<T>) -> Tape<T> {
        let n = g.len();
        let act = self.config.activation;
        let hidden = self.shapes.len() - 1;
        let mut acts = Vec::with_capacity(hidden);
        let mut dacts = Vec::with_capacity(hidden);
        let mut z = self.first_layer(xs, g, groups);
        for l in 1..self.shapes.len() {
            let mut dz = Vec::with_capacity(z.len());
            for v in z.iter_mut() {
                let (a, da) = act.eval(*v);
                *v = a;
                dz.push(da);
            }
            let next = self.dense(l, &z, n);
            acts.push(z);
            dacts.push(dz);
            z = next;
        }
        Tape { n, acts, dacts, out: z }
    }

    /// Reverse pass seeded with `seeds` on the outputs. Accumulates parameter
    /// gradients into `pgrad` when given; returns input gradients when asked.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        tape: &Tape<T>,
        xs: &[T],
        g: &[usize],
        groups: &Groups<T>,
        seeds: &[T],
        want_input: bool,
        mut pgrad: Option<&mut [T]>,
    ) -> Option<Vec<T>> {
        let n = tape.n;
        let d = self.config.input_dim;
        let mut delta: Vec<T> = seeds.to_vec();
        for l in (0..self.shapes.len()).rev() {
            let s = self.shapes[l];
            if let Some(pg) = pgrad.as_deref_mut() {
                let dmat = MatRef::row_major(&delta, n, s.fan_out);
                if l > 0 {
                    let input = MatRef::row_major(&tape.acts[l - 1], n, s.fan_in);
                    gemm(T::one(), dmat.t(), input, T::one(), &mut pg[s.w..s.b], s.fan_in);
                } else {
                    gemm(T::one(), dmat.t(), MatRef::row_major(xs, n, d), T::one(), &mut pg[s.w..s.b], s.fan_in);
                }
                let db = &mut pg[s.b..s.b + s.fan_out];
                for row in delta.chunks_exact(s.fan_out) {
                    for (b, &v) in db.iter_mut().zip(row) {
                        *b += v;
                    }
                }
                if l == 0 {
                    self.conditioning_grads(&delta, g, groups, pg);
                }
            }
            if l > 0 {
                let mut next = vec![T::zero(); n * s.fan_in];
                let w = MatRef::row_major(&self.params[s.w..s.b], s.fan_out, s.fan_in);
                gemm(T::one(), MatRef::row_major(&delta, n, s.fan_out), w, T::zero(), &mut next, s.fan_in);
                for (v, &da) in next.iter_mut().zip(&tape.dacts[l - 1]) {
                    *v *= da;
                }
                delta = next;
            } else if want_input {
                let mut gx = vec![T::zero(); n * d];
                let wx = MatRef { data: &self.params[s.w..s.b], rows: s.fan_out, cols: d, row_stride: s.fan_in, col_stride: 1 };
                gemm(T::one(), MatRef::row_major(&delta, n, s.fan_out), wx, T::zero(), &mut gx, d);
                return Some(gx);
            }
        }
        None
    }

    /// Gradients of the time/label columns of the first layer and of the label table.
    fn conditioning_grads(&self, delta: &[T], g: &[usize], groups: &Groups<T>, pg: &mut [T]) {
        let s0 = self.shapes[0];
        let d = self.config.input_dim;
        let e = self.config.time_embed_dim;
        let lw = self.config.label_width();
        let mut sums = vec![T::zero(); groups.cond_inputs.len() * s0.fan_out];
        for (row, &gi) in delta.chunks_exact(s0.fan_out).zip(g) {
            for (acc, &v) in sums[gi * s0.fan_out..(gi + 1) * s0.fan_out].iter_mut().zip(row) {
                *acc += v;
            }
        }
        for (gi, cond) in groups.cond_inputs.iter().enumerate() {
            let sg = &sums[gi * s0.fan_out..(gi + 1) * s0.fan_out];
            if sg.iter().all(|v| v.is_zero()) {
                continue;
            }
            for (o, &so) in sg.iter().enumerate() {
                let row = &mut pg[s0.w + o * s0.fan_in + d..s0.w + (o + 1) * s0.fan_in];
                for (w, &c) in row.iter_mut().zip(cond) {
                    *w += so * c;
                }
            }
            if let (Some(r), Some(off)) = (groups.label_rows[gi], self.label_offset) {
                for k in 0..lw {
                    let mut acc = T::zero();
                    for (o, &so) in sg.iter().enumerate() {
                        acc += so * self.params[s0.w + o * s0.fan_in + d + e + k];
                    }
                    pg[off + r * lw + k] += acc;
                }
            }
        }
    }
}

fn label_slice(label: &[Option<usize>; 1], conditional: bool) -> Option<&[Option<usize>]> {
    if conditional || label[0].is_some() {
        Some(&label[..])
    } else {
        None
    }
}
