//! Shared network trunk: instruction encoder, visual encoder, previous-action
//! embedding and the rectified hidden layer over their concatenation.
//!
//! Every forward pass returns a trace holding the activations its backward
//! pass needs. Gradients are accumulated into a `Trunk` of the same shape.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Observation};
use crate::error::{Error, Result};
use crate::policy::tensor::{axpy, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Layer sizes. `desk` is the small default; `paper` follows the published
/// architecture (with padding so it fits a 25x25 raster).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub word_dim: usize,
    pub lstm_dim: usize,
    pub conv: Vec<ConvSpec>,
    pub visual_dim: usize,
    pub block_embed_dim: usize,
    pub dir_embed_dim: usize,
    pub hidden_dim: usize,
}

impl ModelDims {
    pub fn desk() -> Self {
        Self {
            word_dim: 16,
            lstm_dim: 32,
            conv: vec![ConvSpec {
                filters: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            }],
            visual_dim: 8,
            block_embed_dim: 8,
            dir_embed_dim: 8,
            hidden_dim: 64,
        }
    }

    pub fn paper() -> Self {
        let layer = |kernel, stride, padding| ConvSpec {
            filters: 32,
            kernel,
            stride,
            padding,
        };
        Self {
            word_dim: 150,
            lstm_dim: 250,
            conv: vec![layer(8, 4, 2), layer(8, 4, 2), layer(4, 2, 2)],
            visual_dim: 200,
            block_embed_dim: 32,
            dir_embed_dim: 24,
            hidden_dim: 120,
        }
    }
}

/// Everything needed to size the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub vocab_size: usize,
    pub n_blocks: usize,
    pub height: usize,
    pub width: usize,
    /// Number of previous observations `K` in the context.
    pub history: usize,
    pub dims: ModelDims,
}

/// Rows of the direction embedding table: four moves, STOP, NONE.
pub const DIR_EMBED_ROWS: usize = 6;
/// Number of direction-head outputs: four moves and STOP.
pub const NUM_DIRECTIONS: usize = 5;
pub const STOP_INDEX: usize = 4;

impl NetShape {
    pub fn input_channels(&self) -> usize {
        (self.history + 1) * self.n_blocks
    }

    /// `(channels, height, width)` after each conv layer, input first.
    pub fn feature_maps(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut maps = vec![(self.input_channels(), self.height, self.width)];
        for (i, spec) in self.dims.conv.iter().enumerate() {
            let &(_, h, w) = maps.last().expect("nonempty");
            let out = |n: usize| {
                let padded = n + 2 * spec.padding;
                (spec.stride > 0 && spec.kernel > 0 && padded >= spec.kernel)
                    .then(|| (padded - spec.kernel) / spec.stride + 1)
            };
            match (out(h), out(w)) {
                (Some(oh), Some(ow)) if spec.filters > 0 => maps.push((spec.filters, oh, ow)),
                _ => {
                    return Err(Error::Shape(format!(
                        "conv layer {i} ({spec:?}) does not fit a {h}x{w} input"
                    )))
                }
            }
        }
        Ok(maps)
    }

    pub fn flat_dim(&self) -> Result<usize> {
        let &(c, h, w) = self.feature_maps()?.last().expect("nonempty");
        Ok(c * h * w)
    }

    pub fn context_dim(&self) -> usize {
        self.dims.visual_dim
            + self.dims.lstm_dim
            + self.dims.block_embed_dim
            + self.dims.dir_embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.n_blocks == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Shape("empty vocabulary, board or block set".into()));
        }
        let d = &self.dims;
        if [d.word_dim, d.lstm_dim, d.visual_dim, d.hidden_dim].contains(&0) {
            return Err(Error::Shape("zero-sized layer".into()));
        }
        self.feature_maps()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    /// `filters x (in_channels * kernel * kernel)`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub shape: NetShape,
    pub word_embed: Tensor,
    /// Gates stacked as input, forget, cell, output; columns are `[x; h]`.
    pub lstm_weight: Tensor,
    pub lstm_bias: Tensor,
    pub conv: Vec<ConvLayer>,
    pub visual_weight: Tensor,
    pub visual_bias: Tensor,
    /// Previous-action block embedding; the last row stands for "no block".
    pub block_embed: Tensor,
    pub dir_embed: Tensor,
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
}

impl Trunk {
    /// Embeddings ~ N(0, 1), action embeddings ~ N(0, 0.001^2), conv filters
    /// and the visual projection from truncated normals with variances 0.005
    /// and 0.004, other matrices ~ N(0, 0.01^2), biases zero.
    pub fn init(shape: NetShape, rng: &mut impl Rng) -> Result<Self> {
        shape.validate()?;
        let d = shape.dims.clone();
        let maps = shape.feature_maps()?;
        let conv = d
            .conv
            .iter()
            .zip(&maps)
            .map(|(spec, &(in_c, _, _))| ConvLayer {
                spec: *spec,
                weight: Tensor::truncated_normal(
                    &[spec.filters, in_c * spec.kernel * spec.kernel],
                    0.005f64.sqrt(),
                    rng,
                ),
                bias: Tensor::zeros(&[spec.filters]),
            })
            .collect();
        let flat = shape.flat_dim()?;
        Ok(Self {
            word_embed: Tensor::normal(&[shape.vocab_size, d.word_dim], 1.0, rng),
            lstm_weight: Tensor::normal(&[4 * d.lstm_dim, d.word_dim + d.lstm_dim], 0.01, rng),
            lstm_bias: Tensor::zeros(&[4 * d.lstm_dim]),
            conv,
            visual_weight: Tensor::truncated_normal(&[d.visual_dim, flat], 0.004f64.sqrt(), rng),
            visual_bias: Tensor::zeros(&[d.visual_dim]),
            block_embed: Tensor::normal(&[shape.n_blocks + 1, d.block_embed_dim], 0.001, rng),
            dir_embed: Tensor::normal(&[DIR_EMBED_ROWS, d.dir_embed_dim], 0.001, rng),
            hidden_weight: Tensor::normal(&[d.hidden_dim, shape.context_dim()], 0.01, rng),
            hidden_bias: Tensor::zeros(&[d.hidden_dim]),
            shape,
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("word_embed".to_string(), &self.word_embed),
            ("lstm_weight".to_string(), &self.lstm_weight),
            ("lstm_bias".to_string(), &self.lstm_bias),
        ];
        for (i, layer) in self.conv.iter().enumerate() {
            out.push((format!("conv{i}_weight"), &layer.weight));
            out.push((format!("conv{i}_bias"), &layer.bias));
        }
        out.extend([
            ("visual_weight".to_string(), &self.visual_weight),
            ("visual_bias".to_string(), &self.visual_bias),
            ("block_embed".to_string(), &self.block_embed),
            ("dir_embed".to_string(), &self.dir_embed),
            ("hidden_weight".to_string(), &self.hidden_weight),
            ("hidden_bias".to_string(), &self.hidden_bias),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("word_embed".to_string(), &mut self.word_embed),
            ("lstm_weight".to_string(), &mut self.lstm_weight),
            ("lstm_bias".to_string(), &mut self.lstm_bias),
        ];
        for (i, layer) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{i}_weight"), &mut layer.weight));
            out.push((format!("conv{i}_bias"), &mut layer.bias));
        }
        out.extend([
            ("visual_weight".to_string(), &mut self.visual_weight),
            ("visual_bias".to_string(), &mut self.visual_bias),
            ("block_embed".to_string(), &mut self.block_embed),
            ("dir_embed".to_string(), &mut self.dir_embed),
            ("hidden_weight".to_string(), &mut self.hidden_weight),
            ("hidden_bias".to_string(), &mut self.hidden_bias),
        ]);
        out
    }

    pub fn encode_instruction(&self, tokens: &[usize]) -> Result<InstructionTrace> {
        if tokens.is_empty() {
            return Err(Error::Shape("empty instruction".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.shape.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} outside vocabulary of {}",
                self.shape.vocab_size
            )));
        }
        let hd = self.shape.dims.lstm_dim;
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut steps = Vec::with_capacity(tokens.len());
        let mut mean = vec![0.0; hd];
        for &token in tokens {
            let mut input = self.word_embed.row(token).to_vec();
            input.extend_from_slice(&h);
            let z = self.lstm_weight.affine(&input, &self.lstm_bias);
            let mut gates = vec![0.0; 4 * hd];
            for k in 0..hd {
                gates[k] = sigmoid(z[k]);
                gates[hd + k] = sigmoid(z[hd + k]);
                gates[2 * hd + k] = z[2 * hd + k].tanh();
                gates[3 * hd + k] = sigmoid(z[3 * hd + k]);
            }
            let c_prev = c.clone();
            for k in 0..hd {
                c[k] = gates[hd + k] * c_prev[k] + gates[k] * gates[2 * hd + k];
                h[k] = gates[3 * hd + k] * c[k].tanh();
            }
            axpy(1.0 / tokens.len() as f64, &h, &mut mean);
            steps.push(LstmStep {
                token,
                input,
                gates,
                c_prev,
                c: c.clone(),
            });
        }
        Ok(InstructionTrace { steps, mean })
    }

    /// Backpropagates `d_mean` (gradient w.r.t. the pooled vector) through
    /// the recurrence.
    pub fn backward_instruction(
        &self,
        trace: &InstructionTrace,
        d_mean: &[f64],
        grads: &mut Trunk,
    ) {
        let hd = self.shape.dims.lstm_dim;
        let wd = self.shape.dims.word_dim;
        let n = trace.steps.len() as f64;
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        let mut dz = vec![0.0; 4 * hd];
        for step in trace.steps.iter().rev() {
            let g = &step.gates;
            for k in 0..hd {
                let dh = dh_next[k] + d_mean[k] / n;
                let (i, f, cand, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
                let tc = step.c[k].tanh();
                let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                dz[k] = dc * cand * i * (1.0 - i);
                dz[hd + k] = dc * step.c_prev[k] * f * (1.0 - f);
                dz[2 * hd + k] = dc * i * (1.0 - cand * cand);
                dz[3 * hd + k] = dh * tc * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            grads.lstm_weight.add_outer(&dz, &step.input);
            grads.lstm_bias.add_assign(&dz);
            let mut d_input = vec![0.0; wd + hd];
            self.lstm_weight.add_transpose_product(&dz, &mut d_input);
            axpy(1.0, &d_input[..wd], grads.word_embed.row_mut(step.token));
            dh_next.copy_from_slice(&d_input[wd..]);
        }
    }

    pub fn encode_visual(&self, observations: &[Observation]) -> Result<VisualTrace> {
        let s = &self.shape;
        if observations.len() != s.history + 1 {
            return Err(Error::Shape(format!(
                "expected {} observations, got {}",
                s.history + 1,
                observations.len()
            )));
        }
        let mut active = Vec::new();
        for (slot, obs) in observations.iter().enumerate() {
            if obs.shape() != [s.n_blocks, s.height, s.width] {
                return Err(Error::Shape(format!(
                    "observation shape {:?}, expected {:?}",
                    obs.shape(),
                    [s.n_blocks, s.height, s.width]
                )));
            }
            active.extend(
                obs.nonzeros()
                    .map(|(c, r, col)| (slot * s.n_blocks + c, r, col)),
            );
        }
        let maps = s.feature_maps()?;
        let mut layers: Vec<Vec<f64>> = Vec::with_capacity(self.conv.len());
        for (l, layer) in self.conv.iter().enumerate() {
            let out = if l == 0 {
                conv_sparse_forward(layer, maps[0], maps[1], &active)
            } else {
                conv_dense_forward(layer, maps[l], maps[l + 1], &layers[l - 1])
            };
            layers.push(out);
        }
        let flat: Vec<f64> = match layers.last() {
            Some(last) => last.clone(),
            None => dense_input(&active, maps[0]),
        };
        let output = self.visual_weight.affine(&flat, &self.visual_bias);
        Ok(VisualTrace {
            active,
            layers,
            flat,
            output,
        })
    }

    pub fn backward_visual(&self, trace: &VisualTrace, d_output: &[f64], grads: &mut Trunk) {
        grads.visual_weight.add_outer(d_output, &trace.flat);
        grads.visual_bias.add_assign(d_output);
        if self.conv.is_empty() {
            return;
        }
        let maps = self.shape.feature_maps().expect("validated at init");
        let mut d_out = vec![0.0; trace.flat.len()];
        self.visual_weight
            .add_transpose_product(d_output, &mut d_out);
        for l in (0..self.conv.len()).rev() {
            let out = &trace.layers[l];
            // rectifier
            for (d, &y) in d_out.iter_mut().zip(out) {
                if y <= 0.0 {
                    *d = 0.0;
                }
            }
            let layer = &self.conv[l];
            let grad = &mut grads.conv[l];
            if l == 0 {
                conv_sparse_backward(layer, grad, maps[0], maps[1], &trace.active, &d_out);
            } else {
                let mut d_in = vec![0.0; trace.layers[l - 1].len()];
                conv_dense_backward(
                    layer,
                    grad,
                    maps[l],
                    maps[l + 1],
                    &trace.layers[l - 1],
                    &d_out,
                    &mut d_in,
                );
                d_out = d_in;
            }
        }
    }

    /// Embedding of the previous action: block row then direction row.
    pub fn action_embedding(&self, action: Action) -> Result<(usize, usize, Vec<f64>)> {
        let none_block = self.shape.n_blocks;
        let (b, d) = match action {
            Action::Move { block, dir } if block < self.shape.n_blocks => (block, dir.index()),
            Action::Move { block, .. } => {
                return Err(Error::Shape(format!(
                    "previous action block {block} out of range"
                )))
            }
            Action::Stop => (none_block, STOP_INDEX),
            Action::None => (none_block, STOP_INDEX + 1),
        };
        let mut out = self.block_embed.row(b).to_vec();
        out.extend_from_slice(self.dir_embed.row(d));
        Ok((b, d, out))
    }

    pub fn forward(
        &self,
        instruction: &Arc<InstructionTrace>,
        observations: &[Observation],
        prev_action: Action,
    ) -> Result<TrunkTrace> {
        if instruction.mean.len() != self.shape.dims.lstm_dim {
            return Err(Error::Shape(
                "instruction encoding from a different network".into(),
            ));
        }
        let visual = self.encode_visual(observations)?;
        let (block_row, dir_row, action_vec) = self.action_embedding(prev_action)?;
        let mut context = visual.output.clone();
        context.extend_from_slice(&instruction.mean);
        context.extend_from_slice(&action_vec);
        let mut hidden = self.hidden_weight.affine(&context, &self.hidden_bias);
        hidden.iter_mut().for_each(|x| *x = x.max(0.0));
        Ok(TrunkTrace {
            instruction: Arc::clone(instruction),
            visual,
            block_row,
            dir_row,
            context,
            hidden,
        })
    }

    /// Accumulates trunk gradients for `d_hidden` except the recurrence, and
    /// returns the gradient w.r.t. the pooled instruction vector.
    pub fn backward(&self, trace: &TrunkTrace, d_hidden: &[f64], grads: &mut Trunk) -> Vec<f64> {
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&trace.hidden)
            .map(|(&d, &h)| if h > 0.0 { d } else { 0.0 })
            .collect();
        grads.hidden_weight.add_outer(&d_pre, &trace.context);
        grads.hidden_bias.add_assign(&d_pre);
        let mut d_context = vec![0.0; trace.context.len()];
        self.hidden_weight
            .add_transpose_product(&d_pre, &mut d_context);

        let d = &self.shape.dims;
        let (d_visual, rest) = d_context.split_at(d.visual_dim);
        let (d_instruction, d_action) = rest.split_at(d.lstm_dim);
        let (d_block, d_dir) = d_action.split_at(d.block_embed_dim);
        axpy(1.0, d_block, grads.block_embed.row_mut(trace.block_row));
        axpy(1.0, d_dir, grads.dir_embed.row_mut(trace.dir_row));
        self.backward_visual(&trace.visual, d_visual, grads);
        d_instruction.to_vec()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
struct LstmStep {
    token: usize,
    input: Vec<f64>,
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionTrace {
    steps: Vec<LstmStep>,
    mean: Vec<f64>,
}

impl InstructionTrace {
    /// Mean of the recurrent hidden states.
    pub fn vector(&self) -> &[f64] {
        &self.mean
    }

    /// Hidden state after each token.
    pub fn hidden_states(&self) -> Vec<Vec<f64>> {
        self.steps
            .iter()
            .map(|s| {
                let hd = s.c.len();
                (0..hd)
                    .map(|k| s.gates[3 * hd + k] * s.c[k].tanh())
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualTrace {
    /// Nonzero input entries `(channel, row, col)` of the stacked frames.
    active: Vec<(usize, usize, usize)>,
    layers: Vec<Vec<f64>>,
    flat: Vec<f64>,
    output: Vec<f64>,
}

impl VisualTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrunkTrace {
    pub instruction: Arc<InstructionTrace>,
    pub visual: VisualTrace,
    block_row: usize,
    dir_row: usize,
    context: Vec<f64>,
    pub hidden: Vec<f64>,
}

fn dense_input(active: &[(usize, usize, usize)], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for &(ch, r, col) in active {
        out[(ch * h + r) * w + col] = 1.0;
    }
    out
}

/// Output coordinate that input coordinate `i` reaches through kernel offset
/// `k`, if any.
fn out_coord(i: usize, k: usize, spec: &ConvSpec, out_len: usize) -> Option<usize> {
    let shifted = (i + spec.padding).checked_sub(k)?;
    (shifted % spec.stride == 0 && shifted / spec.stride < out_len).then_some(shifted / spec.stride)
}

fn conv_sparse_forward(
    layer: &ConvLayer,
    (_, in_h, in_w): (usize, usize, usize),
    (f_n, out_h, out_w): (usize, usize, usize),
    active: &[(usize, usize, usize)],
) -> Vec<f64> {
    let _ = (in_h, in_w);
    let k = layer.spec.kernel;
    let plane = out_h * out_w;
    let mut out = vec![0.0; f_n * plane];
    for f in 0..f_n {
        out[f * plane..(f + 1) * plane].fill(layer.bias.data()[f]);
    }
    for &(c, r, col) in active {
        for ky in 0..k {
            let Some(oy) = out_coord(r, ky, &layer.spec, out_h) else {
                continue;
            };
            for kx in 0..k {
                let Some(ox) = out_coord(col, kx, &layer.spec, out_w) else {
                    continue;
                };
                let widx = (c * k + ky) * k + kx;
                for f in 0..f_n {
                    out[f * plane + oy * out_w + ox] += layer.weight.row(f)[widx];
                }
            }
        }
    }
    out.iter_mut().for_each(|x| *x = x.max(0.0));
    out
}

fn conv_sparse_backward(
    layer: &ConvLayer,
    grad: &mut ConvLayer,
    _input: (usize, usize, usize),
    (f_n, out_h, out_w): (usize, usize, usize),
    active: &[(usize, usize, usize)],
    d_pre: &[f64],
) {
    let k = layer.spec.kernel;
    let plane = out_h * out_w;
    for f in 0..f_n {
        grad.bias.data_mut()[f] += d_pre[f * plane..(f + 1) * plane].iter().sum::<f64>();
    }
    for &(c, r, col) in active {
        for ky in 0..k {
            let Some(oy) = out_coord(r, ky, &layer.spec, out_h) else {
                continue;
            };
            for kx in 0..k {
                let Some(ox) = out_coord(col, kx, &layer.spec, out_w) else {
                    continue;
                };
                let widx = (c * k + ky) * k + kx;
                for f in 0..f_n {
                    grad.weight.row_mut(f)[widx] += d_pre[f * plane + oy * out_w + ox];
                }
            }
        }
    }
}

/// Input coordinate read by output coordinate `o` through kernel offset `k`.
fn in_coord(o: usize, k: usize, spec: &ConvSpec, in_len: usize) -> Option<usize> {
    let i = (o * spec.stride + k).checked_sub(spec.padding)?;
    (i < in_len).then_some(i)
}

fn conv_dense_forward(
    layer: &ConvLayer,
    (in_c, in_h, in_w): (usize, usize, usize),
    (f_n, out_h, out_w): (usize, usize, usize),
    input: &[f64],
) -> Vec<f64> {
    let k = layer.spec.kernel;
    let mut out = vec![0.0; f_n * out_h * out_w];
    for f in 0..f_n {
        let w = layer.weight.row(f);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = layer.bias.data()[f];
                for c in 0..in_c {
                    for ky in 0..k {
                        let Some(iy) = in_coord(oy, ky, &layer.spec, in_h) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) = in_coord(ox, kx, &layer.spec, in_w) else {
                                continue;
                            };
                            acc += w[(c * k + ky) * k + kx] * input[(c * in_h + iy) * in_w + ix];
                        }
                    }
                }
                out[(f * out_h + oy) * out_w + ox] = acc.max(0.0);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_dense_backward(
    layer: &ConvLayer,
    grad: &mut ConvLayer,
    (in_c, in_h, in_w): (usize, usize, usize),
    (f_n, out_h, out_w): (usize, usize, usize),
    input: &[f64],
    d_pre: &[f64],
    d_input: &mut [f64],
) {
    let k = layer.spec.kernel;
    for f in 0..f_n {
        let w = layer.weight.row(f);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let g = d_pre[(f * out_h + oy) * out_w + ox];
                if g == 0.0 {
                    continue;
                }
                grad.bias.data_mut()[f] += g;
                for c in 0..in_c {
                    for ky in 0..k {
                        let Some(iy) = in_coord(oy, ky, &layer.spec, in_h) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) = in_coord(ox, kx, &layer.spec, in_w) else {
                                continue;
                            };
                            let widx = (c * k + ky) * k + kx;
                            let iidx = (c * in_h + iy) * in_w + ix;
                            grad.weight.row_mut(f)[widx] += g * input[iidx];
                            d_input[iidx] += g * w[widx];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feature_maps_desk_and_paper() {
        let shape = NetShape {
            vocab_size: 10,
            n_blocks: 3,
            height: 5,
            width: 5,
            history: 4,
            dims: ModelDims::desk(),
        };
        assert_eq!(shape.feature_maps().unwrap(), vec![(15, 5, 5), (2, 5, 5)]);
        let paper = NetShape {
            vocab_size: 10,
            n_blocks: 20,
            height: 25,
            width: 25,
            history: 4,
            dims: ModelDims::paper(),
        };
        assert_eq!(paper.feature_maps().unwrap().last(), Some(&(32, 1, 1)));
        assert_eq!(paper.context_dim(), 200 + 250 + 56);
    }

    #[test]
    fn sparse_and_dense_conv_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in [
            ConvSpec {
                filters: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            ConvSpec {
                filters: 2,
                kernel: 2,
                stride: 2,
                padding: 0,
            },
            ConvSpec {
                filters: 2,
                kernel: 4,
                stride: 2,
                padding: 2,
            },
        ] {
            let layer = ConvLayer {
                spec,
                weight: Tensor::normal(
                    &[spec.filters, 2 * spec.kernel * spec.kernel],
                    1.0,
                    &mut rng,
                ),
                bias: Tensor::normal(&[spec.filters], 1.0, &mut rng),
            };
            let input_map = (2, 5, 6);
            let pad = |n: usize| (n + 2 * spec.padding - spec.kernel) / spec.stride + 1;
            let out_map = (spec.filters, pad(5), pad(6));
            let active = vec![(0, 0, 0), (1, 4, 5), (0, 2, 3), (1, 1, 1)];
            let dense = dense_input(&active, input_map);
            assert_eq!(
                conv_sparse_forward(&layer, input_map, out_map, &active),
                conv_dense_forward(&layer, input_map, out_map, &dense)
            );
        }
    }
}
