//! Parameterized layers: affine maps, LSTM cells, stacked bidirectional
//! LSTMs, inverted dropout, batch normalization, and maxout.
//!
//! Each layer comes in two forms: a parameter record owning tensors, and a
//! lightweight `*Nodes` mirror holding the tape ids for one forward pass.
//! `bind` inserts parameters as trainable leaves, `bind_frozen` as
//! constants (hard gradient isolation).

use crate::error::{Error, Result};
use crate::params::{join, Binder, ParamGroup};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};
use rand::Rng;

/// Train/eval switch for dropout and batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<F: Real>(self, tape: &mut Tape<F>, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

// ── affine ──────────────────────────────────────────────────────────

/// `y = W x + b` with `W: [out, in]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct AffineLayer<F: Real> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

#[derive(Debug, Clone, Copy)]
pub struct AffineNodes {
    pub w: NodeId,
    pub b: NodeId,
}

impl<F: Real> AffineLayer<F> {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        AffineLayer {
            w: Tensor::uniform(rng, vec![output, input], -bound, bound),
            b: Tensor::zeros(vec![output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape<F>, binder: &mut Binder, path: &str) -> AffineNodes {
        AffineNodes {
            w: binder.leaf(tape, join(path, "w"), &self.w),
            b: binder.leaf(tape, join(path, "b"), &self.b),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> AffineNodes {
        AffineNodes {
            w: tape.constant(self.w.clone()),
            b: tape.constant(self.b.clone()),
        }
    }
}

impl<F: Real> ParamGroup<F> for AffineLayer<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<F>, bool)) {
        f(&join(prefix, "w"), &self.w, true);
        f(&join(prefix, "b"), &self.b, true);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<F>, bool)) {
        f(&join(prefix, "w"), &mut self.w, true);
        f(&join(prefix, "b"), &mut self.b, true);
    }
}

/// Apply an affine map to a vector `[in]` or row-wise to a matrix `[T, in]`.
pub fn affine_apply<F: Real>(tape: &mut Tape<F>, n: &AffineNodes, x: NodeId) -> Result<NodeId> {
    match tape.value(x).rank() {
        1 => {
            let wx = tape.matvec(n.w, x)?;
            tape.add(wx, n.b)
        }
        2 => {
            let wt = tape.transpose(n.w)?;
            let xw = tape.matmul(x, wt)?;
            tape.add(xw, n.b)
        }
        r => Err(Error::Contract(format!(
            "affine_apply: rank {r} input unsupported"
        ))),
    }
}

// ── LSTM cell ───────────────────────────────────────────────────────

/// Gate order inside the stacked weights is (input i, forget f, cell g,
/// output o) and is part of the checkpoint contract.
#[derive(Debug, Clone)]
pub struct LstmCellParams<F: Real> {
    pub w_ih: Tensor<F>,
    pub w_hh: Tensor<F>,
    pub b: Tensor<F>,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmCellNodes {
    pub w_ih: NodeId,
    pub w_hh: NodeId,
    pub b: NodeId,
    pub hidden: usize,
}

impl<F: Real> LstmCellParams<F> {
    /// Weights uniform in ±1/√H; forget-gate bias starts at 1.
    pub fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = Tensor::uniform(rng, vec![4 * hidden, input], -bound, bound);
        let w_hh = Tensor::uniform(rng, vec![4 * hidden, hidden], -bound, bound);
        let mut b = Tensor::zeros(vec![4 * hidden]);
        for i in hidden..2 * hidden {
            b.data_mut()[i] = F::one();
        }
        LstmCellParams {
            w_ih,
            w_hh,
            b,
            hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<F>, binder: &mut Binder, path: &str) -> LstmCellNodes {
        LstmCellNodes {
            w_ih: binder.leaf(tape, join(path, "w_ih"), &self.w_ih),
            w_hh: binder.leaf(tape, join(path, "w_hh"), &self.w_hh),
            b: binder.leaf(tape, join(path, "b"), &self.b),
            hidden: self.hidden,
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> LstmCellNodes {
        LstmCellNodes {
            w_ih: tape.constant(self.w_ih.clone()),
            w_hh: tape.constant(self.w_hh.clone()),
            b: tape.constant(self.b.clone()),
            hidden: self.hidden,
        }
    }
}

impl<F: Real> ParamGroup<F> for LstmCellParams<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<F>, bool)) {
        f(&join(prefix, "w_ih"), &self.w_ih, true);
        f(&join(prefix, "w_hh"), &self.w_hh, true);
        f(&join(prefix, "b"), &self.b, true);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<F>, bool)) {
        f(&join(prefix, "w_ih"), &mut self.w_ih, true);
        f(&join(prefix, "w_hh"), &mut self.w_hh, true);
        f(&join(prefix, "b"), &mut self.b, true);
    }
}

/// One step of the standard cell: `i,f,o = σ(...)`, `g = tanh(...)`,
/// `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
pub fn lstm_cell_step<F: Real>(
    tape: &mut Tape<F>,
    p: &LstmCellNodes,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let h = p.hidden;
    let ih = tape.matvec(p.w_ih, x)?;
    let hh = tape.matvec(p.w_hh, h_prev)?;
    let lin = tape.add(ih, hh)?;
    let pre = tape.add(lin, p.b)?;

    let i_pre = tape.slice(pre, 0, 0, h)?;
    let f_pre = tape.slice(pre, 0, h, h)?;
    let g_pre = tape.slice(pre, 0, 2 * h, h)?;
    let o_pre = tape.slice(pre, 0, 3 * h, h)?;

    let i = tape.sigmoid(i_pre)?;
    let f = tape.sigmoid(f_pre)?;
    let g = tape.tanh(g_pre)?;
    let o = tape.sigmoid(o_pre)?;

    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h_out = tape.mul(o, tc)?;
    Ok((h_out, c))
}

// ── bidirectional LSTM stack ────────────────────────────────────────

/// Stacked biLSTM. Layer ℓ>0 consumes the concatenated `[h→; h←]` output
/// of layer ℓ−1, so all layers past the first have input width `2H`.
#[derive(Debug, Clone)]
pub struct BiLstmStack<F: Real> {
    pub layers: Vec<(LstmCellParams<F>, LstmCellParams<F>)>,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct BiLstmNodes {
    pub layers: Vec<(LstmCellNodes, LstmCellNodes)>,
    pub hidden: usize,
}

impl<F: Real> BiLstmStack<F> {
    pub fn new<R: Rng>(input: usize, hidden: usize, depth: usize, rng: &mut R) -> Self {
        assert!(depth >= 1, "biLSTM depth must be at least 1");
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let in_dim = if l == 0 { input } else { 2 * hidden };
            layers.push((
                LstmCellParams::new(in_dim, hidden, rng),
                LstmCellParams::new(in_dim, hidden, rng),
            ));
        }
        BiLstmStack { layers, hidden }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.input_dim()
    }

    pub fn output_width(&self) -> usize {
        2 * self.hidden
    }

    pub fn bind(&self, tape: &mut Tape<F>, binder: &mut Binder, path: &str) -> BiLstmNodes {
        BiLstmNodes {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, (fw, bw))| {
                    let base = join(path, &format!("layer{l}"));
                    (
                        fw.bind(tape, binder, &join(&base, "fw")),
                        bw.bind(tape, binder, &join(&base, "bw")),
                    )
                })
                .collect(),
            hidden: self.hidden,
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> BiLstmNodes {
        BiLstmNodes {
            layers: self
                .layers
                .iter()
                .map(|(fw, bw)| (fw.bind_frozen(tape), bw.bind_frozen(tape)))
                .collect(),
            hidden: self.hidden,
        }
    }
}

impl<F: Real> ParamGroup<F> for BiLstmStack<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<F>, bool)) {
        for (l, (fw, bw)) in self.layers.iter().enumerate() {
            let base = join(prefix, &format!("layer{l}"));
            fw.visit(&join(&base, "fw"), f);
            bw.visit(&join(&base, "bw"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<F>, bool)) {
        for (l, (fw, bw)) in self.layers.iter_mut().enumerate() {
            let base = join(prefix, &format!("layer{l}"));
            fw.visit_mut(&join(&base, "fw"), f);
            bw.visit_mut(&join(&base, "bw"), f);
        }
    }
}

/// Run the stack over `[T, in]`, returning `[T, 2H]`: per step the forward
/// and backward hidden states concatenated as `[h→; h←]`.
///
/// The kernel itself ignores padding; consumers exclude padded steps via
/// masks at attention and pooling sites.
pub fn bilstm_forward<F: Real>(
    tape: &mut Tape<F>,
    stack: &BiLstmNodes,
    input: NodeId,
) -> Result<NodeId> {
    let (t_len, _) = tape.value(input).dims2()?;
    if t_len == 0 {
        return Err(Error::Contract("bilstm_forward: empty sequence".into()));
    }
    let h = stack.hidden;
    let mut layer_in = input;
    for (fw, bw) in &stack.layers {
        let rows: Vec<NodeId> = (0..t_len)
            .map(|t| tape.row(layer_in, t))
            .collect::<Result<_>>()?;

        let zero = tape.zeros_const(vec![h]);
        let (mut hs, mut cs) = (zero, zero);
        let mut fwd = Vec::with_capacity(t_len);
        for &x in &rows {
            let (nh, nc) = lstm_cell_step(tape, fw, x, hs, cs)?;
            hs = nh;
            cs = nc;
            fwd.push(nh);
        }

        let (mut hs, mut cs) = (zero, zero);
        let mut bwd = vec![zero; t_len];
        for t in (0..t_len).rev() {
            let (nh, nc) = lstm_cell_step(tape, bw, rows[t], hs, cs)?;
            hs = nh;
            cs = nc;
            bwd[t] = nh;
        }

        let per_step: Vec<NodeId> = (0..t_len)
            .map(|t| tape.concat(&[fwd[t], bwd[t]], 0))
            .collect::<Result<_>>()?;
        layer_in = tape.stack_rows(&per_step)?;
    }
    Ok(layer_in)
}

// ── dropout ─────────────────────────────────────────────────────────

/// Inverted dropout: zero with probability `ratio`, scale survivors by
/// `1/(1-ratio)`. Eval mode and ratio 0 are the identity.
pub fn dropout_apply<F: Real, R: Rng>(
    tape: &mut Tape<F>,
    x: NodeId,
    ratio: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Contract(format!(
            "dropout ratio {ratio} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || ratio == 0.0 {
        return Ok(x);
    }
    let keep_scale = F::from_f64(1.0 / (1.0 - ratio));
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let mask_data: Vec<F> = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < ratio {
                F::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask_data)?);
    tape.mul(x, mask)
}

// ── batch norm ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BatchNormLayer<F: Real> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNormNodes {
    pub gamma: NodeId,
    pub beta: NodeId,
}

impl<F: Real> BatchNormLayer<F> {
    pub fn new(dim: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::full(vec![dim], F::one()),
            beta: Tensor::zeros(vec![dim]),
            running_mean: Tensor::zeros(vec![dim]),
            running_var: Tensor::full(vec![dim], F::one()),
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape<F>, binder: &mut Binder, path: &str) -> BatchNormNodes {
        BatchNormNodes {
            gamma: binder.leaf(tape, join(path, "gamma"), &self.gamma),
            beta: binder.leaf(tape, join(path, "beta"), &self.beta),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> BatchNormNodes {
        BatchNormNodes {
            gamma: tape.constant(self.gamma.clone()),
            beta: tape.constant(self.beta.clone()),
        }
    }
}

impl<F: Real> ParamGroup<F> for BatchNormLayer<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<F>, bool)) {
        f(&join(prefix, "gamma"), &self.gamma, true);
        f(&join(prefix, "beta"), &self.beta, true);
        f(&join(prefix, "running_mean"), &self.running_mean, false);
        f(&join(prefix, "running_var"), &self.running_var, false);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<F>, bool)) {
        f(&join(prefix, "gamma"), &mut self.gamma, true);
        f(&join(prefix, "beta"), &mut self.beta, true);
        f(&join(prefix, "running_mean"), &mut self.running_mean, false);
        f(&join(prefix, "running_var"), &mut self.running_var, false);
    }
}

/// Train mode normalizes by batch statistics (biased variance) and folds
/// them into the running estimates; eval mode uses the running estimates.
pub fn batchnorm_forward<F: Real>(
    tape: &mut Tape<F>,
    layer: &mut BatchNormLayer<F>,
    nodes: &BatchNormNodes,
    x: NodeId,
    mode: Mode,
) -> Result<NodeId> {
    let (batch, dim) = tape.value(x).dims2()?;
    if dim != layer.dim() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: tape.value(x).shape().to_vec(),
            rhs: layer.gamma.shape().to_vec(),
        });
    }
    match mode {
        Mode::Train => {
            if batch < 2 {
                return Err(Error::Contract(format!(
                    "batchnorm: train mode needs batch >= 2, got {batch}"
                )));
            }
            let all = vec![true; batch];
            let mu = tape.masked_reduce(x, &all, crate::tape::ReduceKind::Mean)?;
            let diff = tape.sub(x, mu)?;
            let sq = tape.mul(diff, diff)?;
            let var = tape.masked_reduce(sq, &all, crate::tape::ReduceKind::Mean)?;
            let var_eps = tape.add_scalar(var, F::from_f64(layer.epsilon))?;
            let denom = tape.sqrt(var_eps)?;
            let norm = tape.div(diff, denom)?;
            let scaled = tape.mul(norm, nodes.gamma)?;
            let out = tape.add(scaled, nodes.beta)?;

            let m = F::from_f64(layer.momentum);
            let keep = F::from_f64(1.0 - layer.momentum);
            layer.running_mean.scale_in_place(keep);
            layer.running_mean.axpy(m, tape.value(mu));
            layer.running_var.scale_in_place(keep);
            layer.running_var.axpy(m, tape.value(var));
            Ok(out)
        }
        Mode::Eval => {
            let rm = tape.constant(layer.running_mean.clone());
            let rv = layer
                .running_var
                .map(|v| (v + F::from_f64(layer.epsilon)).sqrt());
            let denom = tape.constant(rv);
            let diff = tape.sub(x, rm)?;
            let norm = tape.div(diff, denom)?;
            let scaled = tape.mul(norm, nodes.gamma)?;
            tape.add(scaled, nodes.beta)
        }
    }
}

// ── maxout ──────────────────────────────────────────────────────────

/// Elementwise maximum over parallel affine channels. Gradient ties break
/// toward the lowest channel index.
#[derive(Debug, Clone)]
pub struct MaxoutLayer<F: Real> {
    pub channels: Vec<AffineLayer<F>>,
}

#[derive(Debug, Clone)]
pub struct MaxoutNodes {
    pub channels: Vec<AffineNodes>,
}

impl<F: Real> MaxoutLayer<F> {
    pub fn new<R: Rng>(input: usize, output: usize, channels: usize, rng: &mut R) -> Self {
        assert!(channels >= 1, "maxout needs at least one channel");
        MaxoutLayer {
            channels: (0..channels)
                .map(|_| AffineLayer::new(input, output, rng))
                .collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, binder: &mut Binder, path: &str) -> MaxoutNodes {
        MaxoutNodes {
            channels: self
                .channels
                .iter()
                .enumerate()
                .map(|(i, c)| c.bind(tape, binder, &join(path, &format!("channel{i}"))))
                .collect(),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> MaxoutNodes {
        MaxoutNodes {
            channels: self.channels.iter().map(|c| c.bind_frozen(tape)).collect(),
        }
    }
}

impl<F: Real> ParamGroup<F> for MaxoutLayer<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<F>, bool)) {
        for (i, c) in self.channels.iter().enumerate() {
            c.visit(&join(prefix, &format!("channel{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<F>, bool)) {
        for (i, c) in self.channels.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("channel{i}")), f);
        }
    }
}

pub fn maxout_forward<F: Real>(
    tape: &mut Tape<F>,
    nodes: &MaxoutNodes,
    x: NodeId,
) -> Result<NodeId> {
    let mut acc = affine_apply(tape, &nodes.channels[0], x)?;
    for ch in &nodes.channels[1..] {
        let out = affine_apply(tape, ch, x)?;
        acc = tape.max_elem(acc, out)?;
    }
    Ok(acc)
}
