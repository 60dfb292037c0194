//! Multilayer perceptrons with hand-written backpropagation.
//!
//! Every learned function in the crate (actor, critic, transition, reward,
//! latent functions and the latent predictor) is one of these networks. Hidden
//! layers share one activation; the final layer is affine, and the `Head` tag
//! tells callers how to read its output (logits, Gaussian mean, raw vector).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    pub fn derivative<T: Scalar>(self, pre: T) -> T {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                T::one() - t * t
            }
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    /// Derivative expressed through the activated value `y = apply(pre)`.
    #[inline]
    pub fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// How the affine output of the last layer is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    Linear,
    Softmax,
    DiagGaussian,
    DeterministicL2,
}

/// Affine layer `y = W x + b` with `W` stored as (out × in).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Matrix::zeros(output, input), bias: vec![T::zero(); output] }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let mut draw = || T::of(rng.random_range(-bound..bound));
        let weight = Matrix::from_fn(output, input, |_, _| draw());
        let bias = (0..output).map(|_| draw()).collect();
        Self { weight, bias }
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward_into(&self, x: &[T], out: &mut [T]) {
        self.weight.matvec_into(x, out);
        for (o, &b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.output_dim()];
        self.forward_into(x, &mut out);
        out
    }

    /// Accumulates parameter gradients into `grad`; optionally accumulates the
    /// input gradient into `dx`.
    pub fn backward_acc(&self, x: &[T], g: &[T], grad: &mut Dense<T>, dx: Option<&mut [T]>) {
        grad.weight.add_outer(g, x);
        for (gb, &gi) in grad.bias.iter_mut().zip(g) {
            *gb += gi;
        }
        if let Some(dx) = dx {
            self.weight.matvec_t_acc(g, dx);
        }
    }

    /// Row-wise `Z = X Wᵀ + b` for a batch stored one sample per row.
    pub fn forward_batch(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut z = Matrix::from_fn(x.rows(), self.output_dim(), |_, c| self.bias[c]);
        z.set_a_bt(x, &self.weight, T::one());
        z
    }

    /// Batched [`Dense::backward_acc`]; returns `G W` when `want_dx` is set.
    pub fn backward_batch(
        &self,
        x: &Matrix<T>,
        g: &Matrix<T>,
        grad: &mut Dense<T>,
        want_dx: bool,
    ) -> Option<Matrix<T>> {
        grad.weight.add_at_b(g, x);
        for r in 0..g.rows() {
            for (gb, &gi) in grad.bias.iter_mut().zip(g.row(r)) {
                *gb += gi;
            }
        }
        want_dx.then(|| {
            let mut dx = Matrix::zeros(g.rows(), self.input_dim());
            dx.set_a_b(g, &self.weight, T::zero());
            dx
        })
    }

    pub fn param_count(&self) -> usize {
        self.bias.len() * (self.input_dim() + 1)
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// Multilayer perceptron parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Dense<T>>,
    activation: Activation,
    head: Head,
}

/// Intermediates of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// Input of each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<T>>,
    /// Pre-activation of each layer; the last one is the network output.
    pre: Vec<Vec<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &[T] {
        self.pre.last().expect("trace has at least one layer")
    }

    pub fn input(&self) -> &[T] {
        &self.inputs[0]
    }
}

/// Intermediates of a batched forward pass; row `i` of every matrix belongs
/// to sample `i`.
#[derive(Debug, Clone)]
pub struct BatchTrace<T> {
    inputs: Vec<Matrix<T>>,
    pre: Vec<Matrix<T>>,
}

impl<T: Scalar> BatchTrace<T> {
    pub fn output(&self) -> &Matrix<T> {
        self.pre.last().expect("trace has at least one layer")
    }

    pub fn input(&self) -> &Matrix<T> {
        &self.inputs[0]
    }
}

/// Gradient buffers shaped like an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn tensors(&self) -> Vec<&[T]> {
        tensors_of(&self.layers)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        tensors_mut_of(&mut self.layers)
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| *v == T::zero()))
    }
}

fn tensors_of<T: Scalar>(layers: &[Dense<T>]) -> Vec<&[T]> {
    let mut out = Vec::with_capacity(layers.len() * 2);
    for l in layers {
        out.push(l.weight.data());
        out.push(&l.bias[..]);
    }
    out
}

fn tensors_mut_of<T: Scalar>(layers: &mut [Dense<T>]) -> Vec<&mut [T]> {
    let mut out = Vec::with_capacity(layers.len() * 2);
    for l in layers.iter_mut() {
        out.push(l.weight.data_mut());
        out.push(&mut l.bias[..]);
    }
    out
}

fn tensor_names_of(prefix: &str, n_layers: usize) -> Vec<String> {
    (0..n_layers).flat_map(|i| [format!("{prefix}layer{i}.weight"), format!("{prefix}layer{i}.bias")]).collect()
}

impl<T: Scalar> Mlp<T> {
    /// Builds a network with layer sizes `dims = [input, hidden.., output]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, head: Head, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::shape(format!("invalid layer sizes {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Ok(Self { layers, activation, head })
    }

    pub fn from_layers(layers: Vec<Dense<T>>, activation: Activation, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("mlp needs at least one layer"));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    w[0].output_dim(),
                    i + 1,
                    w[1].input_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::shape(format!("layer {i} bias length mismatch")));
            }
        }
        Ok(Self { layers, activation, head })
    }

    /// Builds a network from hidden sizes, e.g. Table-style `(128, 128)`.
    pub fn with_hidden<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        head: Head,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        Self::new(&dims, activation, head, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Dense::output_dim).unwrap_or(0)
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        tensors_of(&self.layers)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        tensors_mut_of(&mut self.layers)
    }

    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        tensor_names_of(prefix, self.layers.len())
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients { layers: self.layers.iter().map(|l| Dense::zeros(l.input_dim(), l.output_dim())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!("mlp expects input of length {}, got {}", self.input_dim(), x.len())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(&cur);
            if i < last {
                out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            cur = out;
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &[T]) -> Result<Trace<T>> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        inputs.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&inputs[i]);
            if i + 1 < n {
                inputs.push(z.iter().map(|&v| self.activation.apply(v)).collect());
            }
            pre.push(z);
        }
        Ok(Trace { inputs, pre })
    }

    /// Accumulates parameter gradients of `upstream · output` into `grads`.
    /// Returns the input gradient when `want_input` is set.
    pub fn backward_acc(
        &self,
        trace: &Trace<T>,
        upstream: &[T],
        grads: &mut Gradients<T>,
        want_input: bool,
    ) -> Result<Option<Vec<T>>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "upstream gradient has length {}, network outputs {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if grads.layers.len() != self.layers.len() || trace.pre.len() != self.layers.len() {
            return Err(Error::shape("gradient buffers or trace do not match the network"));
        }
        let mut delta = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let need_dx = i > 0 || want_input;
            let mut dx = if need_dx { Some(vec![T::zero(); layer.input_dim()]) } else { None };
            layer.backward_acc(&trace.inputs[i], &delta, &mut grads.layers[i], dx.as_deref_mut());
            match dx {
                Some(mut d) if i > 0 => {
                    for (dv, &y) in d.iter_mut().zip(&trace.inputs[i]) {
                        *dv *= self.activation.derivative_from_output(y);
                    }
                    delta = d;
                }
                Some(d) => return Ok(Some(d)),
                None => return Ok(None),
            }
        }
        unreachable!("loop returns at layer 0")
    }

    pub fn forward_batch(&self, x: &Matrix<T>) -> Result<BatchTrace<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!("mlp expects inputs of length {}, got {}", self.input_dim(), x.cols())));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        inputs.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward_batch(&inputs[i]);
            if i + 1 < n {
                let mut h = z.clone();
                h.data_mut().iter_mut().for_each(|v| *v = self.activation.apply(*v));
                inputs.push(h);
            }
            pre.push(z);
        }
        Ok(BatchTrace { inputs, pre })
    }

    /// Batched [`Mlp::backward_acc`]: row `i` of `upstream` is the output
    /// gradient of sample `i`; parameter gradients are summed over the batch.
    pub fn backward_batch(
        &self,
        trace: &BatchTrace<T>,
        upstream: &Matrix<T>,
        grads: &mut Gradients<T>,
        want_input: bool,
    ) -> Result<Option<Matrix<T>>> {
        if upstream.cols() != self.output_dim() || upstream.rows() != trace.inputs[0].rows() {
            return Err(Error::shape(format!(
                "upstream gradient is {}x{}, network outputs {}x{}",
                upstream.rows(),
                upstream.cols(),
                trace.inputs[0].rows(),
                self.output_dim()
            )));
        }
        if grads.layers.len() != self.layers.len() || trace.pre.len() != self.layers.len() {
            return Err(Error::shape("gradient buffers or trace do not match the network"));
        }
        let mut delta = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            let need_dx = i > 0 || want_input;
            let dx = self.layers[i].backward_batch(&trace.inputs[i], &delta, &mut grads.layers[i], need_dx);
            match dx {
                Some(mut d) if i > 0 => {
                    for (dv, &y) in d.data_mut().iter_mut().zip(trace.inputs[i].data()) {
                        *dv *= self.activation.derivative_from_output(y);
                    }
                    delta = d;
                }
                other => return Ok(other),
            }
        }
        unreachable!("loop returns at layer 0")
    }

    /// Fresh gradients of `upstream · mlp(input)` with respect to parameters and input.
    pub fn backward(&self, input: &[T], upstream: &[T]) -> Result<(Gradients<T>, Vec<T>)> {
        let trace = self.forward_trace(input)?;
        let mut grads = self.zero_grads();
        let dx = self.backward_acc(&trace, upstream, &mut grads, true)?;
        Ok((grads, dx.expect("input gradient requested")))
    }
}

/// Gradient of the scalar `upstream · mlp(input)`; thin wrapper over [`Mlp::backward`].
pub fn mlp_backward<T: Scalar>(params: &Mlp<T>, input: &[T], upstream: &[T]) -> Result<(Gradients<T>, Vec<T>)> {
    params.backward(input, upstream)
}

pub fn mlp_forward<T: Scalar>(params: &Mlp<T>, input: &[T]) -> Result<Vec<T>> {
    params.forward(input)
}

/// Shared trunk with several independent final layers.
///
/// The trunk's affine output passes through the trunk activation before
/// reaching the heads, so a trunk of sizes `[in, h1, h2]` and heads `h2 → out`
/// is the same function family as one `[in, h1, h2, out]` MLP per head.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T> {
    trunk: Mlp<T>,
    heads: Vec<Dense<T>>,
}

#[derive(Debug, Clone)]
pub struct EnsembleTrace<T> {
    trunk: Trace<T>,
    hidden: Vec<T>,
}

impl<T: Scalar> EnsembleTrace<T> {
    pub fn hidden(&self) -> &[T] {
        &self.hidden
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleBatchTrace<T> {
    trunk: BatchTrace<T>,
    hidden: Matrix<T>,
}

impl<T: Scalar> EnsembleBatchTrace<T> {
    pub fn hidden(&self) -> &Matrix<T> {
        &self.hidden
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleGradients<T> {
    pub trunk: Gradients<T>,
    pub heads: Vec<Dense<T>>,
}

impl<T: Scalar> EnsembleGradients<T> {
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = self.trunk.tensors();
        out.extend(tensors_of(&self.heads));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.trunk.tensors_mut();
        out.extend(tensors_mut_of(&mut self.heads));
        out
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

impl<T: Scalar> Ensemble<T> {
    /// `hidden` must be non-empty; the last hidden size feeds the heads.
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        n_heads: usize,
        activation: Activation,
        head: Head,
        rng: &mut R,
    ) -> Result<Self> {
        let Some((&last, rest)) = hidden.split_last() else {
            return Err(Error::shape("ensemble needs at least one hidden layer"));
        };
        if n_heads == 0 {
            return Err(Error::shape("ensemble needs at least one head"));
        }
        let trunk = Mlp::with_hidden(input, rest, last, activation, head, rng)?;
        let heads = (0..n_heads).map(|_| Dense::init(last, output, rng)).collect();
        Ok(Self { trunk, heads })
    }

    pub fn from_parts(trunk: Mlp<T>, heads: Vec<Dense<T>>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::shape("ensemble needs at least one head"));
        }
        let width = heads[0].output_dim();
        for h in &heads {
            if h.input_dim() != trunk.output_dim() || h.output_dim() != width {
                return Err(Error::shape("ensemble head dimensions do not chain"));
            }
        }
        Ok(Self { trunk, heads })
    }

    pub fn trunk(&self) -> &Mlp<T> {
        &self.trunk
    }

    pub fn heads(&self) -> &[Dense<T>] {
        &self.heads
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.heads[0].output_dim()
    }

    pub fn head_tag(&self) -> Head {
        self.trunk.head()
    }

    pub fn forward_trunk(&self, x: &[T]) -> Result<EnsembleTrace<T>> {
        let trunk = self.trunk.forward_trace(x)?;
        let act = self.trunk.activation();
        let hidden = trunk.output().iter().map(|&v| act.apply(v)).collect();
        Ok(EnsembleTrace { trunk, hidden })
    }

    pub fn head_output(&self, trace: &EnsembleTrace<T>, head: usize) -> Vec<T> {
        self.heads[head].forward(&trace.hidden)
    }

    pub fn forward(&self, x: &[T], head: usize) -> Result<Vec<T>> {
        if head >= self.heads.len() {
            return Err(Error::shape(format!("head {head} out of range")));
        }
        let t = self.forward_trunk(x)?;
        Ok(self.head_output(&t, head))
    }

    pub fn zero_grads(&self) -> EnsembleGradients<T> {
        EnsembleGradients {
            trunk: self.trunk.zero_grads(),
            heads: self.heads.iter().map(|h| Dense::zeros(h.input_dim(), h.output_dim())).collect(),
        }
    }

    /// Backpropagates one upstream gradient per head (`None` skips a head).
    pub fn backward_acc(
        &self,
        trace: &EnsembleTrace<T>,
        upstream: &[Option<Vec<T>>],
        grads: &mut EnsembleGradients<T>,
        want_input: bool,
    ) -> Result<Option<Vec<T>>> {
        if upstream.len() != self.heads.len() {
            return Err(Error::shape("one upstream slot per ensemble head required"));
        }
        let mut dh = vec![T::zero(); trace.hidden.len()];
        for (k, g) in upstream.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != self.output_dim() {
                    return Err(Error::shape("ensemble upstream length mismatch"));
                }
                self.heads[k].backward_acc(&trace.hidden, g, &mut grads.heads[k], Some(&mut dh));
            }
        }
        let act = self.trunk.activation();
        for (d, &y) in dh.iter_mut().zip(&trace.hidden) {
            *d *= act.derivative_from_output(y);
        }
        self.trunk.backward_acc(&trace.trunk, &dh, &mut grads.trunk, want_input)
    }

    pub fn forward_trunk_batch(&self, x: &Matrix<T>) -> Result<EnsembleBatchTrace<T>> {
        let trunk = self.trunk.forward_batch(x)?;
        let act = self.trunk.activation();
        let mut hidden = trunk.output().clone();
        hidden.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        Ok(EnsembleBatchTrace { trunk, hidden })
    }

    pub fn head_output_batch(&self, trace: &EnsembleBatchTrace<T>, head: usize) -> Matrix<T> {
        self.heads[head].forward_batch(&trace.hidden)
    }

    /// Batched [`Ensemble::backward_acc`].
    pub fn backward_batch(
        &self,
        trace: &EnsembleBatchTrace<T>,
        upstream: &[Option<Matrix<T>>],
        grads: &mut EnsembleGradients<T>,
        want_input: bool,
    ) -> Result<Option<Matrix<T>>> {
        if upstream.len() != self.heads.len() {
            return Err(Error::shape("one upstream slot per ensemble head required"));
        }
        let mut dh = Matrix::zeros(trace.hidden.rows(), trace.hidden.cols());
        for (k, g) in upstream.iter().enumerate() {
            if let Some(g) = g {
                if g.cols() != self.output_dim() || g.rows() != dh.rows() {
                    return Err(Error::shape("ensemble upstream shape mismatch"));
                }
                grads.heads[k].weight.add_at_b(g, &trace.hidden);
                for r in 0..g.rows() {
                    for (gb, &gi) in grads.heads[k].bias.iter_mut().zip(g.row(r)) {
                        *gb += gi;
                    }
                }
                dh.set_a_b(g, &self.heads[k].weight, T::one());
            }
        }
        let act = self.trunk.activation();
        for (d, &y) in dh.data_mut().iter_mut().zip(trace.hidden.data()) {
            *d *= act.derivative_from_output(y);
        }
        self.trunk.backward_batch(&trace.trunk, &dh, &mut grads.trunk, want_input)
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = self.trunk.tensors();
        out.extend(tensors_of(&self.heads));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.trunk.tensors_mut();
        out.extend(tensors_mut_of(&mut self.heads));
        out
    }

    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        let mut names = self.trunk.tensor_names(&format!("{prefix}trunk."));
        for k in 0..self.heads.len() {
            names.push(format!("{prefix}head{k}.weight"));
            names.push(format!("{prefix}head{k}.bias"));
        }
        names
    }

    pub fn is_finite(&self) -> bool {
        self.trunk.is_finite() && self.heads.iter().all(Dense::is_finite)
    }
}

/// Stable JSON form of a network: shapes, flat row-major values, tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpRecord {
    pub activation: Activation,
    pub head: Head,
    pub layers: Vec<DenseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseRecord {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRecord {
    pub trunk: MlpRecord,
    pub heads: Vec<DenseRecord>,
}

impl DenseRecord {
    fn from_dense<T: Scalar>(d: &Dense<T>) -> Self {
        Self {
            rows: d.output_dim(),
            cols: d.input_dim(),
            weight: d.weight.data().iter().map(|v| v.as_f64()).collect(),
            bias: d.bias.iter().map(|v| v.as_f64()).collect(),
        }
    }

    fn to_dense<T: Scalar>(&self) -> Result<Dense<T>> {
        if self.bias.len() != self.rows {
            return Err(Error::shape("checkpoint bias length does not match rows"));
        }
        let weight = Matrix::from_vec(self.rows, self.cols, self.weight.iter().map(|&v| T::of(v)).collect())?;
        Ok(Dense { weight, bias: self.bias.iter().map(|&v| T::of(v)).collect() })
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn to_record(&self) -> MlpRecord {
        MlpRecord {
            activation: self.activation,
            head: self.head,
            layers: self.layers.iter().map(DenseRecord::from_dense).collect(),
        }
    }

    pub fn from_record(rec: &MlpRecord) -> Result<Self> {
        let layers = rec.layers.iter().map(DenseRecord::to_dense).collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, rec.activation, rec.head)
    }
}

impl<T: Scalar> Ensemble<T> {
    pub fn to_record(&self) -> EnsembleRecord {
        EnsembleRecord {
            trunk: self.trunk.to_record(),
            heads: self.heads.iter().map(DenseRecord::from_dense).collect(),
        }
    }

    pub fn from_record(rec: &EnsembleRecord) -> Result<Self> {
        let trunk = Mlp::from_record(&rec.trunk)?;
        let heads = rec.heads.iter().map(DenseRecord::to_dense).collect::<Result<Vec<_>>>()?;
        Self::from_parts(trunk, heads)
    }
}

/// Squared L2 norm over a set of tensors.
pub fn norm_sq<T: Scalar>(tensors: &[&[T]]) -> T {
    tensors.iter().map(|t| dot(t, t)).fold(T::zero(), |a, b| a + b)
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(tensors: &mut [&mut [T]], max_norm: T) -> T {
    let total = tensors.iter().map(|t| dot(t, t)).fold(T::zero(), |a, b| a + b).sqrt();
    if total > max_norm && total > T::zero() {
        let s = max_norm / total;
        for t in tensors.iter_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn scratch_forward(net: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
        // Independent re-implementation: explicit triple loop over the records.
        let rec = net.to_record();
        let mut cur = x.to_vec();
        let n = rec.layers.len();
        for (li, l) in rec.layers.iter().enumerate() {
            let mut out = vec![0.0; l.rows];
            for r in 0..l.rows {
                let mut s = l.bias[r];
                for c in 0..l.cols {
                    s += l.weight[r * l.cols + c] * cur[c];
                }
                out[r] = if li + 1 < n { s.tanh() } else { s };
            }
            cur = out;
        }
        cur
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut layer = Dense::<f64>::zeros(3, 2);
        layer.bias = vec![0.5, -1.5];
        let net = Mlp::from_layers(vec![layer], Activation::Tanh, Head::Linear).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn identity_layer_is_identity() {
        let layer = Dense { weight: Matrix::<f64>::identity(4), bias: vec![0.0; 4] };
        let net = Mlp::from_layers(vec![layer], Activation::Relu, Head::Linear).unwrap();
        let x = [0.3, -2.0, 7.0, 0.0];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_scratch_oracle() {
        let mut rng = stream(11, "test", 0, 0);
        let net = Mlp::<f64>::new(&[5, 7, 3], Activation::Tanh, Head::Linear, &mut rng).unwrap();
        let x = [0.1, -0.4, 0.9, 1.3, -2.0];
        let a = net.forward(&x).unwrap();
        let b = scratch_forward(&net, &x);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let mut rng = stream(1, "test", 0, 0);
        let net = Mlp::<f64>::new(&[3, 4, 2], Activation::Relu, Head::Linear, &mut rng).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(matches!(net.backward(&[1.0, 2.0, 3.0], &[1.0]), Err(Error::Shape(_))));
        let bad = vec![Dense::<f64>::zeros(3, 4), Dense::zeros(5, 2)];
        assert!(Mlp::from_layers(bad, Activation::Relu, Head::Linear).is_err());
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mut rng = stream(2, "test", 0, 0);
        let net = Mlp::<f64>::new(&[3, 2], Activation::Tanh, Head::Linear, &mut rng).unwrap();
        let x = [1.0, -2.0, 0.5];
        let g = [0.25, -3.0];
        let (grads, dx) = net.backward(&x, &g).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(grads.layers[0].weight.get(r, c), g[r] * x[c]);
            }
            assert_eq!(grads.layers[0].bias[r], g[r]);
        }
        let w = &net.layers()[0].weight;
        for c in 0..3 {
            let expect = g[0] * w.get(0, c) + g[1] * w.get(1, c);
            assert!((dx[c] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = stream(3, "test", 0, 0);
        let net = Mlp::<f64>::new(&[4, 6, 6, 2], Activation::Tanh, Head::Linear, &mut rng).unwrap();
        let (grads, dx) = net.backward(&[0.1, 0.2, 0.3, 0.4], &[0.0, 0.0]).unwrap();
        assert!(grads.is_zero());
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ensemble_heads_share_one_trunk() {
        let mut rng = stream(4, "test", 0, 0);
        let ens = Ensemble::<f64>::new(5, &[8, 6], 3, 3, Activation::Relu, Head::Linear, &mut rng).unwrap();
        assert_eq!(ens.n_heads(), 3);
        let x = [0.2, 0.1, -0.3, 0.5, 1.0];
        let t = ens.forward_trunk(&x).unwrap();
        for k in 0..3 {
            assert_eq!(ens.head_output(&t, k), ens.forward(&x, k).unwrap());
        }
        let names = ens.tensor_names("p.");
        assert_eq!(names.len(), ens.tensors().len());
    }

    #[test]
    fn record_round_trip() {
        let mut rng = stream(5, "test", 0, 0);
        let net = Mlp::<f64>::new(&[3, 4, 2], Activation::Relu, Head::Softmax, &mut rng).unwrap();
        let json = serde_json::to_string(&net.to_record()).unwrap();
        let back: MlpRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(Mlp::<f64>::from_record(&back).unwrap(), net);
        assert_eq!(json, serde_json::to_string(&back).unwrap());
    }

    #[test]
    fn clip_grad_norm_rescales() {
        let mut a = vec![3.0f64, 0.0];
        let mut b = vec![4.0f64];
        let n = clip_grad_norm(&mut [&mut a[..], &mut b[..]], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn batched_paths_match_per_sample() {
        let mut rng = stream(11, "test", 0, 0);
        let net = Mlp::<f64>::new(&[4, 7, 5, 3], Activation::Tanh, Head::Linear, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..6).map(|i| (0..4).map(|j| ((i * 4 + j) as f64).sin()).collect()).collect();
        let gs: Vec<Vec<f64>> = (0..6).map(|i| (0..3).map(|j| ((i * 3 + j) as f64).cos()).collect()).collect();
        let mut per = net.zero_grads();
        let mut dxs = Vec::new();
        for (x, g) in xs.iter().zip(&gs) {
            let t = net.forward_trace(x).unwrap();
            dxs.push(net.backward_acc(&t, g, &mut per, true).unwrap().unwrap());
        }
        let bt = net.forward_batch(&Matrix::from_rows(&xs).unwrap()).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let y = net.forward(x).unwrap();
            for (a, b) in y.iter().zip(bt.output().row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let mut batched = net.zero_grads();
        let dx = net.backward_batch(&bt, &Matrix::from_rows(&gs).unwrap(), &mut batched, true).unwrap().unwrap();
        for (a, b) in per.tensors().iter().zip(batched.tensors()) {
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        for (i, d) in dxs.iter().enumerate() {
            for (u, v) in d.iter().zip(dx.row(i)) {
                assert!((u - v).abs() < 1e-12);
            }
        }

        let ens = Ensemble::<f64>::new(4, &[6, 5], 2, 3, Activation::Relu, Head::Linear, &mut rng).unwrap();
        let up: Vec<Option<Vec<f64>>> = vec![Some(vec![0.3, -1.0]), None, Some(vec![0.5, 0.25])];
        let mut per = ens.zero_grads();
        for x in &xs {
            let t = ens.forward_trunk(x).unwrap();
            ens.backward_acc(&t, &up, &mut per, false).unwrap();
        }
        let bt = ens.forward_trunk_batch(&Matrix::from_rows(&xs).unwrap()).unwrap();
        let upm: Vec<Option<Matrix<f64>>> =
            up.iter().map(|g| g.as_ref().map(|g| Matrix::from_rows(&vec![g.clone(); 6]).unwrap())).collect();
        let mut batched = ens.zero_grads();
        ens.backward_batch(&bt, &upm, &mut batched, false).unwrap();
        for (a, b) in per.tensors().iter().zip(batched.tensors()) {
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        for (u, v) in ens.head_output_batch(&bt, 1).row(2).iter().zip(ens.forward(&xs[2], 1).unwrap()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
