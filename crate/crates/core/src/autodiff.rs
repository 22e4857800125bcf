//! A small reverse-mode automatic-differentiation tape over vector-valued
//! nodes, and multilayer-perceptron policies built on it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param { offset: usize },
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    Tanh(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    LogSumExp(NodeId),
    Index(NodeId, usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Append-only computation graph; node ids are topologically ordered.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Option<Vec<f64>>,
}

impl Tape {
    /// A tape without bound parameters; [`Tape::param`] fails on it.
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose parameter leaves read from `params`.
    pub fn with_params(params: &[f64]) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params.to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        match self.value(id) {
            [x] => Ok(*x),
            v => Err(Error::Tape(format!("node {} has {} elements, expected a scalar", id.0, v.len()))),
        }
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn get(&self, id: NodeId) -> Result<&[f64]> {
        self.nodes
            .get(id.0)
            .map(|n| n.value.as_slice())
            .ok_or_else(|| Error::Tape(format!("unknown node {}", id.0)))
    }

    fn same_len(&self, a: NodeId, b: NodeId) -> Result<(&[f64], &[f64])> {
        let (va, vb) = (self.get(a)?, self.get(b)?);
        if va.len() != vb.len() {
            return Err(Error::DimensionMismatch {
                expected: va.len(),
                got: vb.len(),
            });
        }
        Ok((va, vb))
    }

    /// Leaf reading `len` bound parameters starting at `offset`.
    pub fn param(&mut self, offset: usize, len: usize) -> Result<NodeId> {
        let params = self
            .params
            .as_ref()
            .ok_or_else(|| Error::Tape("parameter leaf on a tape with no bound parameters".into()))?;
        if offset + len > params.len() {
            return Err(Error::Tape(format!(
                "parameter leaf [{offset}, {}) outside bound vector of length {}",
                offset + len,
                params.len()
            )));
        }
        let value = params[offset..offset + len].to_vec();
        Ok(self.push(Op::Param { offset }, value))
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.same_len(a, b)?;
        let v = va.iter().zip(vb).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.same_len(a, b)?;
        let v = va.iter().zip(vb).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.same_len(a, b)?;
        let v = va.iter().zip(vb).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.get(a)?.iter().map(|x| c * x).collect();
        Ok(self.push(Op::Scale(a, c), v))
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.get(a)?.iter().map(|x| x + c).collect();
        Ok(self.push(Op::Offset(a), v))
    }

    /// `W·x` with `W` a row-major `rows × cols` node.
    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (vw, vx) = (self.get(w)?, self.get(x)?);
        if vw.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: vw.len(),
            });
        }
        if vx.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                got: vx.len(),
            });
        }
        let v = vw
            .chunks_exact(cols)
            .map(|row| row.iter().zip(vx).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push(Op::MatVec { w, x, rows, cols }, v))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.get(a)?.iter().map(|x| x.tanh()).collect();
        Ok(self.push(Op::Tanh(a), v))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.get(a)?.iter().map(|x| x.max(0.0)).collect();
        Ok(self.push(Op::Relu(a), v))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.get(a)?.iter().map(|x| x.ln()).collect();
        Ok(self.push(Op::Log(a), v))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.get(a)?.iter().map(|x| x.exp()).collect();
        Ok(self.push(Op::Exp(a), v))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = vec![self.get(a)?.iter().sum()];
        Ok(self.push(Op::Sum(a), v))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.same_len(a, b)?;
        let v = vec![va.iter().zip(vb).map(|(x, y)| x * y).sum()];
        Ok(self.push(Op::Dot(a, b), v))
    }

    /// `log Σ exp(aₖ)`, evaluated with the maximum subtracted.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.get(a)?;
        if va.is_empty() {
            return Err(Error::Tape("logsumexp of an empty vector".into()));
        }
        let v = vec![logsumexp(va)];
        Ok(self.push(Op::LogSumExp(a), v))
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let va = self.get(a)?;
        let x = *va.get(i).ok_or(Error::IndexOutOfRange { index: i, len: va.len() })?;
        Ok(self.push(Op::Index(a, i), vec![x]))
    }

    /// First node holding a NaN or infinity, as an error naming it.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.nodes.iter().position(|n| n.value.iter().any(|x| !x.is_finite())) {
            Some(k) => Err(Error::Tape(format!(
                "non-finite value produced at node {k} ({})",
                op_name(&self.nodes[k].op)
            ))),
            None => Ok(()),
        }
    }

    /// Gradient of the scalar node `output` with respect to the bound
    /// parameter vector; zero where the output does not depend on it.
    pub fn backward(&self, output: NodeId) -> Result<Vec<f64>> {
        let params = self
            .params
            .as_ref()
            .ok_or_else(|| Error::Tape("backward on a tape with no bound parameters".into()))?;
        let out_len = self.get(output)?.len();
        if out_len != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar output, node {} has {out_len} elements",
                output.0
            )));
        }
        self.ensure_finite()?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        let mut result = vec![0.0; params.len()];

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: impl Fn(usize) -> f64) {
            let g = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
            for (k, gk) in g.iter_mut().enumerate() {
                *gk += f(k);
            }
        }

        for k in (0..=output.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            match node.op {
                Op::Param { offset } => {
                    for (r, gi) in result[offset..offset + g.len()].iter_mut().zip(&g) {
                        *r += gi;
                    }
                }
                Op::Const => {}
                Op::Add(a, b) => {
                    acc(&mut grads, a, g.len(), |i| g[i]);
                    acc(&mut grads, b, g.len(), |i| g[i]);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, a, g.len(), |i| g[i]);
                    acc(&mut grads, b, g.len(), |i| -g[i]);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    acc(&mut grads, a, g.len(), |i| g[i] * vb[i]);
                    acc(&mut grads, b, g.len(), |i| g[i] * va[i]);
                }
                Op::Scale(a, c) => acc(&mut grads, a, g.len(), |i| c * g[i]),
                Op::Offset(a) => acc(&mut grads, a, g.len(), |i| g[i]),
                Op::MatVec { w, x, rows, cols } => {
                    let (vw, vx) = (self.value(w), self.value(x));
                    acc(&mut grads, w, rows * cols, |k| g[k / cols] * vx[k % cols]);
                    acc(&mut grads, x, cols, |c| (0..rows).map(|r| vw[r * cols + c] * g[r]).sum());
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, a, g.len(), |i| g[i] * (1.0 - y[i] * y[i]));
                }
                Op::Relu(a) => {
                    let va = self.value(a);
                    acc(&mut grads, a, g.len(), |i| if va[i] > 0.0 { g[i] } else { 0.0 });
                }
                Op::Log(a) => {
                    let va = self.value(a);
                    acc(&mut grads, a, g.len(), |i| g[i] / va[i]);
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    acc(&mut grads, a, g.len(), |i| g[i] * y[i]);
                }
                Op::Sum(a) => {
                    let n = self.value(a).len();
                    acc(&mut grads, a, n, |_| g[0]);
                }
                Op::Dot(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    acc(&mut grads, a, va.len(), |i| g[0] * vb[i]);
                    acc(&mut grads, b, vb.len(), |i| g[0] * va[i]);
                }
                Op::LogSumExp(a) => {
                    let va = self.value(a);
                    let lse = node.value[0];
                    acc(&mut grads, a, va.len(), |i| g[0] * (va[i] - lse).exp());
                }
                Op::Index(a, idx) => {
                    let n = self.value(a).len();
                    acc(&mut grads, a, n, |i| if i == idx { g[0] } else { 0.0 });
                }
            }
        }
        Ok(result)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Param { .. } => "param",
        Op::Const => "const",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Offset(..) => "offset",
        Op::MatVec { .. } => "matvec",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::Log(..) => "log",
        Op::Exp(..) => "exp",
        Op::Sum(..) => "sum",
        Op::Dot(..) => "dot",
        Op::LogSumExp(..) => "logsumexp",
        Op::Index(..) => "index",
    }
}

/// `log Σ exp(xₖ)` with the maximum subtracted.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `logits[action] − logsumexp(logits)` on the tape.
pub fn categorical_log_prob(tape: &mut Tape, logits: NodeId, action: usize) -> Result<NodeId> {
    let chosen = tape.index(logits, action)?;
    let lse = tape.logsumexp(logits)?;
    tape.sub(chosen, lse)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gaussian standard deviation must be positive, got {sigma}"
        )));
    }
    Ok(())
}

/// `−(action − mean)²/(2σ²) − log(σ√(2π))` on the tape; `mean` is a scalar
/// node.
pub fn gaussian_log_prob(tape: &mut Tape, mean: NodeId, sigma: f64, action: f64) -> Result<NodeId> {
    check_sigma(sigma)?;
    let a = tape.constant(vec![action]);
    let diff = tape.sub(a, mean)?;
    let sq = tape.mul(diff, diff)?;
    let scaled = tape.scale(sq, -0.5 / (sigma * sigma))?;
    tape.offset(scaled, -gaussian_log_norm(sigma))
}

fn gaussian_log_norm(sigma: f64) -> f64 {
    (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

/// Plain-number version of [`gaussian_log_prob`].
pub fn gaussian_log_density(mean: f64, sigma: f64, action: f64) -> f64 {
    let z = action - mean;
    -z * z / (2.0 * sigma * sigma) - gaussian_log_norm(sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }
}

/// How network outputs become an action distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PolicyHead {
    /// Outputs are softmax logits over discrete actions.
    Categorical,
    /// Output is the mean of a Gaussian with fixed standard deviation.
    Gaussian { sigma: f64 },
}

/// An action drawn from a policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(f64),
}

impl Action {
    pub fn discrete(self) -> Result<usize> {
        match self {
            Action::Discrete(a) => Ok(a),
            Action::Continuous(_) => Err(Error::InvalidArgument("expected a discrete action".into())),
        }
    }

    pub fn continuous(self) -> Result<f64> {
        match self {
            Action::Continuous(a) => Ok(a),
            Action::Discrete(_) => Err(Error::InvalidArgument("expected a continuous action".into())),
        }
    }
}

/// Fully connected network; per layer the packed parameters are the
/// row-major `out × in` weight matrix followed by the `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    sizes: Vec<usize>,
    activation: Activation,
    head: PolicyHead,
}

impl MlpPolicy {
    /// `sizes = [inputs, hidden…, outputs]`; hidden layers use `activation`,
    /// the output layer is linear.
    pub fn new(sizes: Vec<usize>, activation: Activation, head: PolicyHead) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "mlp needs at least input and output sizes, all positive (got {sizes:?})"
            )));
        }
        if let PolicyHead::Gaussian { sigma } = head {
            check_sigma(sigma)?;
            if *sizes.last().unwrap() != 1 {
                return Err(Error::InvalidArgument(
                    "gaussian head supports a single action dimension".into(),
                ));
            }
        }
        Ok(Self {
            sizes,
            activation,
            head,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> PolicyHead {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Stable textual descriptor stored in checkpoints.
    pub fn architecture(&self) -> String {
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        let head = match self.head {
            PolicyHead::Categorical => "categorical".to_string(),
            PolicyHead::Gaussian { sigma } => format!("gaussian({sigma})"),
        };
        format!("mlp[{}]:{}:{}", sizes.join("-"), self.activation.name(), head)
    }

    /// Weights uniform in `±√(6/(in+out))`, biases zero.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for w in self.sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            out.extend((0..n_in * n_out).map(|_| rng.random_range(-limit..=limit)));
            out.extend(std::iter::repeat_n(0.0, n_out));
        }
        out
    }

    fn check(&self, params: &[f64], input: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Network output computed directly, without a tape.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        self.check(params, input)?;
        let mut x = input.to_vec();
        let mut offset = 0;
        let layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[offset..offset + n_in * n_out];
            let bias = &params[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            offset += (n_in + 1) * n_out;
            let mut y: Vec<f64> = weights
                .chunks_exact(n_in)
                .zip(bias)
                .map(|(row, b)| row.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() + b)
                .collect();
            if l + 1 < layers {
                y.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            x = y;
        }
        Ok(x)
    }

    /// Network output recorded on `tape`, reading parameters from
    /// `offset` in the tape's bound vector.
    pub fn forward_tape(&self, tape: &mut Tape, offset: usize, input: &[f64]) -> Result<NodeId> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut x = tape.constant(input.to_vec());
        let mut at = offset;
        let layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = tape.param(at, n_in * n_out)?;
            let bias = tape.param(at + n_in * n_out, n_out)?;
            at += (n_in + 1) * n_out;
            let wx = tape.matvec(weights, x, n_out, n_in)?;
            let pre = tape.add(wx, bias)?;
            x = if l + 1 < layers {
                match self.activation {
                    Activation::Tanh => tape.tanh(pre)?,
                    Activation::Relu => tape.relu(pre)?,
                    Activation::Linear => pre,
                }
            } else {
                pre
            };
        }
        Ok(x)
    }

    /// `log π(action | input)` without a tape.
    pub fn log_prob(&self, params: &[f64], input: &[f64], action: Action) -> Result<f64> {
        let out = self.forward(params, input)?;
        match (self.head, action) {
            (PolicyHead::Categorical, Action::Discrete(a)) => {
                let x = *out.get(a).ok_or(Error::IndexOutOfRange { index: a, len: out.len() })?;
                Ok(x - logsumexp(&out))
            }
            (PolicyHead::Gaussian { sigma }, Action::Continuous(a)) => {
                Ok(gaussian_log_density(out[0], sigma, a))
            }
            _ => Err(Error::InvalidArgument("action kind does not match the policy head".into())),
        }
    }

    /// `(log π(action | input), ∇_params log π)` via one backward pass.
    pub fn log_prob_and_score(&self, params: &[f64], input: &[f64], action: Action) -> Result<(f64, Vec<f64>)> {
        self.check(params, input)?;
        let mut tape = Tape::with_params(params);
        let out = self.forward_tape(&mut tape, 0, input)?;
        let lp = match (self.head, action) {
            (PolicyHead::Categorical, Action::Discrete(a)) => categorical_log_prob(&mut tape, out, a)?,
            (PolicyHead::Gaussian { sigma }, Action::Continuous(a)) => {
                let mean = tape.index(out, 0)?;
                gaussian_log_prob(&mut tape, mean, sigma, a)?
            }
            _ => return Err(Error::InvalidArgument("action kind does not match the policy head".into())),
        };
        let score = tape.backward(lp)?;
        Ok((tape.scalar(lp)?, score))
    }

    /// Draw an action for `input`.
    pub fn sample(&self, params: &[f64], input: &[f64], rng: &mut impl Rng) -> Result<Action> {
        let out = self.forward(params, input)?;
        if let Some(k) = out.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "policy output",
                block: k,
            });
        }
        match self.head {
            PolicyHead::Categorical => {
                let lse = logsumexp(&out);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, x) in out.iter().enumerate() {
                    acc += (x - lse).exp();
                    if u < acc {
                        return Ok(Action::Discrete(k));
                    }
                }
                Ok(Action::Discrete(out.len() - 1))
            }
            PolicyHead::Gaussian { sigma } => {
                let n = Normal::new(out[0], sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                Ok(Action::Continuous(n.sample(rng)))
            }
        }
    }

    /// Action probabilities of a categorical policy.
    pub fn probabilities(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        if self.head != PolicyHead::Categorical {
            return Err(Error::InvalidArgument("probabilities need a categorical head".into()));
        }
        let out = self.forward(params, input)?;
        let lse = logsumexp(&out);
        Ok(out.iter().map(|x| (x - lse).exp()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[k] += h;
                m[k] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], rel: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= rel * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn product_and_gradient() {
        let mut t = Tape::with_params(&[3.0, 4.0]);
        let x = t.param(0, 1).unwrap();
        let y = t.param(1, 1).unwrap();
        let f = t.mul(x, y).unwrap();
        assert_eq!(t.scalar(f).unwrap(), 12.0);
        assert_eq!(t.backward(f).unwrap(), vec![4.0, 3.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut t = Tape::with_params(&[1.0, 2.0]);
        let _ = t.param(0, 2).unwrap();
        let c = t.constant(vec![5.0]);
        assert_eq!(t.backward(c).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn errors() {
        let mut t = Tape::new();
        assert!(matches!(t.param(0, 1), Err(Error::Tape(_))));
        let mut t = Tape::with_params(&[1.0, 2.0]);
        let v = t.param(0, 2).unwrap();
        assert!(matches!(t.backward(v), Err(Error::Tape(_))));
        assert!(t.param(1, 2).is_err());
        let z = t.constant(vec![0.0]);
        let bad = t.log(z).unwrap();
        let msg = t.backward(bad).unwrap_err().to_string();
        assert!(msg.contains("node") && msg.contains("log"), "{msg}");
        assert!(matches!(t.index(v, 7), Err(Error::IndexOutOfRange { index: 7, len: 2 })));
    }

    #[test]
    fn logsumexp_values() {
        let mut t = Tape::new();
        let z = t.constant(vec![0.0; 3]);
        let l = t.logsumexp(z).unwrap();
        assert!((t.scalar(l).unwrap() - 3f64.ln()).abs() < 1e-15);
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn categorical_examples() {
        let mut t = Tape::new();
        let z = t.constant(vec![0.0; 3]);
        let lp = categorical_log_prob(&mut t, z, 0).unwrap();
        assert!((t.scalar(lp).unwrap() + 3f64.ln()).abs() < 1e-15);

        let z = t.constant(vec![10.0, 0.0, 0.0]);
        let lp = categorical_log_prob(&mut t, z, 0).unwrap();
        let expected = -(1.0 + 2.0 * (-10f64).exp()).ln();
        assert!((t.scalar(lp).unwrap() - expected).abs() < 1e-15);
        assert!((expected + 9.08e-5).abs() < 1e-7);
        assert!(categorical_log_prob(&mut t, z, 3).is_err());
    }

    #[test]
    fn gaussian_examples() {
        let mut t = Tape::with_params(&[25.0]);
        let mean = t.param(0, 1).unwrap();
        let lp = gaussian_log_prob(&mut t, mean, 25.0, 25.0).unwrap();
        let norm = (25.0 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((t.scalar(lp).unwrap() + norm).abs() < 1e-14);
        assert_eq!(t.backward(lp).unwrap(), vec![0.0]);

        let mut t = Tape::with_params(&[0.0]);
        let mean = t.param(0, 1).unwrap();
        let lp = gaussian_log_prob(&mut t, mean, 25.0, 25.0).unwrap();
        assert!((t.scalar(lp).unwrap() - (-0.5 - norm)).abs() < 1e-14);
        assert!(gaussian_log_prob(&mut t, mean, 0.0, 1.0).is_err());
    }

    #[test]
    fn primitives_match_finite_differences() {
        let x0 = [0.3, -0.7, 1.1, 0.4];
        let build = |p: &[f64]| -> (Tape, NodeId) {
            let mut t = Tape::with_params(p);
            let a = t.param(0, 2).unwrap();
            let b = t.param(2, 2).unwrap();
            let m = t.mul(a, b).unwrap();
            let s = t.sub(m, b).unwrap();
            let th = t.tanh(s).unwrap();
            let e = t.exp(a).unwrap();
            let lg = t.offset(e, 1.0).unwrap();
            let lg = t.log(lg).unwrap();
            let r = t.relu(b).unwrap();
            let d = t.dot(th, lg).unwrap();
            let sc = t.scale(r, 0.5).unwrap();
            let su = t.sum(sc).unwrap();
            let ad = t.add(d, su).unwrap();
            let w = t.param(0, 4).unwrap();
            let mv = t.matvec(w, a, 2, 2).unwrap();
            let l = t.logsumexp(mv).unwrap();
            let i = t.index(mv, 1).unwrap();
            let out = t.add(ad, l).unwrap();
            let out = t.add(out, i).unwrap();
            (t, out)
        };
        let (t, out) = build(&x0);
        let g = t.backward(out).unwrap();
        let f = |p: &[f64]| {
            let (t, o) = build(p);
            t.scalar(o).unwrap()
        };
        close(&g, &fd_grad(f, &x0, 1e-6), 1e-6);
    }

    #[test]
    fn mlp_shapes_and_identity() {
        let p = MlpPolicy::new(vec![6, 128, 128, 1], Activation::Tanh, PolicyHead::Gaussian { sigma: 25.0 }).unwrap();
        assert_eq!(p.num_params(), 7 * 128 + 129 * 128 + 129);
        let s = MlpPolicy::new(vec![56, 64, 32, 5], Activation::Tanh, PolicyHead::Categorical).unwrap();
        assert_eq!(s.num_params(), 57 * 64 + 65 * 32 + 33 * 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = s.init_params(&mut rng);
        assert_eq!(s.forward(&params, &[0.1; 56]).unwrap().len(), 5);

        let id = MlpPolicy::new(vec![3, 3], Activation::Linear, PolicyHead::Categorical).unwrap();
        let mut w = vec![0.0; 12];
        for k in 0..3 {
            w[k * 3 + k] = 1.0;
        }
        assert_eq!(id.forward(&w, &[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn init_is_glorot_uniform_with_zero_bias() {
        let s = MlpPolicy::new(vec![4, 8, 2], Activation::Tanh, PolicyHead::Categorical).unwrap();
        let p = s.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let l1 = (6.0 / 12.0f64).sqrt();
        assert!(p[..32].iter().all(|w| w.abs() <= l1));
        assert!(p[32..40].iter().all(|&b| b == 0.0));
        assert!(p[56..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn mlp_tape_matches_plain_and_finite_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            let s = MlpPolicy::new(vec![3, 5, 4], act, PolicyHead::Categorical).unwrap();
            let params = s.init_params(&mut ChaCha8Rng::seed_from_u64(7));
            let input = [0.5, -1.0, 0.25];
            let mut t = Tape::with_params(&params);
            let out = s.forward_tape(&mut t, 0, &input).unwrap();
            assert_eq!(t.value(out), s.forward(&params, &input).unwrap().as_slice());

            let (lp, score) = s.log_prob_and_score(&params, &input, Action::Discrete(2)).unwrap();
            assert!((lp - s.log_prob(&params, &input, Action::Discrete(2)).unwrap()).abs() < 1e-14);
            let fd = fd_grad(|p| s.log_prob(p, &input, Action::Discrete(2)).unwrap(), &params, 1e-6);
            close(&score, &fd, 1e-6);
        }
        let g = MlpPolicy::new(vec![2, 4, 1], Activation::Tanh, PolicyHead::Gaussian { sigma: 2.0 }).unwrap();
        let params = g.init_params(&mut ChaCha8Rng::seed_from_u64(8));
        let (_, score) = g.log_prob_and_score(&params, &[1.0, 2.0], Action::Continuous(0.7)).unwrap();
        let fd = fd_grad(|p| g.log_prob(p, &[1.0, 2.0], Action::Continuous(0.7)).unwrap(), &params, 1e-6);
        close(&score, &fd, 1e-6);
    }

    #[test]
    fn gradients_add_over_objectives() {
        let s = MlpPolicy::new(vec![2, 3, 3], Activation::Tanh, PolicyHead::Categorical).unwrap();
        let params = s.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let (_, g0) = s.log_prob_and_score(&params, &[1.0, 0.0], Action::Discrete(0)).unwrap();
        let (_, g1) = s.log_prob_and_score(&params, &[0.0, 1.0], Action::Discrete(1)).unwrap();
        let mut t = Tape::with_params(&params);
        let o0 = s.forward_tape(&mut t, 0, &[1.0, 0.0]).unwrap();
        let l0 = categorical_log_prob(&mut t, o0, 0).unwrap();
        let o1 = s.forward_tape(&mut t, 0, &[0.0, 1.0]).unwrap();
        let l1 = categorical_log_prob(&mut t, o1, 1).unwrap();
        let sum = t.add(l0, l1).unwrap();
        let g = t.backward(sum).unwrap();
        close(&g, &g0.iter().zip(&g1).map(|(a, b)| a + b).collect::<Vec<_>>(), 1e-14);
    }

    #[test]
    fn deterministic_and_probabilities_normalized() {
        let s = MlpPolicy::new(vec![2, 3, 4], Activation::Tanh, PolicyHead::Categorical).unwrap();
        let params = s.init_params(&mut ChaCha8Rng::seed_from_u64(9));
        let a = s.log_prob_and_score(&params, &[0.3, 0.1], Action::Discrete(1)).unwrap();
        let b = s.log_prob_and_score(&params, &[0.3, 0.1], Action::Discrete(1)).unwrap();
        assert_eq!(a, b);
        let p = s.probabilities(&params, &[3.0, -1.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert!(s.sample(&params, &[0.0, 0.0], &mut rng).unwrap().discrete().unwrap() < 4);
        }
    }
}
