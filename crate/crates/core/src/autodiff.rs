//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value. Nodes with at least
//! one gradient-requiring input also keep the op and its input handles so that
//! [`Tape::backward`] can replay them in reverse. Because nodes are only ever
//! appended, tape order is a topological order.
//!
//! Matrix products are charged to the tape's current scope as multiply-accumulates.
//! Element-wise work such as softmax or normalization is charged as element-ops.
//! Compute accounting reads those counters back.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::cost::LayerCost;
use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_index_map, broadcast_shape, lanes, matmul_raw, transpose_raw, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Operation identifiers, without attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    Mean,
    Concat,
    Gather,
    RowMask,
    Softmax,
    LogSoftmax,
    Relu,
    Gelu,
    CrossEntropy,
    Broadcast,
    Transpose,
    Reshape,
    Sigmoid,
    Log,
    LayerNorm,
    ScatterRows,
    Pick,
    StraightThrough,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Concat,
        OpKind::Gather,
        OpKind::RowMask,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::CrossEntropy,
        OpKind::Broadcast,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Sigmoid,
        OpKind::Log,
        OpKind::LayerNorm,
        OpKind::ScatterRows,
        OpKind::Pick,
        OpKind::StraightThrough,
    ];

    pub fn id(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scalar-mul",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat",
            OpKind::Gather => "row-gather",
            OpKind::RowMask => "row-mask",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log-softmax",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::CrossEntropy => "cross-entropy",
            OpKind::Broadcast => "broadcast",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Log => "log",
            OpKind::LayerNorm => "layer-norm",
            OpKind::ScatterRows => "scatter-rows",
            OpKind::Pick => "pick",
            OpKind::StraightThrough => "straight-through",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// An operation together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    MatMul,
    /// Elementwise with numpy broadcasting.
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// `None` reduces to a scalar; an axis reduction keeps the axis with size 1.
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Concat { axis: usize },
    /// Rows along axis 0; indices may repeat.
    Gather { rows: Vec<usize> },
    /// Zeroes every row whose flag is false.
    RowMask { keep: Vec<bool> },
    /// `softmax(x / temperature)` along `axis`. Entries whose mask flag is false
    /// are treated as `-inf`: they get probability 0 and no gradient.
    Softmax {
        axis: usize,
        temperature: f64,
        mask: Option<Vec<bool>>,
    },
    LogSoftmax { axis: usize },
    Relu,
    /// Tanh approximation.
    Gelu,
    /// Mean cross-entropy of `[n, classes]` logits against class indices.
    CrossEntropy { targets: Vec<usize> },
    Broadcast { shape: Vec<usize> },
    Transpose,
    Reshape { shape: Vec<usize> },
    Sigmoid,
    Log,
    /// Normalizes the trailing axis to zero mean, unit variance.
    LayerNorm { eps: f64 },
    /// Adjoint of `Gather`: row `i` of the input is added into row `rows[i]`
    /// of an `n`-row zero tensor.
    ScatterRows { rows: Vec<usize>, n: usize },
    /// Picks flat positions into an `[len, 1]` column.
    Pick { positions: Vec<usize> },
    /// Forward value `forward + (softmax(z / temperature) - anchor)` along the
    /// trailing axis; backward is the softmax backward. With `anchor` equal to
    /// the current soft value the forward is exactly `forward`.
    StraightThrough {
        forward: Tensor,
        anchor: Tensor,
        temperature: f64,
        mask: Option<Vec<bool>>,
    },
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::MatMul => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Concat { .. } => OpKind::Concat,
            Op::Gather { .. } => OpKind::Gather,
            Op::RowMask { .. } => OpKind::RowMask,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::Relu => OpKind::Relu,
            Op::Gelu => OpKind::Gelu,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Broadcast { .. } => OpKind::Broadcast,
            Op::Transpose => OpKind::Transpose,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Log => OpKind::Log,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::ScatterRows { .. } => OpKind::ScatterRows,
            Op::Pick { .. } => OpKind::Pick,
            Op::StraightThrough { .. } => OpKind::StraightThrough,
        }
    }

    /// Builds an op from its id using default attributes (axis 0, temperature 1,
    /// no mask, `eps = 1e-5`, whole-tensor reductions). Ops whose attributes have
    /// no sensible default are rejected.
    pub fn from_id(id: &str) -> Result<Op> {
        let kind: OpKind = id.parse()?;
        Ok(match kind {
            OpKind::MatMul => Op::MatMul,
            OpKind::Add => Op::Add,
            OpKind::Sub => Op::Sub,
            OpKind::Mul => Op::Mul,
            OpKind::Sum => Op::Sum { axis: None },
            OpKind::Mean => Op::Mean { axis: None },
            OpKind::Concat => Op::Concat { axis: 0 },
            OpKind::Softmax => Op::Softmax {
                axis: 0,
                temperature: 1.0,
                mask: None,
            },
            OpKind::LogSoftmax => Op::LogSoftmax { axis: 0 },
            OpKind::Relu => Op::Relu,
            OpKind::Gelu => Op::Gelu,
            OpKind::Transpose => Op::Transpose,
            OpKind::Sigmoid => Op::Sigmoid,
            OpKind::Log => Op::Log,
            OpKind::LayerNorm => Op::LayerNorm { eps: 1e-5 },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "operation `{other}` needs explicit attributes"
                )))
            }
        })
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Op::MatMul | Op::Add | Op::Sub | Op::Mul => n == 2,
            Op::Concat { .. } => n >= 1,
            _ => n == 1,
        }
    }
}

struct Record {
    op: Op,
    inputs: Vec<Var>,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    record: Option<Record>,
}

/// A discrete choice made during a forward pass: the forward value used in place
/// of the soft relaxation, and the soft value it was chosen against.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub forward: Tensor,
    pub anchor: Tensor,
}

enum DecisionLog {
    Record(Vec<Decision>),
    Replay { entries: Vec<Decision>, cursor: usize },
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    scope: String,
    costs: BTreeMap<String, LayerCost>,
    decisions: DecisionLog,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            scope: String::new(),
            costs: BTreeMap::new(),
            decisions: DecisionLog::Record(Vec::new()),
        }
    }

    /// A tape that reuses previously recorded straight-through decisions, in
    /// order, instead of making new ones. Used to differentiate numerically
    /// through discrete choices with the choice held fixed.
    pub fn replaying(decisions: Vec<Decision>) -> Self {
        Self {
            decisions: DecisionLog::Replay {
                entries: decisions,
                cursor: 0,
            },
            ..Self::new()
        }
    }

    pub fn take_decisions(&mut self) -> Vec<Decision> {
        match std::mem::replace(&mut self.decisions, DecisionLog::Record(Vec::new())) {
            DecisionLog::Record(v) => v,
            DecisionLog::Replay { entries, .. } => entries,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Label charged for subsequent op costs.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn costs(&self) -> &BTreeMap<String, LayerCost> {
        &self.costs
    }

    pub fn take_costs(&mut self) -> BTreeMap<String, LayerCost> {
        std::mem::take(&mut self.costs)
    }

    pub fn total_cost(&self) -> LayerCost {
        self.costs.values().fold(LayerCost::default(), |a, b| a + *b)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, record: Option<Record>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            record,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Runs `op` on `inputs`, recording it for backward when any input requires
    /// a gradient.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if !op.arity_ok(inputs.len()) {
            return Err(Error::InvalidArgument(format!(
                "{} does not take {} inputs",
                op.kind(),
                inputs.len()
            )));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(&op, &values)?;
        if cfg!(debug_assertions) && !out.is_finite() {
            return Err(Error::NonFinite {
                op: op.kind().id(),
            });
        }
        let cost = op_cost(&op, &values, &out);
        if cost != LayerCost::default() {
            *self.costs.entry(self.scope.clone()).or_default() += cost;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = requires_grad.then(|| Record {
            op,
            inputs: inputs.to_vec(),
        });
        Ok(self.push(out, requires_grad, record))
    }

    /// Backpropagates from a one-element output. Gradients add onto whatever a
    /// previous call left behind; use [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let out_value = &self.nodes[output.0].value;
        if out_value.numel() != 1 {
            return Err(Error::NotScalar(out_value.shape().to_vec()));
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        pending[output.0] = Some(Tensor::ones(out_value.shape()));
        let nodes = &self.nodes;
        for i in (0..=output.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &nodes[i];
            if let Some(rec) = &node.record {
                let inputs: Vec<&Tensor> = rec.inputs.iter().map(|v| &nodes[v.0].value).collect();
                let needs: Vec<bool> = rec.inputs.iter().map(|v| nodes[v.0].requires_grad).collect();
                let input_grads = backward(&rec.op, &inputs, &node.value, &g, &needs);
                for (v, ig) in rec.inputs.iter().zip(input_grads) {
                    if let Some(ig) = ig {
                        match &mut pending[v.0] {
                            Some(acc) => acc.add_assign(&ig),
                            slot => *slot = Some(ig),
                        }
                    }
                }
            }
            if node.requires_grad {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Straight-through node over logits `z`. `choose` receives the logits and
    /// their masked softmax and returns the forward value; when replaying, the
    /// recorded decision is used instead. Returns the node and the exact forward
    /// value that was chosen.
    pub fn straight_through(
        &mut self,
        z: Var,
        temperature: f64,
        mask: Option<Vec<bool>>,
        choose: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<(Var, Tensor)> {
        let zt = &self.nodes[z.0].value;
        let axis = last_axis(zt)?;
        let soft = softmax_forward(zt, axis, temperature, mask.as_deref())?;
        let decision = match &mut self.decisions {
            DecisionLog::Replay { entries, cursor } => {
                let d = entries.get(*cursor).cloned().ok_or_else(|| {
                    Error::InvalidArgument("decision replay exhausted".into())
                })?;
                *cursor += 1;
                d
            }
            DecisionLog::Record(log) => {
                let forward = choose(zt, &soft)?;
                let d = Decision {
                    forward,
                    anchor: soft,
                };
                log.push(d.clone());
                d
            }
        };
        let forward = decision.forward.clone();
        let var = self.apply(
            Op::StraightThrough {
                forward: decision.forward,
                anchor: decision.anchor,
                temperature,
                mask,
            },
            &[z],
        )?;
        Ok((var, forward))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Op::Scale(s), &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum { axis: None }, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Sum { axis: Some(axis) }, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean { axis: None }, &[a])
    }
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Mean { axis: Some(axis) }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.apply(Op::Gather { rows: rows.to_vec() }, &[a])
    }
    pub fn row_mask(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        self.apply(Op::RowMask { keep: keep.to_vec() }, &[a])
    }
    pub fn softmax(&mut self, a: Var, axis: usize, temperature: f64) -> Result<Var> {
        self.apply(
            Op::Softmax {
                axis,
                temperature,
                mask: None,
            },
            &[a],
        )
    }
    pub fn masked_softmax(
        &mut self,
        a: Var,
        axis: usize,
        temperature: f64,
        mask: Vec<bool>,
    ) -> Result<Var> {
        self.apply(
            Op::Softmax {
                axis,
                temperature,
                mask: Some(mask),
            },
            &[a],
        )
    }
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::LogSoftmax { axis }, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.apply(
            Op::CrossEntropy {
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::Broadcast {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[a])
    }
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], n: usize) -> Result<Var> {
        self.apply(
            Op::ScatterRows {
                rows: rows.to_vec(),
                n,
            },
            &[a],
        )
    }
    pub fn pick(&mut self, a: Var, positions: &[usize]) -> Result<Var> {
        self.apply(
            Op::Pick {
                positions: positions.to_vec(),
            },
            &[a],
        )
    }
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn last_axis(t: &Tensor) -> Result<usize> {
    t.rank()
        .checked_sub(1)
        .ok_or_else(|| mismatch("softmax", "rank-0 input has no axis".into()))
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(mismatch(
            op,
            format!("axis {axis} out of range for shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => Vec::new(),
        Some(a) => {
            let mut s = shape.to_vec();
            s[a] = 1;
            s
        }
    }
}

fn sum_reduce(x: &Tensor, axis: Option<usize>) -> Tensor {
    match axis {
        None => Tensor::scalar(x.sum()),
        Some(a) => {
            let (outer, len, inner) = lanes(x.shape(), a);
            let mut out = vec![0.0; outer * inner];
            let d = x.data();
            for o in 0..outer {
                for i in 0..len {
                    for n in 0..inner {
                        out[o * inner + n] += d[(o * len + i) * inner + n];
                    }
                }
            }
            Tensor::new(reduced_shape(x.shape(), axis), out).expect("reduced shape")
        }
    }
}

/// Sums `g` (shaped like the broadcast output) back down to `shape`.
fn unbroadcast(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let map = broadcast_index_map(shape, g.shape());
    let mut out = Tensor::zeros(shape);
    let o = out.data_mut();
    for (k, &src) in map.iter().enumerate() {
        o[src] += g.data()[k];
    }
    out
}

fn elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())))?;
    let ma = broadcast_index_map(a.shape(), &shape);
    let mb = broadcast_index_map(b.shape(), &shape);
    let data = ma
        .iter()
        .zip(&mb)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Tensor::new(shape, data)
}

pub(crate) fn softmax_forward(
    x: &Tensor,
    axis: usize,
    temperature: f64,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    check_axis("softmax", x, axis)?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return Err(mismatch(
                "softmax",
                format!("mask of {} for shape {:?}", m.len(), x.shape()),
            ));
        }
    }
    let alive = |k: usize| mask.is_none_or(|m| m[k]);
    let (outer, len, inner) = lanes(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for n in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + n;
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                if alive(idx(i)) {
                    max = max.max(d[idx(i)]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument(
                    "softmax lane has every entry masked".into(),
                ));
            }
            let mut total = 0.0;
            for i in 0..len {
                if alive(idx(i)) {
                    let e = ((d[idx(i)] - max) / temperature).exp();
                    out[idx(i)] = e;
                    total += e;
                }
            }
            for i in 0..len {
                out[idx(i)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `dx = s * (g - <g, s>) / temperature` per lane.
pub(crate) fn softmax_backward(s: &Tensor, g: &Tensor, axis: usize, temperature: f64) -> Tensor {
    let (outer, len, inner) = lanes(s.shape(), axis);
    let (sd, gd) = (s.data(), g.data());
    let mut out = vec![0.0; sd.len()];
    for o in 0..outer {
        for n in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + n;
            let dot: f64 = (0..len).map(|i| gd[idx(i)] * sd[idx(i)]).sum();
            for i in 0..len {
                out[idx(i)] = sd[idx(i)] * (gd[idx(i)] - dot) / temperature;
            }
        }
    }
    Tensor::new(s.shape().to_vec(), out).expect("same shape")
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn forward(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    let a = x[0];
    match op {
        Op::MatMul => a.matmul(x[1]),
        Op::Add => elementwise("add", a, x[1], |p, q| p + q),
        Op::Sub => elementwise("sub", a, x[1], |p, q| p - q),
        Op::Mul => elementwise("mul", a, x[1], |p, q| p * q),
        Op::Scale(s) => Ok(a.map(|v| v * s)),
        Op::Sum { axis } => {
            if let Some(ax) = axis {
                check_axis("sum", a, *ax)?;
            }
            Ok(sum_reduce(a, *axis))
        }
        Op::Mean { axis } => {
            let count = match axis {
                Some(ax) => {
                    check_axis("mean", a, *ax)?;
                    a.shape()[*ax]
                }
                None => a.numel(),
            } as f64;
            Ok(sum_reduce(a, *axis).map(|v| v / count))
        }
        Op::Concat { axis } => {
            let axis = *axis;
            check_axis("concat", a, axis)?;
            let mut shape = a.shape().to_vec();
            shape[axis] = 0;
            for t in x {
                let ok = t.rank() == a.rank()
                    && (0..a.rank()).all(|d| d == axis || t.shape()[d] == a.shape()[d]);
                if !ok {
                    return Err(mismatch(
                        "concat",
                        format!("{:?} vs {:?} along axis {axis}", a.shape(), t.shape()),
                    ));
                }
                shape[axis] += t.shape()[axis];
            }
            let (outer, _, inner) = lanes(a.shape(), axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in x {
                    let block = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::new(shape, data)
        }
        Op::Gather { rows } => {
            if a.rank() == 0 || rows.is_empty() || rows.iter().any(|&r| r >= a.shape()[0]) {
                return Err(mismatch(
                    "row-gather",
                    format!("rows {rows:?} from shape {:?}", a.shape()),
                ));
            }
            let mut shape = a.shape().to_vec();
            shape[0] = rows.len();
            let mut data = Vec::with_capacity(shape.iter().product());
            for &r in rows {
                data.extend_from_slice(a.row_slice(r));
            }
            Tensor::new(shape, data)
        }
        Op::RowMask { keep } => {
            if a.rank() == 0 || keep.len() != a.shape()[0] {
                return Err(mismatch(
                    "row-mask",
                    format!("{} flags for shape {:?}", keep.len(), a.shape()),
                ));
            }
            let w = a.numel() / a.shape()[0];
            let mut out = a.clone();
            for (r, &k) in keep.iter().enumerate() {
                if !k {
                    out.data_mut()[r * w..(r + 1) * w].fill(0.0);
                }
            }
            Ok(out)
        }
        Op::Softmax {
            axis,
            temperature,
            mask,
        } => softmax_forward(a, *axis, *temperature, mask.as_deref()),
        Op::LogSoftmax { axis } => {
            check_axis("log-softmax", a, *axis)?;
            let (outer, len, inner) = lanes(a.shape(), *axis);
            let d = a.data();
            let mut out = vec![0.0; d.len()];
            for o in 0..outer {
                for n in 0..inner {
                    let idx = |i: usize| (o * len + i) * inner + n;
                    let max = (0..len).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + (0..len).map(|i| (d[idx(i)] - max).exp()).sum::<f64>().ln();
                    for i in 0..len {
                        out[idx(i)] = d[idx(i)] - lse;
                    }
                }
            }
            Tensor::new(a.shape().to_vec(), out)
        }
        Op::Relu => Ok(a.map(|v| v.max(0.0))),
        Op::Gelu => Ok(a.map(gelu)),
        Op::CrossEntropy { targets } => {
            if a.rank() != 2 || targets.len() != a.shape()[0] {
                return Err(mismatch(
                    "cross-entropy",
                    format!("{} targets for logits {:?}", targets.len(), a.shape()),
                ));
            }
            let classes = a.shape()[1];
            if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
                return Err(Error::InvalidArgument(format!(
                    "target class {t} out of range for {classes} classes"
                )));
            }
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = a.row_slice(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            Ok(Tensor::scalar(total / targets.len() as f64))
        }
        Op::Broadcast { shape } => {
            if broadcast_shape(a.shape(), shape).as_deref() != Some(shape.as_slice()) {
                return Err(mismatch(
                    "broadcast",
                    format!("{:?} to {shape:?}", a.shape()),
                ));
            }
            let map = broadcast_index_map(a.shape(), shape);
            Tensor::new(shape.clone(), map.iter().map(|&i| a.data()[i]).collect())
        }
        Op::Transpose => a.transpose(),
        Op::Reshape { shape } => a.reshaped(shape).map_err(|_| {
            mismatch("reshape", format!("{:?} to {shape:?}", a.shape()))
        }),
        Op::Sigmoid => Ok(a.map(sigmoid)),
        Op::Log => Ok(a.map(f64::ln)),
        Op::LayerNorm { eps } => {
            let w = a.cols();
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(w) {
                let (mean, rstd) = layer_norm_stats(row, *eps);
                row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
            }
            Ok(out)
        }
        Op::ScatterRows { rows, n } => {
            if a.rank() == 0 || rows.len() != a.shape()[0] || rows.iter().any(|&r| r >= *n) {
                return Err(mismatch(
                    "scatter-rows",
                    format!("rows {rows:?} of shape {:?} into {n}", a.shape()),
                ));
            }
            let mut shape = a.shape().to_vec();
            shape[0] = *n;
            let w = a.numel() / rows.len();
            let mut out = Tensor::zeros(&shape);
            for (i, &r) in rows.iter().enumerate() {
                for (o, v) in out.data_mut()[r * w..(r + 1) * w].iter_mut().zip(a.row_slice(i)) {
                    *o += v;
                }
            }
            Ok(out)
        }
        Op::Pick { positions } => {
            if positions.is_empty() || positions.iter().any(|&p| p >= a.numel()) {
                return Err(mismatch(
                    "pick",
                    format!("positions {positions:?} from {} values", a.numel()),
                ));
            }
            Ok(Tensor::column(
                &positions.iter().map(|&p| a.data()[p]).collect::<Vec<_>>(),
            ))
        }
        Op::StraightThrough {
            forward,
            anchor,
            temperature,
            mask,
        } => {
            if forward.shape() != a.shape() || anchor.shape() != a.shape() {
                return Err(mismatch(
                    "straight-through",
                    format!(
                        "forward {:?}, anchor {:?}, logits {:?}",
                        forward.shape(),
                        anchor.shape(),
                        a.shape()
                    ),
                ));
            }
            let soft = softmax_forward(a, last_axis(a)?, *temperature, mask.as_deref())?;
            let data = forward
                .data()
                .iter()
                .zip(soft.data())
                .zip(anchor.data())
                .map(|((&f, &s), &an)| f + (s - an))
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
    }
}

fn op_cost(op: &Op, x: &[&Tensor], out: &Tensor) -> LayerCost {
    let numel = out.numel() as u64;
    match op {
        Op::MatMul => {
            let (m, k) = (x[0].shape()[0] as u64, x[0].shape()[1] as u64);
            let n = x[1].shape()[1] as u64;
            LayerCost {
                macs: m * k * n,
                elem_ops: 0,
            }
        }
        Op::Softmax { .. }
        | Op::LogSoftmax { .. }
        | Op::LayerNorm { .. }
        | Op::Gelu
        | Op::Relu
        | Op::Sigmoid
        | Op::StraightThrough { .. } => LayerCost {
            macs: 0,
            elem_ops: numel,
        },
        Op::CrossEntropy { .. } => LayerCost {
            macs: 0,
            elem_ops: x[0].numel() as u64,
        },
        _ => LayerCost::default(),
    }
}

fn backward(op: &Op, x: &[&Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let a = x[0];
    let one = |t: Tensor| vec![Some(t)];
    match op {
        Op::MatMul => {
            let b = x[1];
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = needs[0].then(|| {
                let bt = transpose_raw(b.data(), k, n);
                Tensor::new(vec![m, k], matmul_raw(g.data(), &bt, m, n, k)).expect("shape")
            });
            let gb = needs[1].then(|| {
                let at = transpose_raw(a.data(), m, k);
                Tensor::new(vec![k, n], matmul_raw(&at, g.data(), k, m, n)).expect("shape")
            });
            vec![ga, gb]
        }
        Op::Add => vec![
            needs[0].then(|| unbroadcast(g, a.shape())),
            needs[1].then(|| unbroadcast(g, x[1].shape())),
        ],
        Op::Sub => vec![
            needs[0].then(|| unbroadcast(g, a.shape())),
            needs[1].then(|| unbroadcast(&g.map(|v| -v), x[1].shape())),
        ],
        Op::Mul => {
            let b = x[1];
            let ga = needs[0].then(|| {
                unbroadcast(&elementwise("mul", g, b, |p, q| p * q).expect("broadcast"), a.shape())
            });
            let gb = needs[1].then(|| {
                unbroadcast(&elementwise("mul", g, a, |p, q| p * q).expect("broadcast"), b.shape())
            });
            vec![ga, gb]
        }
        Op::Scale(s) => one(g.map(|v| v * s)),
        Op::Sum { .. } => one(unbroadcast_expand(g, a.shape(), 1.0)),
        Op::Mean { axis } => {
            let count = match axis {
                Some(ax) => a.shape()[*ax],
                None => a.numel(),
            } as f64;
            one(unbroadcast_expand(g, a.shape(), 1.0 / count))
        }
        Op::Concat { axis } => {
            let (outer, _, inner) = lanes(a.shape(), *axis);
            let total_block: usize = x.iter().map(|t| t.shape()[*axis] * inner).sum();
            let mut offset = 0;
            x.iter()
                .enumerate()
                .map(|(i, t)| {
                    let block = t.shape()[*axis] * inner;
                    let res = needs[i].then(|| {
                        let mut data = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let start = o * total_block + offset;
                            data.extend_from_slice(&g.data()[start..start + block]);
                        }
                        Tensor::new(t.shape().to_vec(), data).expect("shape")
                    });
                    offset += block;
                    res
                })
                .collect()
        }
        Op::Gather { rows } => {
            let w = a.numel() / a.shape()[0];
            let mut ga = Tensor::zeros(a.shape());
            for (i, &r) in rows.iter().enumerate() {
                for (o, v) in ga.data_mut()[r * w..(r + 1) * w].iter_mut().zip(g.row_slice(i)) {
                    *o += v;
                }
            }
            one(ga)
        }
        Op::RowMask { keep } => {
            let w = a.numel() / a.shape()[0];
            let mut ga = g.clone();
            for (r, &k) in keep.iter().enumerate() {
                if !k {
                    ga.data_mut()[r * w..(r + 1) * w].fill(0.0);
                }
            }
            one(ga)
        }
        Op::Softmax {
            axis, temperature, ..
        } => one(softmax_backward(out, g, *axis, *temperature)),
        Op::LogSoftmax { axis } => {
            let (outer, len, inner) = lanes(a.shape(), *axis);
            let (yd, gd) = (out.data(), g.data());
            let mut res = vec![0.0; yd.len()];
            for o in 0..outer {
                for n in 0..inner {
                    let idx = |i: usize| (o * len + i) * inner + n;
                    let gsum: f64 = (0..len).map(|i| gd[idx(i)]).sum();
                    for i in 0..len {
                        res[idx(i)] = gd[idx(i)] - yd[idx(i)].exp() * gsum;
                    }
                }
            }
            one(Tensor::new(a.shape().to_vec(), res).expect("shape"))
        }
        Op::Relu => one(zip_map(a, g, |x, g| if x > 0.0 { g } else { 0.0 })),
        Op::Gelu => one(zip_map(a, g, |x, g| g * gelu_grad(x))),
        Op::CrossEntropy { targets } => {
            let scale = g.data()[0] / targets.len() as f64;
            let mut ga = Tensor::zeros(a.shape());
            let classes = a.shape()[1];
            for (r, &t) in targets.iter().enumerate() {
                let row = a.row_slice(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let dst = &mut ga.data_mut()[r * classes..(r + 1) * classes];
                for (c, d) in dst.iter_mut().enumerate() {
                    let p = (row[c] - max).exp() / total;
                    *d = scale * (p - if c == t { 1.0 } else { 0.0 });
                }
            }
            one(ga)
        }
        Op::Broadcast { .. } => one(unbroadcast(g, a.shape())),
        Op::Transpose => one(g.transpose().expect("rank 2")),
        Op::Reshape { .. } => one(g.reshaped(a.shape()).expect("same numel")),
        Op::Sigmoid => one(zip_map(out, g, |s, g| g * s * (1.0 - s))),
        Op::Log => one(zip_map(a, g, |x, g| g / x)),
        Op::LayerNorm { eps } => {
            let w = a.cols();
            let mut ga = Tensor::zeros(a.shape());
            for ((xr, gr), dst) in a
                .data()
                .chunks(w)
                .zip(g.data().chunks(w))
                .zip(ga.data_mut().chunks_mut(w))
            {
                let (mean, rstd) = layer_norm_stats(xr, *eps);
                let n = w as f64;
                let gmean = gr.iter().sum::<f64>() / n;
                let gy_mean = xr
                    .iter()
                    .zip(gr)
                    .map(|(xv, gv)| (xv - mean) * rstd * gv)
                    .sum::<f64>()
                    / n;
                for ((d, xv), gv) in dst.iter_mut().zip(xr).zip(gr) {
                    let y = (xv - mean) * rstd;
                    *d = rstd * (gv - gmean - y * gy_mean);
                }
            }
            one(ga)
        }
        Op::ScatterRows { rows, .. } => {
            let mut shape = g.shape().to_vec();
            shape[0] = rows.len();
            let mut data = Vec::with_capacity(a.numel());
            for &r in rows {
                data.extend_from_slice(g.row_slice(r));
            }
            one(Tensor::new(shape, data).expect("shape"))
        }
        Op::Pick { positions } => {
            let mut ga = Tensor::zeros(a.shape());
            for (i, &p) in positions.iter().enumerate() {
                ga.data_mut()[p] += g.data()[i];
            }
            one(ga)
        }
        Op::StraightThrough {
            temperature, mask, ..
        } => {
            let axis = a.rank() - 1;
            let soft = softmax_forward(a, axis, *temperature, mask.as_deref()).expect("checked in forward");
            one(softmax_backward(&soft, g, axis, *temperature))
        }
    }
}

/// Expands a reduced gradient back to `shape`, scaled.
fn unbroadcast_expand(g: &Tensor, shape: &[usize], scale: f64) -> Tensor {
    let map = broadcast_index_map(g.shape(), shape);
    Tensor::new(shape.to_vec(), map.iter().map(|&i| g.data()[i] * scale).collect())
        .expect("shape")
}

fn zip_map(a: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(g.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape_rule() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 4]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 4]);
        let err = tape.matmul(b, a).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[3, 4]"), "{err}");
    }

    #[test]
    fn uniform_softmax_and_cross_entropy() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[0.0, 0.0, 0.0]));
        let s = tape.softmax(x, 1, 1.0).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let logits = tape.constant(Tensor::row(&[0.0, 0.0]));
        let ce = tape.cross_entropy(logits, &[0]).unwrap();
        assert!((tape.value(ce).item().unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn unknown_op_ids() {
        assert!(matches!("conv2d".parse::<OpKind>(), Err(Error::UnknownOp(_))));
        assert!(Op::from_id("nope").is_err());
        for k in OpKind::ALL {
            assert_eq!(k.id().parse::<OpKind>().unwrap(), k);
        }
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum(sq).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn two_paths_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, -2.0]), true);
        let y = tape.scale(x, 3.0).unwrap();
        let z = tape.mul(x, x).unwrap();
        let s = tape.add(y, z).unwrap();
        let out = tape.sum(s).unwrap();
        tape.backward(out).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0 + 2.0, 3.0 - 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]), true);
        let y = tape.sum(x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let mut empty = Tape::new();
        assert_eq!(
            empty.backward(Var(0)).unwrap_err(),
            Error::EmptyTape
        );
    }

    #[test]
    fn gather_routes_gradient_to_gathered_rows_only() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]), true);
        let g = tape.gather_rows(x, &[2, 2, 0]).unwrap();
        let s = tape.sum(g).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn row_mask_then_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]), true);
        let m = tape.row_mask(x, &[true, false, true]).unwrap();
        let s = tape.sum(m).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 1. + 2. + 5. + 6.);
    }

    #[test]
    fn masked_softmax_ignores_dead_entries() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[5.0, 0.0, 0.0]), true);
        let s = tape
            .masked_softmax(x, 1, 1.0, vec![false, true, true])
            .unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 0.5, 0.5]);
        let all_dead = tape.masked_softmax(x, 1, 1.0, vec![false; 3]);
        assert!(all_dead.is_err());
    }

    #[test]
    fn concat_and_scatter_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[5., 6.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 5., 3., 4., 6.]);
        let s = tape.scatter_rows(a, &[2, 0], 3).unwrap();
        assert_eq!(tape.value(s).data(), &[3., 4., 0., 0., 1., 2.]);
    }

    #[test]
    fn costs_charged_to_scope() {
        let mut tape = Tape::new();
        tape.set_scope("lin");
        let a = tape.constant(Tensor::zeros(&[1, 4]));
        let w = tape.constant(Tensor::zeros(&[4, 3]));
        let y = tape.matmul(a, w).unwrap();
        tape.set_scope("act");
        tape.gelu(y).unwrap();
        assert_eq!(tape.costs()["lin"].macs, 12);
        assert_eq!(tape.costs()["act"].elem_ops, 3);
    }

    #[test]
    fn straight_through_forward_is_exact() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::row(&[0.3, 1.7, -0.2]), true);
        let (v, fwd) = tape
            .straight_through(z, 0.7, None, |_, _| Ok(Tensor::row(&[0.0, 1.0, 0.0])))
            .unwrap();
        assert_eq!(tape.value(v), &fwd);
        assert_eq!(tape.take_decisions().len(), 1);
    }

    #[test]
    fn gelu_constant() {
        assert!((gelu(1.0) - 0.841_191_990_607_477_2).abs() < 1e-12);
        assert_eq!(gelu(0.0), 0.0);
    }
}
