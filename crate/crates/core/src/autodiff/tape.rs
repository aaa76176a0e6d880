use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, axis_split};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Handle to a junction (split-and-merge region) declared on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct JunctionId(pub(crate) usize);

impl JunctionId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
    Sqrt,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary {
        kind: Binary,
        lhs: usize,
        rhs: usize,
    },
    Scale(usize, f64),
    Offset(usize),
    Unary(usize, Unary),
    Softmax(usize),
    LogSoftmax(usize),
    Concat {
        parents: Vec<usize>,
        axis: usize,
    },
    Slice {
        parent: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Expand(usize),
    SumAll(usize),
    SumAxis(usize, usize),
    LogSumExp(usize, usize),
    Mask(usize, Vec<f64>),
    BatchNorm {
        parent: usize,
        inv_std: Vec<f64>,
    },
    Split {
        parent: usize,
        junction: usize,
        input: usize,
        head: usize,
        member: usize,
    },
    HeadScale {
        parent: usize,
        beta: f64,
    },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![*a, *b],
            Op::Binary { lhs, rhs, .. } => vec![*lhs, *rhs],
            Op::Concat { parents, .. } => parents.clone(),
            Op::Scale(p, _)
            | Op::Offset(p)
            | Op::Unary(p, _)
            | Op::Softmax(p)
            | Op::LogSoftmax(p)
            | Op::Slice { parent: p, .. }
            | Op::Reshape(p)
            | Op::Expand(p)
            | Op::SumAll(p)
            | Op::SumAxis(p, _)
            | Op::LogSumExp(p, _)
            | Op::Mask(p, _)
            | Op::BatchNorm { parent: p, .. }
            | Op::Split { parent: p, .. }
            | Op::HeadScale { parent: p, .. } => vec![*p],
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Static description of a junction, handed to the resolver at backward time.
#[derive(Clone, Debug)]
pub struct JunctionInfo {
    pub label: String,
    pub head_labels: Vec<String>,
    pub betas: Vec<f64>,
    /// Number of member tensors per shared input.
    pub input_sizes: Vec<usize>,
}

/// Turns the per-head gradient rows of one junction input into the rows whose
/// sum is propagated upstream.
pub trait JunctionResolver {
    fn resolve(&mut self, junction: &JunctionInfo, input: usize, rows: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>>;
}

/// Plain chain rule: rows pass through unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct PassThrough;

impl JunctionResolver for PassThrough {
    fn resolve(&mut self, _: &JunctionInfo, _: usize, rows: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        Ok(rows)
    }
}

struct Junction {
    info: JunctionInfo,
    inputs: Vec<Vec<usize>>,
    // [input][head] -> split nodes, one per member
    splits: Vec<Vec<Option<Vec<usize>>>>,
    outputs: Vec<Option<usize>>,
    closed: bool,
}

/// Define-by-run reverse-mode tape.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    rng: ChaCha8Rng,
    training: bool,
    consumed: bool,
    params: IndexMap<String, Var>,
    junctions: Vec<Junction>,
}

/// Result of a backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: IndexMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. any recorded node, if it received one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> IndexMap<String, Tensor> {
        self.params
    }

    /// Sum of squared entries over all parameter gradients.
    pub fn squared_norm(&self) -> f64 {
        self.params.values().flat_map(|t| t.data()).map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

impl Tape {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            training: true,
            consumed: false,
            params: IndexMap::new(),
            junctions: Vec::new(),
        }
    }

    /// Switches dropout and batch statistics between train and eval behavior.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            op => op.parents().iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Loads a named parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        let v = self.leaf(p.value.clone(), p.requires_grad);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Node handle of a parameter already loaded on this tape.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Same values, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.leaf(value, false)
    }

    // ---- junctions -------------------------------------------------------

    /// Opens a junction over shared inputs (each a group of member nodes)
    /// feeding `head_labels.len()` heads with rescaling factors `betas`.
    pub fn open_junction(
        &mut self,
        label: impl Into<String>,
        inputs: Vec<Vec<Var>>,
        head_labels: Vec<String>,
        betas: Vec<f64>,
    ) -> Result<JunctionId> {
        let label = label.into();
        let fail = |detail: String| Error::Block {
            block: label.clone(),
            detail,
        };
        if head_labels.is_empty() {
            return Err(fail("a junction needs at least one head".into()));
        }
        if head_labels.len() != betas.len() {
            return Err(fail(format!("{} heads but {} betas", head_labels.len(), betas.len())));
        }
        if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(fail(format!("head weight {b} is not strictly positive")));
        }
        if inputs.is_empty() || inputs.iter().any(Vec::is_empty) {
            return Err(fail("every shared input needs at least one member".into()));
        }
        for group in &inputs {
            for m in group {
                if m.0 >= self.nodes.len() {
                    return Err(fail(format!("input node {} is not on this tape", m.0)));
                }
            }
        }
        let heads = head_labels.len();
        let junction = Junction {
            info: JunctionInfo {
                label,
                head_labels,
                betas,
                input_sizes: inputs.iter().map(Vec::len).collect(),
            },
            splits: vec![vec![None; heads]; inputs.len()],
            inputs: inputs.into_iter().map(|g| g.into_iter().map(|v| v.0).collect()).collect(),
            outputs: vec![None; heads],
            closed: false,
        };
        self.junctions.push(junction);
        Ok(JunctionId(self.junctions.len() - 1))
    }

    fn open(&self, j: JunctionId) -> Result<&Junction> {
        let junction = self
            .junctions
            .get(j.0)
            .ok_or_else(|| Error::invalid(format!("unknown junction {}", j.0)))?;
        if junction.closed {
            return Err(Error::Block {
                block: junction.info.label.clone(),
                detail: "junction already closed".into(),
            });
        }
        Ok(junction)
    }

    /// Head-private copies of the members of shared input `input`.
    pub fn junction_input(&mut self, j: JunctionId, input: usize, head: usize) -> Result<Vec<Var>> {
        let junction = self.open(j)?;
        if input >= junction.inputs.len() || head >= junction.outputs.len() {
            return Err(Error::Block {
                block: junction.info.label.clone(),
                detail: format!("no input {input} / head {head}"),
            });
        }
        if let Some(existing) = &junction.splits[input][head] {
            return Ok(existing.iter().map(|&i| Var(i)).collect());
        }
        let members = junction.inputs[input].clone();
        let mut out = Vec::with_capacity(members.len());
        for (member, &src) in members.iter().enumerate() {
            let value = self.nodes[src].value.clone();
            let v = self.push(
                value,
                Op::Split {
                    parent: src,
                    junction: j.0,
                    input,
                    head,
                    member,
                },
            );
            out.push(v.0);
        }
        self.junctions[j.0].splits[input][head] = Some(out.clone());
        Ok(out.into_iter().map(Var).collect())
    }

    /// Declares the output of head `head`; the returned node carries the
    /// head's gradient rescaling.
    pub fn junction_output(&mut self, j: JunctionId, head: usize, x: Var) -> Result<Var> {
        let junction = self.open(j)?;
        if head >= junction.outputs.len() {
            return Err(Error::Block {
                block: junction.info.label.clone(),
                detail: format!("no head {head}"),
            });
        }
        if junction.outputs[head].is_some() {
            return Err(Error::Block {
                block: junction.info.label.clone(),
                detail: format!("head {head} output declared twice"),
            });
        }
        let beta = junction.info.betas[head];
        let value = self.nodes[x.0].value.clone();
        let v = self.push(value, Op::HeadScale { parent: x.0, beta });
        self.junctions[j.0].outputs[head] = Some(v.0);
        Ok(v)
    }

    /// Validates the split-and-merge structure and seals the junction.
    pub fn close_junction(&mut self, j: JunctionId) -> Result<()> {
        let junction = self.open(j)?;
        let fail = |detail: String| Error::Block {
            block: junction.info.label.clone(),
            detail,
        };
        let members: HashMap<usize, usize> = junction
            .inputs
            .iter()
            .enumerate()
            .flat_map(|(m, g)| g.iter().map(move |&id| (id, m)))
            .collect();
        for (head, out) in junction.outputs.iter().enumerate() {
            let out = out.ok_or_else(|| fail(format!("head {head} has no declared output")))?;
            let mut consumed = vec![false; junction.inputs.len()];
            let mut seen = vec![false; out + 1];
            let mut stack = vec![out];
            while let Some(id) = stack.pop() {
                if seen[id] {
                    continue;
                }
                seen[id] = true;
                if let Some(&m) = members.get(&id) {
                    return Err(fail(format!(
                        "head {head} reaches shared input {m} without passing through the junction"
                    )));
                }
                match &self.nodes[id].op {
                    Op::Split {
                        junction: sj,
                        input,
                        head: sh,
                        ..
                    } => {
                        if *sj == j.0 {
                            if *sh != head {
                                return Err(fail(format!("head {head} consumes the copy owned by head {sh}")));
                            }
                            consumed[*input] = true;
                        }
                    }
                    op => stack.extend(op.parents().into_iter().filter(|&p| self.nodes[p].requires_grad)),
                }
            }
            if let Some(m) = consumed.iter().position(|c| !c) {
                return Err(fail(format!("head {head} does not consume shared input {m}")));
            }
        }
        self.junctions[j.0].closed = true;
        Ok(())
    }

    pub fn junction_count(&self) -> usize {
        self.junctions.len()
    }

    pub fn junction_info(&self, j: JunctionId) -> &JunctionInfo {
        &self.junctions[j.0].info
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss with plain chain-rule junctions.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.backward_with(loss, &mut PassThrough)
    }

    /// Reverse sweep; at every junction input the per-head gradient stack is
    /// handed to `resolver` and the row-sum of its answer is propagated.
    pub fn backward_with(&mut self, loss: Var, resolver: &mut dyn JunctionResolver) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::invalid(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", lv.item())));
        }
        if let Some(open) = self.junctions.iter().find(|j| !j.closed) {
            return Err(Error::Block {
                block: open.info.label.clone(),
                detail: "backward called on an unclosed junction".into(),
            });
        }
        self.consumed = true;

        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        // trigger node -> (junction, input)
        let mut triggers: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
        let mut stash: Vec<Vec<Vec<Vec<Option<Tensor>>>>> = Vec::with_capacity(self.junctions.len());
        for (ji, j) in self.junctions.iter().enumerate() {
            for (m, group) in j.inputs.iter().enumerate() {
                let top = *group.iter().max().expect("non-empty group");
                triggers.entry(top).or_default().push((ji, m));
            }
            stash.push(
                j.inputs
                    .iter()
                    .map(|g| vec![vec![None; g.len()]; j.outputs.len()])
                    .collect(),
            );
        }

        for id in (0..n).rev() {
            if let Some(list) = triggers.get(&id) {
                for &(ji, m) in list {
                    self.resolve_input(ji, m, &mut stash[ji][m], &mut grads, resolver)?;
                }
            }
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                if let Op::Split {
                    junction,
                    input,
                    head,
                    member,
                    ..
                } = self.nodes[id].op
                {
                    accumulate(&mut stash[junction][input][head][member], &g);
                } else {
                    self.propagate(id, &g, &mut grads)?;
                }
            }
            grads[id] = Some(g);
        }

        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(name, v)| {
                let g = grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn resolve_input(
        &self,
        ji: usize,
        m: usize,
        stash: &mut [Vec<Option<Tensor>>],
        grads: &mut [Option<Tensor>],
        resolver: &mut dyn JunctionResolver,
    ) -> Result<()> {
        if stash.iter().all(|h| h.iter().all(Option::is_none)) {
            return Ok(());
        }
        let junction = &self.junctions[ji];
        let members = &junction.inputs[m];
        let sizes: Vec<usize> = members.iter().map(|&id| self.nodes[id].value.len()).collect();
        let width: usize = sizes.iter().sum();
        let rows: Vec<Vec<f64>> = stash
            .iter_mut()
            .map(|head| {
                let mut row = Vec::with_capacity(width);
                for (slot, &size) in head.iter_mut().zip(&sizes) {
                    match slot.take() {
                        Some(t) => row.extend_from_slice(t.data()),
                        None => row.extend(std::iter::repeat_n(0.0, size)),
                    }
                }
                row
            })
            .collect();
        let heads = rows.len();
        let wrap = |e: Error| Error::Resolver {
            block: junction.info.label.clone(),
            input: m,
            source: Box::new(e),
        };
        let resolved = resolver.resolve(&junction.info, m, rows).map_err(wrap)?;
        if resolved.len() != heads || resolved.iter().any(|r| r.len() != width) {
            return Err(wrap(Error::invalid(format!(
                "resolver returned a stack of the wrong shape (expected {heads}x{width})"
            ))));
        }
        let mut total = vec![0.0; width];
        for row in &resolved {
            for (t, v) in total.iter_mut().zip(row) {
                *t += v;
            }
        }
        let mut offset = 0;
        for (&id, &size) in members.iter().zip(&sizes) {
            if self.nodes[id].requires_grad {
                let slot = grad_slot(grads, &self.nodes, id);
                for (s, v) in slot.iter_mut().zip(&total[offset..offset + size]) {
                    *s += v;
                }
            }
            offset += size;
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        let nodes = &self.nodes;
        let wants = |p: usize| nodes[p].requires_grad;
        match &node.op {
            Op::Leaf | Op::Split { .. } => {}
            Op::MatMul(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let (k, m) = (bv.shape()[0], bv.shape()[1]);
                let rows = av.len() / k;
                if wants(*a) {
                    let slot = grad_slot(grads, nodes, *a);
                    kernels::gemm_a_bt(rows, m, k, gd, bv.data(), slot, true);
                }
                if wants(*b) {
                    let slot = grad_slot(grads, nodes, *b);
                    kernels::gemm_at_b(k, rows, m, av.data(), gd, slot, true);
                }
            }
            Op::Binary { kind, lhs, rhs } => {
                let a = nodes[*lhs].value.data();
                let b = nodes[*rhs].value.data();
                let (na, nb) = (a.len(), b.len());
                if wants(*lhs) {
                    let slot = grad_slot(grads, nodes, *lhs);
                    for (i, gi) in gd.iter().enumerate() {
                        let (ai, bi) = (i % na, i % nb);
                        slot[ai] += match kind {
                            Binary::Add | Binary::Sub => *gi,
                            Binary::Mul => gi * b[bi],
                            Binary::Div => gi / b[bi],
                        };
                    }
                }
                if wants(*rhs) {
                    let slot = grad_slot(grads, nodes, *rhs);
                    for (i, gi) in gd.iter().enumerate() {
                        let (ai, bi) = (i % na, i % nb);
                        slot[bi] += match kind {
                            Binary::Add => *gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * a[ai],
                            Binary::Div => -gi * a[ai] / (b[bi] * b[bi]),
                        };
                    }
                }
            }
            Op::Scale(p, c) => {
                if wants(*p) {
                    let slot = grad_slot(grads, nodes, *p);
                    for (s, gi) in slot.iter_mut().zip(gd) {
                        *s += c * gi;
                    }
                }
            }
            Op::Offset(p) | Op::Reshape(p) => {
                if wants(*p) {
                    let slot = grad_slot(grads, nodes, *p);
                    for (s, gi) in slot.iter_mut().zip(gd) {
                        *s += gi;
                    }
                }
            }
            Op::Unary(p, kind) => {
                if wants(*p) {
                    let x = nodes[*p].value.data();
                    let y = node.value.data();
                    let slot = grad_slot(grads, nodes, *p);
                    for i in 0..gd.len() {
                        let d = match kind {
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Softplus => kernels::sigmoid(x[i]),
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / x[i],
                            Unary::Square => 2.0 * x[i],
                            Unary::Sqrt => 0.5 / y[i],
                            Unary::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        slot[i] += gd[i] * d;
                    }
                }
            }
            Op::Softmax(p) => {
                if wants(*p) {
                    let y = node.value.data();
                    let c = node.value.last_dim();
                    let slot = grad_slot(grads, nodes, *p);
                    for r in 0..y.len() / c {
                        let span = r * c..(r + 1) * c;
                        let dot: f64 = gd[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                        for i in span {
                            slot[i] += y[i] * (gd[i] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(p) => {
                if wants(*p) {
                    let y = node.value.data();
                    let c = node.value.last_dim();
                    let slot = grad_slot(grads, nodes, *p);
                    for r in 0..y.len() / c {
                        let span = r * c..(r + 1) * c;
                        let total: f64 = gd[span.clone()].iter().sum();
                        for i in span {
                            slot[i] += gd[i] - y[i].exp() * total;
                        }
                    }
                }
            }
            Op::Concat { parents, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let out_axis = node.value.shape()[*axis];
                let mut offset = 0;
                for &p in parents {
                    let len = nodes[p].value.shape()[*axis];
                    if wants(p) {
                        let slot = grad_slot(grads, nodes, p);
                        for o in 0..outer {
                            let src = (o * out_axis + offset) * inner;
                            let dst = o * len * inner;
                            for i in 0..len * inner {
                                slot[dst + i] += gd[src + i];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { parent, axis, start } => {
                if wants(*parent) {
                    let (outer, full, inner) = axis_split(nodes[*parent].value.shape(), *axis);
                    let len = node.value.shape()[*axis];
                    let slot = grad_slot(grads, nodes, *parent);
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            slot[dst + i] += gd[src + i];
                        }
                    }
                }
            }
            Op::Expand(p) => {
                if wants(*p) {
                    let slot = grad_slot(grads, nodes, *p);
                    let n = slot.len();
                    for (i, gi) in gd.iter().enumerate() {
                        slot[i % n] += gi;
                    }
                }
            }
            Op::SumAll(p) => {
                if wants(*p) {
                    let slot = grad_slot(grads, nodes, *p);
                    for s in slot.iter_mut() {
                        *s += gd[0];
                    }
                }
            }
            Op::SumAxis(p, axis) => {
                if wants(*p) {
                    let (outer, len, inner) = axis_split(nodes[*p].value.shape(), *axis);
                    let slot = grad_slot(grads, nodes, *p);
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                slot[(o * len + j) * inner + i] += gd[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::LogSumExp(p, axis) => {
                if wants(*p) {
                    let x = nodes[*p].value.data();
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(nodes[*p].value.shape(), *axis);
                    let slot = grad_slot(grads, nodes, *p);
                    for o in 0..outer {
                        for i in 0..inner {
                            let yo = y[o * inner + i];
                            if !yo.is_finite() {
                                continue;
                            }
                            let go = gd[o * inner + i];
                            for j in 0..len {
                                let idx = (o * len + j) * inner + i;
                                slot[idx] += go * (x[idx] - yo).exp();
                            }
                        }
                    }
                }
            }
            Op::Mask(p, mask) => {
                if wants(*p) {
                    let slot = grad_slot(grads, nodes, *p);
                    for i in 0..gd.len() {
                        slot[i] += gd[i] * mask[i];
                    }
                }
            }
            Op::BatchNorm { parent, inv_std } => {
                if wants(*parent) {
                    let y = node.value.data();
                    let c = inv_std.len();
                    let rows = y.len() / c;
                    let nf = rows as f64;
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gy = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            sum_g[j] += gd[r * c + j];
                            sum_gy[j] += gd[r * c + j] * y[r * c + j];
                        }
                    }
                    let slot = grad_slot(grads, nodes, *parent);
                    for r in 0..rows {
                        for j in 0..c {
                            let i = r * c + j;
                            slot[i] += inv_std[j] / nf * (nf * gd[i] - sum_g[j] - y[i] * sum_gy[j]);
                        }
                    }
                }
            }
            Op::HeadScale { parent, beta } => {
                if wants(*parent) {
                    let slot = grad_slot(grads, nodes, *parent);
                    for (s, gi) in slot.iter_mut().zip(gd) {
                        *s += beta * gi;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => t.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], id: usize) -> &'a mut [f64] {
    grads[id]
        .get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()))
        .data_mut()
}
