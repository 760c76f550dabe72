use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;

use super::tensor::{broadcast_shape, broadcast_to, broadcast_zip, reduce_to, Tensor};
use super::{AdError, ParamStore};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which axis a reduction collapses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Everything, giving `1x1`.
    All,
    /// Each row separately, giving `rows x 1`.
    EachRow,
    /// Each column separately, giving `1 x cols`.
    EachCol,
}

/// Concatenation direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stack {
    /// Stack inputs vertically; column counts must agree.
    Rows,
    /// Place inputs side by side; row counts must agree.
    Cols,
}

/// The differentiable operations a graph can record.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Concat(Stack),
    Sum(Reduce),
    Mean(Reduce),
    Exp,
    Expm1,
    Log,
    Sigmoid,
    Tanh,
    Softplus,
    /// `log(1 + s * exp(x)) / s` with a positive, broadcastable `s` as the
    /// second input.
    ParamSoftplus,
    /// Row-wise softmax. Masked-out entries (false) get exactly zero weight.
    Softmax(Option<Arc<Vec<bool>>>),
    /// `max(x, eps)` in the forward pass, identity in the backward pass.
    ClampMinStraightThrough(f64),
    /// `max(x, c)` with the usual subgradient (zero where clamped).
    ClampMin(f64),
    Power(f64),
    Negate,
    Broadcast([usize; 2]),
    Relu,
    Transpose,
    GatherRows(Arc<Vec<usize>>),
    SliceCols(usize, usize),
    /// Sums consecutive groups of `n` rows.
    RowGroupSum(usize),
    AddScalar(f64),
    MulScalar(f64),
    /// Logarithm of the standard normal CDF.
    LogNdtr,
    /// Column-wise maximum over rows, giving `1 x cols`.
    MaxOverRows,
}

impl Primitive {
    /// Looks up a parameterless primitive by name.
    pub fn from_name(name: &str) -> Result<Self, AdError> {
        Ok(match name {
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "div" => Self::Div,
            "matmul" => Self::MatMul,
            "sum" => Self::Sum(Reduce::All),
            "mean" => Self::Mean(Reduce::All),
            "exp" => Self::Exp,
            "expm1" => Self::Expm1,
            "log" => Self::Log,
            "sigmoid" => Self::Sigmoid,
            "tanh" => Self::Tanh,
            "softplus" => Self::Softplus,
            "parametric-softplus" => Self::ParamSoftplus,
            "softmax" => Self::Softmax(None),
            "negate" => Self::Negate,
            "relu" => Self::Relu,
            "transpose" => Self::Transpose,
            "log-ndtr" => Self::LogNdtr,
            other => return Err(AdError::UnknownPrimitive(other.to_string())),
        })
    }

    fn name(&self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::MatMul => "matmul",
            Self::Concat(_) => "concat",
            Self::Sum(_) => "sum",
            Self::Mean(_) => "mean",
            Self::Exp => "exp",
            Self::Expm1 => "expm1",
            Self::Log => "log",
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
            Self::Softplus => "softplus",
            Self::ParamSoftplus => "parametric-softplus",
            Self::Softmax(_) => "softmax",
            Self::ClampMinStraightThrough(_) => "clamp-min-straight-through",
            Self::ClampMin(_) => "clamp-min",
            Self::Power(_) => "power",
            Self::Negate => "negate",
            Self::Broadcast(_) => "broadcast",
            Self::Relu => "relu",
            Self::Transpose => "transpose",
            Self::GatherRows(_) => "gather-rows",
            Self::SliceCols(..) => "slice-cols",
            Self::RowGroupSum(_) => "row-group-sum",
            Self::AddScalar(_) => "add-scalar",
            Self::MulScalar(_) => "mul-scalar",
            Self::LogNdtr => "log-ndtr",
            Self::MaxOverRows => "max-over-rows",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Self::Add | Self::Sub | Self::Mul | Self::Div | Self::MatMul | Self::ParamSoftplus => {
                Some(2)
            }
            Self::Concat(_) => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Leaf { param: Option<Arc<str>> },
    Op(Primitive),
}

#[derive(Clone, Debug)]
struct NodeData {
    value: Tensor,
    kind: Kind,
    parents: Vec<Var>,
    tangent: Option<Var>,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to the trainable parameters it
/// reaches, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_name: IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.by_name {
            match self.by_name.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.by_name.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_name.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.by_name.values().all(Tensor::is_finite)
    }
}

impl FromIterator<(String, Tensor)> for Gradients {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            by_name: iter.into_iter().collect(),
        }
    }
}

/// A recorded computation: forward values, reverse adjoints, and an optional
/// forward time-tangent channel.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order. When an input carries a tangent, the output tangent is
/// recorded with ordinary primitives; reverse mode therefore differentiates
/// straight through `d/dt` quantities, which is what cumulative-intensity
/// decoders need for `log lambda`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<NodeData>,
    params: HashMap<String, Var>,
    recording_tangent: bool,
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn tangent(&self, v: Var) -> Option<Var> {
        self.nodes[v.0].tangent
    }

    /// Value of the tangent of `v`, or zeros when `v` does not depend on the
    /// seeded time input.
    pub fn tangent_value(&self, v: Var) -> Tensor {
        match self.nodes[v.0].tangent {
            Some(t) => self.nodes[t.0].value.clone(),
            None => {
                let [r, c] = self.shape(v);
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Kind::Leaf { param: None }, Vec::new(), false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a parameter (or buffer) from `store`. Repeated calls with the
    /// same name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, AdError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let entry = store
            .get(name)
            .ok_or_else(|| AdError::MissingParam(name.to_string()))?;
        let var = if entry.trainable {
            self.push(
                entry.value.clone(),
                Kind::Leaf {
                    param: Some(Arc::from(name)),
                },
                Vec::new(),
                true,
            )
        } else {
            self.constant(entry.value.clone())
        };
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    /// Marks `t` as the time input: its tangent becomes a constant one, and
    /// every primitive applied downstream carries `d/dt` along.
    ///
    /// The tangent is entrywise, so a column of query times yields the
    /// derivative of each output row with respect to its own time, provided
    /// rows do not mix (true for every decoder here).
    pub fn seed_time_tangent(&mut self, t: Var) -> Result<Var, AdError> {
        if self.nodes[t.0].tangent.is_some() {
            return Err(AdError::TangentAlreadySet);
        }
        let [r, c] = self.shape(t);
        let ones = self.constant(Tensor::full(r, c, 1.0));
        self.nodes[t.0].tangent = Some(ones);
        Ok(t)
    }

    fn push(&mut self, value: Tensor, kind: Kind, parents: Vec<Var>, needs_grad: bool) -> Var {
        self.nodes.push(NodeData {
            value,
            kind,
            parents,
            tangent: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `prim` applied to `inputs`.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, AdError> {
        if let Some(n) = prim.arity() {
            if inputs.len() != n {
                return Err(AdError::InvalidArgument(format!(
                    "{} takes {} inputs, got {}",
                    prim.name(),
                    n,
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(AdError::InvalidArgument(format!(
                "{} needs at least one input",
                prim.name()
            )));
        }
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&prim, &vals)?
        };
        if !value.is_finite() {
            return Err(AdError::NonFinite(prim.name()));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let carries_tangent =
            !self.recording_tangent && inputs.iter().any(|v| self.nodes[v.0].tangent.is_some());
        let out = self.push(value, Kind::Op(prim.clone()), inputs.to_vec(), needs_grad);
        if carries_tangent {
            self.recording_tangent = true;
            let tangent = self.tangent_rule(&prim, inputs, out);
            self.recording_tangent = false;
            self.nodes[out.0].tangent = Some(tangent?);
        }
        Ok(out)
    }

    // ---- convenience wrappers -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Primitive::Concat(Stack::Rows), parts)
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Primitive::Concat(Stack::Cols), parts)
    }
    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Sum(Reduce::All), &[a])
    }
    /// Sum of each row, `rows x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Sum(Reduce::EachRow), &[a])
    }
    /// Sum of each column, `1 x cols`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Sum(Reduce::EachCol), &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Mean(Reduce::All), &[a])
    }
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Mean(Reduce::EachRow), &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn expm1(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Expm1, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Softplus, &[a])
    }
    pub fn param_softplus(&mut self, x: Var, s: Var) -> Result<Var, AdError> {
        self.apply(Primitive::ParamSoftplus, &[x, s])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Softmax(None), &[a])
    }
    pub fn masked_softmax(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Result<Var, AdError> {
        self.apply(Primitive::Softmax(Some(mask)), &[a])
    }
    pub fn clamp_min_st(&mut self, a: Var, eps: f64) -> Result<Var, AdError> {
        self.apply(Primitive::ClampMinStraightThrough(eps), &[a])
    }
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        self.apply(Primitive::ClampMin(c), &[a])
    }
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var, AdError> {
        self.apply(Primitive::Power(p), &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Negate, &[a])
    }
    pub fn broadcast(&mut self, a: Var, shape: [usize; 2]) -> Result<Var, AdError> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.apply(Primitive::Broadcast(shape), &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var, AdError> {
        self.apply(Primitive::GatherRows(Arc::new(rows)), &[a])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AdError> {
        self.apply(Primitive::SliceCols(start, end), &[a])
    }
    pub fn row_group_sum(&mut self, a: Var, group: usize) -> Result<Var, AdError> {
        self.apply(Primitive::RowGroupSum(group), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        self.apply(Primitive::AddScalar(c), &[a])
    }
    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        self.apply(Primitive::MulScalar(c), &[a])
    }
    pub fn log_ndtr(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::LogNdtr, &[a])
    }
    pub fn max_over_rows(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Primitive::MaxOverRows, &[a])
    }

    /// Row-wise log-sum-exp, `rows x 1`. The shift is a constant, so the
    /// gradient is exact.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var, AdError> {
        let v = self.value(a);
        let shift: Vec<f64> = (0..v.rows())
            .map(|r| v.row_slice(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .map(|m| if m.is_finite() { m } else { 0.0 })
            .collect();
        let shift = self.constant(Tensor::column(&shift));
        let centered = self.sub(a, shift)?;
        let e = self.exp(centered)?;
        let s = self.sum_rows(e)?;
        let l = self.log(s)?;
        self.add(l, shift)
    }

    // ---- reverse mode -------------------------------------------------------------

    /// Reverse-mode gradients of the scalar `root` with respect to every
    /// trainable parameter it depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients, AdError> {
        if self.shape(root) != [1, 1] {
            return Err(AdError::NonScalarRoot(self.shape(root)));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(Tensor::scalar(1.0));
        let mut leaves: Vec<(Arc<str>, Tensor)> = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = adjoints[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(AdError::NonFiniteGradient);
            }
            match &node.kind {
                Kind::Leaf { param: Some(name) } => leaves.push((name.clone(), g)),
                Kind::Leaf { param: None } => {}
                Kind::Op(prim) => {
                    let need: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|p| self.nodes[p.0].needs_grad)
                        .collect();
                    let inputs: Vec<&Tensor> =
                        node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                    let grads = backward_rule(prim, &inputs, &node.value, &g, &need);
                    for ((p, pg), needed) in node.parents.iter().zip(grads).zip(&need) {
                        if !needed {
                            continue;
                        }
                        let Some(pg) = pg else { continue };
                        match &mut adjoints[p.0] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        // Leaves were visited in reverse creation order; report them in
        // creation order so iteration is stable.
        let mut by_name = IndexMap::new();
        for (name, g) in leaves.into_iter().rev() {
            by_name.insert(name.to_string(), g);
        }
        Ok(Gradients { by_name })
    }

    // ---- tangent rules ------------------------------------------------------------

    fn tangent_rule(&mut self, prim: &Primitive, inputs: &[Var], out: Var) -> Result<Var, AdError> {
        let t: Vec<Option<Var>> = inputs.iter().map(|v| self.nodes[v.0].tangent).collect();
        let out_shape = self.shape(out);
        let res = match prim {
            Primitive::Add => self.sum_terms(&[t[0], t[1]])?,
            Primitive::Sub => {
                let tb = t[1].map(|tb| self.neg(tb)).transpose()?;
                self.sum_terms(&[t[0], tb])?
            }
            Primitive::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let x = t[0].map(|ta| self.mul(ta, b)).transpose()?;
                let y = t[1].map(|tb| self.mul(a, tb)).transpose()?;
                self.sum_terms(&[x, y])?
            }
            Primitive::Div => {
                let b = inputs[1];
                let x = t[0].map(|ta| self.div(ta, b)).transpose()?;
                let y = match t[1] {
                    Some(tb) => {
                        let ot = self.mul(out, tb)?;
                        let q = self.div(ot, b)?;
                        Some(self.neg(q)?)
                    }
                    None => None,
                };
                self.sum_terms(&[x, y])?
            }
            Primitive::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let x = t[0].map(|ta| self.matmul(ta, b)).transpose()?;
                let y = t[1].map(|tb| self.matmul(a, tb)).transpose()?;
                self.sum_terms(&[x, y])?
            }
            Primitive::Concat(stack) => {
                let mut parts = Vec::with_capacity(inputs.len());
                for (v, tv) in inputs.iter().zip(&t) {
                    parts.push(match tv {
                        Some(tv) => *tv,
                        None => {
                            let [r, c] = self.shape(*v);
                            self.constant(Tensor::zeros(r, c))
                        }
                    });
                }
                self.apply(Primitive::Concat(*stack), &parts)?
            }
            Primitive::Sum(_)
            | Primitive::Mean(_)
            | Primitive::Negate
            | Primitive::Broadcast(_)
            | Primitive::Transpose
            | Primitive::GatherRows(_)
            | Primitive::SliceCols(..)
            | Primitive::RowGroupSum(_)
            | Primitive::MulScalar(_) => self.apply(prim.clone(), &[t[0].expect("tangent")])?,
            Primitive::AddScalar(_) | Primitive::ClampMinStraightThrough(_) => {
                t[0].expect("tangent")
            }
            Primitive::Exp => self.mul(out, t[0].expect("tangent"))?,
            Primitive::Expm1 => {
                let e = self.add_scalar(out, 1.0)?;
                self.mul(e, t[0].expect("tangent"))?
            }
            Primitive::Log => self.div(t[0].expect("tangent"), inputs[0])?,
            Primitive::Sigmoid => {
                let one_minus = self.neg(out)?;
                let one_minus = self.add_scalar(one_minus, 1.0)?;
                let d = self.mul(out, one_minus)?;
                self.mul(d, t[0].expect("tangent"))?
            }
            Primitive::Tanh => {
                let sq = self.mul(out, out)?;
                let d = self.neg(sq)?;
                let d = self.add_scalar(d, 1.0)?;
                self.mul(d, t[0].expect("tangent"))?
            }
            Primitive::Softplus => {
                let d = self.sigmoid(inputs[0])?;
                self.mul(d, t[0].expect("tangent"))?
            }
            Primitive::ParamSoftplus => {
                let (x, s) = (inputs[0], inputs[1]);
                let ls = self.log(s)?;
                let y = self.add(x, ls)?;
                let sig = self.sigmoid(y)?;
                let tx = match t[0] {
                    Some(tx) => {
                        let d = self.div(sig, s)?;
                        Some(self.mul(d, tx)?)
                    }
                    None => None,
                };
                let ts = match t[1] {
                    Some(ts) => {
                        let so = self.mul(s, out)?;
                        let num = self.sub(sig, so)?;
                        let ss = self.mul(s, s)?;
                        let d = self.div(num, ss)?;
                        Some(self.mul(d, ts)?)
                    }
                    None => None,
                };
                self.sum_terms(&[tx, ts])?
            }
            Primitive::Softmax(_) => {
                let ta = t[0].expect("tangent");
                let p = self.mul(out, ta)?;
                let s = self.sum_rows(p)?;
                let d = self.sub(ta, s)?;
                self.mul(out, d)?
            }
            Primitive::ClampMin(c) => {
                let mask = self.value(inputs[0]).map(|x| f64::from(u8::from(x >= *c)));
                let mask = self.constant(mask);
                self.mul(t[0].expect("tangent"), mask)?
            }
            Primitive::Power(p) => {
                let d = self.powf(inputs[0], p - 1.0)?;
                let d = self.mul_scalar(d, *p)?;
                self.mul(d, t[0].expect("tangent"))?
            }
            Primitive::Relu => {
                let mask = self.value(inputs[0]).map(|x| f64::from(u8::from(x > 0.0)));
                let mask = self.constant(mask);
                self.mul(t[0].expect("tangent"), mask)?
            }
            Primitive::LogNdtr => {
                let a = inputs[0];
                let sq = self.mul(a, a)?;
                let e = self.mul_scalar(sq, -0.5)?;
                let e = self.add_scalar(e, -LN_SQRT_2PI)?;
                let e = self.sub(e, out)?;
                let ratio = self.exp(e)?;
                self.mul(ratio, t[0].expect("tangent"))?
            }
            Primitive::MaxOverRows => {
                let sel = argmax_selector(self.value(inputs[0]));
                let sel = self.constant(sel);
                let picked = self.mul(t[0].expect("tangent"), sel)?;
                self.sum_cols(picked)?
            }
        };
        self.broadcast(res, out_shape)
    }

    fn sum_terms(&mut self, terms: &[Option<Var>]) -> Result<Var, AdError> {
        let mut acc: Option<Var> = None;
        for t in terms.iter().flatten() {
            acc = Some(match acc {
                None => *t,
                Some(a) => self.add(a, *t)?,
            });
        }
        acc.ok_or_else(|| AdError::InvalidArgument("tangent rule with no tangent input".into()))
    }
}

fn shape_err(op: &'static str, a: [usize; 2], b: [usize; 2]) -> AdError {
    AdError::ShapeMismatch { op, lhs: a, rhs: b }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log Phi(x)` for the standard normal CDF, accurate in both tails.
pub fn log_ndtr(x: f64) -> f64 {
    use statrs::function::erf::erfc;
    if x > 0.0 {
        (-0.5 * erfc(x / std::f64::consts::SQRT_2)).ln_1p()
    } else if x > -20.0 {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2)
            + 105.0 / (x2 * x2 * x2 * x2);
        -0.5 * x2 - LN_SQRT_2PI - (-x).ln() + series.ln()
    }
}

fn argmax_selector(t: &Tensor) -> Tensor {
    let [r, c] = t.shape();
    let mut sel = Tensor::zeros(r, c);
    for j in 0..c {
        let mut best = 0;
        for i in 1..r {
            if t.get(i, j) > t.get(best, j) {
                best = i;
            }
        }
        if r > 0 {
            sel.set(best, j, 1.0);
        }
    }
    sel
}

fn forward(prim: &Primitive, x: &[&Tensor]) -> Result<Tensor, AdError> {
    let name = prim.name();
    Ok(match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let (a, b) = (x[0], x[1]);
            let shape =
                broadcast_shape(a.shape(), b.shape()).ok_or(shape_err(name, a.shape(), b.shape()))?;
            match prim {
                Primitive::Add => broadcast_zip(a, b, shape, |p, q| p + q),
                Primitive::Sub => broadcast_zip(a, b, shape, |p, q| p - q),
                Primitive::Mul => broadcast_zip(a, b, shape, |p, q| p * q),
                _ => broadcast_zip(a, b, shape, |p, q| p / q),
            }
        }
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            if a.cols() != b.rows() {
                return Err(shape_err(name, a.shape(), b.shape()));
            }
            a.matmul(b)
        }
        Primitive::Concat(Stack::Rows) => {
            let cols = x[0].cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for t in x {
                if t.cols() != cols {
                    return Err(shape_err(name, x[0].shape(), t.shape()));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new([rows, cols], data)?
        }
        Primitive::Concat(Stack::Cols) => {
            let rows = x[0].rows();
            let mut cols = 0;
            for t in x {
                if t.rows() != rows {
                    return Err(shape_err(name, x[0].shape(), t.shape()));
                }
                cols += t.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for t in x {
                    data.extend_from_slice(t.row_slice(r));
                }
            }
            Tensor::new([rows, cols], data)?
        }
        Primitive::Sum(reduce) | Primitive::Mean(reduce) => {
            let a = x[0];
            let mean = matches!(prim, Primitive::Mean(_));
            let [r, c] = a.shape();
            match reduce {
                Reduce::All => {
                    let n = (r * c) as f64;
                    if mean && n == 0.0 {
                        return Err(AdError::InvalidArgument("mean of empty tensor".into()));
                    }
                    Tensor::scalar(if mean { a.sum() / n } else { a.sum() })
                }
                Reduce::EachRow => {
                    let d = if mean { c as f64 } else { 1.0 };
                    let v: Vec<f64> = (0..r).map(|i| a.row_slice(i).iter().sum::<f64>() / d).collect();
                    Tensor::column(&v)
                }
                Reduce::EachCol => {
                    let d = if mean { r as f64 } else { 1.0 };
                    let mut v = vec![0.0; c];
                    for i in 0..r {
                        for (acc, &e) in v.iter_mut().zip(a.row_slice(i)) {
                            *acc += e;
                        }
                    }
                    v.iter_mut().for_each(|e| *e /= d);
                    Tensor::row(&v)
                }
            }
        }
        Primitive::Exp => x[0].map(f64::exp),
        Primitive::Expm1 => x[0].map(f64::exp_m1),
        Primitive::Log => {
            if x[0].data().iter().any(|&v| v <= 0.0) {
                return Err(AdError::NonPositive(name));
            }
            x[0].map(f64::ln)
        }
        Primitive::Sigmoid => x[0].map(stable_sigmoid),
        Primitive::Tanh => x[0].map(f64::tanh),
        Primitive::Softplus => x[0].map(stable_softplus),
        Primitive::ParamSoftplus => {
            let (a, s) = (x[0], x[1]);
            let shape =
                broadcast_shape(a.shape(), s.shape()).ok_or(shape_err(name, a.shape(), s.shape()))?;
            if shape != a.shape() {
                return Err(shape_err(name, a.shape(), s.shape()));
            }
            if s.data().iter().any(|&v| v <= 0.0) {
                return Err(AdError::NonPositive(name));
            }
            broadcast_zip(a, s, shape, |v, s| stable_softplus(v + s.ln()) / s)
        }
        Primitive::Softmax(mask) => {
            let a = x[0];
            let [r, c] = a.shape();
            if let Some(m) = mask {
                if m.len() != r * c {
                    return Err(AdError::InvalidArgument("softmax mask shape".into()));
                }
            }
            let visible = |i: usize, j: usize| mask.as_ref().is_none_or(|m| m[i * c + j]);
            let mut out = Tensor::zeros(r, c);
            for i in 0..r {
                let mut mx = f64::NEG_INFINITY;
                for j in 0..c {
                    if visible(i, j) {
                        mx = mx.max(a.get(i, j));
                    }
                }
                if mx == f64::NEG_INFINITY {
                    return Err(AdError::AllMasked(i));
                }
                let mut z = 0.0;
                for j in 0..c {
                    if visible(i, j) {
                        let e = (a.get(i, j) - mx).exp();
                        out.set(i, j, e);
                        z += e;
                    }
                }
                for j in 0..c {
                    let v = out.get(i, j) / z;
                    out.set(i, j, v);
                }
            }
            out
        }
        Primitive::ClampMinStraightThrough(eps) | Primitive::ClampMin(eps) => {
            let eps = *eps;
            x[0].map(|v| v.max(eps))
        }
        Primitive::Power(p) => {
            let p = *p;
            if p.fract() != 0.0 && x[0].data().iter().any(|&v| v <= 0.0) {
                return Err(AdError::NonPositive(name));
            }
            x[0].map(|v| v.powf(p))
        }
        Primitive::Negate => x[0].map(|v| -v),
        Primitive::Broadcast(shape) => {
            let a = x[0];
            match broadcast_shape(a.shape(), *shape) {
                Some(s) if s == *shape => broadcast_to(a, *shape),
                _ => return Err(shape_err(name, a.shape(), *shape)),
            }
        }
        Primitive::Relu => x[0].map(|v| v.max(0.0)),
        Primitive::Transpose => x[0].transpose(),
        Primitive::GatherRows(idx) => {
            let a = x[0];
            let c = a.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx.iter() {
                if i >= a.rows() {
                    return Err(AdError::InvalidArgument(format!(
                        "row {} out of range for {} rows",
                        i,
                        a.rows()
                    )));
                }
                data.extend_from_slice(a.row_slice(i));
            }
            Tensor::new([idx.len(), c], data)?
        }
        Primitive::SliceCols(s, e) => {
            let a = x[0];
            if s > e || *e > a.cols() {
                return Err(AdError::InvalidArgument(format!(
                    "column slice {}..{} of {} columns",
                    s,
                    e,
                    a.cols()
                )));
            }
            let mut data = Vec::with_capacity(a.rows() * (e - s));
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row_slice(r)[*s..*e]);
            }
            Tensor::new([a.rows(), e - s], data)?
        }
        Primitive::RowGroupSum(g) => {
            let a = x[0];
            let g = *g;
            if g == 0 || !a.rows().is_multiple_of(g) {
                return Err(AdError::InvalidArgument(format!(
                    "{} rows do not split into groups of {}",
                    a.rows(),
                    g
                )));
            }
            let c = a.cols();
            let groups = a.rows() / g;
            let mut out = Tensor::zeros(groups, c);
            for q in 0..groups {
                for k in 0..g {
                    let src = a.row_slice(q * g + k);
                    for (j, &v) in src.iter().enumerate() {
                        let cur = out.get(q, j);
                        out.set(q, j, cur + v);
                    }
                }
            }
            out
        }
        Primitive::AddScalar(c) => {
            let c = *c;
            x[0].map(|v| v + c)
        }
        Primitive::MulScalar(c) => {
            let c = *c;
            x[0].map(|v| v * c)
        }
        Primitive::LogNdtr => x[0].map(log_ndtr),
        Primitive::MaxOverRows => {
            let a = x[0];
            if a.rows() == 0 {
                return Err(AdError::InvalidArgument("max over zero rows".into()));
            }
            let v: Vec<f64> = (0..a.cols())
                .map(|j| (0..a.rows()).map(|i| a.get(i, j)).fold(f64::NEG_INFINITY, f64::max))
                .collect();
            Tensor::row(&v)
        }
    })
}

/// Adjoint contributions of an op's inputs given the output adjoint `g`.
fn backward_rule(
    prim: &Primitive,
    x: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    need: &[bool],
) -> Vec<Option<Tensor>> {
    let one = |t: Tensor| vec![Some(t)];
    match prim {
        Primitive::Add => vec![
            need[0].then(|| reduce_to(g, x[0].shape())),
            need[1].then(|| reduce_to(g, x[1].shape())),
        ],
        Primitive::Sub => vec![
            need[0].then(|| reduce_to(g, x[0].shape())),
            need[1].then(|| reduce_to(&g.map(|v| -v), x[1].shape())),
        ],
        Primitive::Mul => {
            let shape = g.shape();
            vec![
                need[0].then(|| reduce_to(&broadcast_zip(g, x[1], shape, |p, q| p * q), x[0].shape())),
                need[1].then(|| reduce_to(&broadcast_zip(g, x[0], shape, |p, q| p * q), x[1].shape())),
            ]
        }
        Primitive::Div => {
            let shape = g.shape();
            vec![
                need[0].then(|| reduce_to(&broadcast_zip(g, x[1], shape, |p, q| p / q), x[0].shape())),
                need[1].then(|| {
                    let go = g.zip_map(out, |p, o| -p * o);
                    reduce_to(&broadcast_zip(&go, x[1], shape, |p, q| p / q), x[1].shape())
                }),
            ]
        }
        Primitive::MatMul => vec![
            need[0].then(|| g.matmul(&x[1].transpose())),
            need[1].then(|| x[0].transpose().matmul(g)),
        ],
        Primitive::Concat(Stack::Rows) => {
            let mut start = 0;
            x.iter()
                .map(|t| {
                    let rows = t.rows();
                    let c = t.cols();
                    let part = g.data()[start * c..(start + rows) * c].to_vec();
                    start += rows;
                    Some(Tensor::new([rows, c], part).expect("concat split"))
                })
                .collect()
        }
        Primitive::Concat(Stack::Cols) => {
            let mut start = 0;
            x.iter()
                .map(|t| {
                    let [rows, c] = t.shape();
                    let mut part = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        part.extend_from_slice(&g.row_slice(r)[start..start + c]);
                    }
                    start += c;
                    Some(Tensor::new([rows, c], part).expect("concat split"))
                })
                .collect()
        }
        Primitive::Sum(reduce) | Primitive::Mean(reduce) => {
            let [r, c] = x[0].shape();
            let scale = match (prim, reduce) {
                (Primitive::Sum(_), _) => 1.0,
                (_, Reduce::All) => 1.0 / (r * c) as f64,
                (_, Reduce::EachRow) => 1.0 / c as f64,
                (_, Reduce::EachCol) => 1.0 / r as f64,
            };
            let mut full = broadcast_to(g, [r, c]);
            if scale != 1.0 {
                full.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            one(full)
        }
        Primitive::Exp => one(g.zip_map(out, |p, o| p * o)),
        Primitive::Expm1 => one(g.zip_map(out, |p, o| p * (o + 1.0))),
        Primitive::Log => one(g.zip_map(x[0], |p, a| p / a)),
        Primitive::Sigmoid => one(g.zip_map(out, |p, o| p * o * (1.0 - o))),
        Primitive::Tanh => one(g.zip_map(out, |p, o| p * (1.0 - o * o))),
        Primitive::Softplus => one(g.zip_map(x[0], |p, a| p * stable_sigmoid(a))),
        Primitive::ParamSoftplus => {
            let (a, s) = (x[0], x[1]);
            let shape = a.shape();
            let sig = broadcast_zip(a, s, shape, |v, s| stable_sigmoid(v + s.ln()));
            let dx = need[0].then(|| {
                let d = broadcast_zip(&sig, s, shape, |q, s| q / s);
                g.zip_map(&d, |p, d| p * d)
            });
            let ds = need[1].then(|| {
                let so = broadcast_zip(out, s, shape, |o, s| s * o);
                let num = sig.zip_map(&so, |q, so| q - so);
                let d = broadcast_zip(&num, s, shape, |n, s| n / (s * s));
                reduce_to(&g.zip_map(&d, |p, d| p * d), s.shape())
            });
            vec![dx, ds]
        }
        Primitive::Softmax(_) => {
            let [r, c] = out.shape();
            let mut grad = Tensor::zeros(r, c);
            for i in 0..r {
                let dot: f64 = g.row_slice(i).iter().zip(out.row_slice(i)).map(|(p, o)| p * o).sum();
                for j in 0..c {
                    grad.set(i, j, out.get(i, j) * (g.get(i, j) - dot));
                }
            }
            one(grad)
        }
        Primitive::ClampMinStraightThrough(_) | Primitive::AddScalar(_) => one(g.clone()),
        Primitive::ClampMin(c) => {
            let c = *c;
            one(g.zip_map(x[0], |p, a| if a >= c { p } else { 0.0 }))
        }
        Primitive::Power(p) => {
            let p = *p;
            one(g.zip_map(x[0], |q, a| q * p * a.powf(p - 1.0)))
        }
        Primitive::Negate => one(g.map(|v| -v)),
        Primitive::Broadcast(_) => one(reduce_to(g, x[0].shape())),
        Primitive::Relu => one(g.zip_map(x[0], |p, a| if a > 0.0 { p } else { 0.0 })),
        Primitive::Transpose => one(g.transpose()),
        Primitive::GatherRows(idx) => {
            let [r, c] = x[0].shape();
            let mut grad = Tensor::zeros(r, c);
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    let cur = grad.get(i, j);
                    grad.set(i, j, cur + g.get(k, j));
                }
            }
            one(grad)
        }
        Primitive::SliceCols(s, _) => {
            let [r, c] = x[0].shape();
            let mut grad = Tensor::zeros(r, c);
            for i in 0..r {
                for (j, &v) in g.row_slice(i).iter().enumerate() {
                    grad.set(i, s + j, v);
                }
            }
            one(grad)
        }
        Primitive::RowGroupSum(n) => {
            let [r, c] = x[0].shape();
            let mut grad = Tensor::zeros(r, c);
            for i in 0..r {
                for j in 0..c {
                    grad.set(i, j, g.get(i / n, j));
                }
            }
            one(grad)
        }
        Primitive::MulScalar(c) => {
            let c = *c;
            one(g.map(|v| v * c))
        }
        Primitive::LogNdtr => one(g.zip_map(x[0], |p, a| {
            // phi(a) / Phi(a), evaluated in log space.
            let ratio = (-0.5 * a * a - LN_SQRT_2PI - log_ndtr(a)).exp();
            p * ratio
        })),
        Primitive::MaxOverRows => {
            let sel = argmax_selector(x[0]);
            let full = broadcast_to(g, x[0].shape());
            one(full.zip_map(&sel, |p, s| p * s))
        }
    }
}
