use crate::error::{Error, Result};
use crate::num::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Softmax / reduction axis selector: `RowWise` normalizes each row
/// (rows sum to 1), `ColWise` normalizes each column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    RowWise,
    ColWise,
}

/// Probabilities below this floor are clamped before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice {
        input: Var,
        r0: usize,
        r1: usize,
        c0: usize,
        c1: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Log(Var),
    MeanCols(Var),
    MeanRows(Var),
    MaxCols(Var),
    MaxRows(Var),
    BroadcastRows(Var, usize),
    BroadcastCols(Var, usize),
    Softmax(Var, Axis),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Nll {
        dist: Var,
        target: usize,
    },
    GroupMax {
        input: Var,
        groups: Vec<Vec<usize>>,
    },
    Route {
        input: Var,
        map: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Slice { .. } => "slice",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Log(..) => "log",
            Op::MeanCols(..) => "mean_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::MaxCols(..) => "max_cols",
            Op::MaxRows(..) => "max_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Softmax(..) => "softmax",
            Op::Embed { .. } => "embed",
            Op::Nll { .. } => "nll",
            Op::GroupMax { .. } => "group_max",
            Op::Route { .. } => "route",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Dynamic computation graph, rebuilt per forward pass.
///
/// Nodes are appended in construction order, so insertion order is a valid
/// topological order and the backward pass visits each node exactly once in
/// reverse. Gradients accumulate by summation across fan-out.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
    log_clamp_events: usize,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Validate every op output for NaN/Inf as the graph is built; used by
    /// the gradient checker to report the offending node.
    pub fn with_finite_checks() -> Self {
        Graph {
            check_finite: true,
            ..Graph::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of times a log/NLL input had to be clamped at [`LOG_CLAMP`].
    pub fn log_clamp_events(&self) -> usize {
        self.log_clamp_events
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of `v`, if the backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite {
                node: self.nodes.len(),
                op: op.name().to_string(),
            });
        }
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── leaves ───────────────────────────────────────────────────────

    /// Snapshot a tensor into the graph; tracks gradients iff the tensor
    /// has `requires_grad` set. Leaves skip the finiteness check: inputs
    /// are validated where they are produced.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push_unchecked(Op::Leaf, t.clone(), rg)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::from_vec(1, 1, vec![v]).unwrap())
    }

    // ── binary ops ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let out = matmul_raw(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), out, rg)
    }

    fn elementwise(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b)?;
        let out = zip_raw(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), out, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b)?;
        let out = zip_raw(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), out, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b)?;
        let out = zip_raw(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), out, rg)
    }

    // ── unary ops ────────────────────────────────────────────────────

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = map_raw(self.value(a), |x| x * s);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), out, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.shape();
        let out = Tensor::from_fn(c, r, |i, j| t.get(j, i));
        let rg = self.rg(a);
        self.push(Op::Transpose(a), out, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = map_raw(self.value(a), sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), out, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = map_raw(self.value(a), f64::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), out, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = map_raw(self.value(a), |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(Op::Relu(a), out, rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = map_raw(self.value(a), |x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(Op::LeakyRelu(a, slope), out, rg)
    }

    /// Natural log with inputs clamped at [`LOG_CLAMP`]; clamp engagements
    /// are counted on the graph.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let clamped = self
            .value(a)
            .data()
            .iter()
            .filter(|&&x| x < LOG_CLAMP)
            .count();
        self.log_clamp_events += clamped;
        let out = map_raw(self.value(a), |x| x.max(LOG_CLAMP).ln());
        let rg = self.rg(a);
        self.push(Op::Log(a), out, rg)
    }

    // ── structure ops ────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows", "no inputs"));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.1 != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: s,
                });
            }
            rows += s.0;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatRows(parts.to_vec()), out, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols", "no inputs"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.0 != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: (rows, cols),
                    rhs: s,
                });
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..rows {
                for j in 0..t.cols() {
                    out.set(i, off + j, t.get(i, j));
                }
            }
            off += t.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, rg)
    }

    /// Sub-matrix `[r0..r1) x [c0..c1)`.
    pub fn slice(&mut self, a: Var, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        if r1 > r || c1 > c || r0 >= r1 || c0 >= c1 {
            return Err(Error::contract(
                "slice",
                format!("[{r0}..{r1}) x [{c0}..{c1}) out of a {r}x{c} tensor"),
            ));
        }
        let t = self.value(a);
        let out = Tensor::from_fn(r1 - r0, c1 - c0, |i, j| t.get(r0 + i, c0 + j));
        let rg = self.rg(a);
        self.push(
            Op::Slice {
                input: a,
                r0,
                r1,
                c0,
                c1,
            },
            out,
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Result<Var> {
        let r = self.value(a).rows();
        self.slice(a, 0, r, c0, c1)
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Result<Var> {
        let c = self.value(a).cols();
        self.slice(a, r0, r1, 0, c)
    }

    // ── reductions ───────────────────────────────────────────────────

    /// Mean across columns: `r x c -> r x 1`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.shape();
        let out = Tensor::from_fn(r, 1, |i, _| {
            (0..c).map(|j| t.get(i, j)).sum::<f64>() / c as f64
        });
        let rg = self.rg(a);
        self.push(Op::MeanCols(a), out, rg)
    }

    /// Mean across rows: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.shape();
        let out = Tensor::from_fn(1, c, |_, j| {
            (0..r).map(|i| t.get(i, j)).sum::<f64>() / r as f64
        });
        let rg = self.rg(a);
        self.push(Op::MeanRows(a), out, rg)
    }

    /// Max across columns: `r x c -> r x 1`; ties resolve to the lowest
    /// column index, which is where the gradient routes.
    pub fn max_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.shape();
        let out = Tensor::from_fn(r, 1, |i, _| {
            (0..c)
                .map(|j| t.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max)
        });
        let rg = self.rg(a);
        self.push(Op::MaxCols(a), out, rg)
    }

    /// Max across rows: `r x c -> 1 x c`.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.shape();
        let out = Tensor::from_fn(1, c, |_, j| {
            (0..r)
                .map(|i| t.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max)
        });
        let rg = self.rg(a);
        self.push(Op::MaxRows(a), out, rg)
    }

    // ── broadcasts ───────────────────────────────────────────────────

    /// Tile a `1 x k` row across `r` rows.
    pub fn broadcast_rows(&mut self, a: Var, r: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != 1 {
            return Err(Error::contract(
                "broadcast_rows",
                format!("expected a 1xk row, got {:?}", t.shape()),
            ));
        }
        let out = Tensor::from_fn(r, t.cols(), |_, j| t.get(0, j));
        let rg = self.rg(a);
        self.push(Op::BroadcastRows(a, r), out, rg)
    }

    /// Tile a `k x 1` column across `c` columns.
    pub fn broadcast_cols(&mut self, a: Var, c: usize) -> Result<Var> {
        let t = self.value(a);
        if t.cols() != 1 {
            return Err(Error::contract(
                "broadcast_cols",
                format!("expected a kx1 column, got {:?}", t.shape()),
            ));
        }
        let out = Tensor::from_fn(t.rows(), c, |i, _| t.get(i, 0));
        let rg = self.rg(a);
        self.push(Op::BroadcastCols(a, c), out, rg)
    }

    // ── softmax ──────────────────────────────────────────────────────

    /// Max-subtracted softmax along the chosen axis.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.shape();
        let mut out = Tensor::zeros(r, c);
        match axis {
            Axis::RowWise => {
                for i in 0..r {
                    let m = (0..c)
                        .map(|j| t.get(i, j))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..c {
                        let e = (t.get(i, j) - m).exp();
                        out.set(i, j, e);
                        z += e;
                    }
                    for j in 0..c {
                        out.set(i, j, out.get(i, j) / z);
                    }
                }
            }
            Axis::ColWise => {
                for j in 0..c {
                    let m = (0..r)
                        .map(|i| t.get(i, j))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for i in 0..r {
                        let e = (t.get(i, j) - m).exp();
                        out.set(i, j, e);
                        z += e;
                    }
                    for i in 0..r {
                        out.set(i, j, out.get(i, j) / z);
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(Op::Softmax(a, axis), out, rg)
    }

    // ── task-specific ops ────────────────────────────────────────────

    /// Look up embedding rows: `table` is `|V| x e`, output is `e x len`
    /// with column `t` holding the embedding of `ids[t]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, e) = t.shape();
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::contract(
                "embed",
                format!("id {bad} out of a vocabulary of {v}"),
            ));
        }
        let out = Tensor::from_fn(e, ids.len(), |i, j| t.get(ids[j], i));
        let rg = self.rg(table);
        self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            out,
            rg,
        )
    }

    /// Negative log-likelihood of one entry of a probability column:
    /// `-ln(max(p[target], LOG_CLAMP))`, a `1 x 1` scalar.
    pub fn nll(&mut self, dist: Var, target: usize) -> Result<Var> {
        let t = self.value(dist);
        if t.cols() != 1 {
            return Err(Error::contract(
                "nll",
                format!("expected a column distribution, got {:?}", t.shape()),
            ));
        }
        if target >= t.rows() {
            return Err(Error::contract(
                "nll",
                format!("target {target} out of a distribution of {}", t.rows()),
            ));
        }
        let p = t.get(target, 0);
        if p < LOG_CLAMP {
            self.log_clamp_events += 1;
        }
        let out = Tensor::from_vec(1, 1, vec![-p.max(LOG_CLAMP).ln()])?;
        let rg = self.rg(dist);
        self.push(Op::Nll { dist, target }, out, rg)
    }

    /// Per-group maxima over entries of a `1 x n` row. Gradient routes to
    /// the first argmax of each group.
    pub fn group_max(&mut self, input: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(input);
        if t.rows() != 1 {
            return Err(Error::contract(
                "group_max",
                format!("expected a 1xn row, got {:?}", t.shape()),
            ));
        }
        let n = t.cols();
        for g in groups {
            if g.is_empty() {
                return Err(Error::contract("group_max", "empty group"));
            }
            if let Some(&bad) = g.iter().find(|&&i| i >= n) {
                return Err(Error::contract(
                    "group_max",
                    format!("position {bad} out of a row of {n}"),
                ));
            }
        }
        let out = Tensor::from_fn(1, groups.len(), |_, k| {
            groups[k]
                .iter()
                .map(|&i| t.get(0, i))
                .fold(f64::NEG_INFINITY, f64::max)
        });
        let rg = self.rg(input);
        self.push(
            Op::GroupMax {
                input,
                groups: groups.to_vec(),
            },
            out,
            rg,
        )
    }

    /// Scatter-add a column vector into `out_len` rows: entry `i` of the
    /// input lands on row `map[i]`. Entries mapping to the same row sum.
    pub fn route(&mut self, input: Var, map: &[usize], out_len: usize) -> Result<Var> {
        let t = self.value(input);
        if t.cols() != 1 || t.rows() != map.len() {
            return Err(Error::contract(
                "route",
                format!("input {:?} does not match map of {}", t.shape(), map.len()),
            ));
        }
        if let Some(&bad) = map.iter().find(|&&i| i >= out_len) {
            return Err(Error::contract(
                "route",
                format!("map target {bad} out of {out_len}"),
            ));
        }
        let mut out = Tensor::zeros(out_len, 1);
        for (i, &dst) in map.iter().enumerate() {
            let v = out.get(dst, 0) + t.get(i, 0);
            out.set(dst, 0, v);
        }
        let rg = self.rg(input);
        self.push(
            Op::Route {
                input,
                map: map.to_vec(),
            },
            out,
            rg,
        )
    }

    // ── composites ───────────────────────────────────────────────────

    /// `1 - v`, elementwise.
    pub fn one_minus(&mut self, v: Var) -> Result<Var> {
        let (r, c) = self.value(v).shape();
        let ones = self.constant(Tensor::from_fn(r, c, |_, _| 1.0));
        self.sub(ones, v)
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::contract("mean_scalars", "no terms"));
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        self.scale(acc, 1.0 / terms.len() as f64)
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accum(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let g = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.value.numel()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Reverse-mode sweep from a scalar loss node. Gradients sum across
    /// fan-out; each node is visited exactly once in reverse topological
    /// (= insertion) order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            // Nothing upstream tracks gradients; trivially done.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let gout = self.nodes[id].grad.clone().expect("checked above");
            let op = self.nodes[id].op.clone();
            self.backward_op(id, &op, &gout);
        }
        Ok(())
    }

    fn backward_op(&mut self, id: usize, op: &Op, gout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (ar, ac) = ta.shape();
                let (_, bc) = tb.shape();
                if self.rg(*a) {
                    // dA = dC · B^T
                    let mut da = vec![0.0; ar * ac];
                    for i in 0..ar {
                        for j in 0..bc {
                            let g = gout[i * bc + j];
                            if g == 0.0 {
                                continue;
                            }
                            for k in 0..ac {
                                da[i * ac + k] += g * tb.get(k, j);
                            }
                        }
                    }
                    self.accum(*a, &da);
                }
                if self.rg(*b) {
                    // dB = A^T · dC
                    let ta = self.value(*a);
                    let mut db = vec![0.0; ac * bc];
                    for i in 0..ar {
                        for k in 0..ac {
                            let av = ta.get(i, k);
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..bc {
                                db[k * bc + j] += av * gout[i * bc + j];
                            }
                        }
                    }
                    self.accum(*b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accum(*a, gout);
                self.accum(*b, gout);
            }
            Op::Sub(a, b) => {
                self.accum(*a, gout);
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                self.accum(*b, &neg);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let tb = self.value(*b);
                    let da: Vec<f64> = gout.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    self.accum(*a, &da);
                }
                if self.rg(*b) {
                    let ta = self.value(*a);
                    let db: Vec<f64> = gout.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.accum(*b, &db);
                }
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = gout.iter().map(|g| g * s).collect();
                self.accum(*a, &da);
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).shape();
                // gout has shape c x r
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = gout[j * r + i];
                    }
                }
                self.accum(*a, &da);
            }
            Op::ConcatRows(parts) => {
                let cols = self.value(Var(id)).cols();
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let da = gout[off * cols..off * cols + n].to_vec();
                    self.accum(p, &da);
                    off += self.value(p).rows();
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = self.value(Var(id)).shape();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut da = vec![0.0; rows * pc];
                    for i in 0..rows {
                        for j in 0..pc {
                            da[i * pc + j] = gout[i * cols + off + j];
                        }
                    }
                    self.accum(p, &da);
                    off += pc;
                }
            }
            Op::Slice {
                input,
                r0,
                r1,
                c0,
                c1,
            } => {
                let (r, c) = self.value(*input).shape();
                let mut da = vec![0.0; r * c];
                for i in 0..(r1 - r0) {
                    for j in 0..(c1 - c0) {
                        da[(r0 + i) * c + (c0 + j)] = gout[i * (c1 - c0) + j];
                    }
                }
                self.accum(*input, &da);
            }
            Op::Sigmoid(a) => {
                let y = self.value(Var(id));
                let da: Vec<f64> = gout
                    .iter()
                    .zip(y.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accum(*a, &da);
            }
            Op::Tanh(a) => {
                let y = self.value(Var(id));
                let da: Vec<f64> = gout
                    .iter()
                    .zip(y.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accum(*a, &da);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let da: Vec<f64> = gout
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accum(*a, &da);
            }
            Op::LeakyRelu(a, s) => {
                let x = self.value(*a);
                let da: Vec<f64> = gout
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { g * s })
                    .collect();
                self.accum(*a, &da);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let da: Vec<f64> = gout
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x >= LOG_CLAMP { g / x } else { 0.0 })
                    .collect();
                self.accum(*a, &da);
            }
            Op::MeanCols(a) => {
                let (r, c) = self.value(*a).shape();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let g = gout[i] / c as f64;
                    for j in 0..c {
                        da[i * c + j] = g;
                    }
                }
                self.accum(*a, &da);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).shape();
                let mut da = vec![0.0; r * c];
                for j in 0..c {
                    let g = gout[j] / r as f64;
                    for i in 0..r {
                        da[i * c + j] = g;
                    }
                }
                self.accum(*a, &da);
            }
            Op::MaxCols(a) => {
                let x = self.value(*a);
                let (r, c) = x.shape();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let mut best = 0;
                    for j in 1..c {
                        if x.get(i, j) > x.get(i, best) {
                            best = j;
                        }
                    }
                    da[i * c + best] = gout[i];
                }
                self.accum(*a, &da);
            }
            Op::MaxRows(a) => {
                let x = self.value(*a);
                let (r, c) = x.shape();
                let mut da = vec![0.0; r * c];
                for j in 0..c {
                    let mut best = 0;
                    for i in 1..r {
                        if x.get(i, j) > x.get(best, j) {
                            best = i;
                        }
                    }
                    da[best * c + j] = gout[j];
                }
                self.accum(*a, &da);
            }
            Op::BroadcastRows(a, r) => {
                let k = self.value(*a).cols();
                let mut da = vec![0.0; k];
                for i in 0..*r {
                    for j in 0..k {
                        da[j] += gout[i * k + j];
                    }
                }
                self.accum(*a, &da);
            }
            Op::BroadcastCols(a, c) => {
                let k = self.value(*a).rows();
                let mut da = vec![0.0; k];
                for i in 0..k {
                    for j in 0..*c {
                        da[i] += gout[i * c + j];
                    }
                }
                self.accum(*a, &da);
            }
            Op::Softmax(a, axis) => {
                let y = self.value(Var(id));
                let (r, c) = y.shape();
                let mut da = vec![0.0; r * c];
                match axis {
                    Axis::RowWise => {
                        for i in 0..r {
                            let dot: f64 = (0..c).map(|j| gout[i * c + j] * y.get(i, j)).sum();
                            for j in 0..c {
                                da[i * c + j] = y.get(i, j) * (gout[i * c + j] - dot);
                            }
                        }
                    }
                    Axis::ColWise => {
                        for j in 0..c {
                            let dot: f64 = (0..r).map(|i| gout[i * c + j] * y.get(i, j)).sum();
                            for i in 0..r {
                                da[i * c + j] = y.get(i, j) * (gout[i * c + j] - dot);
                            }
                        }
                    }
                }
                self.accum(*a, &da);
            }
            Op::Embed { table, ids } => {
                let (v, e) = self.value(*table).shape();
                let n = ids.len();
                let mut da = vec![0.0; v * e];
                for (t, &idx) in ids.iter().enumerate() {
                    for j in 0..e {
                        da[idx * e + j] += gout[j * n + t];
                    }
                }
                self.accum(*table, &da);
            }
            Op::Nll { dist, target } => {
                let p = self.value(*dist).get(*target, 0);
                let rows = self.value(*dist).rows();
                let mut da = vec![0.0; rows];
                if p >= LOG_CLAMP {
                    da[*target] = -gout[0] / p;
                }
                self.accum(*dist, &da);
            }
            Op::GroupMax { input, groups } => {
                let x = self.value(*input);
                let n = x.cols();
                let mut da = vec![0.0; n];
                for (k, g) in groups.iter().enumerate() {
                    let mut best = g[0];
                    for &i in &g[1..] {
                        if x.get(0, i) > x.get(0, best) {
                            best = i;
                        }
                    }
                    da[best] += gout[k];
                }
                self.accum(*input, &da);
            }
            Op::Route { input, map } => {
                let da: Vec<f64> = map.iter().map(|&dst| gout[dst]).collect();
                self.accum(*input, &da);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (ar, ac) = a.shape();
    let bc = b.cols();
    let mut out = vec![0.0; ar * bc];
    let ad = a.data();
    let bd = b.data();
    for i in 0..ar {
        for k in 0..ac {
            let av = ad[i * ac + k];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * bc..(i + 1) * bc];
            let brow = &bd[k * bc..(k + 1) * bc];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(ar, bc, out).expect("sized above")
}

fn map_raw(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

fn zip_raw(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    out.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(x, y)| *x = f(*x, *y));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut g = Graph::new();
        let a = g.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(t(2, 3, &[0.0; 6]));
        let b = g.constant(t(2, 2, &[0.0; 4]));
        assert!(matches!(
            g.matmul(a, b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn softmax_of_zero_and_ln2_is_one_third_two_thirds() {
        let mut g = Graph::new();
        let x = g.constant(t(2, 1, &[0.0, 2.0_f64.ln()]));
        let y = g.softmax(x, Axis::ColWise).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 3, &[0.3, -1.2, 2.5]));
        let shifted = g.constant(t(1, 3, &[0.3 + 739.0, -1.2 + 739.0, 2.5 + 739.0]));
        let y0 = g.softmax(x, Axis::RowWise).unwrap();
        let y1 = g.softmax(shifted, Axis::RowWise).unwrap();
        for (a, b) in g.value(y0).data().iter().zip(g.value(y1).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut g = Graph::new();
        let x = g.leaf(&t(1, 1, &[3.0]).param());
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut g = Graph::new();
        let x = g.leaf(&t(1, 1, &[0.0]).param());
        let y = g.sigmoid(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn fanout_gradients_sum() {
        // y = x*x + x  =>  dy/dx = 2x + 1 = 5 at x = 2
        let mut g = Graph::new();
        let x = g.leaf(&t(1, 1, &[2.0]).param());
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(&t(2, 1, &[1.0, 2.0]).param());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn max_ties_route_gradient_to_first_argmax() {
        let mut g = Graph::new();
        let x = g.leaf(&t(1, 3, &[2.0, 2.0, 1.0]).param());
        let m = g.max_cols(x).unwrap();
        assert_eq!(g.value(m).shape(), (1, 1));
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn group_max_takes_per_group_maxima() {
        let mut g = Graph::new();
        let x = g.leaf(&t(1, 4, &[0.1, 0.9, -2.0, 0.4]).param());
        let groups = vec![vec![0, 1], vec![2], vec![1, 3]];
        let y = g.group_max(x, &groups).unwrap();
        assert_eq!(g.value(y).data(), &[0.9, -2.0, 0.9]);
        let s = g.mean_cols(y).unwrap();
        g.backward(s).unwrap();
        // position 1 wins groups 0 and 2, position 2 wins its singleton
        assert_eq!(g.grad(x).unwrap(), &[0.0, 2.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn route_sums_entries_sharing_a_target_row() {
        let mut g = Graph::new();
        let x = g.leaf(&t(3, 1, &[0.5, 0.25, 0.25]).param());
        let y = g.route(x, &[2, 0, 2], 4).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, 0.0, 0.75, 0.0]);
        let p = g.nll(y, 2).unwrap();
        g.backward(p).unwrap();
        let d = g.grad(x).unwrap();
        assert!((d[0] + 1.0 / 0.75).abs() < 1e-12);
        assert_eq!(d[1], 0.0);
        assert!((d[2] + 1.0 / 0.75).abs() < 1e-12);
    }

    #[test]
    fn embed_scatters_gradient_to_looked_up_rows() {
        let mut g = Graph::new();
        let table = g.leaf(&t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).param());
        let e = g.embed(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e).shape(), (2, 3));
        assert_eq!(g.value(e).data(), &[5.0, 1.0, 5.0, 6.0, 2.0, 6.0]);
        let m = g.mean_cols(e).unwrap();
        let m = g.mean_rows(m).unwrap();
        g.backward(m).unwrap();
        // row 2 looked up twice, row 0 once, row 1 never
        let d = g.grad(table).unwrap();
        assert!((d[0] - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(&d[2..4], &[0.0, 0.0]);
        assert!((d[4] - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn nll_clamps_zero_probability_and_counts_it() {
        let mut g = Graph::new();
        let p = g.constant(t(2, 1, &[1.0, 0.0]));
        let l = g.nll(p, 1).unwrap();
        assert!((g.scalar_value(l) - (-LOG_CLAMP.ln())).abs() < 1e-9);
        assert_eq!(g.log_clamp_events(), 1);
    }

    #[test]
    fn finite_checks_name_the_offending_op() {
        let mut g = Graph::with_finite_checks();
        let x = g.constant(t(1, 1, &[1e200]));
        let doubled = g.add(x, x).unwrap();
        let err = g.mul(doubled, doubled).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op, .. } if op == "mul"));
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(&t(1, 2, &[1.0, 2.0]).param());
        let b = g.leaf(&t(1, 2, &[3.0, 4.0]).param());
        let cat = g.concat_rows(&[a, b]).unwrap();
        let back = g.slice_rows(cat, 1, 2).unwrap();
        let s = g.mean_rows(back).unwrap();
        let s = g.mean_cols(s).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none() || g.grad(a).unwrap() == &[0.0, 0.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn transpose_flips_shape_and_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(&t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).param());
        let at = g.transpose(a).unwrap();
        assert_eq!(g.value(at).shape(), (3, 2));
        assert_eq!(g.value(at).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let picked = g.slice(at, 2, 3, 0, 1).unwrap();
        g.backward(picked).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
