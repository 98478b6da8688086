use super::tensor::{gemm, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows: `r × c → 1 × c`.
    Rows,
    /// Reduce over columns: `r × c → r × 1`.
    Cols,
}

/// Clamp applied to probabilities before a log in [`Graph::binary_cross_entropy`].
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Scale(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    ClampMax(Var, f64),
    Mean(Var, Axis),
    Sum(Var),
    L2Normalize(Var),
    EmbeddingLookup(Var, Vec<usize>),
    Concat(Vec<Var>),
    SoftmaxCrossEntropy(Var, Vec<usize>),
    BinaryCrossEntropy(Var, Vec<f64>),
    GradReverse(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::ClampMax(..) => "clamp_max",
            Op::Mean(..) => "mean_over_axis",
            Op::Sum(..) => "sum",
            Op::L2Normalize(..) => "l2_normalize",
            Op::EmbeddingLookup(..) => "embedding_lookup",
            Op::Concat(..) => "concat",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::BinaryCrossEntropy(..) => "binary_cross_entropy",
            Op::GradReverse(..) => "grad_reverse",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Tape of one forward pass. Nodes are appended in execution order, which
/// is a topological order; [`Graph::backward`] walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        assert!(value.is_finite(), "leaf values must be finite");
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.rows(), x.cols(), x.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.rg(&[a]);
        self.push(op, out, rg)
    }

    /// `a · b` for `a: m × k`, `b: k × n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut c = vec![0.0; ta.rows() * tb.cols()];
        gemm(
            ta.data(),
            ta.shape(),
            false,
            tb.data(),
            tb.shape(),
            false,
            &mut c,
            0.0,
        );
        let out = Tensor::new(ta.rows(), tb.cols(), c)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), out, rg)
    }

    /// `a · bᵀ` for `a: m × k`, `b: n × k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape(format!(
                "matmul_t: {:?} x {:?}ᵀ",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut c = vec![0.0; ta.rows() * tb.rows()];
        gemm(
            ta.data(),
            ta.shape(),
            false,
            tb.data(),
            tb.shape(),
            true,
            &mut c,
            0.0,
        );
        let out = Tensor::new(ta.rows(), tb.rows(), c)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMulT(a, b), out, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = x.get(i, j);
            }
        }
        let out = Tensor::new(c, r, d)?;
        let rg = self.rg(&[a]);
        self.push(Op::Transpose(a), out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let d = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.rows(), ta.cols(), d)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), out, rg)
    }

    /// Adds the `1 × c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::shape(format!(
                "add_row: {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let c = ta.cols();
        let d = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % c])
            .collect();
        let out = Tensor::new(ta.rows(), c, d)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::AddRow(a, b), out, rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let d = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.rows(), ta.cols(), d)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::Mul(a, b), out, rg)
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::ScalarMul(a, c), |v| v * c)
    }

    /// Multiplies `a` by the value of the `1 × 1` node `s`.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::shape(format!("scale: factor is {:?}", sv.shape())));
        }
        let k = sv.data()[0];
        let x = self.value(a);
        let out = Tensor::new(x.rows(), x.cols(), x.data().iter().map(|v| v * k).collect())?;
        let rg = self.rg(&[a, s]);
        self.push(Op::Scale(a, s), out, rg)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::DegenerateInput("log of a non-positive value".into()));
        }
        self.map(a, Op::Log(a), f64::ln)
    }

    /// `min(x, c)`; no gradient flows where the clamp is active.
    pub fn clamp_max(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::ClampMax(a, c), |v| v.min(c))
    }

    pub fn mean_over_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.shape();
        if r == 0 || c == 0 {
            return Err(Error::shape("mean over an empty tensor"));
        }
        let out = match axis {
            Axis::Rows => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (s, v) in acc.iter_mut().zip(x.row(i)) {
                        *s += v;
                    }
                }
                acc.iter_mut().for_each(|s| *s /= r as f64);
                Tensor::new(1, c, acc)?
            }
            Axis::Cols => Tensor::new(
                r,
                1,
                (0..r)
                    .map(|i| x.row(i).iter().sum::<f64>() / c as f64)
                    .collect(),
            )?,
        };
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a, axis), out, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    /// Normalizes every row to unit L2 norm. Rows with norm ≤ 1e-12 are rejected.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut d = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            let row = x.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= 1e-12 {
                return Err(Error::DegenerateInput(format!(
                    "l2_normalize: row {i} has norm {n:e}"
                )));
            }
            d.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::new(x.rows(), x.cols(), d)?;
        let rg = self.rg(&[a]);
        self.push(Op::L2Normalize(a), out, rg)
    }

    /// Gathers rows of `table` in `ids` order.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut d = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            if i >= t.rows() {
                return Err(Error::Bounds {
                    what: "embedding row",
                    index: i,
                    len: t.rows(),
                });
            }
            d.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(ids.len(), t.cols(), d)?;
        let rg = self.rg(&[table]);
        self.push(Op::EmbeddingLookup(table, ids.to_vec()), out, rg)
    }

    /// Stacks the inputs' rows; all inputs must share a column count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat of zero tensors"));
        };
        let cols = self.value(first).cols();
        let mut d = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape(format!(
                    "concat: {} columns vs {cols}",
                    t.cols()
                )));
            }
            rows += t.rows();
            d.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, d)?;
        let rg = self.rg(parts);
        self.push(Op::Concat(parts.to_vec()), out, rg)
    }

    /// Mean over rows of `logsumexp(z_i) - z_i[target_i]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != targets.len() || z.rows() == 0 {
            return Err(Error::shape(format!(
                "softmax_cross_entropy: {} rows, {} targets",
                z.rows(),
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= z.cols() {
                return Err(Error::Bounds {
                    what: "class target",
                    index: t,
                    len: z.cols(),
                });
            }
            let row = z.row(i);
            total += log_sum_exp(row) - row[t];
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        let rg = self.rg(&[logits]);
        self.push(Op::SoftmaxCrossEntropy(logits, targets.to_vec()), out, rg)
    }

    /// Mean binary cross-entropy of probabilities `prob` against `labels`,
    /// with `prob` clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn binary_cross_entropy(&mut self, prob: Var, labels: &[f64]) -> Result<Var> {
        let p = self.value(prob);
        if p.len() != labels.len() || labels.is_empty() {
            return Err(Error::shape(format!(
                "binary_cross_entropy: {} probabilities, {} labels",
                p.len(),
                labels.len()
            )));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        let out = Tensor::scalar(total / labels.len() as f64);
        let rg = self.rg(&[prob]);
        self.push(Op::BinaryCrossEntropy(prob, labels.to_vec()), out, rg)
    }

    /// Identity forward; negates the gradient on the way back.
    pub fn grad_reverse(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).clone();
        let rg = self.rg(&[a]);
        self.push(Op::GradReverse(a), out, rg)
    }

    /// Accumulates d`loss`/d`leaf` into every leaf that requires a gradient.
    /// Repeated calls add to the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward from a non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    let slot = &mut self.leaf_grads[i];
                    match slot {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.nodes[a.0].requires_grad {
                        let da = slot(&mut grads, *a, ta.len());
                        gemm(&g, y.shape(), false, tb.data(), tb.shape(), true, da, 1.0);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = slot(&mut grads, *b, tb.len());
                        gemm(ta.data(), ta.shape(), true, &g, y.shape(), false, db, 1.0);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.nodes[a.0].requires_grad {
                        let da = slot(&mut grads, *a, ta.len());
                        gemm(&g, y.shape(), false, tb.data(), tb.shape(), false, da, 1.0);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = slot(&mut grads, *b, tb.len());
                        gemm(&g, y.shape(), true, ta.data(), ta.shape(), false, db, 1.0);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = y.shape();
                    let da = slot(&mut grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] += g[i * c + j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.nodes[v.0].requires_grad {
                            add_into(slot(&mut grads, v, g.len()), &g);
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        add_into(slot(&mut grads, *a, g.len()), &g);
                    }
                    if self.nodes[b.0].requires_grad {
                        let c = y.cols();
                        let db = slot(&mut grads, *b, c);
                        for (k, gv) in g.iter().enumerate() {
                            db[k % c] += gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.nodes[a.0].requires_grad {
                        let da = slot(&mut grads, *a, g.len());
                        for ((d, gv), bv) in da.iter_mut().zip(&g).zip(tb.data()) {
                            *d += gv * bv;
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = slot(&mut grads, *b, g.len());
                        for ((d, gv), av) in db.iter_mut().zip(&g).zip(ta.data()) {
                            *d += gv * av;
                        }
                    }
                }
                Op::ScalarMul(a, c) => {
                    let da = slot(&mut grads, *a, g.len());
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += c * gv;
                    }
                }
                Op::Scale(a, s) => {
                    let (ta, k) = (&self.nodes[a.0].value, self.nodes[s.0].value.data()[0]);
                    if self.nodes[a.0].requires_grad {
                        let da = slot(&mut grads, *a, g.len());
                        for (d, gv) in da.iter_mut().zip(&g) {
                            *d += k * gv;
                        }
                    }
                    if self.nodes[s.0].requires_grad {
                        let dot: f64 = g.iter().zip(ta.data()).map(|(x, y)| x * y).sum();
                        slot(&mut grads, *s, 1)[0] += dot;
                    }
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, gv), xv) in da.iter_mut().zip(&g).zip(x.data()) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, gv), yv) in da.iter_mut().zip(&g).zip(y.data()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
                Op::Exp(a) => {
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, gv), yv) in da.iter_mut().zip(&g).zip(y.data()) {
                        *d += gv * yv;
                    }
                }
                Op::Log(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, gv), xv) in da.iter_mut().zip(&g).zip(x.data()) {
                        *d += gv / xv;
                    }
                }
                Op::ClampMax(a, c) => {
                    let x = &self.nodes[a.0].value;
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, gv), xv) in da.iter_mut().zip(&g).zip(x.data()) {
                        if xv < c {
                            *d += gv;
                        }
                    }
                }
                Op::Mean(a, axis) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let da = slot(&mut grads, *a, r * c);
                    match axis {
                        Axis::Rows => {
                            for i in 0..r {
                                for j in 0..c {
                                    da[i * c + j] += g[j] / r as f64;
                                }
                            }
                        }
                        Axis::Cols => {
                            for i in 0..r {
                                for j in 0..c {
                                    da[i * c + j] += g[i] / c as f64;
                                }
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    slot(&mut grads, *a, n).iter_mut().for_each(|d| *d += g[0]);
                }
                Op::L2Normalize(a) => {
                    let x = &self.nodes[a.0].value;
                    let c = x.cols();
                    let da = slot(&mut grads, *a, x.len());
                    for i in 0..x.rows() {
                        let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yr = y.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            da[i * c + j] += (gr[j] - yr[j] * yg) / n;
                        }
                    }
                }
                Op::EmbeddingLookup(table, ids) => {
                    let t = &self.nodes[table.0].value;
                    let c = t.cols();
                    let dt = slot(&mut grads, *table, t.len());
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            dt[id * c + j] += g[k * c + j];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        if self.nodes[p.0].requires_grad {
                            add_into(slot(&mut grads, *p, n), &g[off..off + n]);
                        }
                        off += n;
                    }
                }
                Op::SoftmaxCrossEntropy(logits, targets) => {
                    let z = &self.nodes[logits.0].value;
                    let c = z.cols();
                    let scale = g[0] / targets.len() as f64;
                    let dz = slot(&mut grads, *logits, z.len());
                    for (i, &t) in targets.iter().enumerate() {
                        let row = z.row(i);
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            let p = (row[j] - lse).exp();
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dz[i * c + j] += scale * (p - onehot);
                        }
                    }
                }
                Op::BinaryCrossEntropy(prob, labels) => {
                    let p = &self.nodes[prob.0].value;
                    let scale = g[0] / labels.len() as f64;
                    let dp = slot(&mut grads, *prob, p.len());
                    for ((d, &pv), &yv) in dp.iter_mut().zip(p.data()).zip(labels) {
                        if pv > PROB_CLAMP && pv < 1.0 - PROB_CLAMP {
                            *d += scale * (-yv / pv + (1.0 - yv) / (1.0 - pv));
                        }
                    }
                }
                Op::GradReverse(a) => {
                    let da = slot(&mut grads, *a, g.len());
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d -= gv;
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
