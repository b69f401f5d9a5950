use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var, mode: Broadcast },
    AddRow { a: Var, bias: Var, cols: usize },
    Mul { a: Var, b: Var, mode: Broadcast },
    Relu { a: Var },
    Scale { a: Var, c: f64 },
    Sum { a: Var },
    Reshape { a: Var },
    Gather { table: Var, ids: Vec<Option<usize>>, dim: usize },
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Vec<f64>, classes: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul { a, b, .. } | Op::Add { a, b, .. } | Op::Mul { a, b, .. } => vec![*a, *b],
            Op::AddRow { a, bias, .. } => vec![*a, *bias],
            Op::Transpose { a, .. }
            | Op::Relu { a }
            | Op::Scale { a, .. }
            | Op::Sum { a }
            | Op::Reshape { a } => vec![*a],
            Op::Gather { table, .. } => vec![*table],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Dynamic reverse-mode tape.
///
/// Nodes are appended in evaluation order, so every input of a node has a
/// smaller index and the reverse insertion order is a valid topological order
/// for the backward sweep. A graph is built for one step and dropped after
/// [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

// Plain kernels, shared by forward and backward.

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// a: m×n, b: k×n -> m×k
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// a: m×k, c: m×n -> k×n
fn matmul_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, incoming: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&incoming).for_each(|(a, b)| *a += b),
        None => *slot = Some(incoming),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor; it participates in backward iff `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: tensor,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after [`Graph::backward`], `None` if unreachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2().ok_or_else(|| self.dim_err("matmul", a, b))?;
        let (k2, n) = tb.dims2().ok_or_else(|| self.dim_err("matmul", a, b))?;
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let out = matmul_nn(ta.data(), tb.data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::Matmul { a, b, m, k, n }, value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2().ok_or_else(|| Error::Dimension {
            op: "transpose",
            lhs: ta.shape().to_vec(),
            rhs: vec![],
        })?;
        let value = Tensor::matrix(cols, rows, transpose_raw(ta.data(), rows, cols))?;
        Ok(self.push(Op::Transpose { a, rows, cols }, value))
    }

    fn broadcast_mode(&self, op: &'static str, a: Var, b: Var) -> Result<(Broadcast, Vec<usize>)> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() {
            Ok((Broadcast::Same, sa.shape().to_vec()))
        } else if sb.is_scalar() {
            Ok((Broadcast::RhsScalar, sa.shape().to_vec()))
        } else if sa.is_scalar() {
            Ok((Broadcast::LhsScalar, sb.shape().to_vec()))
        } else {
            Err(self.dim_err(op, a, b))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, mode: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (da, db) = (self.value(a).data(), self.value(b).data());
        match mode {
            Broadcast::Same => da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect(),
            Broadcast::RhsScalar => da.iter().map(|x| f(*x, db[0])).collect(),
            Broadcast::LhsScalar => db.iter().map(|y| f(da[0], *y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mode, shape) = self.broadcast_mode("add", a, b)?;
        let value = Tensor::new(&shape, self.zip_broadcast(a, b, mode, |x, y| x + y))?;
        Ok(self.push(Op::Add { a, b, mode }, value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mode, shape) = self.broadcast_mode("mul", a, b)?;
        let value = Tensor::new(&shape, self.zip_broadcast(a, b, mode, |x, y| x * y))?;
        Ok(self.push(Op::Mul { a, b, mode }, value))
    }

    /// `a[i, j] + bias[j]` for a 2-D `a` and a 1-D `bias`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let Some((rows, cols)) = ta.dims2() else {
            return Err(self.dim_err("add_row", a, bias));
        };
        if tb.shape() != [cols] {
            return Err(self.dim_err("add_row", a, bias));
        }
        let bd = tb.data();
        let mut out = ta.data().to_vec();
        for r in 0..rows {
            out[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(bd)
                .for_each(|(o, b)| *o += b);
        }
        let value = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(Op::AddRow { a, bias, cols }, value))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(ta.shape(), out)?;
        Ok(self.push(Op::Relu { a }, value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape(), ta.data().iter().map(|x| x * c).collect())?;
        Ok(self.push(Op::Scale { a, c }, value))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Op::Sum { a }, Tensor::scalar(s)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape, ta.data().to_vec())?;
        Ok(self.push(Op::Reshape { a }, value))
    }

    /// Row gather from a `V×d` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ids: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        self.embedding_lookup_padded(table, &ids)
    }

    /// Like [`Graph::embedding_lookup`], but `None` yields an all-zero row that
    /// sends no gradient back to the table.
    pub fn embedding_lookup_padded(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let tt = self.value(table);
        let Some((rows, dim)) = tt.dims2() else {
            return Err(Error::Dimension {
                op: "embedding_lookup",
                lhs: tt.shape().to_vec(),
                rhs: vec![],
            });
        };
        if ids.is_empty() {
            return Err(Error::Contract("embedding_lookup with no ids".into()));
        }
        let mut out = vec![0.0; ids.len() * dim];
        for (slot, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= rows {
                    return Err(Error::Index {
                        op: "embedding_lookup",
                        index: id,
                        bound: rows,
                    });
                }
                out[slot * dim..(slot + 1) * dim].copy_from_slice(&tt.data()[id * dim..(id + 1) * dim]);
            }
        }
        let value = Tensor::matrix(ids.len(), dim, out)?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
                dim,
            },
            value,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let Some((batch, classes)) = tl.dims2() else {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        };
        if batch != targets.len() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: classes,
            });
        }
        let mut probs = vec![0.0; batch * classes];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &tl.data()[r * classes..(r + 1) * classes];
            let (lse, _) = log_sum_exp(row);
            total += lse - row[t];
            for (p, &x) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let value = Tensor::scalar(total / batch as f64);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
                classes,
            },
            value,
        ))
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are added into the `grad` buffer of every reachable leaf that
    /// requires them; calling twice accumulates twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let wants = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(upstream);
                }
                Op::Matmul { a, b, m, k, n } => {
                    if wants(a) {
                        let db = self.nodes[b.0].value.data();
                        accumulate(&mut grads[a.0], matmul_nt(&upstream, db, *m, *n, *k));
                    }
                    if wants(b) {
                        let da = self.nodes[a.0].value.data();
                        accumulate(&mut grads[b.0], matmul_tn(da, &upstream, *m, *k, *n));
                    }
                }
                Op::Transpose { a, rows, cols } => {
                    // upstream is cols×rows
                    accumulate(&mut grads[a.0], transpose_raw(&upstream, *cols, *rows));
                }
                Op::Add { a, b, mode } => {
                    let (ga, gb) = split_broadcast(&upstream, *mode, |_| 1.0, |_| 1.0);
                    if wants(a) {
                        accumulate(&mut grads[a.0], ga);
                    }
                    if wants(b) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Mul { a, b, mode } => {
                    let da = self.nodes[a.0].value.data();
                    let db = self.nodes[b.0].value.data();
                    // d(a*b)/da = b and vice versa, read at the broadcast position
                    let (ga, gb) = split_broadcast(
                        &upstream,
                        *mode,
                        |i| match mode {
                            Broadcast::RhsScalar => db[0],
                            _ => db[i],
                        },
                        |i| match mode {
                            Broadcast::LhsScalar => da[0],
                            _ => da[i],
                        },
                    );
                    if wants(a) {
                        accumulate(&mut grads[a.0], ga);
                    }
                    if wants(b) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::AddRow { a, bias, cols } => {
                    if wants(a) {
                        accumulate(&mut grads[a.0], upstream.clone());
                    }
                    if wants(bias) {
                        let mut gb = vec![0.0; *cols];
                        for row in upstream.chunks_exact(*cols) {
                            gb.iter_mut().zip(row).for_each(|(g, u)| *g += u);
                        }
                        accumulate(&mut grads[bias.0], gb);
                    }
                }
                Op::Relu { a } => {
                    let x = self.nodes[a.0].value.data();
                    let g = upstream
                        .iter()
                        .zip(x)
                        .map(|(u, &x)| if x > 0.0 { *u } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale { a, c } => {
                    accumulate(&mut grads[a.0], upstream.iter().map(|u| u * c).collect());
                }
                Op::Sum { a } => {
                    let n = self.nodes[a.0].value.numel();
                    accumulate(&mut grads[a.0], vec![upstream[0]; n]);
                }
                Op::Reshape { a } => {
                    accumulate(&mut grads[a.0], upstream);
                }
                Op::Gather { table, ids, dim } => {
                    let mut g = vec![0.0; self.nodes[table.0].value.numel()];
                    for (slot, id) in ids.iter().enumerate() {
                        if let Some(id) = id {
                            let src = &upstream[slot * dim..(slot + 1) * dim];
                            g[id * dim..(id + 1) * dim]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    accumulate(&mut grads[table.0], g);
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    probs,
                    classes,
                } => {
                    let scale = upstream[0] / targets.len() as f64;
                    let mut g = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        g[r * classes + t] -= 1.0;
                    }
                    g.iter_mut().for_each(|x| *x *= scale);
                    accumulate(&mut grads[logits.0], g);
                }
            }
        }

        for (idx, slot) in grads.into_iter().enumerate() {
            if let Some(g) = slot {
                let node = &mut self.nodes[idx];
                if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                    node.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}

fn split_broadcast(
    upstream: &[f64],
    mode: Broadcast,
    fa: impl Fn(usize) -> f64,
    fb: impl Fn(usize) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let full_a: Vec<f64> = upstream.iter().enumerate().map(|(i, u)| u * fa(i)).collect();
    let full_b: Vec<f64> = upstream.iter().enumerate().map(|(i, u)| u * fb(i)).collect();
    match mode {
        Broadcast::Same => (full_a, full_b),
        Broadcast::RhsScalar => (full_a, vec![full_b.iter().sum()]),
        Broadcast::LhsScalar => (vec![full_a.iter().sum()], full_b),
    }
}

/// Returns `(log Σ exp(x), max x)` with max-subtraction.
pub fn log_sum_exp(row: &[f64]) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|x| (x - max).exp()).sum();
    (max + s.ln(), max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, rows: &[&[f64]]) -> Var {
        g.leaf(Tensor::from_rows(rows).unwrap().with_grad(true))
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = leaf(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = leaf(&mut g, &[&[3.0, 4.0], &[5.0, 6.0]]);
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let r = leaf(&mut g, &[&[1.0, 2.0]]);
        let col = leaf(&mut g, &[&[3.0], &[4.0]]);
        let d = g.matmul(r, col).unwrap();
        assert_eq!(g.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[&[1.0, 2.0]]);
        let b = leaf(&mut g, &[&[1.0, 2.0]]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = g.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);

        let c = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(g.add(a, c), Err(Error::Dimension { .. })));
        assert!(matches!(g.mul(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mul_backward_product_rule() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![2.0]).unwrap().with_grad(true));
        let b = g.leaf(Tensor::vector(vec![5.0]).unwrap().with_grad(true));
        let p = g.mul(a, b).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[5.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn relu_gradient_is_zero_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0, 0.0, 3.0]).unwrap().with_grad(true));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn scalar_broadcast_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap().with_grad(true));
        let c = g.leaf(Tensor::scalar(2.0).with_grad(true));
        let p = g.mul(a, c).unwrap();
        let q = g.add(p, c).unwrap();
        let s = g.sum(q).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0, 2.0]);
        // 1 + 2 + 3 from the product plus 3 from the add
        assert_eq!(g.grad(c).unwrap(), &[9.0]);
    }

    #[test]
    fn cross_entropy_values_and_grad() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::from_rows(&[&[0.0, 0.0]]).unwrap().with_grad(true));
        let loss = g.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(l).unwrap(), &[-0.5, 0.5]);

        let l2 = g.leaf(Tensor::from_rows(&[&[10.0, 0.0]]).unwrap());
        let loss2 = g.softmax_cross_entropy(l2, &[0]).unwrap();
        let direct = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
        assert!((g.value(loss2).item() - direct).abs() < 1e-15);
        assert!((g.value(loss2).item() - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_is_stable_at_large_logits() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::from_rows(&[&[1000.0, -1000.0, 999.0]]).unwrap().with_grad(true));
        let loss = g.softmax_cross_entropy(l, &[2]).unwrap();
        let v = g.value(loss).item();
        assert!(v.is_finite());
        assert!((v - (1.0 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-12);
        g.backward(loss).unwrap();
        assert!(g.grad(l).unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::from_rows(&[&[0.0, 0.0]]).unwrap());
        assert!(matches!(
            g.softmax_cross_entropy(l, &[2]),
            Err(Error::Index { index: 2, bound: 2, .. })
        ));
    }

    #[test]
    fn embedding_gather_and_scatter() {
        let mut g = Graph::new();
        let table = leaf(&mut g, &[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let e = g.embedding_lookup(table, &[2, 0]).unwrap();
        assert_eq!(g.value(e).data(), &[5.0, 6.0, 1.0, 2.0]);

        let e2 = g.embedding_lookup(table, &[1, 1]).unwrap();
        let s = g.sum(e2).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);

        assert!(matches!(
            g.embedding_lookup(table, &[3]),
            Err(Error::Index { index: 3, .. })
        ));
    }

    #[test]
    fn backward_scalar_and_accumulation() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(1.5).with_grad(true));
        g.backward(w).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0]);

        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(0.3).with_grad(true));
        let x = g.constant(Tensor::scalar(2.0));
        let y = g.constant(Tensor::scalar(3.0));
        let wx = g.mul(w, x).unwrap();
        let wy = g.mul(w, y).unwrap();
        let loss = g.add(wx, wy).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad(true));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_grad() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(1.0).with_grad(true));
        let unused = g.leaf(Tensor::scalar(2.0).with_grad(true));
        let loss = g.scale(w, 3.0).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[3.0]);
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn transpose_roundtrip_gradient() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let t = g.transpose(a).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.value(t).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let w = g.constant(Tensor::from_rows(&[&[1.0, 10.0], &[100.0, 1000.0], &[0.0, 0.5]]).unwrap());
        let p = g.mul(t, w).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 100.0, 0.0, 10.0, 1000.0, 0.5]);
    }
}
