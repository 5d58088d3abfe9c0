//! Minimal reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! Operations are recorded eagerly on a [`Tape`] during the forward pass and
//! replayed in reverse to accumulate exact gradients. The op set is exactly
//! what the diagnosis model needs; there are no N-D tensors, no broadcasting
//! beyond row/column vectors, and no higher-order derivatives.
//!
//! A tape is single-threaded. Node values are immutable once created, so a
//! finished tape may be shared across threads for read-only inference.

use crate::array::{sigmoid, Array};
use crate::error::{HcdError, Result};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// A recorded operation. Inputs are node ids; shapes live on the node values.
#[derive(Debug, Clone)]
enum Op {
    /// Input array: parameter or constant. No backward rule.
    Leaf,
    /// out = a . b
    Matmul { a: NodeId, b: NodeId },
    /// out = a + b (same shape)
    Add { a: NodeId, b: NodeId },
    /// out = a - b (same shape)
    Sub { a: NodeId, b: NodeId },
    /// out = a * b elementwise (same shape)
    Mul { a: NodeId, b: NodeId },
    /// out[i][j] = a[i][j] + row[0][j]
    AddRow { a: NodeId, row: NodeId },
    /// out = c * a for a compile-time constant c
    Scale { a: NodeId, c: f64 },
    /// out[i][j] = a[i][j] * s[i][0]
    MulColBroadcast { a: NodeId, s: NodeId },
    /// out = sigmoid(a) elementwise
    Sigmoid { a: NodeId },
    /// out = softmax of each row of a (max-subtracted)
    SoftmaxRows { a: NodeId },
    /// Same-length 1-D convolution down each column; kernel is w x 1, w odd.
    Conv1dCols { input: NodeId, kernel: NodeId },
    /// out = a^T
    Transpose { a: NodeId },
    /// out = row `idx` of a, as 1 x cols
    Row { a: NodeId, idx: usize },
    /// out = column `idx` of a, as rows x 1
    Col { a: NodeId, idx: usize },
    /// out[i] = a[indices[i]] (rows); backward scatter-adds
    GatherRows { a: NodeId, indices: Vec<usize> },
    /// Vertical concatenation of parts (equal widths)
    ConcatRows { parts: Vec<NodeId> },
    /// out = sum of all entries, 1 x 1
    Sum { a: NodeId },
    /// out[i][0] = sum of row i
    RowSum { a: NodeId },
    /// out[0][j] = mean of column j
    ColMean { a: NodeId },
    /// out = `times` copies of the single row of a
    RepeatRows { a: NodeId, times: usize },
    /// out[i][0] = product of a[i][j] over j with mask[i][j] == 1
    /// (empty selection gives the empty product, 1)
    ProdMaskedRows { a: NodeId, mask: Array },
    /// Binary cross-entropy summed over the column vector y against labels,
    /// with y clamped to [eps, 1 - eps].
    BceSum { y: NodeId, labels: Vec<f64> },
}

/// Clamp applied inside [`Tape::bce_sum`] before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

struct Node {
    value: Array,
    op: Op,
}

/// Wengert list: values plus the ops that produced them, in forward order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node, if any gradient flowed to it.
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or zeros of the given shape if none flowed.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Array {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Array::zeros(rows, cols),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input array (parameter or constant) and returns its node.
    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Array, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(HcdError::Shape {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(sa)
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(HcdError::Shape {
                op: "matmul",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = Array::zeros(ar, bc);
        for i in 0..ar {
            for t in 0..ac {
                let x = av.get(i, t);
                if x == 0.0 {
                    continue;
                }
                for j in 0..bc {
                    out.set(i, j, out.get(i, j) + x * bv.get(t, j));
                }
            }
        }
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Broadcast-adds a 1 x c row vector to every row of an r x c matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != ac {
            return Err(HcdError::Shape {
                op: "add_row",
                lhs: (ar, ac),
                rhs: (rr, rc),
            });
        }
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let mut out = Array::zeros(ar, ac);
        for i in 0..ar {
            for j in 0..ac {
                out.set(i, j, av.get(i, j) + rv.get(0, j));
            }
        }
        Ok(self.push(out, Op::AddRow { a, row }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.nodes[a.0].value.map(|x| c * x);
        self.push(out, Op::Scale { a, c })
    }

    /// Multiplies row i of `a` by the scalar `s[i][0]`.
    pub fn mul_col_broadcast(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (sr, sc) = self.shape(s);
        if sc != 1 || sr != ar {
            return Err(HcdError::Shape {
                op: "mul_col_broadcast",
                lhs: (ar, ac),
                rhs: (sr, sc),
            });
        }
        let (av, sv) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        let mut out = Array::zeros(ar, ac);
        for i in 0..ar {
            let f = sv.get(i, 0);
            for j in 0..ac {
                out.set(i, j, av.get(i, j) * f);
            }
        }
        Ok(self.push(out, Op::MulColBroadcast { a, s }))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.map(sigmoid);
        self.push(out, Op::Sigmoid { a })
    }

    /// Row-wise softmax with max subtraction. Each output row sums to 1.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (r, c) = av.shape();
        let mut out = Array::zeros(r, c);
        for i in 0..r {
            let row = av.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out.set(i, j, e);
                sum += e;
            }
            for j in 0..c {
                out.set(i, j, out.get(i, j) / sum);
            }
        }
        self.push(out, Op::SoftmaxRows { a })
    }

    /// Same-length 1-D convolution along the row axis, independently per
    /// column, zero-padded. The kernel must be w x 1 with odd w.
    pub fn conv1d_cols(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (kr, kc) = self.shape(kernel);
        if kc != 1 {
            return Err(HcdError::Shape {
                op: "conv1d_cols",
                lhs: self.shape(input),
                rhs: (kr, kc),
            });
        }
        if kr % 2 == 0 {
            return Err(HcdError::Config(format!(
                "conv1d kernel width must be odd, got {kr}"
            )));
        }
        let (iv, kv) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let (rows, cols) = iv.shape();
        let half = kr / 2;
        let mut out = Array::zeros(rows, cols);
        for i in 0..rows {
            for t in 0..kr {
                let src = i as isize + t as isize - half as isize;
                if src < 0 || src >= rows as isize {
                    continue;
                }
                let w = kv.get(t, 0);
                for j in 0..cols {
                    out.set(i, j, out.get(i, j) + w * iv.get(src as usize, j));
                }
            }
        }
        Ok(self.push(out, Op::Conv1dCols { input, kernel }))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (r, c) = av.shape();
        let mut out = Array::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.set(j, i, av.get(i, j));
            }
        }
        self.push(out, Op::Transpose { a })
    }

    /// Row `idx` of `a` as a 1 x cols array.
    pub fn row(&mut self, a: NodeId, idx: usize) -> Result<NodeId> {
        let (r, _) = self.shape(a);
        if idx >= r {
            return Err(HcdError::Index {
                what: "row",
                id: idx,
                len: r,
            });
        }
        let out = Array::row_vec(self.nodes[a.0].value.row(idx).to_vec());
        Ok(self.push(out, Op::Row { a, idx }))
    }

    /// Column `idx` of `a` as a rows x 1 array.
    pub fn col(&mut self, a: NodeId, idx: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if idx >= c {
            return Err(HcdError::Index {
                what: "column",
                id: idx,
                len: c,
            });
        }
        let av = &self.nodes[a.0].value;
        let out = Array::col_vec((0..r).map(|i| av.get(i, idx)).collect());
        Ok(self.push(out, Op::Col { a, idx }))
    }

    /// Selects rows of `a` by index, with repetition allowed.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut out = Array::zeros(indices.len(), c);
        for (i, &src) in indices.iter().enumerate() {
            if src >= r {
                return Err(HcdError::Index {
                    what: "gather row",
                    id: src,
                    len: r,
                });
            }
            for j in 0..c {
                out.set(i, j, av.get(src, j));
            }
        }
        Ok(self.push(
            out,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Stacks parts vertically. All parts must share a width.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(HcdError::Contract("concat_rows of zero parts".into()));
        }
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != cols {
                return Err(HcdError::Shape {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: (pr, pc),
                });
            }
            data.extend_from_slice(self.nodes[p.0].value.data());
            rows += pr;
        }
        let out = Array::from_vec(rows, cols, data)?;
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Sum of all entries as a 1 x 1 array.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Array::filled(1, 1, s), Op::Sum { a })
    }

    /// Per-row sums as a rows x 1 column.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (r, _) = av.shape();
        let out = Array::col_vec((0..r).map(|i| av.row(i).iter().sum()).collect());
        self.push(out, Op::RowSum { a })
    }

    /// Per-column means as a 1 x cols row (mean over the row axis).
    pub fn col_mean(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (r, c) = av.shape();
        let mut out = Array::zeros(1, c);
        for j in 0..c {
            let mut s = 0.0;
            for i in 0..r {
                s += av.get(i, j);
            }
            out.set(0, j, s / r as f64);
        }
        self.push(out, Op::ColMean { a })
    }

    /// Repeats a single row `times` times.
    pub fn repeat_rows(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(HcdError::Shape {
                op: "repeat_rows",
                lhs: (r, c),
                rhs: (1, c),
            });
        }
        let row = self.nodes[a.0].value.row(0).to_vec();
        let mut data = Vec::with_capacity(times * c);
        for _ in 0..times {
            data.extend_from_slice(&row);
        }
        let out = Array::from_vec(times, c, data)?;
        Ok(self.push(out, Op::RepeatRows { a, times }))
    }

    /// Per-row product over entries selected by a binary mask; the empty
    /// selection yields 1.
    pub fn prod_masked_rows(&mut self, a: NodeId, mask: &Array) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if mask.shape() != (r, c) {
            return Err(HcdError::Shape {
                op: "prod_masked_rows",
                lhs: (r, c),
                rhs: mask.shape(),
            });
        }
        let av = &self.nodes[a.0].value;
        let mut out = Array::zeros(r, 1);
        for i in 0..r {
            let mut p = 1.0;
            for j in 0..c {
                if mask.get(i, j) != 0.0 {
                    p *= av.get(i, j);
                }
            }
            out.set(i, 0, p);
        }
        Ok(self.push(
            out,
            Op::ProdMaskedRows {
                a,
                mask: mask.clone(),
            },
        ))
    }

    /// Binary cross-entropy of a column of probabilities against 0/1 labels,
    /// summed over the batch. Probabilities are clamped to
    /// [`BCE_EPS`, 1 - `BCE_EPS`] before the logarithms.
    pub fn bce_sum(&mut self, y: NodeId, labels: &[f64]) -> Result<NodeId> {
        let (r, c) = self.shape(y);
        if c != 1 || r != labels.len() {
            return Err(HcdError::Shape {
                op: "bce_sum",
                lhs: (r, c),
                rhs: (labels.len(), 1),
            });
        }
        let yv = &self.nodes[y.0].value;
        let mut total = 0.0;
        for (i, &r_i) in labels.iter().enumerate() {
            let p = yv.get(i, 0).clamp(BCE_EPS, 1.0 - BCE_EPS);
            total -= r_i * p.ln() + (1.0 - r_i) * (1.0 - p).ln();
        }
        Ok(self.push(
            Array::filled(1, 1, total),
            Op::BceSum {
                y,
                labels: labels.to_vec(),
            },
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss node. Every node that influenced the
    /// loss receives its exact gradient; nodes that did not are left empty.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lshape = self.shape(loss);
        if lshape != (1, 1) {
            return Err(HcdError::Contract(format!(
                "backward requires a scalar loss, got shape {lshape:?}"
            )));
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array::filled(1, 1, 1.0));

        for id in (0..self.nodes.len()).rev() {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backward_op(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_op(&self, id: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                // da += g . b^T
                let (ar, ac) = av.shape();
                let bc = bv.cols();
                let mut da = Array::zeros(ar, ac);
                for i in 0..ar {
                    for t in 0..ac {
                        let mut s = 0.0;
                        for j in 0..bc {
                            s += g.get(i, j) * bv.get(t, j);
                        }
                        da.set(i, t, s);
                    }
                }
                accumulate(grads, *a, &da);
                // db += a^T . g
                let mut db = Array::zeros(ac, bc);
                for t in 0..ac {
                    for i in 0..ar {
                        let x = av.get(i, t);
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..bc {
                            db.set(t, j, db.get(t, j) + x * g.get(i, j));
                        }
                    }
                }
                accumulate(grads, *b, &db);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, g);
                let neg = g.map(|x| -x);
                accumulate(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                let da = zip(g, &self.nodes[b.0].value, |x, y| x * y);
                let db = zip(g, &self.nodes[a.0].value, |x, y| x * y);
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::AddRow { a, row } => {
                accumulate(grads, *a, g);
                let (r, c) = g.shape();
                let mut drow = Array::zeros(1, c);
                for j in 0..c {
                    let mut s = 0.0;
                    for i in 0..r {
                        s += g.get(i, j);
                    }
                    drow.set(0, j, s);
                }
                accumulate(grads, *row, &drow);
            }
            Op::Scale { a, c } => {
                let da = g.map(|x| c * x);
                accumulate(grads, *a, &da);
            }
            Op::MulColBroadcast { a, s } => {
                let av = &self.nodes[a.0].value;
                let sv = &self.nodes[s.0].value;
                let (r, c) = av.shape();
                let mut da = Array::zeros(r, c);
                let mut ds = Array::zeros(r, 1);
                for i in 0..r {
                    let f = sv.get(i, 0);
                    let mut acc = 0.0;
                    for j in 0..c {
                        da.set(i, j, g.get(i, j) * f);
                        acc += g.get(i, j) * av.get(i, j);
                    }
                    ds.set(i, 0, acc);
                }
                accumulate(grads, *a, &da);
                accumulate(grads, *s, &ds);
            }
            Op::Sigmoid { a } => {
                let da = zip(g, &node.value, |gx, y| gx * y * (1.0 - y));
                accumulate(grads, *a, &da);
            }
            Op::SoftmaxRows { a } => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut da = Array::zeros(r, c);
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g.get(i, j) * y.get(i, j);
                    }
                    for j in 0..c {
                        da.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::Conv1dCols { input, kernel } => {
                let iv = &self.nodes[input.0].value;
                let kv = &self.nodes[kernel.0].value;
                let (rows, cols) = iv.shape();
                let w = kv.rows();
                let half = w / 2;
                let mut din = Array::zeros(rows, cols);
                let mut dker = Array::zeros(w, 1);
                for i in 0..rows {
                    for t in 0..w {
                        let src = i as isize + t as isize - half as isize;
                        if src < 0 || src >= rows as isize {
                            continue;
                        }
                        let src = src as usize;
                        let wv = kv.get(t, 0);
                        let mut kacc = dker.get(t, 0);
                        for j in 0..cols {
                            let gij = g.get(i, j);
                            din.set(src, j, din.get(src, j) + wv * gij);
                            kacc += gij * iv.get(src, j);
                        }
                        dker.set(t, 0, kacc);
                    }
                }
                accumulate(grads, *input, &din);
                accumulate(grads, *kernel, &dker);
            }
            Op::Transpose { a } => {
                let (r, c) = g.shape();
                let mut da = Array::zeros(c, r);
                for i in 0..r {
                    for j in 0..c {
                        da.set(j, i, g.get(i, j));
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::Row { a, idx } => {
                let (r, c) = self.shape(*a);
                let mut da = Array::zeros(r, c);
                for j in 0..c {
                    da.set(*idx, j, g.get(0, j));
                }
                accumulate(grads, *a, &da);
            }
            Op::Col { a, idx } => {
                let (r, c) = self.shape(*a);
                let mut da = Array::zeros(r, c);
                for i in 0..r {
                    da.set(i, *idx, g.get(i, 0));
                }
                accumulate(grads, *a, &da);
            }
            Op::GatherRows { a, indices } => {
                let (r, c) = self.shape(*a);
                let mut da = Array::zeros(r, c);
                for (i, &src) in indices.iter().enumerate() {
                    for j in 0..c {
                        da.set(src, j, da.get(src, j) + g.get(i, j));
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    let mut dp = Array::zeros(pr, pc);
                    for i in 0..pr {
                        for j in 0..pc {
                            dp.set(i, j, g.get(offset + i, j));
                        }
                    }
                    accumulate(grads, p, &dp);
                    offset += pr;
                }
            }
            Op::Sum { a } => {
                let (r, c) = self.shape(*a);
                let da = Array::filled(r, c, g.get(0, 0));
                accumulate(grads, *a, &da);
            }
            Op::RowSum { a } => {
                let (r, c) = self.shape(*a);
                let mut da = Array::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        da.set(i, j, g.get(i, 0));
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::ColMean { a } => {
                let (r, c) = self.shape(*a);
                let mut da = Array::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        da.set(i, j, g.get(0, j) / r as f64);
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::RepeatRows { a, times } => {
                let c = self.shape(*a).1;
                let mut da = Array::zeros(1, c);
                for i in 0..*times {
                    for j in 0..c {
                        da.set(0, j, da.get(0, j) + g.get(i, j));
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::ProdMaskedRows { a, mask } => {
                // Division-free leave-one-out products via prefix/suffix scans.
                let av = &self.nodes[a.0].value;
                let (r, c) = av.shape();
                let mut da = Array::zeros(r, c);
                let mut selected = Vec::new();
                for i in 0..r {
                    selected.clear();
                    for j in 0..c {
                        if mask.get(i, j) != 0.0 {
                            selected.push(j);
                        }
                    }
                    let m = selected.len();
                    if m == 0 {
                        continue;
                    }
                    let mut prefix = vec![1.0; m + 1];
                    for (t, &j) in selected.iter().enumerate() {
                        prefix[t + 1] = prefix[t] * av.get(i, j);
                    }
                    let mut suffix = vec![1.0; m + 1];
                    for t in (0..m).rev() {
                        suffix[t] = suffix[t + 1] * av.get(i, selected[t]);
                    }
                    let gi = g.get(i, 0);
                    for (t, &j) in selected.iter().enumerate() {
                        da.set(i, j, gi * prefix[t] * suffix[t + 1]);
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::BceSum { y, labels } => {
                let yv = &self.nodes[y.0].value;
                let mut dy = Array::zeros(labels.len(), 1);
                let gs = g.get(0, 0);
                for (i, &r_i) in labels.iter().enumerate() {
                    let raw = yv.get(i, 0);
                    // Outside the clamp band the loss is locally constant.
                    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&raw) {
                        continue;
                    }
                    dy.set(i, 0, gs * (-r_i / raw + (1.0 - r_i) / (1.0 - raw)));
                }
                accumulate(grads, *y, &dy);
            }
        }
    }
}

fn zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let (r, c) = a.shape();
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Array::from_vec(r, c, data).expect("zip preserves shape")
}

fn accumulate(grads: &mut [Option<Array>], id: NodeId, delta: &Array) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data().iter()) {
                *e += d;
            }
        }
        None => grads[id.0] = Some(delta.clone()),
    }
}
