use std::collections::HashMap;

use ndarray::{s, Axis};

use super::params::{Grads, ParamId, ParamStore, Tensor};
use crate::basis::BasisFamily;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Gather { table: Var, rows: Vec<usize> },
    MatMul { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows { x: Var, s: Var },
    Relu(Var),
    Exp(Var),
    Sigmoid(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Concat(Vec<Var>),
    Column { x: Var, col: usize },
    RowSum(Var),
    RowDot(Var, Var),
    Softmax(Var),
    Bce { p: Var, labels: Vec<f64> },
    Mean(Var),
    Basis { t: Vec<f64>, params: Var, family: BasisFamily },
}

struct Node {
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

/// Reverse-mode tape over row-batched matrices. Every value is an
/// `rows × cols` matrix of `f64`; a minibatch occupies the rows.
///
/// The tape borrows its [`ParamStore`] immutably. Build the graph with the
/// recording methods, then call [`Tape::backward`] on a `1 × 1` loss.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    fault: bool,
    regions: u64,
}

const REGION_SEED: u64 = 0xcbf2_9ce4_8422_2325;

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            fault: false,
            regions: REGION_SEED,
        }
    }

    /// Hash of which linear piece every ReLU and clamp input fell on. Two
    /// forward passes with equal signatures lie on the same smooth piece.
    pub fn region_signature(&self) -> u64 {
        self.regions
    }

    fn note_regions(&mut self, pieces: impl Iterator<Item = u8>) {
        for p in pieces {
            self.regions = (self.regions ^ u64::from(p)).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Negative-control hook: scales every weight-matrix gradient by 1.5.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self) {
        self.fault = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            (None, _) => unreachable!("only parameter leaves are stored by reference"),
        }
    }

    /// The single entry of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    /// A column vector constant.
    pub fn column_const(&mut self, values: &[f64]) -> Var {
        self.constant(Tensor::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape"))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    /// Rows `rows` of `table`, one output row per index.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.nrows()) {
            return Err(shape_err(
                "gather",
                format!("row {bad} out of range for table with {} rows", t.nrows()),
            ));
        }
        let out = t.select(Axis(0), rows);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Embedding lookup of a single row.
    pub fn embed(&mut self, table: &str, index: usize) -> Result<Var> {
        let t = self.param_named(table)?;
        self.gather(t, &[index])
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ncols() != wv.nrows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} · {:?}", xv.dim(), wv.dim()),
            ));
        }
        let out = xv.dot(wv);
        Ok(self.push(out, Op::MatMul { x, w }))
    }

    /// Adds a `1 × cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.nrows() != 1 || bv.ncols() != xv.ncols() {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", xv.dim(), bv.dim())));
        }
        let out = xv + bv;
        Ok(self.push(out, Op::AddBias { x, b }))
    }

    /// `activation(x · W + b)` with `W = "{layer}.w"` and `b = "{layer}.b"`.
    pub fn dense(&mut self, layer: &str, x: Var, activation: Activation) -> Result<Var> {
        let w = self.param_named(&format!("{layer}.w"))?;
        let b = self.param_named(&format!("{layer}.b"))?;
        let h = self.matmul(x, w)?;
        let h = self.add_bias(h, b)?;
        Ok(match activation {
            Activation::Relu => self.relu(h),
            Activation::Identity => h,
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(shape_err(op, format!("{:?} vs {:?}", av.dim(), bv.dim())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        self.push(out, Op::Scale(x, c))
    }

    /// Multiplies row `r` of `x` by `s[r, 0]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.ncols() != 1 || sv.nrows() != xv.nrows() {
            return Err(shape_err("scale_rows", format!("{:?} by {:?}", xv.dim(), sv.dim())));
        }
        let out = xv * sv;
        Ok(self.push(out, Op::ScaleRows { x, s }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let pieces: Vec<u8> = self.value(x).iter().map(|&v| u8::from(v > 0.0)).collect();
        self.note_regions(pieces.into_iter());
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(crate::basis::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let pieces: Vec<u8> = self
            .value(x)
            .iter()
            .map(|&v| if v < lo { 0 } else if v > hi { 2 } else { 1 })
            .collect();
        self.note_regions(pieces.into_iter());
        let out = self.value(x).mapv(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    /// Column-wise concatenation of equally tall inputs.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| shape_err("concat", e.to_string()))?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Column `col` as a `rows × 1` matrix.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let xv = self.value(x);
        if col >= xv.ncols() {
            return Err(shape_err("column", format!("column {col} of {:?}", xv.dim())));
        }
        let out = xv.slice(s![.., col..col + 1]).to_owned();
        Ok(self.push(out, Op::Column { x, col }))
    }

    /// Sum of each row, as a column.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let out = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowSum(x))
    }

    /// Row-wise inner product of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let out = (self.value(a) * self.value(b)).sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.push(out, Op::RowDot(a, b)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    /// Mean binary cross-entropy of a `rows × 1` probability column.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.ncols() != 1 || pv.nrows() != labels.len() || labels.is_empty() {
            return Err(shape_err("bce", format!("{:?} for {} labels", pv.dim(), labels.len())));
        }
        let n = labels.len() as f64;
        let total: f64 = pv
            .column(0)
            .iter()
            .zip(labels)
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum();
        Ok(self.push(
            Tensor::from_elem((1, 1), total / n),
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean of all entries, as `1 × 1`.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.sum() / xv.len() as f64;
        self.push(Tensor::from_elem((1, 1), m), Op::Mean(x))
    }

    /// Evaluates `family` at every `t` (one row per value). `params` is a
    /// `1 × m` node holding the family's hyperparameters in family order;
    /// gradients flow into it.
    pub fn basis(&mut self, t: &[f64], params: Var, family: &BasisFamily) -> Result<Var> {
        let m = family.len();
        let pv = self.value(params);
        if pv.dim() != (1, m) {
            return Err(shape_err("basis", format!("params {:?} for {m} functions", pv.dim())));
        }
        let mut fam = family.clone();
        fam.set_params(pv.as_slice().expect("contiguous params"));
        let mut out = Tensor::zeros((t.len(), m));
        for (r, &tv) in t.iter().enumerate() {
            fam.eval_into(tv, out.row_mut(r).into_slice().expect("row slice"));
        }
        Ok(self.push(
            out,
            Op::Basis {
                t: t.to_vec(),
                params,
                family: fam,
            },
        ))
    }

    /// Reverse pass from a `1 × 1` node. Returns gradients for every
    /// parameter reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(shape_err("backward", format!("loss has shape {:?}", lv.dim())));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::from_elem((1, 1), 1.0));
        let mut grads = Grads::zeros_like(self.store);

        fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut adj[v.0] {
                Some(a) => *a += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::Gather { table, rows } => {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.dim());
                    for (r, &row) in rows.iter().enumerate() {
                        let mut dst = dt.row_mut(row);
                        dst += &g.row(r);
                    }
                    acc(&mut adj, *table, dt);
                }
                Op::MatMul { x, w } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let dx = g.dot(&wv.t());
                    let mut dw = xv.t().dot(&g);
                    if self.fault {
                        dw *= 1.5;
                    }
                    acc(&mut adj, *x, dx);
                    acc(&mut adj, *w, dw);
                }
                Op::AddBias { x, b } => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *b, db);
                    acc(&mut adj, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Scale(x, c) => acc(&mut adj, *x, g * *c),
                Op::ScaleRows { x, s } => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let ds = (&g * xv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dx = &g * sv;
                    acc(&mut adj, *x, dx);
                    acc(&mut adj, *s, ds);
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    ndarray::Zip::from(&mut dx)
                        .and(self.value(*x))
                        .for_each(|d, &xv| {
                            if xv <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(&mut adj, *x, dx);
                }
                Op::Exp(x) => {
                    let y = node.value.as_ref().expect("exp value");
                    acc(&mut adj, *x, g * y);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().expect("sigmoid value");
                    let dy = y.mapv(|s| s * (1.0 - s));
                    acc(&mut adj, *x, g * dy);
                }
                Op::Clamp { x, lo, hi } => {
                    let mut dx = g;
                    ndarray::Zip::from(&mut dx)
                        .and(self.value(*x))
                        .for_each(|d, &xv| {
                            if xv < *lo || xv > *hi {
                                *d = 0.0
                            }
                        });
                    acc(&mut adj, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut adj, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Column { x, col } => {
                    let mut dx = Tensor::zeros(self.value(*x).dim());
                    dx.slice_mut(s![.., *col..*col + 1]).assign(&g);
                    acc(&mut adj, *x, dx);
                }
                Op::RowSum(x) => {
                    let dim = self.value(*x).dim();
                    let dx = g.broadcast(dim).expect("row broadcast").to_owned();
                    acc(&mut adj, *x, dx);
                }
                Op::RowDot(a, b) => {
                    let da = self.value(*b) * &g;
                    let db = self.value(*a) * &g;
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let inner = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dx = y * &(&g - &inner);
                    acc(&mut adj, *x, dx);
                }
                Op::Bce { p, labels } => {
                    let pv = self.value(*p);
                    let n = labels.len() as f64;
                    let up = g[[0, 0]];
                    let mut dp = Tensor::zeros(pv.dim());
                    for (r, &y) in labels.iter().enumerate() {
                        let pr = pv[[r, 0]];
                        dp[[r, 0]] = up * (-y / pr + (1.0 - y) / (1.0 - pr)) / n;
                    }
                    acc(&mut adj, *p, dp);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let dx = Tensor::from_elem(xv.dim(), g[[0, 0]] / xv.len() as f64);
                    acc(&mut adj, *x, dx);
                }
                Op::Basis { t, params, family } => {
                    let m = family.len();
                    let mut dp = Tensor::zeros((1, m));
                    let mut local = vec![0.0; m];
                    for (r, &tv) in t.iter().enumerate() {
                        family.grad_param_into(tv, &mut local);
                        for j in 0..m {
                            dp[[0, j]] += g[[r, j]] * local[j];
                        }
                    }
                    acc(&mut adj, *params, dp);
                }
            }
        }
        Ok(grads)
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Softmax of a plain vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}
