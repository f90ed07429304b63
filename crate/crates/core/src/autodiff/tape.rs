//! Operation tape: records every primitive executed during a forward pass and
//! replays it in reverse to accumulate gradients.
//!
//! The tape is append-only and single-threaded. Consumers of a tensor always
//! appear later on the tape than its producer, so one reverse sweep sees every
//! upstream gradient fully accumulated before it is propagated further.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use crate::autodiff::Tensor;
use crate::error::{DetaError, Result};

#[derive(Debug)]
enum Op {
    MatMul,
    Add,
    AddRow,
    Mul,
    Neg,
    Log,
    Exp,
    Sigmoid,
    Relu,
    SoftmaxRows,
    Sum,
    Mean,
    ConcatCols,
    SelectRows(Vec<usize>),
    ScalarMul(f64),
    ClampMin(f64),
}

struct Record {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Records primitive operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    records: RefCell<Vec<Record>>,
}

/// Interprets a shape as a (rows, cols) matrix; 1-D tensors count as one row.
fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape.len() {
        1 => Some((1, shape[0])),
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.borrow().is_empty()
    }

    fn push(&self, op: Op, inputs: Vec<Tensor>, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let output = Tensor::new(shape, data).expect("internal: op produced malformed tensor");
        self.records.borrow_mut().push(Record {
            op,
            inputs,
            output: output.clone(),
        });
        output
    }

    /// Matrix product `a @ b` for 2-D operands `[n,k] x [k,m]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DetaError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        {
            let ad = a.data_ref();
            let bd = b.data_ref();
            for i in 0..n {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * m..(i + 1) * m];
                for (p, &aip) in arow.iter().enumerate() {
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * m..(p + 1) * m];
                    for (o, &bpj) in orow.iter_mut().zip(brow) {
                        *o += aip * bpj;
                    }
                }
            }
        }
        Ok(self.push(Op::MatMul, vec![a.clone(), b.clone()], vec![n, m], out))
    }

    /// Elementwise sum. Accepts equal shapes, or a row vector broadcast over
    /// the rows of a matrix (`[n,d] + [d]` or `[n,d] + [1,d]`).
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa == sb {
            let data = {
                let ad = a.data_ref();
                let bd = b.data_ref();
                ad.iter().zip(bd.iter()).map(|(x, y)| x + y).collect()
            };
            return Ok(self.push(Op::Add, vec![a.clone(), b.clone()], sa, data));
        }
        // Row broadcast: b must be a single row with matching width.
        let a_mat = as_matrix(&sa);
        let b_mat = as_matrix(&sb);
        match (a_mat, b_mat) {
            (Some((n, d)), Some((1, db))) if d == db && sa.len() == 2 => {
                let mut out = vec![0.0; n * d];
                {
                    let ad = a.data_ref();
                    let bd = b.data_ref();
                    for i in 0..n {
                        for j in 0..d {
                            out[i * d + j] = ad[i * d + j] + bd[j];
                        }
                    }
                }
                Ok(self.push(Op::AddRow, vec![a.clone(), b.clone()], sa, out))
            }
            _ => Err(DetaError::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            }),
        }
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(DetaError::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = {
            let ad = a.data_ref();
            let bd = b.data_ref();
            ad.iter().zip(bd.iter()).map(|(x, y)| x * y).collect()
        };
        Ok(self.push(Op::Mul, vec![a.clone(), b.clone()], sa, data))
    }

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data_ref().iter().map(|x| -x).collect();
        Ok(self.push(Op::Neg, vec![a.clone()], a.shape(), data))
    }

    /// Natural log. Rejects non-finite and non-positive inputs so that every
    /// value on the tape stays finite.
    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        if a.data_ref().iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(DetaError::NonFinite { op: "log" });
        }
        let data = a.data_ref().iter().map(|x| x.ln()).collect();
        Ok(self.push(Op::Log, vec![a.clone()], a.shape(), data))
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data_ref().iter().map(|x| x.exp()).collect();
        Ok(self.push(Op::Exp, vec![a.clone()], a.shape(), data))
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data_ref().iter().map(|&x| stable_sigmoid(x)).collect();
        Ok(self.push(Op::Sigmoid, vec![a.clone()], a.shape(), data))
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data_ref().iter().map(|x| x.max(0.0)).collect();
        Ok(self.push(Op::Relu, vec![a.clone()], a.shape(), data))
    }

    /// Row-wise softmax with max-subtraction. Rejects non-finite input.
    pub fn softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        let shape = a.shape();
        let (n, d) = as_matrix(&shape).ok_or(DetaError::ShapeMismatch {
            op: "softmax_rows",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if d == 0 || a.data_ref().iter().any(|v| !v.is_finite()) {
            return Err(DetaError::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![0.0; n * d];
        {
            let ad = a.data_ref();
            for i in 0..n {
                let row = &ad[i * d..(i + 1) * d];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let orow = &mut out[i * d..(i + 1) * d];
                let mut sum = 0.0;
                for (o, &x) in orow.iter_mut().zip(row) {
                    *o = (x - max).exp();
                    sum += *o;
                }
                for o in orow.iter_mut() {
                    *o /= sum;
                }
            }
        }
        Ok(self.push(Op::SoftmaxRows, vec![a.clone()], shape, out))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data_ref().iter().sum();
        Ok(self.push(Op::Sum, vec![a.clone()], vec![1], vec![s]))
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        let n = a.numel();
        if n == 0 {
            return Err(DetaError::Empty("mean of zero-element tensor".into()));
        }
        let s: f64 = a.data_ref().iter().sum();
        Ok(self.push(Op::Mean, vec![a.clone()], vec![1], vec![s / n as f64]))
    }

    /// Joins rows side by side: `[n,d1] ++ [n,d2] -> [n,d1+d2]`. For a pair of
    /// 1-D vectors this is plain vector concatenation.
    pub fn concat_cols(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        let err = || DetaError::ShapeMismatch {
            op: "concat_cols",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (na, da) = as_matrix(&sa).ok_or_else(err)?;
        let (nb, db) = as_matrix(&sb).ok_or_else(err)?;
        if na != nb {
            return Err(err());
        }
        let d = da + db;
        let mut out = vec![0.0; na * d];
        {
            let ad = a.data_ref();
            let bd = b.data_ref();
            for i in 0..na {
                out[i * d..i * d + da].copy_from_slice(&ad[i * da..(i + 1) * da]);
                out[i * d + da..(i + 1) * d].copy_from_slice(&bd[i * db..(i + 1) * db]);
            }
        }
        let shape = if sa.len() == 1 && sb.len() == 1 {
            vec![d]
        } else {
            vec![na, d]
        };
        Ok(self.push(Op::ConcatCols, vec![a.clone(), b.clone()], shape, out))
    }

    /// Gathers the given rows of a 2-D tensor, in order.
    pub fn select_rows(&self, a: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let shape = a.shape();
        if shape.len() != 2 {
            return Err(DetaError::ShapeMismatch {
                op: "select_rows",
                lhs: shape,
                rhs: vec![indices.len()],
            });
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(DetaError::invalid(format!(
                "select_rows: index {bad} out of range for {n} rows"
            )));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        {
            let ad = a.data_ref();
            for &i in indices {
                out.extend_from_slice(&ad[i * d..(i + 1) * d]);
            }
        }
        Ok(self.push(
            Op::SelectRows(indices.to_vec()),
            vec![a.clone()],
            vec![indices.len(), d],
            out,
        ))
    }

    pub fn scalar_mul(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data_ref().iter().map(|x| x * c).collect();
        Ok(self.push(Op::ScalarMul(c), vec![a.clone()], a.shape(), data))
    }

    /// Elementwise `max(x, floor)`; used to clamp probabilities before logs.
    pub fn clamp_min(&self, a: &Tensor, floor: f64) -> Result<Tensor> {
        let data = a.data_ref().iter().map(|x| x.max(floor)).collect();
        Ok(self.push(Op::ClampMin(floor), vec![a.clone()], a.shape(), data))
    }

    /// Reverse sweep from a scalar root. On return every tensor reachable from
    /// the root carries `grad = d(root)/d(tensor)`; all other gradients are
    /// left untouched.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        if !root.is_scalar() {
            return Err(DetaError::NonScalarRoot {
                shape: root.shape(),
            });
        }
        let records = self.records.borrow();
        if !records.iter().any(|r| r.output.id() == root.id()) {
            return Err(DetaError::invalid(
                "backward: root was not produced on this tape",
            ));
        }

        // Mark everything the root depends on; keep one handle per tensor id.
        let mut reachable: HashSet<u64> = HashSet::new();
        let mut handles: HashMap<u64, Tensor> = HashMap::new();
        reachable.insert(root.id());
        handles.insert(root.id(), root.clone());
        for rec in records.iter().rev() {
            if reachable.contains(&rec.output.id()) {
                for input in &rec.inputs {
                    reachable.insert(input.id());
                    handles.entry(input.id()).or_insert_with(|| input.clone());
                }
            }
        }

        for t in handles.values() {
            t.zero_grad();
        }
        root.accumulate_grad(&[1.0]);

        for rec in records.iter().rev() {
            if !reachable.contains(&rec.output.id()) {
                continue;
            }
            let g = rec
                .output
                .grad()
                .expect("internal: reachable output missing grad");
            propagate(rec, &g);
        }
        Ok(())
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Routes the output gradient `g` of one record into its inputs.
fn propagate(rec: &Record, g: &[f64]) {
    match &rec.op {
        Op::MatMul => {
            let a = &rec.inputs[0];
            let b = &rec.inputs[1];
            let (n, k) = {
                let s = a.shape();
                (s[0], s[1])
            };
            let m = b.shape()[1];
            let ad = a.data();
            let bd = b.data();
            // dA = g @ B^T
            let mut da = vec![0.0; n * k];
            for i in 0..n {
                let grow = &g[i * m..(i + 1) * m];
                for p in 0..k {
                    let brow = &bd[p * m..(p + 1) * m];
                    let mut s = 0.0;
                    for (gj, bj) in grow.iter().zip(brow) {
                        s += gj * bj;
                    }
                    da[i * k + p] = s;
                }
            }
            // dB = A^T @ g
            let mut db = vec![0.0; k * m];
            for i in 0..n {
                let grow = &g[i * m..(i + 1) * m];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let dbrow = &mut db[p * m..(p + 1) * m];
                    for (dbj, gj) in dbrow.iter_mut().zip(grow) {
                        *dbj += aip * gj;
                    }
                }
            }
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        }
        Op::Add => {
            rec.inputs[0].accumulate_grad(g);
            rec.inputs[1].accumulate_grad(g);
        }
        Op::AddRow => {
            let a = &rec.inputs[0];
            let b = &rec.inputs[1];
            let d = b.numel();
            let n = a.numel() / d;
            a.accumulate_grad(g);
            let mut db = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    db[j] += g[i * d + j];
                }
            }
            b.accumulate_grad(&db);
        }
        Op::Mul => {
            let a = &rec.inputs[0];
            let b = &rec.inputs[1];
            let da: Vec<f64> = b.data_ref().iter().zip(g).map(|(y, gi)| y * gi).collect();
            let db: Vec<f64> = a.data_ref().iter().zip(g).map(|(x, gi)| x * gi).collect();
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        }
        Op::Neg => {
            let da: Vec<f64> = g.iter().map(|gi| -gi).collect();
            rec.inputs[0].accumulate_grad(&da);
        }
        Op::Log => {
            let a = &rec.inputs[0];
            let da: Vec<f64> = a.data_ref().iter().zip(g).map(|(x, gi)| gi / x).collect();
            a.accumulate_grad(&da);
        }
        Op::Exp => {
            let out = rec.output.data_ref();
            let da: Vec<f64> = out.iter().zip(g).map(|(y, gi)| y * gi).collect();
            rec.inputs[0].accumulate_grad(&da);
        }
        Op::Sigmoid => {
            let out = rec.output.data_ref();
            let da: Vec<f64> = out.iter().zip(g).map(|(s, gi)| s * (1.0 - s) * gi).collect();
            rec.inputs[0].accumulate_grad(&da);
        }
        Op::Relu => {
            let a = &rec.inputs[0];
            let da: Vec<f64> = a
                .data_ref()
                .iter()
                .zip(g)
                .map(|(x, gi)| if *x > 0.0 { *gi } else { 0.0 })
                .collect();
            a.accumulate_grad(&da);
        }
        Op::SoftmaxRows => {
            let out = rec.output.data_ref();
            let shape = rec.output.shape();
            let (n, d) = as_matrix(&shape).expect("softmax output shape");
            let mut da = vec![0.0; n * d];
            for i in 0..n {
                let s = &out[i * d..(i + 1) * d];
                let gi = &g[i * d..(i + 1) * d];
                let dot: f64 = s.iter().zip(gi).map(|(sj, gj)| sj * gj).sum();
                for j in 0..d {
                    da[i * d + j] = s[j] * (gi[j] - dot);
                }
            }
            drop(out);
            rec.inputs[0].accumulate_grad(&da);
        }
        Op::Sum => {
            let a = &rec.inputs[0];
            let da = vec![g[0]; a.numel()];
            a.accumulate_grad(&da);
        }
        Op::Mean => {
            let a = &rec.inputs[0];
            let n = a.numel();
            let da = vec![g[0] / n as f64; n];
            a.accumulate_grad(&da);
        }
        Op::ConcatCols => {
            let a = &rec.inputs[0];
            let b = &rec.inputs[1];
            let (na, da_w) = as_matrix(&a.shape()).expect("concat lhs shape");
            let (_, db_w) = as_matrix(&b.shape()).expect("concat rhs shape");
            let d = da_w + db_w;
            let mut da = vec![0.0; na * da_w];
            let mut db = vec![0.0; na * db_w];
            for i in 0..na {
                da[i * da_w..(i + 1) * da_w].copy_from_slice(&g[i * d..i * d + da_w]);
                db[i * db_w..(i + 1) * db_w].copy_from_slice(&g[i * d + da_w..(i + 1) * d]);
            }
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        }
        Op::SelectRows(indices) => {
            let a = &rec.inputs[0];
            let shape = a.shape();
            let (n, d) = (shape[0], shape[1]);
            let mut da = vec![0.0; n * d];
            for (row, &src) in indices.iter().enumerate() {
                for j in 0..d {
                    da[src * d + j] += g[row * d + j];
                }
            }
            a.accumulate_grad(&da);
        }
        Op::ScalarMul(c) => {
            let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
            rec.inputs[0].accumulate_grad(&da);
        }
        Op::ClampMin(floor) => {
            let a = &rec.inputs[0];
            let da: Vec<f64> = a
                .data_ref()
                .iter()
                .zip(g)
                .map(|(x, gi)| if *x > *floor { *gi } else { 0.0 })
                .collect();
            a.accumulate_grad(&da);
        }
    }
}
