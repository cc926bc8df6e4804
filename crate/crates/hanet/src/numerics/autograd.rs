//! Reverse-mode autodiff on a define-by-run tape of `Matrix` values.
//!
//! The op set is exactly what the detector, encoder, contrastive, replay and
//! distillation losses need; scalars are 1x1 matrices. Backward walks the
//! tape in reverse creation order with plain sequential loops, so gradient
//! accumulation order is fixed and runs are bit-reproducible.

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param,
    GatherRows { src: Var, rows: Vec<usize> },
    MatMul { a: Var, b: Var },
    MatMulTb { a: Var, b: Var },
    Add { a: Var, b: Var },
    MulElem { a: Var, b: Var },
    Affine { a: Var, mul: f64 },
    Gelu { a: Var },
    SoftmaxRows { a: Var },
    SelectRow { a: Var, row: usize },
    ConcatCols { a: Var, b: Var },
    SliceCols { a: Var, start: usize, end: usize },
    SumList { xs: Vec<Var> },
    LogSumExpList { xs: Vec<Var> },
    CosineSim { a: Var, b: Var },
    CeFromLogits { logits: Var, gold: usize },
    SoftCeFromLogits { logits: Var, target: Vec<f64> },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(usize, Var)>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1, "scalar() on non-scalar var");
        m.data()[0]
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Const)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(
            Matrix::from_vec(1, 1, vec![v]).expect("finite scalar"),
            Op::Const,
        )
    }

    /// Register a trainable leaf under a parameter slot. Each slot should be
    /// registered at most once per tape.
    pub fn param(&mut self, slot: usize, m: Matrix) -> Var {
        let v = self.push(m, Op::Param);
        self.params.push((slot, v));
        v
    }

    pub fn gather_rows(&mut self, src: Var, rows: Vec<usize>) -> Result<Var> {
        let s = self.value(src);
        let cols = s.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            if r >= s.rows() {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows: row {r} out of {}",
                    s.rows()
                )));
            }
            data.extend_from_slice(s.row(r));
        }
        let value = Matrix::from_vec(rows.len(), cols, data)?;
        Ok(self.push(value, Op::GatherRows { src, rows }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// a . b^T
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_tb(self.value(b))?;
        Ok(self.push(value, Op::MatMulTb { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "mul_elem")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Matrix::from_vec(self.value(a).rows(), self.value(a).cols(), data)?;
        Ok(self.push(value, Op::MulElem { a, b }))
    }

    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|x| mul * x + add).collect();
        let value =
            Matrix::from_vec(src.rows(), src.cols(), data).expect("affine keeps finiteness");
        self.push(value, Op::Affine { a, mul })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| gelu(x)).collect();
        let value = Matrix::from_vec(src.rows(), src.cols(), data).expect("gelu finite");
        self.push(value, Op::Gelu { a })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            softmax_into(src.row(r), value.row_mut(r));
        }
        self.push(value, Op::SoftmaxRows { a })
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let src = self.value(a);
        if row >= src.rows() {
            return Err(Error::InvalidArgument(format!(
                "select_row: row {row} out of {}",
                src.rows()
            )));
        }
        let value = Matrix::from_vec(1, src.cols(), src.row(row).to_vec())?;
        Ok(self.push(value, Op::SelectRow { a, row }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.rows() != 1 || mb.rows() != 1 {
            return Err(Error::InvalidArgument(
                "concat_cols expects row vectors".to_string(),
            ));
        }
        let mut data = ma.data().to_vec();
        data.extend_from_slice(mb.data());
        let value = Matrix::row_vector(data)?;
        Ok(self.push(value, Op::ConcatCols { a, b }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(a);
        if start >= end || end > src.cols() {
            return Err(Error::InvalidArgument(format!(
                "slice_cols: [{start}, {end}) out of {} cols",
                src.cols()
            )));
        }
        let mut data = Vec::with_capacity(src.rows() * (end - start));
        for r in 0..src.rows() {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let value = Matrix::from_vec(src.rows(), end - start, data)?;
        Ok(self.push(value, Op::SliceCols { a, start, end }))
    }

    pub fn sum_list(&mut self, xs: Vec<Var>) -> Result<Var> {
        let mut acc = 0.0;
        for &x in &xs {
            let m = self.value(x);
            if m.len() != 1 {
                return Err(Error::InvalidArgument(
                    "sum_list expects scalar vars".to_string(),
                ));
            }
            acc += m.data()[0];
        }
        let value = Matrix::from_vec(1, 1, vec![acc])?;
        Ok(self.push(value, Op::SumList { xs }))
    }

    /// log(sum_i exp(x_i)) over scalar vars, max-shifted for stability.
    pub fn log_sum_exp_list(&mut self, xs: Vec<Var>) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument(
                "log_sum_exp_list on empty list".to_string(),
            ));
        }
        let vals: Vec<f64> = xs.iter().map(|&x| self.scalar(x)).collect();
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let acc: f64 = vals.iter().map(|v| (v - m).exp()).sum();
        let value = Matrix::from_vec(1, 1, vec![m + acc.ln()])?;
        Ok(self.push(value, Op::LogSumExpList { xs }))
    }

    /// Cosine similarity of two row vectors; errors on a zero-norm input.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.rows() != 1 || mb.rows() != 1 || ma.cols() != mb.cols() {
            return Err(Error::InvalidArgument(
                "cosine_sim expects row vectors of equal length".to_string(),
            ));
        }
        let c = crate::numerics::matrix::cosine(ma.data(), mb.data())?;
        let value = Matrix::from_vec(1, 1, vec![c])?;
        Ok(self.push(value, Op::CosineSim { a, b }))
    }

    /// -log softmax(logits)[gold] for a 1xL logits row.
    pub fn ce_from_logits(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != 1 {
            return Err(Error::InvalidArgument(
                "ce_from_logits expects a logits row".to_string(),
            ));
        }
        if gold >= z.cols() {
            return Err(Error::InvalidArgument(format!(
                "gold index {gold} out of {} labels",
                z.cols()
            )));
        }
        let lse = log_sum_exp(z.data());
        let value = Matrix::from_vec(1, 1, vec![lse - z.data()[gold]])?;
        Ok(self.push(value, Op::CeFromLogits { logits, gold }))
    }

    /// -sum_j target_j * log softmax(logits)_j with a constant target
    /// distribution (soft cross-entropy for predict-level distillation).
    pub fn soft_ce_from_logits(&mut self, logits: Var, target: Vec<f64>) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != 1 || z.cols() != target.len() {
            return Err(Error::InvalidArgument(
                "soft_ce_from_logits shape mismatch".to_string(),
            ));
        }
        let lse = log_sum_exp(z.data());
        let mut acc = 0.0;
        for (t, zj) in target.iter().zip(z.data()) {
            acc += t * (lse - zj);
        }
        let value = Matrix::from_vec(1, 1, vec![acc])?;
        Ok(self.push(value, Op::SoftCeFromLogits { logits, target }))
    }

    /// Run reverse-mode accumulation from a scalar root. Returns per-slot
    /// parameter gradients keyed by the slot id given to `param`.
    pub fn backward(&self, root: Var) -> Result<Vec<(usize, Matrix)>> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(
                "backward root must be scalar".to_string(),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::GatherRows { src, rows } => {
                    let cols = g.cols();
                    let mut acc = self.take_or_zeros(&mut grads, *src);
                    for (r, &srow) in rows.iter().enumerate() {
                        let grow = &g.data()[r * cols..(r + 1) * cols];
                        let arow = acc.row_mut(srow);
                        for (a, gv) in arow.iter_mut().zip(grow) {
                            *a += gv;
                        }
                    }
                    grads[src.0] = Some(acc);
                }
                Op::MatMul { a, b } => {
                    let da = g.matmul_tb(self.value(*b))?;
                    let db = self.value(*a).matmul_ta(&g)?;
                    self.accumulate(&mut grads, *a, da)?;
                    self.accumulate(&mut grads, *b, db)?;
                }
                Op::MatMulTb { a, b } => {
                    let da = g.matmul(self.value(*b))?;
                    let db = g.matmul_ta(self.value(*a))?;
                    self.accumulate(&mut grads, *a, da)?;
                    self.accumulate(&mut grads, *b, db)?;
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, g.clone())?;
                    self.accumulate(&mut grads, *b, g)?;
                }
                Op::MulElem { a, b } => {
                    let da_data = g
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let db_data = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    let da = Matrix::from_vec(g.rows(), g.cols(), da_data)?;
                    let db = Matrix::from_vec(g.rows(), g.cols(), db_data)?;
                    self.accumulate(&mut grads, *a, da)?;
                    self.accumulate(&mut grads, *b, db)?;
                }
                Op::Affine { a, mul } => {
                    self.accumulate(&mut grads, *a, g.scale(*mul))?;
                }
                Op::Gelu { a } => {
                    let data = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, &x)| gv * gelu_prime(x))
                        .collect();
                    let da = Matrix::from_vec(g.rows(), g.cols(), data)?;
                    self.accumulate(&mut grads, *a, da)?;
                }
                Op::SoftmaxRows { a } => {
                    let p = &node.value;
                    let mut da = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let prow = p.row(r);
                        let grow = &g.data()[r * p.cols()..(r + 1) * p.cols()];
                        let inner = dot(grow, prow);
                        let drow = da.row_mut(r);
                        for j in 0..prow.len() {
                            drow[j] = prow[j] * (grow[j] - inner);
                        }
                    }
                    self.accumulate(&mut grads, *a, da)?;
                }
                Op::SelectRow { a, row } => {
                    let src = self.value(*a);
                    let mut acc = self.take_or_zeros(&mut grads, *a);
                    let arow = acc.row_mut(*row);
                    for (av, gv) in arow.iter_mut().zip(g.data()) {
                        *av += gv;
                    }
                    debug_assert_eq!(src.cols(), g.cols());
                    grads[a.0] = Some(acc);
                }
                Op::ConcatCols { a, b } => {
                    let na = self.value(*a).cols();
                    let da = Matrix::row_vector(g.data()[..na].to_vec())?;
                    let db = Matrix::row_vector(g.data()[na..].to_vec())?;
                    self.accumulate(&mut grads, *a, da)?;
                    self.accumulate(&mut grads, *b, db)?;
                }
                Op::SliceCols { a, start, end } => {
                    let src = self.value(*a);
                    let mut acc = self.take_or_zeros(&mut grads, *a);
                    for r in 0..src.rows() {
                        let grow = &g.data()[r * (end - start)..(r + 1) * (end - start)];
                        let arow = acc.row_mut(r);
                        for (j, gv) in grow.iter().enumerate() {
                            arow[start + j] += gv;
                        }
                    }
                    grads[a.0] = Some(acc);
                }
                Op::SumList { xs } => {
                    for &x in xs {
                        self.accumulate(&mut grads, x, g.clone())?;
                    }
                }
                Op::LogSumExpList { xs } => {
                    let lse = node.value.data()[0];
                    let gv = g.data()[0];
                    for &x in xs {
                        let w = (self.scalar(x) - lse).exp();
                        let dx = Matrix::from_vec(1, 1, vec![gv * w])?;
                        self.accumulate(&mut grads, x, dx)?;
                    }
                }
                Op::CosineSim { a, b } => {
                    let (u, v) = (self.value(*a), self.value(*b));
                    let c = node.value.data()[0];
                    let gv = g.data()[0];
                    let duu = dot(u.data(), u.data());
                    let dvv = dot(v.data(), v.data());
                    let denom = (duu * dvv).sqrt();
                    let da_data = u
                        .data()
                        .iter()
                        .zip(v.data())
                        .map(|(ui, vi)| gv * (vi / denom - c * ui / duu))
                        .collect();
                    let db_data = u
                        .data()
                        .iter()
                        .zip(v.data())
                        .map(|(ui, vi)| gv * (ui / denom - c * vi / dvv))
                        .collect();
                    let da = Matrix::row_vector(da_data)?;
                    let db = Matrix::row_vector(db_data)?;
                    self.accumulate(&mut grads, *a, da)?;
                    self.accumulate(&mut grads, *b, db)?;
                }
                Op::CeFromLogits { logits, gold } => {
                    let z = self.value(*logits);
                    let gv = g.data()[0];
                    let mut p = vec![0.0; z.cols()];
                    softmax_into(z.data(), &mut p);
                    let data = p
                        .iter()
                        .enumerate()
                        .map(|(j, pj)| gv * (pj - if j == *gold { 1.0 } else { 0.0 }))
                        .collect();
                    let dz = Matrix::row_vector(data)?;
                    self.accumulate(&mut grads, *logits, dz)?;
                }
                Op::SoftCeFromLogits { logits, target } => {
                    let z = self.value(*logits);
                    let gv = g.data()[0];
                    let tsum: f64 = target.iter().sum();
                    let mut p = vec![0.0; z.cols()];
                    softmax_into(z.data(), &mut p);
                    let data = p
                        .iter()
                        .zip(target)
                        .map(|(pj, tj)| gv * (pj * tsum - tj))
                        .collect();
                    let dz = Matrix::row_vector(data)?;
                    self.accumulate(&mut grads, *logits, dz)?;
                }
            }
        }

        let mut out = Vec::with_capacity(self.params.len());
        for &(slot, var) in &self.params {
            let g = grads[var.0]
                .take()
                .unwrap_or_else(|| Matrix::zeros(self.value(var).rows(), self.value(var).cols()));
            out.push((slot, g));
        }
        Ok(out)
    }

    fn take_or_zeros(&self, grads: &mut [Option<Matrix>], v: Var) -> Matrix {
        grads[v.0]
            .take()
            .unwrap_or_else(|| Matrix::zeros(self.value(v).rows(), self.value(v).cols()))
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) -> Result<()> {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }
}

fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
