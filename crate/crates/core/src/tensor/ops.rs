use std::rc::Rc;

use super::{DiffTensor, Op, Result, Tape, Tensor, TensorError};

/// Records `value` as the output of `op` when any input is tracked.
fn record(name: &'static str, op: Op, inputs: &[&DiffTensor], value: Tensor) -> Result<DiffTensor> {
    let mut tape: Option<&Tape> = None;
    for x in inputs {
        if let Some(n) = &x.node {
            match tape {
                None => tape = Some(&n.tape),
                Some(t) if !t.same(&n.tape) => return Err(TensorError::TapeMismatch { op: name }),
                Some(_) => {}
            }
        }
    }
    let value = Rc::new(value);
    let Some(tape) = tape else {
        return Ok(DiffTensor::from_parts(value, None));
    };
    let ids: Vec<usize> = inputs
        .iter()
        .map(|x| match x.node_id() {
            Some(id) => id,
            None => tape.push(Op::Const, Vec::new(), x.value.clone(), false),
        })
        .collect();
    let requires_grad = ids.iter().any(|&id| tape.with_node(id, |n| n.requires_grad));
    let id = tape.push(op, ids, value.clone(), requires_grad);
    Ok(tape.tracked(id))
}

fn same_shape(name: &'static str, a: &DiffTensor, b: &DiffTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matrix_dims(name: &'static str, x: &DiffTensor) -> Result<(usize, usize)> {
    match x.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::BadRank {
            op: name,
            expected: "a matrix",
            got: s.to_vec(),
        }),
    }
}

fn vector_len(name: &'static str, x: &DiffTensor) -> Result<usize> {
    match x.shape() {
        [n] => Ok(*n),
        s => Err(TensorError::BadRank {
            op: name,
            expected: "a vector",
            got: s.to_vec(),
        }),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// `C = op(A) · op(B)` on row-major buffers, `op` being an optional transpose.
pub(crate) fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let (rsa, csa) = if ta { (1, ac) } else { (ac, 1) };
    let (rsb, csb) = if tb { (1, bc) } else { (bc, 1) };
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: strides describe the row-major buffers of `a`, `b` and `out`
        // with the dimensions checked by the caller.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa as isize,
                csa as isize,
                b.data.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

impl DiffTensor {
    pub fn add(&self, other: &DiffTensor) -> Result<DiffTensor> {
        same_shape("add", self, other)?;
        let v = zip_map(self.value(), other.value(), |a, b| a + b);
        record("add", Op::Add, &[self, other], v)
    }

    pub fn sub(&self, other: &DiffTensor) -> Result<DiffTensor> {
        same_shape("sub", self, other)?;
        let v = zip_map(self.value(), other.value(), |a, b| a - b);
        record("sub", Op::Sub, &[self, other], v)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &DiffTensor) -> Result<DiffTensor> {
        same_shape("elementwise_mul", self, other)?;
        let v = zip_map(self.value(), other.value(), |a, b| a * b);
        record("elementwise_mul", Op::Mul, &[self, other], v)
    }

    pub fn div(&self, other: &DiffTensor) -> Result<DiffTensor> {
        same_shape("div", self, other)?;
        if other.data().contains(&0.0) {
            return Err(TensorError::Invalid {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let v = zip_map(self.value(), other.value(), |a, b| a / b);
        record("div", Op::Div, &[self, other], v)
    }

    pub fn scale(&self, c: f64) -> DiffTensor {
        let v = self.value().map(|a| a * c);
        record("scalar_mul", Op::Scale(c), &[self], v).expect("single-input op")
    }

    pub fn neg(&self) -> DiffTensor {
        self.scale(-1.0)
    }

    pub fn matmul(&self, other: &DiffTensor) -> Result<DiffTensor> {
        self.matmul_t(false, other, false)
    }

    /// `op(self) · op(other)` where `op` transposes when the flag is set.
    pub fn matmul_t(&self, ta: bool, other: &DiffTensor, tb: bool) -> Result<DiffTensor> {
        let (ar, ac) = matrix_dims("matmul", self)?;
        let (br, bc) = matrix_dims("matmul", other)?;
        let k_a = if ta { ar } else { ac };
        let k_b = if tb { bc } else { br };
        if k_a != k_b {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let v = gemm(self.value(), ta, other.value(), tb);
        record("matmul", Op::MatMul { ta, tb }, &[self, other], v)
    }

    pub fn tanh(&self) -> DiffTensor {
        let v = self.value().map(f64::tanh);
        record("tanh", Op::Tanh, &[self], v).expect("single-input op")
    }

    pub fn relu(&self) -> DiffTensor {
        let v = self.value().map(|a| a.max(0.0));
        record("relu", Op::Relu, &[self], v).expect("single-input op")
    }

    pub fn exp(&self) -> DiffTensor {
        let v = self.value().map(f64::exp);
        record("exp", Op::Exp, &[self], v).expect("single-input op")
    }

    pub fn ln(&self) -> Result<DiffTensor> {
        if let Some(&bad) = self.data().iter().find(|&&a| a <= 0.0 || a.is_nan()) {
            return Err(TensorError::NonPositive { op: "log", value: bad });
        }
        let v = self.value().map(f64::ln);
        record("log", Op::Log, &[self], v)
    }

    /// Elementwise square root; negative entries are rejected.
    pub fn sqrt(&self) -> Result<DiffTensor> {
        if let Some(&bad) = self.data().iter().find(|&&a| a < 0.0 || a.is_nan()) {
            return Err(TensorError::NonPositive { op: "sqrt", value: bad });
        }
        let v = self.value().map(f64::sqrt);
        record("sqrt", Op::Sqrt, &[self], v)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> DiffTensor {
        let v = Tensor::scalar(self.data().iter().sum());
        record("sum", Op::Sum, &[self], v).expect("single-input op")
    }

    pub fn mean(&self) -> DiffTensor {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Expands a single-element tensor to `shape`.
    pub fn broadcast(&self, shape: &[usize]) -> Result<DiffTensor> {
        if self.value().len() != 1 {
            return Err(TensorError::BadRank {
                op: "broadcast",
                expected: "a single element",
                got: self.shape().to_vec(),
            });
        }
        let v = Tensor::filled(shape, self.data()[0]);
        record("broadcast", Op::Broadcast(shape.to_vec()), &[self], v)
    }

    /// `[r, c] -> [r]`.
    pub fn row_sum(&self) -> Result<DiffTensor> {
        let (r, c) = matrix_dims("row_sum", self)?;
        let d = self.data();
        let v = Tensor::vector((0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect());
        record("row_sum", Op::RowSum, &[self], v)
    }

    /// `[r] -> [r, c]`, repeating each entry across a row.
    pub fn expand_cols(&self, c: usize) -> Result<DiffTensor> {
        let r = vector_len("expand_cols", self)?;
        let d = self.data();
        let mut out = Vec::with_capacity(r * c);
        for &x in d {
            out.extend(std::iter::repeat_n(x, c));
        }
        record(
            "expand_cols",
            Op::ExpandCols(c),
            &[self],
            Tensor {
                shape: vec![r, c],
                data: out,
            },
        )
    }

    /// `[r, c] -> [c]`.
    pub fn col_sum(&self) -> Result<DiffTensor> {
        let (r, c) = matrix_dims("col_sum", self)?;
        let d = self.data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        record("col_sum", Op::ColSum, &[self], Tensor::vector(out))
    }

    /// `[c] -> [r, c]`, stacking `r` copies.
    pub fn expand_rows(&self, r: usize) -> Result<DiffTensor> {
        let c = vector_len("expand_rows", self)?;
        let mut out = Vec::with_capacity(r * c);
        for _ in 0..r {
            out.extend_from_slice(self.data());
        }
        record(
            "expand_rows",
            Op::ExpandRows(r),
            &[self],
            Tensor {
                shape: vec![r, c],
                data: out,
            },
        )
    }

    pub fn concat_rows(parts: &[&DiffTensor]) -> Result<DiffTensor> {
        let Some(first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        };
        let (_, c) = matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, pc) = matrix_dims("concat_rows", p)?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(p.data());
        }
        record(
            "concat_rows",
            Op::ConcatRows,
            parts,
            Tensor {
                shape: vec![rows, c],
                data: out,
            },
        )
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<DiffTensor> {
        let (r, c) = matrix_dims("slice_rows", self)?;
        if start > end || end > r {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{end} out of bounds for {r} rows"),
            });
        }
        let v = Tensor {
            shape: vec![end - start, c],
            data: self.data()[start * c..end * c].to_vec(),
        };
        record("slice_rows", Op::SliceRows { start, end }, &[self], v)
    }

    /// Embeds a matrix at row `start` of a zero matrix with `total` rows.
    pub fn pad_rows(&self, start: usize, total: usize) -> Result<DiffTensor> {
        let (r, c) = matrix_dims("pad_rows", self)?;
        if start + r > total {
            return Err(TensorError::Invalid {
                op: "pad_rows",
                msg: format!("{r} rows at {start} exceed {total}"),
            });
        }
        let mut out = vec![0.0; total * c];
        out[start * c..(start + r) * c].copy_from_slice(self.data());
        record(
            "pad_rows",
            Op::PadRows { start, total },
            &[self],
            Tensor {
                shape: vec![total, c],
                data: out,
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<DiffTensor> {
        let v = self.to_tensor().reshaped(shape.to_vec())?;
        record("reshape", Op::Reshape(shape.to_vec()), &[self], v)
    }

    // Composite ops, built from the primitives above so that their
    // derivatives of every order come for free.

    pub fn dot(&self, other: &DiffTensor) -> Result<DiffTensor> {
        same_shape("dot", self, other)?;
        Ok(self.mul(other)?.sum())
    }

    pub fn l2_norm(&self) -> Result<DiffTensor> {
        self.dot(self)?.sqrt()
    }

    pub fn l2_normalize(&self) -> Result<DiffTensor> {
        if self.value().norm() == 0.0 {
            return Err(TensorError::ZeroNorm { op: "l2_normalize" });
        }
        let n = self.l2_norm()?.broadcast(self.shape())?;
        self.div(&n)
    }

    /// Euclidean norm of each row, `[r, c] -> [r]`.
    pub fn row_norms(&self) -> Result<DiffTensor> {
        self.mul(self)?.row_sum()?.sqrt()
    }

    pub fn l2_normalize_rows(&self) -> Result<DiffTensor> {
        let (_, c) = matrix_dims("l2_normalize_rows", self)?;
        let norms = self.row_norms()?;
        if norms.data().contains(&0.0) {
            return Err(TensorError::ZeroNorm {
                op: "l2_normalize_rows",
            });
        }
        self.div(&norms.expand_cols(c)?)
    }

    /// Row-wise `log Σ exp`, shifted by the (untracked) row maximum.
    ///
    /// A matrix yields one value per row; a vector is treated as a single
    /// row and yields a scalar.
    pub fn logsumexp_rows(&self) -> Result<DiffTensor> {
        if let [n] = self.shape() {
            let out = self.reshape(&[1, *n])?.logsumexp_rows()?;
            return out.reshape(&[]);
        }
        let (r, c) = matrix_dims("logsumexp_row", self)?;
        let maxes = Tensor::vector(
            (0..r)
                .map(|i| self.value().row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect(),
        );
        let maxes = DiffTensor::constant(maxes);
        let shifted = self.sub(&maxes.expand_cols(c)?)?;
        shifted.exp().row_sum()?.ln()?.add(&maxes)
    }

    pub fn log_softmax_rows(&self) -> Result<DiffTensor> {
        if let [n] = self.shape() {
            let out = self.reshape(&[1, *n])?.log_softmax_rows()?;
            return out.reshape(&[*n]);
        }
        let (_, c) = matrix_dims("log_softmax_row", self)?;
        let lse = self.logsumexp_rows()?;
        self.sub(&lse.expand_cols(c)?)
    }

    pub fn softmax_rows(&self) -> Result<DiffTensor> {
        Ok(self.log_softmax_rows()?.exp())
    }

    /// `X + b` with the bias vector added to every row.
    pub fn add_row_bias(&self, bias: &DiffTensor) -> Result<DiffTensor> {
        let (r, c) = matrix_dims("add_row_bias", self)?;
        let bc = vector_len("add_row_bias", bias)?;
        if bc != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        self.add(&bias.expand_rows(r)?)
    }
}

/// The op vocabulary exposed through [`apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    ScalarMul(f64),
    ElementwiseMul,
    MatMul,
    Tanh,
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    ConcatRows,
    SliceRows { start: usize, end: usize },
    Dot,
    L2Norm,
    L2Normalize,
    SoftmaxRow,
    LogsumexpRow,
}

impl OpKind {
    pub fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::ElementwiseMul | OpKind::MatMul | OpKind::Dot => Some(2),
            OpKind::ConcatRows => None,
            _ => Some(1),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::ScalarMul(_) => "scalar_mul",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::MatMul => "matmul",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::Dot => "dot",
            OpKind::L2Norm => "l2_norm",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::SoftmaxRow => "softmax_row",
            OpKind::LogsumexpRow => "logsumexp_row",
        }
    }
}

/// Applies `kind` to `inputs`, recording on the inputs' tape if any is tracked.
pub fn apply(kind: &OpKind, inputs: &[&DiffTensor]) -> Result<DiffTensor> {
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(TensorError::Invalid {
                op: kind.name(),
                msg: format!("expected {n} inputs, got {}", inputs.len()),
            });
        }
    }
    match kind {
        OpKind::Add => inputs[0].add(inputs[1]),
        OpKind::Sub => inputs[0].sub(inputs[1]),
        OpKind::ScalarMul(c) => Ok(inputs[0].scale(*c)),
        OpKind::ElementwiseMul => inputs[0].mul(inputs[1]),
        OpKind::MatMul => inputs[0].matmul(inputs[1]),
        OpKind::Tanh => Ok(inputs[0].tanh()),
        OpKind::Relu => Ok(inputs[0].relu()),
        OpKind::Exp => Ok(inputs[0].exp()),
        OpKind::Log => inputs[0].ln(),
        OpKind::Sum => Ok(inputs[0].sum()),
        OpKind::Mean => Ok(inputs[0].mean()),
        OpKind::ConcatRows => DiffTensor::concat_rows(inputs),
        OpKind::SliceRows { start, end } => inputs[0].slice_rows(*start, *end),
        OpKind::Dot => inputs[0].dot(inputs[1]),
        OpKind::L2Norm => inputs[0].l2_norm(),
        OpKind::L2Normalize => inputs[0].l2_normalize(),
        OpKind::SoftmaxRow => inputs[0].softmax_rows(),
        OpKind::LogsumexpRow => inputs[0].logsumexp_rows(),
    }
}
