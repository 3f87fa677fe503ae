use super::{DiffTensor, Op, Result, Tape, Tensor, TensorError};

/// Gradients of a scalar `root` with respect to each of `leaves`.
///
/// Leaves that do not feed into `root` get zeros of their own shape.
pub fn backward(root: &DiffTensor, leaves: &[&DiffTensor]) -> Result<Vec<Tensor>> {
    Ok(sweep(root, leaves, false)?.into_iter().map(|g| g.to_tensor()).collect())
}

/// Like [`backward`], but the sweep itself is recorded on the tape so the
/// returned gradients can be differentiated again.
pub fn backward_graph(root: &DiffTensor, leaves: &[&DiffTensor]) -> Result<Vec<DiffTensor>> {
    sweep(root, leaves, true)
}

/// Evaluates `f` on a fresh tape and returns its value and gradient.
pub fn gradient<F>(f: F, params: &Tensor) -> Result<(f64, Tensor)>
where
    F: FnOnce(&DiffTensor) -> Result<DiffTensor>,
{
    let tape = Tape::new();
    let p = tape.leaf(params.clone());
    let loss = f(&p)?;
    let mut g = backward(&loss, &[&p])?;
    Ok((loss.item(), g.remove(0)))
}

fn sweep(root: &DiffTensor, leaves: &[&DiffTensor], create_graph: bool) -> Result<Vec<DiffTensor>> {
    if root.value().len() != 1 {
        return Err(TensorError::NotScalar(root.shape().to_vec()));
    }
    let zeros = |leaf: &DiffTensor| DiffTensor::constant(Tensor::zeros(leaf.shape()));
    let Some(root_ref) = root.node.as_ref() else {
        return Ok(leaves.iter().map(|l| zeros(l)).collect());
    };
    let tape = root_ref.tape.clone();
    let n = root_ref.id + 1;
    let mut grads: Vec<Option<DiffTensor>> = vec![None; n];
    grads[root_ref.id] = Some(DiffTensor::constant(Tensor::filled(root.shape(), 1.0)));

    for id in (0..n).rev() {
        let (op, input_ids, requires) =
            tape.with_node(id, |node| (node.op.clone(), node.inputs.clone(), node.requires_grad));
        if !requires || input_ids.is_empty() {
            continue;
        }
        let Some(g) = grads[id].take() else {
            continue;
        };
        let needs: Vec<bool> = input_ids
            .iter()
            .map(|&i| tape.with_node(i, |n| n.requires_grad))
            .collect();
        let inputs: Vec<DiffTensor> = input_ids
            .iter()
            .zip(&needs)
            .map(|(&i, &need)| {
                if create_graph && need {
                    tape.tracked(i)
                } else {
                    DiffTensor::from_parts(tape.with_node(i, |n| n.value.clone()), None)
                }
            })
            .collect();
        let out = if create_graph {
            tape.tracked(id)
        } else {
            DiffTensor::from_parts(tape.with_node(id, |n| n.value.clone()), None)
        };
        let g = if create_graph { g } else { g.detach() };
        let input_grads = vjp(&op, &inputs, &out, &g, &needs)?;
        for ((&i, gi), need) in input_ids.iter().zip(input_grads).zip(&needs) {
            if !need {
                continue;
            }
            let Some(gi) = gi else { continue };
            grads[i] = Some(match grads[i].take() {
                Some(acc) => acc.add(&gi)?,
                None => gi,
            });
        }
    }

    leaves
        .iter()
        .map(|leaf| {
            let found = leaf.node.as_ref().and_then(|r| {
                if r.tape.same(&tape) && r.id < n {
                    grads[r.id].clone()
                } else {
                    None
                }
            });
            let g = found.unwrap_or_else(|| zeros(leaf));
            Ok(if create_graph { g } else { g.detach() })
        })
        .collect()
}

/// Vector-Jacobian products of one node, written with differentiable ops.
fn vjp(op: &Op, x: &[DiffTensor], y: &DiffTensor, g: &DiffTensor, needs: &[bool]) -> Result<Vec<Option<DiffTensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let out = match op {
        Op::Leaf | Op::Const => vec![],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.neg())],
        Op::Scale(c) => vec![Some(g.scale(*c))],
        Op::Mul => vec![
            if want(0) { Some(g.mul(&x[1])?) } else { None },
            if want(1) { Some(g.mul(&x[0])?) } else { None },
        ],
        Op::Div => vec![
            if want(0) { Some(g.div(&x[1])?) } else { None },
            if want(1) {
                Some(g.mul(y)?.div(&x[1])?.neg())
            } else {
                None
            },
        ],
        Op::MatMul { ta, tb } => {
            let (a, b) = (&x[0], &x[1]);
            let ga = if want(0) {
                Some(match (ta, tb) {
                    (false, false) => g.matmul_t(false, b, true)?,
                    (false, true) => g.matmul_t(false, b, false)?,
                    (true, false) => b.matmul_t(false, g, true)?,
                    (true, true) => b.matmul_t(true, g, true)?,
                })
            } else {
                None
            };
            let gb = if want(1) {
                Some(match (ta, tb) {
                    (false, false) => a.matmul_t(true, g, false)?,
                    (false, true) => g.matmul_t(true, a, false)?,
                    (true, false) => a.matmul_t(false, g, false)?,
                    (true, true) => g.matmul_t(true, a, true)?,
                })
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Tanh => vec![Some(g.sub(&g.mul(&y.mul(y)?)?)?)],
        Op::Relu => {
            let mask = x[0].value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            vec![Some(g.mul(&DiffTensor::constant(mask))?)]
        }
        Op::Exp => vec![Some(g.mul(y)?)],
        Op::Log => vec![Some(g.div(&x[0])?)],
        Op::Sqrt => vec![Some(g.div(&y.scale(2.0))?)],
        Op::Sum => vec![Some(g.broadcast(x[0].shape())?)],
        Op::Broadcast(_) => vec![Some(g.sum().reshape(x[0].shape())?)],
        Op::RowSum => vec![Some(g.expand_cols(x[0].shape()[1])?)],
        Op::ExpandCols(_) => vec![Some(g.row_sum()?)],
        Op::ColSum => vec![Some(g.expand_rows(x[0].shape()[0])?)],
        Op::ExpandRows(_) => vec![Some(g.col_sum()?)],
        Op::ConcatRows => {
            let mut start = 0;
            let mut parts = Vec::with_capacity(x.len());
            for (i, xi) in x.iter().enumerate() {
                let r = xi.shape()[0];
                parts.push(if want(i) {
                    Some(g.slice_rows(start, start + r)?)
                } else {
                    None
                });
                start += r;
            }
            parts
        }
        Op::SliceRows { start, .. } => vec![Some(g.pad_rows(*start, x[0].shape()[0])?)],
        Op::PadRows { start, .. } => {
            let r = x[0].shape()[0];
            vec![Some(g.slice_rows(*start, start + r)?)]
        }
        Op::Reshape(_) => vec![Some(g.reshape(x[0].shape())?)],
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let root = x.mul(&x).unwrap().sum();
        let g = backward(&root, &[&x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn dot_gradient_is_the_other_operand() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let b = tape.leaf(Tensor::vector(vec![4.0, 3.0, -1.0]));
        let root = a.dot(&b).unwrap();
        let g = backward(&root, &[&a, &b]).unwrap();
        assert_eq!(g[0].data(), b.data());
        assert_eq!(g[1].data(), a.data());
    }

    #[test]
    fn absent_leaf_gets_zeros() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::zeros(&[2, 3]));
        let root = a.sum();
        let g = backward(&root, &[&a, &unused]).unwrap();
        assert_eq!(g[1], Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(backward(&a, &[&a]), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn second_derivative_of_cube() {
        // d²(x³)/dx² = 6x
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0]));
        let y = x.mul(&x).unwrap().mul(&x).unwrap().sum();
        let g = backward_graph(&y, &[&x]).unwrap();
        assert!((g[0].data()[0] - 12.0).abs() < 1e-12);
        let h = backward(&g[0].sum(), &[&x]).unwrap();
        assert!((h[0].data()[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_sweeps_are_bit_identical() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::matrix(2, 3, vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4]).unwrap());
            let w = DiffTensor::constant(Tensor::matrix(3, 2, vec![1.0, 0.5, -0.3, 0.2, 0.9, -1.1]).unwrap());
            let root = x.matmul(&w).unwrap().tanh().softmax_rows().unwrap().ln().unwrap().sum();
            backward(&root, &[&x]).unwrap().remove(0)
        };
        let a = run();
        let b = run();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
