use serde::{Deserialize, Serialize};

use super::{backward, backward_graph, gradient, DiffTensor, Result, Tape, Tensor, TensorError};

/// How a Hessian-vector product is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvpBackend {
    /// Differentiate `∇L · v` through a recorded backward sweep.
    #[default]
    DoubleBackward,
    /// Central difference of gradients along `v`.
    PearlmutterFd,
}

const FD_EPS: f64 = 1e-4;

/// `H · v`, where `H` is the Hessian of the scalar `loss` at `params`.
///
/// The finite-difference backend steps by `h = ε(1+‖θ‖)/(‖v‖+ε)` with
/// `ε = 1e-4` and returns zeros for a zero `v`.
pub fn hessian_vector_product<F>(loss: F, params: &Tensor, v: &Tensor, backend: HvpBackend) -> Result<Tensor>
where
    F: Fn(&DiffTensor) -> Result<DiffTensor>,
{
    if params.shape() != v.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "hessian_vector_product",
            lhs: params.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    match backend {
        HvpBackend::DoubleBackward => {
            let tape = Tape::new();
            let p = tape.leaf(params.clone());
            let l = loss(&p)?;
            let g = backward_graph(&l, &[&p])?.remove(0);
            let gv = g.dot(&DiffTensor::constant(v.clone()))?;
            Ok(backward(&gv, &[&p])?.remove(0))
        }
        HvpBackend::PearlmutterFd => {
            let vn = v.norm();
            if vn == 0.0 {
                return Ok(Tensor::zeros(v.shape()));
            }
            let h = FD_EPS * (1.0 + params.norm()) / (vn + FD_EPS);
            let shifted = |sign: f64| {
                let mut p = params.clone();
                for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                    *pi += sign * h * vi;
                }
                p
            };
            let (_, gp) = gradient(&loss, &shifted(1.0))?;
            let (_, gm) = gradient(&loss, &shifted(-1.0))?;
            let data = gp
                .data()
                .iter()
                .zip(gm.data())
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            Tensor::new(v.shape().to_vec(), data)
        }
    }
}
