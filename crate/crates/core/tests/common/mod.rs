//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use selftpt_core::encoders::{EncoderConfig, FrozenTextEncoder, ProjectionHead};
use selftpt_core::prompts::{ClassVocabulary, PromptBank};
use selftpt_core::tensor::{backward, DiffTensor, Tape, Tensor, TensorError};

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Entries in `lo..hi` with a random sign.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, or the plain distance when both are tiny.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

type Objective<'a> = dyn Fn(&[DiffTensor]) -> Result<DiffTensor, TensorError> + 'a;

/// Central finite-difference gradient of a scalar function of plain tensors.
pub fn fd_gradient(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for j in 0..x.len() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + h;
        let up = f(&probe);
        probe.data_mut()[j] = orig - h;
        let down = f(&probe);
        probe.data_mut()[j] = orig;
        out.data_mut()[j] = (up - down) / (2.0 * h);
    }
    out
}

/// Largest relative error between reverse-mode and finite-difference
/// gradients of `f` over each of its inputs.
pub fn grad_check(inputs: &[Tensor], f: &Objective) -> f64 {
    let tape = Tape::new();
    let leaves: Vec<DiffTensor> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&leaves).unwrap();
    let refs: Vec<&DiffTensor> = leaves.iter().collect();
    let grads = backward(&loss, &refs).unwrap();
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let eval = |x: &Tensor| {
            let args: Vec<DiffTensor> = inputs
                .iter()
                .enumerate()
                .map(|(k, t)| DiffTensor::constant(if k == i { x.clone() } else { t.clone() }))
                .collect();
            f(&args).unwrap().item()
        };
        let fd = fd_gradient(&eval, &inputs[i], FD_STEP);
        worst = worst.max(rel_error(g.data(), fd.data()));
    }
    worst
}

/// Scalar `Σ y ⊙ w` so every output entry gets a distinct weight.
pub fn weighted_sum(y: &DiffTensor, w: &Tensor) -> Result<DiffTensor, TensorError> {
    Ok(y.mul(&DiffTensor::constant(w.clone()))?.sum())
}

/// Brute-force contrastive loss over the `4C` rows of `z`, with row `i`
/// belonging to class `i mod C`.
pub fn cpt_oracle(z: &Tensor, tau: f64) -> f64 {
    let n = z.rows();
    let c = n / 4;
    let dot = |i: usize, j: usize| z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let e = dot(i, j).exp();
            den += e;
            if j % c == i % c {
                num += e;
            }
        }
        total -= (num / den).ln();
    }
    total
}

/// Recursive EMA as a weighted sum: the first gradient carries `α^{T-1}`,
/// the t-th later one `(1-α)·α^{T-1-t}`.
pub fn ema_closed_form(grads: &[Vec<f64>], alpha: f64) -> Vec<f64> {
    let t = grads.len();
    let mut out = vec![0.0; grads[0].len()];
    for (k, g) in grads.iter().enumerate() {
        let w = if k == 0 {
            alpha.powi(t as i32 - 1)
        } else {
            (1.0 - alpha) * alpha.powi((t - 1 - k) as i32)
        };
        for (o, v) in out.iter_mut().zip(g) {
            *o += w * v;
        }
    }
    out
}

/// Small encoder and class set for second-order checks.
pub struct Tiny {
    pub encoder: FrozenTextEncoder,
    pub vocab: ClassVocabulary,
    pub bank: PromptBank,
    pub head: ProjectionHead,
}

pub fn tiny(seed: u64, classes: usize, prompt_len: usize, token_dim: usize) -> Tiny {
    let config = EncoderConfig {
        vocab_size: 32,
        token_dim,
        hidden_dim: 8,
        embed_dim: 6,
        max_len: 16,
        embedding_scale: 1.0,
        bias_scale: 0.1,
        position_scale: 1.0,
    };
    let encoder = FrozenTextEncoder::from_seed(seed, config).unwrap();
    let names = (0..classes).map(|k| format!("c{k}")).collect();
    let tokens = (0..classes).map(|k| vec![3 + 2 * k, 4 + 2 * k]).collect();
    let vocab = ClassVocabulary::new(names, tokens).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let bank = PromptBank {
        prompts: gaussian(&mut r, &[prompt_len, token_dim]),
        hand_ids: [0, 1, 2, 0],
    };
    let head = ProjectionHead::xavier(&mut r, 6, 16).unwrap();
    Tiny {
        encoder,
        vocab,
        bank,
        head,
    }
}

pub type BoxedObjective = Box<dyn Fn(&[DiffTensor]) -> Result<DiffTensor, TensorError>>;

/// A seeded gradient-check instance: inputs and a scalar objective of them.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub f: BoxedObjective,
}

impl Case {
    pub fn max_rel_error(&self) -> f64 {
        grad_check(&self.inputs, &*self.f)
    }
}

fn unary(
    x: Tensor,
    out_shape: &[usize],
    r: &mut impl Rng,
    op: impl Fn(&DiffTensor) -> Result<DiffTensor, TensorError> + 'static,
) -> Case {
    let w = gaussian(r, out_shape);
    Case {
        inputs: vec![x],
        f: Box::new(move |a| weighted_sum(&op(&a[0])?, &w)),
    }
}

fn binary(
    x: Tensor,
    y: Tensor,
    out_shape: &[usize],
    r: &mut impl Rng,
    op: impl Fn(&DiffTensor, &DiffTensor) -> Result<DiffTensor, TensorError> + 'static,
) -> Case {
    let w = gaussian(r, out_shape);
    Case {
        inputs: vec![x, y],
        f: Box::new(move |a| weighted_sum(&op(&a[0], &a[1])?, &w)),
    }
}

pub type CaseBuilder = fn(u64) -> Case;

/// Every differentiable tensor operation, each as a seeded instance.
pub fn op_cases() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("add", |s| {
            let r = &mut rng(s);
            binary(gaussian(r, &[3, 4]), gaussian(r, &[3, 4]), &[3, 4], r, |a, b| a.add(b))
        }),
        ("sub", |s| {
            let r = &mut rng(s);
            binary(gaussian(r, &[3, 4]), gaussian(r, &[3, 4]), &[3, 4], r, |a, b| a.sub(b))
        }),
        ("elementwise_mul", |s| {
            let r = &mut rng(s);
            binary(gaussian(r, &[3, 4]), gaussian(r, &[3, 4]), &[3, 4], r, |a, b| a.mul(b))
        }),
        ("div", |s| {
            let r = &mut rng(s);
            let den = away_from_zero(r, &[3, 4], 0.5, 2.0);
            binary(gaussian(r, &[3, 4]), den, &[3, 4], r, |a, b| a.div(b))
        }),
        ("scalar_mul", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[5]), &[5], r, |a| Ok(a.scale(-1.7)))
        }),
        ("neg", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[5]), &[5], r, |a| Ok(a.neg()))
        }),
        ("matmul", |s| {
            let r = &mut rng(s);
            binary(gaussian(r, &[3, 4]), gaussian(r, &[4, 2]), &[3, 2], r, |a, b| {
                a.matmul(b)
            })
        }),
        ("matmul_transposed", |s| {
            let r = &mut rng(s);
            binary(gaussian(r, &[4, 3]), gaussian(r, &[2, 4]), &[3, 2], r, |a, b| {
                a.matmul_t(true, b, true)
            })
        }),
        ("tanh", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[3, 3]), &[3, 3], r, |a| Ok(a.tanh()))
        }),
        ("relu", |s| {
            let r = &mut rng(s);
            unary(away_from_zero(r, &[3, 3], 0.1, 2.0), &[3, 3], r, |a| Ok(a.relu()))
        }),
        ("exp", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[3, 3]), &[3, 3], r, |a| Ok(a.exp()))
        }),
        ("log", |s| {
            let r = &mut rng(s);
            unary(uniform(r, &[3, 3], 0.5, 3.0), &[3, 3], r, |a| a.ln())
        }),
        ("sqrt", |s| {
            let r = &mut rng(s);
            unary(uniform(r, &[3, 3], 0.5, 3.0), &[3, 3], r, |a| a.sqrt())
        }),
        ("sum", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[3, 3]), &[1], r, |a| a.sum().reshape(&[1]))
        }),
        ("mean", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[3, 3]), &[1], r, |a| a.mean().reshape(&[1]))
        }),
        ("broadcast", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[1]), &[2, 3], r, |a| a.broadcast(&[2, 3]))
        }),
        ("row_sum", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[3, 4]), &[3], r, |a| a.row_sum())
        }),
        ("col_sum", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[3, 4]), &[4], r, |a| a.col_sum())
        }),
        ("expand_cols", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[3]), &[3, 2], r, |a| a.expand_cols(2))
        }),
        ("expand_rows", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[3]), &[2, 3], r, |a| a.expand_rows(2))
        }),
        ("concat_rows", |s| {
            let r = &mut rng(s);
            let w = gaussian(r, &[5, 3]);
            Case {
                inputs: vec![gaussian(r, &[2, 3]), gaussian(r, &[1, 3]), gaussian(r, &[2, 3])],
                f: Box::new(move |a| weighted_sum(&DiffTensor::concat_rows(&[&a[0], &a[1], &a[2]])?, &w)),
            }
        }),
        ("slice_rows", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[5, 3]), &[2, 3], r, |a| a.slice_rows(1, 3))
        }),
        ("pad_rows", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[2, 3]), &[5, 3], r, |a| a.pad_rows(2, 5))
        }),
        ("reshape", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[2, 3]), &[3, 2], r, |a| a.reshape(&[3, 2]))
        }),
        ("add_row_bias", |s| {
            let r = &mut rng(s);
            binary(gaussian(r, &[3, 4]), gaussian(r, &[4]), &[3, 4], r, |a, b| {
                a.add_row_bias(b)
            })
        }),
        ("dot", |s| {
            let r = &mut rng(s);
            binary(gaussian(r, &[6]), gaussian(r, &[6]), &[1], r, |a, b| {
                a.dot(b)?.reshape(&[1])
            })
        }),
        ("l2_norm", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[6]), &[1], r, |a| a.l2_norm()?.reshape(&[1]))
        }),
        ("l2_normalize", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[6]), &[6], r, |a| a.l2_normalize())
        }),
        ("row_norms", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[3, 4]), &[3], r, |a| a.row_norms())
        }),
        ("l2_normalize_rows", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[3, 4]), &[3, 4], r, |a| a.l2_normalize_rows())
        }),
        ("softmax_rows", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[3, 4]), &[3, 4], r, |a| a.softmax_rows())
        }),
        ("log_softmax_rows", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[3, 4]), &[3, 4], r, |a| a.log_softmax_rows())
        }),
        ("logsumexp_rows", |s| {
            let r = &mut rng(s);
            unary(gaussian(r, &[3, 4]).map(|v| 3.0 * v), &[3], r, |a| a.logsumexp_rows())
        }),
    ]
}

fn te(e: selftpt_core::Error) -> TensorError {
    selftpt_core::losses::to_tensor_error(e)
}

fn labels(r: &mut impl Rng, b: usize, c: usize) -> Vec<usize> {
    (0..b).map(|_| r.random_range(0..c)).collect()
}

/// Every composite loss except gradient matching, which is checked by
/// [`gm_fd_error`].
pub fn loss_cases() -> Vec<(&'static str, CaseBuilder)> {
    use selftpt_core::losses::*;
    vec![
        ("cosine_logits", |s| {
            let r = &mut rng(s);
            binary(gaussian(r, &[3, 5]), gaussian(r, &[4, 5]), &[3, 4], r, |e, w| {
                cosine_logits(e, w, 0.5).map_err(te)
            })
        }),
        ("clip_probabilities", |s| {
            let r = &mut rng(s);
            binary(gaussian(r, &[5]), gaussian(r, &[3, 5]), &[3], r, |e, w| {
                clip_probabilities(e, w, 0.5).map_err(te)
            })
        }),
        ("cross_entropy", |s| {
            let r = &mut rng(s);
            let y = labels(r, 4, 3);
            Case {
                inputs: vec![gaussian(r, &[4, 3])],
                f: Box::new(move |a| cross_entropy(&a[0].softmax_rows()?, &y).map_err(te)),
            }
        }),
        ("cross_entropy_logits", |s| {
            let r = &mut rng(s);
            let y = labels(r, 4, 3);
            Case {
                inputs: vec![gaussian(r, &[4, 3])],
                f: Box::new(move |a| cross_entropy_logits(&a[0], &y).map_err(te)),
            }
        }),
        ("classification_ce", |s| {
            let r = &mut rng(s);
            let y = labels(r, 4, 3);
            Case {
                inputs: vec![gaussian(r, &[4, 5]), gaussian(r, &[3, 5])],
                f: Box::new(move |a| {
                    cross_entropy_logits(&cosine_logits(&a[0], &a[1], DEFAULT_TAU).map_err(te)?, &y).map_err(te)
                }),
            }
        }),
        ("entropy", |s| {
            let r = &mut rng(s);
            Case {
                inputs: vec![gaussian(r, &[4])],
                f: Box::new(|a| entropy(&a[0].softmax_rows()?).map_err(te)),
            }
        }),
        ("marginal_entropy", |s| {
            let r = &mut rng(s);
            Case {
                inputs: vec![gaussian(r, &[3, 4])],
                f: Box::new(|a| marginal_entropy(&a[0]).map_err(te)),
            }
        }),
        ("cpt_loss", |s| {
            let r = &mut rng(s);
            let c = r.random_range(2..=4);
            let z = gaussian(r, &[4 * c, 3]).map(|v| 0.5 * v);
            Case {
                inputs: vec![z],
                f: Box::new(|a| cpt_loss(&a[0], DEFAULT_TAU).map_err(te)),
            }
        }),
        ("cpt_loss_normalized", |s| {
            let r = &mut rng(s);
            let c = r.random_range(2..=4);
            Case {
                inputs: vec![gaussian(r, &[4 * c, 3])],
                f: Box::new(|a| cpt_loss(&a[0].l2_normalize_rows()?, DEFAULT_TAU).map_err(te)),
            }
        }),
        ("cpt_through_encoder", |s| {
            let t = tiny(s, 2, 2, 4);
            let settings = CptSettings {
                tau: DEFAULT_TAU,
                normalize_projection: true,
            };
            let prompts = t.bank.prompts.clone();
            Case {
                inputs: vec![prompts],
                f: Box::new(move |a| {
                    let views = selftpt_core::prompts::ViewSet::new(&t.bank, &t.vocab, &t.encoder).map_err(te)?;
                    let f = cpt_objective(&views, &t.encoder, &t.head, settings);
                    f(&a[0])
                }),
            }
        }),
    ]
}

/// `1 - cos(ema, ∇L_CPT(P))` at plain prompts, the EMA held fixed.
pub fn gm_value(t: &Tiny, prompts: &Tensor, ema: &[f64]) -> f64 {
    use selftpt_core::losses::*;
    use selftpt_core::tensor::gradient;
    let views = selftpt_core::prompts::ViewSet::new(&t.bank, &t.vocab, &t.encoder).unwrap();
    let settings = CptSettings {
        tau: DEFAULT_TAU,
        normalize_projection: true,
    };
    let (_, g) = gradient(cpt_objective(&views, &t.encoder, &t.head, settings), prompts).unwrap();
    1.0 - grad_cosine(ema, g.data()).unwrap()
}

/// Relative error of the returned gradient-matching gradient against
/// central differences of the loss, on a C=2, M=2, d=4 instance.
pub fn gm_fd_error(seed: u64, backend: selftpt_core::tensor::HvpBackend) -> f64 {
    use selftpt_core::losses::*;
    let t = tiny(seed, 2, 2, 4);
    let mut r = rng(seed ^ 0xe4a);
    let ema: Vec<f64> = gaussian(&mut r, &[8]).into_data();
    let state = GmState {
        ema_grad: ema.clone(),
        alpha: DEFAULT_EMA_ALPHA,
        steps: 3,
    };
    let settings = CptSettings {
        tau: DEFAULT_TAU,
        normalize_projection: true,
    };
    let out = gm_loss_and_grad(&t.bank, &t.vocab, &t.encoder, &t.head, &state, backend, settings)
        .unwrap()
        .expect("non-zero CPT gradient");
    let fd = fd_gradient(&|p| gm_value(&t, p, &ema), &t.bank.prompts, 1e-5);
    rel_error(out.grad.data(), fd.data())
}
