//! Scalar objectives: cosine-softmax class probabilities, cross-entropy,
//! entropy, the contrastive prompt-tuning loss, gradient cosine, the EMA of
//! classification gradients and the gradient-matching loss.

use serde::{Deserialize, Serialize};

use crate::encoders::{FrozenTextEncoder, ProjectionHead};
use crate::error::{Error, Result};
use crate::prompts::{ClassVocabulary, PromptBank, ViewSet};
use crate::tensor::{gradient, hessian_vector_product, DiffTensor, HvpBackend, Tensor};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_EMA_ALPHA: f64 = 0.9;

/// Stands in for `-inf` in masked log-sum-exp rows; `exp` of it is exactly 0.
const MASKED: f64 = -1e300;

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `[B, C]` logits `cos(w_c, e_b) / τ`.
pub fn cosine_logits(images: &DiffTensor, text: &DiffTensor, tau: f64) -> Result<DiffTensor> {
    check_tau(tau)?;
    let e = images.l2_normalize_rows()?;
    let w = text.l2_normalize_rows()?;
    Ok(e.matmul_t(false, &w, true)?.scale(1.0 / tau))
}

/// Class probabilities of one image feature against `C` text features.
pub fn clip_probabilities(e: &DiffTensor, w: &DiffTensor, tau: f64) -> Result<DiffTensor> {
    let d = e.shape().iter().product::<usize>();
    let logits = cosine_logits(&e.reshape(&[1, d])?, w, tau)?;
    let c = w.shape()[0];
    Ok(logits.softmax_rows()?.reshape(&[c])?)
}

fn check_labels(labels: &[usize], b: usize, c: usize) -> Result<()> {
    if labels.len() != b {
        return Err(Error::Data(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {l} out of range for {c} classes")));
    }
    Ok(())
}

fn one_hot(labels: &[usize], c: usize) -> Result<DiffTensor> {
    let mut m = vec![0.0; labels.len() * c];
    for (b, &l) in labels.iter().enumerate() {
        m[b * c + l] = 1.0;
    }
    Ok(DiffTensor::constant(Tensor::matrix(labels.len(), c, m)?))
}

/// Mean `-log p[label]` over a batch of probability rows.
pub fn cross_entropy(probs: &DiffTensor, labels: &[usize]) -> Result<DiffTensor> {
    let [b, c] = *probs.shape() else {
        return Err(Error::Data(format!(
            "expected [B, C] probabilities, got {:?}",
            probs.shape()
        )));
    };
    check_labels(labels, b, c)?;
    let picked = probs.mul(&one_hot(labels, c)?)?.row_sum()?;
    if picked.data().iter().any(|&p| p <= 0.0) {
        return Err(Error::Data("cross-entropy of a zero-probability label".into()));
    }
    Ok(picked.ln()?.mean().neg())
}

/// Cross-entropy computed from logits through a stable log-softmax.
pub fn cross_entropy_logits(logits: &DiffTensor, labels: &[usize]) -> Result<DiffTensor> {
    let [b, c] = *logits.shape() else {
        return Err(Error::Data(format!("expected [B, C] logits, got {:?}", logits.shape())));
    };
    check_labels(labels, b, c)?;
    let logp = logits.log_softmax_rows()?;
    Ok(logp.mul(&one_hot(labels, c)?)?.sum().scale(-1.0 / b as f64))
}

/// `-Σ p log p` of a probability vector, with `0 · log 0 = 0`.
pub fn entropy(probs: &DiffTensor) -> Result<DiffTensor> {
    if let Some(&p) = probs.data().iter().find(|&&p| p < 0.0 || p.is_nan()) {
        return Err(Error::Data(format!("entropy of a negative probability {p}")));
    }
    let zero_fill = probs.value().map(|p| if p == 0.0 { 1.0 } else { 0.0 });
    let safe = probs.add(&DiffTensor::constant(zero_fill))?;
    Ok(probs.mul(&safe.ln()?)?.sum().neg())
}

/// Entropy of the averaged prediction over the rows of `[A, C]` logits.
pub fn marginal_entropy(logits: &DiffTensor) -> Result<DiffTensor> {
    let p = logits.softmax_rows()?;
    let rows = p.shape()[0] as f64;
    entropy(&p.col_sum()?.scale(1.0 / rows))
}

/// Contrastive prompt-tuning loss over `4C` projected views.
///
/// `L = -Σ_i log( Σ_{j∈P(i)} exp(z_i·z_j/τ) / Σ_{j≠i} exp(z_i·z_j/τ) )`
/// where `P(i)` holds the other three views of the class of `i`.
pub fn cpt_loss(z: &DiffTensor, tau: f64) -> Result<DiffTensor> {
    check_tau(tau)?;
    let [n, _] = *z.shape() else {
        return Err(Error::Data(format!("expected [4C, d] features, got {:?}", z.shape())));
    };
    if n < 2 {
        return Err(Error::Data(format!("contrastive loss needs at least 2 views, got {n}")));
    }
    if n % 4 != 0 {
        return Err(Error::Data(format!("view count {n} is not a multiple of 4")));
    }
    let c = n / 4;
    let mut all_mask = vec![0.0; n * n];
    let mut pos_mask = vec![MASKED; n * n];
    for i in 0..n {
        all_mask[i * n + i] = MASKED;
        for j in 0..n {
            if j != i && j % c == i % c {
                pos_mask[i * n + j] = 0.0;
            }
        }
    }
    let sim = z.matmul_t(false, z, true)?.scale(1.0 / tau);
    let denom = sim
        .add(&DiffTensor::constant(Tensor::matrix(n, n, all_mask)?))?
        .logsumexp_rows()?;
    let numer = sim
        .add(&DiffTensor::constant(Tensor::matrix(n, n, pos_mask)?))?
        .logsumexp_rows()?;
    Ok(denom.sub(&numer)?.sum())
}

/// `g1·g2 / (‖g1‖‖g2‖)`.
pub fn grad_cosine(g1: &[f64], g2: &[f64]) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(Error::Data(format!(
            "gradient lengths differ: {} vs {}",
            g1.len(),
            g2.len()
        )));
    }
    let n1 = g1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = g2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Data("cosine of a zero gradient".into()));
    }
    let dot: f64 = g1.iter().zip(g2).map(|(a, b)| a * b).sum();
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

/// Exponential moving average of classification gradients over prompt
/// parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmState {
    pub ema_grad: Vec<f64>,
    pub alpha: f64,
    pub steps: u64,
}

impl GmState {
    pub fn new(len: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("EMA decay must lie in (0, 1), got {alpha}")));
        }
        Ok(Self {
            ema_grad: vec![0.0; len],
            alpha,
            steps: 0,
        })
    }

    /// First call copies `grad`; later calls blend `α·ema + (1-α)·grad`.
    pub fn update(&mut self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.ema_grad.len() {
            return Err(Error::Data(format!(
                "gradient of length {} for an EMA of length {}",
                grad.len(),
                self.ema_grad.len()
            )));
        }
        if self.steps == 0 {
            self.ema_grad.copy_from_slice(grad);
        } else {
            let a = self.alpha;
            for (e, g) in self.ema_grad.iter_mut().zip(grad) {
                *e = a * *e + (1.0 - a) * g;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Functional form of [`GmState::update`].
pub fn ema_update(mut state: GmState, grad: &[f64]) -> Result<GmState> {
    state.update(grad)?;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmOutcome {
    /// `1 - cos(ema, ∇L_CPT)`.
    pub loss: f64,
    pub cosine: f64,
    /// Gradient of the loss with respect to the prompt rows.
    pub grad: Tensor,
}

/// Gradient-matching loss and its prompt gradient, given the CPT gradient
/// already evaluated at `prompts`.
///
/// The EMA is a constant here. With `a` the EMA and `b = ∇L_CPT`, the
/// returned gradient is `H_CPT · v` for `v = ∂(1 - cos(a, b))/∂b`. Returns
/// `None` when `b` vanishes.
pub fn gm_from_cpt_grad<F>(
    cpt: F,
    prompts: &Tensor,
    cpt_grad: &[f64],
    state: &GmState,
    backend: HvpBackend,
) -> Result<Option<GmOutcome>>
where
    F: Fn(&DiffTensor) -> crate::tensor::Result<DiffTensor>,
{
    let a = &state.ema_grad;
    let b = cpt_grad;
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if state.steps == 0 || na == 0.0 {
        return Err(Error::Data("gradient matching needs a non-zero EMA gradient".into()));
    }
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nb == 0.0 {
        log::warn!("CPT gradient vanished; skipping gradient matching for this step");
        return Ok(None);
    }
    let cosine = grad_cosine(a, b)?;
    let v: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| -(ai / (na * nb) - cosine * bi / (nb * nb)))
        .collect();
    let v = Tensor::new(prompts.shape().to_vec(), v)?;
    let grad = hessian_vector_product(cpt, prompts, &v, backend)?;
    Ok(Some(GmOutcome {
        loss: 1.0 - cosine,
        cosine,
        grad,
    }))
}

/// Options shared by everything that evaluates the contrastive objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CptSettings {
    pub tau: f64,
    pub normalize_projection: bool,
}

impl Default for CptSettings {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            normalize_projection: true,
        }
    }
}

/// CPT loss as a function of the prompt rows, with encoder and head frozen.
pub fn cpt_objective<'a>(
    views: &'a ViewSet,
    encoder: &'a FrozenTextEncoder,
    head: &'a ProjectionHead,
    settings: CptSettings,
) -> impl Fn(&DiffTensor) -> crate::tensor::Result<DiffTensor> + 'a {
    let head_vars = head.constants();
    move |p: &DiffTensor| {
        let z = views
            .projected_views(encoder, p, &head_vars, settings.normalize_projection)
            .map_err(to_tensor_error)?;
        cpt_loss(&z, settings.tau).map_err(to_tensor_error)
    }
}

pub fn to_tensor_error(e: Error) -> crate::tensor::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => crate::tensor::TensorError::Invalid {
            op: "cpt",
            msg: other.to_string(),
        },
    }
}

/// Gradient-matching loss and prompt gradient for a bank on a class set.
#[allow(clippy::too_many_arguments)]
pub fn gm_loss_and_grad(
    bank: &PromptBank,
    vocab: &ClassVocabulary,
    encoder: &FrozenTextEncoder,
    head: &ProjectionHead,
    state: &GmState,
    backend: HvpBackend,
    settings: CptSettings,
) -> Result<Option<GmOutcome>> {
    let views = ViewSet::new(bank, vocab, encoder)?;
    let f = cpt_objective(&views, encoder, head, settings);
    let (_, cpt_grad) = gradient(&f, &bank.prompts)?;
    gm_from_cpt_grad(&f, &bank.prompts, cpt_grad.data(), state, backend)
}
