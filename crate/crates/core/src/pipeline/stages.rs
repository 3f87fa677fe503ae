use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{LrSchedule, TrainConfig};
use super::cost::{CostMeter, Stopwatch};
use crate::encoders::{FrozenTextEncoder, ProjectionHead};
use crate::error::{Error, Result};
use crate::losses::{
    cosine_logits, cpt_loss, cpt_objective, cross_entropy_logits, gm_from_cpt_grad, grad_cosine, to_tensor_error,
    GmState,
};
use crate::prompts::{ClassVocabulary, PromptBank, ViewSet, HAND_PROMPT_LEN};
use crate::rng::{indexed_substream, substream, Stream};
use crate::synth::{ClassSplit, LabeledSet};
use crate::tensor::{backward, gradient, DiffTensor, Tape, Tensor};

/// One stage-1 optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub cpt: Option<f64>,
    pub gm: Option<f64>,
    /// Cosine between this step's CE and CPT prompt gradients.
    pub cos: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub bank: PromptBank,
    pub head: ProjectionHead,
    pub gm_state: GmState,
    pub log: Vec<StepLog>,
}

/// Prompt bank initialized from the hand prompt and a Xavier head drawn
/// from the `init` substream of `cfg.seed`.
pub fn init_model(
    encoder: &FrozenTextEncoder,
    hand_ids: [usize; HAND_PROMPT_LEN],
    cfg: &TrainConfig,
) -> Result<(PromptBank, ProjectionHead)> {
    let bank = PromptBank::from_hand_prompt(encoder, hand_ids, cfg.prompt_len)?;
    let mut rng = substream(cfg.seed, Stream::Init);
    let head = ProjectionHead::xavier(&mut rng, encoder.embed_dim(), cfg.proj_dim)?;
    Ok((bank, head))
}

fn sgd(param: &mut Tensor, grad: &Tensor, lr: f64) {
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
}

fn finite(step: usize, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            step,
            detail: format!("{name} loss is {v}"),
        })
    }
}

/// Source prompt learning: cross-entropy plus (optionally) the contrastive
/// loss and gradient matching, optimized with plain SGD.
///
/// Each step updates `P` by `∇ce + w_cpt·∇cpt + w_gm·∇gm` and the head by
/// `w_cpt·∇cpt`; gradient matching only ever touches `P`.
pub fn stage1_train(
    encoder: &FrozenTextEncoder,
    source: &ClassSplit,
    mut bank: PromptBank,
    mut head: ProjectionHead,
    cfg: &TrainConfig,
) -> Result<Stage1Output> {
    cfg.validate()?;
    let mut gm_state = GmState::new(bank.prompts.len(), cfg.alpha)?;
    let n = source.train.len();
    if n == 0 {
        return Err(Error::Data("source split has no training images".into()));
    }
    let views = ViewSet::new(&bank, &source.vocab, encoder)?;
    let steps_per_epoch = n.div_ceil(cfg.batch);
    let schedule = LrSchedule::new(cfg, steps_per_epoch);
    let settings = cfg.cpt_settings();
    let mut log = Vec::with_capacity(steps_per_epoch * cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut indexed_substream(cfg.seed, Stream::Batching, epoch as u32));
        for idx in order.chunks(cfg.batch) {
            let lr = schedule.lr(step);
            let tape = Tape::new();
            let p = tape.leaf(bank.prompts.clone());
            let w = views.class_features(encoder, &p)?;
            let (x, y) = source.train.batch(idx)?;
            let ce = cross_entropy_logits(&cosine_logits(&x, &w, cfg.tau_cls)?, &y)?;
            let ce_value = finite(step, "cross-entropy", ce.item())?;
            let g_ce = backward(&ce, &[&p])?.remove(0);
            gm_state.update(g_ce.data())?;

            let mut entry = StepLog {
                step,
                epoch,
                lr,
                ce: ce_value,
                cpt: None,
                gm: None,
                cos: None,
            };
            let mut g_prompt = g_ce.clone();

            if cfg.uses_cpt() {
                let hv = head.track(&tape);
                let z = views.projected_views(encoder, &p, &hv, settings.normalize_projection)?;
                let cpt = cpt_loss(&z, settings.tau)?;
                entry.cpt = Some(finite(step, "contrastive", cpt.item())?);
                let mut grads = backward(&cpt, &[&p, &hv.wa, &hv.ba, &hv.wb, &hv.bb])?;
                let g_cpt = grads.remove(0);
                entry.cos = grad_cosine(g_ce.data(), g_cpt.data()).ok();

                if cfg.uses_gm() {
                    let objective = cpt_objective(&views, encoder, &head, settings);
                    match gm_from_cpt_grad(objective, &bank.prompts, g_cpt.data(), &gm_state, cfg.hvp_backend)? {
                        Some(gm) => {
                            entry.gm = Some(finite(step, "gradient-matching", gm.loss)?);
                            for (a, b) in g_prompt.data_mut().iter_mut().zip(gm.grad.data()) {
                                *a += cfg.gm_weight * b;
                            }
                        }
                        None => log::info!("step {step}: gradient matching skipped"),
                    }
                }
                for (a, b) in g_prompt.data_mut().iter_mut().zip(g_cpt.data()) {
                    *a += cfg.cpt_weight * b;
                }
                for (param, g) in head.params_mut().into_iter().zip(&grads) {
                    sgd(param, g, lr * cfg.cpt_weight);
                }
            }
            sgd(&mut bank.prompts, &g_prompt, lr);
            if !bank.prompts.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: "prompt parameters became non-finite".into(),
                });
            }
            log.push(entry);
            step += 1;
        }
    }
    Ok(Stage1Output {
        bank,
        head,
        gm_state,
        log,
    })
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub bank: PromptBank,
    /// Contrastive loss before the first step and after every step.
    pub losses: Vec<f64>,
}

/// Test-time adaptation on a class set: SGD on the contrastive loss with
/// respect to the prompt rows only. Reads class names, never images.
pub fn stage2_adapt(
    encoder: &FrozenTextEncoder,
    bank: &PromptBank,
    head: &ProjectionHead,
    target: &ClassVocabulary,
    cfg: &TrainConfig,
) -> Result<Stage2Output> {
    if target.is_empty() {
        return Err(Error::Data("cannot adapt to an empty class set".into()));
    }
    let mut bank = bank.clone();
    if cfg.steps_stage2 == 0 {
        return Ok(Stage2Output {
            bank,
            losses: Vec::new(),
        });
    }
    let views = ViewSet::new(&bank, target, encoder)?;
    let objective = cpt_objective(&views, encoder, head, cfg.cpt_settings());
    let mut losses = Vec::with_capacity(cfg.steps_stage2 + 1);
    for step in 0..cfg.steps_stage2 {
        let (loss, g) = gradient(&objective, &bank.prompts)?;
        losses.push(finite(step, "contrastive", loss)?);
        sgd(&mut bank.prompts, &g, cfg.lr_stage2);
    }
    let last = objective(&DiffTensor::constant(bank.prompts.clone()))?.item();
    losses.push(finite(cfg.steps_stage2, "contrastive", last)?);
    Ok(Stage2Output { bank, losses })
}

/// `[C, D]` end-view text features, row-normalized, with no tape.
pub fn class_text_features(encoder: &FrozenTextEncoder, bank: &PromptBank, vocab: &ClassVocabulary) -> Result<Tensor> {
    let views = ViewSet::new(bank, vocab, encoder)?;
    let p = DiffTensor::constant(bank.prompts.clone());
    Ok(views.class_features(encoder, &p)?.l2_normalize_rows()?.to_tensor())
}

/// Index of the most similar row of normalized `text` to `x`.
pub(crate) fn argmax_cosine(text: &Tensor, x: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for k in 0..text.rows() {
        let s: f64 = text.row(k).iter().zip(x).map(|(a, b)| a * b).sum();
        if s > best.1 {
            best = (k, s);
        }
    }
    best.0
}

/// Direct prediction: text features once, then one cosine argmax per image.
pub fn stage3_predict(
    encoder: &FrozenTextEncoder,
    bank: &PromptBank,
    vocab: &ClassVocabulary,
    images: &Tensor,
) -> Result<(Vec<usize>, CostMeter)> {
    if images.shape().len() != 2 || images.cols() != encoder.embed_dim() {
        return Err(Error::Data(format!(
            "images of shape {:?} do not match embedding dim {}",
            images.shape(),
            encoder.embed_dim()
        )));
    }
    let mut meter = CostMeter::default();
    let clock = Stopwatch::start();
    let text = class_text_features(encoder, bank, vocab)?;
    meter.setup.forward += 1;
    meter.setup.encoder_invocations += vocab.len() as u64;
    clock.stop_into(&mut meter.setup);

    let clock = Stopwatch::start();
    let labels = (0..images.rows())
        .map(|i| argmax_cosine(&text, images.row(i)))
        .collect::<Vec<_>>();
    meter.images = images.rows() as u64;
    meter.inference.forward += meter.images;
    clock.stop_into(&mut meter.inference);
    Ok((labels, meter))
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Cosine between the dataset-average CE prompt gradient and the CPT prompt
/// gradient on one class set.
pub fn diagnose_grad_alignment(
    encoder: &FrozenTextEncoder,
    bank: &PromptBank,
    head: &ProjectionHead,
    vocab: &ClassVocabulary,
    images: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<f64> {
    let views = ViewSet::new(bank, vocab, encoder)?;
    let (x, y) = images.batch(&(0..images.len()).collect::<Vec<_>>())?;
    let (_, g_ce) = gradient(
        |p| {
            let w = views.class_features(encoder, p).map_err(to_tensor_error)?;
            let logits = cosine_logits(&x, &w, cfg.tau_cls).map_err(to_tensor_error)?;
            cross_entropy_logits(&logits, &y).map_err(to_tensor_error)
        },
        &bank.prompts,
    )?;
    let (_, g_cpt) = gradient(cpt_objective(&views, encoder, head, cfg.cpt_settings()), &bank.prompts)?;
    grad_cosine(g_ce.data(), g_cpt.data())
}

/// Pairwise cosine distance `1 - cos` between class text features.
pub fn class_distance_matrix(
    encoder: &FrozenTextEncoder,
    bank: &PromptBank,
    vocab: &ClassVocabulary,
) -> Result<Tensor> {
    let text = class_text_features(encoder, bank, vocab)?;
    let c = text.rows();
    let mut m = Tensor::zeros(&[c, c]);
    for i in 0..c {
        for j in i + 1..c {
            let cos: f64 = text.row(i).iter().zip(text.row(j)).map(|(a, b)| a * b).sum();
            let d = 1.0 - cos;
            m.data_mut()[i * c + j] = d;
            m.data_mut()[j * c + i] = d;
        }
    }
    Ok(m)
}

/// Mean of the off-diagonal entries of a square matrix.
pub fn mean_off_diagonal(m: &Tensor) -> f64 {
    let c = m.rows();
    if c < 2 {
        return 0.0;
    }
    let total: f64 = (0..c)
        .flat_map(|i| (0..c).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| m.data()[i * c + j])
        .sum();
    total / (c * (c - 1)) as f64
}
