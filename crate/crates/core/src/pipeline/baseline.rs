use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::cost::{CostMeter, Stopwatch};
use super::stages::argmax_cosine;
use crate::encoders::FrozenTextEncoder;
use crate::error::{Error, Result};
use crate::losses::{cosine_logits, marginal_entropy, DEFAULT_TAU};
use crate::prompts::{ClassVocabulary, PromptBank, ViewSet};
use crate::rng::{indexed_substream, Stream};
use crate::tensor::{backward, DiffTensor, Tape, Tensor};

/// Per-image entropy-minimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TptConfig {
    pub augments: usize,
    pub steps: usize,
    pub lr: f64,
    pub sigma_aug: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for TptConfig {
    fn default() -> Self {
        Self {
            augments: 8,
            steps: 10,
            lr: 0.002,
            sigma_aug: 0.1,
            tau: DEFAULT_TAU,
            seed: 0,
        }
    }
}

/// Test-time prompt tuning on each image independently: clone the prompts,
/// minimize the entropy of the mean prediction over noisy copies of the
/// feature, classify with the tuned prompts, then discard them.
pub fn baseline_tpt_predict(
    encoder: &FrozenTextEncoder,
    bank: &PromptBank,
    vocab: &ClassVocabulary,
    images: &Tensor,
    cfg: &TptConfig,
) -> Result<(Vec<usize>, CostMeter)> {
    if cfg.augments == 0 {
        return Err(Error::Config("at least one augmented copy is required".into()));
    }
    if !(cfg.sigma_aug >= 0.0) || !(cfg.lr > 0.0) || !(cfg.tau > 0.0) {
        return Err(Error::Config(
            "TPT lr and tau must be positive, sigma non-negative".into(),
        ));
    }
    if images.shape().len() != 2 || images.cols() != encoder.embed_dim() {
        return Err(Error::Data(format!(
            "images of shape {:?} do not match embedding dim {}",
            images.shape(),
            encoder.embed_dim()
        )));
    }
    let views = ViewSet::new(bank, vocab, encoder)?;
    let noise = Normal::new(0.0, cfg.sigma_aug).map_err(|e| Error::Config(e.to_string()))?;
    let d = images.cols();
    let c = vocab.len() as u64;
    let mut meter = CostMeter {
        images: images.rows() as u64,
        ..Default::default()
    };
    let clock = Stopwatch::start();
    let mut labels = Vec::with_capacity(images.rows());

    for i in 0..images.rows() {
        let x = images.row(i);
        let mut rng = indexed_substream(cfg.seed, Stream::Augmentation, i as u32);
        let mut copies = Vec::with_capacity(cfg.augments * d);
        for _ in 0..cfg.augments {
            copies.extend(x.iter().map(|v| v + noise.sample(&mut rng)));
        }
        let copies = DiffTensor::constant(Tensor::matrix(cfg.augments, d, copies)?);
        let mut prompts = bank.prompts.clone();

        for _ in 0..cfg.steps {
            let tape = Tape::new();
            let p = tape.leaf(prompts.clone());
            let w = views.class_features(encoder, &p)?;
            let h = marginal_entropy(&cosine_logits(&copies, &w, cfg.tau)?)?;
            let g = backward(&h, &[&p])?.remove(0);
            for (a, b) in prompts.data_mut().iter_mut().zip(g.data()) {
                *a -= cfg.lr * b;
            }
            meter.inference.forward += 1;
            meter.inference.backward += 1;
            meter.inference.encoder_invocations += c;
        }
        let text = views
            .class_features(encoder, &DiffTensor::constant(prompts))?
            .l2_normalize_rows()?
            .to_tensor();
        meter.inference.forward += 1;
        meter.inference.encoder_invocations += c;
        labels.push(argmax_cosine(&text, x));
    }
    clock.stop_into(&mut meter.inference);
    Ok((labels, meter))
}
