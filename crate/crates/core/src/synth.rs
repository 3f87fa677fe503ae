//! Seeded synthetic class-worlds standing in for a pretrained joint
//! embedding space and labeled image datasets.
//!
//! Each class is a short run of word ids. Its image prototype is the
//! normalized hand-prompt text feature of the class, optionally moved away
//! from the text side by a shared offset (`modality_gap`). Images are
//! `normalize(prototype + σ·N(0, I))`.

use std::cell::Cell;
use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, FrozenTextEncoder, Token};
use crate::error::{Error, Result};
use crate::prompts::{build_view, ClassVocabulary, PromptBank, ViewKind, HAND_PROMPT_LEN};
use crate::rng::{indexed_substream, substream, Stream};
use crate::tensor::{DiffTensor, Tensor};

/// Word ids reserved for the hand-crafted prompt ("a photo of a").
pub const HAND_PROMPT_IDS: [usize; HAND_PROMPT_LEN] = [0, 1, 2, 0];
const RESERVED_IDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub seed: u64,
    /// Seed of the frozen text encoder, shared by worlds that model
    /// different datasets seen through the same pretrained model.
    pub encoder_seed: u64,
    pub vocab_size: usize,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub classes: usize,
    pub max_class_tokens: usize,
    pub sigma: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Fraction of the mean hand-prompt feature removed from every prototype.
    pub modality_gap: f64,
    pub embedding_scale: f64,
    pub bias_scale: f64,
    /// Multiplier on the encoder's positional table; small values keep the
    /// four views of a class close together.
    pub position_scale: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder_seed: 0,
            vocab_size: 256,
            token_dim: 16,
            hidden_dim: 64,
            embed_dim: 32,
            classes: 40,
            max_class_tokens: 3,
            sigma: 0.4,
            train_per_class: 50,
            test_per_class: 50,
            modality_gap: 1.0,
            embedding_scale: 1.0,
            bias_scale: 0.1,
            position_scale: 0.03,
        }
    }
}

impl WorldParams {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            token_dim: self.token_dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            max_len: 16.max(HAND_PROMPT_LEN + self.max_class_tokens + 8),
            embedding_scale: self.embedding_scale,
            bias_scale: self.bias_scale,
            position_scale: self.position_scale,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "a world needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.max_class_tokens == 0 {
            return Err(Error::Config("classes need at least one token".into()));
        }
        let demand = RESERVED_IDS + self.classes * self.max_class_tokens;
        if self.vocab_size < demand {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot hold {} classes of up to {} tokens (needs {demand})",
                self.vocab_size, self.classes, self.max_class_tokens
            )));
        }
        Ok(())
    }
}

/// Image features with labels local to their class set.
///
/// Reads through [`LabeledSet::features`] are counted so tests can prove a
/// stage never looked at images.
#[derive(Debug, Serialize, Deserialize)]
pub struct LabeledSet {
    features: Tensor,
    labels: Vec<usize>,
    #[serde(skip)]
    reads: Cell<usize>,
}

impl Clone for LabeledSet {
    fn clone(&self) -> Self {
        Self::new(self.features.clone(), self.labels.clone()).expect("valid set")
    }
}

impl PartialEq for LabeledSet {
    fn eq(&self, other: &Self) -> bool {
        self.features == other.features && self.labels == other.labels
    }
}

impl LabeledSet {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        Ok(Self {
            features,
            labels,
            reads: Cell::new(0),
        })
    }

    pub fn features(&self) -> &Tensor {
        self.reads.set(self.reads.get() + 1);
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of times the features were accessed.
    pub fn reads(&self) -> usize {
        self.reads.get()
    }

    /// Rows `idx` as a `[B, D]` constant plus their labels.
    pub fn batch(&self, idx: &[usize]) -> Result<(DiffTensor, Vec<usize>)> {
        let f = self.features();
        let d = f.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(f.row(i));
            labels.push(self.labels[i]);
        }
        Ok((DiffTensor::constant(Tensor::matrix(idx.len(), d, data)?), labels))
    }

    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let f = self.features();
        let d = f.cols();
        Self::new(
            Tensor::matrix(n, d, f.data()[..n * d].to_vec())?,
            self.labels[..n].to_vec(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub params: WorldParams,
    pub encoder: FrozenTextEncoder,
    pub hand_ids: [usize; HAND_PROMPT_LEN],
    pub vocab: ClassVocabulary,
    /// `[C, D]` unit vectors.
    pub prototypes: Tensor,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

impl PartialEq for SyntheticWorld {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.hand_ids == other.hand_ids
            && self.vocab == other.vocab
            && self.prototypes == other.prototypes
            && self.train == other.train
            && self.test == other.test
    }
}

/// One side of a class split: names, images and labels local to the subset.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSplit {
    pub vocab: ClassVocabulary,
    /// Index of the first class in the world's ordering.
    pub offset: usize,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::Data("cannot normalize a zero vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Normalized text features of the hand-prompt view of every class.
pub fn hand_prompt_features(
    encoder: &FrozenTextEncoder,
    hand_ids: [usize; HAND_PROMPT_LEN],
    vocab: &ClassVocabulary,
) -> Result<Tensor> {
    let bank = PromptBank::from_hand_prompt(encoder, hand_ids, HAND_PROMPT_LEN)?;
    let seqs: Vec<Vec<Token>> = (0..vocab.len())
        .map(|k| build_view(&bank, vocab, k, ViewKind::Hand))
        .collect::<Result<_>>()?;
    let batch = crate::encoders::SequenceBatch::new(encoder, &seqs, 0)?;
    let none = DiffTensor::constant(Tensor::zeros(&[0, encoder.token_dim()]));
    Ok(batch.encode(encoder, &none)?.l2_normalize_rows()?.to_tensor())
}

fn sample_set(rng: &mut impl Rng, prototypes: &Tensor, per_class: usize, sigma: f64) -> Result<LabeledSet> {
    let (c, d) = (prototypes.rows(), prototypes.cols());
    let mut data = Vec::with_capacity(c * per_class * d);
    let mut labels = Vec::with_capacity(c * per_class);
    for k in 0..c {
        for _ in 0..per_class {
            let mut x: Vec<f64> = prototypes
                .row(k)
                .iter()
                .map(|&p| {
                    let g: f64 = StandardNormal.sample(rng);
                    p + sigma * g
                })
                .collect();
            normalize(&mut x)?;
            data.extend(x);
            labels.push(k);
        }
    }
    LabeledSet::new(Tensor::matrix(c * per_class, d, data)?, labels)
}

/// Deterministic world for `params.seed`.
pub fn generate_world(params: &WorldParams) -> Result<SyntheticWorld> {
    params.validate()?;
    let encoder = FrozenTextEncoder::from_seed(params.encoder_seed, params.encoder_config())?;
    let mut rng = substream(params.seed, Stream::World);

    let mut ids: Vec<usize> = (RESERVED_IDS..params.vocab_size).collect();
    ids.shuffle(&mut rng);
    let mut next = ids.into_iter();
    let mut tokens = Vec::with_capacity(params.classes);
    for _ in 0..params.classes {
        let len = rng.random_range(1..=params.max_class_tokens);
        tokens.push(next.by_ref().take(len).collect::<Vec<_>>());
    }
    let names = (0..params.classes).map(|k| format!("class_{k:03}")).collect();
    let vocab = ClassVocabulary::new(names, tokens)?;

    let text = hand_prompt_features(&encoder, HAND_PROMPT_IDS, &vocab)?;
    let (c, d) = (text.rows(), text.cols());
    let mut mean = vec![0.0; d];
    for k in 0..c {
        for (m, v) in mean.iter_mut().zip(text.row(k)) {
            *m += v / c as f64;
        }
    }
    let mut prototypes = text.clone();
    for k in (0..c).filter(|_| params.modality_gap != 0.0) {
        let row = prototypes.row_mut(k);
        for (p, m) in row.iter_mut().zip(&mean) {
            *p -= params.modality_gap * m;
        }
        normalize(row)?;
    }

    let train = sample_set(&mut rng, &prototypes, params.train_per_class, params.sigma)?;
    let test = sample_set(&mut rng, &prototypes, params.test_per_class, params.sigma)?;
    Ok(SyntheticWorld {
        params: params.clone(),
        encoder,
        hand_ids: HAND_PROMPT_IDS,
        vocab,
        prototypes,
        train,
        test,
    })
}

fn subset(set: &LabeledSet, classes: std::ops::Range<usize>) -> Result<LabeledSet> {
    let f = set.features();
    let d = f.cols();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, &l) in set.labels().iter().enumerate() {
        if classes.contains(&l) {
            data.extend_from_slice(f.row(i));
            labels.push(l - classes.start);
        }
    }
    LabeledSet::new(Tensor::matrix(labels.len(), d, data)?, labels)
}

impl SyntheticWorld {
    pub fn classes(&self) -> usize {
        self.vocab.len()
    }

    /// Classes `range` with their images, labels relative to `range.start`.
    pub fn class_split(&self, range: std::ops::Range<usize>) -> Result<ClassSplit> {
        if range.start >= range.end || range.end > self.classes() {
            return Err(Error::Data(format!("class range {range:?} is empty or out of bounds")));
        }
        Ok(ClassSplit {
            vocab: self.vocab.subset(range.clone()),
            offset: range.start,
            train: subset(&self.train, range.clone())?,
            test: subset(&self.test, range)?,
        })
    }

    pub fn all_classes(&self) -> Result<ClassSplit> {
        self.class_split(0..self.classes())
    }
}

/// First half of the classes as labeled source data, second half as target.
pub fn split_base_new(world: &SyntheticWorld) -> Result<(ClassSplit, ClassSplit)> {
    let c = world.classes();
    if !c.is_multiple_of(2) {
        return Err(Error::Data(format!(
            "cannot split {c} classes into equal base and new halves"
        )));
    }
    Ok((world.class_split(0..c / 2)?, world.class_split(c / 2..c)?))
}

/// Seeded unit direction scaled to `norm`, for use as a domain-shift bias.
pub fn shift_bias(seed: u64, dim: usize, norm: f64) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; dim];
    }
    let mut rng = indexed_substream(seed, Stream::Shift, 1);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v).expect("gaussian draw is non-zero");
    v.iter_mut().for_each(|x| *x *= norm);
    v
}

/// Test images moved by `bias` and extra noise of scale `shift_sigma`,
/// then renormalized. Labels are unchanged.
pub fn make_domain_shift(seed: u64, set: &LabeledSet, shift_sigma: f64, bias: &[f64]) -> Result<LabeledSet> {
    if !(shift_sigma >= 0.0 && shift_sigma.is_finite()) {
        return Err(Error::Config(format!(
            "shift sigma must be non-negative, got {shift_sigma}"
        )));
    }
    let f = set.features();
    let d = f.cols();
    if bias.len() != d {
        return Err(Error::Data(format!(
            "bias of length {} for features of dim {d}",
            bias.len()
        )));
    }
    let mut rng = substream(seed, Stream::Shift);
    let mut data = Vec::with_capacity(f.len());
    for i in 0..set.len() {
        let mut x: Vec<f64> = f
            .row(i)
            .iter()
            .zip(bias)
            .map(|(&v, &b)| {
                let g: f64 = StandardNormal.sample(&mut rng);
                v + b + shift_sigma * g
            })
            .collect();
        normalize(&mut x)?;
        data.extend(x);
    }
    LabeledSet::new(Tensor::matrix(set.len(), d, data)?, set.labels().to_vec())
}

/// Top-1 accuracy of nearest-text-feature classification.
pub fn cosine_accuracy(text: &Tensor, set: &LabeledSet) -> f64 {
    let f = set.features();
    if set.is_empty() {
        return 0.0;
    }
    let norms: Vec<f64> = (0..text.rows())
        .map(|k| text.row(k).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let correct = (0..set.len())
        .filter(|&i| {
            let x = f.row(i);
            let best = (0..text.rows())
                .map(|k| {
                    let dot: f64 = text.row(k).iter().zip(x).map(|(a, b)| a * b).sum();
                    dot / norms[k]
                })
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (k, s)| if s > acc.1 { (k, s) } else { acc },
                );
            best.0 == set.labels()[i]
        })
        .count();
    correct as f64 / set.len() as f64
}

/// Accuracy of classifying with the hand-crafted prompt on every class.
pub fn zero_shot_accuracy(world: &SyntheticWorld, vocab: &ClassVocabulary, set: &LabeledSet) -> Result<f64> {
    let text = hand_prompt_features(&world.encoder, world.hand_ids, vocab)?;
    Ok(cosine_accuracy(&text, set))
}

/// Class-name token sequences must be pairwise distinct.
pub fn class_tokens_unique(vocab: &ClassVocabulary) -> bool {
    let set: HashSet<&Vec<usize>> = vocab.tokens.iter().collect();
    set.len() == vocab.len()
}
