//! Frozen text encoder, identity image encoder and the learnable projection head.
//!
//! The text encoder maps a token sequence to a `D`-dimensional feature:
//!
//! ```text
//! g(t) = W2ᵀ · mean_t tanh(W1ᵀ (x_t + pos_t) + b1) + b2
//! ```
//!
//! where `x_t` is either a frozen word embedding or a learnable prompt row.
//! The per-token nonlinearity ahead of the pooling is what makes the output
//! depend on token order.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::{DiffTensor, Tape, Tensor};

/// One position of a text sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    /// Frozen word embedding row.
    Word(usize),
    /// Row of the learnable prompt matrix.
    Prompt(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    /// Standard deviation of the word embedding entries.
    pub embedding_scale: f64,
    /// Standard deviation of the bias entries.
    pub bias_scale: f64,
    /// Multiplier on the sinusoidal position table.
    pub position_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            token_dim: 16,
            hidden_dim: 64,
            embed_dim: 32,
            max_len: 16,
            embedding_scale: 1.0,
            bias_scale: 0.1,
            position_scale: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTextEncoder {
    config: EncoderConfig,
    embedding: Tensor,
    positional: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Fixed sinusoidal table: `sin` on even columns, `cos` on odd ones.
pub fn sinusoidal_table(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for j in 0..dim {
            let freq = 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            let angle = pos as f64 / freq;
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(len, dim, data).expect("table dims")
}

impl FrozenTextEncoder {
    /// Draws all weights from the encoder substream of `seed`.
    pub fn from_seed(seed: u64, config: EncoderConfig) -> Result<Self> {
        let EncoderConfig {
            vocab_size: v,
            token_dim: d,
            hidden_dim: h,
            embed_dim: e,
            max_len,
            ..
        } = config;
        if v == 0 || d == 0 || h == 0 || e == 0 || max_len == 0 {
            return Err(Error::Config(format!(
                "encoder dimensions must be positive: {config:?}"
            )));
        }
        let mut rng = substream(seed, Stream::Encoder);
        let embedding = gaussian(&mut rng, v * d, config.embedding_scale);
        let w1 = gaussian(&mut rng, d * h, 1.0 / (d as f64).sqrt());
        let b1 = gaussian(&mut rng, h, config.bias_scale);
        let w2 = gaussian(&mut rng, h * e, 1.0 / (h as f64).sqrt());
        let b2 = gaussian(&mut rng, e, config.bias_scale);
        Ok(Self {
            embedding: Tensor::matrix(v, d, embedding)?,
            positional: sinusoidal_table(max_len, d).map(|v| v * config.position_scale),
            w1: Tensor::matrix(d, h, w1)?,
            b1: Tensor::vector(b1),
            w2: Tensor::matrix(h, e, w2)?,
            b2: Tensor::vector(b2),
            config,
        })
    }

    /// Builds an encoder from explicit weights; used by tests that need
    /// hand-picked values.
    pub fn from_parts(
        config: EncoderConfig,
        embedding: Tensor,
        positional: Tensor,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    ) -> Result<Self> {
        let c = &config;
        let checks = [
            (embedding.shape() == [c.vocab_size, c.token_dim], "embedding"),
            (positional.shape() == [c.max_len, c.token_dim], "positional"),
            (w1.shape() == [c.token_dim, c.hidden_dim], "w1"),
            (b1.shape() == [c.hidden_dim], "b1"),
            (w2.shape() == [c.hidden_dim, c.embed_dim], "w2"),
            (b2.shape() == [c.embed_dim], "b2"),
        ];
        if let Some((_, name)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::Config(format!("encoder weight `{name}` has the wrong shape")));
        }
        Ok(Self {
            config,
            embedding,
            positional,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn token_dim(&self) -> usize {
        self.config.token_dim
    }

    /// Frozen embedding row of a word id.
    pub fn word_embedding(&self, id: usize) -> Result<&[f64]> {
        if id >= self.config.vocab_size {
            return Err(Error::Data(format!(
                "token id {id} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(self.embedding.row(id))
    }

    /// Encodes one sequence; prompt tokens index rows of `prompts`.
    pub fn encode_text(&self, tokens: &[Token], prompts: &DiffTensor) -> Result<DiffTensor> {
        let d = self.embed_dim();
        let batch = SequenceBatch::new(self, &[tokens.to_vec()], prompts.shape().first().copied().unwrap_or(0))?;
        Ok(batch.encode(self, prompts)?.reshape(&[d])?)
    }
}

/// Identity image encoder: synthetic features already live in the joint space.
pub fn encode_image(feature: &[f64], embed_dim: usize) -> Result<DiffTensor> {
    if feature.len() != embed_dim {
        return Err(Error::Data(format!(
            "image feature has length {}, expected {embed_dim}",
            feature.len()
        )));
    }
    Ok(DiffTensor::constant(Tensor::vector(feature.to_vec())))
}

/// Precomputed constant structure for encoding a fixed list of sequences.
///
/// Everything except the prompt rows is frozen, so the word embeddings,
/// positional rows, prompt selection and pooling matrices are assembled once
/// and reused across optimizer steps.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    sequences: usize,
    prompt_rows: usize,
    /// `[tokens, d]`: word embedding (or zero) plus positional row.
    base: DiffTensor,
    /// `[tokens, M]` one-hot rows selecting prompt vectors.
    selection: Option<DiffTensor>,
    /// `[sequences, tokens]` mean-pooling weights.
    pooling: DiffTensor,
}

impl SequenceBatch {
    pub fn new(encoder: &FrozenTextEncoder, sequences: &[Vec<Token>], prompt_rows: usize) -> Result<Self> {
        let cfg = encoder.config();
        let d = cfg.token_dim;
        let total: usize = sequences.iter().map(Vec::len).sum();
        let mut base = Vec::with_capacity(total * d);
        let mut selection = vec![0.0; total * prompt_rows];
        let mut pooling = vec![0.0; sequences.len() * total];
        let mut any_prompt = false;
        let mut t = 0;
        for (s, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Data("cannot encode an empty token sequence".into()));
            }
            if seq.len() > cfg.max_len {
                return Err(Error::Data(format!(
                    "sequence of length {} exceeds the encoder maximum {}",
                    seq.len(),
                    cfg.max_len
                )));
            }
            let w = 1.0 / seq.len() as f64;
            for (pos, tok) in seq.iter().enumerate() {
                let p = encoder.positional.row(pos);
                match *tok {
                    Token::Word(id) => {
                        let e = encoder.word_embedding(id)?;
                        base.extend(e.iter().zip(p).map(|(a, b)| a + b));
                    }
                    Token::Prompt(r) => {
                        if r >= prompt_rows {
                            return Err(Error::Data(format!(
                                "prompt row {r} out of range for {prompt_rows} prompt vectors"
                            )));
                        }
                        base.extend_from_slice(p);
                        selection[t * prompt_rows + r] = 1.0;
                        any_prompt = true;
                    }
                }
                pooling[s * total + t] = w;
                t += 1;
            }
        }
        Ok(Self {
            sequences: sequences.len(),
            prompt_rows,
            base: DiffTensor::constant(Tensor::matrix(total, d, base)?),
            selection: if any_prompt {
                Some(DiffTensor::constant(Tensor::matrix(total, prompt_rows, selection)?))
            } else {
                None
            },
            pooling: DiffTensor::constant(Tensor::matrix(sequences.len(), total, pooling)?),
        })
    }

    pub fn len(&self) -> usize {
        self.sequences
    }

    pub fn is_empty(&self) -> bool {
        self.sequences == 0
    }

    /// `[sequences, D]` text features for the given prompt matrix.
    pub fn encode(&self, encoder: &FrozenTextEncoder, prompts: &DiffTensor) -> Result<DiffTensor> {
        let x = match &self.selection {
            Some(sel) => {
                if prompts.shape() != [self.prompt_rows, encoder.token_dim()] {
                    return Err(Error::Data(format!(
                        "prompt matrix has shape {:?}, expected [{}, {}]",
                        prompts.shape(),
                        self.prompt_rows,
                        encoder.token_dim()
                    )));
                }
                self.base.add(&sel.matmul(prompts)?)?
            }
            None => self.base.clone(),
        };
        let w1 = DiffTensor::constant(encoder.w1.clone());
        let b1 = DiffTensor::constant(encoder.b1.clone());
        let w2 = DiffTensor::constant(encoder.w2.clone());
        let b2 = DiffTensor::constant(encoder.b2.clone());
        let hidden = x.matmul(&w1)?.add_row_bias(&b1)?.tanh();
        let pooled = self.pooling.matmul(&hidden)?;
        Ok(pooled.matmul(&w2)?.add_row_bias(&b2)?)
    }
}

/// Two-layer MLP with a ReLU hidden layer, mapping text features into the
/// contrastive space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub wa: Tensor,
    pub ba: Tensor,
    pub wb: Tensor,
    pub bb: Tensor,
}

/// Head parameters as differentiable values (tracked or constant).
#[derive(Clone, Debug)]
pub struct HeadVars {
    pub wa: DiffTensor,
    pub ba: DiffTensor,
    pub wb: DiffTensor,
    pub bb: DiffTensor,
}

pub const DEFAULT_PROJECTION_DIM: usize = 128;

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let u = Uniform::new(-a, a).expect("non-empty range");
    Ok(Tensor::matrix(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| u.sample(rng)).collect(),
    )?)
}

impl ProjectionHead {
    /// Xavier-uniform weights and zero biases.
    pub fn xavier(rng: &mut impl Rng, input_dim: usize, proj_dim: usize) -> Result<Self> {
        Ok(Self {
            wa: xavier(rng, input_dim, proj_dim)?,
            ba: Tensor::zeros(&[proj_dim]),
            wb: xavier(rng, proj_dim, proj_dim)?,
            bb: Tensor::zeros(&[proj_dim]),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.wa.shape()[0]
    }

    pub fn proj_dim(&self) -> usize {
        self.wb.shape()[1]
    }

    pub fn constants(&self) -> HeadVars {
        HeadVars {
            wa: DiffTensor::constant(self.wa.clone()),
            ba: DiffTensor::constant(self.ba.clone()),
            wb: DiffTensor::constant(self.wb.clone()),
            bb: DiffTensor::constant(self.bb.clone()),
        }
    }

    pub fn track(&self, tape: &Tape) -> HeadVars {
        HeadVars {
            wa: tape.leaf(self.wa.clone()),
            ba: tape.leaf(self.ba.clone()),
            wb: tape.leaf(self.wb.clone()),
            bb: tape.leaf(self.bb.clone()),
        }
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.wa, &mut self.ba, &mut self.wb, &mut self.bb]
    }

    /// Projects a single feature vector.
    pub fn project(&self, w: &[f64], normalize: bool) -> Result<DiffTensor> {
        if w.len() != self.input_dim() {
            return Err(Error::Data(format!(
                "projection input has length {}, expected {}",
                w.len(),
                self.input_dim()
            )));
        }
        let rows = DiffTensor::constant(Tensor::matrix(1, w.len(), w.to_vec())?);
        let z = self.constants().project_rows(&rows, normalize)?;
        Ok(z.reshape(&[self.proj_dim()])?)
    }
}

impl HeadVars {
    pub fn as_slice(&self) -> [&DiffTensor; 4] {
        [&self.wa, &self.ba, &self.wb, &self.bb]
    }

    /// `[N, D] -> [N, d_proj]`, optionally L2-normalizing each row.
    pub fn project_rows(&self, w: &DiffTensor, normalize: bool) -> Result<DiffTensor> {
        let hidden = w.matmul(&self.wa)?.add_row_bias(&self.ba)?.relu();
        let z = hidden.matmul(&self.wb)?.add_row_bias(&self.bb)?;
        if normalize {
            z.l2_normalize_rows()
                .map_err(|e| Error::Data(format!("projection output cannot be normalized: {e}")))
        } else {
            Ok(z)
        }
    }
}
