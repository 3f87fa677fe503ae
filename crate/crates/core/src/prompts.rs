//! Learnable prompt bank, class vocabularies and the four per-class views
//! used by contrastive prompt tuning.
//!
//! View `i ∈ [0, 4C)` belongs to class `i mod C` and has kind `i div C`, with
//! kinds ordered end, front, mid, hand.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{FrozenTextEncoder, HeadVars, SequenceBatch, Token};
use crate::error::{Error, Result};
use crate::tensor::{DiffTensor, Tensor};

pub const HAND_PROMPT_LEN: usize = 4;
pub const DEFAULT_PROMPT_LEN: usize = 4;

/// Learnable prompt rows `P ∈ R^{M×d}` and the frozen hand-prompt token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub prompts: Tensor,
    pub hand_ids: [usize; HAND_PROMPT_LEN],
}

impl PromptBank {
    /// `M` prompt rows initialized from the hand-prompt word embeddings,
    /// cycling through them when `M` exceeds the hand prompt length.
    pub fn from_hand_prompt(encoder: &FrozenTextEncoder, hand_ids: [usize; HAND_PROMPT_LEN], m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("prompt bank needs at least one row".into()));
        }
        let d = encoder.token_dim();
        let mut data = Vec::with_capacity(m * d);
        for r in 0..m {
            data.extend_from_slice(encoder.word_embedding(hand_ids[r % HAND_PROMPT_LEN])?);
        }
        Ok(Self {
            prompts: Tensor::matrix(m, d, data)?,
            hand_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insertion index of the class block in the mid view.
    pub fn mid(&self) -> usize {
        self.len() / 2
    }
}

/// Ordered classes, each a short sequence of word ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    pub names: Vec<String>,
    pub tokens: Vec<Vec<usize>>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>, tokens: Vec<Vec<usize>>) -> Result<Self> {
        if names.len() != tokens.len() {
            return Err(Error::Data(format!(
                "{} class names but {} token lists",
                names.len(),
                tokens.len()
            )));
        }
        if let Some(k) = tokens.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("class {k} has no tokens")));
        }
        Ok(Self { names, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Classes `range` as a new vocabulary.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            names: self.names[range.clone()].to_vec(),
            tokens: self.tokens[range].to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    End,
    Front,
    Mid,
    Hand,
}

impl ViewKind {
    /// Block order of the 4C view index space.
    pub const ALL: [ViewKind; 4] = [ViewKind::End, ViewKind::Front, ViewKind::Mid, ViewKind::Hand];

    pub fn of_index(i: usize, classes: usize) -> ViewKind {
        Self::ALL[i / classes]
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViewKind::End => "end",
            ViewKind::Front => "front",
            ViewKind::Mid => "mid",
            ViewKind::Hand => "hand",
        })
    }
}

impl FromStr for ViewKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end" => Ok(ViewKind::End),
            "front" => Ok(ViewKind::Front),
            "mid" => Ok(ViewKind::Mid),
            "hand" => Ok(ViewKind::Hand),
            other => Err(Error::Data(format!("unknown view kind `{other}`"))),
        }
    }
}

/// Token layout of one view of class `k`.
pub fn build_view(bank: &PromptBank, vocab: &ClassVocabulary, k: usize, kind: ViewKind) -> Result<Vec<Token>> {
    let class = vocab
        .tokens
        .get(k)
        .ok_or_else(|| Error::Data(format!("class {k} out of range for {} classes", vocab.len())))?;
    let cls = class.iter().map(|&id| Token::Word(id));
    let prompts = |r: std::ops::Range<usize>| r.map(Token::Prompt);
    let m = bank.len();
    let seq: Vec<Token> = match kind {
        ViewKind::End => prompts(0..m).chain(cls).collect(),
        ViewKind::Front => cls.chain(prompts(0..m)).collect(),
        ViewKind::Mid => prompts(0..bank.mid())
            .chain(cls)
            .chain(prompts(bank.mid()..m))
            .collect(),
        ViewKind::Hand => bank.hand_ids.iter().map(|&id| Token::Word(id)).chain(cls).collect(),
    };
    Ok(seq)
}

/// The three other views of the class owning view `i`.
pub fn positives_of(i: usize, classes: usize) -> Result<[usize; 3]> {
    if classes == 0 || i >= 4 * classes {
        return Err(Error::Data(format!(
            "view index {i} out of range for {classes} classes"
        )));
    }
    let c = i % classes;
    let mut out = [0; 3];
    let mut n = 0;
    for j in [c, c + classes, c + 2 * classes, c + 3 * classes] {
        if j != i {
            out[n] = j;
            n += 1;
        }
    }
    Ok(out)
}

/// Precomputed sequence batches for one class set: the end views used for
/// classification and all 4C views used by the contrastive loss.
#[derive(Clone, Debug)]
pub struct ViewSet {
    classes: usize,
    end: SequenceBatch,
    all: SequenceBatch,
}

impl ViewSet {
    pub fn new(bank: &PromptBank, vocab: &ClassVocabulary, encoder: &FrozenTextEncoder) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::Data("class set is empty".into()));
        }
        let c = vocab.len();
        let mut all = Vec::with_capacity(4 * c);
        for kind in ViewKind::ALL {
            for k in 0..c {
                all.push(build_view(bank, vocab, k, kind)?);
            }
        }
        let end = all[..c].to_vec();
        Ok(Self {
            classes: c,
            end: SequenceBatch::new(encoder, &end, bank.len())?,
            all: SequenceBatch::new(encoder, &all, bank.len())?,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `[C, D]` unprojected end-view features, used for classification.
    pub fn class_features(&self, encoder: &FrozenTextEncoder, prompts: &DiffTensor) -> Result<DiffTensor> {
        self.end.encode(encoder, prompts)
    }

    /// `[4C, D]` unprojected features of every view.
    pub fn view_features(&self, encoder: &FrozenTextEncoder, prompts: &DiffTensor) -> Result<DiffTensor> {
        self.all.encode(encoder, prompts)
    }

    /// `[4C, d_proj]` projected features of every view.
    pub fn projected_views(
        &self,
        encoder: &FrozenTextEncoder,
        prompts: &DiffTensor,
        head: &HeadVars,
        normalize: bool,
    ) -> Result<DiffTensor> {
        let w = self.all.encode(encoder, prompts)?;
        head.project_rows(&w, normalize)
    }
}

/// `Z` (4C × d_proj) over all views and `W_end` (C × D) for classification.
pub fn encode_all_views(
    bank: &PromptBank,
    vocab: &ClassVocabulary,
    encoder: &FrozenTextEncoder,
    head: &HeadVars,
    prompts: &DiffTensor,
    normalize: bool,
) -> Result<(DiffTensor, DiffTensor)> {
    let views = ViewSet::new(bank, vocab, encoder)?;
    let z = views.projected_views(encoder, prompts, head, normalize)?;
    let w = views.class_features(encoder, prompts)?;
    Ok((z, w))
}
