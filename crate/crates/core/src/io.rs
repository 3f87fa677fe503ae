//! On-disk formats: world files, checkpoints, content hashes and the
//! training log.
//!
//! World file (`selftpt-world/1`), plain JSON:
//!
//! | field         | content                                          |
//! |---------------|--------------------------------------------------|
//! | `params`      | every generation parameter, encoder seed included |
//! | `hand_ids`    | word ids of the hand-crafted prompt              |
//! | `class_names` | one name per class                               |
//! | `class_tokens`| word ids of each class name                      |
//! | `dim`         | embedding dimension `D`                          |
//! | `prototypes`  | `C·D` floats, row-major                          |
//! | `train`/`test`| `{labels, features}`, features `N·D` row-major   |
//!
//! The frozen encoder is rebuilt from `params` on load. Floats are written
//! in shortest round-trip form, so a load/save cycle is lossless.
//!
//! Checkpoint (`selftpt-checkpoint/1`): JSON metadata with every array stored
//! as a block of little-endian `f64` bytes, base64-encoded.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{FrozenTextEncoder, ProjectionHead};
use crate::error::{Error, Result};
use crate::losses::GmState;
use crate::pipeline::{StepLog, TrainConfig};
use crate::prompts::{ClassVocabulary, PromptBank, HAND_PROMPT_LEN};
use crate::synth::{LabeledSet, SyntheticWorld, WorldParams};
use crate::tensor::Tensor;

pub const WORLD_FORMAT: &str = "selftpt-world/1";
pub const CHECKPOINT_FORMAT: &str = "selftpt-checkpoint/1";

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("writing to a string");
    }
    out
}

/// Hash of the compact JSON form of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Serialize, Deserialize)]
struct SetRecord {
    labels: Vec<usize>,
    features: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WorldRecord {
    format: String,
    params: WorldParams,
    hand_ids: [usize; HAND_PROMPT_LEN],
    class_names: Vec<String>,
    class_tokens: Vec<Vec<usize>>,
    dim: usize,
    prototypes: Vec<f64>,
    train: SetRecord,
    test: SetRecord,
}

fn set_record(set: &LabeledSet) -> SetRecord {
    SetRecord {
        labels: set.labels().to_vec(),
        features: set.features().data().to_vec(),
    }
}

fn set_from_record(r: SetRecord, dim: usize, classes: usize) -> Result<LabeledSet> {
    if r.features.len() != r.labels.len() * dim {
        return Err(Error::Format(format!(
            "{} feature values for {} samples of dim {dim}",
            r.features.len(),
            r.labels.len()
        )));
    }
    if let Some(&l) = r.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Format(format!("label {l} out of range for {classes} classes")));
    }
    LabeledSet::new(Tensor::matrix(r.labels.len(), dim, r.features)?, r.labels)
}

/// Pretty JSON bytes of a world file.
pub fn world_to_json(world: &SyntheticWorld) -> Result<Vec<u8>> {
    let record = WorldRecord {
        format: WORLD_FORMAT.into(),
        params: world.params.clone(),
        hand_ids: world.hand_ids,
        class_names: world.vocab.names.clone(),
        class_tokens: world.vocab.tokens.clone(),
        dim: world.prototypes.cols(),
        prototypes: world.prototypes.data().to_vec(),
        train: set_record(&world.train),
        test: set_record(&world.test),
    };
    let mut bytes = serde_json::to_vec_pretty(&record)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn world_from_json(bytes: &[u8]) -> Result<SyntheticWorld> {
    let r: WorldRecord = serde_json::from_slice(bytes)?;
    if r.format != WORLD_FORMAT {
        return Err(Error::Format(format!(
            "expected a {WORLD_FORMAT} file, found `{}`",
            r.format
        )));
    }
    let encoder = FrozenTextEncoder::from_seed(r.params.encoder_seed, r.params.encoder_config())?;
    if r.dim != encoder.embed_dim() {
        return Err(Error::Format(format!(
            "world dim {} does not match the encoder's {}",
            r.dim,
            encoder.embed_dim()
        )));
    }
    let vocab = ClassVocabulary::new(r.class_names, r.class_tokens)?;
    let c = vocab.len();
    if r.prototypes.len() != c * r.dim {
        return Err(Error::Format(format!(
            "{} prototype values for {c} classes",
            r.prototypes.len()
        )));
    }
    Ok(SyntheticWorld {
        params: r.params,
        encoder,
        hand_ids: r.hand_ids,
        vocab,
        prototypes: Tensor::matrix(c, r.dim, r.prototypes)?,
        train: set_from_record(r.train, r.dim, c)?,
        test: set_from_record(r.test, r.dim, c)?,
    })
}

pub fn save_world(world: &SyntheticWorld, path: &Path) -> Result<String> {
    let bytes = world_to_json(world)?;
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Loads a world and returns it with the hash of the file bytes.
pub fn load_world(path: &Path) -> Result<(SyntheticWorld, String)> {
    let bytes = fs::read(path)?;
    Ok((world_from_json(&bytes)?, sha256_hex(&bytes)))
}

/// Array stored as base64 little-endian `f64` bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub shape: Vec<usize>,
    pub data: String,
}

impl Block {
    pub fn encode(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Format(format!("bad base64 block: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format(format!(
                "block of {} bytes is not a whole number of f64",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Tensor::new(self.shape.clone(), data)?)
    }
}

/// How far a checkpoint has come through the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Trained,
    Adapted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadBlocks {
    pub wa: Block,
    pub ba: Block,
    pub wb: Block,
    pub bb: Block,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub stage: Stage,
    /// Hash of the world file the prompts were trained on.
    pub world_hash: String,
    /// Split the checkpoint was trained on (`base-new`, `cross`, `domain`).
    pub split: String,
    pub encoder_seed: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Hash of everything that determined this checkpoint's content.
    pub manifest_hash: String,
    pub hand_ids: [usize; HAND_PROMPT_LEN],
    pub prompts: Block,
    pub head: HeadBlocks,
    pub ema: Option<Block>,
    pub ema_alpha: f64,
    pub ema_steps: u64,
    /// Class names the prompts were adapted to, once adapted.
    pub adapted_classes: Option<Vec<String>>,
}

impl Checkpoint {
    /// Assembles a trained checkpoint; `manifest_hash` covers the world hash,
    /// split and config.
    pub fn trained(
        world_hash: &str,
        split: &str,
        encoder_seed: u64,
        config: &TrainConfig,
        bank: &PromptBank,
        head: &ProjectionHead,
        gm: Option<&GmState>,
    ) -> Result<Self> {
        let config_hash = content_hash(config)?;
        let manifest_hash = content_hash(&(world_hash, split, &config_hash, "trained"))?;
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            stage: Stage::Trained,
            world_hash: world_hash.into(),
            split: split.into(),
            encoder_seed,
            config: config.clone(),
            config_hash,
            manifest_hash,
            hand_ids: bank.hand_ids,
            prompts: Block::encode(&bank.prompts),
            head: HeadBlocks {
                wa: Block::encode(&head.wa),
                ba: Block::encode(&head.ba),
                wb: Block::encode(&head.wb),
                bb: Block::encode(&head.bb),
            },
            ema: gm.map(|g| Block::encode(&Tensor::vector(g.ema_grad.clone()))),
            ema_alpha: gm.map_or(config.alpha, |g| g.alpha),
            ema_steps: gm.map_or(0, |g| g.steps),
            adapted_classes: None,
        })
    }

    /// Copy with the prompt rows replaced by adapted ones.
    pub fn adapted(&self, bank: &PromptBank, classes: &ClassVocabulary, steps: usize, lr: f64) -> Result<Self> {
        let mut out = self.clone();
        out.stage = Stage::Adapted;
        out.prompts = Block::encode(&bank.prompts);
        out.adapted_classes = Some(classes.names.clone());
        out.manifest_hash = content_hash(&(&self.manifest_hash, &classes.names, steps, lr.to_bits(), "adapted"))?;
        Ok(out)
    }

    pub fn bank(&self) -> Result<PromptBank> {
        Ok(PromptBank {
            prompts: self.prompts.decode()?,
            hand_ids: self.hand_ids,
        })
    }

    pub fn head(&self) -> Result<ProjectionHead> {
        Ok(ProjectionHead {
            wa: self.head.wa.decode()?,
            ba: self.head.ba.decode()?,
            wb: self.head.wb.decode()?,
            bb: self.head.bb.decode()?,
        })
    }

    pub fn gm_state(&self) -> Result<Option<GmState>> {
        self.ema
            .as_ref()
            .map(|b| {
                Ok(GmState {
                    ema_grad: b.decode()?.into_data(),
                    alpha: self.ema_alpha,
                    steps: self.ema_steps,
                })
            })
            .transpose()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(bytes)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "expected a {CHECKPOINT_FORMAT} file, found `{}`",
                c.format
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read(path)?)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Training log as CSV with header `step,epoch,lr,l_ce,l_cpt,l_gm,cos`;
/// losses that were not computed are left empty.
pub fn log_to_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,epoch,lr,l_ce,l_cpt,l_gm,cos\n");
    for s in log {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.step,
            s.epoch,
            s.lr,
            s.ce,
            opt(s.cpt),
            opt(s.gm),
            opt(s.cos)
        )
        .expect("writing to a string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_world;

    fn tiny() -> SyntheticWorld {
        generate_world(&WorldParams {
            classes: 4,
            train_per_class: 3,
            test_per_class: 2,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn world_round_trip_is_lossless() {
        let w = tiny();
        let bytes = world_to_json(&w).unwrap();
        let back = world_from_json(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(world_to_json(&back).unwrap(), bytes);
    }

    #[test]
    fn world_rejects_foreign_format() {
        let text = String::from_utf8(world_to_json(&tiny()).unwrap()).unwrap();
        let bad = text.replace(WORLD_FORMAT, "other/1");
        assert!(matches!(world_from_json(bad.as_bytes()), Err(Error::Format(_))));
    }

    #[test]
    fn block_round_trip_keeps_bits() {
        let t = Tensor::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let back = Block::encode(&t).decode().unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
        assert_eq!(back.shape(), t.shape());
    }

    #[test]
    fn csv_leaves_missing_losses_empty() {
        let log = [StepLog {
            step: 0,
            epoch: 0,
            lr: 0.5,
            ce: 1.25,
            cpt: None,
            gm: None,
            cos: Some(-0.5),
        }];
        assert_eq!(
            log_to_csv(&log),
            "step,epoch,lr,l_ce,l_cpt,l_gm,cos\n0,0,0.5,1.25,,,-0.5\n"
        );
    }
}
