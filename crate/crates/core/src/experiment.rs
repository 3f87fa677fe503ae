//! Seeded base-to-new ablation runs shared by the CLI and the test suites.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{
    accuracy, class_distance_matrix, diagnose_grad_alignment, init_model, mean_off_diagonal, stage1_train,
    stage2_adapt, stage3_predict, Stage1Output, TrainConfig,
};
use crate::rng::{indexed_substream, Stream};
use crate::synth::{
    generate_world, make_domain_shift, shift_bias, split_base_new, ClassSplit, LabeledSet, SyntheticWorld, WorldParams,
};

/// Extra noise on shifted target images.
pub const SHIFT_SIGMA: f64 = 0.2;
/// Norm of the shared bias added to shifted target images.
pub const SHIFT_BIAS_NORM: f64 = 0.3;

/// Which classes and images play source and target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    /// First half of the classes is the source, second half the target.
    BaseNew,
    /// As `BaseNew`, with the target images domain-shifted.
    Cross,
    /// All classes on both sides; target images domain-shifted.
    Domain,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::BaseNew => "base-new",
            Split::Cross => "cross",
            Split::Domain => "domain",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        [Split::BaseNew, Split::Cross, Split::Domain]
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown split `{name}`")))
    }

    /// Stage-1 defaults for this split: fewer source epochs when transferring
    /// across datasets.
    pub fn default_config(self) -> TrainConfig {
        match self {
            Split::Cross => TrainConfig::cross_dataset(),
            _ => TrainConfig::default(),
        }
    }
}

/// Source and target sides of `split`.
pub fn resolve_split(world: &SyntheticWorld, split: Split) -> Result<(ClassSplit, ClassSplit)> {
    let shifted = |mut side: ClassSplit| -> Result<ClassSplit> {
        let bias = shift_bias(world.params.seed, world.prototypes.cols(), SHIFT_BIAS_NORM);
        side.test = make_domain_shift(world.params.seed, &side.test, SHIFT_SIGMA, &bias)?;
        Ok(side)
    };
    match split {
        Split::BaseNew => split_base_new(world),
        Split::Cross => {
            let (source, target) = split_base_new(world)?;
            Ok((source, shifted(target)?))
        }
        Split::Domain => Ok((world.all_classes()?, shifted(world.all_classes()?)?)),
    }
}

/// Accuracy of each class over its own samples; classes without samples
/// score 0.
pub fn per_class_accuracy(pred: &[usize], labels: &[usize], classes: usize) -> Vec<f64> {
    let mut hit = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&p, &l) in pred.iter().zip(labels) {
        seen[l] += 1;
        hit[l] += usize::from(p == l);
    }
    hit.iter()
        .zip(&seen)
        .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
        .collect()
}

/// Which stage-1 losses are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CeOnly,
    CeCpt,
    CeCptGm,
}

impl Variant {
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::CeOnly => {
                cfg.cpt_weight = 0.0;
                cfg.gm_weight = 0.0;
            }
            Variant::CeCpt => cfg.gm_weight = 0.0,
            Variant::CeCptGm => {}
        }
        cfg
    }
}

/// New-class results of one trained variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub base_accuracy: f64,
    pub new_accuracy: f64,
    pub new_accuracy_adapted: f64,
    pub grad_cosine: f64,
    pub distance_before: f64,
    pub distance_after: f64,
}

/// World for one seed of a sweep: both the world and its encoder follow
/// `seed`.
pub fn seeded_world(params: &WorldParams, seed: u64) -> Result<SyntheticWorld> {
    generate_world(&WorldParams {
        seed,
        encoder_seed: seed,
        ..params.clone()
    })
}

/// Train one variant on the base classes.
pub fn train_variant(world: &SyntheticWorld, base: &ClassSplit, cfg: &TrainConfig) -> Result<Stage1Output> {
    let (bank, head) = init_model(&world.encoder, world.hand_ids, cfg)?;
    stage1_train(&world.encoder, base, bank, head, cfg)
}

/// Evaluate a trained variant on the new classes, before and after
/// class-set adaptation.
pub fn evaluate_variant(
    world: &SyntheticWorld,
    base: &ClassSplit,
    new: &ClassSplit,
    trained: &Stage1Output,
    variant: Variant,
    cfg: &TrainConfig,
) -> Result<VariantReport> {
    let enc = &world.encoder;
    let (pred, _) = stage3_predict(enc, &trained.bank, &base.vocab, base.test.features())?;
    let base_accuracy = accuracy(&pred, base.test.labels());
    let (pred, _) = stage3_predict(enc, &trained.bank, &new.vocab, new.test.features())?;
    let new_accuracy = accuracy(&pred, new.test.labels());
    let adapted = stage2_adapt(enc, &trained.bank, &trained.head, &new.vocab, cfg)?.bank;
    let (pred, _) = stage3_predict(enc, &adapted, &new.vocab, new.test.features())?;
    let new_accuracy_adapted = accuracy(&pred, new.test.labels());
    let grad_cosine = diagnose_grad_alignment(enc, &trained.bank, &trained.head, &new.vocab, &new.test, cfg)?;
    let distance_before = mean_off_diagonal(&class_distance_matrix(enc, &trained.bank, &new.vocab)?);
    let distance_after = mean_off_diagonal(&class_distance_matrix(enc, &adapted, &new.vocab)?);
    Ok(VariantReport {
        variant,
        base_accuracy,
        new_accuracy,
        new_accuracy_adapted,
        grad_cosine,
        distance_before,
        distance_after,
    })
}

/// All requested variants for one seed of the default base-to-new protocol.
pub fn run_seed(
    params: &WorldParams,
    base_cfg: &TrainConfig,
    seed: u64,
    variants: &[Variant],
) -> Result<Vec<VariantReport>> {
    let world = seeded_world(params, seed)?;
    let (base, new) = split_base_new(&world)?;
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let cfg = TrainConfig {
            seed,
            ..variant.configure(base_cfg)
        };
        let trained = train_variant(&world, &base, &cfg)?;
        out.push(evaluate_variant(&world, &base, &new, &trained, variant, &cfg)?);
    }
    Ok(out)
}

/// Resample of `set` with replacement, drawn from the bootstrap substream
/// `index` of `seed`.
pub fn bootstrap(set: &LabeledSet, seed: u64, index: u32) -> Result<LabeledSet> {
    if set.is_empty() {
        return Err(Error::Data("cannot resample an empty set".into()));
    }
    let mut rng = indexed_substream(seed, Stream::Bootstrap, index);
    let idx: Vec<usize> = (0..set.len()).map(|_| rng.random_range(0..set.len())).collect();
    let (x, labels) = set.batch(&idx)?;
    LabeledSet::new(x.to_tensor(), labels)
}
