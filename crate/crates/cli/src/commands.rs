use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;

use selftpt_core::experiment::{bootstrap, per_class_accuracy, resolve_split, run_seed, Split, Variant, VariantReport};
use selftpt_core::io::{content_hash, load_world, log_to_csv, save_world, Checkpoint, Stage};
use selftpt_core::pipeline::{
    accuracy, baseline_tpt_predict, class_distance_matrix, diagnose_grad_alignment, init_model, mean_off_diagonal,
    stage1_train, stage2_adapt, stage3_predict, CostMeter, TptConfig, TrainConfig,
};
use selftpt_core::synth::{generate_world, zero_shot_accuracy, LabeledSet, SyntheticWorld, WorldParams};
use selftpt_core::tensor::Tensor;

use crate::parallel::map_indexed;
use crate::{AblateArgs, AdaptArgs, BenchArgs, DiagnoseArgs, EvalArgs, GenArgs, TrainArgs};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn open_world(path: &Path) -> Result<(SyntheticWorld, String)> {
    load_world(path).with_context(|| format!("loading world {}", path.display()))
}

/// World and checkpoint, refusing a checkpoint trained on another world
/// unless `force` is set.
fn open_pair(world: &Path, checkpoint: &Path, force: bool) -> Result<(SyntheticWorld, String, Checkpoint)> {
    let (w, hash) = open_world(world)?;
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    if ckpt.world_hash != hash {
        if !force {
            bail!(
                "checkpoint was trained on world {} but {} hashes to {hash}; pass --force to use it anyway",
                ckpt.world_hash,
                world.display()
            );
        }
        log::warn!("world hash mismatch ignored (--force)");
    }
    Ok((w, hash, ckpt))
}

fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(f64::to_string).collect();
        writeln!(out, "{}", row.join(",")).expect("writing to a string");
    }
    out
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let params = WorldParams {
        seed: a.seed,
        encoder_seed: a.encoder_seed.unwrap_or(a.seed),
        classes: a.classes,
        embed_dim: a.dim,
        sigma: a.sigma,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        ..WorldParams::default()
    };
    let world = generate_world(&params)?;
    let hash = save_world(&world, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let zs = zero_shot_accuracy(&world, &world.vocab, &world.test)?;
    println!(
        "world {}: {} classes, D={}, {} train / {} test images, zero-shot accuracy {zs:.3}, sha256 {hash}",
        a.out.display(),
        world.classes(),
        world.prototypes.cols(),
        world.train.len(),
        world.test.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    manifest_hash: String,
    world_hash: String,
    split: &'static str,
    config: TrainConfig,
    steps: usize,
    final_ce: Option<f64>,
    final_cpt: Option<f64>,
    final_gm: Option<f64>,
    source_accuracy: f64,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (world, world_hash) = open_world(&a.world)?;
    let split = Split::from(a.split);
    let (source, _) = resolve_split(&world, split)?;
    let mut cfg = split.default_config();
    cfg.seed = a.seed;
    cfg.lr_stage1 = a.lr.unwrap_or(cfg.lr_stage1);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch = a.batch.unwrap_or(cfg.batch);
    cfg.alpha = a.alpha.unwrap_or(cfg.alpha);
    cfg.prompt_len = a.prompt_len.unwrap_or(cfg.prompt_len);
    cfg.normalize_projection = !a.no_normalize_projection;
    if let Some(h) = a.hvp {
        cfg.hvp_backend = h.into();
    }
    if a.no_cpt {
        cfg.cpt_weight = 0.0;
    }
    if a.no_gm || a.no_cpt {
        cfg.gm_weight = 0.0;
    }
    cfg.validate()?;

    let (bank, head) = init_model(&world.encoder, world.hand_ids, &cfg)?;
    let out = stage1_train(&world.encoder, &source, bank, head, &cfg)?;
    let gm = cfg.uses_gm().then_some(&out.gm_state);
    let ckpt = Checkpoint::trained(
        &world_hash,
        split.name(),
        world.params.encoder_seed,
        &cfg,
        &out.bank,
        &out.head,
        gm,
    )?;
    ckpt.save(&a.checkpoint)
        .with_context(|| format!("writing {}", a.checkpoint.display()))?;
    if let Some(path) = &a.log {
        fs::write(path, log_to_csv(&out.log)).with_context(|| format!("writing {}", path.display()))?;
    }

    let (pred, _) = stage3_predict(&world.encoder, &out.bank, &source.vocab, source.test.features())?;
    let source_accuracy = accuracy(&pred, source.test.labels());
    let last = out.log.last();
    println!(
        "trained {} steps on {} source classes; source accuracy {source_accuracy:.3}; checkpoint {}",
        out.log.len(),
        source.vocab.len(),
        a.checkpoint.display()
    );
    if let Some(path) = &a.report {
        write_json(
            path,
            &TrainReport {
                manifest_hash: ckpt.manifest_hash.clone(),
                world_hash,
                split: split.name(),
                config: cfg,
                steps: out.log.len(),
                final_ce: last.map(|s| s.ce),
                final_cpt: last.and_then(|s| s.cpt),
                final_gm: last.and_then(|s| s.gm),
                source_accuracy,
            },
        )?;
    }
    Ok(())
}

fn chosen_split(arg: Option<crate::SplitArg>, ckpt: &Checkpoint) -> Result<Split> {
    Ok(match arg {
        Some(s) => s.into(),
        None => Split::parse(&ckpt.split)?,
    })
}

pub fn adapt(a: &AdaptArgs) -> Result<()> {
    let (world, _, ckpt) = open_pair(&a.world, &a.checkpoint, a.force)?;
    ensure!(
        ckpt.stage == Stage::Trained,
        "checkpoint is already adapted; adapt the trained checkpoint instead"
    );
    let split = chosen_split(a.split, &ckpt)?;
    let (_, target) = resolve_split(&world, split)?;
    let cfg = TrainConfig {
        steps_stage2: a.steps.unwrap_or(ckpt.config.steps_stage2),
        lr_stage2: a.lr.unwrap_or(ckpt.config.lr_stage2),
        ..ckpt.config.clone()
    };
    let out = stage2_adapt(&world.encoder, &ckpt.bank()?, &ckpt.head()?, &target.vocab, &cfg)?;
    let adapted = ckpt.adapted(&out.bank, &target.vocab, cfg.steps_stage2, cfg.lr_stage2)?;
    adapted
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    match (out.losses.first(), out.losses.last()) {
        (Some(first), Some(last)) => println!(
            "adapted to {} classes in {} steps; CPT loss {first:.4} -> {last:.4}",
            target.vocab.len(),
            cfg.steps_stage2
        ),
        _ => println!("adapted to {} classes in 0 steps", target.vocab.len()),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    manifest_hash: String,
    world_hash: String,
    checkpoint_manifest: String,
    split: &'static str,
    stage: Stage,
    inline_adapt_steps: usize,
    classes: Vec<String>,
    images: usize,
    accuracy: f64,
    per_class_accuracy: Vec<f64>,
    /// Operation counts; wall-clock is printed, not recorded.
    cost: CostMeter,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let (world, world_hash, ckpt) = open_pair(&a.world, &a.checkpoint, a.force)?;
    let split = chosen_split(a.split, &ckpt)?;
    let (_, target) = resolve_split(&world, split)?;
    let mut bank = ckpt.bank()?;
    let lr = a.lr.unwrap_or(ckpt.config.lr_stage2);
    match ckpt.stage {
        Stage::Adapted => {
            ensure!(
                a.steps == 0,
                "checkpoint is already adapted; --steps applies to trained checkpoints only"
            );
            if ckpt.adapted_classes.as_ref() != Some(&target.vocab.names) && !a.force {
                bail!("checkpoint was adapted to a different class set; pass --force to evaluate anyway");
            }
        }
        Stage::Trained if a.steps > 0 => {
            let cfg = TrainConfig {
                steps_stage2: a.steps,
                lr_stage2: lr,
                ..ckpt.config.clone()
            };
            bank = stage2_adapt(&world.encoder, &bank, &ckpt.head()?, &target.vocab, &cfg)?.bank;
        }
        Stage::Trained => {}
    }
    let (pred, meter) = stage3_predict(&world.encoder, &bank, &target.vocab, target.test.features())?;
    let acc = accuracy(&pred, target.test.labels());
    println!(
        "{} accuracy {acc:.4} on {} images of {} classes; {:.1} us per image",
        split.name(),
        pred.len(),
        target.vocab.len(),
        meter.wall_nanos_per_image() / 1e3
    );
    let manifest_hash = content_hash(&(
        "eval",
        &world_hash,
        &ckpt.manifest_hash,
        split.name(),
        a.steps,
        lr.to_bits(),
    ))?;
    write_json(
        &a.report,
        &EvalReport {
            manifest_hash,
            world_hash,
            checkpoint_manifest: ckpt.manifest_hash.clone(),
            split: split.name(),
            stage: ckpt.stage,
            inline_adapt_steps: a.steps,
            classes: target.vocab.names.clone(),
            images: pred.len(),
            accuracy: acc,
            per_class_accuracy: per_class_accuracy(&pred, target.test.labels(), target.vocab.len()),
            cost: meter.counts(),
        },
    )
}

#[derive(Serialize)]
struct BenchReport {
    manifest_hash: String,
    images: usize,
    tpt: TptConfig,
    self_tpt: CostMeter,
    baseline_tpt: CostMeter,
    self_tpt_backward_per_image: f64,
    baseline_tpt_backward_per_image: f64,
    self_tpt_forward_per_image: f64,
    baseline_tpt_forward_per_image: f64,
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    ensure!(a.images > 0, "--images must be positive");
    let (world, world_hash, ckpt) = open_pair(&a.world, &a.checkpoint, a.force)?;
    let split = chosen_split(a.split, &ckpt)?;
    let (_, target) = resolve_split(&world, split)?;
    ensure!(
        a.images <= target.test.len(),
        "--images {} exceeds the {} target images",
        a.images,
        target.test.len()
    );
    let images = target.test.take(a.images)?;
    let bank = ckpt.bank()?;
    let tpt = TptConfig {
        augments: a.tpt_augs,
        steps: a.tpt_steps,
        seed: ckpt.config.seed,
        ..TptConfig::default()
    };
    let (_, ours) = stage3_predict(&world.encoder, &bank, &target.vocab, images.features())?;
    let (_, base) = baseline_tpt_predict(&world.encoder, &bank, &target.vocab, images.features(), &tpt)?;
    let (t_ours, t_base) = (ours.wall_nanos_per_image(), base.wall_nanos_per_image());
    println!(
        "per image: direct prediction {:.1} us, entropy TPT {:.1} us, speed ratio {:.1}",
        t_ours / 1e3,
        t_base / 1e3,
        t_base / t_ours.max(1.0)
    );
    println!(
        "backward passes per image: direct prediction {}, entropy TPT {}",
        ours.backward_per_image(),
        base.backward_per_image()
    );
    if let Some(path) = &a.report {
        let manifest_hash = content_hash(&("bench", &world_hash, &ckpt.manifest_hash, split.name(), a.images, &tpt))?;
        write_json(
            path,
            &BenchReport {
                manifest_hash,
                images: a.images,
                self_tpt_backward_per_image: ours.backward_per_image(),
                baseline_tpt_backward_per_image: base.backward_per_image(),
                self_tpt_forward_per_image: ours.forward_per_image(),
                baseline_tpt_forward_per_image: base.forward_per_image(),
                tpt,
                self_tpt: ours.counts(),
                baseline_tpt: base.counts(),
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseReport {
    manifest_hash: String,
    split: &'static str,
    cosines: Vec<f64>,
    positive: usize,
    mean_distance_before: f64,
    mean_distance_after: f64,
}

pub fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    let (world, world_hash, ckpt) = open_pair(&a.world, &a.checkpoint, a.force)?;
    ensure!(
        ckpt.stage == Stage::Trained,
        "diagnose needs the trained (un-adapted) checkpoint"
    );
    let split = chosen_split(a.split, &ckpt)?;
    let (_, target) = resolve_split(&world, split)?;
    let (bank, head, cfg) = (ckpt.bank()?, ckpt.head()?, &ckpt.config);
    let features = target.test.features().clone();
    let labels = target.test.labels().to_vec();
    let encoder = &world.encoder;
    let vocab = &target.vocab;

    let cosines = map_indexed(a.seeds as usize, |s| {
        let set = LabeledSet::new(features.clone(), labels.clone())?;
        let sample = bootstrap(&set, cfg.seed, s as u32)?;
        Ok(diagnose_grad_alignment(encoder, &bank, &head, vocab, &sample, cfg)?)
    })?;
    let before = class_distance_matrix(encoder, &bank, vocab)?;
    let adapted = stage2_adapt(encoder, &bank, &head, vocab, cfg)?.bank;
    let after = class_distance_matrix(encoder, &adapted, vocab)?;

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut csv = String::from("seed,cosine\n");
    for (s, c) in cosines.iter().enumerate() {
        writeln!(csv, "{s},{c}").expect("writing to a string");
    }
    fs::write(a.out_dir.join("cosine.csv"), csv)?;
    fs::write(a.out_dir.join("distance_before.csv"), matrix_csv(&before))?;
    fs::write(a.out_dir.join("distance_after.csv"), matrix_csv(&after))?;
    let report = DiagnoseReport {
        manifest_hash: content_hash(&("diagnose", &world_hash, &ckpt.manifest_hash, split.name(), a.seeds))?,
        split: split.name(),
        positive: cosines.iter().filter(|&&c| c > 0.0).count(),
        cosines,
        mean_distance_before: mean_off_diagonal(&before),
        mean_distance_after: mean_off_diagonal(&after),
    };
    println!(
        "CE/CPT gradient cosine positive in {}/{} resamples; mean class distance {:.4} -> {:.4}",
        report.positive, a.seeds, report.mean_distance_before, report.mean_distance_after
    );
    write_json(&a.out_dir.join("diagnose.json"), &report)
}

#[derive(Serialize)]
struct AblateReport {
    manifest_hash: String,
    seeds: u64,
    world: WorldParams,
    config: TrainConfig,
    runs: Vec<Vec<VariantReport>>,
    mean_new_accuracy: Vec<(Variant, f64)>,
    mean_new_accuracy_adapted: Vec<(Variant, f64)>,
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    ensure!(a.seeds > 0, "--seeds must be positive");
    let params = WorldParams::default();
    let cfg = TrainConfig::default();
    let variants = [Variant::CeOnly, Variant::CeCpt, Variant::CeCptGm];
    let runs = map_indexed(a.seeds as usize, |s| Ok(run_seed(&params, &cfg, s as u64, &variants)?))?;
    let mean = |i: usize, f: fn(&VariantReport) -> f64| runs.iter().map(|r| f(&r[i])).sum::<f64>() / runs.len() as f64;
    let report = AblateReport {
        manifest_hash: content_hash(&("ablate", a.seeds, &params, &cfg))?,
        seeds: a.seeds,
        mean_new_accuracy: variants
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, mean(i, |r| r.new_accuracy)))
            .collect(),
        mean_new_accuracy_adapted: variants
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, mean(i, |r| r.new_accuracy_adapted)))
            .collect(),
        world: params,
        config: cfg,
        runs,
    };
    println!("{:<12} {:>10} {:>10} {:>10}", "variant", "new", "adapted", "cos>0");
    for (i, v) in variants.iter().enumerate() {
        let positive = report.runs.iter().filter(|r| r[i].grad_cosine > 0.0).count();
        println!(
            "{:<12} {:>10.4} {:>10.4} {:>7}/{}",
            format!("{v:?}"),
            report.mean_new_accuracy[i].1,
            report.mean_new_accuracy_adapted[i].1,
            positive,
            a.seeds
        );
    }
    write_json(&a.report, &report)
}
