use selftpt_core::experiment::{bootstrap, per_class_accuracy, resolve_split, seeded_world, Split, Variant};
use selftpt_core::pipeline::TrainConfig;
use selftpt_core::synth::{split_base_new, LabeledSet, SyntheticWorld, WorldParams};
use selftpt_core::tensor::Tensor;

fn world() -> SyntheticWorld {
    seeded_world(
        &WorldParams {
            classes: 6,
            train_per_class: 3,
            test_per_class: 4,
            ..Default::default()
        },
        7,
    )
    .unwrap()
}

#[test]
fn split_names_round_trip() {
    for s in [Split::BaseNew, Split::Cross, Split::Domain] {
        assert_eq!(Split::parse(s.name()).unwrap(), s);
    }
    assert!(Split::parse("base_new").is_err());
    assert!(Split::Cross.default_config().epochs < Split::BaseNew.default_config().epochs);
}

#[test]
fn base_new_is_the_plain_halving() {
    let w = world();
    let (s, t) = resolve_split(&w, Split::BaseNew).unwrap();
    let (s0, t0) = split_base_new(&w).unwrap();
    assert_eq!(s.vocab, s0.vocab);
    assert_eq!(t.test.features(), t0.test.features());
    assert_eq!(s.vocab.len(), 3);
}

#[test]
fn cross_shifts_only_the_target_images() {
    let w = world();
    let (s, t) = resolve_split(&w, Split::Cross).unwrap();
    let (s0, t0) = split_base_new(&w).unwrap();
    assert_eq!(s.test.features(), s0.test.features());
    assert_eq!(t.vocab, t0.vocab);
    assert_eq!(t.test.labels(), t0.test.labels());
    assert_ne!(t.test.features(), t0.test.features());
}

#[test]
fn domain_keeps_every_class_on_both_sides() {
    let w = world();
    let (s, t) = resolve_split(&w, Split::Domain).unwrap();
    assert_eq!(s.vocab, w.vocab);
    assert_eq!(t.vocab, w.vocab);
    assert_eq!(t.test.labels(), w.test.labels());
    assert_ne!(t.test.features(), w.test.features());
}

#[test]
fn per_class_accuracy_counts_each_class_separately() {
    let acc = per_class_accuracy(&[0, 1, 1, 2, 0], &[0, 1, 0, 2, 0], 4);
    assert_eq!(acc, vec![2.0 / 3.0, 1.0, 1.0, 0.0]);
}

#[test]
fn bootstrap_is_seeded_and_draws_from_the_set() {
    let w = world();
    let a = bootstrap(&w.test, 3, 0).unwrap();
    assert_eq!(a.len(), w.test.len());
    assert_eq!(a, bootstrap(&w.test, 3, 0).unwrap());
    assert_ne!(a, bootstrap(&w.test, 3, 1).unwrap());
    let f = w.test.features();
    for i in 0..a.len() {
        let row = a.features().row(i);
        let src = (0..f.rows()).find(|&j| f.row(j) == row).expect("resampled row not in the set");
        assert_eq!(a.labels()[i], w.test.labels()[src]);
    }
    let empty = LabeledSet::new(Tensor::matrix(0, 4, vec![]).unwrap(), vec![]).unwrap();
    assert!(bootstrap(&empty, 0, 0).is_err());
}

#[test]
fn variants_switch_the_self_supervised_losses() {
    let base = TrainConfig::default();
    let ce = Variant::CeOnly.configure(&base);
    assert!(ce.cpt_weight == 0.0 && ce.gm_weight == 0.0);
    let cpt = Variant::CeCpt.configure(&base);
    assert!(cpt.cpt_weight > 0.0 && cpt.gm_weight == 0.0);
    assert_eq!(Variant::CeCptGm.configure(&base), base);
}
