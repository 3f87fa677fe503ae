use proptest::prelude::*;

use selftpt_core::experiment::seeded_world;
use selftpt_core::losses::{clip_probabilities, cpt_loss, entropy, grad_cosine, GmState};
use selftpt_core::pipeline::{class_distance_matrix, init_model, TrainConfig};
use selftpt_core::synth::{
    class_tokens_unique, generate_world, make_domain_shift, split_base_new, zero_shot_accuracy, WorldParams,
};
use selftpt_core::tensor::{DiffTensor, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn unit_norm(row: &[f64]) -> bool {
    (row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(m in matrix(3, 5)) {
        let p = DiffTensor::constant(m).softmax_rows().unwrap();
        for r in 0..3 {
            let s: f64 = p.value().row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_probabilities_form_a_distribution(e in matrix(1, 4), w in matrix(3, 4)) {
        prop_assume!(e.norm() > 1e-3 && (0..3).all(|k| w.row(k).iter().any(|v| v.abs() > 1e-3)));
        let e = DiffTensor::constant(e.reshaped(vec![4]).unwrap());
        let p = clip_probabilities(&e, &DiffTensor::constant(w), 0.07).unwrap();
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.data().iter().all(|&x| x >= 0.0));
        let h = entropy(&p).unwrap().item();
        prop_assert!(h >= -1e-12 && h <= 3f64.ln() + 1e-12);
    }

    #[test]
    fn normalized_rows_have_unit_norm(m in matrix(4, 3)) {
        prop_assume!((0..4).all(|r| m.row(r).iter().any(|v| v.abs() > 1e-3)));
        let n = DiffTensor::constant(m).l2_normalize_rows().unwrap();
        for r in 0..4 {
            prop_assert!((n.value().row(r).iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cpt_is_non_negative_and_class_permutation_invariant(z in matrix(12, 3), shift in 1usize..3) {
        let z = DiffTensor::constant(z).l2_normalize_rows().unwrap().to_tensor();
        let c = 3;
        let mut rows = Vec::new();
        for v in 0..4 {
            for k in 0..c {
                rows.extend_from_slice(z.row(v * c + (k + shift) % c));
            }
        }
        let a = cpt_loss(&DiffTensor::constant(z), 0.07).unwrap().item();
        let b = cpt_loss(&DiffTensor::constant(Tensor::matrix(12, 3, rows).unwrap()), 0.07).unwrap().item();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn grad_cosine_stays_in_range(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-6) && b.iter().any(|v| v.abs() > 1e-6));
        let c = grad_cosine(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn ema_stays_within_the_hull_of_its_inputs(grads in prop::collection::vec(-4.0f64..4.0, 1..30), alpha in 0.01f64..0.99) {
        let mut s = GmState::new(1, alpha).unwrap();
        for g in &grads {
            s.update(&[*g]).unwrap();
        }
        let lo = grads.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = grads.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.ema_grad[0] >= lo - 1e-12 && s.ema_grad[0] <= hi + 1e-12);
        prop_assert_eq!(s.steps, grads.len() as u64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn worlds_are_well_formed(seed in 0u64..1000, classes in 1usize..6, sigma in 0.0f64..1.0) {
        let params = WorldParams {
            seed,
            encoder_seed: seed,
            classes: 2 * classes,
            sigma,
            train_per_class: 3,
            test_per_class: 2,
            ..Default::default()
        };
        let w = generate_world(&params).unwrap();
        prop_assert!(class_tokens_unique(&w.vocab));
        for set in [&w.train, &w.test] {
            let f = set.features();
            prop_assert!((0..set.len()).all(|i| unit_norm(f.row(i))));
        }
        prop_assert!((0..w.classes()).all(|k| unit_norm(w.prototypes.row(k))));
        let (base, new) = split_base_new(&w).unwrap();
        prop_assert_eq!(base.vocab.len() + new.vocab.len(), w.classes());
        prop_assert!(base.vocab.tokens.iter().all(|t| !new.vocab.tokens.contains(t)));
        let shifted = make_domain_shift(seed, &w.test, 0.3, &vec![0.1; w.prototypes.cols()]).unwrap();
        prop_assert_eq!(shifted.labels(), w.test.labels());
        let f = shifted.features();
        prop_assert!((0..shifted.len()).all(|i| unit_norm(f.row(i))));
        prop_assert_eq!(generate_world(&params).unwrap(), w);
    }

    #[test]
    fn distance_matrix_is_symmetric_with_zero_diagonal(seed in 0u64..1000) {
        let w = generate_world(&WorldParams { seed, classes: 6, train_per_class: 1, test_per_class: 1, ..Default::default() }).unwrap();
        let (bank, _) = init_model(&w.encoder, w.hand_ids, &TrainConfig::default()).unwrap();
        let m = class_distance_matrix(&w.encoder, &bank, &w.vocab).unwrap();
        for i in 0..6 {
            prop_assert_eq!(m.row(i)[i], 0.0);
            for j in 0..6 {
                prop_assert!((m.row(i)[j] - m.row(j)[i]).abs() < 1e-12);
                prop_assert!(m.row(i)[j] >= -1e-12 && m.row(i)[j] <= 2.0 + 1e-12);
            }
        }
    }
}

#[test]
fn odd_class_counts_cannot_be_split() {
    let w = generate_world(&WorldParams {
        classes: 3,
        train_per_class: 1,
        test_per_class: 1,
        ..Default::default()
    })
    .unwrap();
    assert!(split_base_new(&w).is_err());
}

#[test]
fn noiseless_worlds_sample_their_prototypes() {
    let w = generate_world(&WorldParams {
        sigma: 0.0,
        classes: 4,
        train_per_class: 2,
        test_per_class: 2,
        ..Default::default()
    })
    .unwrap();
    let f = w.test.features();
    for (i, &l) in w.test.labels().iter().enumerate() {
        for (a, b) in f.row(i).iter().zip(w.prototypes.row(l)) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_shift_returns_the_original_samples() {
    let w = generate_world(&WorldParams {
        classes: 4,
        train_per_class: 1,
        test_per_class: 3,
        ..Default::default()
    })
    .unwrap();
    let shifted = make_domain_shift(9, &w.test, 0.0, &vec![0.0; w.prototypes.cols()]).unwrap();
    for (a, b) in shifted.features().data().iter().zip(w.test.features().data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn hand_prompts_beat_chance_on_default_worlds() {
    for seed in 0..10 {
        let w = seeded_world(&WorldParams::default(), seed).unwrap();
        let acc = zero_shot_accuracy(&w, &w.vocab, &w.test).unwrap();
        assert!(acc > 1.0 / w.classes() as f64, "seed {seed}: zero-shot accuracy {acc}");
    }
}

#[test]
fn stronger_shifts_do_not_help_zero_shot_on_average() {
    let sigmas = [0.0, 0.2, 0.5, 1.0];
    let mut mean = vec![0.0; sigmas.len()];
    for seed in 0..10 {
        let w = seeded_world(&WorldParams::default(), seed).unwrap();
        let bias = vec![0.0; w.prototypes.cols()];
        for (m, &s) in mean.iter_mut().zip(&sigmas) {
            let shifted = make_domain_shift(seed, &w.test, s, &bias).unwrap();
            *m += zero_shot_accuracy(&w, &w.vocab, &shifted).unwrap() / 10.0;
        }
    }
    assert!(mean.windows(2).all(|p| p[1] <= p[0]), "{mean:?}");
}
