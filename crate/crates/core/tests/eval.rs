use proptest::prelude::*;

use sepme_core::diffusion::{make_schedule, sample, ConceptBank, DenoiserParams, ModelDims, NoiseSchedule, ToyDataset};
use sepme_core::eval::{
    ablate_tau, evaluate, param_delta_norm, sample_distance, separability_suite, EvalSpec, SuiteProbes, ToyClassifier,
    SUITE_MAX_CONCEPTS,
};
use sepme_core::trainers::{train_sepme, EraseHyper, SepmeMode};
use sepme_core::{Error, Rng};

struct Toy {
    dm: DenoiserParams,
    bank: ConceptBank,
    data: ToyDataset,
    sched: NoiseSchedule,
}

fn toy(n: usize) -> Toy {
    let dims = ModelDims {
        hidden: 8,
        d_in: 32,
        tokens: 2,
        d_out: 6,
        ffn: 10,
        timesteps: 20,
        ..ModelDims::default()
    };
    let names: Vec<String> = (0..n).map(|i| ((b'A' + i as u8) as char).to_string()).collect();
    let seeded: Vec<(String, u64)> = names.iter().cloned().zip(1..).collect();
    Toy {
        dm: DenoiserParams::init(dims, 1.0, &mut Rng::new(5)),
        bank: ConceptBank::generate(&seeded, 0, dims.tokens, dims.d_in, 1.0).unwrap(),
        data: ToyDataset::generate(&names, 2, 2.0, 0.3, 40, 9).unwrap(),
        sched: make_schedule(20, 1e-3, 0.2).unwrap(),
    }
}

fn hyper(iters: usize) -> EraseHyper {
    EraseHyper {
        max_iters: iters,
        beta: 0.5,
        lr: 5e-2,
        tau: f64::NEG_INFINITY,
        ..EraseHyper::sepme()
    }
}

fn spec() -> EvalSpec {
    EvalSpec {
        n_per_concept: 12,
        corr_probes: 6,
        seed: 4,
    }
}

#[test]
fn classifier_recovers_dataset_classes() {
    let t = toy(3);
    let clf = ToyClassifier::fit(&t.data, 9);
    assert!(clf.is_fitted());
    for (k, c) in t.data.classes.iter().enumerate() {
        assert_eq!(clf.classify(&c.center).unwrap(), k);
        let xs: Vec<Vec<f64>> = (0..c.samples.rows()).map(|i| c.samples.row(i).to_vec()).collect();
        assert!(clf.accuracy(&xs, &c.name).unwrap() > 0.9);
    }
    assert!(matches!(
        ToyClassifier::default().classify(&[0.0, 0.0]),
        Err(Error::UntrainedClassifier)
    ));
    assert!(matches!(clf.accuracy(&[vec![0.0, 0.0]], "Z"), Err(Error::UnknownConcept(_))));
}

#[test]
fn identity_edit_changes_nothing() {
    let t = toy(3);
    let clf = ToyClassifier::fit(&t.data, 9);
    let r = evaluate(&t.dm, &t.dm, &t.bank, &["A", "B", "C"], &t.data, &clf, &t.sched, &spec()).unwrap();
    for c in &r.concepts {
        assert_eq!(c.acc_before, c.acc_after);
        assert_eq!(c.distance, 0.0);
        assert_eq!(c.samples, 12);
    }
    assert_eq!(r.delta_norm, 0.0);
}

#[test]
fn evaluate_rejects_bad_setups() {
    let t = toy(2);
    let clf = ToyClassifier::fit(&t.data, 9);
    let zero = EvalSpec {
        n_per_concept: 0,
        ..spec()
    };
    assert!(evaluate(&t.dm, &t.dm, &t.bank, &["A"], &t.data, &clf, &t.sched, &zero).is_err());
    let untrained = ToyClassifier::default();
    assert!(matches!(
        evaluate(&t.dm, &t.dm, &t.bank, &["A"], &t.data, &untrained, &t.sched, &spec()),
        Err(Error::UntrainedClassifier)
    ));
}

#[test]
fn evaluation_is_deterministic_and_sees_the_edit() {
    let t = toy(3);
    let clf = ToyClassifier::fit(&t.data, 9);
    let out = train_sepme(&t.dm, &t.bank, &["A", "B"], &t.data, &t.sched, &hyper(20), SepmeMode::Separate).unwrap();
    let edited = out.set.apply(&["A"]).unwrap();
    let a = evaluate(&edited, &t.dm, &t.bank, &["A", "B"], &t.data, &clf, &t.sched, &spec()).unwrap();
    let b = evaluate(&edited, &t.dm, &t.bank, &["A", "B"], &t.data, &clf, &t.sched, &spec()).unwrap();
    assert_eq!(a, b);
    assert!(a.get("A").unwrap().distance > 0.0);
    assert!(a.delta_norm > 0.0);
    assert_eq!(a.delta_norm, param_delta_norm(&edited, &t.dm).unwrap());
    // B is protected by the A increment up to rounding in c_B·S_p
    assert!(a.get("B").unwrap().distance < 1e-9);
}

#[test]
fn suite_empty_subset_is_exact_and_cells_are_complete() {
    let t = toy(3);
    let out = train_sepme(&t.dm, &t.bank, &["A", "B", "C"], &t.data, &t.sched, &hyper(8), SepmeMode::Separate).unwrap();
    let probes = SuiteProbes::draw(&out.set, &t.data, &t.sched, 10, 2).unwrap();
    assert_eq!(probes.erased.len(), 3);
    assert!(probes.erased.iter().all(|(_, p)| p.len() == 10));
    let h = hyper(8);
    let cells = separability_suite(&out.set, &t.bank, &probes, &h, 1e-9).unwrap();
    // 8 subsets × (blank + 3 concepts)
    assert_eq!(cells.len(), 32);
    for c in cells.iter().filter(|c| c.subset.is_empty()) {
        assert!(!c.erased);
        assert_eq!(c.metric, 0.0);
    }
    for c in &cells {
        assert_eq!(c.erased, c.subset.contains(&c.concept));
        if !c.erased {
            assert!(c.pass, "{c:?}");
        }
    }
}

#[test]
fn suite_limits() {
    let t = toy(6);
    let names = ["A", "B", "C", "D", "E", "F"];
    let out = train_sepme(&t.dm, &t.bank, &names, &t.data, &t.sched, &hyper(0), SepmeMode::Separate).unwrap();
    assert!(SUITE_MAX_CONCEPTS < names.len());
    let probes = SuiteProbes::draw(&out.set, &t.data, &t.sched, 2, 0).unwrap();
    assert!(separability_suite(&out.set, &t.bank, &probes, &hyper(0), 1e-9).is_err());
    assert!(SuiteProbes::draw(&out.set, &t.data, &t.sched, 0, 0).is_err());
}

#[test]
fn infinite_tau_leaves_model_unchanged() {
    let t = toy(3);
    let clf = ToyClassifier::fit(&t.data, 9);
    let rows = ablate_tau(
        &[f64::INFINITY, -1.0],
        &t.dm,
        &t.bank,
        &["A"],
        &["A", "B"],
        &t.data,
        &clf,
        &t.sched,
        &hyper(5),
        SepmeMode::Separate,
        &spec(),
    )
    .unwrap();
    assert_eq!(rows[0].iters_run, 1);
    assert_eq!(rows[0].delta_norm, 0.0);
    for c in &rows[0].eval.concepts {
        assert_eq!(c.acc_before, c.acc_after);
    }
    assert!(rows[1].iters_run >= rows[0].iters_run);
    assert!(rows[1].delta_norm > 0.0);
}

fn samples(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.normal_vec(2)).collect()
}

proptest! {
    #[test]
    fn distance_is_a_pseudometric(n in 1usize..20, s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000) {
        let (a, b, c) = (samples(n, s1), samples(n, s2), samples(n, s3));
        let ab = sample_distance(&a, &b).unwrap();
        prop_assert_eq!(sample_distance(&a, &a).unwrap(), 0.0);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, sample_distance(&b, &a).unwrap());
        let ac = sample_distance(&a, &c).unwrap();
        let cb = sample_distance(&c, &b).unwrap();
        prop_assert!(ab <= ac + cb + 1e-12);
    }

    #[test]
    fn sampling_is_deterministic(seed in 0u64..50) {
        let t = toy(2);
        let tokens = &t.bank.get("A").unwrap().tokens;
        let a = sample(&t.dm, tokens, &t.sched, 3, seed).unwrap();
        prop_assert_eq!(&a, &sample(&t.dm, tokens, &t.sched, 3, seed).unwrap());
    }
}

#[test]
fn distance_rejects_mismatched_sets() {
    assert!(sample_distance(&samples(2, 0), &samples(3, 0)).is_err());
    assert!(sample_distance(&[], &[]).is_err());
}
