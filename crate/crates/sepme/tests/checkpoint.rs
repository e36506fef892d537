use proptest::prelude::*;

use sepme::checkpoint::{
    delta_layer, increment_from_checkpoint, increment_to_checkpoint, is_delta_key, params_from_checkpoint,
    params_to_checkpoint, Checkpoint, Tensor, MAGIC,
};
use sepme::CliError;
use sepme_core::decoupling::{build_constraint, WeightIncrement};
use sepme_core::diffusion::{ConceptBank, DenoiserParams, ModelDims};
use sepme_core::Rng;

fn dims() -> ModelDims {
    ModelDims {
        hidden: 6,
        d_in: 10,
        tokens: 2,
        d_out: 4,
        ffn: 8,
        timesteps: 12,
        ..ModelDims::default()
    }
}

#[test]
fn params_round_trip_bitwise() {
    let p = DenoiserParams::init(dims(), 3.0, &mut Rng::new(4));
    let bytes = params_to_checkpoint(&p).to_bytes();
    let back = params_from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), dims()).unwrap();
    assert_eq!(back, p);
    assert_eq!(params_to_checkpoint(&back).to_bytes(), bytes);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let p = DenoiserParams::init(dims(), 1.0, &mut Rng::new(1));
    params_to_checkpoint(&p).save(&path).unwrap();
    assert_eq!(&std::fs::read(&path).unwrap()[..6], MAGIC);
    let back = params_from_checkpoint(&Checkpoint::load(&path).unwrap(), dims()).unwrap();
    assert_eq!(back, p);
}

#[test]
fn corrupt_inputs_are_format_errors() {
    let p = DenoiserParams::init(dims(), 1.0, &mut Rng::new(1));
    let good = params_to_checkpoint(&p).to_bytes();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let mut bad_dtype = good.clone();
    let name_len = u32::from_le_bytes(good[10..14].try_into().unwrap()) as usize;
    bad_dtype[14 + name_len] = 7;
    let mut trailing = good.clone();
    trailing.push(0);
    for bytes in [&bad_magic[..], &good[..good.len() - 3], &good[..4], &bad_dtype[..], &trailing[..]] {
        assert!(matches!(Checkpoint::from_bytes(bytes), Err(CliError::Format(_))));
    }
    let err = Checkpoint::from_bytes(&bad_magic).unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn model_checkpoint_must_match_dims() {
    let p = DenoiserParams::init(dims(), 1.0, &mut Rng::new(1));
    let mut ck = params_to_checkpoint(&p);
    let other = ModelDims { hidden: 7, ..dims() };
    assert!(params_from_checkpoint(&ck, other).is_err());
    ck.push(Tensor::scalar("stray", 1.0));
    assert!(params_from_checkpoint(&ck, dims()).is_err());
}

#[test]
fn increments_round_trip() {
    let d = dims();
    let p = DenoiserParams::init(d, 1.0, &mut Rng::new(1));
    let bank = ConceptBank::generate(&[("A".into(), 1), ("B".into(), 2)], 0, d.tokens, d.d_in, 1.0).unwrap();
    let embeds = [bank.get("A").unwrap(), bank.get("B").unwrap()];
    let cs = build_constraint(&embeds, 0, bank.blank()).unwrap();
    let mut rng = Rng::new(8);
    let mut inc = WeightIncrement::decoupled("A", cs, 1e-4, &p.editable_layers(), d.d_out).unwrap();
    inc.update(|ws| {
        for (_, w) in ws.iter_mut() {
            *w = rng.normal_matrix(w.rows(), w.cols(), 1.0);
        }
    })
    .unwrap();
    let ck = Checkpoint::from_bytes(&increment_to_checkpoint(&inc).to_bytes()).unwrap();
    for key in ["inc/A/to_k.0/w", "inc/A/to_v.1/w", "inc/A/S_p", "inc/A/A", "beta"] {
        assert!(ck.get(key).is_ok(), "{key}");
    }
    let covered = inc.constraint().unwrap().covered.clone();
    let back = increment_from_checkpoint(&ck, "A", &covered).unwrap();
    assert_eq!(back, inc);

    let dense = WeightIncrement::dense("B+C", vec![("to_q.0".into(), rng.normal_matrix(6, 4, 1.0))]).unwrap();
    let ck = increment_to_checkpoint(&dense);
    assert_eq!(ck.names().collect::<Vec<_>>(), ["inc/B+C/to_q.0/delta"]);
    assert_eq!(increment_from_checkpoint(&ck, "B+C", &[]).unwrap(), dense);
    assert!(increment_from_checkpoint(&ck, "B", &[]).is_err());
}

#[test]
fn delta_keys() {
    assert!(is_delta_key("inc/A/to_k.0/w"));
    assert!(is_delta_key("inc/A+B/to_q.1/delta"));
    assert!(!is_delta_key("inc/A/S_p"));
    assert!(!is_delta_key("beta"));
    assert_eq!(delta_layer("inc/A/to_v.1/w"), Some("to_v.1"));
    assert_eq!(delta_layer("inc/A/S_p"), None);
}

#[test]
fn diff_lists_changed_and_missing() {
    let mut a = Checkpoint::default();
    a.push(Tensor::scalar("x", 1.0));
    a.push(Tensor::scalar("y", 2.0));
    let mut b = a.clone();
    b.tensors[1].data[0] = 3.0;
    b.push(Tensor::scalar("z", 0.0));
    assert_eq!(a.diff(&b), ["y", "z"]);
    assert!(a.diff(&a).is_empty());
}

fn tensor() -> impl Strategy<Value = Tensor> {
    ("[a-z/._0-9]{1,12}", prop::collection::vec(0usize..4, 0..3)).prop_flat_map(|(name, shape)| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<f64>(), n).prop_map(move |data| Tensor {
            name: name.clone(),
            shape: shape.clone(),
            data,
        })
    })
}

proptest! {
    #[test]
    fn arbitrary_checkpoints_round_trip(ts in prop::collection::vec(tensor(), 0..6)) {
        let mut ck = Checkpoint::default();
        for (i, mut t) in ts.into_iter().enumerate() {
            t.name = format!("{i}/{}", t.name);
            ck.push(t);
        }
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.tensors.len(), ck.tensors.len());
    }

    #[test]
    fn truncation_never_panics(cut in 0usize..200) {
        let p = DenoiserParams::init(dims(), 1.0, &mut Rng::new(1));
        let bytes = params_to_checkpoint(&p).to_bytes();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
}
