use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{check_store, DEFAULT_STEP};
use crate::cells::{call_counts, reset_call_counts};
use crate::listops::{generate_dataset, GenConfig};

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        d: 8,
        d_cell: 16,
        d_s: 4,
        k: 3,
        d_h: 6,
        ..ModelConfig::default()
    }
}

fn samples(n: usize, seed: u64) -> Vec<ListOpsSample> {
    let cfg = GenConfig {
        max_length: 20,
        ..GenConfig::desk()
    };
    generate_dataset(&cfg, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn zero_head_gives_zero_logits() {
    let mut store = ParamStore::new();
    let head = ClassifierHead::new(&mut store, "h", 5, NUM_CLASSES, &mut ChaCha8Rng::seed_from_u64(0));
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape));
    }
    let tape = Tape::with_params(&store);
    let x = tape.constant(Tensor::vector(vec![0.3, -1.0, 2.0, 0.5, 0.1]));
    let logits = classify(&tape, x, &head).unwrap();
    assert_eq!(logits.shape(), vec![10]);
    assert!(logits.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn classify_gradient() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let head = ClassifierHead::new(&mut store, "h", 4, NUM_CLASSES, &mut rng);
    store.add("x", Tensor::vector(vec![0.7, -0.4, 1.1, 0.2]));
    let x = store.find("x").unwrap();
    let err = check_store(
        &mut store,
        |t| {
            let logits = classify(t, t.param(x), &head)?;
            cross_entropy(logits, &[3])
        },
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn cross_entropy_examples() {
    let tape = Tape::new();
    let uniform = tape.leaf(Tensor::zeros(vec![10]));
    let l = cross_entropy(uniform, &[4]).unwrap();
    assert!((l.item() - 10f64.ln()).abs() < 1e-12);

    let mut v = vec![0.0; 10];
    v[7] = 1000.0;
    let l = cross_entropy(tape.leaf(Tensor::vector(v)), &[7]).unwrap();
    assert!(l.item() < 1e-6);

    assert!(matches!(cross_entropy(uniform, &[10]), Err(Error::Contract(_))));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let tape = Tape::new();
    let raw: Vec<f64> = (0..10).map(|i| ((i * 7) % 5) as f64 * 0.4 - 0.9).collect();
    let logits = tape.leaf(Tensor::vector(raw.clone()));
    let loss = cross_entropy(logits, &[2]).unwrap();
    let g = tape.backward(loss).unwrap();
    let g = g.get(logits).unwrap();
    let z: f64 = raw.iter().map(|v| v.exp()).sum();
    for (i, &r) in raw.iter().enumerate() {
        let expected = r.exp() / z - if i == 2 { 1.0 } else { 0.0 };
        assert!((g.data()[i] - expected).abs() < 1e-10);
    }
}

#[test]
fn variant_tags_parse() {
    for v in Variant::ALL {
        assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
    }
    assert!("nope".parse::<Variant>().is_err());
}

#[test]
fn every_variant_runs_forward_and_backward() {
    let data = samples(4, 2);
    let batch: Vec<&ListOpsSample> = data.iter().collect();
    for v in Variant::ALL {
        let model = Model::new(small(v), 3).unwrap();
        let tape = Tape::with_params(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = model.forward(&tape, &batch, true, &mut rng).unwrap();
        assert_eq!(out.predictions.len(), 4);
        assert_eq!(out.logits.shape(), vec![4, 10]);
        assert!(out.loss.item().is_finite());
        let g = tape.backward(out.loss).unwrap();
        let head_grad = g.param(model.head.w2).unwrap();
        assert!(head_grad.data().iter().any(|&x| x != 0.0), "{v}");
    }
}

#[test]
fn gold_tree_never_scores() {
    let data = samples(6, 5);
    let batch: Vec<&ListOpsSample> = data.iter().collect();
    let model = Model::new(small(Variant::GoldTree), 0).unwrap();
    assert!(model.scorer.is_none());
    reset_call_counts();
    let tape = Tape::with_params(&model.store);
    model.forward(&tape, &batch, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let c = call_counts();
    assert_eq!(c.score, 0);
    let expected: usize = data.iter().map(|s| s.tokens.len() - 1).sum();
    assert_eq!(c.compose as usize, expected);
}

#[test]
fn composition_counts_per_variant() {
    let data = samples(5, 6);
    for s in &data {
        let n = s.tokens.len();
        let k = 3;
        let ebt = Model::new(small(Variant::Ebt), 1).unwrap();
        reset_call_counts();
        let tape = Tape::with_params(&ebt.store);
        ebt.forward(&tape, &[s], false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(call_counts().compose as usize <= k * (n - 1));

        let bt = Model::new(small(Variant::Bt), 1).unwrap();
        reset_call_counts();
        let tape = Tape::with_params(&bt.store);
        bt.forward(&tape, &[s], false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let quadratic: usize = (1..n).sum();
        assert!(call_counts().compose as usize >= quadratic, "n = {n}");
    }
}

#[test]
fn slicing_only_for_disentangled_variants() {
    let cfg = |v| ModelConfig {
        d: 16,
        d_s: 4,
        ..small(v)
    };
    let ebt = Model::new(cfg(Variant::Ebt), 0).unwrap();
    assert_eq!(ebt.scorer.as_ref().unwrap().width, 4);
    let bt = Model::new(cfg(Variant::Bt), 0).unwrap();
    assert_eq!(bt.scorer.as_ref().unwrap().width, 16);
    let unsliced = Model::new(ModelConfig { slice: false, ..cfg(Variant::Ebt) }, 0).unwrap();
    assert_eq!(unsliced.scorer.as_ref().unwrap().width, 16);
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        ModelConfig { k: 0, ..small(Variant::Ebt) },
        ModelConfig { d: 0, ..small(Variant::Ebt) },
        ModelConfig { temperature: 0.0, ..small(Variant::Gt) },
        ModelConfig { dropout: 1.0, ..small(Variant::EbtGau) },
    ] {
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    }
}

#[test]
fn inference_is_deterministic() {
    let data = samples(6, 8);
    let batch: Vec<&ListOpsSample> = data.iter().collect();
    for v in [Variant::Gt, Variant::Ebt, Variant::EbtGau] {
        let model = Model::new(small(v), 2).unwrap();
        let run = |seed| {
            let tape = Tape::with_params(&model.store);
            let out = model.forward(&tape, &batch, false, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            out.logits.value()
        };
        assert_eq!(run(1), run(2));
    }
}
