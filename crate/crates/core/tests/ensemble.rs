use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qtdog::data::{gen_spurious_blobs, SpuriousBlobs};
use qtdog::ensemble::{eoq_accuracy, predict_eoq, run_eoq, EnsembleSpec, MemberSeeds};
use qtdog::nn::{argmax, Layer, MlpSpec, ModelState, Param};
use qtdog::trainer::{self, TrainConfig};
use qtdog::{Execution, Tensor};

/// A model whose logits equal a fixed linear map of a 1-d input: one hidden
/// relu unit carrying x ≥ 0 and an output layer with weights `out`.
fn fixed_logits(out: &[f64]) -> ModelState {
    let c = out.len();
    let mut m = ModelState::init(MlpSpec {
        input_dim: 1,
        hidden_dims: vec![1],
        num_classes: c,
        activation: Default::default(),
        seed: 0,
    })
    .unwrap();
    m.layers = vec![
        Layer {
            weight: Param::new(Tensor::matrix(1, 1, vec![1.0]).unwrap()),
            bias: Param::new(Tensor::vector(vec![0.0]).unwrap()),
        },
        Layer {
            weight: Param::new(Tensor::matrix(c, 1, out.to_vec()).unwrap()),
            bias: Param::new(Tensor::vector(vec![0.0; c]).unwrap()),
        },
    ];
    m
}

fn one() -> Tensor {
    Tensor::matrix(1, 1, vec![1.0]).unwrap()
}

#[test]
fn tie_goes_to_lowest_class() {
    let (a, b) = (fixed_logits(&[2.0, 0.0]), fixed_logits(&[0.0, 2.0]));
    let p = predict_eoq(&[&a, &b], &one()).unwrap();
    assert_eq!(p[0].class, 0);
    assert!(p[0].probs.iter().all(|v| (v - 0.5).abs() < 1e-15));
}

#[test]
fn three_members_hand_averaged() {
    let ms = [
        fixed_logits(&[1.0, 4.0, -2.0]),
        fixed_logits(&[3.0, -1.0, 0.5]),
        fixed_logits(&[0.5, 0.0, 5.0]),
    ];
    // averages: [1.5, 1.0, 1.1666...]
    let refs: Vec<&ModelState> = ms.iter().collect();
    let p = predict_eoq(&refs, &one()).unwrap();
    assert_eq!(p[0].class, 0);
    let avg = [1.5, 1.0, 3.5 / 3.0];
    let z: f64 = avg.iter().map(|v: &f64| v.exp()).sum();
    for (got, v) in p[0].probs.iter().zip(avg) {
        assert!((got - v.exp() / z).abs() < 1e-15);
    }
}

fn random_model(seed: u64) -> ModelState {
    ModelState::init(MlpSpec {
        input_dim: 3,
        hidden_dims: vec![5],
        num_classes: 4,
        activation: Default::default(),
        seed,
    })
    .unwrap()
}

#[test]
fn identical_members_match_single_model() {
    let m = random_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::matrix(20, 3, (0..60).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let p = predict_eoq(&[&m, &m, &m], &x).unwrap();
    let single = m.predict(&x).unwrap();
    assert_eq!(p.iter().map(|e| e.class).collect::<Vec<_>>(), single);
}

#[test]
fn prediction_is_argmax_of_mean_logits() {
    let ms: Vec<ModelState> = (0..4).map(random_model).collect();
    let refs: Vec<&ModelState> = ms.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::matrix(50, 3, (0..150).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    let preds = predict_eoq(&refs, &x).unwrap();
    let logits: Vec<Tensor> = ms.iter().map(|m| m.forward(&x).unwrap()).collect();
    for (i, p) in preds.iter().enumerate() {
        let mean: Vec<f64> = (0..4)
            .map(|c| logits.iter().map(|l| l.row(i)[c]).sum::<f64>() / 4.0)
            .collect();
        assert_eq!(p.class, argmax(&mean));
        // adding a constant to every logit leaves the class unchanged
        let shifted: Vec<f64> = mean.iter().map(|v| v + 17.0).collect();
        assert_eq!(p.class, argmax(&qtdog::tensor::softmax(&shifted)));
    }
}

#[test]
fn members_must_agree_on_shapes() {
    let a = random_model(0);
    let b = fixed_logits(&[1.0, 2.0]);
    assert!(predict_eoq(&[&a, &b], &one()).is_err());
    assert!(predict_eoq(&[], &one()).is_err());
}

fn small_train(bits: u32) -> TrainConfig {
    TrainConfig {
        total_steps: 300,
        quantize_at: Some(100),
        validate_every: 50,
        ..TrainConfig::qat(bits, 0)
    }
}

#[test]
fn single_member_ensemble_equals_member() {
    let ds = gen_spurious_blobs(&SpuriousBlobs {
        n_per_domain: 200,
        ..SpuriousBlobs::benchmark(3)
    })
    .unwrap();
    let spec = EnsembleSpec::new(vec![MemberSeeds { split_seed: 4, train_seed: 9 }], small_train(7)).unwrap();
    let r = run_eoq(&ds, "d3", &spec, Execution::Sequential).unwrap();
    assert_eq!(r.members.len(), 1);
    assert_eq!(Some(r.ensemble_target_acc), r.members[0].target_acc);
    assert_eq!(r.ensemble_target_acc, r.mean_member_target_acc);

    let run = trainer::train_leave_one_out(&ds, "d3", 4, &TrainConfig { seed: 9, ..small_train(7) }).unwrap();
    assert_eq!(r.members[0].target_acc, Some(run.best_target_acc().unwrap()));
}

#[test]
fn five_members_size_accounting() {
    let ds = gen_spurious_blobs(&SpuriousBlobs {
        n_per_domain: 200,
        ..SpuriousBlobs::benchmark(4)
    })
    .unwrap();
    let spec = EnsembleSpec::from_base_seed(5, 20, small_train(7)).unwrap();
    let r = run_eoq(&ds, "d3", &spec, Execution::Parallel).unwrap();
    assert_eq!(r.members.len(), 5);
    assert_eq!(r.size.relative_size, 35.0 / 32.0);
    assert!((r.size.relative_size - 1.09375).abs() < 1e-15);
    assert_eq!(r.size.total_bytes, r.members.iter().map(|m| m.bytes).sum::<usize>());
    assert!(!r.degraded);
    let best: Vec<_> = r.members.iter().map(|m| m.best_step.unwrap()).collect();
    assert!(best.iter().all(|s| *s > 100));

    // ensemble accuracy recomputed from the members' checkpoints
    let models: Vec<ModelState> = spec
        .members
        .iter()
        .map(|m| {
            let cfg = TrainConfig { seed: m.train_seed, ..small_train(7) };
            let run = trainer::train_leave_one_out(&ds, "d3", m.split_seed, &cfg).unwrap();
            trainer::select_best(&run).unwrap().model.clone()
        })
        .collect();
    let refs: Vec<&ModelState> = models.iter().collect();
    let t = ds.domain("d3").unwrap();
    assert_eq!(eoq_accuracy(&refs, &t.features, &t.labels).unwrap(), r.ensemble_target_acc);
}

#[test]
fn duplicate_seeds_rejected() {
    let dup_split = vec![
        MemberSeeds { split_seed: 1, train_seed: 2 },
        MemberSeeds { split_seed: 1, train_seed: 3 },
    ];
    assert!(EnsembleSpec::new(dup_split, small_train(4)).is_err());
    let dup_train = vec![
        MemberSeeds { split_seed: 1, train_seed: 2 },
        MemberSeeds { split_seed: 5, train_seed: 2 },
    ];
    assert!(EnsembleSpec::new(dup_train, small_train(4)).is_err());
    assert!(EnsembleSpec::new(vec![], small_train(4)).is_err());
}
