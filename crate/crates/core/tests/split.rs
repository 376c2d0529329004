use splitinfer_core::data::{find_mnist_dir, load_mnist_dir, synth_blobs, xor, Dataset};
use splitinfer_core::network::{argmax, train, Trainer};
use splitinfer_core::splitexec::{
    join_halves, split_backprop_step, split_model, ClientTrainer, DropPolicy, MaskSeeding, ServerTrainer, SplitError,
    SplitPlan,
};
use splitinfer_core::{evaluate, Activation, Architecture, MlpModel, TrainConfig};

fn model() -> MlpModel {
    MlpModel::init(&Architecture::mlp(6, &[10, 8, 5], Activation::Sigmoid, 3), 17).unwrap()
}

#[test]
fn undropped_split_matches_monolithic() {
    let m = model();
    let data = synth_blobs(3, 10, 6, 0.2, 1).unwrap();
    for cut in 1..m.layers().len() {
        let (client, server) = split_model(&m, SplitPlan::plain(cut)).unwrap();
        for i in 0..data.len() {
            let x = data.image(i);
            let sent = client.forward(x).unwrap();
            let split = server.forward(&sent.activations).unwrap();
            let whole = m.predict(x).unwrap();
            for (a, b) in split.iter().zip(&whole) {
                assert!((a - b).abs() < 1e-9, "cut {cut}: {a} vs {b}");
            }
        }
    }
}

fn split_vs_trainer(cut: usize, dropout: Vec<f64>) {
    let data = synth_blobs(3, 20, 6, 0.2, 4).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        batch_size: 12,
        dropout,
        seed: 6,
        ..TrainConfig::default()
    };
    let m = model();
    let mut whole = Trainer::new(m.clone(), cfg.clone()).unwrap();
    let (front, rear) = m.split_at(cut).unwrap();
    let mut client = ClientTrainer::new(front, SplitPlan::plain(cut), cfg.clone()).unwrap();
    let mut server = ServerTrainer::new(rear, cut, cfg).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    for batch in idx.chunks(12) {
        let x = data.images().select_rows(batch);
        let y: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
        let l1 = whole.step(&x, &y).unwrap();
        let l2 = split_backprop_step(&mut client, &mut server, &x, &y).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
    }
    let joined = join_halves(client.front(), server.rear()).unwrap();
    assert_eq!(joined.layers(), whole.model().layers(), "cut {cut}");
}

#[test]
fn split_training_is_bit_exact() {
    split_vs_trainer(1, vec![]);
}

#[test]
fn split_training_is_bit_exact_with_dropout() {
    split_vs_trainer(1, vec![0.2, 0.4, 0.4, 0.4]);
}

#[test]
fn split_training_is_bit_exact_at_deeper_cut() {
    split_vs_trainer(2, vec![0.1, 0.3]);
}

#[test]
fn split_training_learns_xor() {
    let arch = Architecture {
        input_dim: 2,
        layers: vec![(8, Activation::Sigmoid), (2, Activation::Linear)],
    };
    let cfg = TrainConfig {
        learning_rate: 0.05,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let m = MlpModel::init(&arch, 3).unwrap();
    let (front, rear) = m.split_at(1).unwrap();
    let mut client = ClientTrainer::new(front, SplitPlan::plain(1), cfg.clone()).unwrap();
    let mut server = ServerTrainer::new(rear, 1, cfg).unwrap();
    let data = xor();
    for _ in 0..2000 {
        split_backprop_step(&mut client, &mut server, data.images(), data.labels()).unwrap();
    }
    let joined = join_halves(client.front(), server.rear()).unwrap();
    assert_eq!(evaluate(&joined, &data).unwrap(), 1.0);
}

#[test]
fn split_training_with_dropped_activations_still_learns() {
    let data = synth_blobs(4, 50, 8, 0.25, 2).unwrap();
    let m = MlpModel::init(&Architecture::mlp(8, &[40], Activation::Sigmoid, 4), 5).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        batch_size: 20,
        seed: 1,
        ..TrainConfig::default()
    };
    let (front, rear) = m.split_at(1).unwrap();
    let plan = SplitPlan::new(1, DropPolicy::DropActivations { p: 0.05 }, MaskSeeding::PerQueryRandom);
    let mut client = ClientTrainer::new(front, plan, cfg.clone()).unwrap().with_query_seed(77);
    let mut server = ServerTrainer::new(rear, 1, cfg).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    for _ in 0..30 {
        for batch in idx.chunks(20) {
            let x = data.images().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
            split_backprop_step(&mut client, &mut server, &x, &y).unwrap();
        }
    }
    let joined = join_halves(client.front(), server.rear()).unwrap();
    assert!(evaluate(&joined, &data).unwrap() > 0.95);
}

#[test]
fn replayed_reply_is_rejected() {
    let data = synth_blobs(3, 4, 6, 0.2, 4).unwrap();
    let cfg = TrainConfig::default();
    let (front, rear) = model().split_at(1).unwrap();
    let mut client = ClientTrainer::new(front, SplitPlan::drop_activations(1, 0.2), cfg.clone()).unwrap();
    let mut server = ServerTrainer::new(rear, 1, cfg).unwrap();
    let batch = client.forward(data.images()).unwrap();
    let reply = server.step(&batch, data.labels()).unwrap();
    client.apply_gradient(&reply).unwrap();
    assert!(matches!(client.apply_gradient(&reply), Err(SplitError::NoPendingForward)));
    client.forward(data.images()).unwrap();
    assert!(matches!(
        client.apply_gradient(&reply),
        Err(SplitError::StepMismatch { expected: 1, found: 0 })
    ));
}

#[test]
fn dropping_connections_cannot_be_trained() {
    let (front, _) = model().split_at(1).unwrap();
    let plan = SplitPlan::new(1, DropPolicy::DropConnections { p: 0.1 }, MaskSeeding::DataMax);
    assert!(matches!(
        ClientTrainer::new(front, plan, TrainConfig::default()),
        Err(SplitError::Unsupported(_))
    ));
}

/// A sigmoid net trained briefly on MNIST keeps almost every prediction when
/// a handful of first-layer outputs are dropped.
#[test]
fn mnist_predictions_survive_light_dropping() {
    let Some(dir) = find_mnist_dir() else {
        eprintln!("skipping: MNIST not found (set SPLITINFER_DATA_DIR)");
        return;
    };
    let splits = load_mnist_dir(dir).unwrap();
    let arch = Architecture::mlp(784, &[800, 128, 128], Activation::Sigmoid, 10);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 100,
        epochs: 1,
        seed: 1,
        ..TrainConfig::default()
    };
    let model = train(MlpModel::init(&arch, 1).unwrap(), &splits.train, &cfg).unwrap().model;
    let test: Dataset = splits.test.take(2000);
    assert!(evaluate(&model, &test).unwrap() > 0.9);
    let (client, server) = split_model(&model, SplitPlan::drop_activations(1, 0.005)).unwrap();
    let unchanged = (0..test.len())
        .filter(|&i| {
            let x = test.image(i);
            let sent = client.forward(x).unwrap();
            assert_eq!(sent.mask.len(), 4);
            argmax(&server.forward(&sent.activations).unwrap()) == argmax(&model.predict(x).unwrap())
        })
        .count();
    let frac = unchanged as f64 / test.len() as f64;
    assert!(frac >= 0.99, "only {frac} of predictions unchanged");
}
