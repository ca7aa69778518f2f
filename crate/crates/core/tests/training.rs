mod common;

use common::fixture_data;
use mlstm::matcher::{Example, Model, ModelConfig, ModelVariant};
use mlstm::reference::random_instance;
use mlstm::snli::Label;
use mlstm::training::{batch_gradients, evaluate, train, train_step, AdamState, TrainConfig};

#[test]
fn one_step_lowers_the_batch_loss() {
    let data = fixture_data(50);
    let batch: Vec<Example> = data.train[..8].to_vec();
    let config = TrainConfig::default();
    for seed in 0..20 {
        let mut model = Model::new(ModelConfig::new(ModelVariant::Mlstm, 6, 50), seed).unwrap();
        let mut state = AdamState::from_config(&model.store, &config);
        let (before, _) = train_step(&mut model, &mut state, &data.table, &batch, config.lr0, None).unwrap();
        let after = batch_gradients(&model, &data.table, &batch).unwrap().loss_sum / batch.len() as f64;
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn batch_gradient_is_the_sum_of_single_example_gradients() {
    for variant in ModelVariant::ALL {
        let (model, table, a) = random_instance(ModelConfig::new(variant, 4, 3), 1, 4, 3).unwrap();
        let (_, _, b) = random_instance(ModelConfig::new(variant, 4, 3), 2, 4, 3).unwrap();
        let batch = batch_gradients(&model, &table, &[a.clone(), b.clone()]).unwrap();
        let ga = batch_gradients(&model, &table, &[a]).unwrap();
        let gb = batch_gradients(&model, &table, &[b]).unwrap();
        assert!((batch.loss_sum - ga.loss_sum - gb.loss_sum).abs() < 1e-12);
        for ((s, x), y) in batch.grads.iter().flatten().zip(ga.grads.iter().flatten()).zip(gb.grads.iter().flatten()) {
            assert!((s - x - y).abs() < 1e-10, "{variant}");
        }
    }
}

#[test]
fn batch_of_one_matches_per_example_loss() {
    let (model, table, ex) = random_instance(ModelConfig::new(ModelVariant::Mlstm, 5, 4), 9, 4, 3).unwrap();
    let (loss, _, _) = model.loss_and_grads(&table, &ex).unwrap();
    let r = batch_gradients(&model, &table, &[ex]).unwrap();
    assert!((r.loss_sum - loss).abs() < 1e-10);
    assert_eq!(r.count, 1);
}

#[test]
fn training_log_and_best_epoch() {
    let data = fixture_data(50);
    let config = TrainConfig {
        epochs: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut model = Model::new(ModelConfig::new(ModelVariant::Mlstm, 6, 50), 4).unwrap();
    let mut seen = Vec::new();
    let outcome = train(&mut model, &data.table, &data.train, &data.dev, &config, |r| {
        seen.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, outcome.log);
    for (e, r) in outcome.log.iter().enumerate() {
        assert_eq!(r.epoch, e);
        assert_eq!(r.lr, config.lr_at(e));
        assert!(r.dev_acc.is_some());
    }
    let best = outcome.log[outcome.best_epoch].dev_acc.unwrap();
    assert!(outcome.log.iter().all(|r| r.dev_acc.unwrap() <= best));

    let ev = evaluate(&model, &data.table, &data.train).unwrap();
    assert_eq!(ev.confusion.total(), data.train.len() as u64);
    let gold: u64 = Label::ALL
        .iter()
        .map(|&g| Label::ALL.iter().map(|&p| ev.confusion.get(p, g)).sum::<u64>())
        .sum();
    assert_eq!(gold, 64);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = fixture_data(50);
    let mut model = Model::new(ModelConfig::new(ModelVariant::Mlstm, 2, 50), 0).unwrap();
    for config in [
        TrainConfig { decay: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { lr0: -1.0, ..TrainConfig::default() },
        TrainConfig { clip: Some(0.0), ..TrainConfig::default() },
    ] {
        assert!(train(&mut model, &data.table, &data.train, &[], &config, |_| Ok(())).is_err());
    }
    assert!(train(&mut model, &data.table, &[], &[], &TrainConfig::default(), |_| Ok(())).is_err());
}
