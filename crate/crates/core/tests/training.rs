use lognet::checkpoint::Checkpoint;
use lognet::config::{ModelConfig, TrainConfig};
use lognet::data::{self, DataConfig, Family, Split};
use lognet::model::LogNet;
use lognet::train::{self, read_metrics_csv, write_metrics_csv, Trainer};
use lognet::Error;

fn split(samples: &[data::Sample]) -> train::Split {
    train::Split {
        inputs: data::encode(samples, &data::vocabulary(), &data::answer_space()).unwrap(),
        types: samples.iter().map(|s| s.family.name().to_string()).collect(),
    }
}

fn desk() -> ModelConfig {
    ModelConfig::desk(data::vocabulary().len(), data::answer_space().len())
}

fn small_data(train: usize, val: usize) -> (train::Split, train::Split) {
    let cfg = DataConfig { train, val, test: 0, ..DataConfig::default() };
    (
        split(&data::generate_split(&cfg, Split::Train).unwrap()),
        split(&data::generate_split(&cfg, Split::Val).unwrap()),
    )
}

#[test]
fn initial_loss_is_near_uniform() {
    let (tr, _) = small_data(64, 0);
    let net = LogNet::new(desk(), 0).unwrap();
    let batch: Vec<_> = tr.inputs.iter().collect();
    let loss = net.batch_loss(&batch).unwrap();
    let uniform = (data::answer_space().len() as f64).ln();
    assert!((loss - uniform).abs() < 0.3, "loss {loss} vs ln|A| {uniform}");
}

#[test]
fn untrained_model_is_near_chance_per_type() {
    let (_, va) = small_data(2, 500);
    let net = LogNet::new(desk(), 4).unwrap();
    let report = train::evaluate(&net, &va.inputs, &va.types).unwrap();
    for f in Family::ALL {
        let chance = 1.0 / f.answers().len() as f64;
        let acc = report.per_type[f.name()].accuracy();
        // a constant guess inside the family's answer set scores about `chance`
        assert!(acc <= chance + 0.12, "{}: {acc} vs chance {chance}", f.name());
    }
    let again = train::evaluate(&net, &va.inputs, &va.types).unwrap();
    assert_eq!(report, again);
}

#[test]
fn twenty_samples_are_memorized() {
    let (tr, _) = small_data(20, 0);
    let tc = TrainConfig { batch_size: 20, ..TrainConfig::desk() };
    let mut trainer = Trainer::new(LogNet::new(desk(), 1).unwrap(), tc).unwrap();
    let mut reached = None;
    while trainer.state.step < 200 {
        let s = trainer.run_epoch(&tr, Some(&tr), &mut |_, _| {}).unwrap();
        if s.val_accuracy == Some(1.0) {
            reached = Some(trainer.state.step);
            break;
        }
    }
    assert!(reached.is_some(), "best {:?}", trainer.state.best_val);
}

#[test]
fn metrics_and_best_checkpoint() {
    let (tr, va) = small_data(64, 32);
    let mut trainer = Trainer::new(LogNet::new(desk(), 2).unwrap(), TrainConfig::desk()).unwrap();
    let mut steps = Vec::new();
    for _ in 0..2 {
        trainer.run_epoch(&tr, Some(&va), &mut |s, _| steps.push(s)).unwrap();
    }
    assert_eq!(steps, (1..=4).collect::<Vec<u64>>());
    let m = &trainer.state.metrics;
    assert!(m.iter().any(|r| r.epoch == 2 && r.split == "val" && r.qtype == "all"));
    assert!(m.iter().filter(|r| r.split == "train").all(|r| r.qtype == "all" || r.loss.is_none()));

    let dir = tempfile::tempdir().unwrap();
    write_metrics_csv(&dir.path().join("m.csv"), m).unwrap();
    assert_eq!(&read_metrics_csv(&dir.path().join("m.csv")).unwrap(), m);

    let best = trainer.best_model();
    let best_acc = train::evaluate(&best, &va.inputs, &va.types).unwrap().accuracy();
    assert_eq!(Some(best_acc), trainer.state.best_val);

    // resuming restores optimizer and history, and continues the step count
    let (vocab, answers) = (data::vocabulary(), data::answer_space());
    let path = dir.path().join("last.logk");
    Checkpoint::from_trainer(&trainer, &vocab, &answers).save(&path).unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap().trainer().unwrap();
    assert_eq!(resumed.state, trainer.state);
    let a = trainer.run_epoch(&tr, Some(&va), &mut |_, _| {}).unwrap();
    let b = resumed.run_epoch(&tr, Some(&va), &mut |_, _| {}).unwrap();
    assert_eq!(a, b);
    assert_eq!(resumed.state.epoch, 3);
}

#[test]
fn nan_parameters_abort_with_diagnostics() {
    let (tr, _) = small_data(8, 0);
    let mut net = LogNet::new(desk(), 0).unwrap();
    let id = net.store.ids().find(|&id| net.store.name(id).contains("w_delta")).unwrap();
    net.store.get_mut(id).data_mut()[0] = f64::NAN;
    let mut trainer = Trainer::new(net, TrainConfig::desk()).unwrap();
    let batch: Vec<_> = tr.inputs.iter().collect();
    match trainer.step(&batch, 7) {
        Err(Error::Diverged(msg)) => {
            assert!(msg.contains("batch 7"), "{msg}");
            assert!(msg.contains("largest parameter norms"), "{msg}");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}
