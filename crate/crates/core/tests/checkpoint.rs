use oshape::checkpoint::Checkpoint;
use oshape::error::Error;
use oshape::trainer::{replay_loss, train_two_phase, TrainConfig};

fn tiny() -> TrainConfig {
    TrainConfig {
        batch_symbols: 128,
        steps_phase1: 15,
        steps_phase2: 15,
        seed: 21,
        ..TrainConfig::default()
    }
}

#[test]
fn save_load_save_is_byte_identical_and_replays() {
    let run = train_two_phase(&tiny()).unwrap();
    let ckpt = Checkpoint::from_run(&run, "test").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());

    let (model, cfg) = loaded.shaping_model().unwrap();
    assert_eq!(cfg, tiny());
    for (a, b) in model.params().zip(run.model.params()) {
        assert_eq!(a.name, b.name);
        let same_bits = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same_bits, "{}", a.name);
    }
    let replay = replay_loss(&model, &cfg).unwrap();
    assert!((replay.total - loaded.replay_total().unwrap()).abs() <= 1e-12);
    assert_eq!(loaded.final_total().unwrap(), run.final_loss.total);
}

#[test]
fn truncated_file_reports_offset() {
    let run = train_two_phase(&TrainConfig {
        steps_phase2: 0,
        ..tiny()
    })
    .unwrap();
    let bytes = Checkpoint::from_run(&run, "t").unwrap().to_bytes();
    for cut in [0, 3, 5, 40, bytes.len() / 3, bytes.len() - 1] {
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(Error::Checkpoint { offset, reason }) => {
                assert!(offset <= cut, "offset {offset} past cut {cut}");
                assert!(!reason.is_empty());
            }
            other => panic!("cut {cut} gave {other:?}"),
        }
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint { .. })));
}
