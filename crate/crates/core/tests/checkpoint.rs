mod common;

use common::{small_config, small_data};
use idnp::trainer::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, training_windows, Trainer};
use idnp::{Error, TrainConfig};

fn trained(epochs: usize) -> (Trainer, idnp::corpus::Dataset) {
    let data = small_data(24, 5);
    let cfg = small_config();
    let users = training_windows(&data, &cfg).unwrap();
    let mut t = Trainer::new(&cfg, &data).unwrap();
    for _ in 0..epochs {
        t.step(&users, &data, 1).unwrap();
    }
    (t, data)
}

#[test]
fn encode_decode_is_lossless() {
    let (t, _) = trained(2);
    let bytes = encode_checkpoint(&t.checkpoint());
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&back), bytes);
    assert_eq!(back.params, t.model.params);
    assert_eq!(back.history, t.history);
    assert_eq!(back.epoch, 2);
    assert_eq!(back.rng.restore(), t.rng);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (straight, data) = trained(4);
    let (half, _) = trained(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.idnp");
    save_checkpoint(&path, &half.checkpoint()).unwrap();
    assert!(!path.with_extension("tmp").exists());

    let mut resumed = Trainer::resume(load_checkpoint(&path).unwrap()).unwrap();
    let users = training_windows(&data, &resumed.model.cfg).unwrap();
    for _ in 0..2 {
        resumed.step(&users, &data, 1).unwrap();
    }
    assert_eq!(resumed.history, straight.history);
    assert_eq!(
        encode_checkpoint(&resumed.checkpoint()),
        encode_checkpoint(&straight.checkpoint())
    );
}

#[test]
fn damaged_files_are_rejected() {
    let (t, _) = trained(1);
    let bytes = encode_checkpoint(&t.checkpoint());
    for cut in [3, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    let last = flipped.len() - 10;
    flipped[last] ^= 0x40;
    assert!(matches!(decode_checkpoint(&flipped), Err(Error::Integrity(_))));
    let mut longer = bytes;
    longer.push(0);
    assert!(matches!(decode_checkpoint(&longer), Err(Error::Integrity(_))));
}

#[test]
fn other_format_versions_are_refused() {
    let (t, _) = trained(1);
    let mut bytes = encode_checkpoint(&t.checkpoint());
    bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(decode_checkpoint(&bytes), Err(Error::Refused(_))));
}

#[test]
fn config_mismatch_names_the_keys() {
    let (t, _) = trained(1);
    let ck = t.checkpoint();
    ck.check_config(&ck.config).unwrap();
    let other = TrainConfig {
        d: 16,
        seed: 9,
        ..ck.config.clone()
    };
    match ck.check_config(&other) {
        Err(Error::Refused(msg)) => {
            assert!(msg.contains("d: 8 -> 16"), "{msg}");
            assert!(msg.contains("seed: 1234 -> 9"), "{msg}");
        }
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn best_weights_follow_validation() {
    let (t, _) = trained(3);
    let (epoch, params) = t.best.clone().unwrap();
    let best = t.history.iter().map(|h| h.val_ndcg).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(t.history[epoch as usize - 1].val_ndcg, best);
    assert_eq!(t.best_model().params, params);
}
