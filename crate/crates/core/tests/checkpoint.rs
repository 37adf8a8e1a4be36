use mvp_core::decoder::AggregationStrategy;
use mvp_core::model::{ModelConfig, MvpModel};
use mvp_core::rng::SplitMix64;
use mvp_core::trainer::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC};
use mvp_core::Error;

fn config(views: usize) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.d = 8;
    c.encoder.ff = 16;
    c.encoder.heads = 2;
    c.encoder.layers = 1;
    c.encoder.views = views;
    c.decoder_heads = 2;
    c
}

fn checkpoint(views: usize, seed: u64) -> Checkpoint<f64> {
    let cfg = config(views);
    Checkpoint {
        config: cfg,
        params: cfg.init_params(seed, 0.5).unwrap(),
        step: seed * 3,
        rng_state: seed.wrapping_mul(0x9e37_79b9),
    }
}

#[test]
fn file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mvpc");
    let ck = checkpoint(4, 1);
    save_checkpoint(&path, &ck).unwrap();
    let back: Checkpoint<f64> = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    for (a, b) in back.params.tensors().iter().zip(ck.params.tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn reloaded_model_scores_bitwise_equal() {
    let ck = checkpoint(4, 2);
    let model = MvpModel::new(ck.config, ck.params.clone()).unwrap();
    let reloaded = Checkpoint::<f64>::from_bytes(&ck.to_bytes())
        .unwrap()
        .into_model(None)
        .unwrap();
    let cands = vec![vec![10, 11], vec![20, 21, 22], vec![30]];
    let (a, _) = model.rerank(&[10, 20], &cands, AggregationStrategy::Mean).unwrap();
    let (b, _) = reloaded.rerank(&[10, 20], &cands, AggregationStrategy::Mean).unwrap();
    assert_eq!(
        a.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn truncation_is_an_integrity_error() {
    let bytes = checkpoint(2, 3).to_bytes();
    for cut in [0, 3, 4, 8, 20, bytes.len() / 2, bytes.len() - 1] {
        match Checkpoint::<f64>::from_bytes(&bytes[..cut]) {
            Err(Error::Integrity(_)) | Err(Error::IncompatibleCheckpoint(_)) => {}
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&extra),
        Err(Error::Integrity(_))
    ));
}

#[test]
fn magic_and_version_checked() {
    let mut bytes = checkpoint(2, 3).to_bytes();
    assert_eq!(&bytes[..4], MAGIC);
    bytes[0] = b'X';
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&bytes),
        Err(Error::IncompatibleCheckpoint(_))
    ));
    let mut bytes = checkpoint(2, 3).to_bytes();
    bytes[4] = 9;
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&bytes),
        Err(Error::IncompatibleCheckpoint(_))
    ));
}

#[test]
fn view_count_mismatch_names_tensor() {
    let ck = checkpoint(4, 4);
    let err = ck.into_model(Some(&config(2))).unwrap_err();
    match err {
        Error::Integrity(msg) => assert!(msg.contains("enc.tok_emb"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn random_corruption_is_detected() {
    let bytes = checkpoint(2, 5).to_bytes();
    let mut rng = SplitMix64::new(6);
    for _ in 0..300 {
        let mut b = bytes.clone();
        for _ in 0..1 + rng.below(4) {
            let i = rng.below(b.len());
            b[i] ^= 1 << rng.below(8);
        }
        assert!(Checkpoint::<f64>::from_bytes(&b).is_err());
    }
}
