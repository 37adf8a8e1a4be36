use mvp_core::data::{generate_corpus, CorpusSpec, RankingRecord};
use mvp_core::encoder::TokenId;
use mvp_core::metrics::ndcg_at_k;
use mvp_core::model::{ListScorer, ModelConfig, MvpModel};
use mvp_core::rng::SplitMix64;
use mvp_core::trainer::*;
use mvp_core::{Error, Result};

fn tiny_model() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.d = 8;
    c.encoder.ff = 16;
    c.encoder.heads = 2;
    c.encoder.layers = 1;
    c.encoder.views = 2;
    c.encoder.max_len = 24;
    c.decoder_heads = 2;
    c
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: tiny_model(),
        epochs: 1,
        batch_size: 4,
        n_per_record: 8,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn corpus(records: usize, seed: u64) -> Vec<RankingRecord> {
    generate_corpus(&CorpusSpec {
        records,
        seed,
        ..CorpusSpec::default()
    })
    .unwrap()
}

fn batch_loss(model: &MvpModel<f64>, cfg: &TrainConfig, records: &[RankingRecord]) -> f64 {
    records
        .iter()
        .map(|r| {
            let (loss, _) = query_gradients(
                model.params(),
                model.config(),
                &r.query,
                &r.passages(),
                &r.ranks,
                cfg.temperature,
                cfg.orthogonal_weight,
            )
            .unwrap();
            loss.total
        })
        .sum::<f64>()
        / records.len() as f64
}

/// Scores each candidate by its planted relevance.
struct Oracle(CorpusSpec);

impl ListScorer for Oracle {
    fn score_list(&self, query: &[TokenId], candidates: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|c| self.0.relevance(query, c) as f64).collect())
    }
}

#[test]
fn defaults_follow_reference_settings() {
    let c = TrainConfig::default();
    assert_eq!(c.temperature, 0.8);
    assert_eq!(c.model.views(), 4);
    assert_eq!(c.n_per_record, 5);
    assert_eq!(c.orthogonal_weight, 1.0);
    assert_eq!(
        (c.optimizer.beta1, c.optimizer.beta2, c.optimizer.eps),
        (0.9, 0.999, 1e-8)
    );
    assert_eq!(c.warmup_ratio, 0.05);
}

#[test]
fn config_text_round_trip_and_unknown_keys() {
    let mut cfg = tiny_config();
    cfg.optimizer.lr = 3e-4;
    cfg.orthogonal_weight = 0.0;
    assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert!(matches!(
        TrainConfig::parse("epochs=2\nlearning_rate=1\n"),
        Err(Error::Config(_))
    ));
    assert!(TrainConfig::parse("temperature=0\n").is_err());
    assert!(TrainConfig::parse("d=30\nheads=4\n").is_err());
    assert!(matches!(
        TrainConfig::parse("epochs\n"),
        Err(Error::Parse { line: 1, .. })
    ));
}

#[test]
fn zero_epochs_keeps_initialization() {
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_config()
    };
    let out = train(&cfg, &corpus(8, 1), &[]).unwrap();
    let init = cfg.model.init_params::<f64>(cfg.seed, cfg.init_std).unwrap();
    assert_eq!(out.model.params(), &init);
    assert!(out.history.is_empty());
}

#[test]
fn one_step_lowers_batch_loss() {
    let records = corpus(6, 2);
    let cfg = TrainConfig {
        batch_size: records.len(),
        ..tiny_config()
    };
    let init = MvpModel::new(cfg.model, cfg.model.init_params(cfg.seed, cfg.init_std).unwrap()).unwrap();
    let before = batch_loss(&init, &cfg, &records);
    let out = train(&cfg, &records, &[]).unwrap();
    assert_eq!(out.step, 1);
    let after = batch_loss(&out.model, &cfg, &records);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn training_is_deterministic() {
    let records = corpus(24, 3);
    let cfg = TrainConfig {
        epochs: 2,
        ..tiny_config()
    };
    let a = train(&cfg, &records[..16], &records[16..]).unwrap();
    let b = train(&cfg, &records[..16], &records[16..]).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.rng_state, b.rng_state);
    assert_eq!(a.history.len(), 2);
    assert!(a.history.iter().all(|h| h.validation_ndcg.is_some()));
}

#[test]
fn first_step_moves_every_view_token() {
    let records = corpus(4, 4);
    let cfg = TrainConfig {
        batch_size: 4,
        ..tiny_config()
    };
    let out = train(&cfg, &records, &[]).unwrap();
    let init = cfg.model.init_params::<f64>(cfg.seed, cfg.init_std).unwrap();
    let vocab = cfg.model.encoder.vocab();
    let before = init.get("enc.tok_emb").unwrap();
    let after = out.model.params().get("enc.tok_emb").unwrap();
    let changed = (0..cfg.model.views())
        .filter(|&k| before.row(vocab.view_token(k)) != after.row(vocab.view_token(k)))
        .count();
    assert!(changed >= 2, "{changed} view rows changed");
}

#[test]
fn candidates_are_subsampled_with_renumbered_ranks() {
    let record = &corpus(1, 9)[0];
    let mut rng = SplitMix64::new(1);
    let (passages, ranks) = sample_candidates(record, 3, &mut rng);
    assert_eq!(passages.len(), 3);
    let mut sorted = ranks.clone();
    sorted.sort();
    assert_eq!(sorted, vec![1, 2, 3]);
    let original: Vec<usize> = passages
        .iter()
        .map(|p| record.candidates.iter().position(|c| &c.tokens == p).unwrap())
        .map(|i| record.ranks[i])
        .collect();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(original[i] < original[j], ranks[i] < ranks[j]);
        }
    }
    let (all, all_ranks) = sample_candidates(record, 50, &mut rng);
    assert_eq!(all, record.passages());
    assert_eq!(all_ranks, record.ranks);
}

#[test]
fn empty_training_set_rejected() {
    assert!(matches!(train(&tiny_config(), &[], &[]), Err(Error::Config(_))));
}

#[test]
fn oracle_scorer_scores_perfectly() {
    let spec = CorpusSpec {
        records: 50,
        ..CorpusSpec::default()
    };
    let records = generate_corpus(&spec).unwrap();
    let e = evaluate(&Oracle(spec), &records, 8).unwrap();
    assert_eq!(e.mean_ndcg, 1.0);
    assert_eq!(e.evaluated + e.skipped, 50);
}

#[test]
fn random_model_is_near_permutation_baseline() {
    let records = corpus(200, 11);
    let mut rng = SplitMix64::new(12);
    let (mut total, mut count) = (0.0, 0usize);
    for t in 0..100_000 {
        let r = &records[t % records.len()];
        if let Ok(v) = ndcg_at_k(&rng.permutation(r.n()), &r.graded_relevance(), 8) {
            total += v;
            count += 1;
        }
    }
    let baseline = total / count as f64;
    let model = MvpModel::<f64>::init(ModelConfig::default(), 3).unwrap();
    let e = evaluate(&model, &records, 8).unwrap();
    assert!(
        (e.mean_ndcg - baseline).abs() < 0.05,
        "model {} vs baseline {baseline}",
        e.mean_ndcg
    );
    assert!(baseline < 0.75);
}
