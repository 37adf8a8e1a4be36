//! Deterministic training loop, validation and checkpoints.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::TrainConfig;
pub use optim::{scheduled_lr, Adam, AdamConfig};

use rayon::prelude::*;
use serde::Serialize;

use crate::data::RankingRecord;
use crate::decoder::{rank, AggregationStrategy};
use crate::error::{Error, Result};
use crate::metrics::ndcg_at_k;
use crate::model::{forward, ListScorer, ModelConfig, ModelVars, MvpModel};
use crate::numerics::{Graph, Tensor};
use crate::objectives::{listnet_node, orthogonal_node, reciprocal_targets, LossValue};
use crate::params::ModelParams;
use crate::rng::SplitMix64;

/// Mixed into the seed of the epoch-order stream so it differs from initialization.
const ORDER_STREAM: u64 = 0x006f_7264_6572;

/// Averages over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub rank_loss: f64,
    pub orthogonal_loss: f64,
    /// Mean nDCG at `eval_k` on the validation records, when any were given.
    pub validation_ndcg: Option<f64>,
}

/// Trained model with its history and resumable state.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: MvpModel<f64>,
    pub history: Vec<EpochStats>,
    pub step: u64,
    pub rng_state: u64,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint<f64> {
        Checkpoint {
            config: *self.model.config(),
            params: self.model.params().clone(),
            step: self.step,
            rng_state: self.rng_state,
        }
    }
}

/// Loss of one query and the gradient of its total with respect to every parameter.
pub fn query_gradients(
    params: &ModelParams<f64>,
    config: &ModelConfig,
    query: &[usize],
    candidates: &[Vec<usize>],
    ranks: &[usize],
    temperature: f64,
    orthogonal_weight: f64,
) -> Result<(LossValue<f64>, Vec<Tensor<f64>>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let vars = ModelVars::resolve(&bound, config)?;
    let fwd = forward(&mut g, &vars, config, query, candidates, AggregationStrategy::Mean)?;
    let targets = reciprocal_targets(ranks)?;
    let rank_node = listnet_node(&mut g, fwd.scores, &targets, temperature)?;
    let orth_node = orthogonal_node(&mut g, fwd.decode.anchors)?;
    let loss = LossValue::combine(g.value(rank_node).item(), g.value(orth_node).item(), orthogonal_weight)?;
    let weighted = g.scale(orth_node, orthogonal_weight);
    let total = g.add(rank_node, weighted)?;
    let mut grads = g.backward(total)?;
    Ok((loss, params.collect_grads(&bound, &mut grads)))
}

/// The candidates of `record` seen at one visit: all of them, or `n` drawn without
/// replacement, with ranks renumbered among the drawn ones.
pub fn sample_candidates(record: &RankingRecord, n: usize, rng: &mut SplitMix64) -> (Vec<Vec<usize>>, Vec<usize>) {
    if record.n() <= n {
        return (record.passages(), record.ranks.clone());
    }
    let picked = rng.sample_distinct(record.n(), n);
    let mut by_rank: Vec<usize> = (0..n).collect();
    by_rank.sort_by_key(|&j| record.ranks[picked[j]]);
    let mut ranks = vec![0; n];
    for (pos, &j) in by_rank.iter().enumerate() {
        ranks[j] = pos + 1;
    }
    let passages = picked.iter().map(|&i| record.candidates[i].tokens.clone()).collect();
    (passages, ranks)
}

/// Trains from the seeded initialization of `config.model`.
pub fn train(config: &TrainConfig, train: &[RankingRecord], validation: &[RankingRecord]) -> Result<TrainOutcome> {
    config.validate()?;
    let model = MvpModel::new(config.model, config.model.init_params(config.seed, config.init_std)?)?;
    train_model(config, model, train, validation)
}

/// Trains `model` in place for `config.epochs` epochs.
pub fn train_model(
    config: &TrainConfig,
    mut model: MvpModel<f64>,
    train: &[RankingRecord],
    validation: &[RankingRecord],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let vocab = config.model.encoder.vocab_size;
    for r in train.iter().chain(validation) {
        r.validate(Some(vocab))?;
    }
    let mconf = *model.config();
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut adam = Adam::new(config.optimizer, model.params().tensors().iter().map(Tensor::len));
    let mut order_rng = SplitMix64::new(config.seed ^ ORDER_STREAM);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let order = order_rng.permutation(train.len());
        let (mut rank_sum, mut orth_sum) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let params = model.params();
            let results: Vec<Result<(LossValue<f64>, Vec<Tensor<f64>>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let record = &train[idx];
                    let mut rng = SplitMix64::derive(config.seed, (epoch * train.len() + idx) as u64);
                    let (passages, ranks) = sample_candidates(record, config.n_per_record, &mut rng);
                    query_gradients(
                        params,
                        &mconf,
                        &record.query,
                        &passages,
                        &ranks,
                        config.temperature,
                        config.orthogonal_weight,
                    )
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut acc: Vec<Tensor<f64>> = params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect();
            let (mut batch_rank, mut batch_orth) = (0.0, 0.0);
            for res in results {
                let (loss, grads) = res.map_err(|e| match e {
                    Error::Divergence { component, .. } => Error::Divergence { step, component },
                    other => other,
                })?;
                batch_rank += loss.rank_loss * scale;
                batch_orth += loss.orthogonal_loss * scale;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y * scale;
                    }
                }
            }
            if acc.iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    component: "gradient".into(),
                });
            }
            let lr = scheduled_lr(config.optimizer.lr, step, total_steps, config.warmup_ratio);
            adam.step(model.params_mut().tensors_mut(), &acc, lr);
            rank_sum += batch_rank;
            orth_sum += batch_orth;
            step += 1;
        }
        let validation_ndcg = if validation.is_empty() {
            None
        } else {
            Some(evaluate(&model, validation, config.eval_k)?.mean_ndcg)
        };
        history.push(EpochStats {
            epoch,
            steps: steps_per_epoch,
            rank_loss: rank_sum / steps_per_epoch as f64,
            orthogonal_loss: orth_sum / steps_per_epoch as f64,
            validation_ndcg,
        });
    }
    Ok(TrainOutcome {
        model,
        history,
        step: step as u64,
        rng_state: order_rng.state(),
    })
}

/// Mean nDCG over the records where it is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub mean_ndcg: f64,
    pub evaluated: usize,
    /// Records skipped because every relevance was zero.
    pub skipped: usize,
}

/// Ranks every record with `scorer` and averages nDCG@`k` against its graded relevance.
pub fn evaluate(scorer: &dyn ListScorer, records: &[RankingRecord], k: usize) -> Result<Evaluation> {
    let per_record: Vec<Option<f64>> = records
        .par_iter()
        .map(|r| -> Result<Option<f64>> {
            let scores = scorer.score_list(&r.query, &r.passages())?;
            match ndcg_at_k(&rank(&scores), &r.graded_relevance(), k) {
                Ok(v) => Ok(Some(v)),
                Err(Error::UndefinedMetric(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = per_record.iter().flatten().copied().collect();
    let skipped = per_record.len() - values.len();
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} records with undefined nDCG@{k}");
    }
    let mean_ndcg = if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    Ok(Evaluation {
        mean_ndcg,
        evaluated: values.len(),
        skipped,
    })
}
