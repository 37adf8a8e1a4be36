//! Variant training runs: view count, orthogonality loss on/off, and score aggregation.

use std::fmt::Write as _;

use serde::Serialize;

use crate::audit::{anchor_similarity_stats, SimilarityStats};
use crate::data::RankingRecord;
use crate::decoder::AggregationStrategy;
use crate::error::Result;
use crate::model::{MvpModel, WithStrategy};
use crate::trainer::{evaluate, train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub views: usize,
    pub orthogonal_weight: f64,
    pub ndcg: f64,
    /// Anchor similarity on the test records; absent for single-view models.
    pub anchors: Option<SimilarityStats>,
}

fn run_variant(
    variant: String,
    cfg: &TrainConfig,
    train_set: &[RankingRecord],
    test: &[RankingRecord],
    k: usize,
) -> Result<(AblationRow, MvpModel<f64>)> {
    let out = train(cfg, train_set, &[])?;
    let ndcg = evaluate(&out.model, test, k)?.mean_ndcg;
    let anchors = if cfg.model.views() >= 2 {
        Some(anchor_similarity_stats(&out.model, test)?)
    } else {
        None
    };
    Ok((
        AblationRow {
            variant,
            views: cfg.model.views(),
            orthogonal_weight: cfg.orthogonal_weight,
            ndcg,
            anchors,
        },
        out.model,
    ))
}

/// Trains `base` once per view count and evaluates nDCG@`k` on `test`.
pub fn view_ablation(
    base: &TrainConfig,
    views: &[usize],
    train_set: &[RankingRecord],
    test: &[RankingRecord],
    k: usize,
) -> Result<Vec<AblationRow>> {
    views
        .iter()
        .map(|&m| {
            let mut cfg = *base;
            cfg.model.encoder.views = m;
            run_variant(format!("views={m}"), &cfg, train_set, test, k).map(|(row, _)| row)
        })
        .collect()
}

/// Trains `base` with its orthogonality weight and again with none.
pub fn orthogonal_ablation(
    base: &TrainConfig,
    train_set: &[RankingRecord],
    test: &[RankingRecord],
    k: usize,
) -> Result<Vec<AblationRow>> {
    let without = TrainConfig {
        orthogonal_weight: 0.0,
        ..*base
    };
    Ok(vec![
        run_variant("with-orthogonal".into(), base, train_set, test, k)?.0,
        run_variant("without-orthogonal".into(), &without, train_set, test, k)?.0,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregationRow {
    pub strategy: String,
    pub ndcg: f64,
}

/// nDCG@`k` of one trained model under Mean, Max and every single view.
pub fn aggregation_sweep(model: &MvpModel<f64>, test: &[RankingRecord], k: usize) -> Result<Vec<AggregationRow>> {
    let mut strategies = vec![AggregationStrategy::Mean, AggregationStrategy::Max];
    strategies.extend((1..=model.config().views()).map(AggregationStrategy::SingleView));
    strategies
        .into_iter()
        .map(|strategy| {
            let e = evaluate(&WithStrategy { model, strategy }, test, k)?;
            Ok(AggregationRow {
                strategy: strategy.to_string(),
                ndcg: e.mean_ndcg,
            })
        })
        .collect()
}

pub fn render_ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "#schema variant\tviews\torthogonal_weight\tndcg\tanchor_cos_mean\tanchor_cos_std\tanchor_abs_cos\n",
    );
    for r in rows {
        let (mean, std, abs) = match &r.anchors {
            Some(s) => (
                format!("{:.4}", s.anchors.mean),
                format!("{:.4}", s.anchors.std),
                format!("{:.4}", s.anchors.mean_abs),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.4}\t{mean}\t{std}\t{abs}",
            r.variant, r.views, r.orthogonal_weight, r.ndcg
        );
    }
    out
}

pub fn render_aggregation_tsv(rows: &[AggregationRow]) -> String {
    let mut out = String::from("#schema strategy\tndcg\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:.4}", r.strategy, r.ndcg);
    }
    out
}
