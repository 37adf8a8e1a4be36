//! Bias audits: candidate-order permutations, identifier tokens in the prompt
//! layout, and pairwise similarity of anchors and relevance vectors.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::RankingRecord;
use crate::decoder::{rank, AggregationStrategy};
use crate::encoder::{PromptLayout, TokenId, Vocab, FIRST_CONTENT};
use crate::error::{Error, Result};
use crate::metrics::ndcg_at_k;
use crate::model::{ListScorer, MvpModel};
use crate::numerics::{cosine_similarity, Tensor};
use crate::rng::SplitMix64;

/// Score differences at or below this are ties when comparing rankings.
pub const TIE_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PermutationMode {
    Orig,
    Shuffle,
    Reverse,
}

impl PermutationMode {
    pub const ALL: [PermutationMode; 3] = [Self::Orig, Self::Shuffle, Self::Reverse];

    /// Order in which the candidates are presented; `perm[j]` is the original index at slot `j`.
    pub fn permutation(self, n: usize, seed: u64, record: usize) -> Vec<usize> {
        match self {
            Self::Orig => (0..n).collect(),
            Self::Reverse => (0..n).rev().collect(),
            Self::Shuffle => SplitMix64::derive(seed, record as u64).permutation(n),
        }
    }
}

impl fmt::Display for PermutationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Orig => "orig",
            Self::Shuffle => "shuffle",
            Self::Reverse => "reverse",
        })
    }
}

impl FromStr for PermutationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orig" => Ok(Self::Orig),
            "shuffle" => Ok(Self::Shuffle),
            "reverse" => Ok(Self::Reverse),
            other => Err(Error::Config(format!("unknown permutation mode {other:?}"))),
        }
    }
}

/// Kendall tau between two score vectors over the same items. Pairs whose
/// reference scores differ by at most [`TIE_THRESHOLD`] are skipped; a
/// remaining pair is concordant only if the other vector orders it the same
/// way by more than the threshold.
pub fn tie_aware_tau(reference: &[f64], other: &[f64]) -> f64 {
    let (mut concordant, mut total) = (0i64, 0i64);
    for i in 0..reference.len() {
        for j in i + 1..reference.len() {
            let a = reference[i] - reference[j];
            if a.abs() <= TIE_THRESHOLD {
                continue;
            }
            let b = other[i] - other[j];
            total += 1;
            if b.abs() > TIE_THRESHOLD && a.signum() == b.signum() {
                concordant += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        (2 * concordant - total) as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeReport {
    pub mode: PermutationMode,
    /// Mean nDCG@k, averaged over seeds for shuffles.
    pub mean_ndcg: f64,
    /// Largest per-candidate score change against the original order.
    pub max_score_deviation: f64,
    pub min_tau: f64,
    pub mean_tau: f64,
    /// Reranking trials (records × seeds).
    pub trials: usize,
}

struct Trial {
    deviation: f64,
    tau: f64,
    ndcg: Option<f64>,
}

/// Reranks every record under each presentation order and compares against the original order.
pub fn candidate_permutation_audit(
    scorer: &dyn ListScorer,
    records: &[RankingRecord],
    modes: &[PermutationMode],
    seeds: &[u64],
    k: usize,
) -> Result<Vec<ModeReport>> {
    let baseline: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| scorer.score_list(&r.query, &r.passages()))
        .collect::<Result<_>>()?;
    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mode_seeds: &[u64] = if mode == PermutationMode::Shuffle { seeds } else { &[0] };
        if mode_seeds.is_empty() {
            return Err(Error::Config("shuffle audit needs at least one seed".into()));
        }
        let trials: Vec<Trial> = mode_seeds
            .iter()
            .flat_map(|&seed| (0..records.len()).map(move |i| (seed, i)))
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(seed, i)| -> Result<Trial> {
                let r = &records[i];
                let perm = mode.permutation(r.n(), seed, i);
                let presented: Vec<Vec<TokenId>> = perm.iter().map(|&j| r.candidates[j].tokens.clone()).collect();
                let scores = scorer.score_list(&r.query, &presented)?;
                let mut restored = vec![0.0; r.n()];
                for (slot, &orig) in perm.iter().enumerate() {
                    restored[orig] = scores[slot];
                }
                let base = &baseline[i];
                let deviation = base
                    .iter()
                    .zip(&restored)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                let ranking: Vec<usize> = rank(&scores).into_iter().map(|slot| perm[slot]).collect();
                let ndcg = match ndcg_at_k(&ranking, &r.graded_relevance(), k) {
                    Ok(v) => Some(v),
                    Err(Error::UndefinedMetric(_)) => None,
                    Err(e) => return Err(e),
                };
                Ok(Trial {
                    deviation,
                    tau: tie_aware_tau(base, &restored),
                    ndcg,
                })
            })
            .collect::<Result<_>>()?;
        let ndcgs: Vec<f64> = trials.iter().filter_map(|t| t.ndcg).collect();
        let count = trials.len().max(1) as f64;
        reports.push(ModeReport {
            mode,
            mean_ndcg: if ndcgs.is_empty() {
                0.0
            } else {
                ndcgs.iter().sum::<f64>() / ndcgs.len() as f64
            },
            max_score_deviation: trials.iter().map(|t| t.deviation).fold(0.0, f64::max),
            min_tau: trials.iter().map(|t| t.tau).fold(1.0, f64::min),
            mean_tau: trials.iter().map(|t| t.tau).sum::<f64>() / count,
            trials: trials.len(),
        });
    }
    Ok(reports)
}

/// Rows `mode, corpus, nDCG, delta vs orig, max deviation, min tau`.
pub fn render_permutation_tsv(reports: &[ModeReport], corpus: &str) -> String {
    let orig = reports
        .iter()
        .find(|r| r.mode == PermutationMode::Orig)
        .map(|r| r.mean_ndcg);
    let mut out = String::from("#schema mode\tcorpus\tndcg\tdelta\tmax_score_deviation\tmin_tau\tmean_tau\ttrials\n");
    for r in reports {
        let delta = orig.map(|o| format!("{:+.4}", r.mean_ndcg - o)).unwrap_or_default();
        let _ = writeln!(
            out,
            "{}\t{corpus}\t{:.4}\t{delta}\t{:e}\t{}\t{}\t{}",
            r.mode, r.mean_ndcg, r.max_score_deviation, r.min_tau, r.mean_tau, r.trials
        );
    }
    out
}

/// Scores each candidate by its slot in the presented list; deliberately order-sensitive.
pub struct PositionScorer;

impl ListScorer for PositionScorer {
    fn score_list(&self, _query: &[TokenId], candidates: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        Ok((0..candidates.len()).map(|i| i as f64).collect())
    }
}

/// Anything that lays out the prompt of the `slot`-th candidate of a list.
pub trait PromptBuilder {
    fn build(&self, query: &[TokenId], passage: &[TokenId], slot: usize) -> Result<Vec<TokenId>>;
    fn vocab(&self) -> Vocab;
}

impl PromptBuilder for PromptLayout {
    fn build(&self, query: &[TokenId], passage: &[TokenId], _slot: usize) -> Result<Vec<TokenId>> {
        self.build_prompt(query, passage)
    }

    fn vocab(&self) -> Vocab {
        self.vocab
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentifierReport {
    pub verdict: String,
    pub prompts_checked: usize,
    /// Reserved tokens every prompt carries, in order.
    pub shared_reserved: Vec<TokenId>,
    /// One rendered prompt as evidence.
    pub layout_dump: String,
}

/// Checks that no prompt carries a token distinguishing its candidate's slot.
///
/// Every prompt of one list must hold the same reserved-token sequence, and
/// its content tokens must be exactly the query followed by a prefix of the
/// passage. Anything else is a per-passage identifier and fails the audit.
pub fn identifier_audit(builder: &dyn PromptBuilder, prompts: usize, seed: u64) -> Result<IdentifierReport> {
    let vocab = builder.vocab();
    let mut rng = SplitMix64::new(seed);
    let content = vocab.base_size - FIRST_CONTENT;
    let query: Vec<TokenId> = (0..3).map(|_| FIRST_CONTENT + rng.below(content)).collect();
    let mut shared: Option<Vec<TokenId>> = None;
    let mut dump = String::new();
    for slot in 0..prompts {
        let len = 1 + rng.below(8);
        let passage: Vec<TokenId> = (0..len).map(|_| FIRST_CONTENT + rng.below(content)).collect();
        let prompt = builder.build(&query, &passage, slot)?;
        let reserved: Vec<TokenId> = prompt.iter().copied().filter(|&t| !vocab.is_content(t)).collect();
        let words: Vec<TokenId> = prompt.iter().copied().filter(|&t| vocab.is_content(t)).collect();
        let expected_prefix = [query.as_slice(), passage.as_slice()].concat();
        if words.len() < query.len() || !expected_prefix.starts_with(&words) || words[..query.len()] != query[..] {
            return Err(Error::AuditFailure(format!(
                "prompt {slot} carries content tokens beyond the query and passage: {}",
                vocab.render(&prompt)
            )));
        }
        match &shared {
            None => {
                dump = vocab.render(&prompt);
                shared = Some(reserved);
            }
            Some(s) if *s != reserved => {
                return Err(Error::AuditFailure(format!(
                    "prompt {slot} reserved tokens {} differ from prompt 0 {}",
                    vocab.render(&reserved),
                    vocab.render(s)
                )));
            }
            Some(_) => {}
        }
    }
    Ok(IdentifierReport {
        verdict: "identifier permutation inapplicable".into(),
        prompts_checked: prompts,
        shared_reserved: shared.unwrap_or_default(),
        layout_dump: dump,
    })
}

/// Mean cosine over the unordered row pairs of `vectors`, and mean absolute cosine.
pub fn pairwise_cosines(vectors: &Tensor<f64>) -> Result<(f64, f64)> {
    let m = vectors.rows();
    if m < 2 {
        return Err(Error::Inapplicable(format!("{m} vectors have no pairs")));
    }
    let (mut sum, mut abs, mut count) = (0.0, 0.0, 0usize);
    for a in 0..m {
        for b in a + 1..m {
            let c = cosine_similarity(vectors.row(a), vectors.row(b))?;
            sum += c;
            abs += c.abs();
            count += 1;
        }
    }
    Ok((sum / count as f64, abs / count as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CosineSummary {
    pub mean: f64,
    pub std: f64,
    /// Mean of the per-unit mean absolute cosine.
    pub mean_abs: f64,
    pub units: usize,
}

impl CosineSummary {
    pub fn from_units(units: &[(f64, f64)]) -> Self {
        let n = units.len().max(1) as f64;
        let mean = units.iter().map(|u| u.0).sum::<f64>() / n;
        let var = units.iter().map(|u| (u.0 - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            mean_abs: units.iter().map(|u| u.1).sum::<f64>() / n,
            units: units.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityStats {
    /// One unit per query: its anchors.
    pub anchors: CosineSummary,
    /// One unit per query-passage pair: its view vectors.
    pub relevance: CosineSummary,
}

/// Pairwise cosine statistics of anchors and of relevance vectors over `records`.
pub fn anchor_similarity_stats(model: &MvpModel<f64>, records: &[RankingRecord]) -> Result<SimilarityStats> {
    let m = model.config().views();
    if m < 2 {
        return Err(Error::Inapplicable(format!(
            "similarity between views needs m >= 2, model has {m}"
        )));
    }
    let per_query: Vec<((f64, f64), Vec<(f64, f64)>)> = records
        .par_iter()
        .map(|r| -> Result<_> {
            let out = model.rerank_full(&r.query, &r.passages(), AggregationStrategy::Mean)?;
            let anchors = pairwise_cosines(&out.anchors.anchors)?;
            let rel = (0..out.relevance.n())
                .map(|i| pairwise_cosines(&out.relevance.block(i)))
                .collect::<Result<Vec<_>>>()?;
            Ok((anchors, rel))
        })
        .collect::<Result<_>>()?;
    let anchor_units: Vec<(f64, f64)> = per_query.iter().map(|q| q.0).collect();
    let rel_units: Vec<(f64, f64)> = per_query.iter().flat_map(|q| q.1.iter().copied()).collect();
    Ok(SimilarityStats {
        anchors: CosineSummary::from_units(&anchor_units),
        relevance: CosineSummary::from_units(&rel_units),
    })
}
