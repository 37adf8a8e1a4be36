//! Reranking-pipeline cost accounting: sliding-window and tournament baselines
//! driven by any [`ListScorer`], against the single-pass reranker.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::decoder::rank;
use crate::encoder::TokenId;
use crate::error::{Error, Result};
use crate::model::ListScorer;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    pub window: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { window: 20, stride: 10 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::Parameter(format!(
                "stride {} must lie in 1..={}",
                self.stride, self.window
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TournamentConfig {
    /// Passages per prompt.
    pub group: usize,
    /// Passages promoted from each prompt.
    pub promote: usize,
}

impl Default for TournamentConfig {
    fn default() -> Self {
        Self { group: 5, promote: 2 }
    }
}

impl TournamentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.promote == 0 || self.promote >= self.group {
            return Err(Error::Parameter(format!(
                "promote {} must lie in 1..{}",
                self.promote, self.group
            )));
        }
        Ok(())
    }
}

/// Work one query costs a pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PipelineCost {
    pub prompt_count: u64,
    pub decode_steps: u64,
    pub passages_encoded: u64,
    pub modeled_flops: Option<f64>,
}

impl PipelineCost {
    pub fn with_flops(mut self, model: &FlopModel) -> Self {
        self.modeled_flops = Some(model.flops(&self));
        self
    }
}

/// Closed-form transformer cost per query, in multiply-add FLOPs (2 per MAC):
///
/// * encoder, per passage of `seq_len` tokens:
///   `layers · (seq_len · (8·d² + 4·d·ff) + 4·seq_len²·d)`
/// * decoder, per decode step: `decoder_layers · (8·d² + 4·d·ff)`
///
/// `modeled_flops = passages_encoded · encoder + decode_steps · decoder`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopModel {
    pub seq_len: usize,
    pub d: usize,
    pub ff: usize,
    pub layers: usize,
    pub decoder_layers: usize,
}

impl Default for FlopModel {
    fn default() -> Self {
        Self {
            seq_len: 64,
            d: 32,
            ff: 128,
            layers: 2,
            decoder_layers: 1,
        }
    }
}

impl FlopModel {
    pub fn encoder_cost(&self) -> f64 {
        let (l, d, ff) = (self.seq_len as f64, self.d as f64, self.ff as f64);
        self.layers as f64 * (l * (8.0 * d * d + 4.0 * d * ff) + 4.0 * l * l * d)
    }

    pub fn decoder_cost(&self) -> f64 {
        let (d, ff) = (self.d as f64, self.ff as f64);
        self.decoder_layers as f64 * (8.0 * d * d + 4.0 * d * ff)
    }

    pub fn flops(&self, cost: &PipelineCost) -> f64 {
        cost.passages_encoded as f64 * self.encoder_cost() + cost.decode_steps as f64 * self.decoder_cost()
    }

    pub const FORMULA: &'static str = "modeled_flops = passages_encoded * layers * (L * (8 d^2 + 4 d ff) + 4 L^2 d) + decode_steps * decoder_layers * (8 d^2 + 4 d ff)";
}

/// Orders `items` (candidate indices) by the scorer, best first, ties by position.
fn reorder(
    scorer: &dyn ListScorer,
    query: &[TokenId],
    candidates: &[Vec<TokenId>],
    items: &[usize],
) -> Result<Vec<usize>> {
    let window: Vec<Vec<TokenId>> = items.iter().map(|&i| candidates[i].clone()).collect();
    let scores = scorer.score_list(query, &window)?;
    if scores.len() != items.len() {
        return Err(Error::Dimension(format!(
            "scorer returned {} scores for {} candidates",
            scores.len(),
            items.len()
        )));
    }
    Ok(rank(&scores).into_iter().map(|j| items[j]).collect())
}

/// Number of back-to-front passes needed to settle the first `top_k` positions.
fn pass_count(cfg: &WindowConfig, n: usize, top_k: usize) -> usize {
    let carry = cfg.window - cfg.stride;
    if n <= cfg.window || carry == 0 {
        1
    } else {
        top_k.clamp(1, n).div_ceil(carry)
    }
}

/// `(start, end)` of every window of one back-to-front pass over `offset..n`.
pub fn pass_windows(cfg: &WindowConfig, offset: usize, n: usize) -> Vec<(usize, usize)> {
    let len = n.saturating_sub(offset);
    if len == 0 {
        return Vec::new();
    }
    if len <= cfg.window {
        return vec![(offset, n)];
    }
    let mut out = Vec::new();
    let mut end = n;
    loop {
        let start = end.saturating_sub(cfg.window).max(offset);
        let end_clamped = (start + cfg.window).min(n);
        out.push((start, end_clamped));
        if start == offset {
            break;
        }
        end -= cfg.stride;
    }
    out
}

/// Back-to-front sliding-window reranking of `candidates` in input order.
///
/// One pass settles the first `window − stride` positions, so enough passes run
/// to settle `top_k`; pass `p` covers positions `(p − 1)(window − stride)..n`.
/// A window wider than the list shrinks to the list. Every window is one prompt
/// and costs one decode step per passage in it, times `multiplier`.
pub fn sliding_window_rerank(
    scorer: &dyn ListScorer,
    query: &[TokenId],
    candidates: &[Vec<TokenId>],
    cfg: WindowConfig,
    top_k: usize,
    multiplier: u64,
) -> Result<(Vec<usize>, PipelineCost)> {
    cfg.validate()?;
    let n = candidates.len();
    if n == 0 {
        return Err(Error::EmptyCandidates);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut cost = PipelineCost {
        prompt_count: 0,
        decode_steps: 0,
        passages_encoded: 0,
        modeled_flops: None,
    };
    let carry = cfg.window - cfg.stride;
    for pass in 0..pass_count(&cfg, n, top_k) {
        for (start, end) in pass_windows(&cfg, pass * carry, n) {
            let ranked = reorder(scorer, query, candidates, &order[start..end])?;
            order[start..end].copy_from_slice(&ranked);
            let len = (end - start) as u64;
            cost.prompt_count += 1;
            cost.decode_steps += len * multiplier;
            cost.passages_encoded += len;
        }
    }
    Ok((order, cost))
}

/// Tournament selection of the best `top_k` candidates.
///
/// Each round splits the field into consecutive groups; a group larger than
/// `promote` is one prompt and forwards its best `promote`, a smaller group
/// passes through. Once the field fits one group, a last prompt names the
/// winner. The winner is removed and the tournament replayed for the next
/// place; a prompt whose exact member set was already judged is reused, so
/// only groups along the previous winner's path cost new prompts. Every prompt
/// costs `group × multiplier` decode steps. The ranking lists the `top_k`
/// winners in order followed by the remaining candidates in input order.
pub fn tournament_rerank(
    scorer: &dyn ListScorer,
    query: &[TokenId],
    candidates: &[Vec<TokenId>],
    cfg: TournamentConfig,
    top_k: usize,
    multiplier: u64,
) -> Result<(Vec<usize>, PipelineCost)> {
    cfg.validate()?;
    let n = candidates.len();
    if n == 0 {
        return Err(Error::EmptyCandidates);
    }
    let mut cache: HashMap<Vec<usize>, Vec<usize>> = HashMap::new();
    let mut cost = PipelineCost {
        prompt_count: 0,
        decode_steps: 0,
        passages_encoded: 0,
        modeled_flops: None,
    };
    let mut judge = |members: &[usize]| -> Result<Vec<usize>> {
        let mut key = members.to_vec();
        key.sort_unstable();
        if let Some(hit) = cache.get(&key) {
            return Ok(hit.clone());
        }
        let ranked = reorder(scorer, query, candidates, members)?;
        cost.prompt_count += 1;
        cost.decode_steps += cfg.group as u64 * multiplier;
        cost.passages_encoded += members.len() as u64;
        cache.insert(key, ranked.clone());
        Ok(ranked)
    };

    let mut remaining: Vec<usize> = (0..n).collect();
    let mut winners = Vec::new();
    while winners.len() < top_k.min(n) {
        let mut field = remaining.clone();
        while field.len() > cfg.group {
            let mut next = Vec::new();
            for block in field.chunks(cfg.group) {
                if block.len() <= cfg.promote {
                    next.extend_from_slice(block);
                } else {
                    next.extend_from_slice(&judge(block)?[..cfg.promote]);
                }
            }
            field = next;
        }
        let winner = if field.len() == 1 { field[0] } else { judge(&field)?[0] };
        winners.push(winner);
        remaining.retain(|&i| i != winner);
    }
    winners.extend(remaining);
    Ok((winners, cost))
}

/// One encoder pass per candidate and a single decoding step.
pub fn single_pass_cost(n: usize) -> Result<PipelineCost> {
    if n == 0 {
        return Err(Error::EmptyCandidates);
    }
    Ok(PipelineCost {
        prompt_count: n as u64,
        decode_steps: 1,
        passages_encoded: n as u64,
        modeled_flops: None,
    })
}

/// Strategies compared by [`cost_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostConfig {
    pub window: WindowConfig,
    pub tournament: TournamentConfig,
    pub top_k: usize,
    pub multiplier: u64,
    pub flops: FlopModel,
    pub seed: u64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            tournament: TournamentConfig::default(),
            top_k: 10,
            multiplier: 1,
            flops: FlopModel::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub strategy: String,
    pub n: usize,
    #[serde(flatten)]
    pub cost: PipelineCost,
    /// decode_steps relative to the single-pass pipeline at the same n.
    pub decode_ratio: f64,
}

/// Scores a candidate by a fixed seeded value keyed on its first token.
struct KeyedScorer {
    seed: u64,
}

impl ListScorer for KeyedScorer {
    fn score_list(&self, _query: &[TokenId], candidates: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        Ok(candidates
            .iter()
            .map(|c| SplitMix64::derive(self.seed, c[0] as u64).next_f64())
            .collect())
    }
}

/// Cost of every strategy at every list size. Baselines are driven by a seeded
/// stand-in scorer; their counts do not depend on model quality.
pub fn cost_report(grid: &[usize], cfg: &CostConfig) -> Result<Vec<CostRow>> {
    use rayon::prelude::*;

    cfg.window.validate()?;
    cfg.tournament.validate()?;
    let scorer = KeyedScorer { seed: cfg.seed };
    let per_n: Vec<Vec<CostRow>> = grid
        .par_iter()
        .map(|&n| -> Result<Vec<CostRow>> {
            let candidates: Vec<Vec<TokenId>> = (0..n).map(|i| vec![i]).collect();
            let single = single_pass_cost(n)?.with_flops(&cfg.flops);
            let (_, sliding) = sliding_window_rerank(&scorer, &[], &candidates, cfg.window, cfg.top_k, cfg.multiplier)?;
            let (_, tournament) =
                tournament_rerank(&scorer, &[], &candidates, cfg.tournament, cfg.top_k, cfg.multiplier)?;
            let row = |strategy: String, cost: PipelineCost| CostRow {
                strategy,
                n,
                cost: cost.with_flops(&cfg.flops),
                decode_ratio: cost.decode_steps as f64 / single.decode_steps as f64,
            };
            Ok(vec![
                row(
                    format!("sliding-window(w={},s={})", cfg.window.window, cfg.window.stride),
                    sliding,
                ),
                row(
                    format!("tournament(m={},r={})", cfg.tournament.group, cfg.tournament.promote),
                    tournament,
                ),
                row("single-pass".into(), single),
            ])
        })
        .collect::<Result<_>>()?;
    Ok(per_n.into_iter().flatten().collect())
}

pub const COST_SCHEMA: &str =
    "#schema strategy\tn\tprompt_count\tdecode_steps\tpassages_encoded\tmodeled_flops\tdecode_ratio";

/// Tab-separated report with the FLOP formula and a `#schema` line up front.
pub fn render_cost_tsv(rows: &[CostRow]) -> String {
    let mut out = format!("# {}\n{COST_SCHEMA}\n", FlopModel::FORMULA);
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.strategy,
            r.n,
            r.cost.prompt_count,
            r.cost.decode_steps,
            r.cost.passages_encoded,
            r.cost.modeled_flops.map(|f| format!("{f:.0}")).unwrap_or_default(),
            r.decode_ratio
        );
    }
    out
}
