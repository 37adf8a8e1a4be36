//! The full reranker: encoder, decoder and the single-pass scoring path.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::decoder::{
    decode_anchor_set, decode_anchors, rank, score, score_nodes, stack_view, stack_view_nodes, AggregationStrategy,
    AnchorSet, DecodeOutput, DecoderConfig, DecoderVars, ScoreVector,
};
use crate::encoder::{
    encode_candidates, encode_views, EncoderConfig, EncoderVars, RelevanceMatrix, TokenId, ViewTokenMode,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};
use crate::params::{BoundParams, ModelParams};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// Standard deviation of the normal parameter initialization.
pub const INIT_STD: f64 = 0.02;

/// Architecture of the reranker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub max_candidates: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder_layers: 1,
            decoder_heads: 4,
            max_candidates: 1000,
        }
    }
}

impl ModelConfig {
    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            d: self.encoder.d,
            layers: self.decoder_layers,
            heads: self.decoder_heads,
            ff: self.encoder.ff,
        }
    }

    pub fn views(&self) -> usize {
        self.encoder.views
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder().validate()?;
        if self.max_candidates == 0 {
            return Err(Error::Config("max_candidates must be positive".into()));
        }
        Ok(())
    }

    /// Keys understood by [`ModelConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "d",
        "encoder_layers",
        "heads",
        "max_len",
        "views",
        "vocab_size",
        "ff",
        "view_token_mode",
        "decoder_layers",
        "decoder_heads",
        "max_candidates",
    ];

    /// Applies one `key=value` setting; returns `Ok(false)` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {value:?}")))
        };
        match key {
            "d" => self.encoder.d = num()?,
            "encoder_layers" => self.encoder.layers = num()?,
            "heads" => self.encoder.heads = num()?,
            "max_len" => self.encoder.max_len = num()?,
            "views" => self.encoder.views = num()?,
            "vocab_size" => self.encoder.vocab_size = num()?,
            "ff" => self.encoder.ff = num()?,
            "view_token_mode" => self.encoder.mode = value.parse()?,
            "decoder_layers" => self.decoder_layers = num()?,
            "decoder_heads" => self.decoder_heads = num()?,
            "max_candidates" => self.max_candidates = num()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let e = &self.encoder;
        BTreeMap::from([
            ("d", e.d.to_string()),
            ("encoder_layers", e.layers.to_string()),
            ("heads", e.heads.to_string()),
            ("max_len", e.max_len.to_string()),
            ("views", e.views.to_string()),
            ("vocab_size", e.vocab_size.to_string()),
            ("ff", e.ff.to_string()),
            ("view_token_mode", e.mode.as_str().to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("decoder_heads", self.decoder_heads.to_string()),
            ("max_candidates", self.max_candidates.to_string()),
        ])
    }

    /// Fresh parameters: normal(0, `std`) weights and embeddings, unit gains.
    pub fn init_params<T: Scalar>(&self, seed: u64, std: f64) -> Result<ModelParams<T>> {
        self.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut params = ModelParams::new();
        self.encoder.init_params(&mut params, &mut rng, std);
        self.decoder().init_params(&mut params, &mut rng, std);
        Ok(params)
    }

    /// Checks that `params` has exactly the tensors and shapes this config implies.
    pub fn check_params<T: Scalar>(&self, params: &ModelParams<T>) -> Result<()> {
        let expected: ModelParams<T> = self.init_params(0, 0.0)?;
        for (name, t) in expected.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Integrity(format!("tensor {name} missing")))?;
            if got.shape() != t.shape() {
                return Err(Error::Integrity(format!(
                    "tensor {name} has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = params.names().iter().find(|n| expected.get(n).is_none()) {
            return Err(Error::Integrity(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

/// Tape nodes of one query's forward pass.
pub struct Forward {
    /// `[m × d]` view block per candidate.
    pub blocks: Vec<Var>,
    /// `E_k` per view.
    pub views: Vec<Var>,
    pub decode: DecodeOutput,
    /// `[n × 1]` scores.
    pub scores: Var,
}

/// Parameters resolved on a tape.
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
}

impl ModelVars {
    pub fn resolve(bound: &BoundParams, config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            encoder: EncoderVars::resolve(bound, &config.encoder)?,
            decoder: DecoderVars::resolve(bound, &config.decoder())?,
        })
    }
}

/// Full differentiable forward pass for one query and its candidates.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    query: &[TokenId],
    candidates: &[Vec<TokenId>],
    strategy: AggregationStrategy,
) -> Result<Forward> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let layout = config.encoder.layout();
    let blocks = candidates
        .iter()
        .enumerate()
        .map(|(index, passage)| {
            layout
                .build_prompt(query, passage)
                .and_then(|prompt| encode_views(g, &vars.encoder, &config.encoder, &prompt))
                .map_err(|e| Error::Passage {
                    index,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let views = (0..config.views())
        .map(|k| stack_view_nodes(g, &blocks, k))
        .collect::<Result<Vec<_>>>()?;
    let decode = decode_anchors(g, &vars.decoder, &config.decoder(), &views)?;
    let scores = score_nodes(g, decode.anchors, &views, strategy)?;
    Ok(Forward {
        blocks,
        views,
        decode,
        scores,
    })
}

/// Reranker with its parameters and a decode-step counter.
#[derive(Debug)]
pub struct MvpModel<T> {
    config: ModelConfig,
    params: ModelParams<T>,
    decode_steps: AtomicU64,
}

impl<T: Scalar> Clone for MvpModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            params: self.params.clone(),
            decode_steps: AtomicU64::new(self.decode_steps()),
        }
    }
}

/// Everything one rerank call produces.
#[derive(Debug, Clone)]
pub struct RerankOutput<T> {
    pub relevance: RelevanceMatrix<T>,
    pub anchors: AnchorSet<T>,
    pub scores: ScoreVector<T>,
    /// Candidate indices, best first.
    pub ranking: Vec<usize>,
}

impl<T: Scalar> MvpModel<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        config.check_params(&params)?;
        Ok(Self {
            config,
            params,
            decode_steps: AtomicU64::new(0),
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed, INIT_STD)?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    /// Decoder invocations so far (one per reranked query).
    pub fn decode_steps(&self) -> u64 {
        self.decode_steps.load(Ordering::Relaxed)
    }

    pub fn encode_candidates(&self, query: &[TokenId], candidates: &[Vec<TokenId>]) -> Result<RelevanceMatrix<T>> {
        encode_candidates(&self.params, &self.config.encoder, query, candidates)
    }

    /// All `m` anchors in a single decoder invocation.
    pub fn anchors(&self, rel: &RelevanceMatrix<T>) -> Result<AnchorSet<T>> {
        let views = (1..=rel.m()).map(|k| stack_view(rel, k)).collect::<Result<Vec<_>>>()?;
        decode_anchor_set(&self.params, &self.config.decoder(), &views)
    }

    pub fn rerank_full(
        &self,
        query: &[TokenId],
        candidates: &[Vec<TokenId>],
        strategy: AggregationStrategy,
    ) -> Result<RerankOutput<T>> {
        let n = candidates.len();
        if n == 0 {
            return Err(Error::EmptyCandidates);
        }
        if n > self.config.max_candidates {
            return Err(Error::Parameter(format!(
                "{n} candidates exceed the configured maximum {}",
                self.config.max_candidates
            )));
        }
        strategy.validate(self.config.views())?;
        let relevance = self.encode_candidates(query, candidates)?;
        let anchors = self.anchors(&relevance)?;
        self.decode_steps.fetch_add(1, Ordering::Relaxed);
        let scores = score(&anchors, &relevance, strategy)?;
        let ranking = rank(&scores.scores);
        Ok(RerankOutput {
            relevance,
            anchors,
            scores,
            ranking,
        })
    }

    /// Scores every candidate in one decoding step and ranks them.
    pub fn rerank(
        &self,
        query: &[TokenId],
        candidates: &[Vec<TokenId>],
        strategy: AggregationStrategy,
    ) -> Result<(ScoreVector<T>, Vec<usize>)> {
        let out = self.rerank_full(query, candidates, strategy)?;
        Ok((out.scores, out.ranking))
    }

    pub fn view_token_mode(&self) -> ViewTokenMode {
        self.config.encoder.mode
    }
}

/// Anything that assigns one score per candidate of a query.
pub trait ListScorer: Sync {
    fn score_list(&self, query: &[TokenId], candidates: &[Vec<TokenId>]) -> Result<Vec<f64>>;
}

impl<T: Scalar> ListScorer for MvpModel<T> {
    fn score_list(&self, query: &[TokenId], candidates: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        let (s, _) = self.rerank(query, candidates, AggregationStrategy::Mean)?;
        Ok(s.scores.iter().map(|v| v.as_f64()).collect())
    }
}

/// A model scoring with a fixed aggregation strategy.
pub struct WithStrategy<'a, T> {
    pub model: &'a MvpModel<T>,
    pub strategy: AggregationStrategy,
}

impl<T: Scalar> ListScorer for WithStrategy<'_, T> {
    fn score_list(&self, query: &[TokenId], candidates: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        let (s, _) = self.model.rerank(query, candidates, self.strategy)?;
        Ok(s.scores.iter().map(|v| v.as_f64()).collect())
    }
}
