//! Multi-view passage encoding.
//!
//! Every candidate is encoded on its own: the prompt starts with the `m` view
//! tokens at fixed positions `0..m`, followed by the query and the passage.
//! The hidden states at the view positions are that passage's relevance vectors.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var, LAYER_NORM_EPS};
use crate::params::{BoundParams, ModelParams};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const QUERY_MARKER: TokenId = 2;
pub const PASSAGE_MARKER: TokenId = 3;
/// First id available to passage and query text.
pub const FIRST_CONTENT: TokenId = 4;

/// Upper bound on supported sequence lengths.
pub const MAX_SEQUENCE: usize = 1024;

/// How view positions are realised in the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewTokenMode {
    /// `m` reserved, learned view tokens prepended to every prompt.
    Dedicated,
    /// No reserved tokens; the hidden states at prompt positions `0..m` are used.
    FirstK,
}

impl ViewTokenMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewTokenMode::Dedicated => "dedicated",
            ViewTokenMode::FirstK => "first-k",
        }
    }
}

impl std::str::FromStr for ViewTokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dedicated" => Ok(Self::Dedicated),
            "first-k" => Ok(Self::FirstK),
            other => Err(Error::Config(format!("unknown view token mode {other:?}"))),
        }
    }
}

/// Closed toy vocabulary: reserved ids, content ids, then one id per view token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    /// Reserved markers plus content tokens.
    pub base_size: usize,
    /// Number of dedicated view tokens appended after the base vocabulary.
    pub views: usize,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.base_size + self.views
    }

    /// Id of view token `k` (0-based).
    pub fn view_token(&self, k: usize) -> TokenId {
        debug_assert!(k < self.views);
        self.base_size + k
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        (FIRST_CONTENT..self.base_size).contains(&id)
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id < self.size() && !self.is_content(id)
    }

    /// Whitespace tokenizer: each word is `t<id>` or a bare content id.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                let digits = w.strip_prefix('t').unwrap_or(w);
                let id: TokenId = digits
                    .parse()
                    .map_err(|_| Error::Config(format!("unknown word {w:?}")))?;
                if !self.is_content(id) {
                    return Err(Error::Vocab {
                        id,
                        size: self.base_size,
                    });
                }
                Ok(id)
            })
            .collect()
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| match id {
                PAD => "<pad>".to_string(),
                BOS => "<bos>".to_string(),
                QUERY_MARKER => "<query>".to_string(),
                PASSAGE_MARKER => "<context>".to_string(),
                id if id >= self.base_size => format!("<v{}>", id - self.base_size + 1),
                id => format!("t{id}"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Prompt construction rules shared by every passage of a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptLayout {
    pub views: usize,
    pub max_len: usize,
    pub mode: ViewTokenMode,
    pub vocab: Vocab,
}

impl PromptLayout {
    /// Tokens preceding the query text.
    pub fn prefix_len(&self) -> usize {
        match self.mode {
            ViewTokenMode::Dedicated => self.views + 1,
            ViewTokenMode::FirstK => 1,
        }
    }

    /// `<v1> … <vm> <query> q… <context> c…`, truncating the passage tail to fit.
    pub fn build_prompt(&self, query: &[TokenId], passage: &[TokenId]) -> Result<Vec<TokenId>> {
        let overhead = self.prefix_len() + 1;
        let budget = self.max_len.saturating_sub(overhead);
        if query.len() > budget {
            return Err(Error::InputTooLong(format!(
                "query of {} tokens exceeds the budget of {budget} (max length {})",
                query.len(),
                self.max_len
            )));
        }
        let passage_len = passage.len().min(budget - query.len());
        let mut out = Vec::with_capacity(overhead + query.len() + passage_len);
        if self.mode == ViewTokenMode::Dedicated {
            out.extend((0..self.views).map(|k| self.vocab.view_token(k)));
        }
        out.push(QUERY_MARKER);
        out.extend_from_slice(query);
        out.push(PASSAGE_MARKER);
        out.extend_from_slice(&passage[..passage_len]);
        Ok(out)
    }
}

/// Encoder hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub views: usize,
    pub vocab_size: usize,
    pub ff: usize,
    pub mode: ViewTokenMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 2,
            heads: 4,
            max_len: 64,
            views: 4,
            vocab_size: 64,
            ff: 128,
            mode: ViewTokenMode::Dedicated,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.views == 0 {
            return Err(Error::Config("at least one view is required".into()));
        }
        if self.max_len < self.views + 2 || self.max_len > MAX_SEQUENCE {
            return Err(Error::Config(format!(
                "max length {} must lie in {}..={MAX_SEQUENCE}",
                self.max_len,
                self.views + 2
            )));
        }
        if self.vocab_size <= FIRST_CONTENT {
            return Err(Error::Config(format!(
                "vocabulary of {} has no content ids",
                self.vocab_size
            )));
        }
        if self.ff == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            base_size: self.vocab_size,
            views: match self.mode {
                ViewTokenMode::Dedicated => self.views,
                ViewTokenMode::FirstK => 0,
            },
        }
    }

    pub fn layout(&self) -> PromptLayout {
        PromptLayout {
            views: self.views,
            max_len: self.max_len,
            mode: self.mode,
            vocab: self.vocab(),
        }
    }

    pub(crate) fn init_params<T: Scalar>(&self, params: &mut ModelParams<T>, rng: &mut SplitMix64, std: f64) {
        let d = self.d;
        params.insert_normal("enc.tok_emb", vec![self.vocab().size(), d], std, rng);
        params.insert_normal("enc.pos_emb", vec![self.max_len, d], std, rng);
        for l in 0..self.layers {
            params.insert_ones(&format!("enc.l{l}.attn_norm"), d);
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert_normal(&format!("enc.l{l}.{w}"), vec![d, d], std, rng);
            }
            params.insert_ones(&format!("enc.l{l}.mlp_norm"), d);
            params.insert_normal(&format!("enc.l{l}.w1"), vec![d, self.ff], std, rng);
            params.insert_normal(&format!("enc.l{l}.w2"), vec![self.ff, d], std, rng);
        }
        params.insert_ones("enc.final_norm", d);
    }
}

struct LayerVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    mlp_norm: Var,
    w1: Var,
    w2: Var,
}

/// Encoder parameters resolved on one tape.
pub struct EncoderVars {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    final_norm: Var,
}

impl EncoderVars {
    pub fn resolve(bound: &BoundParams, cfg: &EncoderConfig) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|l| {
                let v = |n: &str| bound.var(&format!("enc.l{l}.{n}"));
                Ok(LayerVars {
                    attn_norm: v("attn_norm")?,
                    wq: v("wq")?,
                    wk: v("wk")?,
                    wv: v("wv")?,
                    wo: v("wo")?,
                    mlp_norm: v("mlp_norm")?,
                    w1: v("w1")?,
                    w2: v("w2")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tok_emb: bound.var("enc.tok_emb")?,
            pos_emb: bound.var("enc.pos_emb")?,
            layers,
            final_norm: bound.var("enc.final_norm")?,
        })
    }
}

/// Multi-head scaled dot-product attention of `q` rows over `k`/`v` rows.
/// Returns the concatenated head outputs and each head's weight matrix.
pub(crate) fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let d = g.value(q).cols();
    let dh = d / heads;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let w = g.softmax_rows(logits, T::one())?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, weights))
}

fn embed<T: Scalar>(g: &mut Graph<T>, vars: &EncoderVars, cfg: &EncoderConfig, tokens: &[TokenId]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Dimension("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::InputTooLong(format!(
            "{} tokens exceed max length {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    let tok = g.gather_rows(vars.tok_emb, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = g.gather_rows(vars.pos_emb, &positions)?;
    g.add(tok, pos)
}

/// One pre-norm transformer block. When `rows` is set, only those leading
/// rows are updated (they still attend over the full sequence).
fn block<T: Scalar>(g: &mut Graph<T>, lv: &LayerVars, heads: usize, x: Var, rows: Option<usize>) -> Result<Var> {
    let eps = T::of(LAYER_NORM_EPS);
    let hn = g.norm(x, lv.attn_norm, eps)?;
    let k = g.matmul(hn, lv.wk)?;
    let v = g.matmul(hn, lv.wv)?;
    let (x, hq) = match rows {
        Some(r) => (g.slice_rows(x, 0, r)?, g.slice_rows(hn, 0, r)?),
        None => (x, hn),
    };
    let q = g.matmul(hq, lv.wq)?;
    let (att, _) = attention(g, q, k, v, heads)?;
    let att = g.matmul(att, lv.wo)?;
    let x = g.add(x, att)?;
    let hn = g.norm(x, lv.mlp_norm, eps)?;
    let h = g.matmul(hn, lv.w1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, lv.w2)?;
    g.add(x, h)
}

/// Full encoder stack: `[L_i × d]` hidden states.
pub fn encode<T: Scalar>(g: &mut Graph<T>, vars: &EncoderVars, cfg: &EncoderConfig, tokens: &[TokenId]) -> Result<Var> {
    let mut x = embed(g, vars, cfg, tokens)?;
    for lv in &vars.layers {
        x = block(g, lv, cfg.heads, x, None)?;
    }
    g.norm(x, vars.final_norm, T::of(LAYER_NORM_EPS))
}

/// Rows `0..m` of a hidden-state matrix.
pub fn extract_views<T: Scalar>(g: &mut Graph<T>, hidden: Var, m: usize) -> Result<Var> {
    let len = g.value(hidden).rows();
    if len < m {
        return Err(Error::Dimension(format!(
            "sequence of {len} positions holds fewer than {m} views"
        )));
    }
    g.slice_rows(hidden, 0, m)
}

/// Encode and extract in one pass; the last block only computes the view rows.
pub fn encode_views<T: Scalar>(
    g: &mut Graph<T>,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    tokens: &[TokenId],
) -> Result<Var> {
    let m = cfg.views;
    if tokens.len() < m {
        return Err(Error::Dimension(format!(
            "sequence of {} positions holds fewer than {m} views",
            tokens.len()
        )));
    }
    let mut x = embed(g, vars, cfg, tokens)?;
    let last = vars.layers.len().saturating_sub(1);
    for (i, lv) in vars.layers.iter().enumerate() {
        x = block(g, lv, cfg.heads, x, (i == last).then_some(m))?;
    }
    if vars.layers.is_empty() {
        x = g.slice_rows(x, 0, m)?;
    }
    g.norm(x, vars.final_norm, T::of(LAYER_NORM_EPS))
}

/// `n × m × d` relevance vectors, one `m × d` block per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMatrix<T> {
    n: usize,
    m: usize,
    d: usize,
    values: Vec<T>,
}

impl<T: Scalar> RelevanceMatrix<T> {
    pub fn from_blocks(blocks: &[Tensor<T>]) -> Result<Self> {
        let first = blocks.first().ok_or(Error::EmptyCandidates)?;
        let (m, d) = (first.rows(), first.cols());
        let mut values = Vec::with_capacity(blocks.len() * m * d);
        for (i, b) in blocks.iter().enumerate() {
            if b.rows() != m || b.cols() != d {
                return Err(Error::Dimension(format!(
                    "candidate {i} has a {}x{} block, expected {m}x{d}",
                    b.rows(),
                    b.cols()
                )));
            }
            values.extend_from_slice(b.data());
        }
        Ok(Self {
            n: blocks.len(),
            m,
            d,
            values,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Relevance vector of candidate `i` under view `k` (both 0-based).
    pub fn vector(&self, i: usize, k: usize) -> &[T] {
        let off = (i * self.m + k) * self.d;
        &self.values[off..off + self.d]
    }

    /// The `m × d` block of candidate `i`.
    pub fn block(&self, i: usize) -> Tensor<T> {
        let sz = self.m * self.d;
        Tensor::raw(vec![self.m, self.d], self.values[i * sz..(i + 1) * sz].to_vec())
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// Encodes one prompt with frozen parameters; returns its `m × d` view block.
pub fn encode_prompt_views<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
    prompt: &[TokenId],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let vars = EncoderVars::resolve(&bound, cfg)?;
    let e = encode_views(&mut g, &vars, cfg, prompt)?;
    Ok(g.value(e).clone())
}

/// Builds each candidate's prompt and encodes it independently (fanned out
/// over the rayon pool; output order follows the input order).
pub fn encode_candidates<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
    query: &[TokenId],
    candidates: &[Vec<TokenId>],
) -> Result<RelevanceMatrix<T>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let layout = cfg.layout();
    let blocks = candidates
        .par_iter()
        .enumerate()
        .map(|(index, passage)| {
            layout
                .build_prompt(query, passage)
                .and_then(|prompt| encode_prompt_views(params, cfg, &prompt))
                .map_err(|e| Error::Passage {
                    index,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    RelevanceMatrix::from_blocks(&blocks)
}
