//! Anchor-guided decoding.
//!
//! For each view a single learned BOS query cross-attends over that view's
//! relevance vectors (no positional information on keys or values) to form
//! an anchor; candidates are scored by their dot product with the anchors.

use crate::encoder::{attention, RelevanceMatrix};
use crate::error::{Error, Result};
use crate::numerics::{dot, Graph, Tensor, Var, LAYER_NORM_EPS};
use crate::params::{BoundParams, ModelParams};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// How per-view scores combine into one score per candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationStrategy {
    Mean,
    Max,
    /// A single view, 1-based.
    SingleView(usize),
}

impl AggregationStrategy {
    pub fn validate(self, m: usize) -> Result<()> {
        match self {
            AggregationStrategy::SingleView(k) if k == 0 || k > m => {
                Err(Error::Index(format!("view {k} outside 1..={m}")))
            }
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AggregationStrategy::Mean => write!(f, "mean"),
            AggregationStrategy::Max => write!(f, "max"),
            AggregationStrategy::SingleView(k) => write!(f, "view:{k}"),
        }
    }
}

impl std::str::FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => other
                .strip_prefix("view:")
                .and_then(|k| k.parse().ok())
                .map(Self::SingleView)
                .ok_or_else(|| Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 1,
            heads: 4,
            ff: 128,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.layers == 0 || self.ff == 0 {
            return Err(Error::Config(
                "decoder needs at least one layer and a positive ff width".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn init_params<T: Scalar>(&self, params: &mut ModelParams<T>, rng: &mut SplitMix64, std: f64) {
        let d = self.d;
        params.insert_normal("dec.bos", vec![1, d], std, rng);
        for l in 0..self.layers {
            params.insert_ones(&format!("dec.l{l}.self_norm"), d);
            params.insert_normal(&format!("dec.l{l}.self_wv"), vec![d, d], std, rng);
            params.insert_normal(&format!("dec.l{l}.self_wo"), vec![d, d], std, rng);
            params.insert_ones(&format!("dec.l{l}.cross_norm"), d);
            for w in ["cross_wq", "cross_wk", "cross_wv", "cross_wo"] {
                params.insert_normal(&format!("dec.l{l}.{w}"), vec![d, d], std, rng);
            }
            params.insert_ones(&format!("dec.l{l}.mlp_norm"), d);
            params.insert_normal(&format!("dec.l{l}.w1"), vec![d, self.ff], std, rng);
            params.insert_normal(&format!("dec.l{l}.w2"), vec![self.ff, d], std, rng);
        }
        params.insert_ones("dec.final_norm", d);
    }
}

struct LayerVars {
    self_norm: Var,
    self_wv: Var,
    self_wo: Var,
    cross_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    mlp_norm: Var,
    w1: Var,
    w2: Var,
}

/// Decoder parameters resolved on one tape.
pub struct DecoderVars {
    bos: Var,
    layers: Vec<LayerVars>,
    final_norm: Var,
}

impl DecoderVars {
    pub fn resolve(bound: &BoundParams, cfg: &DecoderConfig) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|l| {
                let v = |n: &str| bound.var(&format!("dec.l{l}.{n}"));
                Ok(LayerVars {
                    self_norm: v("self_norm")?,
                    self_wv: v("self_wv")?,
                    self_wo: v("self_wo")?,
                    cross_norm: v("cross_norm")?,
                    wq: v("cross_wq")?,
                    wk: v("cross_wk")?,
                    wv: v("cross_wv")?,
                    wo: v("cross_wo")?,
                    mlp_norm: v("mlp_norm")?,
                    w1: v("w1")?,
                    w2: v("w2")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            bos: bound.var("dec.bos")?,
            layers,
            final_norm: bound.var("dec.final_norm")?,
        })
    }
}

/// Anchors (`[m × d]`) plus every cross-attention weight matrix, indexed
/// `[layer][view][head]`, each of shape `[1 × n]`.
pub struct DecodeOutput {
    pub anchors: Var,
    pub attention: Vec<Vec<Vec<Var>>>,
}

/// Stacks view `k` (0-based) of every candidate block into `E_k` (`[n × d]`).
pub fn stack_view_nodes<T: Scalar>(g: &mut Graph<T>, blocks: &[Var], k: usize) -> Result<Var> {
    let rows = blocks
        .iter()
        .map(|&b| g.slice_rows(b, k, 1))
        .collect::<Result<Vec<_>>>()?;
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat_rows(&rows)
    }
}

/// One decoder invocation producing an anchor for every view.
///
/// Views travel as the row (batch) dimension: row `k` of the BOS batch only
/// ever attends over `views[k]`. Self-attention over a lone BOS token is the
/// identity-weighted case, so it reduces to the value/output projections.
pub fn decode_anchors<T: Scalar>(
    g: &mut Graph<T>,
    vars: &DecoderVars,
    cfg: &DecoderConfig,
    views: &[Var],
) -> Result<DecodeOutput> {
    let m = views.len();
    if m == 0 {
        return Err(Error::Dimension("no views to decode".into()));
    }
    for &e in views {
        if g.value(e).rows() == 0 {
            return Err(Error::EmptyCandidates);
        }
        if g.value(e).cols() != cfg.d {
            return Err(Error::Dimension(format!(
                "relevance width {} does not match decoder width {}",
                g.value(e).cols(),
                cfg.d
            )));
        }
    }
    let eps = T::of(LAYER_NORM_EPS);
    let mut x = g.repeat_rows(vars.bos, m)?;
    let mut trace = Vec::with_capacity(vars.layers.len());
    for lv in &vars.layers {
        let hn = g.norm(x, lv.self_norm, eps)?;
        let sv = g.matmul(hn, lv.self_wv)?;
        let so = g.matmul(sv, lv.self_wo)?;
        x = g.add(x, so)?;

        let hn = g.norm(x, lv.cross_norm, eps)?;
        let q = g.matmul(hn, lv.wq)?;
        let mut rows = Vec::with_capacity(m);
        let mut layer_trace = Vec::with_capacity(m);
        for (k, &e) in views.iter().enumerate() {
            let qk = g.slice_rows(q, k, 1)?;
            let keys = g.matmul(e, lv.wk)?;
            let values = g.matmul(e, lv.wv)?;
            let (out, weights) = attention(g, qk, keys, values, cfg.heads)?;
            rows.push(out);
            layer_trace.push(weights);
        }
        let mixed = if m == 1 { rows[0] } else { g.concat_rows(&rows)? };
        let co = g.matmul(mixed, lv.wo)?;
        x = g.add(x, co)?;

        let hn = g.norm(x, lv.mlp_norm, eps)?;
        let h = g.matmul(hn, lv.w1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, lv.w2)?;
        x = g.add(x, h)?;
        trace.push(layer_trace);
    }
    let anchors = g.norm(x, vars.final_norm, eps)?;
    Ok(DecodeOutput {
        anchors,
        attention: trace,
    })
}

/// Per-candidate scores (`[n × 1]`) from anchors and view matrices.
pub fn score_nodes<T: Scalar>(
    g: &mut Graph<T>,
    anchors: Var,
    views: &[Var],
    strategy: AggregationStrategy,
) -> Result<Var> {
    let m = views.len();
    strategy.validate(m)?;
    if g.value(anchors).rows() != m {
        return Err(Error::Dimension(format!(
            "view axis: {} anchors for {m} views",
            g.value(anchors).rows()
        )));
    }
    let per_view = |g: &mut Graph<T>, k: usize| -> Result<Var> {
        let a = g.slice_rows(anchors, k, 1)?;
        g.matmul_nt(views[k], a)
    };
    match strategy {
        AggregationStrategy::SingleView(k) => per_view(g, k - 1),
        AggregationStrategy::Mean => {
            let mut acc = per_view(g, 0)?;
            for k in 1..m {
                let s = per_view(g, k)?;
                acc = g.add(acc, s)?;
            }
            Ok(g.scale(acc, T::one() / T::of_usize(m)))
        }
        AggregationStrategy::Max => {
            let all = (0..m).map(|k| per_view(g, k)).collect::<Result<Vec<_>>>()?;
            g.max_elementwise(&all)
        }
    }
}

/// The anchor of every view, row `k` = anchor of view `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet<T> {
    pub anchors: Tensor<T>,
}

impl<T: Scalar> AnchorSet<T> {
    pub fn m(&self) -> usize {
        self.anchors.rows()
    }

    pub fn anchor(&self, k: usize) -> &[T] {
        self.anchors.row(k)
    }
}

/// One score per candidate plus the aggregation that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector<T> {
    pub scores: Vec<T>,
    pub strategy: AggregationStrategy,
}

/// `E_k` for view `k` (1-based) of a relevance matrix.
pub fn stack_view<T: Scalar>(rel: &RelevanceMatrix<T>, k: usize) -> Result<Tensor<T>> {
    if k == 0 || k > rel.m() {
        return Err(Error::Index(format!("view {k} outside 1..={}", rel.m())));
    }
    let mut data = Vec::with_capacity(rel.n() * rel.d());
    for i in 0..rel.n() {
        data.extend_from_slice(rel.vector(i, k - 1));
    }
    Tensor::new(vec![rel.n(), rel.d()], data)
}

/// Anchor of a single view matrix `E_k` with frozen parameters.
pub fn decode_anchor<T: Scalar>(params: &ModelParams<T>, cfg: &DecoderConfig, view: &Tensor<T>) -> Result<Tensor<T>> {
    let anchors = decode_anchor_set(params, cfg, std::slice::from_ref(view))?;
    Ok(anchors.anchors)
}

/// All anchors in one decoder invocation with frozen parameters.
pub fn decode_anchor_set<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &DecoderConfig,
    views: &[Tensor<T>],
) -> Result<AnchorSet<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let vars = DecoderVars::resolve(&bound, cfg)?;
    let view_vars: Vec<Var> = views.iter().map(|v| g.constant(v.clone())).collect();
    let out = decode_anchors(&mut g, &vars, cfg, &view_vars)?;
    Ok(AnchorSet {
        anchors: g.value(out.anchors).clone(),
    })
}

/// Dot-product scores of each candidate against the anchors.
pub fn score<T: Scalar>(
    anchors: &AnchorSet<T>,
    rel: &RelevanceMatrix<T>,
    strategy: AggregationStrategy,
) -> Result<ScoreVector<T>> {
    let m = rel.m();
    if anchors.m() != m {
        return Err(Error::Dimension(format!(
            "view axis: {} anchors for {m} views",
            anchors.m()
        )));
    }
    if anchors.anchors.cols() != rel.d() {
        return Err(Error::Dimension(format!(
            "width axis: anchors of width {} for relevance vectors of width {}",
            anchors.anchors.cols(),
            rel.d()
        )));
    }
    strategy.validate(m)?;
    let per_view = |i: usize, k: usize| dot(anchors.anchor(k), rel.vector(i, k));
    let scores = (0..rel.n())
        .map(|i| match strategy {
            AggregationStrategy::Mean => (0..m).map(|k| per_view(i, k)).sum::<T>() / T::of_usize(m),
            AggregationStrategy::Max => (0..m).map(|k| per_view(i, k)).fold(T::neg_infinity(), T::max),
            AggregationStrategy::SingleView(k) => per_view(i, k - 1),
        })
        .collect();
    Ok(ScoreVector { scores, strategy })
}

/// Candidate indices by descending score; equal scores keep input order.
pub fn rank<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}
