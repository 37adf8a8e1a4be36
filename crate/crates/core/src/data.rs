//! Synthetic ranking corpora with planted multi-aspect relevance, and their
//! JSON-lines serialization.
//!
//! Content ids are split into `A` aspect pools followed by noise ids. A query
//! draws a few tokens from every aspect pool. A candidate's overlap with aspect
//! `a` is the number of distinct query tokens of pool `a` it contains, and its
//! relevance is the sum or the minimum of those overlaps.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{TokenId, Vocab, FIRST_CONTENT};
use crate::error::{Error, Result};
use crate::objectives::validate_ranks;
use crate::rng::SplitMix64;

/// Header line of the records format.
pub const RECORDS_HEADER: &str = "#mvp-records v1";

pub const MIN_CANDIDATES: usize = 2;
pub const MAX_CANDIDATES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub pid: String,
    pub tokens: Vec<TokenId>,
}

/// One query with its candidate passages and their ground-truth ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub query_id: String,
    pub query: Vec<TokenId>,
    pub candidates: Vec<Candidate>,
    /// 1 = most relevant, aligned with `candidates`.
    pub ranks: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<Vec<f64>>,
}

impl RankingRecord {
    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    pub fn validate(&self, vocab_size: Option<usize>) -> Result<()> {
        let n = self.n();
        if !(MIN_CANDIDATES..=MAX_CANDIDATES).contains(&n) {
            return Err(Error::Integrity(format!(
                "record {} has {n} candidates, expected {MIN_CANDIDATES}..={MAX_CANDIDATES}",
                self.query_id
            )));
        }
        if self.ranks.len() != n {
            return Err(Error::Integrity(format!(
                "record {} has {} ranks for {n} candidates",
                self.query_id,
                self.ranks.len()
            )));
        }
        validate_ranks(&self.ranks)?;
        if let Some(rel) = &self.relevance {
            if rel.len() != n || rel.iter().any(|r| !r.is_finite() || *r < 0.0) {
                return Err(Error::Integrity(format!(
                    "record {} has malformed relevance judgments",
                    self.query_id
                )));
            }
        }
        if let Some(size) = vocab_size {
            let all = self.query.iter().chain(self.candidates.iter().flat_map(|c| &c.tokens));
            for &id in all {
                if id >= size {
                    return Err(Error::Vocab { id, size });
                }
            }
        }
        Ok(())
    }

    pub fn passages(&self) -> Vec<Vec<TokenId>> {
        self.candidates.iter().map(|c| c.tokens.clone()).collect()
    }

    /// Graded relevance; falls back to `1 / rank` when none is stored.
    pub fn graded_relevance(&self) -> Vec<f64> {
        match &self.relevance {
            Some(r) => r.clone(),
            None => self.ranks.iter().map(|&r| 1.0 / r as f64).collect(),
        }
    }
}

/// How per-aspect overlaps combine into relevance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelevanceRule {
    SumOverlap,
    MinOverlap,
}

impl RelevanceRule {
    pub fn as_str(self) -> &'static str {
        match self {
            RelevanceRule::SumOverlap => "sum-overlap",
            RelevanceRule::MinOverlap => "min-overlap",
        }
    }

    pub fn apply(self, overlaps: &[usize]) -> usize {
        match self {
            RelevanceRule::SumOverlap => overlaps.iter().sum(),
            RelevanceRule::MinOverlap => overlaps.iter().copied().min().unwrap_or(0),
        }
    }
}

impl std::str::FromStr for RelevanceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum-overlap" => Ok(Self::SumOverlap),
            "min-overlap" => Ok(Self::MinOverlap),
            other => Err(Error::Spec(format!("unknown relevance rule {other:?}"))),
        }
    }
}

/// Parameters of a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub aspects: usize,
    pub tokens_per_aspect: usize,
    /// Query tokens drawn from each aspect pool.
    pub query_tokens_per_aspect: usize,
    pub passage_len: usize,
    /// Upper bound on off-query tokens of each aspect pool placed in a passage.
    pub distractors_per_aspect: usize,
    pub n: usize,
    pub records: usize,
    pub rule: RelevanceRule,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            aspects: 2,
            tokens_per_aspect: 8,
            query_tokens_per_aspect: 2,
            passage_len: 8,
            distractors_per_aspect: 1,
            n: 8,
            records: 2200,
            rule: RelevanceRule::MinOverlap,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub const KEYS: &'static [&'static str] = &[
        "vocab_size",
        "aspects",
        "tokens_per_aspect",
        "query_tokens_per_aspect",
        "passage_len",
        "distractors_per_aspect",
        "n",
        "records",
        "rule",
        "seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::Spec(format!("{key}: expected an integer, got {value:?}")))
        };
        match key {
            "vocab_size" => self.vocab_size = num()?,
            "aspects" => self.aspects = num()?,
            "tokens_per_aspect" => self.tokens_per_aspect = num()?,
            "query_tokens_per_aspect" => self.query_tokens_per_aspect = num()?,
            "passage_len" => self.passage_len = num()?,
            "distractors_per_aspect" => self.distractors_per_aspect = num()?,
            "n" => self.n = num()?,
            "records" => self.records = num()?,
            "rule" => self.rule = value.parse()?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Spec(format!("seed: expected an integer, got {value:?}")))?
            }
            other => return Err(Error::Spec(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a flat `key=value` file (blank lines and `#` comments ignored).
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (key, value) in parse_key_values(text, |line, message| Error::Parse { line, message })? {
            spec.set(&key, &value)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    fn first_noise(&self) -> usize {
        FIRST_CONTENT + self.aspects * self.tokens_per_aspect
    }

    /// Aspect pool owning `id`, if any.
    pub fn aspect_of(&self, id: TokenId) -> Option<usize> {
        (FIRST_CONTENT..self.first_noise())
            .contains(&id)
            .then(|| (id - FIRST_CONTENT) / self.tokens_per_aspect)
    }

    pub fn validate(&self) -> Result<()> {
        if self.aspects == 0 {
            return Err(Error::Spec("at least one aspect is required".into()));
        }
        if self.query_tokens_per_aspect == 0 || self.query_tokens_per_aspect > self.tokens_per_aspect {
            return Err(Error::Spec(format!(
                "query tokens per aspect {} must lie in 1..={}",
                self.query_tokens_per_aspect, self.tokens_per_aspect
            )));
        }
        if self.first_noise() >= self.vocab_size {
            return Err(Error::Spec(format!(
                "vocabulary of {} cannot hold {} reserved ids, {} aspects of {} tokens and at least one noise token",
                self.vocab_size, FIRST_CONTENT, self.aspects, self.tokens_per_aspect
            )));
        }
        if self.distractors_per_aspect > self.tokens_per_aspect - self.query_tokens_per_aspect {
            return Err(Error::Spec("more distractors than off-query aspect tokens".into()));
        }
        let needed = self.aspects * (self.query_tokens_per_aspect + self.distractors_per_aspect);
        if self.passage_len < needed {
            return Err(Error::Spec(format!(
                "passage length {} cannot hold {needed} aspect tokens",
                self.passage_len
            )));
        }
        if !(MIN_CANDIDATES..=MAX_CANDIDATES).contains(&self.n) {
            return Err(Error::Spec(format!(
                "n = {} outside {MIN_CANDIDATES}..={MAX_CANDIDATES}",
                self.n
            )));
        }
        Ok(())
    }

    /// Per-aspect overlap between a passage and a query.
    pub fn overlaps(&self, query: &[TokenId], passage: &[TokenId]) -> Vec<usize> {
        let present: HashSet<TokenId> = passage.iter().copied().collect();
        let mut counts = vec![0; self.aspects];
        let distinct: HashSet<TokenId> = query.iter().copied().collect();
        for &q in &distinct {
            if let Some(a) = self.aspect_of(q) {
                if present.contains(&q) {
                    counts[a] += 1;
                }
            }
        }
        counts
    }

    /// Planted relevance of a passage.
    pub fn relevance(&self, query: &[TokenId], passage: &[TokenId]) -> usize {
        self.rule.apply(&self.overlaps(query, passage))
    }

    fn generate_record(&self, index: usize) -> RankingRecord {
        let mut rng = SplitMix64::derive(self.seed, index as u64);
        let pool = |a: usize| FIRST_CONTENT + a * self.tokens_per_aspect;
        let q = self.query_tokens_per_aspect;
        // Per aspect: the chosen query tokens followed by the off-query tokens.
        let arrangements: Vec<Vec<TokenId>> = (0..self.aspects)
            .map(|a| {
                rng.sample_distinct(self.tokens_per_aspect, self.tokens_per_aspect)
                    .into_iter()
                    .map(|o| pool(a) + o)
                    .collect()
            })
            .collect();
        let mut query: Vec<TokenId> = arrangements.iter().flat_map(|arr| arr[..q].iter().copied()).collect();
        rng.shuffle(&mut query);

        let noise = self.vocab_size - self.first_noise();
        let candidates: Vec<Candidate> = (0..self.n)
            .map(|i| {
                let mut tokens = Vec::with_capacity(self.passage_len);
                for arr in &arrangements {
                    let hits = rng.below(q + 1);
                    let chosen = rng.sample_distinct(q, hits);
                    tokens.extend(chosen.into_iter().map(|j| arr[j]));
                    let distract = rng.below(self.distractors_per_aspect + 1);
                    let off = rng.sample_distinct(self.tokens_per_aspect - q, distract);
                    tokens.extend(off.into_iter().map(|j| arr[q + j]));
                }
                while tokens.len() < self.passage_len {
                    tokens.push(self.first_noise() + rng.below(noise));
                }
                rng.shuffle(&mut tokens);
                Candidate {
                    pid: format!("q{index}-p{i}"),
                    tokens,
                }
            })
            .collect();
        let relevance: Vec<usize> = candidates.iter().map(|c| self.relevance(&query, &c.tokens)).collect();
        RankingRecord {
            query_id: format!("q{index}"),
            query,
            ranks: ranks_from_relevance(&relevance),
            relevance: Some(relevance.iter().map(|&r| r as f64).collect()),
            candidates,
        }
    }
}

/// Ranks by descending relevance, ties broken by ascending index.
pub fn ranks_from_relevance(relevance: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..relevance.len()).collect();
    order.sort_by(|&a, &b| relevance[b].cmp(&relevance[a]));
    let mut ranks = vec![0; relevance.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    ranks
}

/// Generates the whole corpus; record `i` depends only on `(spec, i)`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<RankingRecord>> {
    use rayon::prelude::*;

    spec.validate()?;
    let records: Vec<RankingRecord> = (0..spec.records)
        .into_par_iter()
        .map(|i| spec.generate_record(i))
        .collect();
    if spec.rule == RelevanceRule::MinOverlap && spec.aspects >= 2 && spec.records > 0 {
        let sum_spec = CorpusSpec {
            rule: RelevanceRule::SumOverlap,
            ..spec.clone()
        };
        let differing = records
            .iter()
            .filter(|r| {
                let sums: Vec<usize> = r
                    .candidates
                    .iter()
                    .map(|c| sum_spec.relevance(&r.query, &c.tokens))
                    .collect();
                ranks_from_relevance(&sums) != r.ranks
            })
            .count();
        if differing * 10 < records.len() {
            return Err(Error::Spec(format!(
                "only {differing} of {} records separate min-overlap from sum-overlap ordering",
                records.len()
            )));
        }
    }
    Ok(records)
}

/// Train / validation / test partition of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<RankingRecord>,
    pub validation: Vec<RankingRecord>,
    pub test: Vec<RankingRecord>,
}

/// Seeded partition by query. Sizes are `round(f · N)` for train and
/// validation; test takes the remainder.
pub fn split(records: &[RankingRecord], fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Spec(format!(
            "fractions {a}, {b}, {c} must be in [0, 1] and sum to 1"
        )));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: pick(&order[..n_train]),
        validation: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

pub fn write_records_to<W: Write>(mut w: W, records: &[RankingRecord]) -> std::io::Result<()> {
    writeln!(w, "{RECORDS_HEADER}")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()
}

pub fn write_records(path: impl AsRef<Path>, records: &[RankingRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records_to(BufWriter::new(file), records).map_err(|e| Error::io(path, e))
}

pub fn read_records_from<R: BufRead>(reader: R) -> Result<Vec<RankingRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut header_seen = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            if line.trim_end() != RECORDS_HEADER {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected header {RECORDS_HEADER:?}"),
                });
            }
            header_seen = true;
            continue;
        }
        let record: RankingRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate(None).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(record.query_id.clone()) {
            return Err(Error::Integrity(format!(
                "duplicate query_id {:?} at line {line_no}",
                record.query_id
            )));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<RankingRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records_from(BufReader::new(file))
}

/// Parses a candidate list: one `pid<TAB>tokens` line per candidate, tokens
/// whitespace-separated (`t17` or `17`). Blank lines and `#` comments are skipped.
pub fn parse_candidates(text: &str, vocab: &Vocab) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse { line: idx + 1, message };
        let (pid, body) = line
            .split_once('\t')
            .ok_or_else(|| err("expected pid<TAB>tokens".into()))?;
        let tokens = vocab.tokenize(body).map_err(|e| err(e.to_string()))?;
        out.push(Candidate {
            pid: pid.to_string(),
            tokens,
        });
    }
    Ok(out)
}

/// Parses `key=value` lines, skipping blanks and `#` comments. Duplicate keys are rejected.
pub(crate) fn parse_key_values(text: &str, err: impl Fn(usize, String) -> Error) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(idx + 1, format!("expected key=value, got {line:?}")))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.iter().any(|(existing, _)| *existing == k) {
            return Err(err(idx + 1, format!("duplicate key {k:?}")));
        }
        out.push((k, v));
    }
    Ok(out)
}
