//! Independent oracles shared by the pipeline and acceptance tests.

use std::collections::HashSet;

use mvp_core::encoder::TokenId;
use mvp_core::model::ListScorer;
use mvp_core::rng::SplitMix64;
use mvp_core::Result;

/// Candidate `i` is the one-token passage `[i]`; its score is `relevance[i]`.
pub struct Oracle(pub Vec<f64>);

impl ListScorer for Oracle {
    fn score_list(&self, _q: &[TokenId], candidates: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|c| self.0[c[0]]).collect())
    }
}

pub fn items(n: usize) -> Vec<Vec<TokenId>> {
    (0..n).map(|i| vec![i]).collect()
}

pub fn random_oracle(rng: &mut SplitMix64, n: usize) -> Oracle {
    Oracle(rng.permutation(n).into_iter().map(|v| v as f64).collect())
}

pub fn true_order(o: &Oracle) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..o.0.len()).collect();
    idx.sort_by(|&a, &b| o.0[b].total_cmp(&o.0[a]));
    idx
}

/// Window list of a sliding-window run, enumerated independently of the library.
pub fn enumerate_windows(n: usize, w: usize, s: usize, top_k: usize) -> Vec<(usize, usize)> {
    let w_eff = w.min(n);
    let carry = w - s;
    let passes = if n <= w || carry == 0 {
        1
    } else {
        top_k.max(1).min(n).div_ceil(carry)
    };
    let mut out = Vec::new();
    for p in 0..passes {
        let lo = p * carry;
        if lo >= n {
            break;
        }
        if n - lo <= w_eff {
            out.push((lo, n));
            continue;
        }
        let mut starts = Vec::new();
        let mut k = 0;
        loop {
            let end = n - k * s;
            if end < lo + w {
                starts.push(lo);
                break;
            }
            starts.push(end - w);
            if end - w == lo {
                break;
            }
            k += 1;
        }
        out.extend(starts.into_iter().map(|st| (st, st + w)));
    }
    out
}

/// Brute-force tournament: every place is decided by a full replay from scratch,
/// and a prompt counts once per distinct member set.
pub fn simulate_tournament(o: &Oracle, n: usize, m_t: usize, r: usize, top_k: usize) -> (Vec<usize>, usize) {
    let mut judged: HashSet<Vec<usize>> = HashSet::new();
    let best_of = |members: &[usize], judged: &mut HashSet<Vec<usize>>| -> Vec<usize> {
        let mut key = members.to_vec();
        key.sort();
        judged.insert(key);
        let mut sorted = members.to_vec();
        sorted.sort_by(|&a, &b| o.0[b].total_cmp(&o.0[a]));
        sorted
    };
    let mut pool: Vec<usize> = (0..n).collect();
    let mut winners = Vec::new();
    for _ in 0..top_k.min(n) {
        let mut field = pool.clone();
        while field.len() > m_t {
            let mut next = Vec::new();
            let mut i = 0;
            while i < field.len() {
                let block = &field[i..(i + m_t).min(field.len())];
                if block.len() <= r {
                    next.extend_from_slice(block);
                } else {
                    next.extend_from_slice(&best_of(block, &mut judged)[..r]);
                }
                i += m_t;
            }
            field = next;
        }
        let w = if field.len() == 1 {
            field[0]
        } else {
            best_of(&field, &mut judged)[0]
        };
        winners.push(w);
        pool.retain(|&x| x != w);
    }
    (winners, judged.len())
}
