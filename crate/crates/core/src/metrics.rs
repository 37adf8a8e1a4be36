//! Ranking-quality measures: DCG / nDCG at a cutoff and Kendall's tau.
//!
//! Gains are exponential (`2^rel − 1`) with a `log2(position + 1)` discount.
//! Rankings are lists of candidate indices, best first.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn gain<T: Scalar>(rel: T) -> T {
    T::of(2.0).powf(rel) - T::one()
}

fn discount<T: Scalar>(position: usize) -> T {
    // position is 0-based: log2(j + 1) with j = position + 1.
    T::of_usize(position + 2).log2()
}

/// DCG over the first `min(k, n)` entries of `ranking`.
pub fn dcg_at_k<T: Scalar>(ranking: &[usize], relevance: &[T], k: usize) -> Result<T> {
    let mut total = T::zero();
    for (pos, &idx) in ranking.iter().take(k).enumerate() {
        let rel = *relevance
            .get(idx)
            .ok_or_else(|| Error::Index(format!("ranked index {idx} with {} judgments", relevance.len())))?;
        total = total + gain(rel) / discount::<T>(pos);
    }
    Ok(total)
}

/// Candidate indices ordered by descending relevance, ties by ascending index.
pub fn ideal_ranking<T: Scalar>(relevance: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..relevance.len()).collect();
    order.sort_by(|&a, &b| {
        relevance[b]
            .partial_cmp(&relevance[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// `dcg / ideal dcg`; undefined (an error) when no judgment is positive.
pub fn ndcg_at_k<T: Scalar>(ranking: &[usize], relevance: &[T], k: usize) -> Result<T> {
    if k == 0 {
        return Err(Error::Parameter("cutoff k must be at least 1".into()));
    }
    if !relevance.iter().any(|&r| r > T::zero()) {
        return Err(Error::UndefinedMetric("no positive relevance judgment".into()));
    }
    let ideal = dcg_at_k(&ideal_ranking(relevance), relevance, k)?;
    let actual = dcg_at_k(ranking, relevance, k)?;
    Ok((actual / ideal).min(T::one()))
}

/// Kendall's tau between two orderings of the same item set.
pub fn kendall_tau(rank_a: &[usize], rank_b: &[usize]) -> Result<f64> {
    let pos_a = positions(rank_a)?;
    let pos_b = positions(rank_b)?;
    if pos_a.len() != pos_b.len() || pos_a.keys_differ(&pos_b) {
        return Err(Error::Index("rankings are over different item sets".into()));
    }
    let items = rank_a;
    let n = items.len();
    if n < 2 {
        return Ok(1.0);
    }
    let (mut concordant, mut discordant) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let (x, y) = (items[i], items[j]);
            // x precedes y in rank_a by construction.
            if pos_b.get(x) < pos_b.get(y) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    Ok((concordant - discordant) as f64 / (concordant + discordant) as f64)
}

struct Positions {
    slots: Vec<Option<usize>>,
    count: usize,
}

impl Positions {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, item: usize) -> usize {
        self.slots[item].expect("item present")
    }

    fn keys_differ(&self, other: &Positions) -> bool {
        let longest = self.slots.len().max(other.slots.len());
        (0..longest)
            .any(|i| self.slots.get(i).copied().flatten().is_some() != other.slots.get(i).copied().flatten().is_some())
    }
}

fn positions(ranking: &[usize]) -> Result<Positions> {
    let size = ranking.iter().max().map_or(0, |m| m + 1);
    let mut slots = vec![None; size];
    for (pos, &item) in ranking.iter().enumerate() {
        if slots[item].replace(pos).is_some() {
            return Err(Error::Index(format!("item {item} appears twice")));
        }
    }
    Ok(Positions {
        slots,
        count: ranking.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dcg_examples() {
        assert_eq!(dcg_at_k(&[0], &[1.0], 1).unwrap(), 1.0);
        let d: f64 = dcg_at_k(&[0, 1], &[0.0, 1.0], 2).unwrap();
        assert!((d - 0.630_929_753_571_457_5).abs() < 1e-12);
        assert_eq!(dcg_at_k(&[0, 1, 2], &[0.0, 0.0, 0.0], 3).unwrap(), 0.0);
    }

    #[test]
    fn ndcg_examples() {
        let rel = [2.0f64, 1.0, 0.0];
        assert_eq!(ndcg_at_k(&[0, 1, 2], &rel, 3).unwrap(), 1.0);
        let rev = ndcg_at_k(&[2, 1, 0], &rel, 3).unwrap();
        // (1/log2 3 + 3/2) / (3 + 1/log2 3)
        assert!((rev - 0.586_882_671_435_72).abs() < 1e-12);
        assert_eq!(
            ndcg_at_k(&[2, 0, 1], &rel, 10).unwrap(),
            ndcg_at_k(&[2, 0, 1], &rel, 3).unwrap()
        );
    }

    #[test]
    fn ndcg_all_zero_is_undefined() {
        assert!(matches!(
            ndcg_at_k(&[0, 1], &[0.0, 0.0], 2),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall_tau(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[0, 1, 2, 3], &[3, 2, 1, 0]).unwrap(), -1.0);
        assert!((kendall_tau(&[1, 2, 3], &[1, 3, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn kendall_mismatched_sets() {
        assert!(kendall_tau(&[0, 1, 2], &[0, 1, 3]).is_err());
        assert!(kendall_tau(&[0, 1], &[0, 1, 2]).is_err());
        assert!(kendall_tau(&[0, 0], &[0, 1]).is_err());
    }
}
