//! Training objectives: reciprocal-rank targets, temperature ListNet and the
//! orthogonality penalty over per-view anchors.

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, softmax, Graph, Tensor, Var, NORM_EPS};
use crate::scalar::Scalar;

/// Default ListNet temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.8;

/// Ground-truth ranks of one candidate list (1 = most relevant).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankLabels {
    ranks: Vec<usize>,
}

impl RankLabels {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        validate_ranks(&ranks)?;
        Ok(Self { ranks })
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn targets<T: Scalar>(&self) -> Vec<T> {
        self.ranks.iter().map(|&r| T::one() / T::of_usize(r)).collect()
    }
}

pub(crate) fn validate_ranks(ranks: &[usize]) -> Result<()> {
    let n = ranks.len();
    let mut seen = vec![false; n + 1];
    for &r in ranks {
        if r == 0 || r > n {
            return Err(Error::Label(format!("rank {r} outside 1..={n}")));
        }
        if std::mem::replace(&mut seen[r], true) {
            return Err(Error::Label(format!("rank {r} repeated")));
        }
    }
    Ok(())
}

/// `y_i = 1 / r_i`.
pub fn reciprocal_targets<T: Scalar>(ranks: &[usize]) -> Result<Vec<T>> {
    Ok(RankLabels::new(ranks.to_vec())?.targets())
}

/// Shannon entropy (natural log) of a probability vector.
pub fn entropy<T: Scalar>(p: &[T]) -> T {
    p.iter().filter(|&&v| v > T::zero()).map(|&v| -v * v.ln()).sum()
}

/// ListNet cross-entropy `−Σ P(y_i) log P(s_i)` with both distributions
/// taken at temperature `temperature`. Returns the loss and `∂L/∂s`.
pub fn listnet_loss<T: Scalar>(targets: &[T], scores: &[T], temperature: T) -> Result<(T, Vec<T>)> {
    if targets.len() != scores.len() {
        return Err(Error::Dimension(format!(
            "{} targets for {} scores",
            targets.len(),
            scores.len()
        )));
    }
    let p_y = softmax(targets, temperature)?;
    let p_s = softmax(scores, temperature)?;
    // log P(s_i) = s_i/τ − logsumexp(s/τ), evaluated with the max shift.
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let log_z = scores.iter().map(|&s| ((s - max) / temperature).exp()).sum::<T>().ln();
    let loss = -p_y
        .iter()
        .zip(scores)
        .map(|(&py, &s)| py * ((s - max) / temperature - log_z))
        .sum::<T>();
    let grad = p_s.iter().zip(&p_y).map(|(&ps, &py)| (ps - py) / temperature).collect();
    Ok((loss, grad))
}

/// Sum over ordered pairs `k ≠ l` of squared anchor cosines. Returns the loss
/// and its gradient with respect to the `[m × d]` anchor matrix.
pub fn orthogonal_loss<T: Scalar>(anchors: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let (m, d) = (anchors.rows(), anchors.cols());
    if m == 0 {
        return Err(Error::Dimension("orthogonal loss over zero anchors".into()));
    }
    let norms: Vec<T> = (0..m).map(|k| l2_norm(anchors.row(k))).collect();
    if let Some(k) = norms.iter().position(|&n| !(n > T::of(NORM_EPS))) {
        return Err(Error::DegenerateVector(format!("anchor {k} has norm {}", norms[k])));
    }
    let mut cos = vec![T::zero(); m * m];
    for k in 0..m {
        for l in 0..m {
            if k != l {
                cos[k * m + l] = dot(anchors.row(k), anchors.row(l)) / (norms[k] * norms[l]);
            }
        }
    }
    let loss = cos.iter().map(|&c| c * c).sum::<T>();
    let four = T::of(4.0);
    let mut grad = vec![T::zero(); m * d];
    for k in 0..m {
        let ak = anchors.row(k);
        for l in 0..m {
            if l == k {
                continue;
            }
            let c = cos[k * m + l];
            let al = anchors.row(l);
            let inv = T::one() / (norms[k] * norms[l]);
            let self_term = c / (norms[k] * norms[k]);
            for j in 0..d {
                grad[k * d + j] = grad[k * d + j] + four * c * (al[j] * inv - self_term * ak[j]);
            }
        }
    }
    Ok((loss, Tensor::new(vec![m, d], grad)?))
}

/// ListNet over a `[n × 1]` (or `[1 × n]`) score node.
pub fn listnet_node<T: Scalar>(g: &mut Graph<T>, scores: Var, targets: &[T], temperature: T) -> Result<Var> {
    let s = g.value(scores).data().to_vec();
    let (loss, grad) = listnet_loss(targets, &s, temperature)?;
    let shape = g.value(scores).shape().to_vec();
    g.fused_scalar(scores, loss, Tensor::new(shape, grad)?)
}

/// Orthogonality penalty over an `[m × d]` anchor node.
pub fn orthogonal_node<T: Scalar>(g: &mut Graph<T>, anchors: Var) -> Result<Var> {
    let (loss, grad) = orthogonal_loss(g.value(anchors))?;
    g.fused_scalar(anchors, loss, grad)
}

/// Ranking and orthogonality components of the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue<T> {
    pub rank_loss: T,
    pub orthogonal_loss: T,
    pub total: T,
}

impl<T: Scalar> LossValue<T> {
    /// `total = rank_loss + weight · orthogonal_loss`; `weight` is 1 outside ablations.
    pub fn combine(rank_loss: T, orthogonal_loss: T, weight: T) -> Result<Self> {
        for (name, v) in [("rank_loss", rank_loss), ("orthogonal_loss", orthogonal_loss)] {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step: 0,
                    component: name.into(),
                });
            }
        }
        Ok(Self {
            rank_loss,
            orthogonal_loss,
            total: rank_loss + weight * orthogonal_loss,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::rng::SplitMix64;

    /// Direct evaluation of the defining sums, independent of the fused kernels.
    fn listnet_oracle(y: &[f64], s: &[f64], t: f64) -> f64 {
        let zy: f64 = y.iter().map(|v| (v / t).exp()).sum();
        let zs: f64 = s.iter().map(|v| (v / t).exp()).sum();
        -y.iter()
            .zip(s)
            .map(|(a, b)| ((a / t).exp() / zy) * ((b / t).exp() / zs).ln())
            .sum::<f64>()
    }

    #[test]
    fn reciprocal_examples() {
        assert_eq!(reciprocal_targets::<f64>(&[1]).unwrap(), vec![1.0]);
        assert_eq!(
            reciprocal_targets::<f64>(&[1, 2, 3]).unwrap(),
            vec![1.0, 0.5, 1.0 / 3.0]
        );
        assert_eq!(
            reciprocal_targets::<f64>(&[3, 1, 2]).unwrap(),
            vec![1.0 / 3.0, 1.0, 0.5]
        );
    }

    #[test]
    fn bad_ranks_rejected() {
        assert!(matches!(reciprocal_targets::<f64>(&[1, 1]), Err(Error::Label(_))));
        assert!(matches!(reciprocal_targets::<f64>(&[0, 1]), Err(Error::Label(_))));
        assert!(matches!(reciprocal_targets::<f64>(&[1, 3]), Err(Error::Label(_))));
    }

    #[test]
    fn single_candidate_has_zero_loss() {
        let (l, g) = listnet_loss(&[1.0], &[4.2], 0.8).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn loss_at_matching_scores_is_target_entropy() {
        let y = reciprocal_targets::<f64>(&[2, 1, 4, 3]).unwrap();
        let (l, _) = listnet_loss(&y, &y, 0.8).unwrap();
        let h = entropy(&softmax(&y, 0.8).unwrap());
        assert!((l - h).abs() < 1e-12);
    }

    #[test]
    fn uniform_scores_three_candidates() {
        // With s = 0 the predicted distribution is uniform, so the loss is ln 3
        // regardless of targets; the oracle evaluates the sum directly.
        let y = reciprocal_targets::<f64>(&[1, 2, 3]).unwrap();
        let expected = listnet_oracle(&y, &[0.0, 0.0, 0.0], 0.8);
        assert!((expected - 3f64.ln()).abs() < 1e-15);
        assert!((expected - 1.098_612_288_668_109_8).abs() < 1e-15);
        let (l, _) = listnet_loss(&y, &[0.0, 0.0, 0.0], 0.8).unwrap();
        assert!((l - 1.098_612_288_668_109_8).abs() < 1e-14);
    }

    #[test]
    fn listnet_matches_oracle_on_random_lists() {
        let mut rng = SplitMix64::new(4);
        for _ in 0..50 {
            let n = 1 + rng.below(9);
            let mut ranks: Vec<usize> = (1..=n).collect();
            rng.shuffle(&mut ranks);
            let y = reciprocal_targets::<f64>(&ranks).unwrap();
            let s: Vec<f64> = (0..n).map(|_| rng.normal() * 2.0).collect();
            let (l, _) = listnet_loss(&y, &s, 0.8).unwrap();
            assert!((l - listnet_oracle(&y, &s, 0.8)).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_temperature_rejected() {
        assert!(matches!(listnet_loss(&[1.0], &[1.0], 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn listnet_gradient_check() {
        let mut rng = SplitMix64::new(2);
        let y = reciprocal_targets::<f64>(&[3, 1, 5, 2, 4]).unwrap();
        let s = Tensor::column(&(0..5).map(|_| rng.normal()).collect::<Vec<_>>());
        let err = grad_check(|g, v| listnet_node(g, v, &y, 0.8), &s, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn orthogonal_examples() {
        let one = Tensor::<f64>::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(orthogonal_loss(&one).unwrap().0, 0.0);
        let ortho = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(orthogonal_loss(&ortho).unwrap().0, 0.0);
        let same = Tensor::<f64>::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!((orthogonal_loss(&same).unwrap().0 - 2.0).abs() < 1e-15);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let three = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![h, h]]).unwrap();
        assert!((orthogonal_loss(&three).unwrap().0 - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_anchor_is_degenerate() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(orthogonal_loss(&a), Err(Error::DegenerateVector(_))));
    }

    #[test]
    fn orthogonal_gradient_check() {
        let mut rng = SplitMix64::new(17);
        let a = Tensor::new(vec![4, 6], (0..24).map(|_| rng.normal()).collect()).unwrap();
        let err = grad_check(orthogonal_node, &a, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn orthogonal_anchors_leave_total_equal_to_rank_loss() {
        let ortho = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, -3.0]]).unwrap();
        let (o, _) = orthogonal_loss(&ortho).unwrap();
        let v = LossValue::combine(0.75, o, 1.0).unwrap();
        assert_eq!(v.total, 0.75);
    }

    #[test]
    fn composed_total_from_oracle_constants() {
        let y = reciprocal_targets::<f64>(&[1, 2, 3]).unwrap();
        let (r, _) = listnet_loss(&y, &[0.0, 0.0, 0.0], 0.8).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let three = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![h, h]]).unwrap();
        let (o, _) = orthogonal_loss(&three).unwrap();
        let v: LossValue<f64> = LossValue::combine(r, o, 1.0).unwrap();
        assert!((v.total - (1.098_612_288_668_109_8 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_component_is_named() {
        let err = LossValue::combine(f64::NAN, 0.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("rank_loss"));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn ranks_and_scores() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
        (1usize..10).prop_flat_map(|n| {
            (
                Just((1..=n).collect::<Vec<_>>()).prop_shuffle(),
                proptest::collection::vec(-5.0f64..5.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn listnet_shift_invariant((ranks, s) in ranks_and_scores(), c in -50.0f64..50.0) {
            let y = reciprocal_targets::<f64>(&ranks).unwrap();
            let (a, _) = listnet_loss(&y, &s, 0.8).unwrap();
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            let (b, _) = listnet_loss(&y, &shifted, 0.8).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn listnet_bounded_below_by_target_entropy((ranks, s) in ranks_and_scores()) {
            let y = reciprocal_targets::<f64>(&ranks).unwrap();
            let (l, _) = listnet_loss(&y, &s, 0.8).unwrap();
            let h = entropy(&softmax(&y, 0.8).unwrap());
            prop_assert!(l >= h - 1e-12);
        }

        #[test]
        fn orthogonal_symmetric_and_scale_free(
            rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 2..5),
            scale in 0.1f64..10.0,
        ) {
            prop_assume!(rows.iter().all(|r| l2_norm(r) > 1e-3));
            let a = Tensor::from_rows(&rows).unwrap();
            let (base, _) = orthogonal_loss(&a).unwrap();
            let mut rev = rows.clone();
            rev.reverse();
            let (r, _) = orthogonal_loss(&Tensor::from_rows(&rev).unwrap()).unwrap();
            prop_assert!((base - r).abs() < 1e-10);
            let mut scaled = rows.clone();
            for v in scaled[0].iter_mut() { *v *= scale; }
            let (s, _) = orthogonal_loss(&Tensor::from_rows(&scaled).unwrap()).unwrap();
            prop_assert!((base - s).abs() < 1e-10);
        }
    }
}
