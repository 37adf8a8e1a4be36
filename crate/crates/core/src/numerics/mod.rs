//! Dense tensors, a reverse-mode tape and the scalar kernels built on them.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{checked_mode, dot, set_checked_mode, Tensor};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norm below which a vector counts as degenerate.
pub const NORM_EPS: f64 = 1e-12;

/// Variance floor inside [`layer_norm`] and the model's normalization layers.
pub const LAYER_NORM_EPS: f64 = 1e-9;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.matmul(b)
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax<T: Scalar>(v: &[T], temperature: T) -> Result<Vec<T>> {
    if !(temperature > T::zero()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if v.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    let mut out = vec![T::zero(); v.len()];
    graph::softmax_into(v, temperature, &mut out);
    Ok(out)
}

/// Centered RMS normalization of each row of `x`, scaled by `gain`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(gain.clone());
    let out = g.norm(xv, gv, T::of(LAYER_NORM_EPS))?;
    let mut t = g.value(out).clone();
    if x.shape().len() != 2 {
        t = t.reshape(x.shape().to_vec())?;
    }
    Ok(t)
}

pub fn l2_norm<T: Scalar>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (nx, ny) = (l2_norm(x), l2_norm(y));
    let eps = T::of(NORM_EPS);
    if !(nx > eps) || !(ny > eps) {
        return Err(Error::DegenerateVector(format!(
            "norms {nx} and {ny} must exceed {NORM_EPS:e}"
        )));
    }
    let c = dot(x, y) / (nx * ny);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Largest relative disagreement between the tape gradient of `f` at `theta`
/// and central finite differences with step `h`.
///
/// The per-coordinate error is `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<T, F>(f: F, theta: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    grad_check_many(
        |g: &mut Graph<T>, vars: &[Var]| f(g, vars[0]),
        std::slice::from_ref(theta),
        h,
    )
}

/// [`grad_check`] over several parameter tensors at once.
pub fn grad_check_many<T, F>(f: F, params: &[Tensor<T>], h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(h >= T::of(1e-6) && h <= T::of(1e-4)) {
        return Err(Error::Parameter(format!("step {h} outside [1e-6, 1e-4]")));
    }
    let analytic: Vec<Tensor<T>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("non-finite loss {v}")));
        }
        let mut grads = g.backward(out)?;
        vars.iter()
            .zip(params)
            .map(|(&var, t)| grads.take(var).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    };
    let value_at = |values: &[Tensor<T>]| -> Result<T> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("non-finite loss {v}")));
        }
        Ok(v)
    };

    let floor = T::of(1e-12);
    let two_h = h + h;
    let mut worst = T::zero();
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = value_at(&work)?;
            work[p].data_mut()[i] = orig - h;
            let down = value_at(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (up - down) / two_h;
            let a = grad.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn softmax_symmetric_pair() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariant() {
        let v = [0.3, -1.2, 2.5, 0.0];
        let base = softmax(&v, 0.8).unwrap();
        for c in [-100.0, -1.0, 3.5, 1e3] {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let s = softmax(&shifted, 0.8).unwrap();
            for (a, b) in base.iter().zip(&s) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_reciprocal_targets_at_training_temperature() {
        // exp(y/0.8) for y = 1, 1/2, 1/3, normalized; evaluated by hand with libm.
        let e: Vec<f64> = [1.0f64, 0.5, 1.0 / 3.0].iter().map(|y| (y / 0.8).exp()).collect();
        let z: f64 = e.iter().sum();
        let expected = [e[0] / z, e[1] / z, e[2] / z];
        assert!((expected[0] - 0.507_650_383_409_915_2).abs() < 1e-12);
        assert!((expected[1] - 0.271_725_669_412_204_3).abs() < 1e-12);
        assert!((expected[2] - 0.220_623_947_177_880_5).abs() < 1e-12);
        let got = softmax(&[1.0, 0.5, 1.0 / 3.0], 0.8).unwrap();
        for (g, x) in got.iter().zip(expected) {
            assert!((g - x).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax(&[1.0], -2.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_f32() {
        let p = softmax(&[1.0f32, 2.0, 3.0], 1.0).unwrap();
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::<f64>::from_rows(&[vec![3.0, 3.0, 3.0]]).unwrap();
        let gain = Tensor::row_vector(&[2.0, 2.0, 2.0]);
        let y = layer_norm(&x, &gain).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_unit_rms_row() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y = layer_norm(&x, &Tensor::row_vector(&[1.0, 1.0])).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-8);
        assert!((y.data()[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn layer_norm_zero_width_rejected() {
        let x = Tensor::<f64>::zeros(vec![2, 0]);
        let g = Tensor::<f64>::zeros(vec![1, 0]);
        assert!(matches!(layer_norm(&x, &g), Err(Error::Dimension(_))));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let x = [0.3f64, -2.0, 5.0];
        assert!((cosine_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn grad_check_square() {
        let theta = Tensor::scalar(3.0);
        let err = grad_check(|g, x| g.mul(x, x), &theta, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_rejects_step_out_of_range() {
        let theta = Tensor::scalar(3.0);
        assert!(grad_check(|g, x| g.mul(x, x), &theta, 1e-2).is_err());
    }

    #[test]
    fn grad_check_reports_non_finite_loss() {
        let theta = Tensor::scalar(1.0);
        let res = grad_check(
            |g, x| {
                let big = g.scale(x, 1e308);
                let sq = g.mul(big, big)?;
                Ok(g.sum(sq))
            },
            &theta,
            1e-5,
        );
        assert!(matches!(res, Err(Error::Evaluation(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(11);
        let a = random(&mut rng, vec![3, 4]);
        let b = random(&mut rng, vec![4, 2]);
        let err = grad_check_many(
            |g, v| {
                let c = g.matmul(v[0], v[1])?;
                Ok(g.sum(c))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn every_tape_op_passes_grad_check() {
        let mut rng = SplitMix64::new(5);
        let x = random(&mut rng, vec![3, 4]);
        let w = random(&mut rng, vec![4, 4]);
        let gain = random(&mut rng, vec![1, 4]);
        let table = random(&mut rng, vec![6, 4]);
        let weights = random(&mut rng, vec![3, 4]);
        let err = grad_check_many(
            |g, v| {
                let (x, w, gain, table, weights) = (v[0], v[1], v[2], v[3], v[4]);
                let n = g.norm(x, gain, 1e-9)?;
                let h = g.matmul(n, w)?;
                let h = g.gelu(h);
                let att = g.matmul_nt(h, x)?;
                let att = g.scale(att, 0.5);
                let p = g.softmax_rows(att, 0.8)?;
                let mixed = g.matmul(p, x)?;
                let emb = g.gather_rows(table, &[1, 4, 1])?;
                let s = g.add(mixed, emb)?;
                let s = g.sub(s, x)?;
                let left = g.slice_cols(s, 0, 2)?;
                let right = g.slice_cols(s, 2, 2)?;
                let sw = g.concat_cols(&[right, left])?;
                let top = g.slice_rows(sw, 0, 1)?;
                let rep = g.repeat_rows(top, 2)?;
                let rest = g.slice_rows(sw, 1, 2)?;
                let mx = g.max_elementwise(&[rep, rest])?;
                let all = g.concat_rows(&[mx, top])?;
                let prod = g.mul(all, weights)?;
                Ok(g.mean(prod))
            },
            &[x, w, gain, table, weights],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = SplitMix64::new(21);
        for _ in 0..20 {
            let a = random(&mut rng, vec![4, 4]);
            let b = random(&mut rng, vec![4, 4]);
            let c = random(&mut rng, vec![4, 4]);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) < 1e-10);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = SplitMix64::new(8);
        let x = random(&mut rng, vec![2, 5]);
        let gain = random(&mut rng, vec![1, 5]);
        let mix = random(&mut rng, vec![2, 5]);
        let err = grad_check_many(
            |g, v| {
                let y = g.norm(v[0], v[1], 1e-9)?;
                let m = g.constant(mix.clone());
                let p = g.mul(y, m)?;
                Ok(g.sum(p))
            },
            &[x, gain],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_is_probability_vector(v in proptest::collection::vec(-50.0f64..50.0, 1..20), t in 0.05f64..5.0) {
            let p = softmax(&v, t).unwrap();
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_constant_shift(v in proptest::collection::vec(-20.0f64..20.0, 1..12), c in -100.0f64..100.0) {
            let a = softmax(&v, 1.0).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted, 1.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
