use super::tensor::Real;
use crate::error::{Error, Result};

const PROB_CLAMP: f64 = 1e-7;

/// Max-subtracted softmax over a 1-D slice.
pub fn softmax<R: Real>(logits: &[R]) -> Result<Vec<R>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax of an empty vector".into()));
    }
    let max = logits.iter().fold(R::neg_infinity(), |a, b| a.max(*b));
    let exps: Vec<R> = logits.iter().map(|v| (*v - max).exp()).collect();
    let sum: R = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn log_softmax<R: Real>(logits: &[R]) -> Result<Vec<R>> {
    if logits.is_empty() {
        return Err(Error::Empty("log-softmax of an empty vector".into()));
    }
    let max = logits.iter().fold(R::neg_infinity(), |a, b| a.max(*b));
    let lse = logits.iter().map(|v| (*v - max).exp()).sum::<R>().ln() + max;
    Ok(logits.iter().map(|v| *v - lse).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a probability clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// BCE evaluated on a logit, with its derivative w.r.t. that logit.
///
/// Inside the clamp band the derivative is `sigmoid(z) - y`; once the clamp is
/// active the loss is flat and the derivative is zero.
pub fn bce_with_logit(z: f64, y: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let loss = bce_loss(p, y);
    let grad = if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        p - y
    } else {
        0.0
    };
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let p = softmax(&[0.0f32; 4]).unwrap();
        assert!(p.iter().all(|v| (*v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1000.0f32, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-7);
        assert!(p[1] >= 0.0 && p[1] < 1e-30);
    }

    #[test]
    fn softmax_reference_values() {
        // e^{2,1,0,-1} / sum
        let z: f64 = [2.0f64, 1.0, 0.0, -1.0].iter().map(|v| v.exp()).sum();
        let oracle: Vec<f64> = [2.0f64, 1.0, 0.0, -1.0].iter().map(|v| v.exp() / z).collect();
        let p = softmax(&[2.0f32, 1.0, 0.0, -1.0]).unwrap();
        for (a, b) in p.iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        for (a, b) in p.iter().zip([0.6439, 0.2369, 0.0871, 0.0321]) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(softmax::<f32>(&[]).is_err());
    }

    #[test]
    fn bce_reference_values() {
        assert!(bce_loss(1.0 - 1e-7, 1.0) < 1e-6);
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(1e-7, 1.0) - 16.118_095_65).abs() < 1e-6);
        assert!((bce_loss(0.0, 1.0) - 16.118_095_65).abs() < 1e-6);
    }

    #[test]
    fn bce_logit_gradient_matches_finite_difference() {
        for &(z, y) in &[(0.3, 1.0), (-1.2, 0.0), (2.5, 0.0)] {
            let h = 1e-6;
            let fd = (bce_with_logit(z + h, y).0 - bce_with_logit(z - h, y).0) / (2.0 * h);
            assert!((fd - bce_with_logit(z, y).1).abs() < 1e-6);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_probability_vector(logits in prop::collection::vec(-30.0f32..30.0, 1..12)) {
                let p = softmax(&logits).unwrap();
                let sum: f32 = p.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(p.iter().all(|v| *v >= 0.0));
                let argmax = |v: &[f32]| v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best });
                prop_assert_eq!(argmax(&p), argmax(&logits));
            }
        }
    }
}
