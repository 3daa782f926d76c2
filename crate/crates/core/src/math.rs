//! Scalar/vector numeric primitives shared by every other module: softmax,
//! cosine similarity, Pearson correlation and distance, entropy, KL.
//!
//! All functions are pure, reentrant, and run in f64. Inputs are validated
//! (finite, compatible lengths) and rounding is contained by clamping
//! results into their mathematical range.

use crate::error::{Error, Result};

/// Log clamp used before every `ln` on probabilities.
pub const EPS_LOG: f64 = 1e-12;

/// Variance threshold below which a vector is treated as constant for
/// Pearson purposes.
pub const EPS_VAR: f64 = 1e-24;

/// A strictly positive probability vector summing to 1 (within 1e-12).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    values: Vec<f64>,
}

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("probability vector must be non-empty".into()));
        }
        let mut sum = 0.0;
        for &v in &values {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "probability entries must be finite and > 0, got {v}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "probability vector sums to {sum}, expected 1"
            )));
        }
        Ok(ProbVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

fn check_finite(x: &[f64], what: &str) -> Result<()> {
    if x.is_empty() {
        return Err(Error::InvalidInput(format!("{what} must be non-empty")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Temperature softmax with max-shift stabilization.
pub fn softmax(x: &[f64], temperature: f64) -> Result<ProbVector> {
    check_finite(x, "softmax input")?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidInput(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let exps: Vec<f64> = x.iter().map(|&v| (v / temperature - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector::new(exps.into_iter().map(|e| e / sum).collect())
}

/// Cosine similarity, clamped into [-1, 1] against rounding.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_finite(a, "cosine lhs")?;
    check_finite(b, "cosine rhs")?;
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "cosine length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine of a zero-norm vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation coefficient between two equal-length vectors.
///
/// Returns 0 when either side has (near-)zero variance: a constant vector
/// carries no ranking signal and a neutral value avoids NaN propagation.
pub fn pearson_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    check_finite(a, "pearson lhs")?;
    check_finite(b, "pearson rhs")?;
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "pearson length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidInput("pearson needs at least 2 entries".into()));
    }
    let mean_a = a.iter().sum::<f64>() / n as f64;
    let mean_b = b.iter().sum::<f64>() / n as f64;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va / n as f64 < EPS_VAR || vb / n as f64 < EPS_VAR {
        return Ok(0.0);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson distance `1 - rho`, in [0, 2].
pub fn pearson_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - pearson_rho(a, b)?)
}

/// Cross entropy `-sum target_k ln pred_k`, with predictions clamped to
/// [`EPS_LOG`] before the log.
pub fn cross_entropy(target: &ProbVector, pred: &ProbVector) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::InvalidInput(format!(
            "cross entropy length mismatch: {} vs {}",
            target.len(),
            pred.len()
        )));
    }
    Ok(target
        .values()
        .iter()
        .zip(pred.values().iter())
        .map(|(&t, &p)| -t * p.max(EPS_LOG).ln())
        .sum())
}

/// Shannon entropy in nats.
pub fn entropy(p: &ProbVector) -> f64 {
    p.values().iter().map(|&v| -v * v.max(EPS_LOG).ln()).sum()
}

/// `KL(p || q) = CE(p, q) - H(p)`, non-negative by Gibbs.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    Ok(cross_entropy(p, q)? - entropy(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p.values(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_log_ratio() {
        let x = [1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()];
        let p = softmax(&x, 1.0).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (got, want) in p.values().iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_no_overflow_on_large_inputs() {
        let p = softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert!(p.values()[0] > 1.0 - 1e-12);
        assert!(p.values()[1] < 1e-12 + 1e-300);
        assert!(p.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(softmax(&[0.0], 0.0).is_err());
        assert!(softmax(&[0.0], -1.0).is_err());
        assert!(softmax(&[], 1.0).is_err());
    }

    #[test]
    fn cosine_fixtures() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn pearson_fixtures() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(pearson_rho(&a, &a).unwrap(), 1.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(pearson_rho(&a, &neg).unwrap(), -1.0);
        // rho((1,2,3), (1,2,4)) = 9 / (2 sqrt(21))
        let rho = pearson_rho(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        let expect = 9.0 / (2.0 * 21.0f64.sqrt());
        assert!((rho - expect).abs() < 1e-14, "{rho} vs {expect}");
        let d = pearson_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((d - (1.0 - expect)).abs() < 1e-14);
        assert_eq!(pearson_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(pearson_distance(&a, &neg).unwrap(), 2.0);
    }

    #[test]
    fn pearson_constant_vector_is_neutral() {
        assert_eq!(pearson_rho(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(pearson_distance(&[5.0, 5.0], &[1.0, 7.0]).unwrap(), 1.0);
    }

    #[test]
    fn pearson_rejects_short_input() {
        assert!(pearson_rho(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn cross_entropy_fixtures() {
        let u3 = ProbVector::new(vec![1.0 / 3.0; 3]).unwrap();
        let ce = cross_entropy(&u3, &u3).unwrap();
        assert!((ce - 3.0f64.ln()).abs() < 1e-12);

        // One-hot-ish target against (.5, .25, .25): -ln 0.5 = ln 2. The
        // target must remain strictly positive, so put nearly all mass on
        // the first entry and check against the analytic limit.
        let onehot = ProbVector::new(vec![1.0 - 2e-13, 1e-13, 1e-13]).unwrap();
        let pred = ProbVector::new(vec![0.5, 0.25, 0.25]).unwrap();
        let ce = cross_entropy(&onehot, &pred).unwrap();
        assert!((ce - 2.0f64.ln()).abs() < 1e-11, "{ce}");

        let p = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!((cross_entropy(&p, &p).unwrap() - entropy(&p)).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_length_mismatch() {
        let p = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let q = ProbVector::new(vec![1.0 / 3.0; 3]).unwrap();
        assert!(cross_entropy(&p, &q).is_err());
    }

    fn random_prob(rng: &mut ChaCha8Rng, n: usize) -> ProbVector {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        ProbVector::new(raw.into_iter().map(|v| v / s).collect()).unwrap()
    }

    #[test]
    fn kl_nonnegative_and_zero_iff_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = random_prob(&mut rng, 5);
            let q = random_prob(&mut rng, 5);
            let kl = kl_divergence(&p, &q).unwrap();
            assert!(kl >= -1e-12);
            assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(
            xs in prop::collection::vec(-50.0f64..50.0, 1..8),
            c in -30.0f64..30.0,
            t in 0.1f64..5.0,
        ) {
            let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
            let p = softmax(&xs, t).unwrap();
            let q = softmax(&shifted, t).unwrap();
            for (a, b) in p.values().iter().zip(q.values().iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_sums_to_one_at_large_magnitude(
            xs in prop::collection::vec(-1e4f64..1e4, 1..16),
        ) {
            let p = softmax(&xs, 1.0).unwrap();
            let sum: f64 = p.values().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pearson_distance_affine_invariance(
            pair in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..12),
            alpha in 0.01f64..20.0,
            beta in -50.0f64..50.0,
        ) {
            let a: Vec<f64> = pair.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pair.iter().map(|p| p.1).collect();
            let var = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
            };
            prop_assume!(var(&a) > 1e-6 && var(&b) > 1e-6);
            let scaled: Vec<f64> = a.iter().map(|v| alpha * v + beta).collect();
            let d0 = pearson_distance(&a, &b).unwrap();
            let d1 = pearson_distance(&scaled, &b).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-10, "{} vs {}", d0, d1);
        }

        #[test]
        fn pearson_distance_range(
            pair in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..12),
        ) {
            let a: Vec<f64> = pair.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pair.iter().map(|p| p.1).collect();
            let d = pearson_distance(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&d));
        }
    }
}
