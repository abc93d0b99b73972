//! Forecast error metrics.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Element-wise mean squared and absolute error over equal-length buffers.
pub fn metric_mse_mae(pred: &[f64], target: &[f64]) -> Result<Metrics> {
    if pred.len() != target.len() {
        return Err(Error::Shape {
            op: "metric_mse_mae",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::data("no values to score"));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    let n = pred.len() as f64;
    let m = Metrics {
        mse: se / n,
        mae: ae / n,
    };
    if !m.mse.is_finite() {
        return Err(Error::NonFinite("forecast error".into()));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn examples() {
        let m = metric_mse_mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        let m = metric_mse_mae(&[-1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!((m.mse, m.mae), (1.0, 1.0));
        assert!(metric_mse_mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // [n, M, T] = [5, 3, 7]
        let shape = (5, 3, 7);
        let len = shape.0 * shape.1 * shape.2;
        let p: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (mut se, mut ae) = (0.0, 0.0);
        for i in 0..shape.0 {
            for m in 0..shape.1 {
                for s in 0..shape.2 {
                    let k = (i * shape.1 + m) * shape.2 + s;
                    se += (p[k] - t[k]) * (p[k] - t[k]);
                    ae += (p[k] - t[k]).abs();
                }
            }
        }
        let got = metric_mse_mae(&p, &t).unwrap();
        assert!((got.mse - se / len as f64).abs() < 1e-12);
        assert!((got.mae - ae / len as f64).abs() < 1e-12);
    }
}
