use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    /// Absent when every difference is the same, where the statistic is
    /// unbounded.
    pub t: Option<f64>,
    /// One-sided p-value for `mean(a - b) > 0`.
    pub p_value: f64,
}

/// Paired one-sided t-test of `a > b`.
pub fn paired_one_sided(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Usage("a paired test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        let p_value = if mean > 0.0 { 0.0 } else { 1.0 };
        return Ok(PairedTest {
            n,
            mean_diff: mean,
            t: None,
            p_value,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(PairedTest {
        n,
        mean_diff: mean,
        t: Some(t),
        p_value: 1.0 - dist.cdf(t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        // diffs (1, 2, 3, 4): mean 2.5, sd 1.2910, t = 3.8730, df 3
        let t = paired_one_sided(&[2.0, 4.0, 6.0, 8.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((t.t.unwrap() - 3.872983346207417).abs() < 1e-12);
        assert!((t.p_value - 0.015229).abs() < 1e-5, "{}", t.p_value);
        let rev = paired_one_sided(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0]).unwrap();
        assert!((rev.p_value - (1.0 - t.p_value)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(paired_one_sided(&[1.0, 1.0], &[1.0, 1.0]).unwrap().p_value, 1.0);
        let same = paired_one_sided(&[2.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!((same.p_value, same.t), (0.0, None));
        assert!(paired_one_sided(&[1.0], &[1.0]).is_err());
        assert!(paired_one_sided(&[1.0, 2.0], &[1.0]).is_err());
    }
}
