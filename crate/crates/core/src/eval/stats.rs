use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// One-sided p-value of `mean(diffs) > 0`.
    pub p: f64,
    pub mean: f64,
    pub variance: f64,
    pub runs: usize,
}

impl TTest {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p < alpha
    }
}

/// Corrected resampled paired t-test: `t = mean / √(var·(1/J + n_test/n_train))`
/// with the sample variance over `J` runs and `J − 1` degrees of freedom.
///
/// Orient `diffs` so that positive values favour the method under test
/// (baseline error minus candidate error, or candidate accuracy minus
/// baseline accuracy).
pub fn corrected_ttest(diffs: &[f64], n_train: usize, n_test: usize) -> Result<TTest> {
    let j = diffs.len();
    if j < 2 {
        return Err(Error::invalid(format!("the t-test needs at least 2 paired runs, got {j}")));
    }
    if n_train == 0 {
        return Err(Error::invalid("n_train must be positive"));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired differences".into()));
    }
    let mean = diffs.iter().sum::<f64>() / j as f64;
    let variance = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (j - 1) as f64;
    let correction = 1.0 / j as f64 + n_test as f64 / n_train as f64;
    let (t, p) = if variance == 0.0 {
        match mean.partial_cmp(&0.0).expect("finite") {
            std::cmp::Ordering::Greater => (f64::INFINITY, 0.0),
            std::cmp::Ordering::Less => (f64::NEG_INFINITY, 1.0),
            std::cmp::Ordering::Equal => (0.0, 0.5),
        }
    } else {
        let t = mean / (variance * correction).sqrt();
        let dist = StudentsT::new(0.0, 1.0, (j - 1) as f64).map_err(|e| Error::invalid(e.to_string()))?;
        (t, dist.sf(t))
    };
    Ok(TTest {
        t,
        p,
        mean,
        variance,
        runs: j,
    })
}
