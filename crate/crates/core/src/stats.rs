//! Monte Carlo summaries: means with standard errors, z-scored moment rows,
//! two-sample Kolmogorov-Smirnov, correlations.

use crate::error::{LabError, Result};
use serde::{Deserialize, Serialize};

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(LabError::InsufficientData(format!("{} samples", xs.len())));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// One empirical quantity against its prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub name: String,
    pub empirical: f64,
    pub theoretical: f64,
    pub stderr: f64,
    pub z: f64,
}

impl MomentRow {
    pub fn new(name: impl Into<String>, empirical: f64, theoretical: f64, stderr: f64) -> Self {
        let z = if stderr > 0.0 {
            (empirical - theoretical) / stderr
        } else if (empirical - theoretical).abs() <= 1e-12 * theoretical.abs().max(1.0) {
            0.0
        } else {
            f64::INFINITY
        };
        MomentRow {
            name: name.into(),
            empirical,
            theoretical,
            stderr,
            z,
        }
    }

    /// Row from per-sample values whose mean estimates `theoretical`.
    pub fn from_samples(name: impl Into<String>, xs: &[f64], theoretical: f64) -> Result<Self> {
        let (m, se) = mean_se(xs)?;
        Ok(Self::new(name, m, theoretical, se))
    }

    pub fn within(&self, zmax: f64) -> bool {
        self.z.abs() <= zmax
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    /// Critical value at the 1% level (asymptotic).
    pub critical: f64,
}

impl KsResult {
    pub fn pass(&self) -> bool {
        self.statistic < self.critical
    }
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(LabError::InsufficientData("empty sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(KsResult {
        statistic: d,
        critical: 1.628 * ((n + m) / (n * m)).sqrt(),
    })
}

/// Pearson correlation.
pub fn correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(LabError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 4 {
        return Err(LabError::InsufficientData(format!("{} pairs", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Fisher z-score of an observed correlation `r` from `n` pairs against `rho`.
pub fn fisher_z(r: f64, rho: f64, n: usize) -> f64 {
    (r.atanh() - rho.atanh()) * ((n as f64) - 3.0).sqrt()
}

/// Weighted least-squares line; returns `(slope, intercept, slope stderr)`.
/// With unit weights the stderr comes from the residuals, otherwise from the
/// weights themselves (taken as inverse variances).
pub fn line_fit(x: &[f64], y: &[f64], w: Option<&[f64]>) -> Result<(f64, f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(LabError::InsufficientData(format!("{n} points")));
    }
    let ones = vec![1.0; n];
    let w = w.unwrap_or(&ones);
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(LabError::InsufficientData("all x equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, c), b)| b * (a - mx) * (c - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let se = if w.iter().all(|&v| v == 1.0) {
        if n > 2 {
            let rss: f64 = x
                .iter()
                .zip(y)
                .map(|(a, c)| (c - intercept - slope * a).powi(2))
                .sum();
            (rss / (n as f64 - 2.0) / sxx).sqrt()
        } else {
            0.0
        }
    } else {
        (1.0 / sxx).sqrt()
    };
    Ok((slope, intercept, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn ks_separates_and_accepts() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut r)).collect();
        let b: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut r)).collect();
        let shifted: Vec<f64> = b.iter().map(|x| x + 0.5).collect();
        assert!(ks_two_sample(&a, &b).unwrap().pass());
        assert!(!ks_two_sample(&a, &shifted).unwrap().pass());
        let same = ks_two_sample(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(same.statistic, 0.0);
        let disjoint = ks_two_sample(&[0.0, 1.0], &[5.0, 6.0]).unwrap();
        assert_eq!(disjoint.statistic, 1.0);
    }

    #[test]
    fn line_fit_recovers_exact_slope() {
        let x: Vec<f64> = [250f64, 1000.0, 4000.0].iter().map(|n| n.ln()).collect();
        let y: Vec<f64> = x.iter().map(|l| -0.25 * l + 0.3).collect();
        let (s, b, se) = line_fit(&x, &y, None).unwrap();
        assert!((s + 0.25).abs() < 1e-12 && (b - 0.3).abs() < 1e-12 && se < 1e-12);
    }

    #[test]
    fn correlation_and_fisher() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 4.0, 6.0, 8.0, 10.5];
        assert!(correlation(&x, &y).unwrap() > 0.99);
        assert_eq!(fisher_z(0.3, 0.3, 100), 0.0);
        assert!(fisher_z(0.5, 0.0, 103) > 5.0);
    }

    #[test]
    fn moment_rows() {
        let row = MomentRow::from_samples("mean", &[1.0, 3.0], 2.0).unwrap();
        assert_eq!(row.z, 0.0);
        assert!(mean_se(&[1.0]).is_err());
    }
}
