use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kappa {
    pub kappa: f64,
    /// Large-sample standard error.
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

const Z95: f64 = 1.96;

/// Linearly weighted kappa between two raters over ordered categories
/// `0..k`, with the large-sample variance of the weighted statistic
/// computed from agreement weights `1 − |i−j|/(k−1)`.
pub fn weighted_kappa_linear(a: &[usize], b: &[usize], k: usize) -> Result<Kappa> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("rating lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("kappa needs at least two paired ratings"));
    }
    if k < 2 {
        return Err(Error::invalid("kappa needs at least two categories"));
    }
    if let Some(&bad) = a.iter().chain(b).find(|&&x| x >= k) {
        return Err(Error::invalid(format!("unknown category {bad}")));
    }
    let n = a.len() as f64;
    let mut p = vec![vec![0.0; k]; k];
    for (&i, &j) in a.iter().zip(b) {
        p[i][j] += 1.0 / n;
    }
    let row: Vec<f64> = (0..k).map(|i| p[i].iter().sum()).collect();
    let col: Vec<f64> = (0..k).map(|j| (0..k).map(|i| p[i][j]).sum()).collect();
    let w = |i: usize, j: usize| 1.0 - i.abs_diff(j) as f64 / (k - 1) as f64;

    let mut po = 0.0;
    let mut pe = 0.0;
    for i in 0..k {
        for j in 0..k {
            po += w(i, j) * p[i][j];
            pe += w(i, j) * row[i] * col[j];
        }
    }
    if (1.0 - pe).abs() < 1e-15 {
        // both raters constant on one category: agreement is total or undefined
        let kappa = if (1.0 - po).abs() < 1e-15 { 1.0 } else { f64::NAN };
        return Ok(Kappa { kappa, se: 0.0, ci_low: kappa, ci_high: kappa });
    }
    let kappa = (po - pe) / (1.0 - pe);
    // expected agreement weight for each row / column category
    let wr: Vec<f64> = (0..k).map(|i| (0..k).map(|j| col[j] * w(i, j)).sum()).collect();
    let wc: Vec<f64> = (0..k).map(|j| (0..k).map(|i| row[i] * w(i, j)).sum()).collect();
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            let d = w(i, j) - (wr[i] + wc[j]) * (1.0 - kappa);
            s += p[i][j] * d * d;
        }
    }
    let t = kappa - pe * (1.0 - kappa);
    let var = (s - t * t) / (n * (1.0 - pe) * (1.0 - pe));
    let se = var.max(0.0).sqrt();
    Ok(Kappa { kappa, se, ci_low: kappa - Z95 * se, ci_high: kappa + Z95 * se })
}
