//! Forecast quality metrics: root relative squared error and the empirical
//! correlation coefficient, the two scores used throughout the evaluation
//! protocol this crate reproduces.
//!
//! Both operate on an M×N matrix of predictions against same-shape truth
//! (M test samples, N variables), passed as flat row-major slices.

use crate::error::{Error, Result};

/// Evaluation summary for one split.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalResult {
    pub rse: f64,
    pub corr: f64,
    pub n_samples: usize,
    /// Variables excluded from CORR because prediction or truth had zero
    /// variance over the split (Pearson is 0/0 there).
    pub skipped_variables: usize,
}

fn check_shapes(pred: &[f64], truth: &[f64], n_vars: usize, op: &'static str) -> Result<usize> {
    if n_vars == 0 || pred.len() != truth.len() || pred.len() % n_vars != 0 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![pred.len()],
            rhs: vec![truth.len(), n_vars],
        });
    }
    Ok(pred.len() / n_vars)
}

/// Root relative squared error: `sqrt(Σ(x̂−x)²) / sqrt(Σ(x−mean(x))²)` with
/// the mean taken over all M·N entries of the truth matrix.
pub fn rse(pred: &[f64], truth: &[f64], n_vars: usize) -> Result<f64> {
    check_shapes(pred, truth, n_vars, "rse")?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let num: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    let den: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if den == 0.0 {
        return Err(Error::Metrics(
            "rse denominator is zero: truth is globally constant".into(),
        ));
    }
    Ok((num / den).sqrt())
}

/// Empirical correlation coefficient: per-variable Pearson correlation
/// between prediction and truth columns, averaged over variables. Columns
/// where either series has zero variance are skipped; the count of skipped
/// columns is returned alongside the average.
///
/// (The printed form of this metric drops a square-root grouping in its
/// denominator; this is the standard Pearson reading used across the
/// benchmark lineage.)
pub fn corr(pred: &[f64], truth: &[f64], n_vars: usize) -> Result<(f64, usize)> {
    let m = check_shapes(pred, truth, n_vars, "corr")?;
    let mut total = 0.0;
    let mut used = 0usize;
    for j in 0..n_vars {
        let col = |data: &[f64], i: usize| data[i * n_vars + j];
        let pm = (0..m).map(|i| col(pred, i)).sum::<f64>() / m as f64;
        let tm = (0..m).map(|i| col(truth, i)).sum::<f64>() / m as f64;
        let mut cov = 0.0;
        let mut pv = 0.0;
        let mut tv = 0.0;
        for i in 0..m {
            let dp = col(pred, i) - pm;
            let dt = col(truth, i) - tm;
            cov += dp * dt;
            pv += dp * dp;
            tv += dt * dt;
        }
        if pv == 0.0 || tv == 0.0 {
            continue;
        }
        total += cov / (pv.sqrt() * tv.sqrt());
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metrics(
            "corr undefined: every column was skipped for zero variance".into(),
        ));
    }
    Ok((total / used as f64, n_vars - used))
}

/// Computes both metrics at once.
pub fn evaluate(pred: &[f64], truth: &[f64], n_vars: usize) -> Result<EvalResult> {
    let m = check_shapes(pred, truth, n_vars, "evaluate")?;
    let r = rse(pred, truth, n_vars)?;
    let (c, skipped) = corr(pred, truth, n_vars)?;
    Ok(EvalResult {
        rse: r,
        corr: c,
        n_samples: m,
        skipped_variables: skipped,
    })
}
