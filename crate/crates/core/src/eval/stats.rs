use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::EvalError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    pub r: f64,
    pub t_statistic: f64,
    /// Two-sided, from Student's t with `n − 2` degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

/// Upper tail `P(T > t)` of Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    // df > 0 is guaranteed by every caller
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    if t >= 0.0 {
        dist.sf(t)
    } else {
        dist.cdf(t.abs()).min(1.0)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance (n − 1).
fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<PearsonResult, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(EvalError::TooFewPoints(n));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ConstantInput);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let denom = (1.0 - r * r).sqrt();
    let t_statistic = if denom == 0.0 {
        r.signum() * f64::INFINITY
    } else {
        r * df.sqrt() / denom
    };
    let p_value = (2.0 * student_t_sf(t_statistic.abs(), df)).min(1.0);
    Ok(PearsonResult {
        r,
        t_statistic,
        p_value,
        n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t_statistic: f64,
    pub df: f64,
    /// One-tailed p for H1: mean(a) > mean(b).
    pub p_value: f64,
}

/// Welch's unequal-variance t-test, one-tailed (a greater than b).
pub fn welch_one_tailed(a: &[f64], b: &[f64]) -> Result<WelchResult, EvalError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::TooFewSamples(a.len().min(b.len())));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    let diff = mean(a) - mean(b);
    let se2 = va + vb;
    if se2 == 0.0 {
        // both samples constant: the comparison is decided by the means alone
        let p_value = if diff > 0.0 {
            0.0
        } else if diff < 0.0 {
            1.0
        } else {
            0.5
        };
        let t_statistic = if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
        return Ok(WelchResult {
            t_statistic,
            df: na + nb - 2.0,
            p_value,
        });
    }
    let t_statistic = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    Ok(WelchResult {
        t_statistic,
        df,
        p_value: student_t_sf(t_statistic, df),
    })
}

/// Holm–Bonferroni step-down adjustment; output is in input order.
pub fn holm_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p[i].total_cmp(&p[j]).then(i.cmp(&j)));
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        let adj = ((m - rank) as f64 * p[i]).min(1.0);
        running = running.max(adj);
        out[i] = running;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub welch: WelchResult,
    pub adjusted_p: f64,
}

/// One-tailed Welch tests of `a > b` for each pair, Holm-adjusted over all pairs.
pub fn significance_tests(pairs: &[(&[f64], &[f64])]) -> Result<Vec<SignificanceResult>, EvalError> {
    let welch = pairs
        .iter()
        .map(|(a, b)| welch_one_tailed(a, b))
        .collect::<Result<Vec<_>, _>>()?;
    let raw: Vec<f64> = welch.iter().map(|w| w.p_value).collect();
    Ok(welch
        .into_iter()
        .zip(holm_adjust(&raw))
        .map(|(welch, adjusted_p)| SignificanceResult { welch, adjusted_p })
        .collect())
}
