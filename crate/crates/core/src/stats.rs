//! Evaluation statistics: interquartile mean, cross-model aggregation and
//! the combined robustness/conservativeness metric.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{LiraError, Result};

fn sorted(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.iter().any(|x| x.is_nan()) {
        return Err(LiraError::Stats("NaN in input".into()));
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Ok(v)
}

/// Mean of the middle half: `floor(n / 4)` values are cut from each end.
pub fn iqm(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(LiraError::Stats("IQM of an empty sample".into()));
    }
    let v = sorted(xs)?;
    let cut = v.len() / 4;
    let mid = &v[cut..v.len() - cut];
    Ok(mid.iter().sum::<f64>() / mid.len() as f64)
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Seed-aggregated statistic of per-model scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Scores that survived both exclusion passes.
    pub kept: Vec<f64>,
    pub mean: f64,
    /// Half width of the 95% t-interval.
    pub ci_half_width: f64,
}

impl EvalStats {
    pub fn ci(&self) -> (f64, f64) {
        (self.mean - self.ci_half_width, self.mean + self.ci_half_width)
    }
}

/// Drops the best and the worst model, then the 1.5-IQR outliers of the rest,
/// and reports the mean with a 95% t-interval.
pub fn aggregate_models(scores: &[f64]) -> Result<EvalStats> {
    if scores.len() < 4 {
        return Err(LiraError::Stats(format!("aggregation needs at least 4 models, got {}", scores.len())));
    }
    let v = sorted(scores)?;
    let inner = &v[1..v.len() - 1];
    let q1 = quantile_sorted(inner, 0.25);
    let q3 = quantile_sorted(inner, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let kept: Vec<f64> = inner.iter().copied().filter(|x| (lo..=hi).contains(x)).collect();
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let ci_half_width = if var == 0.0 {
        0.0
    } else {
        let t = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| LiraError::Stats(e.to_string()))?;
        t.inverse_cdf(0.975) * (var / n).sqrt()
    };
    Ok(EvalStats { kept, mean, ci_half_width })
}

/// Scores per method, then per noise name, then per model. The noise named
/// `nominal` is the reference condition.
pub type ScoreTable = BTreeMap<String, BTreeMap<String, Vec<f64>>>;

pub const NOMINAL: &str = "nominal";

/// Per-model combined metric for every method:
/// `(S^nominal - max over methods and models of S^nominal)
///  + sum over noises i of (S^i - max over the method's models of S^nominal)`.
pub fn combined_metric(table: &ScoreTable) -> Result<BTreeMap<String, Vec<f64>>> {
    if table.is_empty() {
        return Err(LiraError::Stats("empty score table".into()));
    }
    let noises: Vec<&String> = table.values().next().unwrap().keys().collect();
    let mut global_best = f64::NEG_INFINITY;
    for (method, cells) in table {
        let keys: Vec<&String> = cells.keys().collect();
        if keys != noises {
            return Err(LiraError::Stats(format!("method {method} has noises {keys:?}, expected {noises:?}")));
        }
        let nominal = cells.get(NOMINAL).ok_or_else(|| LiraError::Stats(format!("method {method} lacks nominal scores")))?;
        if nominal.is_empty() || cells.values().any(|v| v.len() != nominal.len()) {
            return Err(LiraError::Stats(format!("method {method} has missing cells")));
        }
        global_best = nominal.iter().copied().fold(global_best, f64::max);
    }
    let mut out = BTreeMap::new();
    for (method, cells) in table {
        let nominal = &cells[NOMINAL];
        let own_best = nominal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let per_model = (0..nominal.len())
            .map(|m| {
                let robust: f64 = cells
                    .iter()
                    .filter(|(k, _)| k.as_str() != NOMINAL)
                    .map(|(_, v)| v[m] - own_best)
                    .sum();
                (nominal[m] - global_best) + robust
            })
            .collect();
        out.insert(method.clone(), per_model);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iqm_examples() {
        let xs: Vec<f64> = (1..=30).map(f64::from).collect();
        assert_eq!(iqm(&xs).unwrap(), 15.5);
        assert_eq!(iqm(&[0.0; 30]).unwrap(), 0.0);
        assert_eq!(iqm(&[7.25; 30]).unwrap(), 7.25);
        assert!(iqm(&[]).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let s = aggregate_models(&[10.0; 5]).unwrap();
        assert_eq!((s.mean, s.ci_half_width), (10.0, 0.0));
        assert_eq!(aggregate_models(&[0.0, 10.0, 10.0, 10.0, 100.0]).unwrap().mean, 10.0);
        let s = aggregate_models(&[10.0, 10.0, 10.0, 10.0, 50.0, 10.0]).unwrap();
        assert_eq!(s.mean, 10.0);
        assert_eq!(s.kept.len(), 4);
        assert!(aggregate_models(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn iqr_rule_after_extremes() {
        // 40 survives the best/worst cut but is a 1.5-IQR outlier of the rest
        let s = aggregate_models(&[0.0, 10.0, 11.0, 12.0, 13.0, 40.0, 100.0]).unwrap();
        assert_eq!(s.kept, vec![10.0, 11.0, 12.0, 13.0]);
        assert_eq!(s.mean, 11.5);
    }

    #[test]
    fn t_interval_width() {
        // kept {1, 2, 3}: sd 1, t(0.975, 2) = 4.302653
        let s = aggregate_models(&[0.0, 1.0, 2.0, 3.0, 9.0]).unwrap();
        assert!((s.ci_half_width - 4.302_652_729_7 / 3f64.sqrt()).abs() < 1e-8);
    }

    fn table(rows: &[(&str, &[(&str, &[f64])])]) -> ScoreTable {
        rows.iter()
            .map(|(m, cells)| (m.to_string(), cells.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()))
            .collect()
    }

    #[test]
    fn combined_metric_examples() {
        let t = table(&[("a", &[("nominal", &[5.0]), ("brown3", &[3.0]), ("brown6", &[1.0])])]);
        assert_eq!(combined_metric(&t).unwrap()["a"], vec![-6.0]);

        let t = table(&[
            ("a", &[("nominal", &[2.0, 2.0]), ("brown3", &[2.0, 2.0])]),
            ("b", &[("nominal", &[2.0, 2.0]), ("brown3", &[2.0, 2.0])]),
        ]);
        for v in combined_metric(&t).unwrap().values() {
            assert_eq!(v, &vec![0.0, 0.0]);
        }
    }

    #[test]
    fn combined_metric_refuses_missing_cells() {
        let t = table(&[("a", &[("brown3", &[1.0])])]);
        assert!(combined_metric(&t).is_err());
        let t = table(&[("a", &[("nominal", &[1.0, 2.0]), ("brown3", &[1.0])])]);
        assert!(combined_metric(&t).is_err());
        let t = table(&[("a", &[("nominal", &[1.0])]), ("b", &[("nominal", &[1.0]), ("brown3", &[1.0])])]);
        assert!(combined_metric(&t).is_err());
    }

    #[test]
    fn dominated_method_scores_lower() {
        let t = table(&[
            ("good", &[("nominal", &[9.0, 10.0]), ("brown3", &[8.0, 9.0]), ("brown6", &[6.0, 7.0])]),
            ("bad", &[("nominal", &[9.0, 10.0]), ("brown3", &[5.0, 6.0]), ("brown6", &[2.0, 3.0])]),
        ]);
        let m = combined_metric(&t).unwrap();
        for (g, b) in m["good"].iter().zip(&m["bad"]) {
            assert!(g > b);
        }
    }
}
