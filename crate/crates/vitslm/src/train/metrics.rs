//! Accuracy counting, the peak/final stability summary, seed aggregation,
//! and the paired t-test used to compare variants across seeds.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::tensor::Elem;

use super::RunMetrics;

/// Counts samples whose true class ranks inside the top k. The rank of the
/// true class is the number of classes with a strictly larger logit plus
/// the number of earlier-indexed classes with an equal logit, so ties
/// resolve the same way on every platform.
pub fn top_k_correct<T: Elem>(
    logits: &[T],
    num_classes: usize,
    labels: &[u32],
    k: usize,
) -> Result<usize> {
    if k == 0 {
        return Err(Error::Config("top-k needs k >= 1".into()));
    }
    if logits.len() != labels.len() * num_classes {
        return Err(Error::Dim(format!(
            "{} logits for {} labels of {num_classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let t = label as usize;
        if t >= num_classes {
            return Err(Error::Config(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        let row = &logits[i * num_classes..(i + 1) * num_classes];
        let own = row[t];
        let mut rank = 0;
        for (j, &z) in row.iter().enumerate() {
            if z > own || (z == own && j < t) {
                rank += 1;
            }
        }
        if rank < k {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Peak/final summary of a validation curve, percentages in, 1-indexed
/// peak epoch out. Ties resolve to the earliest epoch; the gap is peak
/// minus the last entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityMetrics {
    pub peak_epoch: usize,
    pub peak: f64,
    pub final_value: f64,
    pub gap: f64,
}

pub fn stability_metrics(curve: &[f64]) -> Result<StabilityMetrics> {
    if curve.is_empty() {
        return Err(Error::Config("stability metrics need a non-empty curve".into()));
    }
    let mut peak_epoch = 1;
    let mut peak = curve[0];
    for (i, &v) in curve.iter().enumerate().skip(1) {
        if v > peak {
            peak = v;
            peak_epoch = i + 1;
        }
    }
    let final_value = *curve.last().unwrap();
    Ok(StabilityMetrics { peak_epoch, peak, final_value, gap: peak - final_value })
}

/// Mean and sample standard deviation (n-1 denominator; zero when n < 2).
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Config("mean of an empty sample".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return Ok((mean, 0.0));
    }
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Paired t-test outcome. Zero variance of the differences has no defined
/// t statistic and is flagged instead of reported as p = 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TTestResult {
    Test { t: f64, df: f64, p: f64, mean_diff: f64 },
    Degenerate { mean_diff: f64, n: usize },
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Dim(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Config("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let (mean, sd) = mean_std(&d)?;
    if sd == 0.0 {
        return Ok(TTestResult::Degenerate { mean_diff: mean, n: d.len() });
    }
    let n = d.len() as f64;
    let t = mean / (sd / n.sqrt());
    let df = n - 1.0;
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Numeric(format!("t-distribution with df {df}: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTestResult::Test { t, df, p, mean_diff: mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn display(&self, decimals: usize) -> String {
        format!("{:.*} ± {:.*}", decimals, self.mean, decimals, self.std)
    }
}

/// Across-seed mean ± sample std of each derived run metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub n: usize,
    pub peak_epoch: MeanStd,
    pub peak_top1: MeanStd,
    pub final_top1: MeanStd,
    pub peak_to_final_gap: MeanStd,
    pub best_ema_top1: MeanStd,
    pub throughput: MeanStd,
}

pub fn aggregate_seeds(runs: &[RunMetrics]) -> Result<SeedAggregate> {
    if runs.is_empty() {
        return Err(Error::Config("aggregate needs at least one run".into()));
    }
    let field = |f: &dyn Fn(&RunMetrics) -> f64| -> Result<MeanStd> {
        let xs: Vec<f64> = runs.iter().map(f).collect();
        let (mean, std) = mean_std(&xs)?;
        Ok(MeanStd { mean, std })
    };
    Ok(SeedAggregate {
        n: runs.len(),
        peak_epoch: field(&|r| r.peak_epoch as f64)?,
        peak_top1: field(&|r| r.peak_top1)?,
        final_top1: field(&|r| r.final_top1)?,
        peak_to_final_gap: field(&|r| r.peak_to_final_gap)?,
        best_ema_top1: field(&|r| r.best_ema_top1)?,
        throughput: field(&|r| r.throughput)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_rule_counts_strict_and_earlier_ties() {
        let logits: Vec<f64> = vec![0.1, 0.9, 0.9, 0.2];
        // True class 2 ties with class 1, which is earlier: rank 1.
        assert_eq!(top_k_correct(&logits, 4, &[2], 1).unwrap(), 0);
        assert_eq!(top_k_correct(&logits, 4, &[2], 2).unwrap(), 1);
        assert_eq!(top_k_correct(&logits, 4, &[1], 1).unwrap(), 1);

        let two: Vec<f64> = vec![0.0, 1.0, 2.0, /* second sample */ 5.0, 1.0, 0.0];
        assert_eq!(top_k_correct(&two, 3, &[2, 0], 1).unwrap(), 2);
        assert_eq!(top_k_correct(&two, 3, &[0, 1], 2).unwrap(), 1);

        assert!(top_k_correct(&two, 3, &[0], 1).is_err());
        assert!(top_k_correct(&two, 3, &[3, 0], 1).is_err());
        assert!(top_k_correct(&two, 3, &[0, 0], 0).is_err());
    }

    #[test]
    fn stability_hand_arithmetic() {
        let s = stability_metrics(&[80.0, 81.5, 81.2, 81.0]).unwrap();
        assert_eq!(s.peak_epoch, 2);
        assert_eq!(s.peak, 81.5);
        assert_eq!(s.final_value, 81.0);
        assert_eq!(s.gap, 0.5);

        let mono = stability_metrics(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(mono.gap, 0.0);
        assert_eq!(mono.peak_epoch, 3);

        let tie = stability_metrics(&[1.0, 3.0, 3.0]).unwrap();
        assert_eq!(tie.peak_epoch, 2);

        let single = stability_metrics(&[7.0]).unwrap();
        assert_eq!((single.peak_epoch, single.gap), (1, 0.0));

        assert!(stability_metrics(&[]).is_err());
    }

    #[test]
    fn paired_t_worked_example() {
        let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 5.0, 5.0]).unwrap();
        match r {
            TTestResult::Test { t, df, p, mean_diff } => {
                assert!((t + 5.0).abs() < 1e-12, "t = {t}");
                assert_eq!(df, 3.0);
                assert!((p - 0.0154).abs() <= 5e-4, "p = {p}");
                assert_eq!(mean_diff, -1.25);
            }
            other => panic!("expected a t statistic, got {other:?}"),
        }

        let same = paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!(matches!(same, TTestResult::Degenerate { mean_diff, n: 2 } if mean_diff == 0.0));

        // Constant shift also has zero variance of differences.
        let shift = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(shift, TTestResult::Degenerate { mean_diff, .. } if mean_diff == 1.0));

        // n = 2 is accepted with df = 1.
        let tiny = paired_t_test(&[81.42, 81.52], &[81.05, 81.07]).unwrap();
        assert!(matches!(tiny, TTestResult::Test { df, .. } if df == 1.0));

        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn two_seed_aggregate_uses_sample_std() {
        let mk = |best: f64| RunMetrics {
            seed: 0,
            epochs: Vec::new(),
            peak_epoch: 3,
            peak_top1: best,
            final_top1: best,
            peak_to_final_gap: 0.0,
            throughput: 100.0,
            final_train_top1: 0.0,
            best_ema_top1: best,
            best_epoch: 3,
        };
        let agg = aggregate_seeds(&[mk(81.42), mk(81.52)]).unwrap();
        assert!((agg.best_ema_top1.mean - 81.47).abs() < 1e-12);
        assert!((agg.best_ema_top1.std - 0.07071067811865475).abs() < 1e-10);
        assert_eq!(agg.best_ema_top1.display(2), "81.47 ± 0.07");

        let single = aggregate_seeds(&[mk(81.42)]).unwrap();
        assert_eq!(single.best_ema_top1.std, 0.0);
        let identical = aggregate_seeds(&[mk(81.42), mk(81.42), mk(81.42)]).unwrap();
        assert_eq!(identical.best_ema_top1.std, 0.0);

        assert!(aggregate_seeds(&[]).is_err());
    }
}
