//! Calibration, discrimination and regression-uncertainty metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability floor used by [`nll`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub value: f64,
    /// Number of examples whose probability was raised to the floor.
    pub clamped: usize,
}

fn check_labels(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, k) = probs.dims2()?;
    if n != labels.len() {
        return Err(Error::dim("labels", probs.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    Ok((n, k))
}

/// `-mean log p(y)` with probabilities clamped at [`PROB_FLOOR`].
pub fn nll(probs: &Tensor, labels: &[usize]) -> Result<NllReport> {
    let (n, k) = check_labels(probs, labels)?;
    let mut clamped = 0;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = probs.data()[i * k + y];
        if p < PROB_FLOOR {
            clamped += 1;
        }
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(NllReport {
        value: total / n as f64,
        clamped,
    })
}

/// Mean over examples of `sum_k (p_k - onehot_k)^2`.
pub fn brier(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = check_labels(probs, labels)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for c in 0..k {
            let t = if c == y { 1.0 } else { 0.0 };
            total += (probs.data()[i * k + c] - t).powi(2);
        }
    }
    Ok(total / n as f64)
}

/// Top-class confidence and correctness per example.
pub fn confidence_and_correct(probs: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<bool>)> {
    let (_, k) = check_labels(probs, labels)?;
    let mut conf = Vec::with_capacity(labels.len());
    let mut correct = Vec::with_capacity(labels.len());
    for (row, &y) in probs.data().chunks(k).zip(labels) {
        let (arg, &p) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |best, (j, p)| if *p > *best.1 { (j, p) } else { best });
        conf.push(p);
        correct.push(arg == y);
    }
    Ok((conf, correct))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    EqualWidth,
    EqualMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub binning: Binning,
    pub n_bins: usize,
    /// `n_bins + 1` monotone edges.
    pub edges: Vec<f64>,
    pub confidence: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub count: Vec<usize>,
}

impl ReliabilityBins {
    pub fn ece(&self) -> f64 {
        let n: usize = self.count.iter().sum();
        self.count
            .iter()
            .zip(&self.confidence)
            .zip(&self.accuracy)
            .map(|((&c, &conf), &acc)| c as f64 * (acc - conf).abs())
            .sum::<f64>()
            / n as f64
    }
}

pub const BIN_COUNTS: [usize; 3] = [10, 15, 20];

/// Expected calibration error under one binning.
pub fn reliability(conf: &[f64], correct: &[bool], binning: Binning, n_bins: usize) -> Result<ReliabilityBins> {
    let n = conf.len();
    if n != correct.len() {
        return Err(Error::dim("reliability", &[n], &[correct.len()]));
    }
    if n_bins == 0 || n < n_bins {
        return Err(Error::Parameter(format!("need at least {n_bins} predictions, got {n}")));
    }
    let mut assign = vec![0usize; n];
    let edges: Vec<f64> = match binning {
        Binning::EqualWidth => {
            for (a, &c) in assign.iter_mut().zip(conf) {
                *a = ((c * n_bins as f64).floor() as usize).min(n_bins - 1);
            }
            (0..=n_bins).map(|b| b as f64 / n_bins as f64).collect()
        }
        Binning::EqualMass => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));
            for (rank, &i) in order.iter().enumerate() {
                assign[i] = rank * n_bins / n;
            }
            let mut e = vec![0.0];
            for b in 1..n_bins {
                let first = order[(b * n).div_ceil(n_bins)];
                e.push(conf[first]);
            }
            e.push(1.0);
            e
        }
    };
    let mut count = vec![0usize; n_bins];
    let mut csum = vec![0.0; n_bins];
    let mut asum = vec![0.0; n_bins];
    for i in 0..n {
        let b = assign[i];
        count[b] += 1;
        csum[b] += conf[i];
        asum[b] += if correct[i] { 1.0 } else { 0.0 };
    }
    let mean = |s: &[f64]| -> Vec<f64> {
        s.iter()
            .zip(&count)
            .map(|(&v, &c)| if c == 0 { 0.0 } else { v / c as f64 })
            .collect()
    };
    Ok(ReliabilityBins {
        binning,
        n_bins,
        edges,
        confidence: mean(&csum),
        accuracy: mean(&asum),
        count,
    })
}

/// All six configurations (two binnings, three bin counts) in a fixed order.
pub fn ece_all_configs(conf: &[f64], correct: &[bool]) -> Result<Vec<ReliabilityBins>> {
    let mut out = Vec::with_capacity(6);
    for binning in [Binning::EqualWidth, Binning::EqualMass] {
        for nb in BIN_COUNTS {
            out.push(reliability(conf, correct, binning, nb)?);
        }
    }
    Ok(out)
}

/// Lowest ECE over the six configurations; the first minimum wins ties.
pub fn ece_best_config(conf: &[f64], correct: &[bool]) -> Result<(f64, ReliabilityBins)> {
    let all = ece_all_configs(conf, correct)?;
    let mut best = all[0].clone();
    let mut best_e = best.ece();
    for b in all.into_iter().skip(1) {
        let e = b.ece();
        if e < best_e {
            best_e = e;
            best = b;
        }
    }
    Ok((best_e, best))
}

fn class_counts(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("both classes must be present".into()));
    }
    Ok((pos, neg))
}

/// Ranks starting at 1, with tied values sharing their average rank.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve by the rank-sum formula, positives scoring high.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auroc", &[scores.len()], &[labels.len()]));
    }
    let (pos, neg) = class_counts(labels)?;
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    Ok((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos as f64 * neg as f64))
}

/// Average precision: `sum_k (R_k - R_{k-1}) P_k` over distinct thresholds.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("aupr", &[scores.len()], &[labels.len()]));
    }
    let (pos, _) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// `mean +- z_{(1+level)/2} std`.
pub fn gaussian_intervals(mean: &[f64], std: &[f64], level: f64) -> Result<IntervalSet> {
    if mean.len() != std.len() {
        return Err(Error::dim("intervals", &[mean.len()], &[std.len()]));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!("level {level} not in (0, 1)")));
    }
    let z = std_normal().inverse_cdf(0.5 + level / 2.0);
    Ok(IntervalSet {
        level,
        lower: mean.iter().zip(std).map(|(m, s)| m - z * s).collect(),
        upper: mean.iter().zip(std).map(|(m, s)| m + z * s).collect(),
    })
}

/// Coverage fraction (bounds inclusive) and mean width.
pub fn picp_mpiw(intervals: &IntervalSet, y: &[f64]) -> Result<(f64, f64)> {
    let n = y.len();
    if intervals.lower.len() != n || intervals.upper.len() != n || n == 0 {
        return Err(Error::dim("picp", &[intervals.lower.len()], &[n]));
    }
    let inside = (0..n)
        .filter(|&i| intervals.lower[i] <= y[i] && y[i] <= intervals.upper[i])
        .count();
    let width: f64 = (0..n).map(|i| intervals.upper[i] - intervals.lower[i]).sum();
    Ok((inside as f64 / n as f64, width / n as f64))
}

/// Mean closed-form CRPS of Gaussian predictives:
/// `sigma [z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi)]`.
pub fn gaussian_crps(mu: &[f64], sigma: &[f64], y: &[f64]) -> Result<f64> {
    let n = y.len();
    if mu.len() != n || sigma.len() != n || n == 0 {
        return Err(Error::dim("crps", &[mu.len()], &[n]));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain("CRPS needs positive sigma".into()));
    }
    let nd = std_normal();
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    let total: f64 = (0..n)
        .map(|i| {
            let z = (y[i] - mu[i]) / sigma[i];
            let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            sigma[i] * (z * (2.0 * nd.cdf(z) - 1.0) + 2.0 * pdf - inv_sqrt_pi)
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectivePoint {
    pub retention: f64,
    pub kept: usize,
    pub mean_error: f64,
}

/// For each retention level drops the `ceil((1 - retention) N)` most
/// uncertain points and averages the error of the rest. Equal
/// uncertainties are dropped in order of original index.
pub fn selective_prediction_curve(errors: &[f64], uncertainty: &[f64], retention: &[f64]) -> Result<Vec<SelectivePoint>> {
    let n = errors.len();
    if uncertainty.len() != n || n == 0 {
        return Err(Error::dim("selective_prediction", &[n], &[uncertainty.len()]));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]).then(a.cmp(&b)));
    retention
        .iter()
        .map(|&rho| {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Parameter(format!("retention {rho} not in (0, 1]")));
            }
            // tolerance absorbs representation error such as (1 - 0.7) * 10 = 3.0000000000000004
            let drop = (((1.0 - rho) * n as f64) - 1e-9).ceil().max(0.0) as usize;
            let kept = &order[drop.min(n - 1)..];
            let mean_error = kept.iter().map(|&i| errors[i]).sum::<f64>() / kept.len() as f64;
            Ok(SelectivePoint {
                retention: rho,
                kept: kept.len(),
                mean_error,
            })
        })
        .collect()
}

/// Nominal central-coverage levels `0.05, 0.10, ..., 0.95`.
pub fn coverage_levels() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

/// Observed coverage of the central Gaussian interval at each level.
pub fn coverage_curve(mu: &[f64], sigma: &[f64], y: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n = y.len();
    if mu.len() != n || sigma.len() != n || n == 0 {
        return Err(Error::dim("calibration", &[mu.len()], &[n]));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain("calibration needs positive sigma".into()));
    }
    let nd = std_normal();
    Ok(coverage_levels()
        .into_iter()
        .map(|q| {
            let z = nd.inverse_cdf(0.5 + q / 2.0);
            let inside = (0..n).filter(|&i| (y[i] - mu[i]).abs() <= z * sigma[i]).count();
            (q, inside as f64 / n as f64)
        })
        .collect())
}

/// Mean absolute gap between observed and nominal coverage.
pub fn regression_calibration_auc(mu: &[f64], sigma: &[f64], y: &[f64]) -> Result<f64> {
    let curve = coverage_curve(mu, sigma, y)?;
    Ok(curve.iter().map(|(q, o)| (o - q).abs()).sum::<f64>() / curve.len() as f64)
}

pub fn rmse(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() || y.is_empty() {
        return Err(Error::dim("rmse", &[pred.len()], &[y.len()]));
    }
    Ok((pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() || y.is_empty() {
        return Err(Error::dim("mae", &[pred.len()], &[y.len()]));
    }
    Ok(pred.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / y.len() as f64)
}

/// Linear-interpolation quantile of unsorted data, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, uniform, RngFactory};
    use rand::Rng;

    #[test]
    fn nll_and_brier_examples() {
        let sure = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(nll(&sure, &[0, 1]).unwrap().value, 0.0);
        assert_eq!(brier(&sure, &[0, 1]).unwrap(), 0.0);
        let half = Tensor::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!((nll(&half, &[0, 1]).unwrap().value - 2f64.ln()).abs() < 1e-15);
        assert_eq!(brier(&half, &[0, 1]).unwrap(), 0.5);
        // hand computation: -(ln .8 + ln .6 + ln .3 + ln 1e-12) / 4
        let p = Tensor::from_rows(&[&[0.8, 0.2], &[0.4, 0.6], &[0.7, 0.3], &[1.0, 0.0]]);
        let r = nll(&p, &[0, 1, 1, 1]).unwrap();
        let expect = -(0.8f64.ln() + 0.6f64.ln() + 0.3f64.ln() + 1e-12f64.ln()) / 4.0;
        assert!((r.value - expect).abs() < 1e-12);
        assert_eq!(r.clamped, 1);
        // (0.08 + 0.32 + 0.98 + 2.0) / 4
        assert!((brier(&p, &[0, 1, 1, 1]).unwrap() - 0.845).abs() < 1e-12);
        assert!(nll(&p, &[0, 1, 1, 2]).is_err());
    }

    #[test]
    fn ece_extremes() {
        let conf = vec![1.0; 40];
        let correct: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        for b in ece_all_configs(&conf, &correct).unwrap() {
            assert!((b.ece() - 0.5).abs() < 1e-12);
            assert_eq!(b.count.iter().sum::<usize>(), 40);
            assert!(b.edges.windows(2).all(|e| e[0] <= e[1]));
        }
        let mut rng = RngFactory::new(1).stream("cal");
        let conf: Vec<f64> = (0..100_000).map(|_| uniform(&mut rng, 0.5, 1.0)).collect();
        let correct: Vec<bool> = conf.iter().map(|&c| rng.random::<f64>() < c).collect();
        let (e, _) = ece_best_config(&conf, &correct).unwrap();
        assert!(e <= 0.01, "{e}");
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[false, true, false, true]).unwrap(), 0.5);
        // 6 points: pairs (pos, neg) correctly ordered, ties worth 1/2
        let s = [0.9, 0.4, 0.4, 0.7, 0.2, 0.6];
        let l = [true, true, false, false, false, true];
        // positives 0.9, 0.4, 0.6 vs negatives 0.4, 0.7, 0.2: 3 + 1.5 + 2 = 6.5 of 9
        assert!((auroc(&s, &l).unwrap() - 6.5 / 9.0).abs() < 1e-15);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        // ranking pos, neg, pos: AP = 0.5 * 1 + 0.5 * 2/3
        let v = aupr(&[0.9, 0.5, 0.1], &[true, false, true]).unwrap();
        assert!((v - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn interval_examples() {
        let iv = IntervalSet { level: 0.95, lower: vec![0.0, 1.0, 2.0, 0.0, 5.0], upper: vec![1.0, 1.0, 3.0, 0.5, 6.0] };
        let (picp, mpiw) = picp_mpiw(&iv, &[0.5, 1.0, 3.5, 0.25, 4.0]).unwrap();
        assert_eq!(picp, 3.0 / 5.0);
        assert!((mpiw - 3.5 / 5.0).abs() < 1e-15);
        let y = [1.0, 2.0];
        let zero = IntervalSet { level: 0.95, lower: y.to_vec(), upper: y.to_vec() };
        assert_eq!(picp_mpiw(&zero, &y).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn crps_values() {
        // 2 phi(0) - 1/sqrt(pi), evaluated at high precision
        let v = gaussian_crps(&[0.0], &[1.0], &[0.0]).unwrap();
        assert!((v - 0.233_694_977_255_109_1).abs() < 1e-12, "{v}");
        assert!(gaussian_crps(&[3.0], &[1e-12], &[3.0]).unwrap() < 1e-11);
        assert!(gaussian_crps(&[0.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn selective_curve_examples() {
        let err = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let unc = err;
        let c = selective_prediction_curve(&err, &unc, &[1.0, 0.9, 0.8, 0.7]).unwrap();
        assert_eq!(c[0].mean_error, 5.5);
        assert_eq!(c.iter().map(|p| p.kept).collect::<Vec<_>>(), vec![10, 9, 8, 7]);
        assert!(c.windows(2).all(|w| w[1].mean_error <= w[0].mean_error));
        // ties drop the lower index first
        let c = selective_prediction_curve(&[5.0, 1.0, 1.0], &[1.0, 1.0, 0.0], &[0.6]).unwrap();
        assert_eq!(c[0].mean_error, 1.0);
    }

    #[test]
    fn calibration_auc_regimes() {
        let y = [0.5, -1.0, 2.0];
        let v = regression_calibration_auc(&y, &[1.0, 2.0, 0.1], &y).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let mut rng = RngFactory::new(2).stream("cal");
        let n = 100_000;
        let mu: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.5, 2.0)).collect();
        let y: Vec<f64> = (0..n).map(|i| mu[i] + sigma[i] * standard_normal(&mut rng)).collect();
        assert!(regression_calibration_auc(&mu, &sigma, &y).unwrap() <= 0.02);
        let tight: Vec<f64> = sigma.iter().map(|s| s / 10.0).collect();
        assert!(regression_calibration_auc(&mu, &tight, &y).unwrap() > 0.3);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 10.0], 0.25), 2.5);
    }
}
