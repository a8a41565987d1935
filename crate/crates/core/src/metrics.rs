//! Evaluation metrics: accuracy, macro-F1 and ECE for classification, RMSE and
//! MAE for regression, plus rank correlation and percentiles.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

fn check_probs(probs: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if probs.is_empty() {
        return invalid("no samples");
    }
    if probs.len() != labels.len() {
        return invalid("prediction and label counts differ");
    }
    let c = probs[0].len();
    if c == 0 || probs.iter().any(|p| p.len() != c) {
        return invalid("ragged probability matrix");
    }
    for p in probs {
        let s: f64 = p.iter().sum();
        if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return invalid("row is not a probability distribution");
        }
    }
    if let Some(l) = labels.iter().find(|l| **l >= c) {
        return invalid(format!("label {l} outside [0, {c})"));
    }
    Ok(c)
}

pub fn classification_metrics(probs: &[Vec<f64>], labels: &[usize]) -> Result<ClassificationMetrics> {
    let c = check_probs(probs, labels)?;
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let n = labels.len();
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let mut f1_sum = 0.0;
    for k in 0..c {
        let tp = preds.iter().zip(labels).filter(|(p, l)| **p == k && **l == k).count() as f64;
        let fp = preds.iter().zip(labels).filter(|(p, l)| **p == k && **l != k).count() as f64;
        let fneg = preds.iter().zip(labels).filter(|(p, l)| **p != k && **l == k).count() as f64;
        let denom = 2.0 * tp + fp + fneg;
        if denom > 0.0 {
            f1_sum += 2.0 * tp / denom;
        }
    }
    Ok(ClassificationMetrics { accuracy: correct as f64 / n as f64, macro_f1: f1_sum / c as f64 })
}

/// Reliability-diagram table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub confidence: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl CalibrationBins {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `sum_b (n_b / N) |acc_b - conf_b|`; empty bins carry no weight.
    pub fn ece(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        self.counts
            .iter()
            .zip(self.confidence.iter().zip(&self.accuracy))
            .map(|(c, (conf, acc))| *c as f64 / n * (acc - conf).abs())
            .sum()
    }

    /// Adds another table over the same edges.
    pub fn merge(&mut self, other: &CalibrationBins) -> Result<()> {
        if self.edges != other.edges {
            return invalid("calibration bins have different edges");
        }
        for b in 0..self.counts.len() {
            let (n1, n2) = (self.counts[b] as f64, other.counts[b] as f64);
            if n1 + n2 > 0.0 {
                self.confidence[b] = (self.confidence[b] * n1 + other.confidence[b] * n2) / (n1 + n2);
                self.accuracy[b] = (self.accuracy[b] * n1 + other.accuracy[b] * n2) / (n1 + n2);
            }
            self.counts[b] += other.counts[b];
        }
        Ok(())
    }
}

/// Top-label confidence binned into `bins` equal-width, right-closed bins
/// (the first bin also takes confidence 0).
pub fn calibration_bins(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<CalibrationBins> {
    if bins == 0 {
        return invalid("bin count must be positive");
    }
    check_probs(probs, labels)?;
    let edges: Vec<f64> = (0..=bins).map(|b| b as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    for (p, l) in probs.iter().zip(labels) {
        let k = argmax(p);
        let c = p[k];
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        counts[b] += 1;
        conf[b] += c;
        acc[b] += f64::from(u8::from(k == *l));
    }
    for b in 0..bins {
        if counts[b] > 0 {
            conf[b] /= counts[b] as f64;
            acc[b] /= counts[b] as f64;
        }
    }
    Ok(CalibrationBins { edges, counts, confidence: conf, accuracy: acc })
}

/// Expected calibration error with `bins` equal-width bins.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    Ok(calibration_bins(probs, labels, bins)?.ece())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    pub mae: f64,
}

/// RMSE and MAE over every residual of every sample.
pub fn regression_metrics(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<RegressionMetrics> {
    if preds.is_empty() {
        return invalid("no samples");
    }
    if preds.len() != targets.len() || preds.iter().zip(targets).any(|(p, t)| p.len() != t.len() || p.is_empty()) {
        return invalid("prediction and target shapes differ");
    }
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut n = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        for (a, b) in p.iter().zip(t) {
            let r = a - b;
            sq += r * r;
            abs += r.abs();
            n += 1;
        }
    }
    Ok(RegressionMetrics { rmse: (sq / n as f64).sqrt(), mae: abs / n as f64 })
}

/// Per-column metrics of an `N x D` prediction matrix.
pub fn regression_metrics_per_target(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Vec<RegressionMetrics>> {
    regression_metrics(preds, targets)?;
    let d = preds[0].len();
    if preds.iter().chain(targets).any(|r| r.len() != d) {
        return invalid("ragged regression matrix");
    }
    (0..d)
        .map(|j| {
            let p: Vec<Vec<f64>> = preds.iter().map(|r| vec![r[j]]).collect();
            let t: Vec<Vec<f64>> = targets.iter().map(|r| vec![r[j]]).collect();
            regression_metrics(&p, &t)
        })
        .collect()
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            ranks[*k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return invalid("spearman needs two equal-length inputs of at least two values");
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return invalid("spearman inputs must be finite");
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

/// Linear-interpolation percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return invalid("percentile of an empty set");
    }
    if !(0.0..=100.0).contains(&q) {
        return invalid("percentile rank outside [0, 100]");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (`n - 1`); 0 for a single value.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn onehot(k: usize, c: usize) -> Vec<f64> {
        let mut v = vec![0.0; c];
        v[k] = 1.0;
        v
    }

    #[test]
    fn all_correct() {
        let probs: Vec<_> = [0, 1, 2, 1].iter().map(|k| onehot(*k, 3)).collect();
        let m = classification_metrics(&probs, &[0, 1, 2, 1]).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn hand_confusion_matrix() {
        // A: 2/2 right, B: 1/2 right (other -> A), C: 0/1 right (-> B)
        let labels = [0, 0, 1, 1, 2];
        let preds = [0, 0, 1, 0, 1];
        let probs: Vec<_> = preds.iter().map(|k| onehot(*k, 3)).collect();
        let m = classification_metrics(&probs, &labels).unwrap();
        assert!((m.accuracy - 0.6).abs() < 1e-15);
        // A: P 2/3 R 1 F1 0.8; B: P 1/2 R 1/2 F1 0.5; C: 0
        assert!((m.macro_f1 - 1.3 / 3.0).abs() < 1e-15, "{}", m.macro_f1);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        let m = classification_metrics(&[vec![0.5, 0.5]], &[1]).unwrap();
        assert_eq!(m.accuracy, 0.0);
    }

    #[test]
    fn constant_prediction_on_random_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<usize> = (0..30_000).map(|_| rng.gen_range(0..3)).collect();
        let probs = vec![vec![0.5, 0.3, 0.2]; labels.len()];
        let m = classification_metrics(&probs, &labels).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 0.01, "{}", m.accuracy);
    }

    #[test]
    fn classification_errors() {
        assert!(classification_metrics(&[], &[]).is_err());
        assert!(classification_metrics(&[vec![0.5, 0.5]], &[2]).is_err());
        assert!(classification_metrics(&[vec![0.5, 0.6]], &[0]).is_err());
    }

    #[test]
    fn ece_examples() {
        let probs: Vec<_> = [0, 1, 2].iter().map(|k| onehot(*k, 3)).collect();
        assert_eq!(ece(&probs, &[0, 1, 2], 10).unwrap(), 0.0);
        let probs = vec![vec![0.6, 0.4]; 4];
        let e = ece(&probs, &[0, 0, 1, 1], 10).unwrap();
        assert!((e - 0.1).abs() < 1e-12, "{e}");
        assert!(ece(&probs, &[0, 0, 1, 1], 0).is_err());
        assert!((0.045f64 - 4.5e-2).abs() < 1e-18);
    }

    #[test]
    fn bins_are_right_closed() {
        let b = calibration_bins(&[vec![0.6, 0.4], vec![0.7, 0.3], vec![0.65, 0.35]], &[0, 0, 0], 10).unwrap();
        assert_eq!(b.counts[5], 1);
        assert_eq!(b.counts[6], 2);
        assert_eq!(b.total(), 3);
        assert_eq!(b.edges.len(), 11);
    }

    #[test]
    fn merged_bins_equal_pooled_bins() {
        let p1 = vec![vec![0.6, 0.4], vec![0.9, 0.1]];
        let p2 = vec![vec![0.3, 0.7], vec![0.55, 0.45], vec![0.95, 0.05]];
        let mut a = calibration_bins(&p1, &[0, 1], 10).unwrap();
        a.merge(&calibration_bins(&p2, &[1, 0, 0], 10).unwrap()).unwrap();
        let all: Vec<_> = p1.iter().chain(&p2).cloned().collect();
        let b = calibration_bins(&all, &[0, 1, 1, 0, 0], 10).unwrap();
        assert_eq!(a.counts, b.counts);
        assert!((a.ece() - b.ece()).abs() < 1e-12);
    }

    #[test]
    fn calibrated_simulator_has_small_ece() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..100_000 {
            let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0f64).powi(2)).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let u: f64 = rng.gen();
            let label = if u < p[0] {
                0
            } else if u < p[0] + p[1] {
                1
            } else {
                2
            };
            probs.push(p);
            labels.push(label);
        }
        let e = ece(&probs, &labels, 10).unwrap();
        assert!(e < 0.01, "{e}");
    }

    #[test]
    fn regression_examples() {
        let m = regression_metrics(&[vec![1.0], vec![2.0]], &[vec![1.0], vec![2.0]]).unwrap();
        assert_eq!((m.rmse, m.mae), (0.0, 0.0));
        let m = regression_metrics(&[vec![3.0], vec![-4.0]], &[vec![0.0], vec![0.0]]).unwrap();
        assert!((m.rmse - 12.5f64.sqrt()).abs() < 1e-15 && m.mae == 3.5);
        let m = regression_metrics(&[vec![1.5, 2.5]], &[vec![1.0, 2.0]]).unwrap();
        assert_eq!((m.rmse, m.mae), (0.5, 0.5));
        assert!(regression_metrics(&[], &[]).is_err());
        assert!(regression_metrics(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
        let per = regression_metrics_per_target(&[vec![1.0, 0.0], vec![3.0, 0.0]], &[vec![0.0, 0.0], vec![0.0, 2.0]])
            .unwrap();
        assert!((per[0].mae - 2.0).abs() < 1e-15 && (per[1].rmse - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 1.0, 0.0]).unwrap(), 0.0);
        // no ties: 1 - 6 sum d^2 / (n (n^2 - 1)) with d = (0, 1, -1, 0)
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-15);
    }

    #[test]
    fn percentile_examples() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert!((percentile(&v, 2.5).unwrap() - 1.1).abs() < 1e-12);
        assert!((percentile(&v, 97.5).unwrap() - 4.9).abs() < 1e-12);
        assert_eq!(percentile(&v, 50.0).unwrap(), 3.0);
        assert!(percentile(&[], 50.0).is_err());
        assert_eq!(std_dev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]), (32.0f64 / 7.0).sqrt());
    }

    fn probs_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        proptest::collection::vec((proptest::collection::vec(0.01f64..1.0, 3), 0usize..3), 1..40).prop_map(|rows| {
            let probs = rows
                .iter()
                .map(|(r, _)| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(|x| x / s).collect()
                })
                .collect();
            (probs, rows.iter().map(|(_, l)| *l).collect())
        })
    }

    proptest! {
        #[test]
        fn ece_bounded_and_permutation_invariant((probs, labels) in probs_strategy(), rot in 0usize..40) {
            let e = ece(&probs, &labels, 10).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            let n = probs.len();
            let r = rot % n;
            let mut p2 = probs.clone();
            let mut l2 = labels.clone();
            p2.rotate_left(r);
            l2.rotate_left(r);
            prop_assert!((ece(&p2, &l2, 10).unwrap() - e).abs() < 1e-12);
        }

        #[test]
        fn macro_f1_invariant_to_relabeling((probs, labels) in probs_strategy()) {
            let perm = [2usize, 0, 1];
            let p2: Vec<Vec<f64>> = probs
                .iter()
                .map(|p| {
                    let mut q = vec![0.0; 3];
                    for k in 0..3 {
                        q[perm[k]] = p[k];
                    }
                    q
                })
                .collect();
            let l2: Vec<usize> = labels.iter().map(|l| perm[*l]).collect();
            let a = classification_metrics(&probs, &labels).unwrap();
            let b = classification_metrics(&p2, &l2).unwrap();
            // relabeling can change argmax tie-breaks; rows are continuous so ties are measure-zero
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        }

        #[test]
        fn rmse_at_least_mae(v in proptest::collection::vec((-50f64..50.0, -50f64..50.0), 1..30)) {
            let p: Vec<Vec<f64>> = v.iter().map(|x| vec![x.0]).collect();
            let t: Vec<Vec<f64>> = v.iter().map(|x| vec![x.1]).collect();
            let m = regression_metrics(&p, &t).unwrap();
            prop_assert!(m.rmse >= m.mae - 1e-12);
        }
    }
}
