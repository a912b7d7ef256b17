//! Agreement and ranking metrics for graded predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Confusion = Vec<Vec<u64>>;

/// Rows are true classes, columns predicted classes.
pub fn confusion_matrix(labels: &[usize], preds: &[usize], classes: usize) -> Result<Confusion> {
    if labels.len() != preds.len() {
        return Err(Error::dims(
            "confusion_matrix",
            &[labels.len()],
            &[preds.len()],
        ));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&y, &p) in labels.iter().zip(preds) {
        for v in [y, p] {
            if v >= classes {
                return Err(Error::Label { label: v, classes });
            }
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// Cohen's kappa with weights `(i - j)^2 / (C - 1)^2`.
pub fn quadratic_weighted_kappa(conf: &Confusion) -> Result<f64> {
    let c = conf.len();
    if c < 2 || conf.iter().any(|r| r.len() != c) {
        return Err(Error::shape(
            "quadratic_weighted_kappa",
            format!("need a square matrix with C >= 2, got {c} rows"),
        ));
    }
    let total: u64 = conf.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Undefined(
            "kappa of an empty confusion matrix".into(),
        ));
    }
    let n = total as f64;
    let rows: Vec<f64> = conf.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..c)
        .map(|j| conf.iter().map(|r| r[j]).sum::<u64>() as f64)
        .collect();
    let denom_w = ((c - 1) * (c - 1)) as f64;
    let (mut obs, mut exp) = (0.0, 0.0);
    for i in 0..c {
        for j in 0..c {
            let w = ((i as f64 - j as f64).powi(2)) / denom_w;
            obs += w * conf[i][j] as f64;
            exp += w * rows[i] * cols[j] / n;
        }
    }
    if exp == 0.0 {
        // every sample sits in one diagonal cell
        return Ok(1.0);
    }
    Ok(1.0 - obs / exp)
}

/// One-vs-rest ROC AUC: probability that a random positive outscores a random
/// negative, ties counting one half. `None` unless both groups are present.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(
        scores.len(),
        positive.len(),
        "scores and labels differ in length"
    );
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kappa: f64,
    pub accuracy: f64,
    /// Mean over the defined per-class values.
    pub macro_auc: Option<f64>,
    pub per_class_auc: Vec<Option<f64>>,
    pub confusion: Confusion,
    pub n_samples: usize,
}

impl MetricsReport {
    /// `probs[i]` holds the class probabilities of sample `i`.
    pub fn compute(
        labels: &[usize],
        preds: &[usize],
        probs: &[Vec<f64>],
        classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Undefined("metrics of an empty dataset".into()));
        }
        if probs.len() != labels.len() || probs.iter().any(|p| p.len() != classes) {
            return Err(Error::shape(
                "metrics",
                "probability rows do not match samples x classes",
            ));
        }
        let confusion = confusion_matrix(labels, preds, classes)?;
        let kappa = quadratic_weighted_kappa(&confusion)?;
        let correct = labels.iter().zip(preds).filter(|(a, b)| a == b).count();
        let per_class_auc: Vec<Option<f64>> = (0..classes)
            .map(|c| {
                let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
                let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
                let auc = roc_auc(&scores, &pos);
                if auc.is_none() {
                    log::warn!(
                        "AUC for class {c} undefined on this split; left out of the macro mean"
                    );
                }
                auc
            })
            .collect();
        let defined: Vec<f64> = per_class_auc.iter().flatten().copied().collect();
        let macro_auc =
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Ok(Self {
            kappa,
            accuracy: correct as f64 / labels.len() as f64,
            macro_auc,
            per_class_auc,
            confusion,
            n_samples: labels.len(),
        })
    }

    pub fn accuracy_from_confusion(&self) -> f64 {
        let trace: u64 = (0..self.confusion.len())
            .map(|i| self.confusion[i][i])
            .sum();
        let total: u64 = self.confusion.iter().flatten().sum();
        trace as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct evaluation of the kappa definition from raw label pairs.
    fn kappa_oracle(labels: &[usize], preds: &[usize], c: usize) -> f64 {
        let n = labels.len() as f64;
        let w = |i: usize, j: usize| ((i as f64 - j as f64) / (c as f64 - 1.0)).powi(2);
        let observed: f64 = labels
            .iter()
            .zip(preds)
            .map(|(&a, &b)| w(a, b))
            .sum::<f64>()
            / n;
        let mut expected = 0.0;
        for &a in labels {
            for &b in preds {
                expected += w(a, b);
            }
        }
        expected /= n * n;
        1.0 - observed / expected
    }

    fn auc_oracle(scores: &[f64], pos: &[bool]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    pairs += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / pairs
    }

    fn expand(conf: &Confusion) -> (Vec<usize>, Vec<usize>) {
        let (mut l, mut p) = (Vec::new(), Vec::new());
        for (i, row) in conf.iter().enumerate() {
            for (j, &k) in row.iter().enumerate() {
                for _ in 0..k {
                    l.push(i);
                    p.push(j);
                }
            }
        }
        (l, p)
    }

    #[test]
    fn kappa_examples() {
        let diag = vec![vec![3, 0, 0], vec![0, 5, 0], vec![0, 0, 1]];
        assert_eq!(quadratic_weighted_kappa(&diag).unwrap(), 1.0);
        let constant = vec![vec![10, 0], vec![10, 0]];
        assert_eq!(quadratic_weighted_kappa(&constant).unwrap(), 0.0);
        let c3 = vec![vec![2, 1, 0], vec![0, 2, 0], vec![0, 1, 2]];
        let (l, p) = expand(&c3);
        let k = quadratic_weighted_kappa(&c3).unwrap();
        assert!((k - kappa_oracle(&l, &p, 3)).abs() < 1e-12);
        assert!(quadratic_weighted_kappa(&vec![vec![0, 0], vec![0, 0]]).is_err());
        assert_eq!(
            quadratic_weighted_kappa(&vec![vec![0, 0], vec![0, 4]]).unwrap(),
            1.0
        );
    }

    #[test]
    fn kappa_matches_oracle_and_scales() {
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let c = 2 + rng.below(5);
            let n = 2 + rng.below(60);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
            let preds: Vec<usize> = labels
                .iter()
                .map(|&y| if rng.bernoulli(0.6) { y } else { rng.below(c) })
                .collect();
            let conf = confusion_matrix(&labels, &preds, c).unwrap();
            let k = quadratic_weighted_kappa(&conf).unwrap();
            let oracle = kappa_oracle(&labels, &preds, c);
            if oracle.is_finite() {
                assert!((k - oracle).abs() < 1e-12, "{k} vs {oracle}");
                assert!((-1.0..=1.0).contains(&k));
            }
            let s = 1 + rng.below(5) as u64;
            let scaled: Confusion = conf
                .iter()
                .map(|r| r.iter().map(|v| v * s).collect())
                .collect();
            assert!((quadratic_weighted_kappa(&scaled).unwrap() - k).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]),
            Some(1.0)
        );
        assert_eq!(
            roc_auc(&[0.5; 6], &[true, false, true, false, false, true]),
            Some(0.5)
        );
        assert_eq!(
            roc_auc(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]),
            Some(0.75)
        );
        assert_eq!(roc_auc(&[0.9, 0.8], &[true, true]), None);
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = Rng::new(2);
        for _ in 0..200 {
            let n = 2 + rng.below(499);
            // coarse scores force plenty of ties
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.uniform() * 20.0).floor() / 20.0)
                .collect();
            let mut pos: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
            pos[0] = true;
            pos[1] = false;
            let a = roc_auc(&scores, &pos).unwrap();
            assert!((a - auc_oracle(&scores, &pos)).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn report_with_oracle_predictions() {
        let labels = vec![0, 1, 2, 2, 1, 0, 3];
        let probs: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| (0..5).map(|c| if c == y { 0.9 } else { 0.025 }).collect())
            .collect();
        let r = MetricsReport::compute(&labels, &labels, &probs, 5).unwrap();
        assert_eq!(r.kappa, 1.0);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.per_class_auc[..4], [Some(1.0); 4]);
        assert_eq!(r.per_class_auc[4], None);
        assert_eq!(r.macro_auc, Some(1.0));
        assert_eq!(r.n_samples, 7);
    }

    #[test]
    fn constant_predictor_report() {
        // 20 samples: 9 of class 0, 6 of class 1, 5 of class 2; always predict 0
        let labels: Vec<usize> = [vec![0; 9], vec![1; 6], vec![2; 5]].concat();
        let preds = vec![0; 20];
        let probs = vec![vec![0.8, 0.1, 0.1]; 20];
        let r = MetricsReport::compute(&labels, &preds, &probs, 3).unwrap();
        assert_eq!(r.accuracy, 0.45);
        assert!(r.kappa <= 0.0);
        assert_eq!(r.per_class_auc, vec![Some(0.5); 3]);
        for (c, row) in r.confusion.iter().enumerate() {
            assert_eq!(
                row.iter().sum::<u64>() as usize,
                labels.iter().filter(|&&y| y == c).count()
            );
        }
    }

    #[test]
    fn streamed_accuracy_matches_confusion() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let n = 1 + rng.below(40);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
            let probs: Vec<Vec<f64>> = (0..n).map(|_| vec![0.25; 4]).collect();
            let Ok(r) = MetricsReport::compute(&labels, &preds, &probs, 4) else {
                continue;
            };
            assert_eq!(r.accuracy, r.accuracy_from_confusion());
        }
    }

    #[test]
    fn report_json_keys() {
        let r =
            MetricsReport::compute(&[0, 1], &[0, 0], &[vec![0.6, 0.4], vec![0.7, 0.3]], 2).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for k in [
            "kappa",
            "accuracy",
            "macro_auc",
            "per_class_auc",
            "confusion",
            "n_samples",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(MetricsReport::compute(&[], &[], &[], 2).is_err());
    }
}
