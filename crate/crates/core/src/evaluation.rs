//! Label decoding and segmentation metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact_oracle::Marginals;

/// Probabilities are clamped here before taking logs in KL.
pub const KL_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction has {pred} entries, ground truth {gt}")]
    DimMismatch { pred: usize, gt: usize },
    #[error("label {label} outside 0..{num_classes}")]
    LabelRange { label: usize, num_classes: usize },
    #[error("marginal shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
}

/// Per-node argmax; ties go to the smallest class index.
pub fn predict_labels(marginals: &Marginals) -> Vec<usize> {
    marginals
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub index: usize,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
    pub per_sample: Vec<SampleScore>,
}

#[derive(Debug, Clone, Default)]
struct Counts {
    intersection: Vec<usize>,
    union: Vec<usize>,
    correct: usize,
    total: usize,
}

impl Counts {
    fn new(k: usize) -> Self {
        Counts { intersection: vec![0; k], union: vec![0; k], correct: 0, total: 0 }
    }

    fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<(), EvalError> {
        let k = self.intersection.len();
        if pred.len() != gt.len() {
            return Err(EvalError::DimMismatch { pred: pred.len(), gt: gt.len() });
        }
        for (&a, &b) in pred.iter().zip(gt) {
            for label in [a, b] {
                if label >= k {
                    return Err(EvalError::LabelRange { label, num_classes: k });
                }
            }
            if a == b {
                self.intersection[a] += 1;
                self.union[a] += 1;
                self.correct += 1;
            } else {
                self.union[a] += 1;
                self.union[b] += 1;
            }
        }
        self.total += pred.len();
        Ok(())
    }

    fn per_class(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    fn mean(&self) -> f64 {
        let present: Vec<f64> = self.per_class().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// IoU of one prediction against its ground truth.
pub fn iou(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<EvalReport, EvalError> {
    evaluate(&[pred], &[gt], num_classes)
}

/// Dataset-level IoU: intersections and unions are pooled over all
/// samples before dividing. Per-sample scores are reported alongside.
pub fn evaluate<P, G>(preds: &[P], gts: &[G], num_classes: usize) -> Result<EvalReport, EvalError>
where
    P: AsRef<[usize]>,
    G: AsRef<[usize]>,
{
    if preds.len() != gts.len() {
        return Err(EvalError::DimMismatch { pred: preds.len(), gt: gts.len() });
    }
    let mut pooled = Counts::new(num_classes);
    let mut per_sample = Vec::with_capacity(preds.len());
    for (index, (p, g)) in preds.iter().zip(gts).enumerate() {
        let mut single = Counts::new(num_classes);
        single.add(p.as_ref(), g.as_ref())?;
        pooled.add(p.as_ref(), g.as_ref())?;
        per_sample.push(SampleScore { index, mean_iou: single.mean(), pixel_accuracy: single.accuracy() });
    }
    Ok(EvalReport {
        per_class_iou: pooled.per_class(),
        mean_iou: pooled.mean(),
        pixel_accuracy: pooled.accuracy(),
        per_sample,
    })
}

impl EvalReport {
    /// `sample,mean_iou,pixel_accuracy` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,mean_iou,pixel_accuracy\n");
        for s in &self.per_sample {
            let _ = writeln!(out, "{},{:.6},{:.6}", s.index, s.mean_iou, s.pixel_accuracy);
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples: {}", self.per_sample.len());
        let _ = writeln!(out, "mean_iou: {:.6}", self.mean_iou);
        let _ = writeln!(out, "pixel_accuracy: {:.6}", self.pixel_accuracy);
        for (c, v) in self.per_class_iou.iter().enumerate() {
            match v {
                Some(v) => {
                    let _ = writeln!(out, "iou[{c}]: {v:.6}");
                }
                None => {
                    let _ = writeln!(out, "iou[{c}]: absent");
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceStats {
    pub per_node_kl: Vec<f64>,
    pub mean_kl: f64,
    pub max_kl: f64,
    pub mean_tv: f64,
}

/// `KL(a || b)` per node plus total variation, both averaged over nodes.
pub fn compare_marginals(a: &Marginals, b: &Marginals) -> Result<DivergenceStats, EvalError> {
    if a.num_nodes() != b.num_nodes() || a.num_classes() != b.num_classes() {
        return Err(EvalError::ShapeMismatch {
            a: (a.num_nodes(), a.num_classes()),
            b: (b.num_nodes(), b.num_classes()),
        });
    }
    let mut per_node_kl = Vec::with_capacity(a.num_nodes());
    let mut tv_total = 0.0;
    for (ra, rb) in a.iter().zip(b.iter()) {
        let kl: f64 = ra
            .iter()
            .zip(rb)
            .filter(|(&p, _)| p > 0.0)
            .map(|(&p, &q)| p * (p.max(KL_CLAMP).ln() - q.max(KL_CLAMP).ln()))
            .sum();
        per_node_kl.push(kl.max(0.0));
        tv_total += 0.5 * ra.iter().zip(rb).map(|(p, q)| (p - q).abs()).sum::<f64>();
    }
    let n = per_node_kl.len().max(1) as f64;
    Ok(DivergenceStats {
        mean_kl: per_node_kl.iter().sum::<f64>() / n,
        max_kl: per_node_kl.iter().copied().fold(0.0, f64::max),
        mean_tv: tv_total / n,
        per_node_kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn predict_examples() {
        let m = Marginals::new(3, vec![0.0, 1.0, 0.0, 0.5, 0.5, 0.0]);
        assert_eq!(predict_labels(&m), vec![1, 0]);
        let shifted = Marginals::from_logits(2, &[0.3 + 5.0, 0.1 + 5.0]);
        assert_eq!(predict_labels(&shifted), predict_labels(&Marginals::from_logits(2, &[0.3, 0.1])));
    }

    #[test]
    fn iou_examples() {
        let r = iou(&[0, 1, 2, 2], &[0, 1, 2, 2], 4).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.per_class_iou, vec![Some(1.0), Some(1.0), Some(1.0), None]);

        let r = iou(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.mean_iou - 7.0 / 12.0).abs() < 1e-15);
        assert!((r.mean_iou - 0.5833).abs() < 1e-4);

        let r = iou(&[0, 0], &[1, 1], 2).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.0), Some(0.0)]);
        assert_eq!(r.mean_iou, 0.0);

        assert_eq!(iou(&[0], &[0, 1], 2), Err(EvalError::DimMismatch { pred: 1, gt: 2 }));
        assert!(matches!(iou(&[3], &[0], 2), Err(EvalError::LabelRange { label: 3, .. })));
    }

    #[test]
    fn divergence_examples() {
        let a = Marginals::new(2, vec![0.3, 0.7, 0.5, 0.5]);
        let s = compare_marginals(&a, &a).unwrap();
        assert_eq!((s.mean_kl, s.max_kl, s.mean_tv), (0.0, 0.0, 0.0));

        let onehot = Marginals::new(2, vec![1.0, 0.0]);
        let uniform = Marginals::uniform(1, 2);
        let s = compare_marginals(&onehot, &uniform).unwrap();
        assert!((s.mean_kl - 2f64.ln()).abs() < 1e-15);
        assert!((s.mean_tv - 0.5).abs() < 1e-15);
        assert!(compare_marginals(&a, &uniform).is_err());
    }

    proptest! {
        #[test]
        fn relabeling_preserves_mean_iou(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let gt: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let a = iou(&pred, &gt, 4).unwrap();
            let pp: Vec<usize> = pred.iter().map(|&l| perm[l]).collect();
            let pg: Vec<usize> = gt.iter().map(|&l| perm[l]).collect();
            let b = iou(&pp, &pg, 4).unwrap();
            prop_assert!((a.mean_iou - b.mean_iou).abs() < 1e-12);
            for v in a.per_class_iou.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn argmax_invariant_under_monotone_maps(rows in proptest::collection::vec(
            proptest::collection::vec(0.0f64..1.0, 3), 1..20)) {
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let m = Marginals::new(3, flat.clone());
            let mapped = Marginals::new(3, flat.iter().map(|v| (3.0 * v).exp() + 2.0).collect());
            prop_assert_eq!(predict_labels(&m), predict_labels(&mapped));
        }
    }
}
