//! Segmentation metrics: confusion matrix, mean IoU, average precision.

use crate::imagery::{ProbMap, SegMask};
use crate::{Error, Result};

/// Row = ground-truth class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Accumulates one prediction/ground-truth pair.
    pub fn accumulate(&mut self, pred: &SegMask, truth: &SegMask) -> Result<()> {
        if pred.width != truth.width
            || pred.height != truth.height
            || pred.num_classes != self.num_classes
            || truth.num_classes != self.num_classes
        {
            return Err(Error::Config("confusion accumulate shape mismatch".into()));
        }
        for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
            self.counts[t as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn confusion(pred: &SegMask, truth: &SegMask) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::zeros(truth.num_classes);
    m.accumulate(pred, truth)?;
    Ok(m)
}

/// Per-class IoU; `None` for classes absent from both prediction and truth.
pub fn per_class_iou(m: &ConfusionMatrix) -> Vec<Option<f64>> {
    let c = m.num_classes;
    (0..c)
        .map(|k| {
            let tp = m.at(k, k);
            let fp: u64 = (0..c).filter(|&t| t != k).map(|t| m.at(t, k)).sum();
            let fne: u64 = (0..c).filter(|&p| p != k).map(|p| m.at(k, p)).sum();
            let denom = tp + fp + fne;
            if denom == 0 {
                None
            } else {
                Some(tp as f64 / denom as f64)
            }
        })
        .collect()
}

/// Mean IoU over classes present in prediction or truth. Errors when no
/// class is present at all.
pub fn miou(m: &ConfusionMatrix) -> Result<f64> {
    let ious: Vec<f64> = per_class_iou(m).into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::UndefinedMetric(
            "mIoU undefined: no class present in prediction or truth".into(),
        ));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Average precision of one class from per-pixel scores.
///
/// Pixels are ranked by descending score, ties broken by ascending pixel
/// index; AP is the mean of the precisions measured at each positive pixel's
/// rank. Returns `None` when the class has no positive pixel.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), positives.len());
    if !positives.iter().any(|&p| p) {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0u64;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank as u64 + 1) as f64;
        }
    }
    Some(sum / hits as f64)
}

/// Mean AP over classes with at least one positive pixel.
///
/// `probs` and `truths` are parallel per-image slices; scores and positives
/// for each class are pooled across all images before ranking.
pub fn mean_average_precision(probs: &[ProbMap], truths: &[SegMask]) -> Result<f64> {
    if probs.len() != truths.len() || probs.is_empty() {
        return Err(Error::Config("need equal-length non-empty inputs".into()));
    }
    let c = truths[0].num_classes;
    let mut aps = Vec::new();
    for class in 0..c {
        let mut scores = Vec::new();
        let mut positives = Vec::new();
        for (p, t) in probs.iter().zip(truths) {
            if p.num_classes != c || t.num_classes != c || p.data.len() != t.labels.len() * c {
                return Err(Error::Config("mAP input shape mismatch".into()));
            }
            for (i, &l) in t.labels.iter().enumerate() {
                scores.push(p.data[i * c + class]);
                positives.push(l as usize == class);
            }
        }
        if let Some(ap) = average_precision(&scores, &positives) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        return Err(Error::UndefinedMetric(
            "mAP undefined: no class has a positive pixel".into(),
        ));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Summary of an evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub miou: f64,
    pub mean_ap: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

/// Pools the confusion matrix and per-class rankings over a whole split.
pub fn evaluate(
    preds: &[SegMask],
    probs: &[ProbMap],
    truths: &[SegMask],
) -> Result<EvalReport> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::Config("need equal-length non-empty inputs".into()));
    }
    let mut m = ConfusionMatrix::zeros(truths[0].num_classes);
    for (p, t) in preds.iter().zip(truths) {
        m.accumulate(p, t)?;
    }
    Ok(EvalReport {
        miou: miou(&m)?,
        mean_ap: mean_average_precision(probs, truths)?,
        per_class_iou: per_class_iou(&m),
        confusion: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn mask(c: usize, labels: Vec<u8>) -> SegMask {
        let n = labels.len();
        SegMask::new(n, 1, c, labels).unwrap()
    }

    #[test]
    fn hand_confusion_and_miou() {
        // 6 pixels, 3 classes:
        //   truth: 0 0 1 1 2 2
        //   pred:  0 1 1 1 2 0
        let truth = mask(3, vec![0, 0, 1, 1, 2, 2]);
        let pred = mask(3, vec![0, 1, 1, 1, 2, 0]);
        let m = confusion(&pred, &truth).unwrap();
        assert_eq!(m.at(0, 0), 1);
        assert_eq!(m.at(0, 1), 1);
        assert_eq!(m.at(1, 1), 2);
        assert_eq!(m.at(2, 2), 1);
        assert_eq!(m.at(2, 0), 1);
        assert_eq!(m.total(), 6);
        // IoU: class0 = 1/(1+1+1), class1 = 2/(2+1+0), class2 = 1/(1+0+1)
        let expect = (1.0 / 3.0 + 2.0 / 3.0 + 0.5) / 3.0;
        assert!((miou(&m).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_miou_one() {
        let truth = mask(4, vec![0, 1, 2, 3, 0, 1]);
        let m = confusion(&truth, &truth).unwrap();
        assert_eq!(miou(&m).unwrap(), 1.0);
    }

    #[test]
    fn absent_class_excluded() {
        // class 2 appears nowhere: mIoU averages over classes 0 and 1 only
        let truth = mask(3, vec![0, 0, 1, 1]);
        let pred = mask(3, vec![0, 1, 1, 1]);
        let m = confusion(&pred, &truth).unwrap();
        let ious = per_class_iou(&m);
        assert!(ious[2].is_none());
        let expect = (1.0 / 2.0 + 2.0 / 3.0) / 2.0;
        assert!((miou(&m).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn all_empty_confusion_is_error() {
        let m = ConfusionMatrix::zeros(4);
        assert!(matches!(miou(&m), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn miou_relabeling_invariance() {
        let mut r = SplitMix64::new(41);
        for _ in 0..20 {
            let c = 4;
            let truth: Vec<u8> = (0..60).map(|_| r.below(c) as u8).collect();
            let pred: Vec<u8> = (0..60).map(|_| r.below(c) as u8).collect();
            let perm = [2u8, 0, 3, 1];
            let base = miou(&confusion(&mask(c, pred.clone()), &mask(c, truth.clone())).unwrap());
            let relab = miou(
                &confusion(
                    &mask(c, pred.iter().map(|&l| perm[l as usize]).collect()),
                    &mask(c, truth.iter().map(|&l| perm[l as usize]).collect()),
                )
                .unwrap(),
            );
            assert!((base.unwrap() - relab.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_average_precision() {
        // scores  0.9 0.8 0.7 0.6 0.5, positives at ranks 1, 3, 4
        // AP = (1/1 + 2/3 + 3/4) / 3
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5];
        let pos = [true, false, true, true, false];
        let ap = average_precision(&scores, &pos).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0 + 0.75) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ap_perfect_and_worst_ranking() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(average_precision(&scores, &[true, true, false, false]), Some(1.0));
        // positives ranked last: AP = (1/3 + 2/4) / 2
        let ap = average_precision(&scores, &[false, false, true, true]).unwrap();
        assert!((ap - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ap_no_positive_is_none() {
        assert_eq!(average_precision(&[0.5, 0.4], &[false, false]), None);
    }

    #[test]
    fn ap_ties_break_by_pixel_index() {
        // all scores equal: ranking is pixel order, so AP depends only on
        // the positions of positives
        let scores = [0.5; 4];
        let ap = average_precision(&scores, &[false, true, false, true]).unwrap();
        assert!((ap - (0.5 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ap_invariant_to_monotone_score_transform() {
        let mut r = SplitMix64::new(42);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..40).map(|_| r.next_f64()).collect();
            let pos: Vec<bool> = (0..40).map(|_| r.next_f64() < 0.3).collect();
            if !pos.iter().any(|&p| p) {
                continue;
            }
            let squashed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).tanh()).collect();
            let a = average_precision(&scores, &pos).unwrap();
            let b = average_precision(&squashed, &pos).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ap_matches_brute_force_with_ties() {
        // brute force: for each positive, precision at its rank under the
        // stable (score desc, index asc) order
        let mut r = SplitMix64::new(43);
        for _ in 0..50 {
            // draw from few distinct values to force ties
            let scores: Vec<f64> = (0..30).map(|_| (r.below(5) as f64) / 4.0).collect();
            let pos: Vec<bool> = (0..30).map(|_| r.next_f64() < 0.4).collect();
            if !pos.iter().any(|&p| p) {
                continue;
            }
            let mut order: Vec<usize> = (0..30).collect();
            order.sort_by(|&a, &b| {
                scores[b]
                    .partial_cmp(&scores[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut hits = 0.0;
            let mut acc = 0.0;
            for (rank, &i) in order.iter().enumerate() {
                if pos[i] {
                    hits += 1.0;
                    acc += hits / (rank + 1) as f64;
                }
            }
            let expect = acc / hits;
            let got = average_precision(&scores, &pos).unwrap();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn map_pools_across_images() {
        let c = 2;
        let t1 = mask(c, vec![0, 1]);
        let t2 = mask(c, vec![1, 1]);
        let p1 = ProbMap::new(2, 1, c, vec![0.9, 0.1, 0.4, 0.6]).unwrap();
        let p2 = ProbMap::new(2, 1, c, vec![0.3, 0.7, 0.2, 0.8]).unwrap();
        let got = mean_average_precision(&[p1, p2], &[t1, t2]).unwrap();
        // class 0: scores [0.9,0.4,0.3,0.2], positive at pixel 0 -> AP 1
        // class 1: scores [0.1,0.6,0.7,0.8], positives at 1,2,3
        //   ranking: 0.8, 0.7, 0.6, 0.1 -> precisions 1, 1, 1 -> AP 1
        assert!((got - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_report_consistency() {
        let c = 3;
        let truths = vec![mask(c, vec![0, 0, 1, 2]), mask(c, vec![1, 1, 2, 0])];
        let preds = vec![mask(c, vec![0, 1, 1, 2]), mask(c, vec![1, 1, 2, 2])];
        let uniform = ProbMap::new(4, 1, c, vec![1.0 / 3.0; 12]).unwrap();
        let report = evaluate(&preds, &[uniform.clone(), uniform], &truths).unwrap();
        assert_eq!(report.confusion.total(), 8);
        let manual = {
            let mut m = ConfusionMatrix::zeros(c);
            m.accumulate(&preds[0], &truths[0]).unwrap();
            m.accumulate(&preds[1], &truths[1]).unwrap();
            miou(&m).unwrap()
        };
        assert!((report.miou - manual).abs() < 1e-12);
        assert!(report.mean_ap > 0.0 && report.mean_ap <= 1.0);
    }
}
