//! Segmentation evaluation: confusion counts, IoU/recall/precision/F1, and
//! the k-fold cross-validation harness.
//!
//! Target pixels (mask value 1) are the positive class. Sets of images are
//! micro-averaged: confusion counts are pooled over every pixel of every
//! image and the metrics computed once from the pooled counts, so images
//! without any target contribute background evidence instead of producing
//! degenerate per-image ratios. Any metric whose denominator is zero is an
//! explicit [`None`] — serialized as JSON `null` and named in
//! `undefined_fields` — never silently coerced to 0, 1, or NaN.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataprep::LabeledImage;
use crate::error::{Error, Result};
use crate::imgio::{Image, Mask};

/// Pixel-level confusion counts with target = positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    #[serde(rename = "tp")]
    pub true_positives: u64,
    #[serde(rename = "fp")]
    pub false_positives: u64,
    #[serde(rename = "fn")]
    pub false_negatives: u64,
    #[serde(rename = "tn")]
    pub true_negatives: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_positives + self.false_positives + self.false_negatives + self.true_negatives
    }

    /// Pool counts from another evaluation into this one.
    pub fn accumulate(&mut self, other: &ConfusionCounts) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
        self.true_negatives += other.true_negatives;
    }
}

/// Derived metrics; `None` marks an undefined (0/0) value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    /// `[target IoU, background IoU]`.
    pub per_class_iou: [Option<f64>; 2],
    pub counts: ConfusionCounts,
    pub n_images: usize,
    /// Names of every field above that came out undefined.
    pub undefined_fields: Vec<String>,
}

/// Count agreements and disagreements between a predicted and a true mask.
pub fn confusion(pred: &Mask, truth: &Mask) -> Result<ConfusionCounts> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(Error::DimensionMismatch(format!(
            "pred {}x{} vs truth {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p, t) {
            (1, 1) => counts.true_positives += 1,
            (1, 0) => counts.false_positives += 1,
            (0, 1) => counts.false_negatives += 1,
            _ => counts.true_negatives += 1,
        }
    }
    Ok(counts)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Compute every metric from pooled counts. Undefined ratios stay `None`:
/// target IoU needs `tp+fp+fn > 0`, background IoU `tn+fp+fn > 0`, recall
/// `tp+fn > 0`, precision `tp+fp > 0`, F1 `recall+precision > 0`, and mIOU
/// both class IoUs. `n_images` is set to 1; [`evaluate`] overwrites it with
/// the pooled set size.
pub fn compute_metrics(counts: ConfusionCounts) -> Result<MetricsReport> {
    if counts.total() == 0 {
        return Err(Error::InvalidConfig("metrics over zero pixels".into()));
    }
    let iou_target = ratio(
        counts.true_positives,
        counts.true_positives + counts.false_positives + counts.false_negatives,
    );
    let iou_background = ratio(
        counts.true_negatives,
        counts.true_negatives + counts.false_positives + counts.false_negatives,
    );
    let miou = match (iou_target, iou_background) {
        (Some(t), Some(b)) => Some((t + b) / 2.0),
        _ => None,
    };
    let recall = ratio(
        counts.true_positives,
        counts.true_positives + counts.false_negatives,
    );
    let precision = ratio(
        counts.true_positives,
        counts.true_positives + counts.false_positives,
    );
    let f1 = match (recall, precision) {
        (Some(r), Some(p)) if r + p > 0.0 => Some(2.0 * r * p / (r + p)),
        _ => None,
    };

    let mut undefined_fields = Vec::new();
    for (name, value) in [
        ("miou", miou),
        ("recall", recall),
        ("precision", precision),
        ("f1", f1),
        ("per_class_iou[0]", iou_target),
        ("per_class_iou[1]", iou_background),
    ] {
        if value.is_none() {
            undefined_fields.push(name.to_string());
        }
    }

    Ok(MetricsReport {
        miou,
        recall,
        precision,
        f1,
        per_class_iou: [iou_target, iou_background],
        counts,
        n_images: 1,
        undefined_fields,
    })
}

/// Pooled evaluation of a whole set plus per-image breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub pooled: MetricsReport,
    pub per_image: Vec<MetricsReport>,
}

/// Run a predictor over a labeled set and micro-average: counts are pooled
/// over all pixels of all images, metrics computed once from the pool.
pub fn evaluate(
    items: &[LabeledImage],
    mut predict: impl FnMut(&Image) -> Result<Mask>,
) -> Result<EvaluationReport> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut pooled_counts = ConfusionCounts::default();
    let mut per_image = Vec::with_capacity(items.len());
    for item in items {
        let pred = predict(&item.image)?;
        let counts = confusion(&pred, &item.mask)?;
        pooled_counts.accumulate(&counts);
        per_image.push(compute_metrics(counts)?);
    }
    let mut pooled = compute_metrics(pooled_counts)?;
    pooled.n_images = items.len();
    Ok(EvaluationReport { pooled, per_image })
}

/// Deterministic k-fold split: shuffle `0..n_items` with a seeded generator,
/// then cut into k folds as equal as possible — the first `n mod k` folds
/// take one extra item. Every index lands in exactly one test fold; the
/// matching train set is everything else, in shuffled order.
pub fn kfold_split(n_items: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k = {k} must be >= 2")));
    }
    if n_items < k {
        return Err(Error::InvalidConfig(format!(
            "cannot split {n_items} items into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let base = n_items / k;
    let extra = n_items % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let test: Vec<usize> = order[start..start + size].to_vec();
        let train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .copied()
            .collect();
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}

/// Per-field mean over folds, with undefined values excluded and counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedMetrics {
    pub miou: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub n_folds: usize,
    /// How many folds had each field defined; fields absent from every fold
    /// average to `None`.
    pub defined_counts: DefinedCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinedCounts {
    pub miou: usize,
    pub recall: usize,
    pub precision: usize,
    pub f1: usize,
}

/// Arithmetic mean of the defined values of each metric across reports.
pub fn average_reports(reports: &[MetricsReport]) -> Result<AveragedMetrics> {
    if reports.is_empty() {
        return Err(Error::EmptyBatch);
    }
    fn fold(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
        let defined: Vec<f64> = values.flatten().collect();
        if defined.is_empty() {
            (None, 0)
        } else {
            (
                Some(defined.iter().sum::<f64>() / defined.len() as f64),
                defined.len(),
            )
        }
    }
    let (miou, n_miou) = fold(reports.iter().map(|r| r.miou));
    let (recall, n_recall) = fold(reports.iter().map(|r| r.recall));
    let (precision, n_precision) = fold(reports.iter().map(|r| r.precision));
    let (f1, n_f1) = fold(reports.iter().map(|r| r.f1));
    Ok(AveragedMetrics {
        miou,
        recall,
        precision,
        f1,
        n_folds: reports.len(),
        defined_counts: DefinedCounts {
            miou: n_miou,
            recall: n_recall,
            precision: n_precision,
            f1: n_f1,
        },
    })
}

/// Full cross-validation result: one report per fold plus the average.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossValidation {
    pub folds: Vec<MetricsReport>,
    pub averaged: AveragedMetrics,
}

/// Run the k-fold protocol with a caller-supplied fold runner (train on the
/// first index list, evaluate on the second, return the pooled report).
pub fn cross_validate(
    n_items: usize,
    k: usize,
    seed: u64,
    mut run_fold: impl FnMut(&[usize], &[usize]) -> Result<MetricsReport>,
) -> Result<CrossValidation> {
    let splits = kfold_split(n_items, k, seed)?;
    let mut folds = Vec::with_capacity(k);
    for (train, test) in &splits {
        folds.push(run_fold(train, test)?);
    }
    let averaged = average_reports(&folds)?;
    Ok(CrossValidation { folds, averaged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask_from(bits: &[u8], w: usize, h: usize) -> Mask {
        Mask::new(w, h, bits.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_counts() {
        let truth = mask_from(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0], 4, 4);
        let counts = confusion(&truth, &truth).unwrap();
        assert_eq!(
            counts,
            ConfusionCounts {
                true_positives: 3,
                false_positives: 0,
                false_negatives: 0,
                true_negatives: 13,
            }
        );
    }

    #[test]
    fn null_predictor_counts() {
        let truth = mask_from(&[1, 1, 1, 1, 0, 0, 0, 0], 4, 2);
        let pred = mask_from(&[0; 8], 4, 2);
        let counts = confusion(&pred, &truth).unwrap();
        assert_eq!(counts.false_negatives, 4);
        assert_eq!(counts.true_positives, 0);
        assert_eq!(counts.true_negatives, 4);
    }

    #[test]
    fn confusion_matches_independent_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let a: Vec<u8> = (0..256).map(|_| rng.gen_bool(0.3) as u8).collect();
            let b: Vec<u8> = (0..256).map(|_| rng.gen_bool(0.3) as u8).collect();
            let pred = mask_from(&a, 16, 16);
            let truth = mask_from(&b, 16, 16);
            let counts = confusion(&pred, &truth).unwrap();
            // Recount with if/else chains instead of the match.
            let (mut tp, mut fp, mut fnn, mut tn) = (0u64, 0u64, 0u64, 0u64);
            for i in 0..256 {
                if a[i] == 1 && b[i] == 1 {
                    tp += 1;
                } else if a[i] == 1 {
                    fp += 1;
                } else if b[i] == 1 {
                    fnn += 1;
                } else {
                    tn += 1;
                }
            }
            assert_eq!((tp, fp, fnn, tn), (
                counts.true_positives,
                counts.false_positives,
                counts.false_negatives,
                counts.true_negatives
            ));
        }
    }

    #[test]
    fn worked_example_from_small_counts() {
        let report = compute_metrics(ConfusionCounts {
            true_positives: 2,
            false_positives: 1,
            false_negatives: 1,
            true_negatives: 12,
        })
        .unwrap();
        let two_thirds = 2.0 / 3.0;
        assert_eq!(report.recall, Some(two_thirds));
        assert_eq!(report.precision, Some(two_thirds));
        assert!((report.f1.unwrap() - two_thirds).abs() < 1e-15);
        assert_eq!(report.per_class_iou[0], Some(0.5));
        assert_eq!(report.per_class_iou[1], Some(12.0 / 14.0));
        assert!((report.miou.unwrap() - (0.5 + 12.0 / 14.0) / 2.0).abs() < 1e-15);
        assert!(report.undefined_fields.is_empty());
    }

    #[test]
    fn perfect_counts_give_all_ones() {
        let report = compute_metrics(ConfusionCounts {
            true_positives: 5,
            false_positives: 0,
            false_negatives: 0,
            true_negatives: 11,
        })
        .unwrap();
        assert_eq!(report.miou, Some(1.0));
        assert_eq!(report.recall, Some(1.0));
        assert_eq!(report.precision, Some(1.0));
        assert_eq!(report.f1, Some(1.0));
    }

    #[test]
    fn zero_over_zero_yields_undefined_markers() {
        // No predicted positives, some missed targets: precision 0/0.
        let report = compute_metrics(ConfusionCounts {
            true_positives: 0,
            false_positives: 0,
            false_negatives: 3,
            true_negatives: 13,
        })
        .unwrap();
        assert_eq!(report.precision, None);
        assert_eq!(report.recall, Some(0.0));
        assert_eq!(report.f1, None);
        assert!(report.undefined_fields.contains(&"precision".to_string()));
        assert!(report.undefined_fields.contains(&"f1".to_string()));

        // All-background truth and prediction: everything target-sided is 0/0.
        let report = compute_metrics(ConfusionCounts {
            true_negatives: 16,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(report.per_class_iou[0], None);
        assert_eq!(report.miou, None);
        assert_eq!(report.recall, None);
        assert_eq!(report.precision, None);
        assert_eq!(report.f1, None);
        assert_eq!(report.per_class_iou[1], Some(1.0));
    }

    #[test]
    fn zero_total_is_an_error() {
        assert!(compute_metrics(ConfusionCounts::default()).is_err());
    }

    #[test]
    fn report_serializes_null_for_undefined() {
        let report = compute_metrics(ConfusionCounts {
            true_negatives: 4,
            ..Default::default()
        })
        .unwrap();
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["miou"], serde_json::Value::Null);
        assert_eq!(json["counts"]["tn"], 4);
        assert_eq!(json["counts"]["fn"], 0);
        assert!(json["undefined_fields"]
            .as_array()
            .unwrap()
            .contains(&serde_json::json!("recall")));
    }

    #[test]
    fn kfold_sizes_follow_balanced_remainder_rule() {
        let folds = kfold_split(10, 4, 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|(_, test)| test.len()).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);

        let folds = kfold_split(8, 4, 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|(_, test)| test.len()).collect();
        assert_eq!(sizes, vec![2, 2, 2, 2]);
    }

    #[test]
    fn kfold_is_seed_deterministic() {
        assert_eq!(kfold_split(20, 4, 7).unwrap(), kfold_split(20, 4, 7).unwrap());
        assert_ne!(kfold_split(20, 4, 7).unwrap(), kfold_split(20, 4, 8).unwrap());
    }

    #[test]
    fn kfold_rejects_bad_parameters() {
        assert!(kfold_split(3, 4, 0).is_err());
        assert!(kfold_split(10, 1, 0).is_err());
    }

    #[test]
    fn evaluate_micro_averages_counts() {
        let image = Image::constant(4, 2, 0.5).unwrap();
        let truth = mask_from(&[1, 1, 0, 0, 0, 0, 0, 0], 4, 2);
        let item = LabeledImage::new(image, truth).unwrap();
        // Predictor marks only the first pixel.
        let predict = |img: &Image| {
            let mut m = vec![0u8; img.data().len()];
            m[0] = 1;
            Mask::new(img.width(), img.height(), m)
        };

        let single = evaluate(std::slice::from_ref(&item), predict).unwrap();
        let direct = compute_metrics(ConfusionCounts {
            true_positives: 1,
            false_positives: 0,
            false_negatives: 1,
            true_negatives: 6,
        })
        .unwrap();
        assert_eq!(single.pooled, direct);

        // Duplicating an image scales every count but leaves ratios alone.
        let double = evaluate(&[item.clone(), item.clone()], predict).unwrap();
        assert_eq!(double.pooled.counts.true_positives, 2);
        assert_eq!(double.pooled.miou, single.pooled.miou);
        assert_eq!(double.pooled.f1, single.pooled.f1);
        assert_eq!(double.pooled.n_images, 2);
        assert_eq!(double.per_image.len(), 2);
    }

    #[test]
    fn evaluate_is_additive_over_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut make_item = |density: f64| {
            let data = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mask: Vec<u8> = (0..16).map(|_| rng.gen_bool(density) as u8).collect();
            LabeledImage::new(
                Image::new(4, 4, data).unwrap(),
                Mask::new(4, 4, mask).unwrap(),
            )
            .unwrap()
        };
        let set_a: Vec<_> = (0..3).map(|_| make_item(0.2)).collect();
        let set_b: Vec<_> = (0..2).map(|_| make_item(0.5)).collect();
        let union: Vec<_> = set_a.iter().chain(&set_b).cloned().collect();

        let predict = |img: &Image| {
            let m = img.data().iter().map(|&v| (v > 0.5) as u8).collect();
            Mask::new(img.width(), img.height(), m)
        };
        let ra = evaluate(&set_a, predict).unwrap();
        let rb = evaluate(&set_b, predict).unwrap();
        let ru = evaluate(&union, predict).unwrap();
        let mut pooled = ra.pooled.counts;
        pooled.accumulate(&rb.pooled.counts);
        assert_eq!(ru.pooled.counts, pooled);
    }

    #[test]
    fn averaging_skips_undefined_fields_with_counts() {
        let defined = compute_metrics(ConfusionCounts {
            true_positives: 2,
            false_positives: 1,
            false_negatives: 1,
            true_negatives: 12,
        })
        .unwrap();
        let undefined = compute_metrics(ConfusionCounts {
            true_negatives: 16,
            ..Default::default()
        })
        .unwrap();
        let avg = average_reports(&[defined.clone(), undefined]).unwrap();
        assert_eq!(avg.n_folds, 2);
        assert_eq!(avg.defined_counts.miou, 1);
        assert_eq!(avg.miou, defined.miou);
        assert_eq!(avg.defined_counts.f1, 1);
        assert_eq!(avg.f1, defined.f1);
    }

    #[test]
    fn cross_validate_feeds_disjoint_folds() {
        let mut seen_tests: Vec<usize> = Vec::new();
        let cv = cross_validate(10, 4, 11, |train, test| {
            assert_eq!(train.len() + test.len(), 10);
            for i in test {
                assert!(!train.contains(i));
            }
            seen_tests.extend_from_slice(test);
            compute_metrics(ConfusionCounts {
                true_positives: 1 + test.len() as u64,
                false_positives: 1,
                false_negatives: 1,
                true_negatives: 13,
            })
        })
        .unwrap();
        seen_tests.sort_unstable();
        assert_eq!(seen_tests, (0..10).collect::<Vec<_>>());
        assert_eq!(cv.folds.len(), 4);
        assert_eq!(cv.averaged.defined_counts.recall, 4);
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(
            tp in 0u64..1000, fp in 0u64..1000, fnn in 0u64..1000, tn in 0u64..1000,
        ) {
            prop_assume!(tp + fp + fnn + tn > 0);
            let report = compute_metrics(ConfusionCounts {
                true_positives: tp,
                false_positives: fp,
                false_negatives: fnn,
                true_negatives: tn,
            }).unwrap();
            for value in [report.miou, report.recall, report.precision, report.f1,
                          report.per_class_iou[0], report.per_class_iou[1]]
                .into_iter()
                .flatten()
            {
                prop_assert!((0.0..=1.0).contains(&value));
                prop_assert!(value.is_finite());
            }
            // Definitional identity, recomputed from the report's own fields.
            if let (Some(r), Some(p), Some(f1)) = (report.recall, report.precision, report.f1) {
                prop_assert!((f1 - 2.0 * r * p / (r + p)).abs() < 1e-12);
            }
        }

        #[test]
        fn kfold_always_partitions(n in 4usize..60, k in 2usize..6, seed in 0u64..100) {
            prop_assume!(n >= k);
            let folds = kfold_split(n, k, seed).unwrap();
            let mut all_test: Vec<usize> = folds.iter().flat_map(|(_, t)| t.clone()).collect();
            all_test.sort_unstable();
            prop_assert_eq!(all_test, (0..n).collect::<Vec<_>>());
            for (train, test) in &folds {
                prop_assert_eq!(train.len() + test.len(), n);
                let max = folds.iter().map(|(_, t)| t.len()).max().unwrap();
                let min = folds.iter().map(|(_, t)| t.len()).min().unwrap();
                prop_assert!(max - min <= 1);
                for i in test {
                    prop_assert!(!train.contains(i));
                }
            }
        }
    }
}
