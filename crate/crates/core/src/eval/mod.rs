//! Precision-recall and ROC analysis from pixel scores, with exact
//! confusion counts at every distinct threshold, plus the MP-vs-FS
//! comparison sweep.

pub mod svg;
pub mod sweep;

use thiserror::Error;

use crate::data::SamplePair;
use crate::graph::ModelGraph;
use crate::loss::RoiMask;
use crate::nn::BnMode;
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

pub use sweep::{run_sweep, SweepCell, SweepResult, SweepRow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pr_roc_curves: ROI contains no positive labels; PR undefined")]
    NoPositives,
    #[error("pr_roc_curves: ROI contains no negative labels; ROC undefined")]
    NoNegatives,
    #[error("pr_roc_curves: labels must be binary")]
    NonBinaryLabels,
    #[error("auc: curve points must be sorted by x")]
    Unsorted,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

/// One curve pair with its areas.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveSet {
    /// (recall, precision), recall non-decreasing.
    pub pr: Vec<(f64, f64)>,
    /// (false positive rate, true positive rate), FPR non-decreasing.
    pub roc: Vec<(f64, f64)>,
    pub auc_pr: f64,
    pub auc_roc: f64,
}

/// PR and ROC curves with AUCs plus the images-presented counter.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub model: String,
    pub images_presented: usize,
    pub per_image: Vec<(String, CurveSet)>,
    pub pooled: CurveSet,
}

/// Trapezoidal area under a curve sorted by x.
pub fn auc(points: &[(f64, f64)]) -> Result<f64, EvalError> {
    if points.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(EvalError::Unsorted);
    }
    let mut area = 0.0;
    for w in points.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    Ok(area)
}

/// Curves from raw (score, label) pixel pairs: thresholds at every
/// distinct score, exact integer confusion counts, endpoints anchored at
/// recall 0 (PR) and FPR 0 (ROC).
pub fn curves_from_pairs(pairs: &mut Vec<(f32, bool)>) -> Result<CurveSet, EvalError> {
    let positives = pairs.iter().filter(|(_, l)| *l).count();
    let negatives = pairs.len() - positives;
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    if negatives == 0 {
        return Err(EvalError::NoNegatives);
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut pr = Vec::new();
    let mut roc = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        if pr.is_empty() {
            // Anchor at recall 0 with the highest-threshold precision.
            pr.push((0.0, precision));
        }
        pr.push((recall, precision));
        roc.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
    }
    let auc_pr = auc(&pr)?;
    let auc_roc = auc(&roc)?;
    Ok(CurveSet {
        pr,
        roc,
        auc_pr,
        auc_roc,
    })
}

/// Curves over the ROI pixels of one score/label map.
pub fn pr_roc_curves(
    scores: &Tensor<f32>,
    labels: &Tensor<f32>,
    roi: &RoiMask<f32>,
) -> Result<CurveSet, EvalError> {
    if scores.shape() != labels.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "pr_roc_curves",
            lhs: scores.shape(),
            rhs: labels.shape(),
        }
        .into());
    }
    if !scores.shape().same_spatial(&roi.shape()) {
        return Err(TensorError::ShapeMismatch {
            op: "pr_roc_curves",
            lhs: scores.shape(),
            rhs: roi.shape(),
        }
        .into());
    }
    if !labels
        .data()
        .iter()
        .all(|&v| v == 0.0 || v == 1.0)
    {
        return Err(EvalError::NonBinaryLabels);
    }
    let mut pairs = collect_pairs(scores, labels, roi);
    curves_from_pairs(&mut pairs)
}

fn collect_pairs(
    scores: &Tensor<f32>,
    labels: &Tensor<f32>,
    roi: &RoiMask<f32>,
) -> Vec<(f32, bool)> {
    let roi_d = roi.tensor().data();
    scores
        .data()
        .iter()
        .zip(labels.data())
        .zip(roi_d)
        .filter(|(_, &r)| r == 1.0)
        .map(|((&s, &l), _)| (s, l == 1.0))
        .collect()
}

/// Run a model over labelled samples and assemble per-image and pooled
/// curves, restricted to each sample's retinography ROI.
pub fn evaluate_model(
    model: &mut ModelGraph<f32>,
    samples: &[&SamplePair],
    images_presented: usize,
    model_id: &str,
) -> Result<EvalReport, EvalError> {
    let mut per_image = Vec::new();
    let mut pooled_pairs: Vec<(f32, bool)> = Vec::new();
    for s in samples {
        let mask = s
            .vessel_mask
            .as_ref()
            .ok_or_else(|| EvalError::Invalid(format!("sample '{}' has no vessel mask", s.id)))?;
        let scores = predict(model, s)?;
        let mut pairs = collect_pairs(&scores, mask, &s.roi_retinography);
        pooled_pairs.extend(pairs.iter().copied());
        let curves = curves_from_pairs(&mut pairs)?;
        per_image.push((s.id.clone(), curves));
    }
    let pooled = curves_from_pairs(&mut pooled_pairs)?;
    Ok(EvalReport {
        model: model_id.to_string(),
        images_presented,
        per_image,
        pooled,
    })
}

/// Eval-mode forward of one sample, padded and cropped as needed.
pub fn predict(model: &mut ModelGraph<f32>, s: &SamplePair) -> Result<Tensor<f32>, EvalError> {
    let mut tape = Tape::new();
    let run = model.forward_padded(&mut tape, s.retinography.clone(), BnMode::Eval)?;
    Ok(tape.value(run.output).clone())
}

/// Per-image plus pooled AUC rows.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("image,auc_pr,auc_roc\n");
    for (id, c) in &report.per_image {
        out.push_str(&format!("{id},{},{}\n", c.auc_pr, c.auc_roc));
    }
    out.push_str(&format!(
        "pooled,{},{}\n",
        report.pooled.auc_pr, report.pooled.auc_roc
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use crate::testutil::rng;
    use rand::Rng;

    fn full_roi(h: usize, w: usize) -> RoiMask<f32> {
        RoiMask::from_fn(h, w, |_, _| true)
    }

    /// Brute-force oracle: recount the confusion matrix from scratch at
    /// every distinct threshold.
    fn brute_force(pairs: &[(f32, bool)]) -> CurveSet {
        let p = pairs.iter().filter(|(_, l)| *l).count() as f64;
        let n = pairs.len() as f64 - p;
        let mut thresholds: Vec<f32> = pairs.iter().map(|(s, _)| *s).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut pr = Vec::new();
        let mut roc = vec![(0.0, 0.0)];
        for (k, &t) in thresholds.iter().enumerate() {
            let tp = pairs.iter().filter(|(s, l)| *s >= t && *l).count() as u64;
            let fp = pairs.iter().filter(|(s, l)| *s >= t && !*l).count() as u64;
            let recall = tp as f64 / p;
            let precision = tp as f64 / (tp + fp) as f64;
            if k == 0 {
                pr.push((0.0, precision));
            }
            pr.push((recall, precision));
            roc.push((fp as f64 / n, tp as f64 / p));
        }
        let auc_pr = auc(&pr).unwrap();
        let auc_roc = auc(&roc).unwrap();
        CurveSet {
            pr,
            roc,
            auc_pr,
            auc_roc,
        }
    }

    #[test]
    fn perfect_scores_have_unit_aucs() {
        let mut m = rng(101);
        let mut labels = Tensor::zeros(Shape::new(1, 1, 10, 10));
        for v in labels.data_mut() {
            *v = if m.gen_bool(0.3) { 1.0 } else { 0.0 };
        }
        let scores = labels.clone();
        let c = pr_roc_curves(&scores, &labels, &full_roi(10, 10)).unwrap();
        assert_eq!(c.auc_pr, 1.0);
        assert_eq!(c.auc_roc, 1.0);
    }

    #[test]
    fn constant_scores_give_prevalence_precision() {
        let mut labels = Tensor::zeros(Shape::new(1, 1, 1, 10));
        for i in 0..3 {
            labels.data_mut()[i] = 1.0;
        }
        let scores = Tensor::full(Shape::new(1, 1, 1, 10), 0.5);
        let c = pr_roc_curves(&scores, &labels, &full_roi(1, 10)).unwrap();
        // One operating point at recall 1 with precision = prevalence.
        assert_eq!(c.pr, vec![(0.0, 0.3), (1.0, 0.3)]);
        assert!((c.auc_pr - 0.3).abs() < 1e-12);
        assert!((c.auc_roc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_enumeration_exactly() {
        let mut m = rng(102);
        for case in 0..20 {
            let n = 50 + case * 47;
            let quantize = case % 3 == 0;
            let pairs: Vec<(f32, bool)> = (0..n)
                .map(|_| {
                    let s: f32 = if quantize {
                        (m.gen_range(0..32) as f32) / 32.0
                    } else {
                        m.gen_range(0.0..1.0)
                    };
                    (s, m.gen_bool(0.25))
                })
                .collect();
            if !pairs.iter().any(|(_, l)| *l) || pairs.iter().all(|(_, l)| *l) {
                continue;
            }
            let mut mine = pairs.clone();
            let got = curves_from_pairs(&mut mine).unwrap();
            let expect = brute_force(&pairs);
            assert_eq!(got.pr, expect.pr, "case {case}");
            assert_eq!(got.roc, expect.roc, "case {case}");
            assert_eq!(got.auc_pr.to_bits(), expect.auc_pr.to_bits());
            assert_eq!(got.auc_roc.to_bits(), expect.auc_roc.to_bits());
        }
    }

    #[test]
    fn random_scores_approach_half_auc_roc() {
        let mut m = rng(103);
        let mut pairs: Vec<(f32, bool)> = (0..100_000)
            .map(|_| (m.gen_range(0.0..1.0), m.gen_bool(0.1)))
            .collect();
        let c = curves_from_pairs(&mut pairs).unwrap();
        assert!((c.auc_roc - 0.5).abs() < 0.01, "auc_roc {}", c.auc_roc);
    }

    #[test]
    fn monotone_rescaling_leaves_curves_unchanged() {
        let mut m = rng(104);
        // Grid scores make the transforms collision-free.
        let pairs: Vec<(f32, bool)> = (0..4000)
            .map(|_| ((m.gen_range(0..1024) as f32) / 1024.0, m.gen_bool(0.2)))
            .collect();
        let mut base = pairs.clone();
        let base_c = curves_from_pairs(&mut base).unwrap();
        for f in [
            |s: f32| 0.25 + 0.5 * s,
            |s: f32| s * s * s,
            |s: f32| (4.0 * s).exp() / 60.0,
        ] {
            let mut mapped: Vec<(f32, bool)> = pairs.iter().map(|&(s, l)| (f(s), l)).collect();
            let c = curves_from_pairs(&mut mapped).unwrap();
            assert_eq!(c.pr, base_c.pr);
            assert_eq!(c.roc, base_c.roc);
        }
    }

    #[test]
    fn missing_positive_or_negative_classes_are_rejected() {
        let ones = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        let zeros = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let scores = Tensor::full(Shape::new(1, 1, 2, 2), 0.4);
        assert!(matches!(
            pr_roc_curves(&scores, &zeros, &full_roi(2, 2)),
            Err(EvalError::NoPositives)
        ));
        assert!(matches!(
            pr_roc_curves(&scores, &ones, &full_roi(2, 2)),
            Err(EvalError::NoNegatives)
        ));
    }

    #[test]
    fn auc_validates_ordering_and_handles_known_shapes() {
        // Two-point diagonal of a random ranker.
        assert_eq!(auc(&[(0.0, 0.0), (1.0, 1.0)]).unwrap(), 0.5);
        // Perfect ROC.
        assert_eq!(auc(&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]).unwrap(), 1.0);
        assert!(matches!(
            auc(&[(0.5, 0.0), (0.0, 1.0)]),
            Err(EvalError::Unsorted)
        ));
    }

    #[test]
    fn pooled_counts_equal_sum_of_per_image_counts() {
        // Two tiny "images" pooled by concatenation: the pooled curve is
        // the curve of the union of pixel pairs.
        let a: Vec<(f32, bool)> = vec![(0.9, true), (0.4, false), (0.6, true)];
        let b: Vec<(f32, bool)> = vec![(0.8, false), (0.7, true), (0.2, false)];
        let mut pooled: Vec<(f32, bool)> = a.iter().chain(&b).copied().collect();
        let c = curves_from_pairs(&mut pooled).unwrap();
        // At threshold 0.6: tp = {0.9, 0.7, 0.6} -> 3, fp = {0.8} -> 1.
        let point = c
            .pr
            .iter()
            .find(|(r, _)| (*r - 1.0).abs() < 1e-12)
            .unwrap();
        assert!((point.1 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn roi_restricts_the_pixel_domain() {
        let mut scores = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let mut labels = Tensor::zeros(Shape::new(1, 1, 2, 2));
        // Outside-ROI pixels would otherwise flip the ranking.
        scores.data_mut().copy_from_slice(&[0.9, 0.1, 0.99, 0.0]);
        labels.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let roi = RoiMask::from_fn(2, 2, |y, _| y == 0);
        let c = pr_roc_curves(&scores, &labels, &roi).unwrap();
        assert_eq!(c.auc_pr, 1.0);
        assert_eq!(c.auc_roc, 1.0);
    }
}
