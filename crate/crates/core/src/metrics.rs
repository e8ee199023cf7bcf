//! Evaluation metrics: per-class and mean intersection-over-union for the
//! segmentation masks, and top-1 answer accuracy overall and per question
//! type.
//!
//! IoU is computed on masks thresholded at sigmoid probability 0.5 (logit
//! 0), through two bookkeeping routes that must agree on integer counts:
//! the set form |P ∩ P̂| / (|P| + |P̂| − |P ∩ P̂|) and the confusion form
//! TP / (TP + FP + FN). A class empty in both prediction and target scores
//! IoU 1.0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction shape {pred:?} does not match target shape {target:?}")]
    ShapeMismatch { pred: Vec<usize>, target: Vec<usize> },
    #[error("expected rank-4 [N, K, H, W] masks, got {0:?}")]
    BadRank(Vec<usize>),
    #[error("mask accumulator built for {expected} classes, batch has {actual}")]
    ClassCountMismatch { expected: usize, actual: usize },
    #[error("target element {index} is {value}, expected exactly 0 or 1")]
    NonBinaryTarget { index: usize, value: f64 },
    #[error("lengths disagree: {0}")]
    LengthMismatch(String),
    #[error("unknown question type {0:?}")]
    UnknownQuestionType(String),
}

/// Per-class pixel confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// TP / (TP + FP + FN); 1.0 when the class is absent from both masks.
    pub fn iou(&self) -> f64 {
        let union = self.true_pos + self.false_pos + self.false_neg;
        if union == 0 {
            1.0
        } else {
            self.true_pos as f64 / union as f64
        }
    }
}

/// Streaming per-class confusion accumulator, usable across batches.
#[derive(Clone, Debug)]
pub struct MiouAccumulator {
    counts: Vec<ConfusionCounts>,
}

impl MiouAccumulator {
    pub fn new(n_classes: usize) -> Self {
        MiouAccumulator { counts: vec![ConfusionCounts::default(); n_classes] }
    }

    /// Threshold logits at sigmoid(z) > 0.5 (i.e. z > 0) and accumulate
    /// both counting routes, asserting they agree exactly.
    pub fn add_batch<S: Scalar>(
        &mut self,
        pred_logits: &Tensor<S>,
        target: &Tensor<S>,
    ) -> Result<(), MetricsError> {
        if pred_logits.shape() != target.shape() {
            return Err(MetricsError::ShapeMismatch {
                pred: pred_logits.shape().to_vec(),
                target: target.shape().to_vec(),
            });
        }
        let &[n, k, h, w] = pred_logits.shape() else {
            return Err(MetricsError::BadRank(pred_logits.shape().to_vec()));
        };
        if k != self.counts.len() {
            return Err(MetricsError::ClassCountMismatch {
                expected: self.counts.len(),
                actual: k,
            });
        }
        let plane = h * w;
        let z = pred_logits.data();
        let t = target.data();
        for ni in 0..n {
            for ki in 0..k {
                let base = (ni * k + ki) * plane;
                // set-form tallies
                let (mut n_target, mut n_pred, mut n_inter) = (0u64, 0u64, 0u64);
                let mut cc = ConfusionCounts::default();
                for i in base..base + plane {
                    let tv = t[i];
                    if tv != S::zero() && tv != S::one() {
                        return Err(MetricsError::NonBinaryTarget {
                            index: i,
                            value: tv.as_f64(),
                        });
                    }
                    let p = z[i] > S::zero();
                    let gt = tv == S::one();
                    if gt {
                        n_target += 1;
                    }
                    if p {
                        n_pred += 1;
                    }
                    match (p, gt) {
                        (true, true) => {
                            n_inter += 1;
                            cc.true_pos += 1;
                        }
                        (true, false) => cc.false_pos += 1,
                        (false, true) => cc.false_neg += 1,
                        (false, false) => cc.true_neg += 1,
                    }
                }
                assert_eq!(n_inter, cc.true_pos, "set and confusion intersections diverged");
                assert_eq!(
                    n_target + n_pred - n_inter,
                    cc.true_pos + cc.false_pos + cc.false_neg,
                    "set and confusion unions diverged"
                );
                let agg = &mut self.counts[ki];
                agg.true_pos += cc.true_pos;
                agg.false_pos += cc.false_pos;
                agg.false_neg += cc.false_neg;
                agg.true_neg += cc.true_neg;
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> &[ConfusionCounts] {
        &self.counts
    }

    pub fn finalize(&self) -> MiouReport {
        let per_class: Vec<f64> = self.counts.iter().map(ConfusionCounts::iou).collect();
        let mean = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
        MiouReport { per_class, mean }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// One-shot mIoU over a single batch.
pub fn miou<S: Scalar>(
    pred_logits: &Tensor<S>,
    target: &Tensor<S>,
) -> Result<MiouReport, MetricsError> {
    let &[_, k, _, _] = pred_logits.shape() else {
        return Err(MetricsError::BadRank(pred_logits.shape().to_vec()));
    };
    let mut acc = MiouAccumulator::new(k);
    acc.add_batch(pred_logits, target)?;
    Ok(acc.finalize())
}

/// The four annotated question types.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuestionType {
    #[serde(rename = "Simple Counting")]
    SimpleCounting,
    #[serde(rename = "Complex Counting")]
    ComplexCounting,
    #[serde(rename = "Yes/No")]
    YesNo,
    #[serde(rename = "Condition Recognition")]
    ConditionRecognition,
}

impl QuestionType {
    pub const ALL: [QuestionType; 4] = [
        QuestionType::SimpleCounting,
        QuestionType::ComplexCounting,
        QuestionType::YesNo,
        QuestionType::ConditionRecognition,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            QuestionType::SimpleCounting => "Simple Counting",
            QuestionType::ComplexCounting => "Complex Counting",
            QuestionType::YesNo => "Yes/No",
            QuestionType::ConditionRecognition => "Condition Recognition",
        }
    }

    /// Stable lowercase identifier for CSV headers and CLI output.
    pub fn slug(&self) -> &'static str {
        match self {
            QuestionType::SimpleCounting => "simple_counting",
            QuestionType::ComplexCounting => "complex_counting",
            QuestionType::YesNo => "yes_no",
            QuestionType::ConditionRecognition => "condition_recognition",
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuestionType {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QuestionType::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| MetricsError::UnknownQuestionType(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TypeTally {
    pub correct: u64,
    pub total: u64,
}

impl TypeTally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct VqaAccuracyReport {
    pub overall: TypeTally,
    /// Indexed parallel to [`QuestionType::ALL`].
    pub per_type: [TypeTally; 4],
}

impl VqaAccuracyReport {
    pub fn for_type(&self, ty: QuestionType) -> TypeTally {
        let idx = QuestionType::ALL.iter().position(|t| *t == ty).expect("known type");
        self.per_type[idx]
    }
}

/// Streaming accuracy accumulator.
#[derive(Clone, Debug, Default)]
pub struct AccuracyAccumulator {
    overall: TypeTally,
    per_type: [TypeTally; 4],
}

impl AccuracyAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_batch<S: Scalar>(
        &mut self,
        logits: &Tensor<S>,
        targets: &[usize],
        types: &[QuestionType],
    ) -> Result<(), MetricsError> {
        let &[n, c] = logits.shape() else {
            return Err(MetricsError::BadRank(logits.shape().to_vec()));
        };
        if targets.len() != n || types.len() != n {
            return Err(MetricsError::LengthMismatch(format!(
                "{n} logit rows, {} targets, {} types",
                targets.len(),
                types.len()
            )));
        }
        let x = logits.data();
        for ni in 0..n {
            let row = &x[ni * c..(ni + 1) * c];
            let mut best = 0usize;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            let correct = best == targets[ni];
            let idx = QuestionType::ALL.iter().position(|t| *t == types[ni]).expect("known type");
            self.overall.total += 1;
            self.per_type[idx].total += 1;
            if correct {
                self.overall.correct += 1;
                self.per_type[idx].correct += 1;
            }
        }
        Ok(())
    }

    pub fn finalize(&self) -> VqaAccuracyReport {
        VqaAccuracyReport { overall: self.overall, per_type: self.per_type }
    }
}

/// One-shot top-1 accuracy, overall plus per question type.
pub fn vqa_accuracy<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    types: &[QuestionType],
) -> Result<VqaAccuracyReport, MetricsError> {
    let mut acc = AccuracyAccumulator::new();
    acc.add_batch(logits, targets, types)?;
    Ok(acc.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask4(n: usize, k: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(vec![n, k, h, w], data).unwrap()
    }

    /// Targets fed as +/-20 logits act as a perfect predictor.
    fn as_logits(target: &Tensor<f64>) -> Tensor<f64> {
        target.map(|v| if v == 1.0 { 20.0 } else { -20.0 })
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let target = mask4(1, 2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let report = miou(&as_logits(&target), &target).unwrap();
        assert_eq!(report.per_class, vec![1.0, 1.0]);
        assert_eq!(report.mean, 1.0);
    }

    #[test]
    fn half_overlap_scores_half() {
        // target [[1,1],[0,0]], prediction [[1,0],[0,0]]
        let target = mask4(1, 1, 2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let pred = mask4(1, 1, 2, 2, vec![5.0, -5.0, -5.0, -5.0]);
        let report = miou(&pred, &target).unwrap();
        assert_eq!(report.per_class, vec![0.5]);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let target = mask4(1, 1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let pred = mask4(1, 1, 2, 2, vec![-5.0, 5.0, -5.0, -5.0]);
        assert_eq!(miou(&pred, &target).unwrap().per_class, vec![0.0]);
    }

    #[test]
    fn empty_vs_empty_defined_as_one() {
        let target = mask4(1, 1, 2, 2, vec![0.0; 4]);
        let pred = mask4(1, 1, 2, 2, vec![-5.0; 4]);
        assert_eq!(miou(&pred, &target).unwrap().per_class, vec![1.0]);
    }

    #[test]
    fn logit_exactly_zero_is_not_positive() {
        // sigmoid(0) = 0.5 is not over the 0.5 threshold
        let target = mask4(1, 1, 1, 1, vec![1.0]);
        let pred = mask4(1, 1, 1, 1, vec![0.0]);
        assert_eq!(miou(&pred, &target).unwrap().per_class, vec![0.0]);
    }

    #[test]
    fn rejects_non_binary_target() {
        let target = mask4(1, 1, 1, 1, vec![0.25]);
        let pred = mask4(1, 1, 1, 1, vec![1.0]);
        assert!(matches!(
            miou(&pred, &target),
            Err(MetricsError::NonBinaryTarget { .. })
        ));
    }

    #[test]
    fn confusion_counts_partition_pixels() {
        let target = mask4(2, 3, 4, 4, {
            let mut v = vec![0.0; 96];
            for (i, x) in v.iter_mut().enumerate() {
                *x = f64::from(i % 3 == 0);
            }
            v
        });
        let pred = target.map(|v| if v == 1.0 { 3.0 } else { 1.0 });
        let mut acc = MiouAccumulator::new(3);
        acc.add_batch(&pred, &target).unwrap();
        for cc in acc.counts() {
            assert_eq!(cc.total(), 2 * 4 * 4);
        }
    }

    #[test]
    fn question_type_round_trip() {
        for ty in QuestionType::ALL {
            assert_eq!(ty.name().parse::<QuestionType>().unwrap(), ty);
        }
        assert!(matches!(
            "Counting".parse::<QuestionType>(),
            Err(MetricsError::UnknownQuestionType(_))
        ));
    }

    #[test]
    fn accuracy_all_correct_and_half() {
        let logits = Tensor::from_vec(vec![2, 3], vec![9.0, 0.0, 0.0, 0.0, 9.0, 0.0]).unwrap();
        let types = [QuestionType::YesNo, QuestionType::YesNo];
        let all = vqa_accuracy(&logits, &[0, 1], &types).unwrap();
        assert_eq!(all.overall.accuracy(), 1.0);
        let half = vqa_accuracy(&logits, &[0, 2], &types).unwrap();
        assert_eq!(half.overall.accuracy(), 0.5);
    }

    #[test]
    fn per_type_tallies_recompose_overall() {
        let logits = Tensor::from_vec(
            vec![5, 2],
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0],
        )
        .unwrap();
        let targets = [0, 1, 1, 1, 0];
        let types = [
            QuestionType::SimpleCounting,
            QuestionType::SimpleCounting,
            QuestionType::ComplexCounting,
            QuestionType::YesNo,
            QuestionType::ConditionRecognition,
        ];
        let report = vqa_accuracy(&logits, &targets, &types).unwrap();
        let correct: u64 = report.per_type.iter().map(|t| t.correct).sum();
        let total: u64 = report.per_type.iter().map(|t| t.total).sum();
        assert_eq!(correct, report.overall.correct);
        assert_eq!(total, report.overall.total);
        assert_eq!(report.overall.accuracy(), 4.0 / 5.0);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let logits = Tensor::from_vec(vec![1, 3], vec![2.0, 2.0, 1.0]).unwrap();
        let report = vqa_accuracy(&logits, &[0], &[QuestionType::YesNo]).unwrap();
        assert_eq!(report.overall.accuracy(), 1.0);
    }
}
