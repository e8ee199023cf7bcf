//! Training losses: binary cross-entropy over mask logits, normalized
//! class-weighted cross-entropy over answer logits, and the alpha-blended
//! total.
//!
//! The weighted cross-entropy normalizes by the sum of the per-sample
//! target-class weights in the batch (not by the batch size), so scaling
//! every class weight by the same positive constant leaves the loss
//! unchanged. The breakdown it returns carries everything the scheduler
//! needs to differentiate the loss with respect to the weights in closed
//! form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tape::{rowwise_target_nll, Tape, TapeError, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("segmentation target element {index} is {value}, expected exactly 0 or 1")]
    NonBinaryTarget { index: usize, value: f64 },
    #[error("class weight {class} is {value}, weights must be > 0")]
    NonPositiveWeight { class: usize, value: f64 },
    #[error("target {index} has class {class}, but there are only {n_classes} classes")]
    TargetOutOfRange { index: usize, class: usize, n_classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Orientation of the task-balance blend.
///
/// `VqaWeighted`: total = alpha * vqa + (1 - alpha) * seg.
/// `SegWeighted`: total = alpha * seg + (1 - alpha) * vqa.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaConvention {
    VqaWeighted,
    SegWeighted,
}

/// Per-batch loss record consumed by the curriculum scheduler.
#[derive(Clone, Debug)]
pub struct LossBreakdown<S> {
    pub l_seg: S,
    pub l_vqa: S,
    pub l_total: S,
    pub alpha_used: S,
    /// Unweighted -log softmax probability of each sample's target class.
    pub per_sample_nll: Vec<S>,
    pub target_classes: Vec<usize>,
    pub class_weights_used: Vec<S>,
}

impl<S: Scalar> LossBreakdown<S> {
    pub fn new(
        alpha: S,
        convention: AlphaConvention,
        l_seg: S,
        l_vqa: S,
        parts: VqaLossParts<S>,
    ) -> Self {
        LossBreakdown {
            l_seg,
            l_vqa,
            l_total: blend(l_vqa, l_seg, alpha, convention),
            alpha_used: alpha,
            per_sample_nll: parts.per_sample_nll,
            target_classes: parts.target_classes,
            class_weights_used: parts.class_weights_used,
        }
    }
}

/// Companion values computed alongside the weighted cross-entropy.
#[derive(Clone, Debug)]
pub struct VqaLossParts<S> {
    pub per_sample_nll: Vec<S>,
    pub target_classes: Vec<usize>,
    pub class_weights_used: Vec<S>,
}

/// Mean stabilized binary cross-entropy between mask logits and binary
/// targets, over all pixels of all masks (inputs are flattened internally).
pub fn bce_seg_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred_logits: Var,
    target: &Tensor<S>,
) -> Result<Var, LossError> {
    if target.numel() == 0 {
        return Err(LossError::EmptyBatch);
    }
    for (index, &value) in target.data().iter().enumerate() {
        if value != S::zero() && value != S::one() {
            return Err(LossError::NonBinaryTarget { index, value: value.as_f64() });
        }
    }
    Ok(tape.bce_with_logits(pred_logits, target.clone())?)
}

/// Normalized class-weighted cross-entropy over [N, C] answer logits.
pub fn vqa_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    targets: &[usize],
    weights: &[S],
) -> Result<(Var, VqaLossParts<S>), LossError> {
    if targets.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let shape = tape.shape(logits).to_vec();
    let (n, c) = match shape[..] {
        [n, c] => (n, c),
        _ => {
            return Err(TapeError::Shape {
                op: "vqa_loss",
                detail: format!("expected [N, C] logits, got {shape:?}"),
            }
            .into())
        }
    };
    if weights.len() != c {
        return Err(TapeError::Shape {
            op: "vqa_loss",
            detail: format!("{} weights for {c} classes", weights.len()),
        }
        .into());
    }
    for (class, &w) in weights.iter().enumerate() {
        if !(w > S::zero()) {
            return Err(LossError::NonPositiveWeight { class, value: w.as_f64() });
        }
    }
    for (index, &class) in targets.iter().enumerate() {
        if class >= c {
            return Err(LossError::TargetOutOfRange { index, class, n_classes: c });
        }
    }

    let sample_weights: Vec<S> = targets.iter().map(|&y| weights[y]).collect();
    let weight_sum: S = sample_weights.iter().copied().sum();
    let coeff: Vec<S> = sample_weights.iter().map(|&w| w / weight_sum).collect();
    let per_sample_nll = rowwise_target_nll(tape.value(logits).data(), n, c, targets);
    let loss = tape.weighted_ce(logits, targets, &coeff)?;
    let parts = VqaLossParts {
        per_sample_nll,
        target_classes: targets.to_vec(),
        class_weights_used: weights.to_vec(),
    };
    Ok((loss, parts))
}

/// Plain-value task blend.
pub fn blend<S: Scalar>(l_vqa: S, l_seg: S, alpha: S, convention: AlphaConvention) -> S {
    match convention {
        AlphaConvention::VqaWeighted => alpha * l_vqa + (S::one() - alpha) * l_seg,
        AlphaConvention::SegWeighted => alpha * l_seg + (S::one() - alpha) * l_vqa,
    }
}

/// Task blend on the tape: the two losses stay differentiable, alpha is a
/// coefficient owned by the scheduler.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    l_vqa: Var,
    l_seg: Var,
    alpha: S,
    convention: AlphaConvention,
) -> Result<Var, TapeError> {
    match convention {
        AlphaConvention::VqaWeighted => tape.axpby(l_vqa, alpha, l_seg, S::one() - alpha),
        AlphaConvention::SegWeighted => tape.axpby(l_seg, alpha, l_vqa, S::one() - alpha),
    }
}
