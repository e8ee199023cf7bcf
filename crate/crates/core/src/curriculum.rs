//! Gradient-based curriculum scheduling.
//!
//! Two coupled schedulers adapt the training emphasis from the batch losses
//! themselves, with no hand-designed difficulty or pacing function:
//!
//! * DATAP moves the task-balance parameter alpha by gradient descent on
//!   the blended total loss plus a regularizer |alpha - sigmoid(alpha)|
//!   that pulls alpha back toward the unit interval, scaled by
//!   `lambda_reg`.
//! * DAWEP moves each answer-class weight by gradient descent on the
//!   normalized weighted cross-entropy, using its closed-form derivative,
//!   with per-class gradients clipped to `clip_band`.
//!
//! DATWEP applies both after every model update. The derivative of the
//! normalized loss L = sum_n w_{y_n} nll_n / sum_n w_{y_n} with respect to
//! the weight of class k is
//!
//!   dL/dw_k = -(m_k / W^2) * S + (1 / W) * sum_{n: y_n = k} nll_n
//!
//! where W is the sum of target-class weights, S the weighted nll sum, and
//! m_k the number of batch samples of class k. The sign and shape of this
//! expression are pinned by finite-difference oracles in the tests; a
//! class absent from the batch gets gradient zero.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{blend, AlphaConvention, LossBreakdown};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("non-finite {what}: {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("breakdown carries {nll} nll entries for {targets} targets")]
    BreakdownLengthMismatch { nll: usize, targets: usize },
    #[error("breakdown target class {class} out of range for {n_classes} class weights")]
    TargetOutOfRange { class: usize, n_classes: usize },
    #[error("gradient vector has {got} entries for {expected} class weights")]
    GradientLengthMismatch { got: usize, expected: usize },
    #[error("scheduler config invalid: {0}")]
    BadConfig(String),
}

/// Which logistic the regularizer uses. `Standard` is 1/(1+e^(-a)), for
/// which the derivative chain sigma' = sigma - sigma^2 holds; `NegatedArg`
/// is 1/(1+e^(+a)), whose derivative is sigma^2 - sigma.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmoidVariant {
    Standard,
    #[serde(rename = "negated-arg", alias = "paper-literal")]
    NegatedArg,
}

/// When the scheduler steps relative to the training loop.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateCadence {
    PerBatch,
    PerEpochMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub eps_datap: f64,
    pub eps_dawep: f64,
    pub lambda_reg: f64,
    pub clip_band: (f64, f64),
    pub alpha_convention: AlphaConvention,
    pub sigmoid_variant: SigmoidVariant,
    pub cadence: UpdateCadence,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            eps_datap: 0.002,
            eps_dawep: 0.001,
            lambda_reg: 0.75,
            clip_band: (-1.5, 1.5),
            alpha_convention: AlphaConvention::VqaWeighted,
            sigmoid_variant: SigmoidVariant::Standard,
            cadence: UpdateCadence::PerBatch,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if !(self.eps_datap > 0.0) || !(self.eps_dawep > 0.0) {
            return Err(SchedulerError::BadConfig("learning rates must be > 0".to_string()));
        }
        if !(self.clip_band.0 < self.clip_band.1) {
            return Err(SchedulerError::BadConfig(format!(
                "clip band min {} must be < max {}",
                self.clip_band.0, self.clip_band.1
            )));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(SchedulerError::BadConfig("lambda_reg must be >= 0".to_string()));
        }
        Ok(())
    }
}

/// Class weights are floored here after each step so the normalized loss
/// (which divides by their sum) stays well-defined.
pub const WEIGHT_FLOOR: f64 = 1e-3;

/// Below this distance from the regularizer's kink the subgradient is
/// taken as zero.
pub const KINK_EPS: f64 = 1e-12;

/// One scheduler update: the state after the step plus the gradients that
/// produced it.
#[derive(Clone, Debug)]
pub struct StepRecord<S> {
    pub step: usize,
    pub alpha: S,
    pub class_weights: Vec<S>,
    pub l_seg: S,
    pub l_vqa: S,
    pub alpha_grad: S,
    pub raw_weight_grads: Vec<S>,
    pub clipped_weight_grads: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct SchedulerState<S> {
    alpha: S,
    class_weights: Vec<S>,
    step_count: usize,
    initial_alpha: S,
    initial_weights: Vec<S>,
    history: Vec<StepRecord<S>>,
}

impl<S: Scalar> SchedulerState<S> {
    /// Fresh state: alpha 0.5, all class weights 1.0.
    pub fn new(n_classes: usize) -> Self {
        let half = S::from_f64(0.5);
        let weights = vec![S::one(); n_classes];
        SchedulerState {
            alpha: half,
            class_weights: weights.clone(),
            step_count: 0,
            initial_alpha: half,
            initial_weights: weights,
            history: Vec::new(),
        }
    }

    /// Rebuild from persisted values (checkpoint restore). History restarts
    /// empty with the given state as its step-0 snapshot.
    pub fn restore(alpha: S, class_weights: Vec<S>, step_count: usize) -> Self {
        SchedulerState {
            alpha,
            class_weights: class_weights.clone(),
            step_count,
            initial_alpha: alpha,
            initial_weights: class_weights,
            history: Vec::new(),
        }
    }

    pub fn alpha(&self) -> S {
        self.alpha
    }

    pub fn class_weights(&self) -> &[S] {
        &self.class_weights
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn history(&self) -> &[StepRecord<S>] {
        &self.history
    }

    pub fn initial_alpha(&self) -> S {
        self.initial_alpha
    }

    pub fn initial_weights(&self) -> &[S] {
        &self.initial_weights
    }

    fn apply_datap(
        &mut self,
        l_vqa: S,
        l_seg: S,
        config: &SchedulerConfig,
    ) -> Result<S, SchedulerError> {
        for (what, v) in [("VQA loss", l_vqa), ("segmentation loss", l_seg)] {
            if !v.is_finite() {
                return Err(SchedulerError::NonFinite { what, value: v.as_f64() });
            }
        }
        let grad = datap_grad(l_vqa, l_seg, self.alpha, config);
        self.alpha = self.alpha - S::from_f64(config.eps_datap) * grad;
        Ok(grad)
    }

    fn apply_dawep(
        &mut self,
        grads: &[S],
        config: &SchedulerConfig,
    ) -> Result<Vec<S>, SchedulerError> {
        if grads.len() != self.class_weights.len() {
            return Err(SchedulerError::GradientLengthMismatch {
                got: grads.len(),
                expected: self.class_weights.len(),
            });
        }
        if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
            return Err(SchedulerError::NonFinite {
                what: "weight gradient",
                value: bad.as_f64(),
            });
        }
        let lo = S::from_f64(config.clip_band.0);
        let hi = S::from_f64(config.clip_band.1);
        let eps = S::from_f64(config.eps_dawep);
        let floor = S::from_f64(WEIGHT_FLOOR);
        let clipped: Vec<S> = grads.iter().map(|&g| g.max(lo).min(hi)).collect();
        for (w, &g) in self.class_weights.iter_mut().zip(clipped.iter()) {
            *w = (*w - eps * g).max(floor);
        }
        Ok(clipped)
    }

    fn record(
        &mut self,
        l_seg: S,
        l_vqa: S,
        alpha_grad: S,
        raw_weight_grads: Vec<S>,
        clipped_weight_grads: Vec<S>,
    ) {
        self.step_count += 1;
        self.history.push(StepRecord {
            step: self.step_count,
            alpha: self.alpha,
            class_weights: self.class_weights.clone(),
            l_seg,
            l_vqa,
            alpha_grad,
            raw_weight_grads,
            clipped_weight_grads,
        });
    }

    /// Alpha update alone. State is unchanged on error.
    pub fn datap_step(
        &mut self,
        l_vqa: S,
        l_seg: S,
        config: &SchedulerConfig,
    ) -> Result<S, SchedulerError> {
        let grad = self.apply_datap(l_vqa, l_seg, config)?;
        let zeros = vec![S::zero(); self.class_weights.len()];
        self.record(l_seg, l_vqa, grad, zeros.clone(), zeros);
        Ok(self.alpha)
    }

    /// Weight update alone from precomputed gradients. State is unchanged
    /// on error.
    pub fn dawep_step(
        &mut self,
        grads: &[S],
        config: &SchedulerConfig,
    ) -> Result<Vec<S>, SchedulerError> {
        let clipped = self.apply_dawep(grads, config)?;
        self.record(S::zero(), S::zero(), S::zero(), grads.to_vec(), clipped);
        Ok(self.class_weights.clone())
    }

    /// The combined update: alpha first, then class weights, one history
    /// record. The batch losses in `breakdown` are those computed before
    /// the model's own parameter update. All validation happens before
    /// any mutation, so state is unchanged on error.
    pub fn datwep_step(
        &mut self,
        breakdown: &LossBreakdown<S>,
        config: &SchedulerConfig,
    ) -> Result<(), SchedulerError> {
        let raw = dawep_grads(breakdown)?;
        if raw.len() != self.class_weights.len() {
            return Err(SchedulerError::GradientLengthMismatch {
                got: raw.len(),
                expected: self.class_weights.len(),
            });
        }
        if let Some(bad) = raw.iter().find(|g| !g.is_finite()) {
            return Err(SchedulerError::NonFinite {
                what: "weight gradient",
                value: bad.as_f64(),
            });
        }
        let alpha_grad = self.apply_datap(breakdown.l_vqa, breakdown.l_seg, config)?;
        let clipped = self.apply_dawep(&raw, config).expect("gradients validated above");
        self.record(breakdown.l_seg, breakdown.l_vqa, alpha_grad, raw, clipped);
        Ok(())
    }

    /// History as CSV: `step,alpha,l_seg,l_vqa` then one column per class
    /// weight. Step 0 is the initial state; its loss cells are empty.
    pub fn write_history_csv<W: io::Write>(&self, out: &mut W) -> io::Result<()> {
        write!(out, "step,alpha,l_seg,l_vqa")?;
        for i in 0..self.initial_weights.len() {
            write!(out, ",weight_{i}")?;
        }
        writeln!(out)?;
        write!(out, "0,{},,", self.initial_alpha.as_f64())?;
        for w in &self.initial_weights {
            write!(out, ",{}", w.as_f64())?;
        }
        writeln!(out)?;
        for rec in &self.history {
            write!(
                out,
                "{},{},{},{}",
                rec.step,
                rec.alpha.as_f64(),
                rec.l_seg.as_f64(),
                rec.l_vqa.as_f64()
            )?;
            for w in &rec.class_weights {
                write!(out, ",{}", w.as_f64())?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Logistic under the configured variant.
pub fn scheduler_sigmoid<S: Scalar>(alpha: S, variant: SigmoidVariant) -> S {
    match variant {
        SigmoidVariant::Standard => alpha.sigmoid(),
        SigmoidVariant::NegatedArg => (-alpha).sigmoid(),
    }
}

/// Subgradient of |alpha - sigmoid(alpha)|:
/// sign(alpha - sigma) * (1 - sigma'(alpha)), taken as 0 within
/// [`KINK_EPS`] of the kink.
pub fn datap_reg_grad<S: Scalar>(alpha: S, variant: SigmoidVariant) -> S {
    let sigma = scheduler_sigmoid(alpha, variant);
    let diff = alpha - sigma;
    if diff.abs() < S::from_f64(KINK_EPS) {
        return S::zero();
    }
    let sign = if diff > S::zero() { S::one() } else { -S::one() };
    let sigma_prime = match variant {
        SigmoidVariant::Standard => sigma - sigma * sigma,
        SigmoidVariant::NegatedArg => sigma * sigma - sigma,
    };
    sign * (S::one() - sigma_prime)
}

/// Full DATAP gradient: d total / d alpha under the configured blend
/// orientation, plus lambda_reg times the regularizer subgradient.
pub fn datap_grad<S: Scalar>(l_vqa: S, l_seg: S, alpha: S, config: &SchedulerConfig) -> S {
    let task_term = match config.alpha_convention {
        AlphaConvention::VqaWeighted => l_vqa - l_seg,
        AlphaConvention::SegWeighted => l_seg - l_vqa,
    };
    task_term + S::from_f64(config.lambda_reg) * datap_reg_grad(alpha, config.sigmoid_variant)
}

/// Closed-form derivative of the normalized weighted cross-entropy with
/// respect to each class weight, evaluated on one batch.
pub fn dawep_grads<S: Scalar>(breakdown: &LossBreakdown<S>) -> Result<Vec<S>, SchedulerError> {
    let n_classes = breakdown.class_weights_used.len();
    if breakdown.per_sample_nll.len() != breakdown.target_classes.len() {
        return Err(SchedulerError::BreakdownLengthMismatch {
            nll: breakdown.per_sample_nll.len(),
            targets: breakdown.target_classes.len(),
        });
    }
    if let Some(&bad) = breakdown.target_classes.iter().find(|&&c| c >= n_classes) {
        return Err(SchedulerError::TargetOutOfRange { class: bad, n_classes });
    }

    let mut weight_sum = S::zero(); // W
    let mut weighted_nll_sum = S::zero(); // S
    let mut occurrences = vec![S::zero(); n_classes]; // m_k
    let mut class_nll_sum = vec![S::zero(); n_classes]; // sum of nll over class k
    for (&y, &nll) in breakdown.target_classes.iter().zip(&breakdown.per_sample_nll) {
        let w = breakdown.class_weights_used[y];
        weight_sum += w;
        weighted_nll_sum += w * nll;
        occurrences[y] += S::one();
        class_nll_sum[y] += nll;
    }

    let w2 = weight_sum * weight_sum;
    Ok((0..n_classes)
        .map(|k| -(occurrences[k] / w2) * weighted_nll_sum + class_nll_sum[k] / weight_sum)
        .collect())
}

/// Convenience: task blend as the scheduler sees it.
pub fn scheduler_total<S: Scalar>(l_vqa: S, l_seg: S, alpha: S, config: &SchedulerConfig) -> S {
    blend(l_vqa, l_seg, alpha, config.alpha_convention)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SchedulerConfig {
        SchedulerConfig::default()
    }

    /// Regularized alpha objective whose finite difference is the oracle
    /// for the DATAP gradient.
    fn alpha_objective(alpha: f64, l_vqa: f64, l_seg: f64, config: &SchedulerConfig) -> f64 {
        let sigma = scheduler_sigmoid(alpha, config.sigmoid_variant);
        blend(l_vqa, l_seg, alpha, config.alpha_convention)
            + config.lambda_reg * (alpha - sigma).abs()
    }

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    /// Independent weighted cross-entropy as a function of the weights;
    /// its finite difference is the oracle for `dawep_grads`.
    fn vqa_loss_of_weights(nll: &[f64], targets: &[usize], weights: &[f64]) -> f64 {
        let w_sum: f64 = targets.iter().map(|&y| weights[y]).sum();
        let s: f64 = targets.iter().zip(nll).map(|(&y, &v)| weights[y] * v).sum();
        s / w_sum
    }

    fn breakdown(nll: Vec<f64>, targets: Vec<usize>, weights: Vec<f64>) -> LossBreakdown<f64> {
        let l_vqa = vqa_loss_of_weights(&nll, &targets, &weights);
        LossBreakdown {
            l_seg: 0.0,
            l_vqa,
            l_total: l_vqa,
            alpha_used: 1.0,
            per_sample_nll: nll,
            target_classes: targets,
            class_weights_used: weights,
        }
    }

    #[test]
    fn reg_grad_at_half_matches_finite_difference() {
        let grad = datap_reg_grad(0.5, SigmoidVariant::Standard);
        let fd = central_diff(|a| (a - a.sigmoid()).abs(), 0.5, 1e-6);
        assert!((grad - fd).abs() < 1e-9, "grad {grad} vs fd {fd}");
        assert!((grad - (-0.764996)).abs() < 1e-6);
    }

    #[test]
    fn reg_grad_signs_push_toward_unit_interval() {
        // above the interval: positive gradient, descent lowers alpha
        assert!(datap_reg_grad(2.0, SigmoidVariant::Standard) > 0.0);
        // below: negative gradient, descent raises alpha
        assert!(datap_reg_grad(-1.0, SigmoidVariant::Standard) < 0.0);
    }

    #[test]
    fn reg_grad_matches_fd_for_both_variants() {
        for variant in [SigmoidVariant::Standard, SigmoidVariant::NegatedArg] {
            for alpha in [-0.5f64, 0.1, 0.5, 0.9, 1.5] {
                let sigma = scheduler_sigmoid(alpha, variant);
                if (alpha - sigma).abs() < 1e-3 {
                    continue; // too close to the kink for finite differences
                }
                let grad = datap_reg_grad(alpha, variant);
                let fd = central_diff(
                    |a| (a - scheduler_sigmoid(a, variant)).abs(),
                    alpha,
                    1e-6,
                );
                assert!(
                    (grad - fd).abs() < 1e-8,
                    "variant {variant:?} alpha {alpha}: grad {grad} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn datap_step_worked_case() {
        let config = cfg();
        let mut state = SchedulerState::<f64>::new(2);
        let alpha = state.datap_step(0.9, 0.4, &config).unwrap();
        // gradient = (0.9 - 0.4) + 0.75 * reg_grad(0.5)
        let expected_grad: f64 = 0.5 + 0.75 * datap_reg_grad(0.5, SigmoidVariant::Standard);
        assert!((expected_grad - (-0.073747)).abs() < 1e-6);
        assert!((alpha - (0.5 - 0.002 * expected_grad)).abs() < 1e-15);
        assert!((alpha - 0.500147).abs() < 1e-6);
        // cross-check against the finite difference of the full objective
        let fd = central_diff(|a| alpha_objective(a, 0.9, 0.4, &config), 0.5, 1e-6);
        assert!((expected_grad - fd).abs() < 1e-8);
    }

    #[test]
    fn datap_grad_matches_fd_across_alphas() {
        let config = cfg();
        for alpha in [-0.5f64, 0.1, 0.5, 0.9, 1.5] {
            let grad = datap_grad(0.8, 0.3, alpha, &config);
            let fd = central_diff(|a| alpha_objective(a, 0.8, 0.3, &config), alpha, 1e-6);
            assert!((grad - fd).abs() < 1e-8, "alpha {alpha}: {grad} vs {fd}");
        }
    }

    #[test]
    fn datap_fixed_point_is_stationary_under_equal_losses() {
        let config = cfg();
        // solve alpha = sigmoid(alpha) by bisection
        let (mut lo, mut hi) = (0.5f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid - mid.sigmoid() < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let fixed = 0.5 * (lo + hi);
        assert!((fixed - fixed.sigmoid()).abs() < KINK_EPS);
        let mut state = SchedulerState::restore(fixed, vec![1.0; 3], 0);
        state.datap_step(0.7, 0.7, &config).unwrap();
        assert!((state.alpha() - fixed).abs() < 1e-9);
        // harder VQA at the fixed point shifts emphasis toward it
        let mut state = SchedulerState::restore(fixed, vec![1.0; 3], 0);
        state.datap_step(0.9, 0.2, &config).unwrap();
        assert!(state.alpha() < fixed);
    }

    #[test]
    fn datap_step_rejects_non_finite_losses() {
        let config = cfg();
        let mut state = SchedulerState::<f64>::new(2);
        let err = state.datap_step(f64::NAN, 0.4, &config);
        assert!(matches!(err, Err(SchedulerError::NonFinite { .. })));
        assert_eq!(state.alpha(), 0.5);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn dawep_three_sample_oracle() {
        // targets [class 0, class 0, class 1], target probabilities
        // [0.7, 0.5, 0.2], unit weights
        let nll = vec![-(0.7f64.ln()), -(0.5f64.ln()), -(0.2f64.ln())];
        let targets = vec![0usize, 0, 1];
        let weights = vec![1.0, 1.0];
        let grads = dawep_grads(&breakdown(nll.clone(), targets.clone(), weights.clone())).unwrap();

        // independent finite-difference oracle, step 1e-6
        for k in 0..2 {
            let fd = central_diff(
                |w| {
                    let mut ws = weights.clone();
                    ws[k] = w;
                    vqa_loss_of_weights(&nll, &targets, &ws)
                },
                1.0,
                1e-6,
            );
            assert!(
                (grads[k] - fd).abs() < 1e-9,
                "class {k}: analytic {} vs fd {fd}",
                grads[k]
            );
        }
        // antisymmetric pair around 0.241006 for this batch
        assert!((grads[0] + grads[1]).abs() < 1e-12);
        assert!((grads[0] - (-0.241_005_966_707_724_8)).abs() < 1e-9);
        assert!((grads[1] - 0.241_005_966_707_724_8).abs() < 1e-9);
    }

    #[test]
    fn dawep_single_class_batch_is_stationary() {
        let grads = dawep_grads(&breakdown(vec![0.4, 0.9], vec![1, 1], vec![1.0, 1.0])).unwrap();
        assert!(grads[1].abs() < 1e-15);
        assert_eq!(grads[0], 0.0);
    }

    #[test]
    fn dawep_absent_class_gets_zero() {
        let grads =
            dawep_grads(&breakdown(vec![0.3, 0.8], vec![0, 2], vec![1.0, 2.0, 0.5])).unwrap();
        assert_eq!(grads[1], 0.0);
    }

    #[test]
    fn dawep_scale_invariance_transfers_to_gradients() {
        let nll = vec![0.7, 1.3, 0.2, 2.1];
        let targets = vec![0usize, 1, 1, 2];
        let weights = vec![0.8, 1.7, 0.6];
        let base = dawep_grads(&breakdown(nll.clone(), targets.clone(), weights.clone())).unwrap();
        for c in [0.5, 2.0, 3.7] {
            let scaled: Vec<f64> = weights.iter().map(|w| w * c).collect();
            let grads = dawep_grads(&breakdown(nll.clone(), targets.clone(), scaled)).unwrap();
            for (g, b) in grads.iter().zip(base.iter()) {
                assert!((g - b / c).abs() < 1e-10, "{g} vs {}", b / c);
            }
        }
    }

    #[test]
    fn dawep_step_clips_and_floors() {
        let config = cfg();
        let mut state = SchedulerState::<f64>::new(3);
        let weights = state.dawep_step(&[4.0, 0.0, -7.0], &config).unwrap();
        assert!((weights[0] - (1.0 - 0.001 * 1.5)).abs() < 1e-15);
        assert_eq!(weights[1], 1.0);
        assert!((weights[2] - (1.0 + 0.001 * 1.5)).abs() < 1e-15);

        // repeated huge positive gradients cannot push a weight below the floor
        let mut state = SchedulerState::restore(0.5, vec![WEIGHT_FLOOR * 1.5, 1.0], 0);
        for _ in 0..10 {
            state.dawep_step(&[100.0, 0.0], &config).unwrap();
        }
        assert_eq!(state.class_weights()[0], WEIGHT_FLOOR);
    }

    #[test]
    fn dawep_step_composed_with_worked_example() {
        let config = cfg();
        let nll = vec![-(0.7f64.ln()), -(0.5f64.ln()), -(0.2f64.ln())];
        let grads = dawep_grads(&breakdown(nll, vec![0, 0, 1], vec![1.0, 1.0])).unwrap();
        let mut state = SchedulerState::<f64>::new(2);
        let weights = state.dawep_step(&grads, &config).unwrap();
        assert!((weights[0] - (1.0 + 0.001 * 0.241_005_966_707_724_8)).abs() < 1e-12);
        assert!((weights[1] - (1.0 - 0.001 * 0.241_005_966_707_724_8)).abs() < 1e-12);
    }

    #[test]
    fn datwep_step_initializes_and_records() {
        let config = cfg();
        let mut state = SchedulerState::<f64>::new(2);
        assert_eq!(state.alpha(), 0.5);
        assert!(state.class_weights().iter().all(|&w| w == 1.0));

        // zero losses: only the regularizer moves alpha, weights need a batch
        let b = LossBreakdown::<f64> {
            l_seg: 0.0,
            l_vqa: 0.0,
            l_total: 0.0,
            alpha_used: 0.5,
            per_sample_nll: vec![0.5, 0.5],
            target_classes: vec![0, 1],
            class_weights_used: vec![1.0, 1.0],
        };
        state.datwep_step(&b, &config).unwrap();
        let expected_alpha = 0.5 - 0.002 * 0.75 * datap_reg_grad(0.5, SigmoidVariant::Standard);
        assert!((state.alpha() - expected_alpha).abs() < 1e-15);
        // symmetric batch: weights unchanged
        assert!(state.class_weights().iter().all(|&w| w == 1.0));
        assert_eq!(state.step_count(), 1);
        assert_eq!(state.history().len(), 1);
    }

    #[test]
    fn history_rows_match_step_count() {
        let config = cfg();
        let mut state = SchedulerState::<f64>::new(2);
        for i in 0..5 {
            let b = breakdown(vec![0.2 + 0.1 * i as f64], vec![i % 2], vec![1.0, 1.0]);
            state.datwep_step(&b, &config).unwrap();
        }
        assert_eq!(state.history().len(), 5);
        assert_eq!(state.step_count(), 5);

        let mut csv = Vec::new();
        state.write_history_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 1 + 5); // header + step 0 + updates
        assert_eq!(lines[0], "step,alpha,l_seg,l_vqa,weight_0,weight_1");
        assert!(lines[1].starts_with("0,0.5,,,1,1"));
    }

    #[test]
    fn per_step_weight_change_bounded_by_clip() {
        let config = cfg();
        let mut rng = crate::rng::Rng::new(11);
        let mut state = SchedulerState::<f64>::new(4);
        for _ in 0..200 {
            let before = state.class_weights().to_vec();
            let grads: Vec<f64> = (0..4).map(|_| rng.uniform(-30.0, 30.0)).collect();
            state.dawep_step(&grads, &config).unwrap();
            for (b, a) in before.iter().zip(state.class_weights()) {
                assert!((a - b).abs() <= config.eps_dawep * 1.5 + 1e-15);
            }
        }
    }

    #[test]
    fn restoring_force_from_above_and_below() {
        let config = cfg();
        // from 1.5 with equal losses: strictly decreasing until below 1.0
        let mut state = SchedulerState::restore(1.5, vec![1.0], 0);
        let mut prev = state.alpha();
        let mut crossed = false;
        for _ in 0..500 {
            state.datap_step(0.6, 0.6, &config).unwrap();
            assert!(state.alpha() < prev, "alpha must decrease from above");
            prev = state.alpha();
            if prev < 1.0 {
                crossed = true;
                break;
            }
        }
        assert!(crossed, "alpha never fell below 1.0 within 500 steps");

        let mut state = SchedulerState::restore(-0.5, vec![1.0], 0);
        let mut prev = state.alpha();
        let mut crossed = false;
        for _ in 0..500 {
            state.datap_step(0.6, 0.6, &config).unwrap();
            assert!(state.alpha() > prev, "alpha must increase from below");
            prev = state.alpha();
            if prev > 0.0 {
                crossed = true;
                break;
            }
        }
        assert!(crossed, "alpha never rose above 0.0 within 500 steps");
    }

    #[test]
    fn seg_weighted_convention_negates_task_term() {
        let mut config = cfg();
        config.alpha_convention = AlphaConvention::SegWeighted;
        for alpha in [0.2, 0.5, 1.2] {
            let grad = datap_grad(0.9, 0.1, alpha, &config);
            let fd = central_diff(|a| alpha_objective(a, 0.9, 0.1, &config), alpha, 1e-6);
            assert!((grad - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn config_validation() {
        let mut config = cfg();
        assert!(config.validate().is_ok());
        config.eps_datap = 0.0;
        assert!(config.validate().is_err());
        let mut config = cfg();
        config.clip_band = (1.5, -1.5);
        assert!(config.validate().is_err());
    }

    #[test]
    fn scheduler_works_in_f32() {
        let config = cfg();
        let mut state = SchedulerState::<f32>::new(2);
        state.datap_step(0.9, 0.4, &config).unwrap();
        assert!((state.alpha() - 0.500147).abs() < 1e-4);
    }
}
