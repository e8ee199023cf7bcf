//! Finite-difference verification suites.
//!
//! Every differentiable primitive, both loss heads, the scheduler's two
//! closed-form gradients, and the end-to-end model gradient are checked
//! against central finite differences (step 1e-5, f64). The oracle side
//! only ever evaluates forward passes, so it is independent of the
//! backward implementation it checks.
//!
//! These suites are runtime code: the `gradcheck` CLI subcommand runs them
//! and the test suites call into them with smaller case counts.

use std::str::FromStr;

use crate::curriculum::{self, SchedulerConfig};
use crate::loss::{self, AlphaConvention, LossBreakdown};
use crate::model::{self, ModelConfig};
use crate::rng::Rng;
use crate::tape::{NormMode, Tape, TapeError, Var};
use crate::tensor::Tensor;
use crate::text::{tokenize, Vocabulary};

pub const FD_STEP: f64 = 1e-5;

/// Result of one named check.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }

    pub fn line(&self) -> String {
        format!(
            "{:<28} cases {:>4}  max rel err {:9.3e}  tol {:.0e}  {}",
            self.name,
            self.cases,
            self.max_rel_err,
            self.tol,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Relative error with two floors: differences where both sides are below
/// 1e-8 count as zero, and the denominator never drops below 1e-4, so the
/// comparison is effectively absolute for tiny gradients. Both floors sit
/// far above the ~1e-9 noise of a central difference in f64 and far below
/// any real backward defect.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-8 {
        return 0.0;
    }
    diff / denom.max(1e-4)
}

pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

// ── generic op driver ───────────────────────────────────────────────

fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..shape.iter().product::<usize>()).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("random tensor")
}

/// Cotangent with entries of magnitude in [0.5, 1.5]; keeps the projected
/// scalar sensitive to every output coordinate.
fn cotangent(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let sign = if rng.chance(0.5) { 1.0 } else { -1.0 };
            sign * rng.uniform(0.5, 1.5)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("cotangent tensor")
}

/// Scalar projection sum(cot * op(inputs)) evaluated on a fresh tape.
fn project(
    inputs: &[Tensor<f64>],
    cot: &Tensor<f64>,
    apply: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TapeError>,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = apply(&mut tape, &vars).expect("op application in gradient check");
    let c = tape.leaf(cot.clone());
    let prod = tape.mul(out, c).expect("projection mul");
    let scalar = tape.sum_all(prod);
    tape.value(scalar).item()
}

/// Check one op: per case, compare the backward gradients of the projected
/// scalar against central finite differences on a sample of coordinates of
/// every input tensor.
fn check_op(
    name: &str,
    seed: u64,
    cases: usize,
    tol: f64,
    build: &dyn Fn(&mut Rng) -> Vec<Tensor<f64>>,
    apply: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TapeError>,
) -> CheckOutcome {
    let mut rng = Rng::new(seed).derive(fnv1a(name.as_bytes()));
    let mut max_err = 0.0f64;
    for _ in 0..cases {
        let inputs = build(&mut rng);

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = apply(&mut tape, &vars).expect("op application in gradient check");
        let cot = cotangent(&mut rng, tape.shape(out));
        let c = tape.leaf(cot.clone());
        let prod = tape.mul(out, c).expect("projection mul");
        let scalar = tape.sum_all(prod);
        let grads = tape.backward(scalar).expect("backward");

        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i], input.shape());
            let numel = input.numel();
            let coords: Vec<usize> = if numel <= 6 {
                (0..numel).collect()
            } else {
                (0..6).map(|_| rng.below(numel)).collect()
            };
            for coord in coords {
                let numeric = central_diff(
                    |x| {
                        let mut perturbed = inputs.to_vec();
                        perturbed[i].data_mut()[coord] = x;
                        project(&perturbed, &cot, apply)
                    },
                    input.data()[coord],
                    FD_STEP,
                );
                max_err = max_err.max(rel_err(analytic.data()[coord], numeric));
            }
        }
    }
    CheckOutcome { name: name.to_string(), cases, max_rel_err: max_err, tol }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Pooling inputs with pairwise-distinct values spaced well beyond the
/// finite-difference step, so no argmax flips inside the probe.
fn spaced_values(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let data: Vec<f64> = order
        .into_iter()
        .map(|k| (k as f64) * 0.013 - 0.006 * n as f64 + rng.uniform(-1e-4, 1e-4))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("spaced tensor")
}

/// ReLU inputs bounded away from the kink at zero.
fn off_kink_values(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let sign = if rng.chance(0.5) { 1.0 } else { -1.0 };
            sign * rng.uniform(0.05, 1.5)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("off-kink tensor")
}

// ── layer suite ─────────────────────────────────────────────────────

pub fn check_layers(seed: u64, cases: usize) -> Vec<CheckOutcome> {
    let mut out = Vec::new();

    out.push(check_op(
        "conv2d",
        seed,
        cases,
        1e-5,
        &|rng| {
            let (n, c, f) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
            let (h, w) = (2 + rng.below(5), 2 + rng.below(5));
            vec![
                random_tensor(rng, &[n, c, h, w], -1.0, 1.0),
                random_tensor(rng, &[f, c, 3, 3], -1.0, 1.0),
                random_tensor(rng, &[f], -0.5, 0.5),
            ]
        },
        &|tape, v| tape.conv2d(v[0], v[1], v[2]),
    ));

    out.push(check_op(
        "conv1x1",
        seed,
        cases,
        1e-5,
        &|rng| {
            let (n, c, f) = (1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(4));
            let (h, w) = (1 + rng.below(5), 1 + rng.below(5));
            vec![
                random_tensor(rng, &[n, c, h, w], -1.0, 1.0),
                random_tensor(rng, &[f, c], -1.0, 1.0),
                random_tensor(rng, &[f], -0.5, 0.5),
            ]
        },
        &|tape, v| tape.conv1x1(v[0], v[1], v[2]),
    ));

    out.push(check_op(
        "maxpool2",
        seed,
        cases,
        1e-5,
        &|rng| {
            let (n, c) = (1 + rng.below(2), 1 + rng.below(3));
            let (h, w) = (2 * (1 + rng.below(3)), 2 * (1 + rng.below(3)));
            vec![spaced_values(rng, &[n, c, h, w])]
        },
        &|tape, v| tape.maxpool2(v[0]),
    ));

    out.push(check_op(
        "upsample2",
        seed,
        cases,
        1e-5,
        &|rng| {
            let (n, c) = (1 + rng.below(2), 1 + rng.below(3));
            let (h, w) = (1 + rng.below(4), 1 + rng.below(4));
            vec![random_tensor(rng, &[n, c, h, w], -1.0, 1.0)]
        },
        &|tape, v| tape.upsample2(v[0]),
    ));

    out.push(check_op(
        "linear",
        seed,
        cases,
        1e-5,
        &|rng| {
            let (n, d_in, d_out) = (1 + rng.below(4), 1 + rng.below(6), 1 + rng.below(6));
            vec![
                random_tensor(rng, &[n, d_in], -1.0, 1.0),
                random_tensor(rng, &[d_out, d_in], -1.0, 1.0),
                random_tensor(rng, &[d_out], -0.5, 0.5),
            ]
        },
        &|tape, v| tape.linear(v[0], v[1], v[2]),
    ));

    out.push(check_op(
        "relu",
        seed,
        cases,
        1e-5,
        &|rng| vec![off_kink_values(rng, &[2, 3, 2, 2])],
        &|tape, v| Ok(tape.relu(v[0])),
    ));

    out.push(check_op(
        "sigmoid",
        seed,
        cases,
        1e-5,
        &|rng| vec![random_tensor(rng, &[3, 4], -3.0, 3.0)],
        &|tape, v| Ok(tape.sigmoid(v[0])),
    ));

    out.push(check_op(
        "softmax_rows",
        seed,
        cases,
        1e-5,
        &|rng| {
            let (n, c) = (1 + rng.below(4), 2 + rng.below(5));
            vec![random_tensor(rng, &[n, c], -2.0, 2.0)]
        },
        &|tape, v| tape.softmax_rows(v[0]),
    ));

    out.push(check_op(
        "embedding_lookup",
        seed,
        cases,
        1e-5,
        &|rng| {
            let d = 1 + rng.below(4);
            vec![random_tensor(rng, &[7, d], -1.0, 1.0)]
        },
        &|tape, v| {
            // fixed id pattern with repeats exercises scatter accumulation
            tape.embedding_lookup(v[0], &[1, 4, 1, 0, 6, 1], 2, 3)
        },
    ));

    out.push(check_op(
        "concat_channels",
        seed,
        cases,
        1e-5,
        &|rng| {
            let (n, h, w) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
            let (ca, cb) = (1 + rng.below(3), 1 + rng.below(3));
            vec![
                random_tensor(rng, &[n, ca, h, w], -1.0, 1.0),
                random_tensor(rng, &[n, cb, h, w], -1.0, 1.0),
            ]
        },
        &|tape, v| tape.concat_channels(v[0], v[1]),
    ));

    out.push(check_op(
        "concat_cols",
        seed,
        cases,
        1e-5,
        &|rng| {
            let n = 1 + rng.below(3);
            let (d1, d2, d3) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
            vec![
                random_tensor(rng, &[n, d1], -1.0, 1.0),
                random_tensor(rng, &[n, d2], -1.0, 1.0),
                random_tensor(rng, &[n, d3], -1.0, 1.0),
            ]
        },
        &|tape, v| tape.concat_cols(v),
    ));

    out.push(check_op(
        "global_avg_pool",
        seed,
        cases,
        1e-5,
        &|rng| {
            let (n, c) = (1 + rng.below(3), 1 + rng.below(4));
            let (h, w) = (1 + rng.below(4), 1 + rng.below(4));
            vec![random_tensor(rng, &[n, c, h, w], -1.0, 1.0)]
        },
        &|tape, v| tape.global_avg_pool(v[0]),
    ));

    out.push(check_op(
        "select_rows",
        seed,
        cases,
        1e-5,
        &|rng| {
            let d = 1 + rng.below(4);
            vec![random_tensor(rng, &[4, d], -1.0, 1.0)]
        },
        &|tape, v| tape.select_rows(v[0], &[2, 0, 2, 3, 1]),
    ));

    out.push(check_op(
        "elementwise_mul",
        seed,
        cases,
        1e-5,
        &|rng| {
            vec![random_tensor(rng, &[2, 3, 2], -1.0, 1.0), random_tensor(rng, &[2, 3, 2], -1.0, 1.0)]
        },
        &|tape, v| tape.mul(v[0], v[1]),
    ));

    out.push(check_op(
        "add",
        seed,
        cases,
        1e-5,
        &|rng| {
            vec![random_tensor(rng, &[3, 4], -1.0, 1.0), random_tensor(rng, &[3, 4], -1.0, 1.0)]
        },
        &|tape, v| tape.add(v[0], v[1]),
    ));

    out.push(check_op(
        "flatten",
        seed,
        cases,
        1e-5,
        &|rng| vec![random_tensor(rng, &[2, 3, 2, 2], -1.0, 1.0)],
        &|tape, v| tape.flatten(v[0]),
    ));

    out.push(check_op(
        "scale_axpby",
        seed,
        cases,
        1e-5,
        &|rng| {
            vec![random_tensor(rng, &[2, 3], -1.0, 1.0), random_tensor(rng, &[2, 3], -1.0, 1.0)]
        },
        &|tape, v| {
            let s = tape.scale(v[0], 0.7);
            tape.axpby(s, 0.4, v[1], 1.3)
        },
    ));

    out.push(check_op(
        "affine_channel_fixed",
        seed,
        cases,
        1e-5,
        &|rng| {
            let c = 1 + rng.below(3);
            vec![
                random_tensor(rng, &[2, c, 3, 3], -1.0, 1.0),
                random_tensor(rng, &[c], 0.5, 1.5),
                random_tensor(rng, &[c], -0.5, 0.5),
            ]
        },
        &|tape, v| tape.affine_channel(v[0], v[1], v[2], NormMode::FixedUnit),
    ));

    out.push(check_op(
        "affine_channel_batchstats",
        seed,
        cases,
        1e-5,
        &|rng| {
            let c = 1 + rng.below(3);
            vec![
                random_tensor(rng, &[2, c, 3, 3], -1.0, 1.0),
                random_tensor(rng, &[c], 0.5, 1.5),
                random_tensor(rng, &[c], -0.5, 0.5),
            ]
        },
        &|tape, v| tape.affine_channel(v[0], v[1], v[2], NormMode::BatchStats),
    ));

    out.push(check_op(
        "bce_seg_loss",
        seed,
        cases,
        1e-6,
        &|rng| vec![random_tensor(rng, &[1, 2, 2, 2], -3.0, 3.0)],
        &|tape, v| {
            // fixed binary target; only the logits are differentiable
            let target =
                Tensor::from_vec(vec![1, 2, 2, 2], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0])
                    .unwrap();
            loss::bce_seg_loss(tape, v[0], &target).map_err(|e| match e {
                loss::LossError::Tape(t) => t,
                other => TapeError::Validation { op: "bce_seg_loss", detail: other.to_string() },
            })
        },
    ));

    out.push(check_op(
        "vqa_loss",
        seed,
        cases,
        1e-6,
        &|rng| vec![random_tensor(rng, &[4, 3], -2.0, 2.0)],
        &|tape, v| {
            let targets = [0usize, 2, 1, 2];
            let weights = [0.8, 1.4, 0.6];
            loss::vqa_loss(tape, v[0], &targets, &weights).map(|(var, _)| var).map_err(|e| {
                match e {
                    loss::LossError::Tape(t) => t,
                    other => TapeError::Validation { op: "vqa_loss", detail: other.to_string() },
                }
            })
        },
    ));

    out
}

// ── scheduler suites ────────────────────────────────────────────────

/// Randomized DATAP checks: analytic gradient of the blended objective
/// plus regularizer versus a central difference in alpha.
pub fn check_datap(seed: u64, cases: usize) -> Vec<CheckOutcome> {
    let mut rng = Rng::new(seed).derive(0xda7a9);
    let mut max_err = 0.0f64;
    let mut done = 0usize;
    let config = SchedulerConfig::default();
    while done < cases {
        let alpha = rng.uniform(-1.0, 2.0);
        let sigma = curriculum::scheduler_sigmoid(alpha, config.sigmoid_variant);
        if (alpha - sigma).abs() < 1e-3 {
            continue; // |.| kink: excluded, measure zero
        }
        let l_vqa = rng.uniform(0.0, 3.0);
        let l_seg = rng.uniform(0.0, 3.0);
        let analytic = curriculum::datap_grad(l_vqa, l_seg, alpha, &config);
        let numeric = central_diff(
            |a| {
                let s = curriculum::scheduler_sigmoid(a, config.sigmoid_variant);
                loss::blend(l_vqa, l_seg, a, config.alpha_convention)
                    + config.lambda_reg * (a - s).abs()
            },
            alpha,
            FD_STEP,
        );
        max_err = max_err.max(rel_err(analytic, numeric));
        done += 1;
    }
    let randomized =
        CheckOutcome { name: "datap_gradient".to_string(), cases, max_rel_err: max_err, tol: 1e-6 };

    // frozen case: regularizer gradient at alpha = 0.5
    let frozen = curriculum::datap_reg_grad(0.5, config.sigmoid_variant);
    let frozen_fd =
        central_diff(|a: f64| (a - crate::scalar::Scalar::sigmoid(a)).abs(), 0.5, 1e-6);
    let frozen_outcome = CheckOutcome {
        name: "datap_reg_alpha_0.5".to_string(),
        cases: 1,
        max_rel_err: rel_err(frozen, frozen_fd).max(rel_err(frozen, -0.764996_287_798_235)),
        tol: 1e-6,
    };
    vec![randomized, frozen_outcome]
}

/// Independent target-class nll straight from softmax algebra.
fn oracle_nll(logits_row: &[f64], target: usize) -> f64 {
    let sum: f64 = logits_row.iter().map(|v| v.exp()).sum();
    sum.ln() - logits_row[target]
}

/// Randomized DAWEP checks: `dawep_grads` on a breakdown produced by the
/// real loss path versus central differences of the normalized weighted
/// cross-entropy recomputed from scratch.
pub fn check_dawep(seed: u64, cases: usize) -> Vec<CheckOutcome> {
    let mut rng = Rng::new(seed).derive(0xdabe9);
    let mut max_err = 0.0f64;
    for _ in 0..cases {
        let n = 1 + rng.below(16);
        let c = 2 + rng.below(7);
        let logits = random_tensor(&mut rng, &[n, c], -2.0, 2.0);
        let targets: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let weights: Vec<f64> = (0..c).map(|_| rng.uniform(0.25, 4.0)).collect();

        // implementation path: breakdown out of the tape-based loss
        let mut tape = Tape::new();
        let lv = tape.leaf(logits.clone());
        let (loss_var, parts) = loss::vqa_loss(&mut tape, lv, &targets, &weights).unwrap();
        let l_vqa = tape.value(loss_var).item();
        let breakdown = LossBreakdown {
            l_seg: 0.0,
            l_vqa,
            l_total: l_vqa,
            alpha_used: 1.0,
            per_sample_nll: parts.per_sample_nll,
            target_classes: parts.target_classes,
            class_weights_used: parts.class_weights_used,
        };
        let grads = curriculum::dawep_grads(&breakdown).unwrap();

        // oracle path: loss(w) recomputed from raw logits
        let nll: Vec<f64> = (0..n)
            .map(|i| oracle_nll(&logits.data()[i * c..(i + 1) * c], targets[i]))
            .collect();
        let loss_of = |ws: &[f64]| -> f64 {
            let w_sum: f64 = targets.iter().map(|&y| ws[y]).sum();
            let s: f64 = targets.iter().zip(&nll).map(|(&y, &v)| ws[y] * v).sum();
            s / w_sum
        };
        for k in 0..c {
            let numeric = central_diff(
                |w| {
                    let mut ws = weights.clone();
                    ws[k] = w;
                    loss_of(&ws)
                },
                weights[k],
                FD_STEP,
            );
            max_err = max_err.max(rel_err(grads[k], numeric));
        }
    }
    let randomized =
        CheckOutcome { name: "dawep_grads".to_string(), cases, max_rel_err: max_err, tol: 1e-6 };

    // frozen three-sample case: targets [1, 1, 2] (one-indexed), target
    // probabilities [0.7, 0.5, 0.2], unit weights
    let nll = [-(0.7f64.ln()), -(0.5f64.ln()), -(0.2f64.ln())];
    let breakdown = LossBreakdown {
        l_seg: 0.0,
        l_vqa: nll.iter().sum::<f64>() / 3.0,
        l_total: 0.0,
        alpha_used: 1.0,
        per_sample_nll: nll.to_vec(),
        target_classes: vec![0, 0, 1],
        class_weights_used: vec![1.0, 1.0],
    };
    let grads = curriculum::dawep_grads(&breakdown).unwrap();
    let expected = 0.241_005_966_707_724_8;
    let frozen = CheckOutcome {
        name: "dawep_three_sample".to_string(),
        cases: 1,
        max_rel_err: rel_err(grads[0], -expected)
            .max(rel_err(grads[1], expected))
            .max((grads[0] + grads[1]).abs()),
        tol: 1e-6,
    };
    vec![randomized, frozen]
}

// ── end-to-end suite ────────────────────────────────────────────────

struct EndToEndFixture {
    config: ModelConfig,
    images: Tensor<f64>,
    masks: Tensor<f64>,
    sequences: Vec<crate::text::TokenSequence>,
    image_index: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<f64>,
    alpha: f64,
}

fn end_to_end_fixture(rng: &mut Rng) -> EndToEndFixture {
    let vocab = Vocabulary::default_charset();
    let config = ModelConfig::tiny(2, 3, vocab.size());
    let images = random_tensor(rng, &[2, 3, 8, 8], 0.0, 1.0);
    let masks = Tensor::from_vec(
        vec![2, 2, 8, 8],
        (0..2 * 2 * 64).map(|_| f64::from(rng.chance(0.4))).collect(),
    )
    .unwrap();
    let sequences = ["ab", "c 1", "go"]
        .iter()
        .map(|q| tokenize(q, &vocab, config.l_max).unwrap())
        .collect();
    EndToEndFixture {
        config,
        images,
        masks,
        sequences,
        image_index: vec![0, 1, 0],
        targets: vec![0, 2, 1],
        weights: vec![0.8, 1.3, 1.0],
        alpha: 0.37,
    }
}

fn end_to_end_loss(fx: &EndToEndFixture, params: &model::ModelParams<f64>) -> f64 {
    let mut tape = Tape::new();
    let taped = model::stage_params(&mut tape, params);
    let image = tape.leaf(fx.images.clone());
    let seg = model::forward_seg(&mut tape, image, &taped, &fx.config).unwrap();
    let l_seg = loss::bce_seg_loss(&mut tape, seg.mask_logits, &fx.masks).unwrap();
    let logits = model::forward_vqa(
        &mut tape,
        &fx.sequences,
        &fx.image_index,
        &seg.encoder_feats,
        &taped,
        &fx.config,
    )
    .unwrap();
    let (l_vqa, _) = loss::vqa_loss(&mut tape, logits, &fx.targets, &fx.weights).unwrap();
    let total =
        loss::total_loss(&mut tape, l_vqa, l_seg, fx.alpha, AlphaConvention::VqaWeighted).unwrap();
    tape.value(total).item()
}

/// Full-model check: d(total loss)/d(parameter) against central finite
/// differences on `n_coords` parameters sampled across every tensor.
pub fn check_end_to_end(seed: u64, n_coords: usize) -> CheckOutcome {
    let mut rng = Rng::new(seed).derive(0xe2e);
    let fx = end_to_end_fixture(&mut rng);
    let params = model::init_params::<f64>(&fx.config, seed).unwrap();

    // analytic gradients once
    let mut tape = Tape::new();
    let taped = model::stage_params(&mut tape, &params);
    let image = tape.leaf(fx.images.clone());
    let seg = model::forward_seg(&mut tape, image, &taped, &fx.config).unwrap();
    let l_seg = loss::bce_seg_loss(&mut tape, seg.mask_logits, &fx.masks).unwrap();
    let logits = model::forward_vqa(
        &mut tape,
        &fx.sequences,
        &fx.image_index,
        &seg.encoder_feats,
        &taped,
        &fx.config,
    )
    .unwrap();
    let (l_vqa, _) = loss::vqa_loss(&mut tape, logits, &fx.targets, &fx.weights).unwrap();
    let total =
        loss::total_loss(&mut tape, l_vqa, l_seg, fx.alpha, AlphaConvention::VqaWeighted).unwrap();
    let grads = tape.backward(total).expect("backward");

    let named = params.named();
    let taped_vars: Vec<Var> = taped.named().iter().map(|(_, v)| **v).collect();
    let total_numel: usize = named.iter().map(|(_, t)| t.numel()).sum();

    let mut max_err = 0.0f64;
    for _ in 0..n_coords {
        // uniform over all parameter coordinates
        let mut flat = rng.below(total_numel);
        let mut tensor_idx = 0;
        while flat >= named[tensor_idx].1.numel() {
            flat -= named[tensor_idx].1.numel();
            tensor_idx += 1;
        }
        let analytic = grads
            .get_or_zeros(taped_vars[tensor_idx], named[tensor_idx].1.shape())
            .data()[flat];
        let base = named[tensor_idx].1.data()[flat];
        let numeric = central_diff(
            |x| {
                let mut perturbed = params.clone();
                let mut named_mut = perturbed.named_mut();
                named_mut[tensor_idx].1.data_mut()[flat] = x;
                drop(named_mut);
                end_to_end_loss(&fx, &perturbed)
            },
            base,
            FD_STEP,
        );
        max_err = max_err.max(rel_err(analytic, numeric));
    }
    CheckOutcome {
        name: "end_to_end_total_loss".to_string(),
        cases: n_coords,
        max_rel_err: max_err,
        tol: 1e-5,
    }
}

// ── scope dispatcher ────────────────────────────────────────────────

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum CheckScope {
    Layers,
    Datap,
    Dawep,
    EndToEnd,
    All,
}

impl FromStr for CheckScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "layers" => Ok(CheckScope::Layers),
            "datap" => Ok(CheckScope::Datap),
            "dawep" => Ok(CheckScope::Dawep),
            "end2end" => Ok(CheckScope::EndToEnd),
            "all" => Ok(CheckScope::All),
            other => Err(format!(
                "unknown scope {other:?}; expected layers|datap|dawep|end2end|all"
            )),
        }
    }
}

/// Run a scope at full strength: `cases` randomized cases per check.
pub fn run_scope(scope: CheckScope, seed: u64, cases: usize) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    if matches!(scope, CheckScope::Layers | CheckScope::All) {
        out.extend(check_layers(seed, cases));
    }
    if matches!(scope, CheckScope::Datap | CheckScope::All) {
        out.extend(check_datap(seed, cases));
    }
    if matches!(scope, CheckScope::Dawep | CheckScope::All) {
        out.extend(check_dawep(seed, cases));
    }
    if matches!(scope, CheckScope::EndToEnd | CheckScope::All) {
        out.push(check_end_to_end(seed, cases.max(100)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_suite_small() {
        for outcome in check_layers(1234, 8) {
            assert!(outcome.passed(), "{}", outcome.line());
        }
    }

    #[test]
    fn datap_suite_small() {
        for outcome in check_datap(99, 50) {
            assert!(outcome.passed(), "{}", outcome.line());
        }
    }

    #[test]
    fn dawep_suite_small() {
        for outcome in check_dawep(7, 25) {
            assert!(outcome.passed(), "{}", outcome.line());
        }
    }

    #[test]
    fn end_to_end_small() {
        let outcome = check_end_to_end(5, 20);
        assert!(outcome.passed(), "{}", outcome.line());
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("layers".parse::<CheckScope>().unwrap(), CheckScope::Layers);
        assert_eq!("end2end".parse::<CheckScope>().unwrap(), CheckScope::EndToEnd);
        assert!("bogus".parse::<CheckScope>().is_err());
    }

    #[test]
    fn rel_err_behaves_at_extremes() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1.0, 1.0 + 1e-9) < 1e-8);
        assert!(rel_err(1.0, 2.0) > 0.4);
        // both negligible: no error
        assert_eq!(rel_err(1e-12, -1e-12), 0.0);
    }

    /// Determinism: the same tape built twice yields bit-identical values
    /// and gradients.
    #[test]
    fn tape_replay_is_bit_identical() {
        let build = |rng: &mut Rng| {
            let x = random_tensor(rng, &[2, 3, 4, 4], -1.0, 1.0);
            let k = random_tensor(rng, &[2, 3, 3, 3], -1.0, 1.0);
            let b = random_tensor(rng, &[2], -0.5, 0.5);
            (x, k, b)
        };
        let mut rng = Rng::new(42);
        let (x, k, b) = build(&mut rng);
        let run = || {
            let mut tape = Tape::new();
            let (xv, kv, bv) = (tape.leaf(x.clone()), tape.leaf(k.clone()), tape.leaf(b.clone()));
            let c = tape.conv2d(xv, kv, bv).unwrap();
            let s = tape.sigmoid(c);
            let loss = tape.mean_all(s);
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).item(),
                grads.get(kv).unwrap().data().to_vec(),
                grads.get(xv).unwrap().data().to_vec(),
            )
        };
        let (l1, gk1, gx1) = run();
        let (l2, gk2, gx2) = run();
        assert!(l1.to_bits() == l2.to_bits());
        assert!(gk1.iter().zip(&gk2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    /// Additivity: backward of f + g equals backward of f plus backward
    /// of g.
    #[test]
    fn gradient_accumulation_is_additive() {
        let mut rng = Rng::new(9);
        let x = random_tensor(&mut rng, &[3, 3], -1.0, 1.0);
        let grads_of = |which: u8| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let f = tape.sum_all(xv);
            let s = tape.sigmoid(xv);
            let g = tape.mean_all(s);
            let loss = match which {
                0 => f,
                1 => g,
                _ => tape.axpby(f, 1.0, g, 1.0).unwrap(),
            };
            let grads = tape.backward(loss).unwrap();
            grads.get(xv).unwrap().data().to_vec()
        };
        let gf = grads_of(0);
        let gg = grads_of(1);
        let gsum = grads_of(2);
        for i in 0..gf.len() {
            assert!((gsum[i] - (gf[i] + gg[i])).abs() < 1e-15);
        }
    }
}
