//! Training and evaluation driver.
//!
//! Per batch: forward both heads, blend the two losses with the current
//! task-balance alpha and score the answers with the current class
//! weights, backpropagate, take one optimizer step, then let the
//! scheduler update alpha and the class weights from the batch losses
//! (the losses computed before the parameter update). The learning rate
//! is stepped geometrically every `lr_step_epochs` epochs.
//!
//! A run writes into its output directory: `checkpoint.ckpt`,
//! `metrics.csv` (one row per epoch), `scheduler_history.csv` (one row
//! per scheduler step plus the step-0 initial state), `plots/*.svg`,
//! `vocab.txt`, and `run_metadata.json` (resolved config plus a revision
//! fingerprint). Fixed seed and config reproduce every file byte for
//! byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::curriculum::{SchedulerConfig, SchedulerError, SchedulerState, UpdateCadence};
use crate::data::{
    generate_synthetic, load_floodnet_dir, split, DataError, Dataset, SplitSpec, SynthConfig,
};
use crate::loss::{self, LossBreakdown, LossError};
use crate::metrics::{
    AccuracyAccumulator, MetricsError, MiouAccumulator, MiouReport, QuestionType,
    VqaAccuracyReport,
};
use crate::model::{
    forward_seg, forward_vqa, init_params, stage_params, ModelConfig, ModelError, ModelParams,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::plot::{self, Series};
use crate::rng::Rng;
use crate::tape::{NormMode, Tape, TapeError, Var};
use crate::tensor::Tensor;
use crate::text::{tokenize, TextError, TokenSequence, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite total loss at epoch {epoch}, batch {batch}; last good state saved to {checkpoint}")]
    NonFiniteLoss { epoch: usize, batch: usize, checkpoint: String },
    #[error("invalid run config: {0}")]
    BadConfig(String),
    #[error("checkpoint geometry does not match dataset: {0}")]
    GeometryMismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic { n_images: usize },
    Directory { path: PathBuf, n_seg_classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimSettings {
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier applied every `lr_step_epochs`.
    pub lr_factor: f64,
    pub lr_step_epochs: usize,
    /// Optional global gradient-norm clip for the model parameters
    /// (the scheduler's own clip band is separate and always on).
    pub grad_clip_norm: Option<f64>,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings {
            base_lr: 1e-3,
            weight_decay: 0.01,
            lr_factor: 0.95,
            lr_step_epochs: 3,
            grad_clip_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub out_dir: PathBuf,
    pub epochs: usize,
    /// Images per batch; each image carries all its QA pairs.
    pub batch_size: usize,
    pub seed: u64,
    pub image_size: usize,
    pub base_channels: usize,
    pub norm_mode: NormMode,
    pub scheduler: SchedulerConfig,
    pub optim: OptimSettings,
}

impl RunConfig {
    pub fn synthetic_default(out_dir: PathBuf) -> Self {
        RunConfig {
            data: DataSource::Synthetic { n_images: 256 },
            out_dir,
            epochs: 25,
            batch_size: 2,
            seed: 0,
            image_size: 32,
            base_channels: 8,
            norm_mode: NormMode::FixedUnit,
            scheduler: SchedulerConfig::default(),
            optim: OptimSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be >= 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".to_string()));
        }
        if !(self.optim.base_lr > 0.0) || !(self.optim.lr_factor > 0.0) {
            return Err(TrainError::BadConfig("learning rates must be > 0".to_string()));
        }
        if self.optim.lr_step_epochs == 0 {
            return Err(TrainError::BadConfig("lr_step_epochs must be >= 1".to_string()));
        }
        self.scheduler.validate()?;
        Ok(())
    }
}

/// Effective learning rate at 1-based epoch `e`:
/// base * factor^floor((e-1)/interval).
pub fn lr_at_epoch(optim: &OptimSettings, epoch: usize) -> f64 {
    optim.base_lr * optim.lr_factor.powi(((epoch - 1) / optim.lr_step_epochs) as i32)
}

#[derive(Clone, Debug)]
pub struct EvalMetrics {
    pub l_seg: f64,
    pub l_vqa: f64,
    pub l_total: f64,
    pub miou: MiouReport,
    pub accuracy: VqaAccuracyReport,
}

#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_l_seg: f64,
    pub train_l_vqa: f64,
    pub train_l_total: f64,
    pub val: EvalMetrics,
    pub alpha: f64,
    pub class_weights: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    pub rows: Vec<EpochRow>,
    pub seg_class_names: Vec<String>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("epoch,lr,train_l_seg,train_l_vqa,train_l_total,val_l_seg,val_l_vqa,val_l_total,val_miou");
        for name in &self.seg_class_names {
            let _ = write!(out, ",val_iou_{name}");
        }
        out.push_str(",val_acc");
        for ty in QuestionType::ALL {
            let _ = write!(out, ",val_acc_{}", ty.slug());
        }
        out.push_str(",alpha");
        if let Some(row) = self.rows.first() {
            for i in 0..row.class_weights.len() {
                let _ = write!(out, ",weight_{i}");
            }
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                row.epoch,
                row.lr,
                row.train_l_seg,
                row.train_l_vqa,
                row.train_l_total,
                row.val.l_seg,
                row.val.l_vqa,
                row.val.l_total,
                row.val.miou.mean
            );
            for v in &row.val.miou.per_class {
                let _ = write!(out, ",{v}");
            }
            let _ = write!(out, ",{}", row.val.accuracy.overall.accuracy());
            for tally in row.val.accuracy.per_type {
                let acc = tally.accuracy();
                if acc.is_nan() {
                    out.push(',');
                } else {
                    let _ = write!(out, ",{acc}");
                }
            }
            let _ = write!(out, ",{}", row.alpha);
            for w in &row.class_weights {
                let _ = write!(out, ",{w}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: MetricsLog,
    pub checkpoint_path: PathBuf,
    pub scheduler: SchedulerState<f64>,
    pub param_count: usize,
}

/// Flattened QA view of a dataset with pre-tokenized questions.
struct PreparedData {
    dataset: Dataset<f64>,
    tokens: Vec<Vec<TokenSequence>>, // parallel to samples
}

fn prepare(dataset: Dataset<f64>, vocab: &Vocabulary, l_max: usize) -> Result<PreparedData, TrainError> {
    let tokens = dataset
        .samples
        .iter()
        .map(|s| s.qa.iter().map(|qa| tokenize(&qa.question, vocab, l_max)).collect())
        .collect::<Result<Vec<Vec<_>>, _>>()?;
    Ok(PreparedData { dataset, tokens })
}

/// Stack images and masks of the chosen samples into batch tensors.
fn stack_batch(
    data: &PreparedData,
    idx: &[usize],
    n_seg_classes: usize,
) -> (Tensor<f64>, Tensor<f64>) {
    let size = data.dataset.image_size;
    let plane = size * size;
    let mut images = Vec::with_capacity(idx.len() * 3 * plane);
    let mut masks = Vec::with_capacity(idx.len() * n_seg_classes * plane);
    for &i in idx {
        images.extend_from_slice(data.dataset.samples[i].image.data());
        masks.extend_from_slice(data.dataset.samples[i].masks.data());
    }
    (
        Tensor::from_vec(vec![idx.len(), 3, size, size], images).expect("image batch"),
        Tensor::from_vec(vec![idx.len(), n_seg_classes, size, size], masks).expect("mask batch"),
    )
}

/// QA annotations of a batch flattened into parallel vectors; image_index
/// points each question at its row in the stacked batch.
struct QaBatch {
    sequences: Vec<TokenSequence>,
    image_index: Vec<usize>,
    targets: Vec<usize>,
    types: Vec<QuestionType>,
}

fn qa_batch(data: &PreparedData, idx: &[usize]) -> QaBatch {
    let mut sequences = Vec::new();
    let mut image_index = Vec::new();
    let mut targets = Vec::new();
    let mut types = Vec::new();
    for (row, &i) in idx.iter().enumerate() {
        for (qa, seq) in data.dataset.samples[i].qa.iter().zip(&data.tokens[i]) {
            sequences.push(seq.clone());
            image_index.push(row);
            targets.push(qa.answer_class);
            types.push(qa.question_type);
        }
    }
    QaBatch { sequences, image_index, targets, types }
}

struct BatchForward {
    mask_logits: Var,
    vqa_logits: Var,
    l_seg: Var,
    l_vqa: Var,
    total: Var,
    parts: loss::VqaLossParts<f64>,
}

#[allow(clippy::too_many_arguments)]
fn forward_batch(
    tape: &mut Tape<f64>,
    params: &ModelParams<f64>,
    model_config: &ModelConfig,
    images: &Tensor<f64>,
    masks: &Tensor<f64>,
    qa: &QaBatch,
    alpha: f64,
    weights: &[f64],
    convention: crate::loss::AlphaConvention,
) -> Result<(crate::model::TapedParams, BatchForward), TrainError> {
    let taped = stage_params(tape, params);
    let image_var = tape.leaf(images.clone());
    let seg = forward_seg(tape, image_var, &taped, model_config)?;
    let l_seg = loss::bce_seg_loss(tape, seg.mask_logits, masks)?;
    let vqa_logits = forward_vqa(
        tape,
        &qa.sequences,
        &qa.image_index,
        &seg.encoder_feats,
        &taped,
        model_config,
    )?;
    let (l_vqa, parts) = loss::vqa_loss(tape, vqa_logits, &qa.targets, weights)?;
    let total = loss::total_loss(tape, l_vqa, l_seg, alpha, convention)?;
    Ok((
        taped,
        BatchForward { mask_logits: seg.mask_logits, vqa_logits, l_seg, l_vqa, total, parts },
    ))
}

/// Evaluate a parameter set over a dataset. Batch VQA losses are
/// recombined weighted by their summed target-class weights, so the
/// reported loss equals the loss of the whole set as one batch.
pub fn evaluate_model(
    params: &ModelParams<f64>,
    model_config: &ModelConfig,
    data: &PreparedDataRef,
    alpha: f64,
    weights: &[f64],
    convention: crate::loss::AlphaConvention,
    batch_size: usize,
) -> Result<EvalMetrics, TrainError> {
    let n = data.dataset.samples.len();
    let mut miou_acc = MiouAccumulator::new(model_config.n_seg_classes);
    let mut acc_acc = AccuracyAccumulator::new();
    let mut seg_loss_sum = 0.0;
    let mut seg_pixels = 0.0;
    let mut vqa_loss_sum = 0.0;
    let mut vqa_weight_sum = 0.0;

    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let prepared = PreparedData {
            dataset: Dataset {
                samples: chunk.iter().map(|&i| data.dataset.samples[i].clone()).collect(),
                answer_table: data.dataset.answer_table.clone(),
                class_names: data.dataset.class_names.clone(),
                image_size: data.dataset.image_size,
            },
            tokens: chunk.iter().map(|&i| data.tokens[i].clone()).collect(),
        };
        let local_idx: Vec<usize> = (0..chunk.len()).collect();
        let (images, masks) = stack_batch(&prepared, &local_idx, model_config.n_seg_classes);
        let qa = qa_batch(&prepared, &local_idx);
        let mut tape = Tape::new();
        let (_, fwd) = forward_batch(
            &mut tape,
            params,
            model_config,
            &images,
            &masks,
            &qa,
            alpha,
            weights,
            convention,
        )?;

        miou_acc.add_batch(tape.value(fwd.mask_logits), &masks)?;
        acc_acc.add_batch(tape.value(fwd.vqa_logits), &qa.targets, &qa.types)?;

        let n_px = masks.numel() as f64;
        seg_loss_sum += tape.value(fwd.l_seg).item() * n_px;
        seg_pixels += n_px;
        let batch_weight: f64 = qa.targets.iter().map(|&y| weights[y]).sum();
        vqa_loss_sum += tape.value(fwd.l_vqa).item() * batch_weight;
        vqa_weight_sum += batch_weight;
    }

    let l_seg = seg_loss_sum / seg_pixels.max(1.0);
    let l_vqa = vqa_loss_sum / vqa_weight_sum.max(f64::MIN_POSITIVE);
    Ok(EvalMetrics {
        l_seg,
        l_vqa,
        l_total: loss::blend(l_vqa, l_seg, alpha, convention),
        miou: miou_acc.finalize(),
        accuracy: acc_acc.finalize(),
    })
}

/// Borrowed view that `evaluate_model` accepts (samples plus tokens).
pub struct PreparedDataRef<'a> {
    pub dataset: &'a Dataset<f64>,
    pub tokens: &'a [Vec<TokenSequence>],
}

/// Evaluate a checkpoint against a dataset, checking geometry first.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    dataset: &Dataset<f64>,
    batch_size: usize,
    scheduler_config: &SchedulerConfig,
) -> Result<EvalMetrics, TrainError> {
    if dataset.image_size != checkpoint.config.image_size {
        return Err(TrainError::GeometryMismatch(format!(
            "dataset images are {}px, checkpoint expects {}px",
            dataset.image_size, checkpoint.config.image_size
        )));
    }
    if dataset.n_seg_classes() != checkpoint.config.n_seg_classes {
        return Err(TrainError::GeometryMismatch(format!(
            "dataset has {} segmentation classes, checkpoint expects {}",
            dataset.n_seg_classes(),
            checkpoint.config.n_seg_classes
        )));
    }
    if dataset.n_answer_classes() != checkpoint.config.n_answer_classes {
        return Err(TrainError::GeometryMismatch(format!(
            "dataset has {} answer classes, checkpoint expects {}",
            dataset.n_answer_classes(),
            checkpoint.config.n_answer_classes
        )));
    }
    let vocab = Vocabulary::from_text(&checkpoint.vocab_text)?;
    let prepared = prepare(dataset.clone(), &vocab, checkpoint.config.l_max)?;
    evaluate_model(
        &checkpoint.params,
        &checkpoint.config,
        &PreparedDataRef { dataset: &prepared.dataset, tokens: &prepared.tokens },
        checkpoint.alpha,
        &checkpoint.class_weights,
        scheduler_config.alpha_convention,
        batch_size,
    )
}

fn resolve_dataset(config: &RunConfig) -> Result<(Dataset<f64>, Vec<String>), TrainError> {
    match &config.data {
        DataSource::Synthetic { n_images } => {
            let dataset = generate_synthetic(&SynthConfig {
                n_images: *n_images,
                image_size: config.image_size,
                seed: config.seed,
            });
            Ok((dataset, Vec::new()))
        }
        DataSource::Directory { path, n_seg_classes } => {
            let report = load_floodnet_dir(path, config.image_size, *n_seg_classes)?;
            Ok((report.dataset, report.warnings))
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Run a full training job; returns the metrics log and leaves all run
/// artifacts in `config.out_dir`.
pub fn train(config: &RunConfig) -> Result<TrainOutcome, TrainError> {
    train_with_progress(config, |_| {})
}

/// Like [`train`], invoking `progress` after every epoch.
pub fn train_with_progress(
    config: &RunConfig,
    mut progress: impl FnMut(&EpochRow),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let (dataset, warnings) = resolve_dataset(config)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let vocab = Vocabulary::default_charset();
    let model_config = ModelConfig {
        image_size: config.image_size,
        base_channels: config.base_channels,
        n_seg_classes: dataset.n_seg_classes(),
        n_answer_classes: dataset.n_answer_classes(),
        norm_mode: config.norm_mode,
        ..ModelConfig::desk(1, 1, vocab.size())
    };
    model_config.validate()?;

    let answer_classes = dataset.answer_table.answers().to_vec();
    let seg_class_names = dataset.class_names.clone();
    let [train_set, val_set, _test_set] = split(&dataset, &SplitSpec::with_seed(config.seed))?;
    let train_data = prepare(train_set, &vocab, model_config.l_max)?;
    let val_data = prepare(val_set, &vocab, model_config.l_max)?;

    let mut params = init_params::<f64>(&model_config, config.seed)?;
    let param_count = params.param_count();
    let mut scheduler = SchedulerState::<f64>::new(model_config.n_answer_classes);
    let mut optimizer = AdamW::<f64>::new(AdamWConfig {
        lr: config.optim.base_lr,
        weight_decay: config.optim.weight_decay,
        ..AdamWConfig::default()
    });

    fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;
    let checkpoint_path = config.out_dir.join("checkpoint.ckpt");
    let make_checkpoint = |params: &ModelParams<f64>, scheduler: &SchedulerState<f64>| Checkpoint {
        config: model_config.clone(),
        seed: config.seed,
        alpha: scheduler.alpha(),
        class_weights: scheduler.class_weights().to_vec(),
        scheduler_steps: scheduler.step_count(),
        answer_classes: answer_classes.clone(),
        class_names: seg_class_names.clone(),
        vocab_text: vocab.to_text(),
        params: params.clone(),
    };

    let mut log = MetricsLog { rows: Vec::new(), seg_class_names: seg_class_names.clone() };
    let mut last_good: Option<(ModelParams<f64>, SchedulerState<f64>)> = None;
    let shuffle_base = Rng::new(config.seed).derive(0x0e90c);

    for epoch in 1..=config.epochs {
        let lr = lr_at_epoch(&config.optim, epoch);
        optimizer.set_lr(lr);

        let mut order: Vec<usize> = (0..train_data.dataset.samples.len()).collect();
        shuffle_base.derive(epoch as u64).shuffle(&mut order);

        let mut epoch_l_seg = 0.0;
        let mut epoch_l_vqa = 0.0;
        let mut epoch_l_total = 0.0;
        let mut n_batches = 0usize;
        let mut epoch_nll: Vec<f64> = Vec::new();
        let mut epoch_targets: Vec<usize> = Vec::new();

        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let (images, masks) = stack_batch(&train_data, chunk, model_config.n_seg_classes);
            let qa = qa_batch(&train_data, chunk);
            let alpha = scheduler.alpha();
            let weights = scheduler.class_weights().to_vec();

            let mut tape = Tape::new();
            let (taped, fwd) = forward_batch(
                &mut tape,
                &params,
                &model_config,
                &images,
                &masks,
                &qa,
                alpha,
                &weights,
                config.scheduler.alpha_convention,
            )?;
            let l_seg = tape.value(fwd.l_seg).item();
            let l_vqa = tape.value(fwd.l_vqa).item();
            let l_total = tape.value(fwd.total).item();
            if !l_total.is_finite() {
                let (p, s) = last_good.unwrap_or_else(|| (params.clone(), scheduler.clone()));
                make_checkpoint(&p, &s).save(&checkpoint_path)?;
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    checkpoint: checkpoint_path.display().to_string(),
                });
            }
            // these parameters just produced a verified-finite loss; they
            // are what an abort later on should roll back to
            last_good = Some((params.clone(), scheduler.clone()));

            let grads = tape.backward(fwd.total)?;
            let taped_vars: Vec<Var> = taped.named().iter().map(|(_, v)| **v).collect();
            let mut grad_tensors: Vec<Tensor<f64>> = Vec::with_capacity(taped_vars.len());
            {
                let named = params.named();
                for (var, (_, tensor)) in taped_vars.iter().zip(named.iter()) {
                    grad_tensors.push(grads.get_or_zeros(*var, tensor.shape()));
                }
            }
            if let Some(max_norm) = config.optim.grad_clip_norm {
                let norm: f64 = grad_tensors
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    let scale = max_norm / norm;
                    for g in &mut grad_tensors {
                        for v in g.data_mut() {
                            *v *= scale;
                        }
                    }
                }
            }
            {
                let mut named = params.named_mut();
                let mut pairs: Vec<(&mut [f64], &[f64])> = named
                    .iter_mut()
                    .zip(grad_tensors.iter())
                    .map(|((_, t), g)| (t.data_mut(), g.data()))
                    .collect();
                optimizer.step(&mut pairs);
            }

            let breakdown = LossBreakdown::new(
                alpha,
                config.scheduler.alpha_convention,
                l_seg,
                l_vqa,
                fwd.parts,
            );
            match config.scheduler.cadence {
                UpdateCadence::PerBatch => scheduler.datwep_step(&breakdown, &config.scheduler)?,
                UpdateCadence::PerEpochMean => {
                    epoch_nll.extend_from_slice(&breakdown.per_sample_nll);
                    epoch_targets.extend_from_slice(&breakdown.target_classes);
                }
            }

            epoch_l_seg += l_seg;
            epoch_l_vqa += l_vqa;
            epoch_l_total += l_total;
            n_batches += 1;
        }

        if config.scheduler.cadence == UpdateCadence::PerEpochMean && n_batches > 0 {
            let mean_breakdown = LossBreakdown {
                l_seg: epoch_l_seg / n_batches as f64,
                l_vqa: epoch_l_vqa / n_batches as f64,
                l_total: epoch_l_total / n_batches as f64,
                alpha_used: scheduler.alpha(),
                per_sample_nll: std::mem::take(&mut epoch_nll),
                target_classes: std::mem::take(&mut epoch_targets),
                class_weights_used: scheduler.class_weights().to_vec(),
            };
            scheduler.datwep_step(&mean_breakdown, &config.scheduler)?;
        }

        let val = evaluate_model(
            &params,
            &model_config,
            &PreparedDataRef { dataset: &val_data.dataset, tokens: &val_data.tokens },
            scheduler.alpha(),
            scheduler.class_weights(),
            config.scheduler.alpha_convention,
            config.batch_size,
        )?;
        log.rows.push(EpochRow {
            epoch,
            lr,
            train_l_seg: epoch_l_seg / n_batches.max(1) as f64,
            train_l_vqa: epoch_l_vqa / n_batches.max(1) as f64,
            train_l_total: epoch_l_total / n_batches.max(1) as f64,
            val,
            alpha: scheduler.alpha(),
            class_weights: scheduler.class_weights().to_vec(),
        });
        progress(log.rows.last().expect("row just pushed"));
    }

    if !params.all_finite() {
        return Err(TrainError::BadConfig(
            "parameters became non-finite without tripping the loss guard".to_string(),
        ));
    }

    make_checkpoint(&params, &scheduler).save(&checkpoint_path)?;
    write_run_artifacts(config, &model_config, &log, &scheduler, param_count, &vocab)?;
    Ok(TrainOutcome { metrics: log, checkpoint_path, scheduler, param_count })
}

fn write_run_artifacts(
    config: &RunConfig,
    model_config: &ModelConfig,
    log: &MetricsLog,
    scheduler: &SchedulerState<f64>,
    param_count: usize,
    vocab: &Vocabulary,
) -> Result<(), TrainError> {
    let out = &config.out_dir;

    let metrics_path = out.join("metrics.csv");
    fs::write(&metrics_path, log.to_csv()).map_err(io_err(&metrics_path))?;

    let history_path = out.join("scheduler_history.csv");
    let mut history = Vec::new();
    scheduler.write_history_csv(&mut history).map_err(io_err(&history_path))?;
    fs::write(&history_path, history).map_err(io_err(&history_path))?;

    let vocab_path = out.join("vocab.txt");
    fs::write(&vocab_path, vocab.to_text()).map_err(io_err(&vocab_path))?;

    let plots_dir = out.join("plots");
    fs::create_dir_all(&plots_dir).map_err(io_err(&plots_dir))?;

    let mut alpha_points = vec![(0.0, scheduler.initial_alpha())];
    alpha_points.extend(
        scheduler.history().iter().map(|r| (r.step as f64, r.alpha)),
    );
    plot::write_line_chart(
        &plots_dir.join("alpha.svg"),
        "task balance alpha over scheduler steps",
        "step",
        "alpha",
        &[Series { label: "alpha".to_string(), points: alpha_points, color: plot::PALETTE[0] }],
    )
    .map_err(io_err(&plots_dir))?;

    let n_weights = scheduler.class_weights().len();
    let weight_series: Vec<Series> = (0..n_weights)
        .map(|k| {
            let mut points = vec![(0.0, scheduler.initial_weights()[k])];
            points.extend(
                scheduler.history().iter().map(|r| (r.step as f64, r.class_weights[k])),
            );
            Series {
                label: format!("weight_{k}"),
                points,
                color: plot::PALETTE[k % plot::PALETTE.len()],
            }
        })
        .collect();
    plot::write_line_chart(
        &plots_dir.join("weights.svg"),
        "answer-class weights over scheduler steps",
        "step",
        "weight",
        &weight_series,
    )
    .map_err(io_err(&plots_dir))?;

    let epoch_series = |label: &str, f: &dyn Fn(&EpochRow) -> f64, color| Series {
        label: label.to_string(),
        points: log.rows.iter().map(|r| (r.epoch as f64, f(r))).collect(),
        color,
    };
    plot::write_line_chart(
        &plots_dir.join("metrics.svg"),
        "validation metrics and alpha over epochs",
        "epoch",
        "value",
        &[
            epoch_series("val mIoU", &|r| r.val.miou.mean, plot::PALETTE[0]),
            epoch_series("val accuracy", &|r| r.val.accuracy.overall.accuracy(), plot::PALETTE[1]),
            epoch_series("train total loss", &|r| r.train_l_total, plot::PALETTE[2]),
            epoch_series("val total loss", &|r| r.val.l_total, plot::PALETTE[3]),
            epoch_series("alpha", &|r| r.alpha, plot::PALETTE[4]),
        ],
    )
    .map_err(io_err(&plots_dir))?;

    #[derive(Serialize)]
    struct RunMetadata<'a> {
        run_config: &'a RunConfig,
        resolved_model_config: &'a ModelConfig,
        param_count: usize,
        revision: String,
    }
    let config_json = serde_json::to_string(config).expect("run config serializes");
    let revision = format!("{}+cfg.{:016x}", env!("CARGO_PKG_VERSION"), fnv1a(config_json.as_bytes()));
    let metadata = RunMetadata {
        run_config: config,
        resolved_model_config: model_config,
        param_count,
        revision,
    };
    let metadata_path = out.join("run_metadata.json");
    fs::write(
        &metadata_path,
        serde_json::to_string_pretty(&metadata).expect("metadata serializes"),
    )
    .map_err(io_err(&metadata_path))?;
    Ok(())
}

/// Load a dataset and evaluate a checkpoint file against it; used by the
/// eval CLI.
pub fn evaluate_dir(
    checkpoint_path: &Path,
    data_dir: &Path,
    batch_size: usize,
) -> Result<(EvalMetrics, Checkpoint), TrainError> {
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let report =
        load_floodnet_dir::<f64>(data_dir, checkpoint.config.image_size, checkpoint.config.n_seg_classes)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let mut dataset = report.dataset;
    // keep the checkpoint's segmentation class names for reporting
    dataset.class_names = checkpoint.class_names.clone();
    let metrics =
        evaluate_checkpoint(&checkpoint, &dataset, batch_size, &SchedulerConfig::default())?;
    Ok((metrics, checkpoint))
}
