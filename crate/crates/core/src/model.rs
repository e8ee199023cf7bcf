//! The multitask multimodal network: a U-shaped encoder-decoder that emits
//! one mask logit channel per segmentation class, plus a question
//! classifier that fuses pooled multi-scale encoder features with
//! character-level text features.
//!
//! Blocks 1-3 downsample by two each (double conv then 2x2 max pool),
//! block 4 is the bottleneck, and blocks 5-7 concatenate the matching
//! encoder features, upsample by two, and double-conv. A final 1x1
//! convolution maps the last feature block to the per-class mask logits.
//! The question classifier embeds tokens, adds sinusoidal positional
//! encodings, zeroes pad positions, flattens, and passes a linear layer;
//! text features are concatenated with the globally averaged encoder
//! features of the paired image and a final linear layer scores the
//! answer classes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NormMode, Tape, TapeError, Var};
use crate::tensor::Tensor;
use crate::text::{padding_mask, PositionalEncoder, TokenSequence};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("{0}")]
    BadInput(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input images are square with this side; three 2x downsamples require
    /// divisibility by 8.
    pub image_size: usize,
    /// Channel count of block 1; later blocks scale from it.
    pub base_channels: usize,
    pub n_seg_classes: usize,
    pub n_answer_classes: usize,
    /// Character embedding width (positional encodings share it).
    pub d_emb: usize,
    /// Fixed token sequence length.
    pub l_max: usize,
    /// Output width of the text-feature layer.
    pub text_feat_dim: usize,
    /// Embedding table rows; must cover every token id.
    pub vocab_size: usize,
    pub norm_mode: NormMode,
}

impl ModelConfig {
    /// Desk-scale defaults: 32x32 inputs, 8 base channels.
    pub fn desk(n_seg_classes: usize, n_answer_classes: usize, vocab_size: usize) -> Self {
        ModelConfig {
            image_size: 32,
            base_channels: 8,
            n_seg_classes,
            n_answer_classes,
            d_emb: 8,
            l_max: 70,
            text_feat_dim: 64,
            vocab_size,
            norm_mode: NormMode::FixedUnit,
        }
    }

    /// Full-scale geometry: 200x200 inputs, 64 base channels; about 9.1M
    /// parameters with the question classifier.
    pub fn full_scale(n_seg_classes: usize, n_answer_classes: usize, vocab_size: usize) -> Self {
        ModelConfig {
            image_size: 200,
            base_channels: 64,
            ..Self::desk(n_seg_classes, n_answer_classes, vocab_size)
        }
    }

    /// Tiny geometry for gradient checks.
    pub fn tiny(n_seg_classes: usize, n_answer_classes: usize, vocab_size: usize) -> Self {
        ModelConfig {
            image_size: 8,
            base_channels: 2,
            d_emb: 4,
            l_max: 12,
            text_feat_dim: 8,
            ..Self::desk(n_seg_classes, n_answer_classes, vocab_size)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(ModelError::BadConfig(format!(
                "image_size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("n_seg_classes", self.n_seg_classes),
            ("n_answer_classes", self.n_answer_classes),
            ("d_emb", self.d_emb),
            ("text_feat_dim", self.text_feat_dim),
        ] {
            if v == 0 {
                return Err(ModelError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.l_max < 2 {
            return Err(ModelError::BadConfig("l_max must be at least 2".to_string()));
        }
        if self.vocab_size <= crate::text::EOW as usize {
            return Err(ModelError::BadConfig(
                "vocab_size must cover the special tokens".to_string(),
            ));
        }
        Ok(())
    }

    /// (in_channels, out_channels) of each double-conv block 1-7.
    pub fn block_channels(&self) -> [(usize, usize); 7] {
        let b = self.base_channels;
        [
            (3, b),
            (b, 2 * b),
            (2 * b, 4 * b),
            (4 * b, 8 * b),
            (12 * b, 4 * b), // bottleneck output concatenated with block 3 features
            (6 * b, 4 * b),  // with block 2 features
            (5 * b, 2 * b),  // with block 1 features
        ]
    }

    /// Post-pool encoder feature shapes (C, H, W) of blocks 1-3.
    pub fn encoder_shapes(&self) -> [(usize, usize, usize); 3] {
        let b = self.base_channels;
        let s = self.image_size;
        [(b, s / 2, s / 2), (2 * b, s / 4, s / 4), (4 * b, s / 8, s / 8)]
    }

    /// Width of the fused classifier input: text features plus the pooled
    /// channels of the three encoder stages.
    pub fn fused_dim(&self) -> usize {
        self.text_feat_dim + 7 * self.base_channels
    }
}

/// Parameters of one (conv, norm, relu) x 2 block, generic over the
/// container so the same structure describes host tensors and taped vars.
#[derive(Clone, Debug)]
pub struct DoubleConvOf<T> {
    pub conv1_kernel: T,
    pub conv1_bias: T,
    pub norm1_gamma: T,
    pub norm1_beta: T,
    pub conv2_kernel: T,
    pub conv2_bias: T,
    pub norm2_gamma: T,
    pub norm2_beta: T,
}

impl<T> DoubleConvOf<T> {
    fn fields(&self) -> [(&'static str, &T); 8] {
        [
            ("conv1.kernel", &self.conv1_kernel),
            ("conv1.bias", &self.conv1_bias),
            ("norm1.gamma", &self.norm1_gamma),
            ("norm1.beta", &self.norm1_beta),
            ("conv2.kernel", &self.conv2_kernel),
            ("conv2.bias", &self.conv2_bias),
            ("norm2.gamma", &self.norm2_gamma),
            ("norm2.beta", &self.norm2_beta),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut T); 8] {
        [
            ("conv1.kernel", &mut self.conv1_kernel),
            ("conv1.bias", &mut self.conv1_bias),
            ("norm1.gamma", &mut self.norm1_gamma),
            ("norm1.beta", &mut self.norm1_beta),
            ("conv2.kernel", &mut self.conv2_kernel),
            ("conv2.bias", &mut self.conv2_bias),
            ("norm2.gamma", &mut self.norm2_gamma),
            ("norm2.beta", &mut self.norm2_beta),
        ]
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DoubleConvOf<U> {
        DoubleConvOf {
            conv1_kernel: f(&self.conv1_kernel),
            conv1_bias: f(&self.conv1_bias),
            norm1_gamma: f(&self.norm1_gamma),
            norm1_beta: f(&self.norm1_beta),
            conv2_kernel: f(&self.conv2_kernel),
            conv2_bias: f(&self.conv2_bias),
            norm2_gamma: f(&self.norm2_gamma),
            norm2_beta: f(&self.norm2_beta),
        }
    }
}

/// The full parameter set, generic over the container type.
#[derive(Clone, Debug)]
pub struct ModelTensorsOf<T> {
    /// Blocks 1-3 encoder, 4 bottleneck, 5-7 decoder.
    pub blocks: Vec<DoubleConvOf<T>>,
    pub mask_kernel: T,
    pub mask_bias: T,
    pub embedding: T,
    pub text_weight: T,
    pub text_bias: T,
    pub classifier_weight: T,
    pub classifier_bias: T,
}

impl<T> ModelTensorsOf<T> {
    /// Deterministic (name, tensor) listing; checkpointing, optimizer slot
    /// order, and taping all share it.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            for (field, t) in block.fields() {
                out.push((format!("block{}.{field}", i + 1), t));
            }
        }
        out.push(("mask_head.kernel".to_string(), &self.mask_kernel));
        out.push(("mask_head.bias".to_string(), &self.mask_bias));
        out.push(("embedding.table".to_string(), &self.embedding));
        out.push(("text.weight".to_string(), &self.text_weight));
        out.push(("text.bias".to_string(), &self.text_bias));
        out.push(("classifier.weight".to_string(), &self.classifier_weight));
        out.push(("classifier.bias".to_string(), &self.classifier_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (field, t) in block.fields_mut() {
                out.push((format!("block{}.{field}", i + 1), t));
            }
        }
        out.push(("mask_head.kernel".to_string(), &mut self.mask_kernel));
        out.push(("mask_head.bias".to_string(), &mut self.mask_bias));
        out.push(("embedding.table".to_string(), &mut self.embedding));
        out.push(("text.weight".to_string(), &mut self.text_weight));
        out.push(("text.bias".to_string(), &mut self.text_bias));
        out.push(("classifier.weight".to_string(), &mut self.classifier_weight));
        out.push(("classifier.bias".to_string(), &mut self.classifier_bias));
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelTensorsOf<U> {
        ModelTensorsOf {
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            mask_kernel: f(&self.mask_kernel),
            mask_bias: f(&self.mask_bias),
            embedding: f(&self.embedding),
            text_weight: f(&self.text_weight),
            text_bias: f(&self.text_bias),
            classifier_weight: f(&self.classifier_weight),
            classifier_bias: f(&self.classifier_bias),
        }
    }
}

pub type ModelParams<S> = ModelTensorsOf<Tensor<S>>;
/// Parameters staged onto a tape for one forward/backward pass.
pub type TapedParams = ModelTensorsOf<Var>;

fn uniform_tensor<S: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| S::from_f64(rng.uniform(-bound, bound)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("uniform tensor shape")
}

fn double_conv_params<S: Scalar>(
    rng: &mut Rng,
    in_channels: usize,
    out_channels: usize,
) -> DoubleConvOf<Tensor<S>> {
    DoubleConvOf {
        conv1_kernel: uniform_tensor(rng, &[out_channels, in_channels, 3, 3], in_channels * 9),
        conv1_bias: Tensor::zeros(&[out_channels]),
        norm1_gamma: Tensor::full(&[out_channels], S::one()),
        norm1_beta: Tensor::zeros(&[out_channels]),
        conv2_kernel: uniform_tensor(rng, &[out_channels, out_channels, 3, 3], out_channels * 9),
        conv2_bias: Tensor::zeros(&[out_channels]),
        norm2_gamma: Tensor::full(&[out_channels], S::one()),
        norm2_beta: Tensor::zeros(&[out_channels]),
    }
}

/// Deterministic fan-in-scaled uniform initialization: weight tensors are
/// drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases start at zero,
/// norm scales at one.
pub fn init_params<S: Scalar>(
    config: &ModelConfig,
    seed: u64,
) -> Result<ModelParams<S>, ModelError> {
    config.validate()?;
    let mut rng = Rng::new(seed).derive(0x6d6f64656c); // model init stream
    let blocks = config
        .block_channels()
        .iter()
        .map(|&(cin, cout)| double_conv_params(&mut rng, cin, cout))
        .collect();
    let last_channels = config.block_channels()[6].1;
    let text_in = config.l_max * config.d_emb;
    Ok(ModelTensorsOf {
        blocks,
        mask_kernel: uniform_tensor(
            &mut rng,
            &[config.n_seg_classes, last_channels],
            last_channels,
        ),
        mask_bias: Tensor::zeros(&[config.n_seg_classes]),
        embedding: uniform_tensor(&mut rng, &[config.vocab_size, config.d_emb], config.d_emb),
        text_weight: uniform_tensor(&mut rng, &[config.text_feat_dim, text_in], text_in),
        text_bias: Tensor::zeros(&[config.text_feat_dim]),
        classifier_weight: uniform_tensor(
            &mut rng,
            &[config.n_answer_classes, config.fused_dim()],
            config.fused_dim(),
        ),
        classifier_bias: Tensor::zeros(&[config.n_answer_classes]),
    })
}

impl<S: Scalar> ModelParams<S> {
    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

/// Put every parameter tensor on the tape as a leaf, preserving the
/// `named()` order so gradients can be zipped back onto the host tensors.
pub fn stage_params<S: Scalar>(tape: &mut Tape<S>, params: &ModelParams<S>) -> TapedParams {
    params.map(|t| tape.leaf(t.clone()))
}

/// Segmentation forward outputs: mask logits plus the three encoder
/// feature maps the question classifier consumes.
pub struct SegForward {
    pub mask_logits: Var,
    pub encoder_feats: [Var; 3],
}

fn double_conv<S: Scalar>(
    tape: &mut Tape<S>,
    input: Var,
    p: &DoubleConvOf<Var>,
    mode: NormMode,
) -> Result<Var, TapeError> {
    let x = tape.conv2d(input, p.conv1_kernel, p.conv1_bias)?;
    let x = tape.affine_channel(x, p.norm1_gamma, p.norm1_beta, mode)?;
    let x = tape.relu(x);
    let x = tape.conv2d(x, p.conv2_kernel, p.conv2_bias)?;
    let x = tape.affine_channel(x, p.norm2_gamma, p.norm2_beta, mode)?;
    Ok(tape.relu(x))
}

/// Encoder-decoder pass over a batch of images [N, 3, H, W].
pub fn forward_seg<S: Scalar>(
    tape: &mut Tape<S>,
    image: Var,
    params: &TapedParams,
    config: &ModelConfig,
) -> Result<SegForward, ModelError> {
    let shape = tape.shape(image).to_vec();
    let s = config.image_size;
    if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
        return Err(ModelError::BadInput(format!(
            "expected image batch [N, 3, {s}, {s}], got {shape:?}"
        )));
    }
    let mode = config.norm_mode;

    let x = double_conv(tape, image, &params.blocks[0], mode)?;
    let e1 = tape.maxpool2(x)?;
    let x = double_conv(tape, e1, &params.blocks[1], mode)?;
    let e2 = tape.maxpool2(x)?;
    let x = double_conv(tape, e2, &params.blocks[2], mode)?;
    let e3 = tape.maxpool2(x)?;

    let bottleneck = double_conv(tape, e3, &params.blocks[3], mode)?;

    let x = tape.concat_channels(bottleneck, e3)?;
    let x = tape.upsample2(x)?;
    let x = double_conv(tape, x, &params.blocks[4], mode)?;
    let x = tape.concat_channels(x, e2)?;
    let x = tape.upsample2(x)?;
    let x = double_conv(tape, x, &params.blocks[5], mode)?;
    let x = tape.concat_channels(x, e1)?;
    let x = tape.upsample2(x)?;
    let x = double_conv(tape, x, &params.blocks[6], mode)?;

    let mask_logits = tape.conv1x1(x, params.mask_kernel, params.mask_bias)?;
    Ok(SegForward { mask_logits, encoder_feats: [e1, e2, e3] })
}

/// Constant [M, L, D] tensor of positional encodings tiled over the batch.
fn positional_constant<S: Scalar>(config: &ModelConfig, m: usize) -> Tensor<S> {
    let table = PositionalEncoder::new(config.d_emb, config.l_max).table();
    let row: Vec<S> = table.iter().map(|&v| S::from_f64(v)).collect();
    let mut data = Vec::with_capacity(m * row.len());
    for _ in 0..m {
        data.extend_from_slice(&row);
    }
    Tensor::from_vec(vec![m, config.l_max, config.d_emb], data).expect("positional shape")
}

/// Constant [M, L, D] pad mask: 1 on real tokens, 0 on padding, replicated
/// across the embedding dim so a single elementwise multiply zeroes pad
/// embeddings exactly.
fn mask_constant<S: Scalar>(sequences: &[TokenSequence], d_emb: usize) -> Tensor<S> {
    let l = sequences[0].l_max();
    let mut data = Vec::with_capacity(sequences.len() * l * d_emb);
    for seq in sequences {
        for keep in padding_mask(seq) {
            let v = if keep == 1 { S::one() } else { S::zero() };
            data.extend(std::iter::repeat(v).take(d_emb));
        }
    }
    Tensor::from_vec(vec![sequences.len(), l, d_emb], data).expect("mask shape")
}

/// Question classifier pass. `image_index[i]` pairs question `i` with a row
/// of the encoder feature batch that produced `encoder_feats`.
pub fn forward_vqa<S: Scalar>(
    tape: &mut Tape<S>,
    sequences: &[TokenSequence],
    image_index: &[usize],
    encoder_feats: &[Var; 3],
    params: &TapedParams,
    config: &ModelConfig,
) -> Result<Var, ModelError> {
    if sequences.is_empty() {
        return Err(ModelError::BadInput("empty question batch".to_string()));
    }
    if sequences.len() != image_index.len() {
        return Err(ModelError::BadInput(format!(
            "{} questions but {} image indices",
            sequences.len(),
            image_index.len()
        )));
    }
    if let Some(seq) = sequences.iter().find(|s| s.l_max() != config.l_max) {
        return Err(ModelError::BadInput(format!(
            "sequence padded to {} but model expects l_max {}",
            seq.l_max(),
            config.l_max
        )));
    }
    let m = sequences.len();
    let ids: Vec<usize> =
        sequences.iter().flat_map(|s| s.ids().iter().map(|&id| id as usize)).collect();

    let embedded = tape.embedding_lookup(params.embedding, &ids, m, config.l_max)?;
    let pos = tape.leaf(positional_constant(config, m));
    let with_pos = tape.add(embedded, pos)?;
    let mask = tape.leaf(mask_constant(sequences, config.d_emb));
    let masked = tape.mul(with_pos, mask)?;
    let flat = tape.flatten(masked)?;
    let text_feats = tape.linear(flat, params.text_weight, params.text_bias)?;

    let mut fused = vec![text_feats];
    for &feat in encoder_feats {
        let pooled = tape.global_avg_pool(feat)?;
        fused.push(tape.select_rows(pooled, image_index)?);
    }
    let fused = tape.concat_cols(&fused)?;
    Ok(tape.linear(fused, params.classifier_weight, params.classifier_bias)?)
}
