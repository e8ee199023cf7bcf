//! Directory-format reader/writer and image resizing.
//!
//! Images resize by exact area averaging (box filter with fractional
//! pixel coverage); masks resize by nearest neighbor so they stay
//! integer-coded. Pixels are normalized by 255 on load, and the writer
//! rounds back, so a write/load round trip of tensors that came from
//! 8-bit data is exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::Path;

use serde::Deserialize;

use crate::metrics::QuestionType;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{AnswerTable, DataError, Dataset, QaItem, Sample};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

// ── resizing ────────────────────────────────────────────────────────

/// Area-average (box filter) resize of interleaved RGB data.
pub fn resize_rgb_area(src: &[u8], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<u8> {
    assert_eq!(src.len(), sw * sh * 3, "source buffer size");
    if sw == dw && sh == dh {
        return src.to_vec();
    }
    let mut out = vec![0u8; dw * dh * 3];
    let x_ratio = sw as f64 / dw as f64;
    let y_ratio = sh as f64 / dh as f64;
    for dy in 0..dh {
        let y0 = dy as f64 * y_ratio;
        let y1 = (dy + 1) as f64 * y_ratio;
        for dx in 0..dw {
            let x0 = dx as f64 * x_ratio;
            let x1 = (dx + 1) as f64 * x_ratio;
            let mut acc = [0.0f64; 3];
            let mut area = 0.0;
            let mut sy = y0.floor() as usize;
            while (sy as f64) < y1 && sy < sh {
                let wy = (y1.min((sy + 1) as f64) - y0.max(sy as f64)).max(0.0);
                let mut sx = x0.floor() as usize;
                while (sx as f64) < x1 && sx < sw {
                    let wx = (x1.min((sx + 1) as f64) - x0.max(sx as f64)).max(0.0);
                    let w = wx * wy;
                    let p = (sy * sw + sx) * 3;
                    for c in 0..3 {
                        acc[c] += w * src[p + c] as f64;
                    }
                    area += w;
                    sx += 1;
                }
                sy += 1;
            }
            let p = (dy * dw + dx) * 3;
            for c in 0..3 {
                out[p + c] = (acc[c] / area).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Nearest-neighbor resize of single-channel data; preserves the value
/// set, which keeps integer-coded masks valid.
pub fn resize_gray_nearest(src: &[u8], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<u8> {
    assert_eq!(src.len(), sw * sh, "source buffer size");
    if sw == dw && sh == dh {
        return src.to_vec();
    }
    let mut out = vec![0u8; dw * dh];
    for dy in 0..dh {
        let sy = (((dy as f64 + 0.5) * sh as f64 / dh as f64) as usize).min(sh - 1);
        for dx in 0..dw {
            let sx = (((dx as f64 + 0.5) * sw as f64 / dw as f64) as usize).min(sw - 1);
            out[dy * dw + dx] = src[sy * sw + sx];
        }
    }
    out
}

// ── png io ──────────────────────────────────────────────────────────

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| DataError::Png { path: path.to_path_buf(), detail: e.to_string() })?;
    writer
        .write_image_data(data)
        .map_err(|e| DataError::Png { path: path.to_path_buf(), detail: e.to_string() })
}

/// Decode an 8-bit PNG to (width, height, channels, data); grayscale
/// stays single channel, RGB/RGBA normalize to 3 channels.
fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| DataError::Png { path: path.to_path_buf(), detail: e.to_string() })?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| DataError::Png { path: path.to_path_buf(), detail: e.to_string() })?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(DataError::Png {
            path: path.to_path_buf(),
            detail: format!("unsupported bit depth {:?}", info.bit_depth),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(info.buffer_size());
    let (channels, data) = match info.color_type {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::Rgba => {
            let mut rgb = Vec::with_capacity(w * h * 3);
            for px in buf.chunks_exact(4) {
                rgb.extend_from_slice(&px[..3]);
            }
            (3, rgb)
        }
        png::ColorType::GrayscaleAlpha => {
            let gray: Vec<u8> = buf.chunks_exact(2).map(|px| px[0]).collect();
            (1, gray)
        }
        other => {
            return Err(DataError::Png {
                path: path.to_path_buf(),
                detail: format!("unsupported color type {other:?}"),
            })
        }
    };
    Ok((w, h, channels, data))
}

// ── writer ──────────────────────────────────────────────────────────

#[derive(Deserialize, serde::Serialize)]
struct QaRecord {
    image_id: String,
    question: String,
    answer: String,
    question_type: QuestionType,
}

/// Write a dataset in the directory layout. Masks are re-derived from the
/// binary channels, so channels must be disjoint per pixel.
pub fn write_floodnet_dir<S: Scalar>(dataset: &Dataset<S>, dir: &Path) -> Result<(), DataError> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    fs::create_dir_all(&masks_dir).map_err(io_err(&masks_dir))?;

    let size = dataset.image_size;
    let plane = size * size;
    let k = dataset.n_seg_classes();

    let mut qa_lines = String::new();
    for sample in &dataset.samples {
        let mut rgb = vec![0u8; plane * 3];
        let img = sample.image.data();
        for p in 0..plane {
            for c in 0..3 {
                let v = img[c * plane + p].as_f64() * 255.0;
                rgb[p * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        write_png(
            &images_dir.join(format!("{}.png", sample.id)),
            size,
            size,
            png::ColorType::Rgb,
            &rgb,
        )?;

        let mut coded = vec![0u8; plane];
        let m = sample.masks.data();
        for p in 0..plane {
            let mut owner = None;
            for ki in 0..k {
                if m[ki * plane + p] == S::one() {
                    if owner.is_some() {
                        return Err(DataError::OverlappingMasks {
                            sample: sample.id.clone(),
                            pixel: p,
                            count: 2,
                        });
                    }
                    owner = Some(ki as u8);
                }
            }
            coded[p] = owner.ok_or_else(|| DataError::OverlappingMasks {
                sample: sample.id.clone(),
                pixel: p,
                count: 0,
            })?;
        }
        write_png(
            &masks_dir.join(format!("{}.png", sample.id)),
            size,
            size,
            png::ColorType::Grayscale,
            &coded,
        )?;

        for qa in &sample.qa {
            let record = QaRecord {
                image_id: sample.id.clone(),
                question: qa.question.clone(),
                answer: qa.answer.clone(),
                question_type: qa.question_type,
            };
            qa_lines.push_str(&serde_json::to_string(&record).expect("qa record serializes"));
            qa_lines.push('\n');
        }
    }

    let qa_path = dir.join("qa.jsonl");
    fs::write(&qa_path, qa_lines).map_err(io_err(&qa_path))?;
    let answers_path = dir.join("answers.txt");
    fs::write(&answers_path, dataset.answer_table.to_text()).map_err(io_err(&answers_path))?;
    Ok(())
}

// ── loader ──────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct LoadReport<S> {
    pub dataset: Dataset<S>,
    pub warnings: Vec<String>,
}

/// Load a dataset directory, resizing everything to `image_size` and
/// splitting integer-coded masks into `n_seg_classes` binary channels.
/// Images without a mask are skipped with a warning; unknown answers and
/// out-of-range mask values are hard errors.
pub fn load_floodnet_dir<S: Scalar>(
    dir: &Path,
    image_size: usize,
    n_seg_classes: usize,
) -> Result<LoadReport<S>, DataError> {
    let answers_path = dir.join("answers.txt");
    let answers_text = fs::read_to_string(&answers_path).map_err(io_err(&answers_path))?;
    let answer_table = AnswerTable::from_text(&answers_text)?;

    let qa_path = dir.join("qa.jsonl");
    let qa_file = fs::File::open(&qa_path).map_err(io_err(&qa_path))?;
    let mut qa_by_image: std::collections::BTreeMap<String, Vec<QaItem>> = Default::default();
    for (lineno, line) in BufReader::new(qa_file).lines().enumerate() {
        let line = line.map_err(io_err(&qa_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QaRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::BadQaLine { line: lineno + 1, detail: e.to_string() })?;
        let answer_class = answer_table.class_of(&record.answer)?;
        qa_by_image.entry(record.image_id).or_default().push(QaItem {
            question: record.question,
            question_type: record.question_type,
            answer: record.answer,
            answer_class,
        });
    }

    let images_dir = dir.join("images");
    let mut ids: Vec<String> = fs::read_dir(&images_dir)
        .map_err(io_err(&images_dir))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                path.file_stem().and_then(|s| s.to_str()).map(str::to_string)
            } else {
                None
            }
        })
        .collect();
    ids.sort();

    let mut warnings = Vec::new();
    let mut samples = Vec::new();
    let plane = image_size * image_size;
    for id in ids {
        let mask_path = dir.join("masks").join(format!("{id}.png"));
        if !mask_path.exists() {
            warnings.push(format!("image {id} has no mask; skipped"));
            continue;
        }
        let image_path = images_dir.join(format!("{id}.png"));
        let (w, h, channels, data) = read_png(&image_path)?;
        let rgb = match channels {
            3 => data,
            1 => data.iter().flat_map(|&v| [v, v, v]).collect(),
            _ => unreachable!("read_png normalizes channels"),
        };
        let rgb = resize_rgb_area(&rgb, w, h, image_size, image_size);
        let mut image = vec![S::zero(); 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                image[c * plane + p] = S::from_f64(rgb[p * 3 + c] as f64 / 255.0);
            }
        }

        let (mw, mh, mchannels, mdata) = read_png(&mask_path)?;
        if mchannels != 1 {
            return Err(DataError::Png {
                path: mask_path.clone(),
                detail: format!("mask must be single-channel, got {mchannels} channels"),
            });
        }
        let coded = resize_gray_nearest(&mdata, mw, mh, image_size, image_size);
        let mut masks = vec![S::zero(); n_seg_classes * plane];
        for (p, &value) in coded.iter().enumerate() {
            if value as usize >= n_seg_classes {
                return Err(DataError::BadMaskValue {
                    path: mask_path.clone(),
                    value,
                    n_classes: n_seg_classes,
                });
            }
            masks[value as usize * plane + p] = S::one();
        }

        samples.push(Sample {
            qa: qa_by_image.remove(&id).unwrap_or_default(),
            id,
            image: Tensor::from_vec(vec![3, image_size, image_size], image).expect("image shape"),
            masks: Tensor::from_vec(vec![n_seg_classes, image_size, image_size], masks)
                .expect("mask shape"),
        });
    }

    for (id, _) in qa_by_image {
        warnings.push(format!("qa.jsonl references unknown or skipped image {id}"));
    }

    let dataset = Dataset {
        samples,
        answer_table,
        class_names: (0..n_seg_classes).map(|k| format!("class_{k}")).collect(),
        image_size,
    };
    let mean_qa = dataset.mean_qa_per_image();
    if !dataset.samples.is_empty() && !(2.0..=5.0).contains(&mean_qa) {
        warnings.push(format!(
            "mean of {mean_qa:.2} question-answer pairs per image is far from the expected ~3.5"
        ));
    }
    Ok(LoadReport { dataset, warnings })
}
