//! Data ingestion: an in-memory multimodal dataset type, a deterministic
//! synthetic scene generator, a loader/writer for the on-disk directory
//! layout, and seeded image-level splitting.
//!
//! Directory layout (the synthetic generator writes the identical layout
//! the loader consumes):
//!
//! ```text
//! <root>/
//!   images/<id>.png    RGB
//!   masks/<id>.png     single channel, integer-coded class per pixel
//!   qa.jsonl           one JSON object per line: image_id, question,
//!                      answer, question_type
//!   answers.txt        one answer string per line; line number = class id
//! ```

mod floodnet;
mod synthetic;

pub use floodnet::{
    load_floodnet_dir, resize_gray_nearest, resize_rgb_area, write_floodnet_dir, LoadReport,
};
pub use synthetic::{generate_synthetic, SynthConfig, SEG_CLASS_NAMES};

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::metrics::QuestionType;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png error on {path}: {detail}")]
    Png { path: PathBuf, detail: String },
    #[error("mask {path} holds value {value}, but only {n_classes} classes are configured")]
    BadMaskValue { path: PathBuf, value: u8, n_classes: usize },
    #[error("unknown answer {answer:?}; the answer table holds: {table:?}")]
    UnknownAnswer { answer: String, table: Vec<String> },
    #[error("qa.jsonl line {line}: {detail}")]
    BadQaLine { line: usize, detail: String },
    #[error("bad answer table: {0}")]
    BadAnswerTable(String),
    #[error("sample {sample} pixel {pixel} belongs to {count} mask channels, expected exactly 1")]
    OverlappingMasks { sample: String, pixel: usize, count: usize },
    #[error("split needs at least 3 images, got {0}")]
    TooFewImages(usize),
    #[error("split fractions {0:?} must be positive and sum to 1")]
    BadFractions((f64, f64, f64)),
    #[error("{0}")]
    Invalid(String),
}

/// Frozen answer-string to class-id mapping. Built once at dataset-build
/// time and persisted as `answers.txt`; unseen answers error out rather
/// than silently remapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerTable {
    answers: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl AnswerTable {
    /// Collect distinct answers and freeze them in sorted order.
    pub fn build<'a>(answers: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: Vec<String> = answers
            .into_iter()
            .map(str::to_string)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::from_lines(distinct).expect("distinct answers cannot collide")
    }

    /// Rebuild from persisted lines; line order defines class ids.
    pub fn from_lines(lines: Vec<String>) -> Result<Self, DataError> {
        let mut index = BTreeMap::new();
        for (i, a) in lines.iter().enumerate() {
            if a.is_empty() {
                return Err(DataError::BadAnswerTable(format!("line {} is empty", i + 1)));
            }
            if index.insert(a.clone(), i).is_some() {
                return Err(DataError::BadAnswerTable(format!("duplicate answer {a:?}")));
            }
        }
        Ok(AnswerTable { answers: lines, index })
    }

    pub fn class_of(&self, answer: &str) -> Result<usize, DataError> {
        self.index.get(answer).copied().ok_or_else(|| DataError::UnknownAnswer {
            answer: answer.to_string(),
            table: self.answers.clone(),
        })
    }

    pub fn name_of(&self, class: usize) -> Option<&str> {
        self.answers.get(class).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn to_text(&self) -> String {
        let mut s = self.answers.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        Self::from_lines(text.lines().map(str::to_string).collect())
    }
}

/// One question-answer annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct QaItem {
    pub question: String,
    pub question_type: QuestionType,
    pub answer: String,
    pub answer_class: usize,
}

/// One image with its masks and QA annotations. Image values live in
/// [0, 1]; masks are binary channels, one per segmentation class, disjoint
/// per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    pub id: String,
    pub image: Tensor<S>,
    pub masks: Tensor<S>,
    pub qa: Vec<QaItem>,
}

#[derive(Clone, Debug)]
pub struct Dataset<S> {
    pub samples: Vec<Sample<S>>,
    pub answer_table: AnswerTable,
    pub class_names: Vec<String>,
    pub image_size: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn n_seg_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_answer_classes(&self) -> usize {
        self.answer_table.len()
    }

    pub fn total_qa(&self) -> usize {
        self.samples.iter().map(|s| s.qa.len()).sum()
    }

    pub fn mean_qa_per_image(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.total_qa() as f64 / self.samples.len() as f64
        }
    }

    /// Every pixel must belong to exactly one mask channel; verified by
    /// the loader and the generator tests.
    pub fn check_masks_disjoint(&self) -> Result<(), DataError> {
        let k = self.n_seg_classes();
        for sample in &self.samples {
            let plane = self.image_size * self.image_size;
            let data = sample.masks.data();
            for p in 0..plane {
                let count = (0..k).filter(|&ki| data[ki * plane + p] == S::one()).count();
                if count != 1 {
                    return Err(DataError::OverlappingMasks {
                        sample: sample.id.clone(),
                        pixel: p,
                        count,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Image-level split fractions plus the shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { fractions: (0.70, 0.15, 0.15), seed: 0 }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        SplitSpec { seed, ..Default::default() }
    }
}

/// Seeded image-level split: all QA pairs of an image stay in one part.
pub fn split<S: Scalar>(
    dataset: &Dataset<S>,
    spec: &SplitSpec,
) -> Result<[Dataset<S>; 3], DataError> {
    let (f_train, f_val, f_test) = spec.fractions;
    if !(f_train > 0.0 && f_val > 0.0 && f_test > 0.0)
        || (f_train + f_val + f_test - 1.0).abs() > 1e-9
    {
        return Err(DataError::BadFractions(spec.fractions));
    }
    let n = dataset.samples.len();
    if n < 3 {
        return Err(DataError::TooFewImages(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(spec.seed).derive(0x5b117);
    rng.shuffle(&mut order);

    let n_train = ((n as f64 * f_train).round() as usize).clamp(1, n - 2);
    let n_val = ((n as f64 * f_val).round() as usize).clamp(1, n - n_train - 1);

    let part = |idx: &[usize]| Dataset {
        samples: idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
        answer_table: dataset.answer_table.clone(),
        class_names: dataset.class_names.clone(),
        image_size: dataset.image_size,
    };
    Ok([
        part(&order[..n_train]),
        part(&order[n_train..n_train + n_val]),
        part(&order[n_train + n_val..]),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_table_build_is_sorted_and_stable() {
        let table = AnswerTable::build(["yes", "no", "3", "yes", "flooded"]);
        assert_eq!(table.answers(), &["3", "flooded", "no", "yes"]);
        let reloaded = AnswerTable::from_text(&table.to_text()).unwrap();
        assert_eq!(table, reloaded);
        assert_eq!(reloaded.class_of("flooded").unwrap(), 1);
    }

    #[test]
    fn unknown_answer_error_lists_table() {
        let table = AnswerTable::build(["yes", "no"]);
        let err = table.class_of("maybe").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("maybe") && msg.contains("yes") && msg.contains("no"));
    }

    #[test]
    fn answer_table_rejects_duplicates() {
        assert!(AnswerTable::from_lines(vec!["a".into(), "a".into()]).is_err());
    }

    fn tiny_dataset(n: usize) -> Dataset<f64> {
        let table = AnswerTable::build(["yes", "no"]);
        let samples = (0..n)
            .map(|i| Sample {
                id: format!("{i:05}"),
                image: Tensor::zeros(&[3, 8, 8]),
                masks: {
                    let mut m = Tensor::zeros(&[2, 8, 8]);
                    for p in 0..64 {
                        m.data_mut()[p] = 1.0;
                    }
                    m
                },
                qa: vec![QaItem {
                    question: "is it".to_string(),
                    question_type: QuestionType::YesNo,
                    answer: "yes".to_string(),
                    answer_class: 0,
                }],
            })
            .collect();
        Dataset {
            samples,
            answer_table: table,
            class_names: vec!["a".into(), "b".into()],
            image_size: 8,
        }
    }

    #[test]
    fn split_is_a_partition_with_expected_sizes() {
        let dataset = tiny_dataset(100);
        let spec = SplitSpec::with_seed(9);
        let [train, val, test] = split(&dataset, &spec).unwrap();
        assert_eq!(train.samples.len(), 70);
        assert_eq!(val.samples.len(), 15);
        assert_eq!(test.samples.len(), 15);

        let mut ids: Vec<&str> = train
            .samples
            .iter()
            .chain(&val.samples)
            .chain(&test.samples)
            .map(|s| s.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100, "splits overlap or drop images");
    }

    #[test]
    fn split_is_seed_deterministic() {
        let dataset = tiny_dataset(20);
        let a = split(&dataset, &SplitSpec::with_seed(5)).unwrap();
        let b = split(&dataset, &SplitSpec::with_seed(5)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            let ids_a: Vec<&str> = x.samples.iter().map(|s| s.id.as_str()).collect();
            let ids_b: Vec<&str> = y.samples.iter().map(|s| s.id.as_str()).collect();
            assert_eq!(ids_a, ids_b);
        }
        let c = split(&dataset, &SplitSpec::with_seed(6)).unwrap();
        let ids_a: Vec<&str> = a[0].samples.iter().map(|s| s.id.as_str()).collect();
        let ids_c: Vec<&str> = c[0].samples.iter().map(|s| s.id.as_str()).collect();
        assert_ne!(ids_a, ids_c);
    }

    #[test]
    fn split_rejects_tiny_and_bad_fractions() {
        let dataset = tiny_dataset(2);
        assert!(matches!(split(&dataset, &SplitSpec::default()), Err(DataError::TooFewImages(2))));
        let dataset = tiny_dataset(10);
        let spec = SplitSpec { fractions: (0.5, 0.2, 0.2), seed: 0 };
        assert!(matches!(split(&dataset, &spec), Err(DataError::BadFractions(_))));
    }

    #[test]
    fn disjoint_mask_check() {
        let dataset = tiny_dataset(3);
        dataset.check_masks_disjoint().unwrap();
        let mut broken = dataset.clone();
        broken.samples[0].masks.data_mut()[64] = 1.0; // second channel too
        assert!(matches!(
            broken.check_masks_disjoint(),
            Err(DataError::OverlappingMasks { .. })
        ));
    }
}
