//! Deterministic synthetic multimodal scenes.
//!
//! Each scene is a grass background with one road (horizontal or
//! vertical), up to two pools, and three to five buildings placed on a
//! non-overlapping grid. The road and individual buildings may be
//! "flooded", which shifts their hue toward blue. Masks are exact: a
//! pixel belongs to the class that last drew it. Questions of all four
//! types are generated from the scene itself, so every answer is correct
//! by construction:
//!
//! * simple counting  -> total buildings (3..=5)
//! * complex counting -> flooded buildings (0..=2)
//! * yes/no           -> whether the road is flooded
//! * condition        -> flooded / non-flooded / "flooded,non-flooded"
//!   from the road and building flood states combined
//!
//! One of the four is dropped with probability 1/2, matching the ~3.5
//! QA pairs per image of the real annotations.

use crate::metrics::QuestionType;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{AnswerTable, Dataset, QaItem, Sample};

/// Segmentation class names; the channel index equals the position here
/// and equals the integer code in written mask files.
pub const SEG_CLASS_NAMES: [&str; 6] = [
    "grass",
    "building-flooded",
    "building-non-flooded",
    "road-flooded",
    "road-non-flooded",
    "pool",
];

const GRASS: u8 = 0;
const BUILDING_FLOODED: u8 = 1;
const BUILDING_NON_FLOODED: u8 = 2;
const ROAD_FLOODED: u8 = 3;
const ROAD_NON_FLOODED: u8 = 4;
const POOL: u8 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_images: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_images: 256, image_size: 32, seed: 0 }
    }
}

struct Scene {
    owner: Vec<u8>,
    rgb: Vec<[u8; 3]>,
    size: usize,
    n_buildings: usize,
    n_flooded_buildings: usize,
    road_flooded: bool,
}

fn jitter(rng: &mut Rng, base: [u8; 3], amount: i32) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (o, b) in out.iter_mut().zip(base.iter()) {
        let delta = rng.below((2 * amount + 1) as usize) as i32 - amount;
        *o = (*b as i32 + delta).clamp(0, 255) as u8;
    }
    out
}

impl Scene {
    fn paint_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, class: u8, color: [u8; 3]) {
        for y in y0..(y0 + h).min(self.size) {
            for x in x0..(x0 + w).min(self.size) {
                let p = y * self.size + x;
                self.owner[p] = class;
                self.rgb[p] = color;
            }
        }
    }

    fn paint_disc(&mut self, cx: f64, cy: f64, r: f64, class: u8, color: [u8; 3]) {
        let s = self.size;
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    let p = y * s + x;
                    self.owner[p] = class;
                    self.rgb[p] = color;
                }
            }
        }
    }
}

fn build_scene(rng: &mut Rng, size: usize) -> Scene {
    let grass = jitter(rng, [58, 138, 62], 6);
    let mut scene = Scene {
        owner: vec![GRASS; size * size],
        rgb: vec![grass; size * size],
        size,
        n_buildings: 0,
        n_flooded_buildings: 0,
        road_flooded: false,
    };

    // road: one band across the full image
    let road_flooded = rng.chance(0.5);
    let road_class = if road_flooded { ROAD_FLOODED } else { ROAD_NON_FLOODED };
    let road_color = if road_flooded {
        jitter(rng, [66, 92, 166], 5)
    } else {
        jitter(rng, [128, 126, 124], 5)
    };
    let band_width = (size / 8).max(3);
    let band_pos = rng.range_inclusive(size / 4, 3 * size / 4 - band_width);
    if rng.chance(0.5) {
        scene.paint_rect(0, band_pos, size, band_width, road_class, road_color);
    } else {
        scene.paint_rect(band_pos, 0, band_width, size, road_class, road_color);
    }
    scene.road_flooded = road_flooded;

    // pools: discs, drawn before buildings so buildings stay whole
    for _ in 0..rng.below(3) {
        let r = size as f64 / 10.0;
        let cx = rng.uniform(r + 1.0, size as f64 - r - 1.0);
        let cy = rng.uniform(r + 1.0, size as f64 - r - 1.0);
        scene.paint_disc(cx, cy, r, POOL, jitter(rng, [72, 180, 208], 5));
    }

    // buildings: grid placement keeps them disjoint and the count
    // recoverable from mask area
    let n_buildings = rng.range_inclusive(3, 5);
    let n_flooded = rng.below(3).min(n_buildings);
    let cell = size / 4;
    let side = (size / 5).max(3);
    let mut cells: Vec<usize> = (0..16).collect();
    rng.shuffle(&mut cells);
    for (b, &cell_idx) in cells.iter().take(n_buildings).enumerate() {
        let (cy, cx) = (cell_idx / 4, cell_idx % 4);
        let slack = cell.saturating_sub(side);
        let x0 = cx * cell + if slack > 0 { rng.below(slack + 1) } else { 0 };
        let y0 = cy * cell + if slack > 0 { rng.below(slack + 1) } else { 0 };
        let flooded = b < n_flooded;
        let (class, color) = if flooded {
            (BUILDING_FLOODED, jitter(rng, [96, 72, 158], 6))
        } else {
            (BUILDING_NON_FLOODED, jitter(rng, [172, 96, 58], 8))
        };
        scene.paint_rect(x0, y0, side, side, class, color);
    }
    scene.n_buildings = n_buildings;
    scene.n_flooded_buildings = n_flooded;
    scene
}

fn condition_answer(scene: &Scene) -> &'static str {
    let building_flood = scene.n_flooded_buildings > 0;
    match (scene.road_flooded, building_flood) {
        (true, true) => "flooded",
        (false, false) => "non-flooded",
        _ => "flooded,non-flooded",
    }
}

fn questions_for(rng: &mut Rng, scene: &Scene) -> Vec<(QuestionType, String, String)> {
    const SIMPLE: [&str; 2] =
        ["how many buildings are in this image", "how many buildings can be seen"];
    const COMPLEX: [&str; 2] =
        ["how many buildings are flooded in this image", "how many flooded buildings are there"];
    const YES_NO: [&str; 2] = ["is the road flooded", "is there a flooded road"];
    const CONDITION: [&str; 2] =
        ["what is the overall condition of this image", "what is the condition of the scene"];

    let mut qa = vec![
        (
            QuestionType::SimpleCounting,
            SIMPLE[rng.below(2)].to_string(),
            scene.n_buildings.to_string(),
        ),
        (
            QuestionType::ComplexCounting,
            COMPLEX[rng.below(2)].to_string(),
            scene.n_flooded_buildings.to_string(),
        ),
        (
            QuestionType::YesNo,
            YES_NO[rng.below(2)].to_string(),
            if scene.road_flooded { "yes" } else { "no" }.to_string(),
        ),
        (
            QuestionType::ConditionRecognition,
            CONDITION[rng.below(2)].to_string(),
            condition_answer(scene).to_string(),
        ),
    ];
    if rng.chance(0.5) {
        qa.remove(rng.below(4));
    }
    qa
}

/// Generate a deterministic dataset: same config, same bytes.
pub fn generate_synthetic<S: Scalar>(config: &SynthConfig) -> Dataset<S> {
    let size = config.image_size;
    let base = Rng::new(config.seed).derive(0x5ce9e5);
    let mut raw: Vec<(String, Scene, Vec<(QuestionType, String, String)>)> = Vec::new();
    for i in 0..config.n_images {
        let mut rng = base.derive(i as u64 + 1);
        let scene = build_scene(&mut rng, size);
        let qa = questions_for(&mut rng, &scene);
        raw.push((format!("{i:05}"), scene, qa));
    }

    let answer_table =
        AnswerTable::build(raw.iter().flat_map(|(_, _, qa)| qa.iter().map(|(_, _, a)| a.as_str())));

    let k = SEG_CLASS_NAMES.len();
    let plane = size * size;
    let samples = raw
        .into_iter()
        .map(|(id, scene, qa)| {
            let mut image = vec![S::zero(); 3 * plane];
            for (p, px) in scene.rgb.iter().enumerate() {
                for c in 0..3 {
                    // divide, don't multiply by a reciprocal: the loader
                    // divides too, and the round trip must be bit-exact
                    image[c * plane + p] = S::from_f64(px[c] as f64 / 255.0);
                }
            }
            let mut masks = vec![S::zero(); k * plane];
            for (p, &owner) in scene.owner.iter().enumerate() {
                masks[owner as usize * plane + p] = S::one();
            }
            let qa = qa
                .into_iter()
                .map(|(question_type, question, answer)| QaItem {
                    answer_class: answer_table.class_of(&answer).expect("answer in table"),
                    question,
                    question_type,
                    answer,
                })
                .collect();
            Sample {
                id,
                image: Tensor::from_vec(vec![3, size, size], image).expect("image shape"),
                masks: Tensor::from_vec(vec![k, size, size], masks).expect("mask shape"),
                qa,
            }
        })
        .collect();

    Dataset {
        samples,
        answer_table,
        class_names: SEG_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        image_size: size,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset<f64> {
        generate_synthetic(&SynthConfig { n_images: 24, image_size: 32, seed: 7 })
    }

    #[test]
    fn generation_is_deterministic() {
        let a = small();
        let b = small();
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x, y);
        }
        assert_eq!(a.answer_table, b.answer_table);
    }

    #[test]
    fn masks_are_binary_disjoint_and_mirror_drawn_pixels() {
        let d = small();
        d.check_masks_disjoint().unwrap();
        for s in &d.samples {
            assert!(s.masks.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn answers_are_consistent_with_one_scene() {
        let d = small();
        for s in &d.samples {
            assert!(!s.qa.is_empty() && s.qa.len() >= 3 && s.qa.len() <= 4);
            let find = |t: QuestionType| s.qa.iter().find(|q| q.question_type == t);
            let simple = find(QuestionType::SimpleCounting).map(|q| q.answer.parse::<usize>().unwrap());
            let complex =
                find(QuestionType::ComplexCounting).map(|q| q.answer.parse::<usize>().unwrap());
            if let Some(n) = simple {
                assert!((3..=5).contains(&n));
            }
            if let Some(f) = complex {
                assert!(f <= 2);
            }
            if let (Some(n), Some(f)) = (simple, complex) {
                assert!(f <= n);
            }
            if let (Some(yes_no), Some(cond)) =
                (find(QuestionType::YesNo), find(QuestionType::ConditionRecognition))
            {
                let road = yes_no.answer == "yes";
                match cond.answer.as_str() {
                    "flooded" => assert!(road),
                    "non-flooded" => assert!(!road),
                    "flooded,non-flooded" => {}
                    other => panic!("unexpected condition answer {other}"),
                }
            }
        }
    }

    #[test]
    fn flooded_building_answer_matches_flooded_mask_presence() {
        let d = small();
        let plane = 32 * 32;
        for s in &d.samples {
            if let Some(q) =
                s.qa.iter().find(|q| q.question_type == QuestionType::ComplexCounting)
            {
                let flooded_area: f64 = s.masks.data()
                    [BUILDING_FLOODED as usize * plane..(BUILDING_FLOODED as usize + 1) * plane]
                    .iter()
                    .sum();
                let n: usize = q.answer.parse().unwrap();
                if n == 0 {
                    assert_eq!(flooded_area, 0.0, "sample {}", s.id);
                } else {
                    assert!(flooded_area > 0.0, "sample {}", s.id);
                }
            }
        }
    }

    #[test]
    fn mean_qa_rate_is_near_three_and_a_half() {
        let d = generate_synthetic::<f64>(&SynthConfig { n_images: 400, image_size: 16, seed: 3 });
        let mean = d.mean_qa_per_image();
        assert!((3.2..=3.8).contains(&mean), "mean {mean}");
    }

    #[test]
    fn answer_table_covers_expected_strings() {
        let d = generate_synthetic::<f64>(&SynthConfig { n_images: 200, image_size: 16, seed: 1 });
        for expected in ["3", "4", "5", "0", "1", "2", "yes", "no", "non-flooded"] {
            assert!(
                d.answer_table.class_of(expected).is_ok(),
                "{expected} missing from table {:?}",
                d.answer_table.answers()
            );
        }
    }
}
