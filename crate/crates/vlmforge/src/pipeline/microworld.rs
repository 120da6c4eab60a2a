//! A closed synthetic world of colored shapes on a dark canvas.
//!
//! It stands in for a web-scale image corpus plus a detector: every scene is
//! fully known, so dense captions, QA pairs, and the answers to generated
//! questions all have free, exact oracles. Scenes hold 1–3 shapes with
//! pairwise-distinct kinds *and* colors, so every templated question has a
//! unique answer that is derivable from the image alone.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{domain, stream_rng};
use crate::vocab::{BoundingBox, QuestionType};

use super::records::{ImageRecord, SCHEMA_VERSION};

/// Shape inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn from_name(s: &str) -> Option<ShapeKind> {
        ShapeKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Color inventory (names are single lowercase words; values are saturated and
/// far apart so a small patch embedding can tell them apart).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeColor {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

impl ShapeColor {
    pub const ALL: [ShapeColor; 5] = [
        ShapeColor::Red,
        ShapeColor::Green,
        ShapeColor::Blue,
        ShapeColor::Yellow,
        ShapeColor::Purple,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeColor::Red => "red",
            ShapeColor::Green => "green",
            ShapeColor::Blue => "blue",
            ShapeColor::Yellow => "yellow",
            ShapeColor::Purple => "purple",
        }
    }

    pub fn from_name(s: &str) -> Option<ShapeColor> {
        ShapeColor::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ShapeColor::Red => [220, 40, 40],
            ShapeColor::Green => [40, 200, 70],
            ShapeColor::Blue => [50, 90, 230],
            ShapeColor::Yellow => [235, 220, 60],
            ShapeColor::Purple => [170, 60, 210],
        }
    }
}

/// One placed shape with its tight (pixel-exact) bounding box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneShape {
    pub kind: ShapeKind,
    pub color: ShapeColor,
    pub bbox: BoundingBox,
}

/// Ground truth for one image: everything needed to re-derive captions, QA,
/// and to grade generated questions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub schema_version: u32,
    pub id: u64,
    pub image_size: u32,
    pub shapes: Vec<SceneShape>,
}

/// World-generation knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MicroWorldSpec {
    /// Canvas edge in pixels (square canvas).
    pub image_size: u32,
    /// Upper bound on shapes per scene (1..=3; capped by the inventories).
    pub max_shapes: usize,
    /// Shape half-extent range in pixels.
    pub min_half: u32,
    pub max_half: u32,
}

impl Default for MicroWorldSpec {
    fn default() -> MicroWorldSpec {
        MicroWorldSpec { image_size: 64, max_shapes: 3, min_half: 6, max_half: 12 }
    }
}

impl MicroWorldSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_shapes == 0 || self.max_shapes > ShapeKind::ALL.len() {
            return Err(format!(
                "max_shapes must be in 1..={} (kinds are distinct per scene)",
                ShapeKind::ALL.len()
            ));
        }
        if self.min_half < 2 || self.min_half > self.max_half {
            return Err("need 2 <= min_half <= max_half".into());
        }
        if self.image_size < 4 * self.max_half {
            return Err("canvas too small for the largest shape".into());
        }
        Ok(())
    }
}

const BACKGROUND: [u8; 3] = [20, 20, 24];

fn put(px: &mut [u8], size: u32, x: u32, y: u32, rgb: [u8; 3]) {
    let hw = (size * size) as usize;
    let i = (y * size + x) as usize;
    px[i] = rgb[0];
    px[hw + i] = rgb[1];
    px[2 * hw + i] = rgb[2];
}

/// Paints one shape and returns the tight bounding box of the painted pixels.
fn paint(px: &mut [u8], size: u32, kind: ShapeKind, color: ShapeColor, cx: u32, cy: u32, half: u32) -> BoundingBox {
    let rgb = color.rgb();
    let (mut x1, mut y1, mut x2, mut y2) = (u32::MAX, u32::MAX, 0u32, 0u32);
    let lo_x = cx - half;
    let hi_x = cx + half;
    let lo_y = cy - half;
    let hi_y = cy + half;
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let inside = match kind {
                ShapeKind::Square => true,
                ShapeKind::Circle => {
                    let dx = x as i64 - cx as i64;
                    let dy = y as i64 - cy as i64;
                    dx * dx + dy * dy <= (half as i64) * (half as i64)
                }
                ShapeKind::Triangle => {
                    // upward isoceles: apex at (cx, lo_y), base along hi_y
                    let down = (y - lo_y) as i64; // 0..=2*half
                    let reach = down * half as i64 / (2 * half as i64);
                    (x as i64 - cx as i64).abs() <= reach
                }
            };
            if inside {
                put(px, size, x, y, rgb);
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x);
                y2 = y2.max(y);
            }
        }
    }
    BoundingBox::new(x1, y1, x2, y2).expect("painted region is non-empty")
}

fn aabbs_clear(a: (u32, u32, u32, u32), b: (u32, u32, u32, u32), gap: u32) -> bool {
    a.2 + gap < b.0 || b.2 + gap < a.0 || a.3 + gap < b.1 || b.3 + gap < a.1
}

/// Renders one scene deterministically from its stream RNG.
fn synthesize_one(spec: &MicroWorldSpec, id: u64, rng: &mut impl Rng) -> (ImageRecord, SceneRecord) {
    let size = spec.image_size;
    let mut px = vec![0u8; 3 * (size * size) as usize];
    let hw = (size * size) as usize;
    for i in 0..hw {
        px[i] = BACKGROUND[0];
        px[hw + i] = BACKGROUND[1];
        px[2 * hw + i] = BACKGROUND[2];
    }

    let n = rng.gen_range(1..=spec.max_shapes);
    let mut kinds = ShapeKind::ALL.to_vec();
    kinds.shuffle(rng);
    kinds.truncate(n);
    let mut colors = ShapeColor::ALL.to_vec();
    colors.shuffle(rng);
    colors.truncate(n);

    // place with rejection sampling; shapes keep a 2px clear band between
    // their extent squares so painted regions never touch
    let mut placed: Vec<(u32, u32, u32, u32)> = Vec::new();
    let mut shapes = Vec::new();
    for (kind, color) in kinds.into_iter().zip(colors) {
        let mut ok = None;
        for _ in 0..64 {
            let half = rng.gen_range(spec.min_half..=spec.max_half);
            let cx = rng.gen_range(half..size - half);
            let cy = rng.gen_range(half..size - half);
            let aabb = (cx - half, cy - half, cx + half, cy + half);
            if placed.iter().all(|p| aabbs_clear(*p, aabb, 2)) {
                ok = Some((cx, cy, half, aabb));
                break;
            }
        }
        // a full canvas simply yields a scene with fewer shapes
        if let Some((cx, cy, half, aabb)) = ok {
            placed.push(aabb);
            let bbox = paint(&mut px, size, kind, color, cx, cy, half);
            shapes.push(SceneShape { kind, color, bbox });
        }
    }

    let scene = SceneRecord { schema_version: SCHEMA_VERSION, id, image_size: size, shapes };
    let image = ImageRecord::new(id, size, &px, scene.shapes.iter().map(|s| s.bbox).collect(), image_caption(&scene));
    (image, scene)
}

/// Renders `n_images` scenes. Per-image RNG streams are keyed by
/// `(microworld domain, seed, id)`, so the dataset bytes depend only on
/// `(spec, n_images, seed)`.
pub fn synthesize_microworld(
    spec: &MicroWorldSpec,
    n_images: u64,
    seed: u64,
) -> Result<Vec<(ImageRecord, SceneRecord)>, String> {
    spec.validate()?;
    if n_images == 0 {
        return Err("n_images must be >= 1".into());
    }
    Ok((0..n_images)
        .map(|id| {
            let mut rng = stream_rng(&[domain::MICROWORLD, seed, id]);
            synthesize_one(spec, id, &mut rng)
        })
        .collect())
}

/// Region caption oracle: "a red square".
pub fn oracle_caption(shape: &SceneShape) -> String {
    format!("a {} {}", shape.color.name(), shape.kind.name())
}

/// Image-level caption oracle (the alt-text stand-in): shape captions joined
/// with "and", in placement order.
pub fn image_caption(scene: &SceneRecord) -> String {
    scene
        .shapes
        .iter()
        .map(oracle_caption)
        .collect::<Vec<_>>()
        .join(" and ")
}

pub fn count_word(n: usize) -> &'static str {
    match n {
        0 => "zero",
        1 => "one",
        2 => "two",
        3 => "three",
        _ => "many",
    }
}

/// Quadrant of a box center: "top left" .. "bottom right". The center is
/// `(x1+x2, y1+y2)` in doubled coordinates against the doubled midline.
pub fn quadrant(bbox: &BoundingBox, image_size: u32) -> String {
    let vert = if bbox.y1 + bbox.y2 < image_size { "top" } else { "bottom" };
    let horiz = if bbox.x1 + bbox.x2 < image_size { "left" } else { "right" };
    format!("{vert} {horiz}")
}

/// One templated ground-truth QA pair, with the region and caption that form
/// its generation-prompt context (shape questions carry the shape's box and
/// caption; scene-level questions carry the full canvas and image caption).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleQa {
    pub qtype: QuestionType,
    pub question: String,
    pub answer: String,
    pub region: BoundingBox,
    pub caption: String,
}

/// The question types the world has templates (and a grader) for.
pub const TEMPLATED_QTYPES: [QuestionType; 5] = [
    QuestionType::What,
    QuestionType::How,
    QuestionType::Where,
    QuestionType::Which,
    QuestionType::Binary,
];

/// All templated QA pairs for a scene. Every answer is a deterministic
/// function of the scene; binary questions cover absent kinds too, so both
/// "yes" and "no" occur in training data.
pub fn oracle_qas(scene: &SceneRecord) -> Vec<OracleQa> {
    let full = BoundingBox::new(0, 0, scene.image_size - 1, scene.image_size - 1)
        .expect("canvas box is valid");
    let scene_caption = image_caption(scene);
    let mut out = Vec::new();
    for s in &scene.shapes {
        let caption = oracle_caption(s);
        out.push(OracleQa {
            qtype: QuestionType::What,
            question: format!("what color is the {}", s.kind.name()),
            answer: s.color.name().to_string(),
            region: s.bbox,
            caption: caption.clone(),
        });
        out.push(OracleQa {
            qtype: QuestionType::Where,
            question: format!("where is the {}", s.kind.name()),
            answer: quadrant(&s.bbox, scene.image_size),
            region: s.bbox,
            caption: caption.clone(),
        });
        out.push(OracleQa {
            qtype: QuestionType::Which,
            question: format!("which shape is {}", s.color.name()),
            answer: s.kind.name().to_string(),
            region: s.bbox,
            caption,
        });
    }
    out.push(OracleQa {
        qtype: QuestionType::How,
        question: "how many shapes are there".to_string(),
        answer: count_word(scene.shapes.len()).to_string(),
        region: full,
        caption: scene_caption.clone(),
    });
    for kind in ShapeKind::ALL {
        let present = scene.shapes.iter().any(|s| s.kind == kind);
        out.push(OracleQa {
            qtype: QuestionType::Binary,
            question: format!("is there a {}", kind.name()),
            answer: (if present { "yes" } else { "no" }).to_string(),
            region: scene
                .shapes
                .iter()
                .find(|s| s.kind == kind)
                .map(|s| s.bbox)
                .unwrap_or(full),
            caption: if present {
                oracle_caption(scene.shapes.iter().find(|s| s.kind == kind).unwrap())
            } else {
                scene_caption.clone()
            },
        });
    }
    out
}

/// Grades a free-form question against the scene: `Some(answer)` when the
/// question matches a template and has a unique answer, `None` when it is
/// off-template or refers to something absent (such questions cannot be
/// verified and count as incorrect in oracle evaluation).
pub fn oracle_answer(scene: &SceneRecord, question: &str) -> Option<String> {
    let words: Vec<String> =
        question.to_lowercase().split_whitespace().map(|w| w.to_string()).collect();
    let w: Vec<&str> = words.iter().map(|s| s.as_str()).collect();
    let find_kind = |name: &str| -> Option<&SceneShape> {
        let kind = ShapeKind::from_name(name)?;
        scene.shapes.iter().find(|s| s.kind == kind)
    };
    match w.as_slice() {
        ["what", "color", "is", "the", kind] => find_kind(kind).map(|s| s.color.name().to_string()),
        ["how", "many", "shapes", "are", "there"] => {
            Some(count_word(scene.shapes.len()).to_string())
        }
        ["where", "is", "the", kind] => {
            find_kind(kind).map(|s| quadrant(&s.bbox, scene.image_size))
        }
        ["which", "shape", "is", color] => {
            let color = ShapeColor::from_name(color)?;
            scene
                .shapes
                .iter()
                .find(|s| s.color == color)
                .map(|s| s.kind.name().to_string())
        }
        ["is", "there", "a", kind] => {
            let kind = ShapeKind::from_name(kind)?;
            Some(
                (if scene.shapes.iter().any(|s| s.kind == kind) { "yes" } else { "no" })
                    .to_string(),
            )
        }
        _ => None,
    }
}

/// Every word the oracle templates can emit: the corpus for vocabulary
/// building. Covers captions, questions, and answers.
pub fn oracle_corpus() -> Vec<String> {
    let mut lines = vec![
        "a and".to_string(),
        "what color is the".to_string(),
        "how many shapes are there".to_string(),
        "where is the".to_string(),
        "which shape is".to_string(),
        "is there a".to_string(),
        "yes no".to_string(),
        "top bottom left right".to_string(),
        "zero one two three many".to_string(),
    ];
    lines.push(ShapeKind::ALL.map(|k| k.name()).join(" "));
    lines.push(ShapeColor::ALL.map(|c| c.name()).join(" "));
    lines
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> MicroWorldSpec {
        MicroWorldSpec::default()
    }

    #[test]
    fn fixed_seed_reproduces_identical_bytes() {
        let a = synthesize_microworld(&spec(), 6, 9).unwrap();
        let b = synthesize_microworld(&spec(), 6, 9).unwrap();
        for ((ia, sa), (ib, sb)) in a.iter().zip(&b) {
            assert_eq!(serde_json::to_string(ia).unwrap(), serde_json::to_string(ib).unwrap());
            assert_eq!(serde_json::to_string(sa).unwrap(), serde_json::to_string(sb).unwrap());
        }
        let c = synthesize_microworld(&spec(), 6, 10).unwrap();
        assert_ne!(
            serde_json::to_string(&a[0].0).unwrap(),
            serde_json::to_string(&c[0].0).unwrap()
        );
    }

    #[test]
    fn boxes_are_pixel_tight() {
        for (image, scene) in synthesize_microworld(&spec(), 12, 3).unwrap() {
            let px = image.pixels().unwrap();
            let size = scene.image_size;
            let hw = (size * size) as usize;
            for shape in &scene.shapes {
                let rgb = shape.color.rgb();
                let (mut x1, mut y1, mut x2, mut y2) = (u32::MAX, u32::MAX, 0u32, 0u32);
                for y in 0..size {
                    for x in 0..size {
                        let i = (y * size + x) as usize;
                        if [px[i], px[hw + i], px[2 * hw + i]] == rgb {
                            x1 = x1.min(x);
                            y1 = y1.min(y);
                            x2 = x2.max(x);
                            y2 = y2.max(y);
                        }
                    }
                }
                // colors are unique per scene, so the scan is exactly this
                // shape's pixels, and the stored box must equal the scan
                assert_eq!((x1, y1, x2, y2), (shape.bbox.x1, shape.bbox.y1, shape.bbox.x2, shape.bbox.y2));
            }
        }
    }

    #[test]
    fn shapes_have_distinct_kinds_and_colors() {
        for (_, scene) in synthesize_microworld(&spec(), 30, 4).unwrap() {
            assert!(!scene.shapes.is_empty() && scene.shapes.len() <= 3);
            for i in 0..scene.shapes.len() {
                for j in i + 1..scene.shapes.len() {
                    assert_ne!(scene.shapes[i].kind, scene.shapes[j].kind);
                    assert_ne!(scene.shapes[i].color, scene.shapes[j].color);
                }
            }
        }
    }

    #[test]
    fn oracle_answers_are_self_consistent() {
        for (_, scene) in synthesize_microworld(&spec(), 20, 5).unwrap() {
            for qa in oracle_qas(&scene) {
                let graded = oracle_answer(&scene, &qa.question);
                assert_eq!(graded.as_deref(), Some(qa.answer.as_str()), "q = {}", qa.question);
            }
        }
    }

    #[test]
    fn grader_rejects_off_template_and_absent_referents() {
        let (_, scene) = synthesize_microworld(&spec(), 1, 6).unwrap().pop().unwrap();
        assert_eq!(oracle_answer(&scene, "what is the meaning of life"), None);
        assert_eq!(oracle_answer(&scene, ""), None);
        // a kind guaranteed absent only in single-shape scenes; build one
        let one = SceneRecord {
            schema_version: SCHEMA_VERSION,
            id: 0,
            image_size: 64,
            shapes: vec![SceneShape {
                kind: ShapeKind::Square,
                color: ShapeColor::Red,
                bbox: BoundingBox::new(4, 4, 12, 12).unwrap(),
            }],
        };
        assert_eq!(oracle_answer(&one, "what color is the circle"), None);
        assert_eq!(oracle_answer(&one, "is there a circle").as_deref(), Some("no"));
        assert_eq!(oracle_answer(&one, "is there a square").as_deref(), Some("yes"));
        assert_eq!(oracle_answer(&one, "where is the square").as_deref(), Some("top left"));
    }

    #[test]
    fn binary_training_answers_cover_yes_and_no() {
        let (_, scene) = synthesize_microworld(&spec(), 1, 8).unwrap().pop().unwrap();
        let qas = oracle_qas(&scene);
        let binaries: Vec<_> = qas.iter().filter(|q| q.qtype == QuestionType::Binary).collect();
        assert_eq!(binaries.len(), 3);
        assert!(scene.shapes.len() == 3 || binaries.iter().any(|q| q.answer == "no"));
        assert!(binaries.iter().any(|q| q.answer == "yes"));
    }

    #[test]
    fn quadrants_cover_the_canvas() {
        assert_eq!(quadrant(&BoundingBox::new(0, 0, 10, 10).unwrap(), 64), "top left");
        assert_eq!(quadrant(&BoundingBox::new(50, 2, 60, 12).unwrap(), 64), "top right");
        assert_eq!(quadrant(&BoundingBox::new(2, 50, 12, 60).unwrap(), 64), "bottom left");
        assert_eq!(quadrant(&BoundingBox::new(50, 50, 60, 60).unwrap(), 64), "bottom right");
    }
}
