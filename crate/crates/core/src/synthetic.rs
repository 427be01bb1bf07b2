//! Colored-shape scenes with captions and question-answer pairs read off the scene record.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::corpus_text;
use crate::data::{ImageCaptionPair, VqaTriple};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::text::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [230, 210, 40],
        }
    }
}

const ROWS_2: [&str; 2] = ["top", "bottom"];
const COLS_2: [&str; 2] = ["left", "right"];
const ROWS_3: [&str; 3] = ["top", "middle", "bottom"];
const COLS_3: [&str; 3] = ["left", "center", "right"];
const NUMBERS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    /// Positions form a `grid × grid` layout, 2 or 3.
    pub grid: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub caption_pairs: usize,
    pub vqa_train_images: usize,
    pub vqa_test_images: usize,
    pub questions_per_image: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            shapes: Shape::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
            grid: 2,
            min_objects: 1,
            max_objects: 2,
            caption_pairs: 2000,
            vqa_train_images: 125,
            vqa_test_images: 50,
            questions_per_image: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.shapes.is_empty() || self.colors.is_empty() {
            return bad("need at least one shape and one color");
        }
        if !matches!(self.grid, 2 | 3) {
            return bad("grid must be 2 or 3");
        }
        if self.image_size < 8 * self.grid {
            return bad("image_size too small for the grid");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 ≤ min_objects ≤ max_objects");
        }
        if self.max_objects > self.shapes.len() || self.max_objects > self.grid * self.grid || self.max_objects >= NUMBERS.len() {
            return bad("max_objects exceeds the distinct shapes or grid cells available");
        }
        if self.vqa_train_images + self.vqa_test_images > 0 && self.questions_per_image == 0 {
            return bad("questions_per_image must be positive");
        }
        Ok(())
    }

    pub fn row_words(&self) -> &'static [&'static str] {
        if self.grid == 2 {
            &ROWS_2
        } else {
            &ROWS_3
        }
    }

    pub fn col_words(&self) -> &'static [&'static str] {
        if self.grid == 2 {
            &COLS_2
        } else {
            &COLS_3
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
}

/// Ground truth for one image. Objects have distinct shapes and distinct cells and are kept
/// in raster order of their cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub grid: usize,
    pub objects: Vec<SceneObject>,
    /// Seed for rendering jitter and background noise.
    pub render_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Question {
    ColorOf { shape: Shape },
    ShapeAt { row: usize, col: usize },
    WhereIs { shape: Shape },
    IsThere { shape: Shape },
    HowMany,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticQa {
    pub question_id: String,
    pub scene: usize,
    pub question: Question,
    pub text: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub caption_scenes: Vec<Scene>,
    pub captions: Vec<String>,
    pub vqa_scenes: Vec<Scene>,
    pub train: Vec<SyntheticQa>,
    pub test: Vec<SyntheticQa>,
}

fn position(spec: &SyntheticSpec, row: usize, col: usize) -> String {
    format!("{} {}", spec.row_words()[row], spec.col_words()[col])
}

fn sample_scene(spec: &SyntheticSpec, id: String, rng: &mut ChaCha8Rng) -> Scene {
    let n = rng.gen_range(spec.min_objects..=spec.max_objects);
    let shapes: Vec<Shape> = spec.shapes.choose_multiple(rng, n).copied().collect();
    let mut cells: Vec<usize> = (0..spec.grid * spec.grid).collect();
    cells.shuffle(rng);
    let mut objects: Vec<SceneObject> = shapes
        .into_iter()
        .zip(cells)
        .map(|(shape, cell)| SceneObject { shape, color: *spec.colors.choose(rng).expect("validated"), row: cell / spec.grid, col: cell % spec.grid })
        .collect();
    objects.sort_by_key(|o| (o.row, o.col));
    Scene { id, grid: spec.grid, objects, render_seed: rng.gen() }
}

/// "a red circle at the top left and a blue square at the bottom right".
pub fn caption(spec: &SyntheticSpec, scene: &Scene) -> String {
    scene
        .objects
        .iter()
        .map(|o| format!("a {} {} at the {}", o.color.word(), o.shape.word(), position(spec, o.row, o.col)))
        .collect::<Vec<_>>()
        .join(" and ")
}

pub fn question_text(spec: &SyntheticSpec, q: &Question) -> String {
    match *q {
        Question::ColorOf { shape } => format!("what color is the {}", shape.word()),
        Question::ShapeAt { row, col } => format!("what shape is at the {}", position(spec, row, col)),
        Question::WhereIs { shape } => format!("where is the {}", shape.word()),
        Question::IsThere { shape } => format!("is there a {}", shape.word()),
        Question::HowMany => "how many shapes are there".to_string(),
    }
}

/// The answer implied by the scene, or `None` when the question does not apply to it.
pub fn answer(spec: &SyntheticSpec, scene: &Scene, q: &Question) -> Option<String> {
    let find = |shape: Shape| scene.objects.iter().find(|o| o.shape == shape);
    match *q {
        Question::ColorOf { shape } => find(shape).map(|o| o.color.word().to_string()),
        Question::ShapeAt { row, col } => scene.objects.iter().find(|o| (o.row, o.col) == (row, col)).map(|o| o.shape.word().to_string()),
        Question::WhereIs { shape } => find(shape).map(|o| position(spec, o.row, o.col)),
        Question::IsThere { shape } => Some(if find(shape).is_some() { "yes" } else { "no" }.to_string()),
        Question::HowMany => Some(NUMBERS[scene.objects.len()].to_string()),
    }
}

fn candidate_questions(spec: &SyntheticSpec, scene: &Scene) -> Vec<Question> {
    let mut qs = Vec::new();
    for o in &scene.objects {
        qs.push(Question::ColorOf { shape: o.shape });
        qs.push(Question::ShapeAt { row: o.row, col: o.col });
        qs.push(Question::WhereIs { shape: o.shape });
    }
    qs.extend(spec.shapes.iter().map(|&shape| Question::IsThere { shape }));
    qs.push(Question::HowMany);
    qs
}

fn sample_questions(spec: &SyntheticSpec, scene_idx: usize, scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<SyntheticQa> {
    let cands = candidate_questions(spec, scene);
    let k = spec.questions_per_image.min(cands.len());
    cands
        .choose_multiple(rng, k)
        .enumerate()
        .map(|(j, q)| SyntheticQa {
            question_id: format!("{}_q{j}", scene.id),
            scene: scene_idx,
            question: *q,
            text: question_text(spec, q),
            answer: answer(spec, scene, q).expect("candidates apply to their scene"),
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let caption_scenes: Vec<Scene> = (0..spec.caption_pairs).map(|i| sample_scene(spec, format!("cap_{i:05}"), &mut rng)).collect();
    let captions = caption_scenes.iter().map(|s| caption(spec, s)).collect();
    let n_vqa = spec.vqa_train_images + spec.vqa_test_images;
    let vqa_scenes: Vec<Scene> = (0..n_vqa).map(|i| sample_scene(spec, format!("vqa_{i:05}"), &mut rng)).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in vqa_scenes.iter().enumerate() {
        let qs = sample_questions(spec, i, s, &mut rng);
        if i < spec.vqa_train_images {
            train.extend(qs);
        } else {
            test.extend(qs);
        }
    }
    Ok(SyntheticCorpus { spec: spec.clone(), caption_scenes, captions, vqa_scenes, train, test })
}

/// Draw the scene: dark noisy background, one filled shape per object with a little jitter.
pub fn render(spec: &SyntheticSpec, scene: &Scene) -> Image {
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.render_seed);
    let mut rgb: Vec<u8> = (0..size * size * 3).map(|_| rng.gen_range(0..32)).collect();
    let cell = size as f64 / scene.grid as f64;
    for o in &scene.objects {
        let jitter = cell * 0.08;
        let cx = (o.col as f64 + 0.5) * cell + rng.gen_range(-jitter..=jitter);
        let cy = (o.row as f64 + 0.5) * cell + rng.gen_range(-jitter..=jitter);
        let r = cell * rng.gen_range(0.28..0.38);
        let color = o.color.rgb();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = match o.shape {
                    Shape::Circle => dx * dx + dy * dy <= r * r,
                    Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
                    Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
                };
                if inside {
                    rgb[(y * size + x) * 3..][..3].copy_from_slice(&color);
                }
            }
        }
    }
    Image::from_rgb8(size, &rgb).expect("buffer sized to the image")
}

/// Paths of a corpus written by [`write_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPaths {
    pub captions: PathBuf,
    pub vqa_train: PathBuf,
    pub vqa_test: PathBuf,
    pub scenes: PathBuf,
    pub vocab: PathBuf,
}

impl SyntheticPaths {
    pub fn in_dir(out: &Path) -> Self {
        Self {
            captions: out.join("captions.tsv"),
            vqa_train: out.join("vqa_train.tsv"),
            vqa_test: out.join("vqa_test.tsv"),
            scenes: out.join("scenes.jsonl"),
            vocab: out.join("vocab.txt"),
        }
    }
}

#[derive(Serialize)]
struct SceneLine<'a> {
    image: String,
    #[serde(flatten)]
    scene: &'a Scene,
}

fn image_rel(scene: &Scene) -> String {
    format!("images/{}.ppm", scene.id)
}

impl SyntheticCorpus {
    pub fn caption_pairs(&self, root: &Path) -> Vec<ImageCaptionPair> {
        self.caption_scenes.iter().zip(&self.captions).map(|(s, c)| ImageCaptionPair { image: root.join(image_rel(s)), caption: c.clone() }).collect()
    }

    pub fn triples(&self, root: &Path, qas: &[SyntheticQa]) -> Vec<VqaTriple> {
        qas.iter()
            .map(|q| VqaTriple { question_id: q.question_id.clone(), image: root.join(image_rel(&self.vqa_scenes[q.scene])), question: q.text.clone(), answer: q.answer.clone() })
            .collect()
    }

    /// Vocabulary over every caption, question and answer.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let root = Path::new("");
        let caps = self.caption_pairs(root);
        let mut trip = self.triples(root, &self.train);
        trip.extend(self.triples(root, &self.test));
        Vocabulary::build(corpus_text(&caps, &trip), 1)
    }
}

/// Write images, manifests, scene records and the vocabulary under `out`.
pub fn write_synthetic(corpus: &SyntheticCorpus, out: &Path) -> Result<SyntheticPaths> {
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let paths = SyntheticPaths::in_dir(out);
    let spec = &corpus.spec;
    let mut scenes = Vec::new();
    for s in corpus.caption_scenes.iter().chain(&corpus.vqa_scenes) {
        render(spec, s).save_ppm(&out.join(image_rel(s)))?;
        serde_json::to_writer(&mut scenes, &SceneLine { image: image_rel(s), scene: s })?;
        scenes.push(b'\n');
    }
    let write = |path: &Path, body: String| fs::write(path, body).map_err(|e| Error::io(path, e));
    write(&paths.captions, corpus.caption_scenes.iter().zip(&corpus.captions).map(|(s, c)| format!("{}\t{c}\n", image_rel(s))).collect())?;
    let qa_lines = |qas: &[SyntheticQa]| -> String {
        qas.iter().map(|q| format!("{}\t{}\t{}\t{}\n", q.question_id, image_rel(&corpus.vqa_scenes[q.scene]), q.text, q.answer)).collect()
    };
    write(&paths.vqa_train, qa_lines(&corpus.train))?;
    write(&paths.vqa_test, qa_lines(&corpus.test))?;
    let mut f = fs::File::create(&paths.scenes).map_err(|e| Error::io(&paths.scenes, e))?;
    f.write_all(&scenes).map_err(|e| Error::io(&paths.scenes, e))?;
    corpus.vocabulary()?.save(&paths.vocab)?;
    Ok(paths)
}
