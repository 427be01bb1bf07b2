//! Manifests, dataset splits, and in-memory training sets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::AnswerSequence;
use crate::error::{Error, Result};
use crate::image::{load_precomputed_features, BackboneKind, Image, Visual};
use crate::model::ModelConfig;
use crate::text::{tokenize, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ImageCaptionPair {
    /// Image file, or feature file when the backbone is precomputed.
    pub image: PathBuf,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct VqaTriple {
    pub question_id: String,
    pub image: PathBuf,
    pub question: String,
    /// Empty only for question lists read with [`load_questions`].
    pub answer: String,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .collect())
}

fn resolve(manifest: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new("")).join(p)
    }
}

fn check_files<'a>(manifest: &Path, refs: impl Iterator<Item = (usize, &'a Path)>) -> Result<()> {
    let missing: Vec<String> = refs.filter(|(_, p)| !p.is_file()).map(|(line, p)| format!("line {line}: {}", p.display())).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingFiles(format!("{}: {}", manifest.display(), missing.join(", "))))
    }
}

/// `image_path<TAB>caption` per line; relative paths are taken from the manifest's directory.
pub fn load_image_caption(path: &Path) -> Result<Vec<ImageCaptionPair>> {
    let mut out = Vec::new();
    let mut lines = Vec::new();
    for (line, text) in read_lines(path)? {
        let cols: Vec<&str> = text.split('\t').collect();
        let [image, caption] = cols[..] else {
            return Err(Error::Parse { path: path.into(), line, msg: format!("expected 2 tab-separated fields, found {}", cols.len()) });
        };
        if caption.trim().is_empty() {
            return Err(Error::Parse { path: path.into(), line, msg: "empty caption".into() });
        }
        out.push(ImageCaptionPair { image: resolve(path, image), caption: caption.to_string() });
        lines.push(line);
    }
    check_files(path, lines.iter().copied().zip(out.iter().map(|p| p.image.as_path())))?;
    Ok(out)
}

fn load_triples(path: &Path, answer_required: bool) -> Result<Vec<VqaTriple>> {
    let mut out = Vec::new();
    let mut lines = Vec::new();
    for (line, text) in read_lines(path)? {
        let cols: Vec<&str> = text.split('\t').collect();
        let (qid, image, question, answer) = match cols[..] {
            [q, i, t, a] => (q, i, t, a),
            [q, i, t] if !answer_required => (q, i, t, ""),
            _ => {
                let want = if answer_required { "4" } else { "3 or 4" };
                return Err(Error::Parse { path: path.into(), line, msg: format!("expected {want} tab-separated fields, found {}", cols.len()) });
            }
        };
        for (what, v) in [("question id", qid), ("question", question)] {
            if v.trim().is_empty() {
                return Err(Error::Parse { path: path.into(), line, msg: format!("empty {what}") });
            }
        }
        if answer_required && answer.trim().is_empty() {
            return Err(Error::Parse { path: path.into(), line, msg: "empty answer".into() });
        }
        out.push(VqaTriple { question_id: qid.to_string(), image: resolve(path, image), question: question.to_string(), answer: answer.to_string() });
        lines.push(line);
    }
    check_files(path, lines.iter().copied().zip(out.iter().map(|t| t.image.as_path())))?;
    Ok(out)
}

/// `question_id<TAB>image_path<TAB>question<TAB>answer` per line.
pub fn load_vqa_triples(path: &Path) -> Result<Vec<VqaTriple>> {
    load_triples(path, true)
}

/// Like [`load_vqa_triples`] but the answer column may be absent.
pub fn load_questions(path: &Path) -> Result<Vec<VqaTriple>> {
    load_triples(path, false)
}

/// Sort, shuffle with `seed`, then cut. The held-out side gets `⌊n·(1 − fraction)⌋` records, so
/// 70,786 at 0.8 gives 56,629 + 14,157. Sorting first makes the split independent of input
/// order.
pub fn split_dataset<T: Clone + Ord>(records: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!("split fraction {fraction} not in (0, 1)")));
    }
    let n = records.len();
    let held = ((n as f64) * (1.0 - fraction) + 1e-9).floor() as usize;
    if held == 0 || held == n {
        return Err(Error::Invalid(format!("splitting {n} records at {fraction} leaves one side empty")));
    }
    let mut sorted = records.to_vec();
    sorted.sort();
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = sorted.split_off(n - held);
    Ok((sorted, test))
}

/// Read an image or feature file according to the backbone.
pub fn load_visual(path: &Path, cfg: &ModelConfig) -> Result<Visual> {
    match cfg.backbone.kind {
        BackboneKind::TinyConv => Ok(Visual::Pixels(Image::load(path, cfg.backbone.image_size)?)),
        BackboneKind::Precomputed => Ok(Visual::Features(load_precomputed_features(path, &cfg.backbone)?)),
    }
}

/// Load each distinct path once; returns the visuals and each input's index into them.
pub fn load_visuals<'a>(paths: impl Iterator<Item = &'a Path>, cfg: &ModelConfig) -> Result<(Vec<Visual>, Vec<usize>)> {
    let mut index: BTreeMap<PathBuf, usize> = BTreeMap::new();
    let mut visuals = Vec::new();
    let mut refs = Vec::new();
    for p in paths {
        let i = match index.get(p) {
            Some(&i) => i,
            None => {
                visuals.push(load_visual(p, cfg)?);
                index.insert(p.to_path_buf(), visuals.len() - 1);
                visuals.len() - 1
            }
        };
        refs.push(i);
    }
    Ok((visuals, refs))
}

#[derive(Debug, Clone)]
pub struct CaptionItem {
    pub visual: usize,
    pub text: TokenSequence,
}

/// Tokenized captions with their visuals loaded.
#[derive(Debug, Clone)]
pub struct CaptionData {
    pub visuals: Vec<Visual>,
    pub items: Vec<CaptionItem>,
}

impl CaptionData {
    pub fn prepare(records: &[ImageCaptionPair], vocab: &Vocabulary, cfg: &ModelConfig) -> Result<Self> {
        let (visuals, refs) = load_visuals(records.iter().map(|r| r.image.as_path()), cfg)?;
        let items = records.iter().zip(refs).map(|(r, visual)| CaptionItem { visual, text: tokenize(&r.caption, vocab, cfg.text_len) }).collect();
        Ok(Self { visuals, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct VqaItem {
    pub question_id: String,
    pub visual: usize,
    pub question: TokenSequence,
    pub answer: AnswerSequence,
    pub gold: String,
}

/// Tokenized questions and answers with their visuals loaded.
#[derive(Debug, Clone)]
pub struct VqaData {
    pub visuals: Vec<Visual>,
    pub items: Vec<VqaItem>,
}

impl VqaData {
    pub fn prepare(records: &[VqaTriple], vocab: &Vocabulary, cfg: &ModelConfig) -> Result<Self> {
        let (visuals, refs) = load_visuals(records.iter().map(|r| r.image.as_path()), cfg)?;
        let items = records
            .iter()
            .zip(refs)
            .map(|(r, visual)| {
                Ok(VqaItem {
                    question_id: r.question_id.clone(),
                    visual,
                    question: tokenize(&r.question, vocab, cfg.text_len),
                    answer: AnswerSequence::from_text(&r.answer, vocab, cfg.max_answer_len)?,
                    gold: r.answer.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { visuals, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Every caption, question and answer string, for building a vocabulary.
pub fn corpus_text<'a>(captions: &'a [ImageCaptionPair], triples: &'a [VqaTriple]) -> impl Iterator<Item = &'a str> {
    captions.iter().map(|c| c.caption.as_str()).chain(triples.iter().flat_map(|t| [t.question.as_str(), t.answer.as_str()]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) {
        fs::write(dir.join(name), b"x").unwrap();
    }

    #[test]
    fn caption_manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.ppm");
        touch(dir.path(), "b.ppm");
        let m = dir.path().join("c.tsv");
        fs::write(&m, "a.ppm\ta red circle\nb.ppm\ta blue square\n").unwrap();
        let pairs = load_image_caption(&m).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].image, dir.path().join("b.ppm"));
    }

    #[test]
    fn missing_files_are_listed_with_lines() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.ppm");
        let m = dir.path().join("c.tsv");
        fs::write(&m, "a.ppm\tok\nnope.ppm\tx\ngone.ppm\ty\n").unwrap();
        let err = load_image_caption(&m).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("nope.ppm") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn vqa_manifest_shares_images_and_rejects_empty_answers() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.ppm");
        let m = dir.path().join("v.tsv");
        let body: String = (0..4).map(|i| format!("q{i}\ta.ppm\twhat is it\tcircle\n")).collect();
        fs::write(&m, body).unwrap();
        let t = load_vqa_triples(&m).unwrap();
        assert_eq!(t.len(), 4);
        assert!(t.iter().all(|x| x.image == t[0].image));
        fs::write(&m, "q0\ta.ppm\twhat is it\t \n").unwrap();
        assert!(load_vqa_triples(&m).unwrap_err().to_string().contains("empty answer"));
        fs::write(&m, "q0\ta.ppm\twhat is it\n").unwrap();
        assert_eq!(load_questions(&m).unwrap()[0].answer, "");
    }

    #[test]
    fn split_counts() {
        let recs: Vec<u32> = (0..10).collect();
        let (a, b) = split_dataset(&recs, 0.8, 1).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let big: Vec<u32> = (0..70_786).collect();
        let (a, b) = split_dataset(&big, 0.8, 1).unwrap();
        assert_eq!((a.len(), b.len()), (56_629, 14_157));
        assert!(split_dataset(&recs[..1], 0.8, 1).is_err());
        assert!(split_dataset(&recs, 1.0, 1).is_err());
    }

    #[test]
    fn split_ignores_input_order() {
        let recs: Vec<u32> = (0..50).collect();
        let mut rev = recs.clone();
        rev.reverse();
        let (a, b) = split_dataset(&recs, 0.7, 9).unwrap();
        let (c, d) = split_dataset(&rev, 0.7, 9).unwrap();
        assert_eq!((a.clone(), b.clone()), (c, d));
        let mut all: Vec<u32> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, recs);
    }
}
