//! Vocabulary, word-level tokenization, word-vector tables and the text embedder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{truncated_normal, Builder, ParamId, ParamSet, INIT_STD};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const CLS: &str = "[CLS]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const SPECIALS: [&str; 6] = [PAD, UNK, MASK, CLS, BOS, EOS];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const CLS_ID: u32 = 3;
pub const BOS_ID: u32 = 4;
pub const EOS_ID: u32 = 5;
pub const NUM_SPECIAL: u32 = 6;

/// Lowercase, replace ASCII punctuation with spaces, split on whitespace.
///
/// The same rule is used for model inputs and for answer normalization at evaluation time.
pub fn words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from already-ordered regular tokens; specials are prepended.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { id_to_token, token_to_id })
    }

    /// Count words over `corpus`, keep those seen at least `min_count` times, and order them by
    /// descending frequency then lexicographically.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut lines = 0usize;
        for text in corpus {
            lines += 1;
            for w in words(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if lines == 0 {
            return Err(Error::Invalid("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !SPECIALS.contains(&w.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(entries.into_iter().map(|(w, _)| w))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIAL
    }

    /// Join regular tokens with spaces, skipping specials.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| !Self::is_special(i))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Parse { path: path.into(), line: 1, msg: "vocabulary must start with the six special tokens".into() });
        }
        Self::from_tokens(tokens.into_iter().skip(SPECIALS.len()))
    }
}

/// Fixed-length token ids plus a padding mask (`true` = real token).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub pad_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    /// Real positions holding regular (non-special) tokens.
    pub fn maskable_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.pad_mask[i] && !Vocabulary::is_special(self.ids[i])).collect()
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids: Vec<u32> = words(text).iter().take(max_len).map(|w| vocab.id(w).unwrap_or(UNK_ID)).collect();
    let real = ids.len();
    ids.resize(max_len, PAD_ID);
    let pad_mask = (0..max_len).map(|i| i < real).collect();
    TokenSequence { ids, pad_mask }
}

/// Word-vector table loaded from a text file, plus how many vocabulary words it covered.
#[derive(Debug, Clone)]
pub struct WordEmbeddingTable {
    pub matrix: Array2<f32>,
    pub trainable: bool,
    pub found: usize,
}

impl WordEmbeddingTable {
    /// Fraction of regular vocabulary words that had a vector in the file.
    pub fn coverage(&self) -> f64 {
        let regular = self.matrix.nrows().saturating_sub(NUM_SPECIAL as usize);
        if regular == 0 {
            0.0
        } else {
            self.found as f64 / regular as f64
        }
    }

    pub fn random(vocab: &Vocabulary, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = Array2::from_shape_simple_fn((vocab.len(), dim), || truncated_normal(&mut rng, INIT_STD) as f32);
        Self { matrix, trainable: true, found: 0 }
    }
}

/// Read `word v1 … v_dim` lines. Words found copy their vectors; everything else keeps a seeded
/// random row. A missing file is an error unless `allow_random` is set.
pub fn load_word_vectors(path: &Path, vocab: &Vocabulary, dim: usize, seed: u64, allow_random: bool) -> Result<WordEmbeddingTable> {
    let mut table = WordEmbeddingTable::random(vocab, dim, seed);
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && allow_random => return Ok(table),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut seen = vec![false; vocab.len()];
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap_or_default();
        let values: Vec<f32> = parts
            .map(|p| p.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { path: path.into(), line: lineno + 1, msg: format!("non-numeric value: {e}") })?;
        if values.len() != dim {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if let Some(id) = vocab.id(word).filter(|&id| !Vocabulary::is_special(id)) {
            table.matrix.row_mut(id as usize).assign(&ndarray::Array1::from(values));
            seen[id as usize] = true;
        }
    }
    table.found = seen.iter().filter(|&&s| s).count();
    Ok(table)
}

/// Word table followed by a projection into the common model space.
#[derive(Debug, Clone)]
pub struct TextEmbedder {
    pub table: ParamId,
    pub proj: Linear,
    pub vocab_size: usize,
}

impl TextEmbedder {
    pub fn new<F: Float>(b: &mut Builder<F>, vocab_size: usize, word_dim: usize, model_dim: usize) -> Result<Self> {
        Ok(Self { table: b.weight("text.word_table", vocab_size, word_dim)?, proj: Linear::new(b, "text.proj", word_dim, model_dim)?, vocab_size })
    }

    /// Embed a flat list of ids: `ids.len() × model_dim`.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ids: &[u32]) -> Var {
        let table = g.param(self.table);
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = g.gather_rows(table, &rows);
        self.proj.forward(g, x)
    }

    /// Copy a loaded table into the parameter set.
    pub fn load_table<F: Float>(&self, params: &mut ParamSet<F>, table: &WordEmbeddingTable) -> Result<()> {
        let dst = params.value_mut(self.table);
        if dst.dim() != table.matrix.dim() {
            return Err(Error::Shape(format!("word table {:?} vs model {:?}", table.matrix.dim(), dst.dim())));
        }
        dst.zip_mut_with(&table.matrix, |d, &s| *d = F::lit(s as f64));
        Ok(())
    }
}

/// Embed one sequence: row `i` is the projected word vector of `ids[i]` (pads included).
pub fn embed_tokens<F: Float>(seq: &TokenSequence, embedder: &TextEmbedder, params: &ParamSet<F>) -> Result<Array2<F>> {
    if let Some(&bad) = seq.ids.iter().find(|&&i| i as usize >= embedder.vocab_size) {
        return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {}", embedder.vocab_size)));
    }
    let table_dim = params.value(embedder.table).ncols();
    if table_dim != embedder.proj.d_in {
        return Err(Error::Shape(format!("word dim {table_dim} vs projector input {}", embedder.proj.d_in)));
    }
    let mut g = Graph::new(params);
    let out = embedder.forward(&mut g, &seq.ids);
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use ndarray::Array2;
    use std::io::Write;

    fn vocab_mri() -> Vocabulary {
        Vocabulary::from_tokens(["mri".to_string(), "scan".to_string()]).unwrap()
    }

    #[test]
    fn specials_first_and_pad_zero() {
        let v = vocab_mri();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i as u32));
        }
        assert_eq!(v.id(PAD), Some(0));
        assert_eq!(v.id("mri"), Some(6));
    }

    #[test]
    fn build_orders_by_frequency() {
        let v = Vocabulary::build(["a b", "a"], 1).unwrap();
        assert_eq!(v.id("a"), Some(6));
        assert_eq!(v.id("b"), Some(7));
        let v2 = Vocabulary::build(["a b", "a"], 2).unwrap();
        assert_eq!(v2.id("b"), None);
        assert_eq!(tokenize("b", &v2, 2).ids, vec![UNK_ID, PAD_ID]);
        assert!(Vocabulary::build(Vec::<String>::new(), 1).is_err());
    }

    #[test]
    fn frequency_ties_break_lexicographically() {
        let v = Vocabulary::build(["zeta alpha", "beta"], 1).unwrap();
        assert_eq!(&v.tokens()[6..], &["alpha", "beta", "zeta"]);
    }

    #[test]
    fn tokenize_pads_and_truncates() {
        let v = vocab_mri();
        let t = tokenize("MRI scan", &v, 4);
        assert_eq!(t.ids, vec![6, 7, 0, 0]);
        assert_eq!(t.pad_mask, vec![true, true, false, false]);
        let e = tokenize("", &v, 3);
        assert_eq!(e.ids, vec![0, 0, 0]);
        assert!(e.pad_mask.iter().all(|m| !m));
        let long = vec!["scan"; 45].join(" ");
        let t = tokenize(&long, &v, 40);
        assert_eq!(t.len(), 40);
        assert!(t.pad_mask.iter().all(|&m| m));
    }

    #[test]
    fn punctuation_splits_words() {
        assert_eq!(words("T2-weighted MRI."), vec!["t2", "weighted", "mri"]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::build(["red circle", "blue square red"], 1).unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    #[test]
    fn word_vectors_copy_and_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::from_tokens(["mri", "scan", "ct", "xray"].map(String::from)).unwrap();
        let p = dir.path().join("vec.txt");
        let mut f = fs::File::create(&p).unwrap();
        writeln!(f, "scan 0.1 0.2 0.3").unwrap();
        writeln!(f, "ct 1 2 3").unwrap();
        writeln!(f, "other 9 9 9").unwrap();
        drop(f);
        let t = load_word_vectors(&p, &v, 3, 0, false).unwrap();
        assert_eq!(t.matrix.row(7).to_vec(), vec![0.1, 0.2, 0.3]);
        assert_eq!(t.found, 2);
        assert_eq!(t.coverage(), 0.5);
        assert!(t.trainable);

        fs::write(&p, "scan 0.1 0.2\n").unwrap();
        let err = load_word_vectors(&p, &v, 3, 0, false).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        fs::write(&p, "ct 1 2 3\nscan 0.1 x 0.3\n").unwrap();
        assert!(matches!(load_word_vectors(&p, &v, 3, 0, false), Err(Error::Parse { line: 2, .. })));

        let missing = dir.path().join("absent.txt");
        let t = load_word_vectors(&missing, &v, 3, 5, true).unwrap();
        assert_eq!(t.found, 0);
        assert_eq!(t.matrix.dim(), (10, 3));
        assert!(load_word_vectors(&missing, &v, 3, 5, false).is_err());
    }

    fn identity_embedder(vocab: usize, dim: usize) -> (TextEmbedder, ParamSet<f64>) {
        let mut ps = ParamSet::new();
        let table = Array2::from_shape_fn((vocab, dim), |(r, c)| (r * dim + c) as f64);
        let t = ps.insert("text.word_table", ParamKind::Weight, table).unwrap();
        let w = ps.insert("text.proj.weight", ParamKind::Weight, Array2::eye(dim)).unwrap();
        let b = ps.insert("text.proj.bias", ParamKind::Bias, Array2::zeros((1, dim))).unwrap();
        (TextEmbedder { table: t, proj: Linear { weight: w, bias: b, d_in: dim, d_out: dim }, vocab_size: vocab }, ps)
    }

    #[test]
    fn embed_identity_projector_copies_rows() {
        let (e, ps) = identity_embedder(8, 3);
        let seq = TokenSequence { ids: vec![6, 7, 0], pad_mask: vec![true, true, false] };
        let out = embed_tokens(&seq, &e, &ps).unwrap();
        assert_eq!(out.row(0), ps.value(e.table).row(6));
        assert_eq!(out.row(1), ps.value(e.table).row(7));
        let bad = TokenSequence { ids: vec![9], pad_mask: vec![true] };
        assert!(embed_tokens(&bad, &e, &ps).is_err());
    }

    #[test]
    fn embed_paper_shape() {
        let mut ps = ParamSet::<f32>::new();
        let mut b = Builder::init(&mut ps, ChaCha8Rng::seed_from_u64(1));
        let e = TextEmbedder::new(&mut b, 50, 300, 128).unwrap();
        let v = Vocabulary::from_tokens((0..44).map(|i| format!("w{i}"))).unwrap();
        let seq = tokenize("w1 w2 w3", &v, 40);
        assert_eq!(embed_tokens(&seq, &e, &ps).unwrap().dim(), (40, 128));
    }

    #[test]
    fn pad_region_does_not_affect_real_rows() {
        let (e, ps) = identity_embedder(8, 3);
        let a = TokenSequence { ids: vec![6, 7, 0, 0], pad_mask: vec![true, true, false, false] };
        let mut b = a.clone();
        b.ids[3] = 5;
        let ea = embed_tokens(&a, &e, &ps).unwrap();
        let eb = embed_tokens(&b, &e, &ps).unwrap();
        assert_eq!(ea.row(0), eb.row(0));
        assert_eq!(ea.row(1), eb.row(1));
    }

    proptest::proptest! {
        #[test]
        fn tokenize_shape_and_prefix_mask(text in "[a-zA-Z ,.!?-]{0,80}", max_len in 1usize..20) {
            let v = Vocabulary::build([text.as_str(), "x"], 1).unwrap();
            let t = tokenize(&text, &v, max_len);
            proptest::prop_assert_eq!(t.len(), max_len);
            let real = t.real_len();
            proptest::prop_assert!(t.pad_mask[..real].iter().all(|&m| m));
            proptest::prop_assert!(t.ids[real..].iter().all(|&i| i == PAD_ID));
            // in-vocab, untruncated text re-tokenizes to the same ids
            if words(&text).len() <= max_len {
                let again = tokenize(&v.detokenize(&t.ids), &v, max_len);
                proptest::prop_assert_eq!(again, t);
            }
        }
    }
}
