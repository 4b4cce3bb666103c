//! Token vocabulary, its embedding matrix and a greedy word-piece tokenizer.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lexicon::{Facet, CHARACTERS, GENERAL_WORDS, PUNCTUATION, SUFFIX_PIECES};
use crate::linalg::{normalized, Matrix};

pub type TokenId = u32;

/// Marker prefix for word-continuation pieces.
pub const CONTINUATION: &str = "##";

pub const SPECIAL_TOKENS: &[&str] = &["<|startoftext|>", "<|endoftext|>", "<pad>", "<unk>"];

/// `|V| x d` embedding table plus decoded token strings.
///
/// Rows are unit-normalized on construction so cosine similarity against the
/// table reduces to a dot product.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabularyEmbedding {
    matrix: Matrix,
    token_strings: Vec<String>,
    tokenizer_id: String,
    special_ids: BTreeSet<TokenId>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabMeta {
    tokenizer_id: String,
    dim: usize,
    special_tokens: Vec<String>,
}

impl VocabularyEmbedding {
    /// Builds a vocabulary from raw rows. Rows are normalized; zero or
    /// non-finite rows are rejected.
    pub fn new(
        matrix: Matrix,
        token_strings: Vec<String>,
        tokenizer_id: impl Into<String>,
        special_tokens: &[&str],
    ) -> Result<Self> {
        if matrix.rows() != token_strings.len() {
            return Err(Error::InvalidInput(format!(
                "vocabulary has {} rows but {} token strings",
                matrix.rows(),
                token_strings.len()
            )));
        }
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(Error::InvalidInput("vocabulary is empty".into()));
        }
        let mut unit = Matrix::zeros(matrix.rows(), matrix.cols());
        for (i, row) in matrix.iter_rows().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "vocabulary row {i} has non-finite entries"
                )));
            }
            let n = normalized(row).ok_or_else(|| {
                Error::InvalidInput(format!("vocabulary row {i} is the zero vector"))
            })?;
            unit.row_mut(i).copy_from_slice(&n);
        }
        let index = build_index(&token_strings)?;
        let special_ids = special_tokens
            .iter()
            .filter_map(|s| index.get(*s).copied())
            .collect::<BTreeSet<_>>();
        if special_ids.len() == token_strings.len() {
            return Err(Error::InvalidInput(
                "vocabulary contains only special tokens".into(),
            ));
        }
        Ok(Self {
            matrix: unit,
            token_strings,
            tokenizer_id: tokenizer_id.into(),
            special_ids,
            index,
        })
    }

    /// Deterministic vocabulary over the built-in word lists. Each row is a
    /// Gaussian vector seeded from `(seed, token string)`, so the same token
    /// always maps to the same direction regardless of vocabulary order.
    pub fn synthetic(dim: usize, seed: u64) -> Self {
        let tokens = synthetic_token_list();
        let mut matrix = Matrix::zeros(tokens.len(), dim);
        for (i, tok) in tokens.iter().enumerate() {
            matrix.row_mut(i).copy_from_slice(&hashed_direction(seed, tok, dim));
        }
        Self::new(matrix, tokens, format!("wordpiece-synthetic-{seed}"), SPECIAL_TOKENS)
            .expect("built-in vocabulary is well formed")
    }

    /// Loads an exported vocabulary: `tokens.txt` (one token per line),
    /// `embeddings.f32` (row-major little-endian float32) and `meta.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: VocabMeta = serde_json::from_slice(
            &fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;
        let tokens_path = dir.join("tokens.txt");
        let tokens: Vec<String> = fs::read_to_string(&tokens_path)
            .map_err(|e| Error::io(&tokens_path, e))?
            .lines()
            .map(str::to_string)
            .collect();
        let emb_path = dir.join("embeddings.f32");
        let bytes = fs::read(&emb_path).map_err(|e| Error::io(&emb_path, e))?;
        if bytes.len() != tokens.len() * meta.dim * 4 {
            return Err(Error::InvalidInput(format!(
                "{} holds {} bytes, expected {}",
                emb_path.display(),
                bytes.len(),
                tokens.len() * meta.dim * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let specials: Vec<&str> = meta.special_tokens.iter().map(String::as_str).collect();
        Self::new(
            Matrix::from_vec(tokens.len(), meta.dim, data),
            tokens,
            meta.tokenizer_id,
            &specials,
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = VocabMeta {
            tokenizer_id: self.tokenizer_id.clone(),
            dim: self.dim(),
            special_tokens: self
                .special_ids
                .iter()
                .map(|&id| self.token_strings[id as usize].clone())
                .collect(),
        };
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write("meta.json", &serde_json::to_vec_pretty(&meta)?)?;
        write("tokens.txt", self.token_strings.join("\n").as_bytes())?;
        let raw: Vec<u8> = self
            .matrix
            .as_slice()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        write("embeddings.f32", &raw)
    }

    pub fn len(&self) -> usize {
        self.token_strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_strings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn tokenizer_id(&self) -> &str {
        &self.tokenizer_id
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn row(&self, id: TokenId) -> &[f32] {
        self.matrix.row(id as usize)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.token_strings.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.special_ids.contains(&id)
    }

    /// Ids eligible as projection targets and padding samples.
    pub fn regular_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len() as TokenId).filter(|id| !self.is_special(*id))
    }

    /// Restores the lookup index after deserialization.
    pub fn reindex(&mut self) -> Result<()> {
        self.index = build_index(&self.token_strings)?;
        Ok(())
    }

    /// Lowercases, splits into ASCII alphanumeric words and punctuation, and
    /// maps each word to whole-word tokens or greedy longest-match pieces.
    /// Characters with no representation are skipped.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let lower = text.to_lowercase();
        let mut ids = Vec::new();
        let mut word = String::new();
        for ch in lower.chars() {
            if ch.is_ascii_alphanumeric() {
                word.push(ch);
                continue;
            }
            self.encode_word(&word, &mut ids);
            word.clear();
            if !ch.is_whitespace() {
                if let Some(id) = self.id_of(ch.encode_utf8(&mut [0; 4])) {
                    ids.push(id);
                }
            }
        }
        self.encode_word(&word, &mut ids);
        ids
    }

    fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) {
        if word.is_empty() {
            return;
        }
        if let Some(id) = self.id_of(word) {
            out.push(id);
            return;
        }
        let mut rest = word;
        let mut first = true;
        let mut pieces = Vec::new();
        while !rest.is_empty() {
            let mut matched = None;
            for end in (1..=rest.len()).rev() {
                let piece = &rest[..end];
                let key = if first {
                    piece.to_string()
                } else {
                    format!("{CONTINUATION}{piece}")
                };
                if let Some(id) = self.id_of(&key).filter(|id| !self.is_special(*id)) {
                    matched = Some((id, end));
                    break;
                }
            }
            match matched {
                Some((id, end)) => {
                    pieces.push(id);
                    rest = &rest[end..];
                    first = false;
                }
                // Vocabulary cannot spell this word; drop it whole.
                None => return,
            }
        }
        out.extend(pieces);
    }

    /// Inverse of [`encode`](Self::encode) up to normalization: words are
    /// space separated, continuation pieces glue onto the preceding word and
    /// punctuation attaches to whatever precedes it. Special tokens render
    /// as nothing.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        let mut prev_is_word = false;
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.len()
                ))
            })?;
            if self.is_special(id) {
                continue;
            }
            if let Some(piece) = tok.strip_prefix(CONTINUATION).filter(|p| !p.is_empty()) {
                if !prev_is_word && !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(piece);
                prev_is_word = true;
            } else if is_punctuation(tok) {
                out.push_str(tok);
                prev_is_word = false;
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
                prev_is_word = true;
            }
        }
        Ok(out)
    }
}

fn is_punctuation(tok: &str) -> bool {
    !tok.is_empty() && tok.chars().all(|c| !c.is_alphanumeric() && !c.is_whitespace())
}

fn build_index(tokens: &[String]) -> Result<HashMap<String, TokenId>> {
    let mut index = HashMap::with_capacity(tokens.len());
    for (i, t) in tokens.iter().enumerate() {
        if index.insert(t.clone(), i as TokenId).is_some() {
            return Err(Error::InvalidInput(format!("duplicate token string `{t}`")));
        }
    }
    Ok(index)
}

fn synthetic_token_list() -> Vec<String> {
    let mut tokens: Vec<String> = Vec::new();
    let mut push = |t: String| {
        if !tokens.contains(&t) {
            tokens.push(t);
        }
    };
    SPECIAL_TOKENS.iter().for_each(|t| push(t.to_string()));
    PUNCTUATION.iter().for_each(|t| push(t.to_string()));
    for c in CHARACTERS.chars() {
        push(c.to_string());
        push(format!("{CONTINUATION}{c}"));
    }
    SUFFIX_PIECES
        .iter()
        .for_each(|s| push(format!("{CONTINUATION}{s}")));
    GENERAL_WORDS.iter().for_each(|t| push(t.to_string()));
    for f in Facet::ALL {
        f.words().iter().for_each(|t| push(t.to_string()));
    }
    tokens
}

/// Unit Gaussian direction keyed by `(seed, key)`.
pub fn hashed_direction(seed: u64, key: &str, dim: usize) -> Vec<f32> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    loop {
        let v: Vec<f32> = (0..dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect();
        if let Some(n) = normalized(&v) {
            return n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;

    fn vocab() -> VocabularyEmbedding {
        VocabularyEmbedding::synthetic(32, 1)
    }

    #[test]
    fn rows_are_unit_and_match_token_count() {
        let v = vocab();
        assert_eq!(v.matrix().rows(), v.len());
        for row in v.matrix().iter_rows() {
            assert!((norm(row) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_zero_row() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let err = VocabularyEmbedding::new(m, vec!["a".into(), "b".into()], "t", &[]);
        assert!(matches!(err, Err(Error::InvalidInput(msg)) if msg.contains("row 1")));
    }

    #[test]
    fn encode_decode_simple() {
        let v = vocab();
        let ids = v.encode("A dog");
        assert_eq!(ids, vec![v.id_of("a").unwrap(), v.id_of("dog").unwrap()]);
        assert_eq!(v.decode(&ids).unwrap(), "a dog");
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn unknown_words_split_into_pieces() {
        let v = vocab();
        let ids = v.encode("dogs zyx");
        let toks: Vec<_> = ids.iter().map(|i| v.token(*i).unwrap()).collect();
        assert_eq!(toks, vec!["dog", "##s", "z", "##y", "##x"]);
        assert_eq!(v.decode(&ids).unwrap(), "dogs zyx");
    }

    #[test]
    fn punctuation_attaches() {
        let v = vocab();
        let ids = v.encode("a cat, a dog.");
        assert_eq!(v.decode(&ids).unwrap(), "a cat, a dog.");
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let v = vocab();
        assert!(matches!(
            v.decode(&[v.len() as TokenId]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn specials_excluded_from_regular_ids() {
        let v = vocab();
        let start = v.id_of("<|startoftext|>").unwrap();
        assert!(v.is_special(start));
        assert!(v.regular_ids().all(|id| id != start));
    }

    #[test]
    fn save_load_roundtrip() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        v.save(dir.path()).unwrap();
        let back = VocabularyEmbedding::load(dir.path()).unwrap();
        assert_eq!(back.len(), v.len());
        assert_eq!(back.matrix(), v.matrix());
        assert_eq!(back.id_of("dog"), v.id_of("dog"));
        assert!(back.is_special(back.id_of("<pad>").unwrap()));
    }
}
