//! Closed question vocabulary, tokenization, and padded question batches.
//!
//! Vocabulary files are plain text with one token per line; the line
//! number is the id (line 1 is id 1), and id 0 is reserved for padding.
//! Answer vocabularies use the same file format but dense zero-based ids.

use crate::error::{Error, Result};
use crate::util::write_atomic;
use std::collections::HashMap;
use std::path::Path;

/// One-based token vocabulary with id 0 reserved for padding.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Result<Self> {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token {w:?}")));
            }
            if index.insert(w.clone(), i + 1).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {w:?}")));
            }
        }
        Ok(Vocab { words, index })
    }

    /// Number of real tokens; valid ids are `1..=len()`.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        if id == 0 {
            None
        } else {
            self.words.get(id - 1).map(String::as_str)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_words(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }
}

/// Answer vocabulary with dense ids in `0..len`.
#[derive(Debug, Clone)]
pub struct AnswerVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn from_words<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Result<Self> {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate answer {w:?}")));
            }
        }
        Ok(AnswerVocab { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_words(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }
}

/// Whitespace tokenization against a closed vocabulary.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<Vec<usize>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::Data("cannot tokenize an empty question".into()));
    }
    words.iter().map(|w| vocab.id(w)).collect()
}

/// Padded question ids with a validity mask. Padding positions carry id 0.
#[derive(Debug, Clone)]
pub struct QuestionBatch {
    pub token_ids: Vec<Vec<usize>>,
    pub valid: Vec<Vec<bool>>,
    pub max_len: usize,
}

impl QuestionBatch {
    pub fn new(questions: &[Vec<usize>], max_len: usize) -> Result<Self> {
        let mut token_ids = Vec::with_capacity(questions.len());
        let mut valid = Vec::with_capacity(questions.len());
        for q in questions {
            if q.is_empty() {
                return Err(Error::Data("question with no valid tokens".into()));
            }
            if q.len() > max_len {
                return Err(Error::Data(format!(
                    "question length {} exceeds maximum {max_len}",
                    q.len()
                )));
            }
            if q.iter().any(|&id| id == 0) {
                return Err(Error::Data("token id 0 inside a question body".into()));
            }
            let mut row = q.clone();
            row.resize(max_len, 0);
            let mut mask = vec![true; q.len()];
            mask.resize(max_len, false);
            token_ids.push(row);
            valid.push(mask);
        }
        Ok(QuestionBatch {
            token_ids,
            valid,
            max_len,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_is_direct_lookup() {
        let vocab = Vocab::from_words(["left", "of", "sphere"]).unwrap();
        assert_eq!(tokenize("left of sphere", &vocab).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn tokenize_empty_string_errors() {
        let vocab = Vocab::from_words(["a"]).unwrap();
        assert!(tokenize("", &vocab).is_err());
    }

    #[test]
    fn tokenize_repeats_repeat_ids() {
        let vocab = Vocab::from_words(["very", "big"]).unwrap();
        assert_eq!(tokenize("very very big", &vocab).unwrap(), vec![1, 1, 2]);
    }

    #[test]
    fn tokenize_unknown_word_errors() {
        let vocab = Vocab::from_words(["a"]).unwrap();
        assert!(matches!(
            tokenize("a b", &vocab),
            Err(Error::UnknownToken(w)) if w == "b"
        ));
    }

    #[test]
    fn vocab_file_roundtrip_keeps_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = Vocab::from_words(["what", "is", "red"]).unwrap();
        vocab.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(back.id("what").unwrap(), 1);
        assert_eq!(back.id("red").unwrap(), 3);
        assert_eq!(back.word(0), None);
    }

    #[test]
    fn answer_vocab_ids_are_zero_based() {
        let av = AnswerVocab::from_words(["yes", "no", "cube"]).unwrap();
        assert_eq!(av.id("yes").unwrap(), 0);
        assert_eq!(av.id("cube").unwrap(), 2);
        assert_eq!(av.word(1), Some("no"));
    }

    #[test]
    fn batch_pads_with_zero_and_masks() {
        let b = QuestionBatch::new(&[vec![2, 5, 1]], 5).unwrap();
        assert_eq!(b.token_ids[0], vec![2, 5, 1, 0, 0]);
        assert_eq!(b.valid[0], vec![true, true, true, false, false]);
    }

    #[test]
    fn batch_rejects_empty_and_overlong_rows() {
        assert!(QuestionBatch::new(&[vec![]], 4).is_err());
        assert!(QuestionBatch::new(&[vec![1, 2, 3, 4, 5]], 4).is_err());
        assert!(QuestionBatch::new(&[vec![1, 0, 2]], 4).is_err());
    }
}
