//! Whole-word tokenizer and BERT-style masking.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
/// First id available to ordinary words.
pub const FIRST_WORD: usize = 5;

const RESERVED: [&str; FIRST_WORD] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Lowercased words of `text`, split on whitespace and punctuation.
pub fn words(text: &str) -> Vec<String> {
    text.split(|ch: char| !ch.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by the sorted distinct words of `corpus`.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut set = BTreeSet::new();
        let mut any = false;
        for text in corpus {
            any = true;
            set.extend(words(text));
        }
        if !any {
            return Err(Error::config("cannot build a vocabulary from an empty corpus"));
        }
        Vocabulary::from_words(set)
    }

    /// Vocabulary whose word ids follow the given order.
    pub fn from_words(list: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        for w in list {
            if ids.contains_key(&w) {
                return Err(Error::config(format!("duplicate vocabulary token {w}")));
            }
            ids.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ordinary words in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[FIRST_WORD..]
    }

    /// `[CLS] words [SEP]`, truncated and padded to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        if max_len < 3 {
            return Err(Error::config(format!("max_len must be at least 3, got {max_len}")));
        }
        let mut ids = vec![CLS];
        ids.extend(words(text).iter().take(max_len - 2).map(|w| self.id(w)));
        ids.push(SEP);
        let real = ids.len();
        ids.resize(max_len, PAD);
        Ok(TokenSequence { ids, real })
    }

    /// Words of the ids that are not special tokens, joined by spaces.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= FIRST_WORD || id == UNK)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < FIRST_WORD || lines[..FIRST_WORD] != RESERVED {
            return Err(Error::Data("vocabulary file does not start with the reserved tokens".into()));
        }
        Vocabulary::from_words(lines[FIRST_WORD..].iter().map(|s| s.to_string()))
    }
}

/// Token ids with a fixed length; the first `real` positions are not padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub real: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// True at `[CLS]`, words and `[SEP]`.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.real).collect()
    }

    /// Positions eligible for masked-token prediction.
    pub fn candidates(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.real).filter(|&i| !matches!(self.ids[i], PAD | CLS | SEP))
    }
}

/// Masked-token labels: `(position, original id)` in position order.
pub type MlmLabels = Vec<(usize, usize)>;

/// Selects each candidate with probability `p`; a selected token becomes
/// `[MASK]` with probability 0.8, a uniformly drawn word with 0.1, and stays
/// unchanged otherwise.
pub fn mlm_mask<R: Rng + ?Sized>(
    seq: &TokenSequence,
    vocab_size: usize,
    p: f64,
    rng: &mut R,
) -> Result<(TokenSequence, MlmLabels)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("masking probability must lie in [0, 1], got {p}")));
    }
    let mut out = seq.clone();
    let mut labels = Vec::new();
    for i in seq.candidates() {
        if rng.gen::<f64>() >= p {
            continue;
        }
        labels.push((i, seq.ids[i]));
        let branch = rng.gen::<f64>();
        if branch < 0.8 {
            out.ids[i] = MASK;
        } else if branch < 0.9 && vocab_size > FIRST_WORD {
            out.ids[i] = rng.gen_range(FIRST_WORD..vocab_size);
        }
    }
    Ok((out, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sorted_ids_after_reserved() {
        let v = Vocabulary::build(["a red circle"]).unwrap();
        assert_eq!((v.id("a"), v.id("circle"), v.id("red")), (5, 6, 7));
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.token(3), Some("[MASK]"));
    }

    #[test]
    fn punctuation_and_case_are_stripped() {
        assert_eq!(words("A Red, circle!  left-of"), ["a", "red", "circle", "left", "of"]);
    }

    #[test]
    fn empty_corpus_is_config_error() {
        assert!(matches!(Vocabulary::build(std::iter::empty()), Err(Error::Config(_))));
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::build(["a red circle"]).unwrap();
        let t = v.tokenize("", 4).unwrap();
        assert_eq!(t.ids, vec![CLS, SEP, PAD, PAD]);
        assert_eq!(t.pad_mask(), vec![true, true, false, false]);

        let t = v.tokenize("a red circle", 6).unwrap();
        assert_eq!(t.ids, vec![CLS, 5, 7, 6, SEP, PAD]);

        let t = v.tokenize("a red circle a red circle", 5).unwrap();
        assert_eq!(t.ids, vec![CLS, 5, 7, 6, SEP]);
        assert!(v.tokenize("a", 2).is_err());
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let v = Vocabulary::build(["b a", "c"]).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn zero_probability_masks_nothing() {
        let v = Vocabulary::build(["a red circle left of a blue square"]).unwrap();
        let seq = v.tokenize("a red circle left of a blue square", 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, labels) = mlm_mask(&seq, v.len(), 0.0, &mut rng).unwrap();
        assert_eq!(out, seq);
        assert!(labels.is_empty());
    }

    /// Always draws zero, which forces selection and the `[MASK]` branch.
    struct Zeros;

    impl rand::RngCore for Zeros {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            dest.fill(0);
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
            dest.fill(0);
            Ok(())
        }
    }

    #[test]
    fn forced_mask_branch_masks_every_word() {
        let v = Vocabulary::build(["a red circle"]).unwrap();
        let seq = v.tokenize("a red circle", 8).unwrap();
        let (out, labels) = mlm_mask(&seq, v.len(), 1.0, &mut Zeros).unwrap();
        assert_eq!(out.ids, vec![CLS, MASK, MASK, MASK, SEP, PAD, PAD, PAD]);
        assert_eq!(labels, vec![(1, 5), (2, 7), (3, 6)]);
    }
}
