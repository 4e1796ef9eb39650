//! Vocabularies: a greedy longest-match-first subword tokenizer for the
//! encoder, plus plain word and character vocabularies for the tagger.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const CONTINUATION: &str = "##";

/// Subword ids for a word sequence plus, for each word, the `[start, end)`
/// range of its subwords.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordTokenization {
    pub ids: Vec<usize>,
    pub word_spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubwordVocab {
    tokens: Vec<String>,
    #[serde(default)]
    pub lowercase: bool,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl SubwordVocab {
    /// Builds from explicit pieces; continuation pieces carry the `##`
    /// prefix. Special tokens are prepended when missing.
    pub fn from_tokens<S: AsRef<str>>(pieces: &[S]) -> Self {
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        for p in pieces {
            let p = p.as_ref();
            if !tokens.iter().any(|t| t == p) {
                tokens.push(p.to_string());
            }
        }
        let mut v = SubwordVocab {
            tokens,
            lowercase: false,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    /// Whole words seen at least `min_count` times (at most `max_words`,
    /// most frequent first) plus every character seen, both as a word-initial
    /// piece and as a continuation piece. Rarer words then split into pieces.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, min_count: usize, max_words: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for w in words {
            *counts.entry(w).or_default() += 1;
        }
        let mut frequent: Vec<(&str, usize)> = counts
            .iter()
            .map(|(w, c)| (*w, *c))
            .filter(|(_, c)| *c >= min_count)
            .collect();
        frequent.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut pieces: Vec<String> = frequent.iter().take(max_words).map(|(w, _)| w.to_string()).collect();
        let mut chars: Vec<char> = counts.keys().flat_map(|w| w.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        for c in chars {
            pieces.push(c.to_string());
            pieces.push(format!("{CONTINUATION}{c}"));
        }
        Self::from_tokens(&pieces)
    }

    pub(crate) fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn unk_id(&self) -> usize {
        self.index[UNK]
    }

    pub fn cls_id(&self) -> usize {
        self.index[CLS]
    }

    pub fn sep_id(&self) -> usize {
        self.index[SEP]
    }

    fn segment_word(&self, word: &str, out: &mut Vec<usize>) {
        let normalized;
        let word = if self.lowercase {
            normalized = word.to_lowercase();
            normalized.as_str()
        } else {
            word
        };
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        let mut piece = String::new();
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.extend(&chars[start..end]);
                if let Some(id) = self.id(&piece) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.push(self.unk_id());
                    start += 1;
                }
            }
        }
    }

    /// Greedy longest-match-first segmentation of each word.
    pub fn tokenize<S: AsRef<str>>(&self, words: &[S]) -> SubwordTokenization {
        let mut ids = Vec::new();
        let mut word_spans = Vec::with_capacity(words.len());
        for w in words {
            let start = ids.len();
            self.segment_word(w.as_ref(), &mut ids);
            if ids.len() == start {
                // empty strings still occupy one position
                ids.push(self.unk_id());
            }
            word_spans.push((start, ids.len()));
        }
        SubwordTokenization { ids, word_spans }
    }

    /// Concatenates pieces, dropping continuation markers.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| {
                let t = self.token(i);
                t.strip_prefix(CONTINUATION).unwrap_or(t)
            })
            .collect()
    }
}

/// Plain token-to-id map with `[PAD]` = 0 and `[UNK]` = 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    items: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<S: AsRef<str>>(items: impl IntoIterator<Item = S>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for it in items {
            *counts.entry(it.as_ref().to_string()).or_default() += 1;
        }
        let mut list = vec![PAD.to_string(), UNK.to_string()];
        list.extend(counts.into_iter().filter(|(_, c)| *c >= min_count).map(|(w, _)| w));
        let mut v = Vocab {
            items: list,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    pub(crate) fn reindex(&mut self) {
        self.index = self.items.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn id(&self, item: &str) -> usize {
        self.index.get(item).copied().unwrap_or(1)
    }

    pub fn contains(&self, item: &str) -> bool {
        self.index.contains_key(item)
    }

    pub fn item(&self, id: usize) -> &str {
        &self.items[id]
    }
}

/// Reads a plain-text vector file: a token followed by `dim` floats per
/// line. A leading `count dim` header line (fastText `.vec`) is skipped.
pub fn load_word_vectors(path: &Path) -> Result<(usize, HashMap<String, Vec<Real>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dim = None;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        if i == 0 && cols.len() == 2 && cols.iter().all(|c| c.parse::<usize>().is_ok()) {
            continue;
        }
        let values: std::result::Result<Vec<Real>, _> = cols[1..].iter().map(|c| c.parse::<Real>()).collect();
        let values = values.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("bad float: {e}"),
        })?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected {d} values, got {}", values.len()),
                })
            }
            _ => {}
        }
        out.insert(cols[0].to_string(), values);
    }
    Ok((dim.unwrap_or(0), out))
}

/// Serialized vocabulary bundle stored next to checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub subwords: SubwordVocab,
    pub words: Vocab,
    pub chars: Vocab,
}

impl Vocabularies {
    pub fn build<'a>(sentences: impl Iterator<Item = &'a [String]> + Clone, subword_min_count: usize) -> Self {
        let words = sentences.clone().flat_map(|s| s.iter().map(String::as_str));
        let subwords = SubwordVocab::build(words.clone(), subword_min_count, usize::MAX);
        let chars = Vocab::build(words.clone().flat_map(|w| w.chars().map(|c| c.to_string())), 1);
        let words = Vocab::build(words, 1);
        Vocabularies { subwords, words, chars }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("vocab serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v: Vocabularies = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        v.subwords.reindex();
        v.words.reindex();
        v.chars.reindex();
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn in_vocab_word_is_one_piece() {
        let v = SubwordVocab::from_tokens(&["kevin", "love"]);
        let t = v.tokenize(&["kevin", "love"]);
        assert_eq!(t.word_spans, vec![(0, 1), (1, 2)]);
        assert_eq!(t.ids, vec![v.id("kevin").unwrap(), v.id("love").unwrap()]);
    }

    #[test]
    fn longest_match_first() {
        let v = SubwordVocab::from_tokens(&["un", "unh", "##happi", "##ness", "##h", "##a"]);
        let t = v.tokenize(&["unhappiness"]);
        // "unh" is longer than "un" but leaves "appiness", which has no piece
        // starting with "##appi"; greedy still commits to "unh".
        assert_eq!(t.word_spans, vec![(0, t.ids.len())]);
        let v = SubwordVocab::from_tokens(&["un", "##happi", "##ness"]);
        let t = v.tokenize(&["unhappiness"]);
        let pieces: Vec<&str> = t.ids.iter().map(|&i| v.token(i)).collect();
        assert_eq!(pieces, vec!["un", "##happi", "##ness"]);
        assert_eq!(t.word_spans, vec![(0, 3)]);
    }

    #[test]
    fn unknown_characters_become_unk() {
        let v = SubwordVocab::from_tokens(&["a", "##a"]);
        let t = v.tokenize(&["aza"]);
        assert_eq!(t.ids, vec![v.id("a").unwrap(), v.unk_id(), v.id("##a").unwrap()]);
    }

    #[test]
    fn vocab_json_round_trip() {
        let sents = vec![vec!["a".to_string(), "bc".to_string()], vec!["bc".to_string()]];
        let v = Vocabularies::build(sents.iter().map(|s| s.as_slice()), 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        v.save(&p).unwrap();
        let back = Vocabularies::load(&p).unwrap();
        assert_eq!(back.subwords.id("bc"), v.subwords.id("bc"));
        assert_eq!(back.words.id("a"), v.words.id("a"));
        assert_eq!(back.words.id("zzz"), 1);
    }

    #[test]
    fn word_vectors_skip_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vec");
        fs::write(&p, "2 3\nfoo 1 2 3\nbar 4 5 6\n").unwrap();
        let (dim, vecs) = load_word_vectors(&p).unwrap();
        assert_eq!(dim, 3);
        assert_eq!(vecs["bar"], vec![4.0, 5.0, 6.0]);
        fs::write(&p, "foo 1 2 3\nbar 4 5\n").unwrap();
        assert!(load_word_vectors(&p).is_err());
    }

    proptest! {
        #[test]
        fn detokenize_recovers_corpus_words(
            corpus in proptest::collection::vec("[a-z]{1,9}", 1..40),
            min_count in 1usize..4,
        ) {
            let v = SubwordVocab::build(corpus.iter().map(String::as_str), min_count, usize::MAX);
            let t = v.tokenize(&corpus);
            let mut covered = 0;
            for (w, &(s, e)) in corpus.iter().zip(&t.word_spans) {
                prop_assert_eq!(s, covered);
                prop_assert!(e > s);
                prop_assert_eq!(&v.detokenize(&t.ids[s..e]), w);
                covered = e;
            }
            prop_assert_eq!(covered, t.ids.len());
        }
    }
}
