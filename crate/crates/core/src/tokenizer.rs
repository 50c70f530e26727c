//! Greedy longest-match-first subword tokenizer with word alignment, and the
//! continued-words statistic used to compare tokenizers across corpora.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK: u32 = 3;
pub const PAD: u32 = 4;

/// Special tokens in id order.
pub const SPECIALS: [&str; 5] = ["[CLS]", "[SEP]", "[MASK]", "[UNK]", "[PAD]"];
pub const NUM_SPECIALS: usize = SPECIALS.len();

/// Immutable subword inventory. Ids are dense, specials occupy ids 0..5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    prefix: String,
}

impl Vocabulary {
    /// Builds a vocabulary from non-special tokens, prepending the specials.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        Self::with_prefix(tokens, "##")
    }

    pub fn with_prefix(tokens: impl IntoIterator<Item = String>, prefix: &str) -> Result<Self> {
        let all = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().filter(|t| !SPECIALS.contains(&t.as_str())));
        Self::from_full_list(all, prefix)
    }

    fn from_full_list(all: impl IntoIterator<Item = String>, prefix: &str) -> Result<Self> {
        let tokens: Vec<String> = all.into_iter().collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Data(format!("vocabulary must start with {s} at id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t == prefix {
                return Err(Error::Data(format!("empty token at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate token `{t}` at id {i}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            prefix: prefix.to_owned(),
        })
    }

    /// Reads a vocab file: one token per line, line number is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_full_list(text.lines().map(str::to_owned), "##").map_err(|e| match e {
            Error::Data(message) => Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message,
            },
            e => e,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = self.tokens.join("\n");
        out.push('\n');
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Returns a copy with `token` appended (no-op if already present).
    pub fn with_token(&self, token: &str) -> Self {
        let mut v = self.clone();
        if !v.contains(token) {
            v.index.insert(token.to_owned(), v.tokens.len() as u32);
            v.tokens.push(token.to_owned());
        }
        v
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Alpha,
    Digit,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_numeric() {
        CharClass::Digit
    } else if c.is_alphanumeric() {
        CharClass::Alpha
    } else {
        CharClass::Other
    }
}

/// Splits at whitespace, then separates maximal runs of letters, digits and
/// other characters into their own words.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        let mut class = None;
        for c in chunk.chars() {
            let k = class_of(c);
            if class.is_some_and(|prev| prev != k) {
                words.push(std::mem::take(&mut current));
            }
            class = Some(k);
            current.push(c);
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

/// Greedy longest-match-first segmentation of one word into vocabulary ids.
/// Returns `[UNK]` if any position cannot be matched.
pub fn wordpiece_ids(word: &str, vocab: &Vocabulary) -> Vec<u32> {
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::new();
    while start < chars.len() {
        let from = chars[start].0;
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let to = chars.get(end).map_or(word.len(), |c| c.0);
            candidate.clear();
            if start > 0 {
                candidate.push_str(&vocab.prefix);
            }
            candidate.push_str(&word[from..to]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => pieces.push(id),
            None => return vec![UNK],
        }
        start = end;
    }
    pieces
}

/// Like [`wordpiece_ids`] but returns the piece strings.
pub fn wordpiece(word: &str, vocab: &Vocabulary) -> Vec<String> {
    wordpiece_ids(word, vocab)
        .into_iter()
        .map(|id| vocab.token(id).to_owned())
        .collect()
}

/// A sentence encoded as `[CLS] pieces... [SEP]` with word alignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenizedSentence {
    /// Words whose first piece survived truncation.
    pub words: Vec<String>,
    pub subtoken_ids: Vec<u32>,
    /// Index into `subtoken_ids` of each word's first piece.
    pub word_to_first_subtoken: Vec<usize>,
    /// Whether each word was split into two or more pieces (before truncation).
    pub continued_flags: Vec<bool>,
}

/// Encodes raw text; see [`encode_words`].
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenizedSentence {
    encode_words(&pre_tokenize(text), vocab, max_len)
}

/// Encodes pre-split words, truncating to at most `max_len` ids while keeping
/// the trailing `[SEP]`. Words whose first piece falls past the cut are dropped.
pub fn encode_words<S: AsRef<str>>(words: &[S], vocab: &Vocabulary, max_len: usize) -> TokenizedSentence {
    assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
    let budget = max_len - 2;
    let mut out = TokenizedSentence {
        words: Vec::new(),
        subtoken_ids: vec![CLS],
        word_to_first_subtoken: Vec::new(),
        continued_flags: Vec::new(),
    };
    for w in words {
        let pieces = wordpiece_ids(w.as_ref(), vocab);
        let used = out.subtoken_ids.len() - 1;
        if used >= budget {
            break;
        }
        out.words.push(w.as_ref().to_owned());
        out.word_to_first_subtoken.push(out.subtoken_ids.len());
        out.continued_flags.push(pieces.len() >= 2);
        let take = pieces.len().min(budget - used);
        out.subtoken_ids.extend_from_slice(&pieces[..take]);
    }
    out.subtoken_ids.push(SEP);
    out
}

/// Fraction of words split into two or more pieces. `[UNK]` words count as a
/// single piece. With `exclude_punct`, words without any alphanumeric
/// character are skipped.
pub fn continued_word_fraction<S: AsRef<str>>(
    corpus: &[S],
    vocab: &Vocabulary,
    exclude_punct: bool,
) -> Result<f64> {
    let mut words = 0usize;
    let mut continued = 0usize;
    for sentence in corpus {
        for w in pre_tokenize(sentence.as_ref()) {
            if exclude_punct && !w.chars().any(char::is_alphanumeric) {
                continue;
            }
            words += 1;
            if wordpiece_ids(&w, vocab).len() >= 2 {
                continued += 1;
            }
        }
    }
    if words == 0 {
        return Err(Error::Data("corpus contains no words".into()));
    }
    Ok(continued as f64 / words as f64)
}

/// Continued-word fractions of two tokenizers on a general and a specific
/// corpus, with deltas `b - a`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub general_a: f64,
    pub general_b: f64,
    pub specific_a: f64,
    pub specific_b: f64,
    pub delta_general: f64,
    pub delta_specific: f64,
}

pub fn tokenizer_gap_report<S: AsRef<str>>(
    vocab_a: &Vocabulary,
    vocab_b: &Vocabulary,
    general: &[S],
    specific: &[S],
    exclude_punct: bool,
) -> Result<GapReport> {
    let general_a = continued_word_fraction(general, vocab_a, exclude_punct)?;
    let general_b = continued_word_fraction(general, vocab_b, exclude_punct)?;
    let specific_a = continued_word_fraction(specific, vocab_a, exclude_punct)?;
    let specific_b = continued_word_fraction(specific, vocab_b, exclude_punct)?;
    Ok(GapReport {
        general_a,
        general_b,
        specific_a,
        specific_b,
        delta_general: general_b - general_a,
        delta_specific: specific_b - specific_a,
    })
}

impl GapReport {
    pub fn to_table(&self) -> String {
        format!(
            "{:<10} {:>10} {:>10} {:>10}\n{:<10} {:>10.4} {:>10.4} {:>+10.4}\n{:<10} {:>10.4} {:>10.4} {:>+10.4}\n",
            "corpus", "vocab_a", "vocab_b", "delta",
            "general", self.general_a, self.general_b, self.delta_general,
            "specific", self.specific_a, self.specific_b, self.delta_specific,
        )
    }
}

/// Builds a vocabulary of at most `size` tokens from a corpus.
///
/// Contains the specials, every character of the corpus alone and in
/// continuation form, then the most frequent word prefixes (whole words
/// included) and continuation substrings of length two or more. Ties break
/// toward longer, then lexicographically smaller strings.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], size: usize) -> Result<Vocabulary> {
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    for s in corpus {
        for w in pre_tokenize(s.as_ref()) {
            *word_counts.entry(w).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let alphabet: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    let minimum = NUM_SPECIALS + 2 * alphabet.len();
    if size < minimum {
        return Err(Error::Config(format!(
            "vocabulary size {size} too small: need at least {minimum} for {} characters",
            alphabet.len()
        )));
    }

    let mut tokens: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
    tokens.extend(alphabet.iter().map(|c| format!("##{c}")));

    let mut candidates: HashMap<String, u64> = HashMap::new();
    for (w, &n) in &word_counts {
        let bounds: Vec<usize> = w.char_indices().map(|(i, _)| i).chain([w.len()]).collect();
        let chars = bounds.len() - 1;
        for end in 2..=chars {
            *candidates.entry(w[..bounds[end]].to_owned()).or_insert(0) += n;
        }
        for start in 1..chars {
            for end in start + 2..=chars {
                let piece = format!("##{}", &w[bounds[start]..bounds[end]]);
                *candidates.entry(piece).or_insert(0) += n;
            }
        }
    }
    let mut ranked: Vec<(String, u64)> = candidates.into_iter().collect();
    ranked.sort_by(|(a, na), (b, nb)| {
        nb.cmp(na)
            .then_with(|| b.chars().count().cmp(&a.chars().count()))
            .then_with(|| a.cmp(b))
    });
    let room = size - minimum;
    tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
    Vocabulary::from_tokens(tokens)
}
