//! Downstream dataset formats: CoNLL-style BIO files, JSON-lines
//! classification files, and retrieval sentence files with a TSV alignment.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::parse_tag;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerSentence {
    pub words: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdSentence {
    pub id: String,
    pub text: String,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// `token<TAB>tag` per line, blank line between sentences.
pub fn read_conll(path: impl AsRef<Path>) -> Result<Vec<NerSentence>> {
    let path = path.as_ref();
    parse_conll(&read(path)?, path)
}

pub fn parse_conll(text: &str, path: &Path) -> Result<Vec<NerSentence>> {
    let mut out = Vec::new();
    let mut cur = NerSentence {
        words: Vec::new(),
        tags: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !cur.words.is_empty() {
                out.push(std::mem::replace(
                    &mut cur,
                    NerSentence {
                        words: Vec::new(),
                        tags: Vec::new(),
                    },
                ));
            }
            continue;
        }
        let (word, tag) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, i + 1, "expected `token<TAB>tag`"))?;
        let tag = tag.trim();
        if word.is_empty() {
            return Err(parse_err(path, i + 1, "empty token"));
        }
        parse_tag(tag).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        cur.words.push(word.to_owned());
        cur.tags.push(tag.to_owned());
    }
    if !cur.words.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

pub fn write_conll(path: impl AsRef<Path>, sentences: &[NerSentence]) -> Result<()> {
    let mut s = String::new();
    for sent in sentences {
        for (w, t) in sent.words.iter().zip(&sent.tags) {
            let _ = writeln!(s, "{w}\t{t}");
        }
        s.push('\n');
    }
    write(path.as_ref(), &s)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(path, i + 1, e.to_string())))
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("serializable"));
        s.push('\n');
    }
    write(path, &s)
}

/// JSON lines of `{text, label}`.
pub fn read_classification(path: impl AsRef<Path>) -> Result<Vec<LabeledSentence>> {
    read_jsonl(path.as_ref())
}

pub fn write_classification(path: impl AsRef<Path>, items: &[LabeledSentence]) -> Result<()> {
    write_jsonl(path.as_ref(), items)
}

/// JSON lines of `{id, text}`.
pub fn read_id_sentences(path: impl AsRef<Path>) -> Result<Vec<IdSentence>> {
    let path = path.as_ref();
    let items: Vec<IdSentence> = read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    for it in &items {
        if !seen.insert(it.id.as_str()) {
            return Err(Error::Data(format!("{}: duplicate id `{}`", path.display(), it.id)));
        }
    }
    Ok(items)
}

pub fn write_id_sentences(path: impl AsRef<Path>, items: &[IdSentence]) -> Result<()> {
    write_jsonl(path.as_ref(), items)
}

/// `src_id<TAB>tgt_id` per line.
pub fn read_alignment(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (a, b) = l
                .trim_end_matches('\r')
                .split_once('\t')
                .ok_or_else(|| parse_err(path, i + 1, "expected `src_id<TAB>tgt_id`"))?;
            Ok((a.to_owned(), b.to_owned()))
        })
        .collect()
}

pub fn write_alignment(path: impl AsRef<Path>, pairs: &[(String, String)]) -> Result<()> {
    let mut s = String::new();
    for (a, b) in pairs {
        let _ = writeln!(s, "{a}\t{b}");
    }
    write(path.as_ref(), &s)
}
