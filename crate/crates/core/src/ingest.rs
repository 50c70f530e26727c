//! Corpus ingestion: JSON-lines readers, sentence filtering, cross-language
//! document deduplication and per-language statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{pre_tokenize, wordpiece, Vocabulary};

static TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<[^>]*>").unwrap());
static LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{L}").unwrap());

/// One sentence of pretraining text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub text: String,
    pub lang: String,
    pub source: String,
    pub doc_id: String,
    pub sent_id: u64,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    text: String,
    doc_id: String,
    #[serde(default)]
    lang: Option<String>,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    sent_id: Option<u64>,
}

/// Streaming reader over a JSON-lines corpus file.
///
/// Malformed lines surface as `Err(Error::Parse)` items carrying the 1-based
/// line number; iteration continues past them. Records without a `sent_id`
/// key are numbered sequentially within their `doc_id`.
pub struct CorpusReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    default_lang: Option<String>,
    default_source: String,
    next_sent: HashMap<String, u64>,
}

impl CorpusReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            default_source: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            path,
            lines: BufReader::new(file).lines(),
            line_no: 0,
            default_lang: None,
            next_sent: HashMap::new(),
        })
    }

    /// Language and source used for records that omit those keys.
    pub fn with_defaults(mut self, lang: Option<&str>, source: &str) -> Self {
        self.default_lang = lang.map(str::to_owned);
        self.default_source = source.to_owned();
        self
    }

    fn parse(&mut self, line: &str) -> Result<SentenceRecord> {
        let err = |message: String| Error::Parse {
            path: self.path.clone(),
            line: self.line_no,
            message,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let lang = raw
            .lang
            .or_else(|| self.default_lang.clone())
            .ok_or_else(|| err("missing `lang` and no default language given".into()))?;
        let counter = self.next_sent.entry(raw.doc_id.clone()).or_insert(0);
        let sent_id = raw.sent_id.unwrap_or(*counter);
        *counter = sent_id + 1;
        Ok(SentenceRecord {
            text: raw.text,
            lang,
            source: raw.source.unwrap_or_else(|| self.default_source.clone()),
            doc_id: raw.doc_id,
            sent_id,
        })
    }
}

impl Iterator for CorpusReader {
    type Item = Result<SentenceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(self.parse(&line));
        }
    }
}

/// Opens `path` and streams its records, defaulting missing `lang`/`source`.
pub fn read_corpus(path: impl AsRef<Path>, lang: Option<&str>, source: &str) -> Result<CorpusReader> {
    Ok(CorpusReader::open(path)?.with_defaults(lang, source))
}

/// Reads a whole corpus, splitting good records from per-line parse errors.
pub fn read_corpus_lenient(
    path: impl AsRef<Path>,
    lang: Option<&str>,
    source: &str,
) -> Result<(Vec<SentenceRecord>, Vec<Error>)> {
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for item in read_corpus(path, lang, source)? {
        match item {
            Ok(r) => good.push(r),
            Err(e @ Error::Parse { .. }) => bad.push(e),
            Err(e) => return Err(e),
        }
    }
    Ok((good, bad))
}

/// Writes records as JSON lines.
pub fn write_corpus(path: impl AsRef<Path>, records: &[SentenceRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Result of [`filter_sentence`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Filtered {
    pub accepted: bool,
    pub text: String,
}

/// Strips `<...>` markup, collapses whitespace and rejects sentences without
/// any Unicode letter.
pub fn filter_sentence(text: &str) -> Filtered {
    let stripped = TAG.replace_all(text, "");
    let cleaned = stripped.split_whitespace().collect::<Vec<_>>().join(" ");
    let accepted = !cleaned.is_empty() && LETTER.is_match(&cleaned);
    Filtered {
        accepted,
        text: cleaned,
    }
}

/// Applies [`filter_sentence`] to every record, keeping accepted ones with
/// their cleaned text.
pub fn filter_records(records: impl IntoIterator<Item = SentenceRecord>) -> Vec<SentenceRecord> {
    records
        .into_iter()
        .filter_map(|mut r| {
            let f = filter_sentence(&r.text);
            f.accepted.then(|| {
                r.text = f.text;
                r
            })
        })
        .collect()
}

/// Keeps, for every `doc_id`, only the sentences of the first language it
/// was seen under.
pub fn dedup_documents(records: impl IntoIterator<Item = SentenceRecord>) -> Vec<SentenceRecord> {
    let mut owner: HashMap<String, String> = HashMap::new();
    records
        .into_iter()
        .filter(|r| {
            let lang = owner.entry(r.doc_id.clone()).or_insert_with(|| r.lang.clone());
            *lang == r.lang
        })
        .collect()
}

/// Per-language sentence and subtoken counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: BTreeMap<String, u64>,
    pub tokens: BTreeMap<String, u64>,
}

impl CorpusStats {
    pub fn total_sentences(&self) -> u64 {
        self.sentences.values().sum()
    }

    pub fn total_tokens(&self) -> u64 {
        self.tokens.values().sum()
    }
}

/// Counts sentences and subtokens (specials excluded) per language.
///
/// Every registered language gets a row, even with zero counts.
pub fn corpus_stats<'a>(
    records: impl IntoIterator<Item = &'a SentenceRecord>,
    vocab: &Vocabulary,
    languages: &BTreeSet<String>,
) -> Result<CorpusStats> {
    let mut stats = CorpusStats::default();
    for lang in languages {
        stats.sentences.insert(lang.clone(), 0);
        stats.tokens.insert(lang.clone(), 0);
    }
    for r in records {
        if !languages.contains(&r.lang) {
            return Err(Error::UnregisteredLanguage(r.lang.clone()));
        }
        let n: usize = pre_tokenize(&r.text)
            .iter()
            .map(|w| wordpiece(w, vocab).len())
            .sum();
        *stats.sentences.get_mut(&r.lang).unwrap() += 1;
        *stats.tokens.get_mut(&r.lang).unwrap() += n as u64;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn rec(text: &str, lang: &str, doc: &str, sent: u64) -> SentenceRecord {
        SentenceRecord {
            text: text.into(),
            lang: lang.into(),
            source: "t".into(),
            doc_id: doc.into(),
            sent_id: sent,
        }
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_lines_numbered_in_order() {
        let f = write_tmp(
            r#"{"text":"a b","doc_id":"d1"}
{"text":"c d","doc_id":"d1"}
{"text":"e f","doc_id":"d1"}
"#,
        );
        let recs: Vec<_> = read_corpus(f.path(), Some("en"), "pubmed")
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(recs.iter().map(|r| r.sent_id).collect::<Vec<_>>(), [0, 1, 2]);
        assert!(recs.iter().all(|r| r.lang == "en" && r.source == "pubmed"));
        assert_eq!(recs[1].text, "c d");
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let f = write_tmp("");
        assert_eq!(read_corpus(f.path(), Some("en"), "x").unwrap().count(), 0);
    }

    #[test]
    fn malformed_line_reported_with_line_number() {
        let f = write_tmp(
            r#"{"text":"one","doc_id":"a","lang":"en"}
{"text":"two","doc_id":"a","lang":"en"}
{"text": broken
{"text":"four","doc_id":"b","lang":"de"}
{"text":"five","doc_id":"b","lang":"de"}
"#,
        );
        let (good, bad) = read_corpus_lenient(f.path(), None, "x").unwrap();
        assert_eq!(good.len(), 4);
        assert_eq!(bad.len(), 1);
        match &bad[0] {
            Error::Parse { line, .. } => assert_eq!(*line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_file_is_fatal() {
        assert!(matches!(
            read_corpus("/nonexistent/corpus.jsonl", None, "x"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn filter_examples() {
        assert!(!filter_sentence("1234 %%").accepted);
        let f = filter_sentence("<b>Profit rose</b>");
        assert!(f.accepted);
        assert_eq!(f.text, "Profit rose");
        assert!(!filter_sentence("").accepted);
        assert!(!filter_sentence("<p> </p>").accepted);
        // Non-Latin scripts count as letters.
        assert!(filter_sentence("利润上升").accepted);
        assert!(filter_sentence("Прибыль 5%").accepted);
    }

    #[test]
    fn filter_records_keeps_cleaned_text() {
        let out = filter_records(vec![rec("<i>x</i>  y", "en", "d", 0), rec("42", "en", "d", 1)]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "x y");
    }

    #[test]
    fn dedup_keeps_first_language() {
        let out = dedup_documents(vec![
            rec("a", "en", "p1", 0),
            rec("b", "en", "p1", 1),
            rec("c", "de", "p1", 0),
        ]);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|r| r.lang == "en"));
    }

    #[test]
    fn dedup_distinct_docs_is_identity() {
        let input = vec![rec("a", "en", "p1", 0), rec("b", "de", "p2", 0), rec("c", "fr", "p3", 0)];
        assert_eq!(dedup_documents(input.clone()), input);
    }

    #[test]
    fn dedup_triplicated_document() {
        let input = vec![
            rec("a", "en", "A", 0),
            rec("b", "en", "B", 0),
            rec("b2", "de", "B", 0),
            rec("b3", "fr", "B", 0),
            rec("c", "fr", "C", 0),
        ];
        let out = dedup_documents(input);
        let docs: BTreeSet<_> = out.iter().map(|r| r.doc_id.clone()).collect();
        assert_eq!(docs.len(), 3);
        assert_eq!(out.len(), 3);
    }

    fn fixture_vocab() -> Vocabulary {
        Vocabulary::from_tokens(
            ["the", "drug", "##s", "work", "##ed", "well", "das", "mittel"]
                .iter()
                .map(|s| s.to_string()),
        )
        .unwrap()
    }

    fn langs(l: &[&str]) -> BTreeSet<String> {
        l.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn stats_empty_input() {
        let s = corpus_stats(&[], &fixture_vocab(), &langs(&["en"])).unwrap();
        assert_eq!(s.total_sentences(), 0);
        assert_eq!(s.total_tokens(), 0);
    }

    #[test]
    fn stats_counts_subtokens() {
        // "the drugs" -> the drug ##s (3); "the drug worked" -> the drug work ##ed (4)
        let recs = vec![rec("the drugs", "en", "a", 0), rec("the drug worked", "en", "a", 1)];
        let s = corpus_stats(&recs, &fixture_vocab(), &langs(&["en"])).unwrap();
        assert_eq!(s.sentences["en"], 2);
        assert_eq!(s.tokens["en"], 7);
    }

    #[test]
    fn stats_partition_and_unregistered() {
        let recs = vec![rec("the drug", "en", "a", 0), rec("das mittel", "de", "b", 0)];
        let s = corpus_stats(&recs, &fixture_vocab(), &langs(&["en", "de"])).unwrap();
        assert_eq!(s.total_sentences(), 2);
        assert_eq!(s.total_tokens(), s.tokens["en"] + s.tokens["de"]);
        assert!(matches!(
            corpus_stats(&recs, &fixture_vocab(), &langs(&["en"])),
            Err(Error::UnregisteredLanguage(l)) if l == "de"
        ));
    }

    proptest::proptest! {
        #[test]
        fn filter_is_idempotent(s in "[a-z<>/ 0-9%\\p{Cyrillic}]{0,40}") {
            let once = filter_sentence(&s);
            if once.accepted {
                let twice = filter_sentence(&once.text);
                proptest::prop_assert!(twice.accepted);
                proptest::prop_assert_eq!(twice.text, once.text);
            }
        }

        #[test]
        fn dedup_one_language_per_doc(
            docs in proptest::collection::vec((0u8..6, 0u8..3), 0..40)
        ) {
            let l = ["en", "de", "fr"];
            let input: Vec<_> = docs.iter().enumerate()
                .map(|(i, (d, lg))| rec("x", l[*lg as usize], &format!("d{d}"), i as u64))
                .collect();
            let out = dedup_documents(input);
            let mut seen: HashMap<String, String> = HashMap::new();
            for r in &out {
                let e = seen.entry(r.doc_id.clone()).or_insert(r.lang.clone());
                proptest::prop_assert_eq!(e.as_str(), r.lang.as_str());
            }
        }

        #[test]
        fn stats_invariant_under_reordering(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut recs = vec![
                rec("the drugs worked", "en", "a", 0),
                rec("well", "en", "a", 1),
                rec("das mittel", "de", "b", 0),
                rec("the mittel drug", "de", "b", 1),
            ];
            let v = fixture_vocab();
            let l = langs(&["en", "de"]);
            let before = corpus_stats(&recs, &v, &l).unwrap();
            recs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            proptest::prop_assert_eq!(before, corpus_stats(&recs, &v, &l).unwrap());
        }
    }
}
