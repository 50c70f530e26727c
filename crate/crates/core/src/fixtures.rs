//! Synthetic multilingual corpora for desk-scale runs.
//!
//! Every language renders the same concept inventory with its own surface
//! words. Concepts come in topics of four; each topic has a shared,
//! language-neutral anchor word, and domain concepts also have a shared
//! international form that occasionally replaces the local word. Two
//! domains (`bio`, `fin`) have disjoint concept sets on top of the general
//! concepts, so pretraining on one domain tells the model nothing about the
//! other domain's words.
//!
//! Layout of a fixture directory:
//!
//! ```text
//! spec.json  vocab.txt
//! pools/general-multilingual.jsonl
//! pools/{bio,fin}/domain-multilingual.jsonl
//! pools/{bio,fin}/domain-english.jsonl
//! heldout/{bio,fin}.jsonl
//! ner/{bio,fin}/{train,dev,test}.conll
//! clf/{bio,fin}.jsonl
//! retrieval/source.jsonl  retrieval/target.jsonl  retrieval/gold.tsv
//! ```

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compose::{stage_rng, ENGLISH};
use crate::datasets::{write_alignment, write_classification, write_conll, write_id_sentences, IdSentence, LabeledSentence, NerSentence};
use crate::error::{Error, Result};
use crate::ingest::{write_corpus, SentenceRecord};
use crate::tokenizer::{Vocabulary, SPECIALS};

const LANGUAGE_CODES: [&str; 10] = ["en", "de", "fr", "es", "it", "pt", "nl", "da", "sv", "ro"];
pub const DOMAINS: [&str; 2] = ["bio", "fin"];
const TOPIC_SIZE: usize = 4;
const FUNCTION_WORDS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_languages: usize,
    /// General concepts rendered in every language.
    pub general_concepts: usize,
    /// Size of each domain's marker sub-vocabulary (concepts per domain).
    pub domain_concepts: usize,
    /// Domain sentences for the largest language slice; later languages get
    /// progressively fewer.
    pub sentences_per_language_domain: usize,
    pub english_domain_sentences: usize,
    pub general_sentences_per_language: usize,
    pub heldout_sentences: usize,
    pub ner_train: usize,
    pub ner_dev: usize,
    pub ner_test: usize,
    pub clf_sentences: usize,
    pub parallel_pairs: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_languages: 3,
            general_concepts: 48,
            domain_concepts: 32,
            sentences_per_language_domain: 400,
            english_domain_sentences: 800,
            general_sentences_per_language: 600,
            heldout_sentences: 200,
            ner_train: 300,
            ner_dev: 100,
            ner_test: 150,
            clf_sentences: 300,
            parallel_pairs: 200,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=LANGUAGE_CODES.len()).contains(&self.num_languages) {
            return Err(Error::Config(format!(
                "num_languages must lie in 2..={}",
                LANGUAGE_CODES.len()
            )));
        }
        for (name, v) in [("general_concepts", self.general_concepts), ("domain_concepts", self.domain_concepts)] {
            if v < 2 * TOPIC_SIZE || v % TOPIC_SIZE != 0 {
                return Err(Error::Config(format!("{name} must be a positive multiple of {TOPIC_SIZE}, at least {}", 2 * TOPIC_SIZE)));
            }
        }
        if self.sentences_per_language_domain == 0 || self.general_sentences_per_language == 0 {
            return Err(Error::Config("sentence counts must be positive".into()));
        }
        Ok(())
    }

    pub fn languages(&self) -> Vec<String> {
        LANGUAGE_CODES[..self.num_languages].iter().map(|s| s.to_string()).collect()
    }
}

/// Entity classes of each domain's tagging task; topic `t` has class `t % 2`.
pub fn entity_classes(domain: &str) -> [&'static str; 2] {
    match domain {
        "bio" => ["CHEM", "DIS"],
        _ => ["ORG", "PROD"],
    }
}

/// Sentence labels of each domain's classification task.
pub fn sentence_classes(domain: &str) -> [&'static str; 2] {
    match domain {
        "bio" => ["clinical", "molecular"],
        _ => ["positive", "negative"],
    }
}

/// Surface inventory of a fixture.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub languages: Vec<String>,
    /// `general[l][c]`
    pub general: Vec<Vec<String>>,
    /// `domain[d][l][c]`
    pub domain: Vec<Vec<Vec<String>>>,
    /// `international[d][c]`
    pub international: Vec<Vec<String>>,
    pub general_anchors: Vec<String>,
    /// `domain_anchors[d][topic]`
    pub domain_anchors: Vec<Vec<String>>,
    /// `function[l][i]`
    pub function: Vec<Vec<String>>,
}

struct WordMaker {
    used: HashSet<String>,
}

impl WordMaker {
    fn make(&mut self, rng: &mut ChaCha8Rng, onsets: &[&str], vowels: &[&str], syllables: (usize, usize), upper: bool) -> String {
        loop {
            let n = rng.random_range(syllables.0..=syllables.1);
            let mut w = String::new();
            for _ in 0..n {
                w.push_str(onsets.choose(rng).unwrap());
                w.push_str(vowels.choose(rng).unwrap());
            }
            if upper {
                w = w.to_uppercase();
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

impl Lexicon {
    pub fn generate(spec: &SyntheticSpec) -> Self {
        let mut rng = stage_rng(spec.seed, "lexicon");
        let mut maker = WordMaker { used: HashSet::new() };
        let languages = spec.languages();
        // Language-specific letter inventories keep surface forms apart.
        let inventories: Vec<(Vec<&str>, Vec<&str>)> = vec![
            (vec!["b", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "w"], vec!["a", "e", "i", "o", "u", "ea", "ou"]),
            (vec!["b", "d", "g", "k", "l", "m", "n", "r", "s", "t", "z", "sch"], vec!["a", "e", "i", "o", "u", "ei", "au"]),
            (vec!["b", "c", "d", "f", "l", "m", "n", "p", "r", "s", "t", "v"], vec!["a", "e", "i", "o", "ou", "é", "eau"]),
            (vec!["b", "c", "d", "j", "l", "m", "n", "ñ", "r", "s", "t", "v"], vec!["a", "e", "i", "o", "u", "ue", "ia"]),
            (vec!["b", "c", "d", "g", "l", "m", "n", "p", "r", "s", "t", "v"], vec!["a", "e", "i", "o", "io", "ie"]),
            (vec!["b", "c", "d", "j", "l", "m", "n", "p", "r", "s", "t", "v"], vec!["a", "e", "i", "o", "ã", "õe"]),
            (vec!["b", "d", "g", "k", "l", "m", "n", "r", "s", "t", "v", "z"], vec!["a", "e", "i", "o", "aa", "oe", "ij"]),
            (vec!["b", "d", "f", "g", "k", "l", "m", "n", "r", "s", "t", "v"], vec!["a", "e", "i", "o", "æ", "ø", "å"]),
            (vec!["b", "d", "f", "g", "k", "l", "m", "n", "r", "s", "t", "v"], vec!["a", "e", "i", "o", "ä", "ö", "y"]),
            (vec!["b", "c", "d", "f", "l", "m", "n", "p", "r", "s", "ș", "ț"], vec!["a", "e", "i", "o", "ă", "â"]),
        ];
        let shared_onsets = ["k", "x", "z", "q", "v", "j"];
        let shared_vowels = ["a", "o", "y", "e"];

        let mut general = Vec::new();
        let mut function = Vec::new();
        for (li, _) in languages.iter().enumerate() {
            let (on, vo) = &inventories[li];
            general.push((0..spec.general_concepts).map(|_| maker.make(&mut rng, on, vo, (2, 3), false)).collect());
            function.push((0..FUNCTION_WORDS).map(|_| maker.make(&mut rng, on, vo, (1, 1), false)).collect());
        }
        let mut domain = Vec::new();
        let mut international = Vec::new();
        let mut domain_anchors = Vec::new();
        for _ in DOMAINS {
            let mut per_lang = Vec::new();
            for (li, _) in languages.iter().enumerate() {
                let (on, vo) = &inventories[li];
                per_lang.push((0..spec.domain_concepts).map(|_| maker.make(&mut rng, on, vo, (3, 4), false)).collect());
            }
            domain.push(per_lang);
            international.push(
                (0..spec.domain_concepts)
                    .map(|_| maker.make(&mut rng, &shared_onsets, &shared_vowels, (3, 3), false))
                    .collect(),
            );
            domain_anchors.push(
                (0..spec.domain_concepts / TOPIC_SIZE)
                    .map(|_| maker.make(&mut rng, &shared_onsets, &shared_vowels, (2, 2), true))
                    .collect(),
            );
        }
        let general_anchors = (0..spec.general_concepts / TOPIC_SIZE)
            .map(|_| maker.make(&mut rng, &shared_onsets, &shared_vowels, (3, 3), true))
            .collect();
        Self {
            languages,
            general,
            domain,
            international,
            general_anchors,
            domain_anchors,
            function,
        }
    }

    fn all_words(&self) -> impl Iterator<Item = &String> {
        self.general
            .iter()
            .flatten()
            .chain(self.function.iter().flatten())
            .chain(self.domain.iter().flatten().flatten())
            .chain(self.international.iter().flatten())
            .chain(&self.general_anchors)
            .chain(self.domain_anchors.iter().flatten())
    }

    /// Every surface word as a whole token, plus single characters and their
    /// continuation forms.
    pub fn vocabulary(&self) -> Vocabulary {
        let words: BTreeSet<&str> = self.all_words().map(String::as_str).collect();
        let chars: BTreeSet<char> = words.iter().flat_map(|w| w.chars()).collect();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(chars.iter().map(|c| c.to_string()));
        tokens.extend(chars.iter().map(|c| format!("##{c}")));
        tokens.extend(words.iter().filter(|w| w.chars().count() > 1).map(|w| w.to_string()));
        Vocabulary::from_tokens(tokens).expect("fixture vocabulary is valid")
    }

    fn topics(&self, concepts: usize) -> usize {
        concepts / TOPIC_SIZE
    }
}

struct Gen<'a> {
    lex: &'a Lexicon,
    spec: &'a SyntheticSpec,
}

impl Gen<'_> {
    fn general_words(&self, rng: &mut ChaCha8Rng, li: usize, n: usize, topic: Option<usize>) -> Vec<String> {
        let topics = self.lex.topics(self.spec.general_concepts);
        let t = topic.unwrap_or_else(|| rng.random_range(0..topics));
        (0..n)
            .map(|_| self.lex.general[li][t * TOPIC_SIZE + rng.random_range(0..TOPIC_SIZE)].clone())
            .collect()
    }

    fn function_words(&self, rng: &mut ChaCha8Rng, li: usize, n: usize) -> Vec<String> {
        (0..n).map(|_| self.lex.function[li].choose(rng).unwrap().clone()).collect()
    }

    /// Domain pretraining sentence: topic concepts (sometimes in their
    /// international form), the topic anchor, general filler.
    fn domain_sentence(&self, rng: &mut ChaCha8Rng, d: usize, li: usize) -> String {
        let topics = self.lex.topics(self.spec.domain_concepts);
        let t = rng.random_range(0..topics);
        let mut words = Vec::new();
        for _ in 0..rng.random_range(2..=4) {
            let c = t * TOPIC_SIZE + rng.random_range(0..TOPIC_SIZE);
            if rng.random::<f64>() < 0.15 {
                words.push(self.lex.international[d][c].clone());
            } else {
                words.push(self.lex.domain[d][li][c].clone());
            }
        }
        if rng.random::<f64>() < 0.7 {
            words.push(self.lex.domain_anchors[d][t].clone());
        }
        let k = rng.random_range(1..=3);
        words.extend(self.general_words(rng, li, k, None));
        let k = rng.random_range(1..=2);
        words.extend(self.function_words(rng, li, k));
        words.shuffle(rng);
        words.join(" ")
    }

    fn general_sentence(&self, rng: &mut ChaCha8Rng, li: usize) -> String {
        let topics = self.lex.topics(self.spec.general_concepts);
        let t = rng.random_range(0..topics);
        let k = rng.random_range(3..=5);
        let mut words = self.general_words(rng, li, k, Some(t));
        if rng.random::<f64>() < 0.7 {
            words.push(self.lex.general_anchors[t].clone());
        }
        let k = rng.random_range(1..=2);
        words.extend(self.function_words(rng, li, k));
        words.shuffle(rng);
        words.join(" ")
    }

    /// Tagged sentence: general filler with one or two entity spans of one
    /// or two domain words; `unseen` concepts are only used when `allow_unseen`.
    fn ner_sentence(&self, rng: &mut ChaCha8Rng, d: usize, li: usize, allow_unseen: bool) -> NerSentence {
        let classes = entity_classes(DOMAINS[d]);
        let topics = self.lex.topics(self.spec.domain_concepts);
        let k = rng.random_range(4..=8);
        let mut items: Vec<Vec<(String, String)>> = self
            .general_words(rng, li, k, None)
            .into_iter()
            .chain(self.function_words(rng, li, 2))
            .map(|w| vec![(w, "O".to_owned())])
            .collect();
        for _ in 0..rng.random_range(1..=2) {
            let t = rng.random_range(0..topics);
            let class = classes[t % 2];
            let len = rng.random_range(1..=2);
            let span: Vec<(String, String)> = (0..len)
                .map(|i| {
                    let slot = if allow_unseen && rng.random::<f64>() < 0.5 {
                        TOPIC_SIZE - 1
                    } else {
                        rng.random_range(0..TOPIC_SIZE - 1)
                    };
                    let w = self.lex.domain[d][li][t * TOPIC_SIZE + slot].clone();
                    (w, format!("{}-{class}", if i == 0 { "B" } else { "I" }))
                })
                .collect();
            items.push(span);
        }
        items.shuffle(rng);
        let (words, tags) = items.into_iter().flatten().unzip();
        NerSentence { words, tags }
    }

    fn clf_sentence(&self, rng: &mut ChaCha8Rng, d: usize, li: usize) -> LabeledSentence {
        let topics = self.lex.topics(self.spec.domain_concepts);
        let t = rng.random_range(0..topics);
        let mut words: Vec<String> = (0..rng.random_range(1..=3))
            .map(|_| self.lex.domain[d][li][t * TOPIC_SIZE + rng.random_range(0..TOPIC_SIZE)].clone())
            .collect();
        let k = rng.random_range(3..=6);
        words.extend(self.general_words(rng, li, k, None));
        words.extend(self.function_words(rng, li, 2));
        words.shuffle(rng);
        LabeledSentence {
            text: words.join(" "),
            label: sentence_classes(DOMAINS[d])[t % 2].to_owned(),
        }
    }

    /// A concept sequence rendered in two languages, without anchors or
    /// international forms.
    fn parallel_pair(&self, rng: &mut ChaCha8Rng, src: usize, tgt: usize) -> (String, String) {
        let topics = self.lex.topics(self.spec.domain_concepts);
        let gtopics = self.lex.topics(self.spec.general_concepts);
        let t = rng.random_range(0..topics);
        let g = rng.random_range(0..gtopics);
        let mut concepts: Vec<(bool, usize)> = Vec::new();
        for _ in 0..rng.random_range(2..=3) {
            concepts.push((true, t * TOPIC_SIZE + rng.random_range(0..TOPIC_SIZE)));
        }
        for _ in 0..rng.random_range(2..=3) {
            concepts.push((false, g * TOPIC_SIZE + rng.random_range(0..TOPIC_SIZE)));
        }
        concepts.shuffle(rng);
        let render = |li: usize| {
            concepts
                .iter()
                .map(|&(dom, c)| if dom { self.lex.domain[0][li][c].as_str() } else { self.lex.general[li][c].as_str() })
                .collect::<Vec<_>>()
                .join(" ")
        };
        (render(src), render(tgt))
    }
}

fn records(lang: &str, source: &str, prefix: &str, texts: Vec<String>) -> Vec<SentenceRecord> {
    texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| SentenceRecord {
            text,
            lang: lang.to_owned(),
            source: source.to_owned(),
            doc_id: format!("{prefix}-{lang}-{:05}", i / 3),
            sent_id: (i % 3) as u64,
        })
        .collect()
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a complete fixture directory; identical specs give identical files.
pub fn generate_fixtures(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    let lex = Lexicon::generate(spec);
    let g = Gen { lex: &lex, spec };
    let langs = lex.languages.clone();
    let en = langs.iter().position(|l| l == ENGLISH).expect("English is always present");
    for dir in ["pools/bio", "pools/fin", "heldout", "ner/bio", "ner/fin", "clf", "retrieval"] {
        mkdir(&out.join(dir))?;
    }
    std::fs::write(out.join("spec.json"), serde_json::to_string_pretty(spec).expect("serializable") + "\n")
        .map_err(|e| Error::io(out.join("spec.json"), e))?;
    lex.vocabulary().save(out.join("vocab.txt"))?;

    let mut general = Vec::new();
    for (li, l) in langs.iter().enumerate() {
        let mut rng = stage_rng(spec.seed, &format!("general/{l}"));
        let texts = (0..spec.general_sentences_per_language).map(|_| g.general_sentence(&mut rng, li)).collect();
        general.extend(records(l, "wiki-sim", "wiki", texts));
    }
    write_corpus(out.join("pools/general-multilingual.jsonl"), &general)?;

    let n = langs.len();
    for (d, dom) in DOMAINS.iter().enumerate() {
        let mut md = Vec::new();
        for (li, l) in langs.iter().enumerate() {
            // Unequal slices: the first non-English language is largest.
            let rank = if li == en { n - 1 } else { li - 1 };
            let count = spec.sentences_per_language_domain * (n - rank) / n;
            let mut rng = stage_rng(spec.seed, &format!("{dom}/md/{l}"));
            let texts = (0..count).map(|_| g.domain_sentence(&mut rng, d, li)).collect();
            md.extend(records(l, &format!("{dom}-ml-sim"), &format!("{dom}-md"), texts));
        }
        write_corpus(out.join(format!("pools/{dom}/domain-multilingual.jsonl")), &md)?;

        let mut rng = stage_rng(spec.seed, &format!("{dom}/ed"));
        let texts = (0..spec.english_domain_sentences).map(|_| g.domain_sentence(&mut rng, d, en)).collect();
        write_corpus(
            out.join(format!("pools/{dom}/domain-english.jsonl")),
            &records(ENGLISH, &format!("{dom}-en-sim"), &format!("{dom}-ed"), texts),
        )?;

        let mut rng = stage_rng(spec.seed, &format!("{dom}/heldout"));
        let held: Vec<SentenceRecord> = (0..spec.heldout_sentences)
            .map(|i| {
                let li = i % n;
                let text = g.domain_sentence(&mut rng, d, li);
                records(&langs[li], &format!("{dom}-heldout"), &format!("{dom}-ho{i}"), vec![text]).remove(0)
            })
            .collect();
        write_corpus(out.join(format!("heldout/{dom}.jsonl")), &held)?;

        let mut rng = stage_rng(spec.seed, &format!("{dom}/ner"));
        for (split, count, unseen) in [("train", spec.ner_train, false), ("dev", spec.ner_dev, true), ("test", spec.ner_test, true)] {
            let sents: Vec<NerSentence> = (0..count).map(|i| g.ner_sentence(&mut rng, d, i % n, unseen)).collect();
            write_conll(out.join(format!("ner/{dom}/{split}.conll")), &sents)?;
        }

        let mut rng = stage_rng(spec.seed, &format!("{dom}/clf"));
        let items: Vec<LabeledSentence> = (0..spec.clf_sentences).map(|i| g.clf_sentence(&mut rng, d, i % n)).collect();
        write_classification(out.join(format!("clf/{dom}.jsonl")), &items)?;
    }

    let mut rng = stage_rng(spec.seed, "retrieval");
    let others: Vec<usize> = (0..n).filter(|&i| i != en).collect();
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    let mut gold = Vec::new();
    for i in 0..spec.parallel_pairs {
        let li = others[i % others.len()];
        let (s, t) = g.parallel_pair(&mut rng, li, en);
        let sid = format!("{}-{i:05}", langs[li]);
        let tid = format!("en-{i:05}");
        src.push(IdSentence { id: sid.clone(), text: s });
        tgt.push(IdSentence { id: tid.clone(), text: t });
        gold.push((sid, tid));
    }
    write_id_sentences(out.join("retrieval/source.jsonl"), &src)?;
    write_id_sentences(out.join("retrieval/target.jsonl"), &tgt)?;
    write_alignment(out.join("retrieval/gold.tsv"), &gold)?;
    Ok(())
}

/// SHA-256 over relative paths and contents of every file below `dir`.
pub fn directory_hash(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in std::fs::read_dir(&p).map_err(|e| Error::io(&p, e))? {
            let entry = entry.map_err(|e| Error::io(&p, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(std::fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex::encode(h.finalize()))
}
