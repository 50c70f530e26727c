//! Metrics: BIO span decoding and span-level micro-F1, sentence-level
//! micro-F1, mean pooling, and cosine retrieval precision@k.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::{CLS, PAD, SEP};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanMention {
    pub sentence: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

pub fn parse_tag(tag: &str) -> Result<Tag<'_>> {
    if tag == "O" {
        return Ok(Tag::Outside);
    }
    match tag.split_once('-') {
        Some(("B", l)) if !l.is_empty() => Ok(Tag::Begin(l)),
        Some(("I", l)) if !l.is_empty() => Ok(Tag::Inside(l)),
        _ => Err(Error::Data(format!("unknown BIO tag `{tag}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BioMode {
    /// An `I-X` without an open `X` span opens one.
    #[default]
    Lenient,
    /// Such an `I-X` is treated as `O`.
    Strict,
}

/// Decodes one tag sequence into spans of sentence `sentence`.
pub fn bio_decode<S: AsRef<str>>(tags: &[S], sentence: usize, mode: BioMode) -> Result<Vec<SpanMention>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    let close = |open: &mut Option<(usize, &str)>, end: usize, spans: &mut Vec<SpanMention>| {
        if let Some((start, label)) = open.take() {
            spans.push(SpanMention {
                sentence,
                start,
                end,
                label: label.to_owned(),
            });
        }
    };
    for (i, t) in tags.iter().enumerate() {
        match parse_tag(t.as_ref())? {
            Tag::Outside => close(&mut open, i, &mut spans),
            Tag::Begin(l) => {
                close(&mut open, i, &mut spans);
                open = Some((i, l));
            }
            Tag::Inside(l) => match open {
                Some((_, cur)) if cur == l => {}
                _ => {
                    close(&mut open, i, &mut spans);
                    if mode == BioMode::Lenient {
                        open = Some((i, l));
                    }
                }
            },
        }
    }
    close(&mut open, tags.len(), &mut spans);
    Ok(spans)
}

/// Decodes every sentence of a corpus, numbering sentences from zero.
pub fn bio_decode_all<S: AsRef<str>>(sentences: &[Vec<S>], mode: BioMode) -> Result<Vec<SpanMention>> {
    let mut out = Vec::new();
    for (i, tags) in sentences.iter().enumerate() {
        out.extend(bio_decode(tags, i, mode)?);
    }
    Ok(out)
}

/// Tags for non-overlapping spans over a sentence of `len` words.
pub fn bio_encode(spans: &[SpanMention], len: usize) -> Result<Vec<String>> {
    let mut tags = vec!["O".to_owned(); len];
    let mut used = vec![false; len];
    for s in spans {
        if s.start >= s.end || s.end > len {
            return Err(Error::Data(format!("span {}..{} invalid for length {len}", s.start, s.end)));
        }
        if used[s.start..s.end].iter().any(|&u| u) {
            return Err(Error::Data(format!("span {}..{} overlaps another span", s.start, s.end)));
        }
        for (k, i) in (s.start..s.end).enumerate() {
            used[i] = true;
            tags[i] = format!("{}-{}", if k == 0 { "B" } else { "I" }, s.label);
        }
    }
    Ok(tags)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact-match span scoring pooled over labels.
pub fn span_micro_f1(gold: &[SpanMention], pred: &[SpanMention]) -> PrF1 {
    if gold.is_empty() && pred.is_empty() {
        return PrF1 {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let g: HashSet<&SpanMention> = gold.iter().collect();
    let p: HashSet<&SpanMention> = pred.iter().collect();
    let tp = g.intersection(&p).count() as f64;
    let precision = if p.is_empty() { 0.0 } else { tp / p.len() as f64 };
    let recall = if g.is_empty() { 0.0 } else { tp / g.len() as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    PrF1 { precision, recall, f1 }
}

/// Micro-F1 over single-label sentence predictions, which equals accuracy.
pub fn sentence_micro_f1<S: AsRef<str> + PartialEq>(gold: &[S], pred: &[S]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::Data(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Data("no labels to score".into()));
    }
    let correct = gold.iter().zip(pred).filter(|(g, p)| g.as_ref() == p.as_ref()).count();
    Ok(correct as f64 / gold.len() as f64)
}

/// Positions to average: everything except padding, and optionally except
/// `[CLS]`/`[SEP]`.
pub fn pooling_mask(ids: &[u32], include_specials: bool) -> Vec<bool> {
    ids.iter()
        .map(|&id| id != PAD && (include_specials || (id != CLS && id != SEP)))
        .collect()
}

/// Mean of the rows of `hidden` selected by `mask`.
pub fn mean_pool<T: Scalar>(hidden: &Array2<T>, mask: &[bool]) -> Result<Array1<T>> {
    if mask.len() != hidden.nrows() {
        return Err(Error::Shape {
            what: "pooling mask".into(),
            expected: vec![hidden.nrows()],
            actual: vec![mask.len()],
        });
    }
    let mut sum = Array1::zeros(hidden.ncols());
    let mut n = 0usize;
    for (row, _) in hidden.rows().into_iter().zip(mask).filter(|(_, &m)| m) {
        sum += &row;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no positions to pool".into()));
    }
    Ok(sum / T::of(n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedded {
    pub id: String,
    pub vector: Vec<f64>,
}

fn unit(e: &Embedded) -> Result<Vec<f64>> {
    let norm = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::ZeroNorm(e.id.clone()));
    }
    Ok(e.vector.iter().map(|v| v / norm).collect())
}

/// Target ids ranked by cosine similarity to each source, ties broken by
/// target id ascending.
pub fn rank_targets(sources: &[Embedded], targets: &[Embedded]) -> Result<Vec<Vec<usize>>> {
    let tu: Vec<Vec<f64>> = targets.iter().map(unit).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[a].id.cmp(&targets[b].id));
    sources
        .iter()
        .map(|s| {
            let su = unit(s)?;
            if su.len() != tu.first().map_or(su.len(), Vec::len) {
                return Err(Error::Shape {
                    what: format!("embedding of `{}`", s.id),
                    expected: vec![tu[0].len()],
                    actual: vec![su.len()],
                });
            }
            let sims: Vec<f64> = tu.iter().map(|t| t.iter().zip(&su).map(|(a, b)| a * b).sum()).collect();
            let mut ranked = order.clone();
            // Stable sort over the id-sorted order keeps ties in id order.
            ranked.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(std::cmp::Ordering::Equal));
            Ok(ranked)
        })
        .collect()
}

/// Fraction of gold pairs whose target is among the `k` nearest targets of
/// the source.
pub fn retrieve_precision_at_k(
    sources: &[Embedded],
    targets: &[Embedded],
    gold: &[(String, String)],
    k: usize,
) -> Result<f64> {
    let curve = precision_curve(sources, targets, gold, &[k])?;
    Ok(curve[0])
}

/// Precision at each of `ks`, from a single ranking.
pub fn precision_curve(
    sources: &[Embedded],
    targets: &[Embedded],
    gold: &[(String, String)],
    ks: &[usize],
) -> Result<Vec<f64>> {
    if gold.is_empty() {
        return Err(Error::Data("no gold retrieval pairs".into()));
    }
    for &k in ks {
        if k == 0 || k > targets.len() {
            return Err(Error::Config(format!("k = {k} must lie in 1..={}", targets.len())));
        }
    }
    let src_index: BTreeMap<&str, usize> = sources.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let tgt_index: BTreeMap<&str, usize> = targets.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
    let mut wanted = Vec::with_capacity(gold.len());
    for (s, t) in gold {
        let si = *src_index
            .get(s.as_str())
            .ok_or_else(|| Error::Data(format!("gold source `{s}` not among sources")))?;
        let ti = *tgt_index
            .get(t.as_str())
            .ok_or_else(|| Error::Data(format!("gold target `{t}` not among targets")))?;
        wanted.push((si, ti));
    }
    let ranks = rank_targets(sources, targets)?;
    let positions: Vec<usize> = wanted
        .iter()
        .map(|&(si, ti)| ranks[si].iter().position(|&x| x == ti).expect("target ranked"))
        .collect();
    Ok(ks
        .iter()
        .map(|&k| positions.iter().filter(|&&p| p < k).count() as f64 / positions.len() as f64)
        .collect())
}

/// Left-aligned first column, right-aligned remaining columns.
pub fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate().take(cols) {
            if i == 0 {
                let _ = write!(s, "{c:<w$}", w = widths[0]);
            } else {
                let _ = write!(s, "  {c:>w$}", w = widths[i]);
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(header.to_vec());
    for r in rows {
        line(r.iter().map(String::as_str).collect());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainRow {
    pub model: String,
    pub metric: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainReport {
    pub task: String,
    pub metric_name: String,
    pub rows: Vec<CrossDomainRow>,
}

impl CrossDomainReport {
    pub fn has_errors(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let v = match (&r.metric, &r.error) {
                    (Some(m), _) => format!("{:.2}", 100.0 * m),
                    (None, Some(e)) => format!("error: {e}"),
                    (None, None) => "-".into(),
                };
                vec![r.model.clone(), v]
            })
            .collect();
        let header = format!("{} {}", self.task, self.metric_name);
        aligned_table(&["model", &header], &rows)
    }
}

/// Collects per-model results; a failed evaluation becomes an error row.
pub fn cross_domain_report(
    task: &str,
    metric_name: &str,
    results: Vec<(String, Result<f64>)>,
) -> CrossDomainReport {
    let rows = results
        .into_iter()
        .map(|(model, r)| match r {
            Ok(m) => CrossDomainRow {
                model,
                metric: Some(m),
                error: None,
            },
            Err(e) => CrossDomainRow {
                model,
                metric: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    CrossDomainReport {
        task: task.into(),
        metric_name: metric_name.into(),
        rows,
    }
}
