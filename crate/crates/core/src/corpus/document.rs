use serde::{Deserialize, Serialize};

use super::tokenize::{tokenize, tokenize_sentences};
use crate::error::{Error, Result};

/// One unit of text fed to the model: level 1 is title plus abstract,
/// higher levels are claim chunks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSegment {
    pub tokens: Vec<String>,
    pub level_index: usize,
}

/// Keyphrases split by whether they occur verbatim in the text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyphraseSet {
    pub present: Vec<Vec<String>>,
    pub absent: Vec<Vec<String>>,
}

impl KeyphraseSet {
    pub fn all(&self) -> impl Iterator<Item = &Vec<String>> {
        self.present.iter().chain(&self.absent)
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty() && self.absent.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSpan {
    pub tokens: Vec<String>,
    pub start: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bio {
    B,
    I,
    O,
}

impl Bio {
    pub fn class(self) -> usize {
        match self {
            Bio::B => 0,
            Bio::I => 1,
            Bio::O => 2,
        }
    }

    pub fn from_class(c: usize) -> Bio {
        match c {
            0 => Bio::B,
            1 => Bio::I,
            _ => Bio::O,
        }
    }
}

/// The JSONL record as stored on disk. Strings are untokenized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub claims: String,
    pub present_keyphrases: Vec<String>,
    pub absent_keyphrases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub technology: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLevelDocument {
    pub doc_id: String,
    pub segments: Vec<DocumentSegment>,
    pub keyphrases: KeyphraseSet,
    pub label: Option<String>,
    pub technology: Option<String>,
    pub raw: RawDocument,
}

impl MultiLevelDocument {
    pub fn from_raw(raw: RawDocument, max_segment_tokens: usize) -> Self {
        let mut first = tokenize(&raw.title);
        first.extend(tokenize(&raw.abstract_text));
        let mut segments = Vec::new();
        if !first.is_empty() {
            segments.push(DocumentSegment { tokens: first, level_index: 1 });
        }
        for (i, mut seg) in split_claims(&raw.claims, max_segment_tokens).into_iter().enumerate() {
            seg.level_index = i + 2;
            segments.push(seg);
        }
        let phrases = |v: &[String]| -> Vec<Vec<String>> {
            v.iter().map(|p| tokenize(p)).filter(|t| !t.is_empty()).collect()
        };
        MultiLevelDocument {
            doc_id: raw.id.clone(),
            keyphrases: KeyphraseSet {
                present: phrases(&raw.present_keyphrases),
                absent: phrases(&raw.absent_keyphrases),
            },
            label: raw.label.clone(),
            technology: raw.technology.clone(),
            segments,
            raw,
        }
    }

    /// Number of levels C+1.
    pub fn levels(&self) -> usize {
        self.segments.len()
    }

    pub fn all_tokens(&self) -> impl Iterator<Item = &String> {
        self.segments.iter().flat_map(|s| &s.tokens)
    }

    /// Targets for one segment: present keyphrases occurring in the segment
    /// verbatim, plus every absent keyphrase of the document.
    pub fn segment_keyphrases(&self, segment: usize) -> KeyphraseSet {
        let seg = &self.segments[segment].tokens;
        KeyphraseSet {
            present: self
                .keyphrases
                .present
                .iter()
                .filter(|p| find_run(seg, p).is_some())
                .cloned()
                .collect(),
            absent: self.keyphrases.absent.clone(),
        }
    }
}

/// First index where `needle` occurs as a contiguous run of `haystack`.
pub fn find_run<T: PartialEq>(haystack: &[T], needle: &[T]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn contains_run<T: PartialEq>(haystack: &[T], needle: &[T]) -> bool {
    find_run(haystack, needle).is_some()
}

/// Maximal token runs shared by the segment and some keyphrase, one span per
/// distinct sequence at its first occurrence, ordered by that position.
pub fn derive_keywords(segment: &DocumentSegment, keyphrases: &KeyphraseSet) -> Vec<KeywordSpan> {
    let seg = &segment.tokens;
    let mut candidates: Vec<(usize, &[String])> = Vec::new();
    for kp in keyphrases.all() {
        for i in 0..kp.len() {
            for j in i + 1..=kp.len() {
                let run = &kp[i..j];
                if candidates.iter().any(|(_, c)| *c == run) {
                    continue;
                }
                if let Some(start) = find_run(seg, run) {
                    candidates.push((start, run));
                }
            }
        }
    }
    let mut spans: Vec<KeywordSpan> = candidates
        .iter()
        .filter(|(_, run)| {
            !candidates
                .iter()
                .any(|(_, other)| other.len() > run.len() && contains_run(other, run))
        })
        .map(|(start, run)| KeywordSpan {
            tokens: run.to_vec(),
            start: *start,
            confidence: 1.0,
        })
        .collect();
    spans.sort_by(|a, b| a.start.cmp(&b.start).then_with(|| a.tokens.cmp(&b.tokens)));
    spans
}

/// Labels every occurrence of every span. Longer spans claim tokens first,
/// then earlier starts; occurrences overlapping an already-labeled token
/// are skipped.
pub fn bio_labels(segment: &DocumentSegment, spans: &[KeywordSpan]) -> Result<Vec<Bio>> {
    let seg = &segment.tokens;
    let mut occurrences: Vec<(usize, usize)> = Vec::new();
    for span in spans {
        let n = span.tokens.len();
        if n == 0 || span.start + n > seg.len() || seg[span.start..span.start + n] != span.tokens[..] {
            return Err(Error::invalid(format!(
                "keyword span {:?} does not occur at index {}",
                span.tokens, span.start
            )));
        }
        for s in 0..=seg.len() - n {
            if seg[s..s + n] == span.tokens[..] {
                occurrences.push((s, n));
            }
        }
    }
    occurrences.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    occurrences.dedup();
    let mut labels = vec![Bio::O; seg.len()];
    for (s, n) in occurrences {
        if labels[s..s + n].iter().all(|l| *l == Bio::O) {
            labels[s] = Bio::B;
            for l in &mut labels[s + 1..s + n] {
                *l = Bio::I;
            }
        }
    }
    Ok(labels)
}

/// Recovers `(start, len)` runs of the form `B I*`. A stray `I` is ignored.
pub fn decode_bio(labels: &[Bio]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        if labels[i] == Bio::B {
            let mut j = i + 1;
            while j < labels.len() && labels[j] == Bio::I {
                j += 1;
            }
            out.push((i, j - i));
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

/// Greedily packs whole sentences into segments of at most
/// `max_segment_tokens`; a sentence longer than the limit is cut into
/// limit-sized pieces.
pub fn split_claims(text: &str, max_segment_tokens: usize) -> Vec<DocumentSegment> {
    let max = max_segment_tokens.max(1);
    let mut out: Vec<Vec<String>> = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for sentence in tokenize_sentences(text) {
        if cur.len() + sentence.len() <= max {
            cur.extend(sentence);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        let mut rest = sentence;
        while rest.len() > max {
            let tail = rest.split_off(max);
            out.push(rest);
            rest = tail;
        }
        cur = rest;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, tokens)| DocumentSegment { tokens, level_index: i + 2 })
        .collect()
}
