//! Seeded synthetic corpus with planted keyphrases.
//!
//! Words are pronounceable pseudo-words that the stemmer leaves unchanged.
//! Each topic owns a lexicon of phrases; some phrases have an absent
//! partner `[hidden, anchor]` where `hidden` never appears in any text and
//! `anchor` is planted on its own in the abstract. A document of topic `t`
//! plants one or two partnered phrases of `t` (so its absent keyphrases, and
//! its label, follow from the text) plus unpartnered phrases from any topic.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::document::{MultiLevelDocument, RawDocument};
use super::DEFAULT_MAX_SEGMENT_TOKENS;
use crate::metrics::porter_stem;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabProfile {
    pub topics: usize,
    pub phrases_per_topic: usize,
    pub filler_words: usize,
    pub max_segment_tokens: usize,
}

impl Default for VocabProfile {
    fn default() -> Self {
        VocabProfile {
            topics: 4,
            phrases_per_topic: 8,
            filler_words: 40,
            max_segment_tokens: DEFAULT_MAX_SEGMENT_TOKENS,
        }
    }
}

#[derive(Debug, Clone)]
struct Phrase {
    words: Vec<String>,
    partner: Option<(String, String)>,
}

struct Lexicon {
    topics: Vec<Vec<Phrase>>,
    filler: Vec<String>,
}

const CONSONANTS: &[u8] = b"dfgkmnprstz";
const VOWELS: &[u8] = b"aiou";

struct WordPool {
    used: BTreeSet<String>,
    stems: BTreeSet<String>,
}

impl WordPool {
    fn fresh(&mut self, rng: &mut ChaCha8Rng, syllables: std::ops::RangeInclusive<usize>) -> String {
        loop {
            let n = rng.random_range(syllables.clone());
            let w: String = (0..n)
                .flat_map(|_| {
                    [
                        *CONSONANTS.choose(rng).unwrap() as char,
                        *VOWELS.choose(rng).unwrap() as char,
                    ]
                })
                .collect();
            let stem = porter_stem(&w);
            if stem == w && !self.used.contains(&w) && !self.stems.contains(&stem) {
                self.used.insert(w.clone());
                self.stems.insert(stem);
                return w;
            }
        }
    }
}

fn build_lexicon(rng: &mut ChaCha8Rng, profile: &VocabProfile) -> Lexicon {
    let mut pool = WordPool { used: BTreeSet::new(), stems: BTreeSet::new() };
    let topics = (0..profile.topics)
        .map(|_| {
            (0..profile.phrases_per_topic)
                .map(|i| {
                    let len = rng.random_range(1..=3);
                    let words = (0..len).map(|_| pool.fresh(rng, 2..=3)).collect();
                    // every other phrase gets an absent partner
                    let partner = (i % 2 == 0).then(|| (pool.fresh(rng, 2..=3), pool.fresh(rng, 2..=3)));
                    Phrase { words, partner }
                })
                .collect()
        })
        .collect();
    let filler = (0..profile.filler_words).map(|_| pool.fresh(rng, 1..=2)).collect();
    Lexicon { topics, filler }
}

fn filler_run(rng: &mut ChaCha8Rng, lex: &Lexicon, n: usize) -> Vec<String> {
    (0..n).map(|_| lex.filler.choose(rng).unwrap().clone()).collect()
}

/// Shuffles the chunks, pads with filler words to about `target` tokens,
/// and joins everything into one line of text.
fn compose(rng: &mut ChaCha8Rng, lex: &Lexicon, mut chunks: Vec<Vec<String>>, target: usize) -> String {
    let planted: usize = chunks.iter().map(Vec::len).sum();
    for w in filler_run(rng, lex, target.saturating_sub(planted)) {
        chunks.push(vec![w]);
    }
    chunks.shuffle(rng);
    chunks.concat().join(" ")
}

fn make_document(rng: &mut ChaCha8Rng, lex: &Lexicon, index: usize) -> RawDocument {
    let topic = rng.random_range(0..lex.topics.len());
    let partnered: Vec<&Phrase> = lex.topics[topic].iter().filter(|p| p.partner.is_some()).collect();
    let n_partnered = rng.random_range(1..=2).min(partnered.len());
    let mut present: Vec<&Phrase> = partnered.choose_multiple(rng, n_partnered).copied().collect();

    let others: Vec<&Phrase> = lex.topics.iter().flatten().filter(|p| p.partner.is_none()).collect();
    let n_total = rng.random_range(2..=4).max(n_partnered);
    present.extend(others.choose_multiple(rng, n_total - n_partnered).copied());
    present.shuffle(rng);

    let absent: Vec<(String, String)> = present.iter().filter_map(|p| p.partner.clone()).collect();

    let title_tail = filler_run(rng, lex, 2);
    let title = [present[0].words.clone(), title_tail].concat().join(" ");

    let mut chunks: Vec<Vec<String>> = present.iter().map(|p| p.words.clone()).collect();
    chunks.extend(absent.iter().map(|(_, anchor)| vec![anchor.clone()]));
    let abstract_text = compose(rng, lex, chunks, 25) + ".";

    let n_claims = rng.random_range(1..=2);
    let claims = (0..n_claims)
        .map(|_| {
            let k = rng.random_range(1..=2).min(present.len());
            let chunks = present.choose_multiple(rng, k).map(|p| p.words.clone()).collect();
            let len = rng.random_range(25..=40);
            compose(rng, lex, chunks, len) + "."
        })
        .collect::<Vec<_>>()
        .join(" ");

    let first_topic = lex
        .topics
        .iter()
        .position(|t| t.iter().any(|p| p.words == present[0].words))
        .unwrap_or(topic);
    RawDocument {
        id: format!("doc-{index:04}"),
        title,
        abstract_text,
        claims,
        present_keyphrases: present.iter().map(|p| p.words.join(" ")).collect(),
        absent_keyphrases: absent.iter().map(|(h, a)| format!("{h} {a}")).collect(),
        label: Some(format!("topic-{topic}")),
        technology: Some(format!("tech-{first_topic}")),
    }
}

/// Raw records of a synthetic corpus; identical for identical arguments.
pub fn synth_raw(seed: u64, n_docs: usize, profile: &VocabProfile) -> Vec<RawDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lex = build_lexicon(&mut rng, profile);
    (0..n_docs).map(|i| make_document(&mut rng, &lex, i)).collect()
}

pub fn synth_corpus(seed: u64, n_docs: usize, profile: &VocabProfile) -> Vec<MultiLevelDocument> {
    synth_raw(seed, n_docs, profile)
        .into_iter()
        .map(|r| MultiLevelDocument::from_raw(r, profile.max_segment_tokens))
        .collect()
}
