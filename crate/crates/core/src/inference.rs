//! Greedy slot decoding, prediction filtering, hierarchical prompting and
//! portrait assembly.

use serde::{Deserialize, Serialize};

use crate::assignment::argmax;
use crate::corpus::{tokenize, KeywordSpan, MultiLevelDocument, Vocab, BOS, EOS, NULL, PAD, SEP_TOKEN, UNK};
use crate::error::{Error, Result};
use crate::metrics::{stem_seq, PredictionEntry, PredictionRecord};
use crate::model::{predict_keywords, slot_keywords, Group, Model, SlotState};
use crate::numerics::Tensor;
use crate::training::padding_keywords;

pub const PROMPT_HEAD: &str = "keyphrases from higher-level:";
pub const PROMPT_TAIL: &str = "find keyphrases from:";

/// Tokens the prompt template contributes to every input.
pub fn template_tokens() -> Vec<String> {
    tokenize(&format!("{PROMPT_HEAD} {SEP_TOKEN} {PROMPT_TAIL}"))
}

/// The template with `keyphrases` joined by ", " and the body appended.
pub fn render_prompt(keyphrases: &[Vec<String>], body: &[String]) -> String {
    let joined: Vec<String> = keyphrases.iter().map(|k| k.join(" ")).collect();
    format!("{PROMPT_HEAD} {} {SEP_TOKEN} {PROMPT_TAIL} {}", joined.join(", "), body.join(" "))
}

/// Encoder input for one level: the prompt built from the previous level's
/// keyphrases followed by the (possibly truncated) body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptedInput {
    pub level: usize,
    pub prompt_keyphrases: Vec<Vec<String>>,
    pub prompt_tokens: Vec<String>,
    pub body_tokens: Vec<String>,
    pub rendered: String,
}

impl PromptedInput {
    /// Truncates the body tail so that prompt plus body fit in `max_len`;
    /// the prompt itself is never cut.
    pub fn build(level: usize, keyphrases: &[Vec<String>], body: &[String], max_len: usize) -> Result<Self> {
        let prompt_tokens = tokenize(&render_prompt(keyphrases, &[]));
        if prompt_tokens.len() >= max_len {
            return Err(Error::invalid(format!(
                "prompt of {} tokens leaves no room for the body (max {max_len})",
                prompt_tokens.len()
            )));
        }
        let keep = body.len().min(max_len - prompt_tokens.len());
        let body_tokens = body[..keep].to_vec();
        Ok(PromptedInput {
            level,
            prompt_keyphrases: keyphrases.to_vec(),
            rendered: render_prompt(keyphrases, &body_tokens),
            prompt_tokens,
            body_tokens,
        })
    }

    pub fn tokens(&self) -> Vec<String> {
        [self.prompt_tokens.as_slice(), &self.body_tokens].concat()
    }

    pub fn ids(&self, vocab: &Vocab) -> Vec<usize> {
        vocab.ids(&self.tokens())
    }
}

/// One slot's greedy output. `tokens` excludes EOS; a null slot has
/// `is_null` set and no tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSlot {
    pub slot: usize,
    pub group: Group,
    pub tokens: Vec<String>,
    pub is_null: bool,
    pub confidence: f64,
}

/// Greedy decoding of every slot until EOS or `max_kp_len` tokens. A slot
/// is null iff its first token is the null token. Confidence is the mean
/// probability of the emitted tokens.
pub fn generate_slots(model: &Model, vocab: &Vocab, h_e: &Tensor, keywords: &[Vec<usize>]) -> Result<Vec<RawSlot>> {
    let n = model.config.n_slots;
    if keywords.len() != n {
        return Err(Error::invalid(format!("{} keyword entries for {n} slots", keywords.len())));
    }
    let mut states: Vec<SlotState> = (0..n)
        .map(|i| {
            let mut s = SlotState::new(i, n, None, vocab);
            s.keyword_ids = keywords[i].clone();
            s
        })
        .collect();
    let mut done = vec![false; n];
    let mut out: Vec<(Vec<usize>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); n];
    for t in 1..=model.config.max_kp_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let dists = model.decode_step(h_e, &states, t)?;
        for (i, p) in dists.iter().enumerate() {
            let next = argmax(p);
            states[i].prefix.push(next);
            if done[i] {
                continue;
            }
            let (toks, probs) = &mut out[i];
            probs.push(p[next]);
            if next == EOS || (t == 1 && next == NULL) {
                done[i] = true;
            }
            if next != EOS {
                toks.push(next);
            }
        }
    }
    Ok(states
        .iter()
        .zip(out)
        .map(|(s, (toks, probs))| {
            let is_null = toks.first() == Some(&NULL);
            RawSlot {
                slot: s.slot,
                group: s.group,
                tokens: if is_null { Vec::new() } else { vocab.tokens_of(&toks) },
                is_null,
                confidence: probs.iter().sum::<f64>() / probs.len().max(1) as f64,
            }
        })
        .collect())
}

/// One portrait keyphrase with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortraitEntry {
    pub tokens: Vec<String>,
    pub level: usize,
    pub group: Group,
    pub confidence: f64,
}

fn is_special(token: &str, vocab: &Vocab) -> bool {
    [PAD, BOS, NULL, UNK].iter().any(|&id| vocab.token(id) == token)
}

/// Drops null and empty outputs, outputs containing structural special
/// tokens, and outputs identical to a padding keyword; then keeps the most
/// confident entry per stemmed form. Result is in confidence order, ties by
/// slot.
pub fn filter_predictions(raw: &[RawSlot], padding: &[Vec<String>], level: usize, vocab: &Vocab) -> Vec<PortraitEntry> {
    let mut kept: Vec<&RawSlot> = raw
        .iter()
        .filter(|r| !r.is_null && !r.tokens.is_empty())
        .filter(|r| !r.tokens.iter().any(|t| is_special(t, vocab)))
        .filter(|r| !padding.contains(&r.tokens))
        .collect();
    kept.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.slot.cmp(&b.slot)));
    let mut seen: Vec<Vec<String>> = Vec::new();
    let mut out = Vec::new();
    for r in kept {
        let stem = stem_seq(&r.tokens);
        if seen.contains(&stem) {
            continue;
        }
        seen.push(stem);
        out.push(PortraitEntry {
            tokens: r.tokens.clone(),
            level,
            group: r.group,
            confidence: r.confidence,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceOptions {
    /// Remove predictions equal to padding keywords (needs reference
    /// present keyphrases to rebuild the padding set).
    pub kwp: bool,
    /// Fold predicted keywords into the slot control codes.
    pub kcc: bool,
    /// Prompt each level with the previous level's keyphrases; otherwise
    /// every level is prompted with its own keywords.
    pub hierarchical: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            kwp: true,
            kcc: true,
            hierarchical: true,
        }
    }
}

/// Everything produced for one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub prompt: PromptedInput,
    pub keywords: Vec<KeywordSpan>,
    pub raw: Vec<RawSlot>,
    pub entries: Vec<PortraitEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portrait {
    pub doc_id: String,
    pub entries: Vec<PortraitEntry>,
    pub levels: Vec<LevelTrace>,
}

impl Portrait {
    pub fn to_record(&self) -> PredictionRecord {
        PredictionRecord {
            id: self.doc_id.clone(),
            keyphrases: self
                .entries
                .iter()
                .map(|e| PredictionEntry {
                    text: e.tokens.join(" "),
                    level: e.level,
                    group: match e.group {
                        Group::Present => "present".into(),
                        Group::Absent => "absent".into(),
                    },
                    confidence: e.confidence,
                })
                .collect(),
            slots: self
                .levels
                .iter()
                .map(|l| {
                    l.raw
                        .iter()
                        .map(|r| (!r.is_null).then(|| r.tokens.join(" ")))
                        .collect()
                })
                .collect(),
        }
    }
}

/// Keywords of a body, ranked by confidence.
pub fn extract_keywords(model: &Model, vocab: &Vocab, body: &[String]) -> Result<Vec<KeywordSpan>> {
    let len = body.len().min(model.config.max_input_len);
    let body = &body[..len];
    let h = model.encode(&vocab.ids(body))?;
    let p = model.kwe_forward(&h)?;
    Ok(predict_keywords(&p, body, usize::MAX))
}

/// Hierarchical portrait of one document: level 1 is prompted with its own
/// keywords, every later level with the keyphrases generated one level up.
pub fn phd_portrait(model: &Model, vocab: &Vocab, doc: &MultiLevelDocument, opts: InferenceOptions) -> Result<Portrait> {
    if doc.segments.is_empty() {
        return Err(Error::invalid(format!("document {:?} is empty", doc.doc_id)));
    }
    let cfg = &model.config;
    let mut levels: Vec<LevelTrace> = Vec::new();
    let mut entries: Vec<PortraitEntry> = Vec::new();
    let mut seen: Vec<Vec<String>> = Vec::new();
    for (i, seg) in doc.segments.iter().enumerate() {
        let keywords = extract_keywords(model, vocab, &seg.tokens)?;
        let prev: Vec<Vec<String>> = match levels.last() {
            Some(l) if opts.hierarchical => l.entries.iter().map(|e| e.tokens.clone()).collect(),
            _ => {
                let mut by_pos = keywords.clone();
                by_pos.sort_by_key(|k| k.start);
                by_pos.into_iter().map(|k| k.tokens).collect()
            }
        };
        let prompt = PromptedInput::build(i + 1, &prev, &seg.tokens, cfg.max_input_len)?;
        let h = model.encode(&prompt.ids(vocab))?;
        let top: Vec<Vec<usize>> = if opts.kcc {
            keywords.iter().take(cfg.n_keywords).map(|k| vocab.ids(&k.tokens)).collect()
        } else {
            Vec::new()
        };
        let raw = generate_slots(model, vocab, &h, &slot_keywords(&top, cfg))?;
        let padding = if opts.kwp && !doc.keyphrases.present.is_empty() {
            let seg_kp = doc.segment_keyphrases(i);
            padding_keywords(&keywords, seg_kp.present.len(), &doc.keyphrases.present, cfg.n_slots)
        } else {
            Vec::new()
        };
        let level_entries = filter_predictions(&raw, &padding, i + 1, vocab);
        for e in &level_entries {
            let stem = stem_seq(&e.tokens);
            if !seen.contains(&stem) {
                seen.push(stem);
                entries.push(e.clone());
            }
        }
        levels.push(LevelTrace {
            prompt,
            keywords,
            raw,
            entries: level_entries,
        });
    }
    Ok(Portrait {
        doc_id: doc.doc_id.clone(),
        entries,
        levels,
    })
}

/// Maps `f` over `items` on up to `threads` workers, preserving order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}
