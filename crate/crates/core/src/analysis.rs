//! Portrait-based classifier inputs, a multinomial naive Bayes classifier
//! and the accuracy / token-count report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, MultiLevelDocument, SEP_TOKEN};
use crate::error::{Error, Result};
use crate::metrics::PredictionRecord;

/// Token placed between portrait entries.
pub const ENTRY_SEPARATOR: &str = ";";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pure,
    Augmented,
    Original,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Pure, Mode::Augmented, Mode::Original];
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pure" => Ok(Mode::Pure),
            "augmented" => Ok(Mode::Augmented),
            "original" => Ok(Mode::Original),
            other => Err(Error::invalid(format!("unknown mode {other:?} (pure, augmented, original)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Pure => "pure",
            Mode::Augmented => "augmented",
            Mode::Original => "original",
        })
    }
}

/// Which label the classifier predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Label,
    Technology,
}

impl Task {
    pub fn target(self, doc: &MultiLevelDocument) -> Option<&str> {
        match self {
            Task::Label => doc.label.as_deref(),
            Task::Technology => doc.technology.as_deref(),
        }
    }
}

/// Parses a level list such as `1`, `1,2` or `1,2,3`.
pub fn parse_levels(s: &str) -> Result<Vec<usize>> {
    let levels: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::invalid(format!("bad level list {s:?}"))))
        .collect::<Result<_>>()?;
    if levels.is_empty() || levels.contains(&0) {
        return Err(Error::invalid(format!("bad level list {s:?}")));
    }
    Ok(levels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisInput {
    pub mode: Mode,
    pub tokens: Vec<String>,
    pub token_count: usize,
}

/// Assembles the classifier input of one document from the requested
/// levels. Pure mode keeps only portrait entries separated by `;`;
/// augmented mode appends `[sep]` and those entries to the original text.
pub fn build_input(doc: &MultiLevelDocument, portrait: &PredictionRecord, mode: Mode, levels: &[usize]) -> AnalysisInput {
    let original: Vec<String> = doc
        .segments
        .iter()
        .filter(|s| levels.contains(&s.level_index))
        .flat_map(|s| s.tokens.iter().cloned())
        .collect();
    let mut pure: Vec<String> = Vec::new();
    for e in portrait.keyphrases.iter().filter(|e| levels.contains(&e.level)) {
        if !pure.is_empty() {
            pure.push(ENTRY_SEPARATOR.to_string());
        }
        pure.extend(tokenize(&e.text));
    }
    let tokens = match mode {
        Mode::Pure => pure,
        Mode::Original => original,
        Mode::Augmented => {
            let mut t = original;
            t.push(SEP_TOKEN.to_string());
            t.extend(pure);
            t
        }
    };
    AnalysisInput {
        mode,
        token_count: tokens.len(),
        tokens,
    }
}

/// Multinomial naive Bayes over token counts with add-one smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveBayes {
    classes: BTreeMap<String, ClassStats>,
    vocab: BTreeSet<String>,
    n_docs: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ClassStats {
    docs: usize,
    total: usize,
    counts: HashMap<String, usize>,
}

impl NaiveBayes {
    pub fn train(inputs: &[Vec<String>], labels: &[String]) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        if inputs.len() != labels.len() {
            return Err(Error::invalid(format!("{} inputs for {} labels", inputs.len(), labels.len())));
        }
        let mut classes: BTreeMap<String, ClassStats> = BTreeMap::new();
        let mut vocab = BTreeSet::new();
        for (toks, label) in inputs.iter().zip(labels) {
            let c = classes.entry(label.clone()).or_default();
            c.docs += 1;
            c.total += toks.len();
            for t in toks {
                *c.counts.entry(t.clone()).or_default() += 1;
                vocab.insert(t.clone());
            }
        }
        Ok(NaiveBayes {
            classes,
            vocab,
            n_docs: inputs.len(),
        })
    }

    /// Log posterior (up to a constant) per class, in label order. Tokens
    /// never seen in training are ignored.
    pub fn scores(&self, tokens: &[String]) -> Vec<(&str, f64)> {
        let v = self.vocab.len() as f64;
        self.classes
            .iter()
            .map(|(label, c)| {
                let mut s = (c.docs as f64 / self.n_docs as f64).ln();
                let denom = (c.total as f64 + v).ln();
                for t in tokens.iter().filter(|t| self.vocab.contains(*t)) {
                    s += (*c.counts.get(t).unwrap_or(&0) as f64 + 1.0).ln() - denom;
                }
                (label.as_str(), s)
            })
            .collect()
    }

    /// Highest posterior; the lexicographically smallest label on ties.
    pub fn classify(&self, tokens: &[String]) -> &str {
        let mut best: Option<(&str, f64)> = None;
        for (label, s) in self.scores(tokens) {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((label, s));
            }
        }
        best.expect("at least one class").0
    }
}

/// Accuracy of predictions against labels.
pub fn accuracy(predicted: &[&str], gold: &[&str]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

/// Accuracy of always predicting the most frequent training label
/// (lexicographically smallest on ties).
pub fn majority_baseline(train: &[&str], test: &[&str]) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in train {
        *counts.entry(l).or_default() += 1;
    }
    let Some(max) = counts.values().max() else { return 0.0 };
    let label = counts.iter().find(|(_, c)| *c == max).map(|(l, _)| *l).expect("non-empty");
    accuracy(&vec![label; test.len()], test)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeResult {
    pub mode: String,
    pub levels: String,
    pub accuracy: f64,
    pub mean_tokens: f64,
    pub documents: usize,
}

fn level_name(levels: &[usize]) -> String {
    levels.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Trains on `train` documents and scores `test` documents for one mode and
/// level subset. Every document needs a portrait record and a target label.
pub fn evaluate_mode(
    train: &[&MultiLevelDocument],
    test: &[&MultiLevelDocument],
    portraits: &HashMap<String, PredictionRecord>,
    mode: Mode,
    levels: &[usize],
    task: Task,
) -> Result<ModeResult> {
    let prepare = |docs: &[&MultiLevelDocument]| -> Result<(Vec<AnalysisInput>, Vec<String>)> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for d in docs {
            let p = portraits
                .get(&d.doc_id)
                .ok_or_else(|| Error::invalid(format!("no portrait for document {:?}", d.doc_id)))?;
            let label = task
                .target(d)
                .ok_or_else(|| Error::invalid(format!("document {:?} has no {task:?} label", d.doc_id)))?;
            inputs.push(build_input(d, p, mode, levels));
            labels.push(label.to_string());
        }
        Ok((inputs, labels))
    };
    let (train_in, train_labels) = prepare(train)?;
    let (test_in, test_labels) = prepare(test)?;
    let nb = NaiveBayes::train(&train_in.iter().map(|i| i.tokens.clone()).collect::<Vec<_>>(), &train_labels)?;
    let predicted: Vec<&str> = test_in.iter().map(|i| nb.classify(&i.tokens)).collect();
    let gold: Vec<&str> = test_labels.iter().map(String::as_str).collect();
    let tokens: Vec<f64> = test_in.iter().map(|i| i.token_count as f64).collect();
    Ok(ModeResult {
        mode: mode.to_string(),
        levels: level_name(levels),
        accuracy: accuracy(&predicted, &gold),
        mean_tokens: tokens.iter().sum::<f64>() / tokens.len().max(1) as f64,
        documents: test.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub rows: Vec<ModeResult>,
    pub majority_baseline: f64,
}

impl AnalysisReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mode", "levels", "accuracy", "mean_tokens", "documents"])
            .map_err(|e| Error::invalid(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.mode.clone(),
                r.levels.clone(),
                format!("{:.4}", r.accuracy),
                format!("{:.2}", r.mean_tokens),
                r.documents.to_string(),
            ])
            .map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:<8} {:>8} {:>8}\n", "mode", "levels", "acc", "#tks");
        for r in &self.rows {
            out += &format!("{:<10} {:<8} {:>8.4} {:>8.2}\n", r.mode, r.levels, r.accuracy, r.mean_tokens);
        }
        out += &format!("{:<10} {:<8} {:>8.4} {:>8}\n", "majority", "-", self.majority_baseline, "-");
        out
    }

    pub fn write(&self, csv_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()?).map_err(|e| Error::io(csv_path, e))?;
        let txt = csv_path.with_extension("txt");
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }
}

/// Runs every requested mode and level subset. The first `train_fraction`
/// of the documents (in corpus order) trains the classifier, the rest is
/// scored.
pub fn analyze(
    docs: &[MultiLevelDocument],
    portraits: &[PredictionRecord],
    modes: &[Mode],
    level_sets: &[Vec<usize>],
    task: Task,
    train_fraction: f64,
) -> Result<AnalysisReport> {
    if !(0.0..1.0).contains(&train_fraction) || docs.len() < 2 {
        return Err(Error::invalid("need at least two documents and a train fraction in [0, 1)"));
    }
    let by_id: HashMap<String, PredictionRecord> = portraits.iter().map(|p| (p.id.clone(), p.clone())).collect();
    let docs: Vec<&MultiLevelDocument> = docs.iter().filter(|d| by_id.contains_key(&d.doc_id)).collect();
    let cut = ((docs.len() as f64 * train_fraction).round() as usize).clamp(1, docs.len().saturating_sub(1));
    let (train, test) = docs.split_at(cut);
    let mut rows = Vec::new();
    for &mode in modes {
        for levels in level_sets {
            rows.push(evaluate_mode(train, test, &by_id, mode, levels, task)?);
        }
    }
    let labels = |ds: &[&MultiLevelDocument]| -> Vec<String> {
        ds.iter().filter_map(|d| task.target(d)).map(str::to_string).collect()
    };
    let (tl, sl) = (labels(train), labels(test));
    let majority_baseline = majority_baseline(
        &tl.iter().map(String::as_str).collect::<Vec<_>>(),
        &sl.iter().map(String::as_str).collect::<Vec<_>>(),
    );
    Ok(AnalysisReport { rows, majority_baseline })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, VocabProfile};
    use crate::metrics::PredictionEntry;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn record(id: &str, entries: &[(&str, usize)]) -> PredictionRecord {
        PredictionRecord {
            id: id.into(),
            keyphrases: entries
                .iter()
                .map(|(t, l)| PredictionEntry {
                    text: t.to_string(),
                    level: *l,
                    group: "present".into(),
                    confidence: 0.5,
                })
                .collect(),
            slots: vec![],
        }
    }

    fn doc() -> MultiLevelDocument {
        synth_corpus(2, 1, &VocabProfile::default()).remove(0)
    }

    #[test]
    fn pure_mode_assembly() {
        let d = doc();
        let p = record(&d.doc_id, &[("graph model", 1), ("retrieval", 1), ("late", 2)]);
        let inp = build_input(&d, &p, Mode::Pure, &[1]);
        assert_eq!(inp.tokens, words("graph model ; retrieval"));
        assert_eq!(inp.token_count, 4);
    }

    #[test]
    fn augmented_is_original_then_separator_then_portrait() {
        let d = doc();
        let p = record(&d.doc_id, &[("graph model", 1), ("retrieval", 2)]);
        let levels = [1, 2, 3];
        let orig = build_input(&d, &p, Mode::Original, &levels);
        let pure = build_input(&d, &p, Mode::Pure, &levels);
        let aug = build_input(&d, &p, Mode::Augmented, &levels);
        assert_eq!(aug.token_count, orig.token_count + 1 + pure.token_count);
        assert_eq!(aug.tokens[..orig.token_count], orig.tokens[..]);
        assert_eq!(aug.tokens[orig.token_count], SEP_TOKEN);
        let empty = record(&d.doc_id, &[]);
        assert_eq!(build_input(&d, &empty, Mode::Original, &levels), orig);
        let first: usize = d.segments[0].tokens.len();
        assert_eq!(build_input(&d, &p, Mode::Original, &[1]).token_count, first);
    }

    #[test]
    fn modes_and_levels_parse() {
        assert_eq!("pure".parse::<Mode>().unwrap(), Mode::Pure);
        assert!("summary".parse::<Mode>().is_err());
        assert_eq!(parse_levels("1,2").unwrap(), vec![1, 2]);
        assert!(parse_levels("0").is_err());
        assert!(parse_levels("a").is_err());
    }

    #[test]
    fn naive_bayes_examples() {
        let nb = NaiveBayes::train(&[words("a a"), words("b b")], &["X".into(), "Y".into()]).unwrap();
        assert_eq!(nb.classify(&words("a")), "X");
        assert_eq!(nb.classify(&words("b")), "Y");
        // tie goes to the smaller label
        assert_eq!(nb.classify(&words("a b")), "X");
        assert_eq!(nb.classify(&words("zzz")), "X");
        let single = NaiveBayes::train(&[words("a"), words("b")], &["Z".into(), "Z".into()]).unwrap();
        assert_eq!(single.classify(&words("b a q")), "Z");
        assert!(NaiveBayes::train(&[], &[]).is_err());
    }

    /// Add-one smoothed posterior computed by hand.
    #[test]
    fn naive_bayes_posterior_by_hand() {
        let nb = NaiveBayes::train(&[words("a a b"), words("b c")], &["X".into(), "Y".into()]).unwrap();
        let s = nb.scores(&words("a c"));
        let x = 0.5f64.ln() + (3.0f64 / 6.0).ln() + (1.0f64 / 6.0).ln();
        let y = 0.5f64.ln() + (1.0f64 / 5.0).ln() + (2.0f64 / 5.0).ln();
        assert!((s[0].1 - x).abs() < 1e-12);
        assert!((s[1].1 - y).abs() < 1e-12);
    }

    #[test]
    fn accuracy_and_baseline() {
        assert_eq!(accuracy(&["a", "b"], &["a", "b"]), 1.0);
        assert_eq!(majority_baseline(&["a", "b", "b"], &["b", "a", "b", "b"]), 0.75);
    }

    #[test]
    fn report_formats() {
        let rep = AnalysisReport {
            rows: vec![ModeResult {
                mode: "pure".into(),
                levels: "1,2".into(),
                accuracy: 0.5,
                mean_tokens: 12.345,
                documents: 4,
            }],
            majority_baseline: 0.25,
        };
        let csv = rep.to_csv().unwrap();
        assert_eq!(csv, "mode,levels,accuracy,mean_tokens,documents\npure,\"1,2\",0.5000,12.35,4\n");
        let t = rep.to_table();
        assert!(t.lines().nth(1).unwrap().ends_with("12.35"));
        let widths: Vec<usize> = t.lines().map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]));
    }

    proptest! {
        #[test]
        fn naive_bayes_ignores_training_order(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let docs = synth_corpus(seed, 8, &VocabProfile::default());
            let mut data: Vec<(Vec<String>, String)> = docs
                .iter()
                .map(|d| (d.segments[0].tokens.clone(), d.label.clone().unwrap()))
                .collect();
            let split = |d: &[(Vec<String>, String)]| -> (Vec<Vec<String>>, Vec<String>) {
                d.iter().cloned().unzip()
            };
            let (a_in, a_l) = split(&data);
            let a = NaiveBayes::train(&a_in, &a_l).unwrap();
            data.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (b_in, b_l) = split(&data);
            let b = NaiveBayes::train(&b_in, &b_l).unwrap();
            for d in &docs {
                let t = &d.segments[0].tokens;
                prop_assert_eq!(a.classify(t), b.classify(t));
            }
        }
    }
}
