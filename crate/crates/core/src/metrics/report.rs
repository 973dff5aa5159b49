use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{duplication_ratio, f1_at_5, f1_at_m, is_present, map_at_k, ndcg_at_k, null_ratio, stem_seq};
use crate::corpus::{tokenize, MultiLevelDocument};
use crate::error::{Error, Result};

/// One predicted keyphrase with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub text: String,
    pub level: usize,
    pub group: String,
    pub confidence: f64,
}

/// A document's predictions as written by `generate` and `portrait`.
/// `slots` holds the raw per-level slot outputs (`None` for the null token)
/// when available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub keyphrases: Vec<PredictionEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slots: Vec<Vec<Option<String>>>,
}

impl PredictionRecord {
    /// Predictions in confidence order; ties keep level order, then file order.
    pub fn ranked(&self) -> Vec<Vec<String>> {
        let mut entries: Vec<&PredictionEntry> = self.keyphrases.iter().collect();
        entries.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.level.cmp(&b.level)));
        entries.iter().map(|e| tokenize(&e.text)).collect()
    }

    pub fn raw_slots(&self) -> Vec<Option<Vec<String>>> {
        self.slots
            .iter()
            .flatten()
            .map(|s| s.as_ref().map(|t| tokenize(t)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DocScores {
    pub id: String,
    pub f1_at_5: f64,
    pub f1_at_m: f64,
    pub present_f1_at_5: f64,
    pub present_f1_at_m: f64,
    pub absent_f1_at_5: f64,
    pub absent_f1_at_m: f64,
    pub map_at_5: f64,
    pub map_at_m: f64,
    pub ndcg_at_5: f64,
    pub ndcg_at_m: f64,
    pub duplication: Option<f64>,
    pub null_ratio: Option<f64>,
    pub n_predictions: f64,
    pub prediction_tokens: f64,
    pub source_tokens: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub documents: Vec<DocScores>,
    pub macro_avg: DocScores,
}

fn score(record: &PredictionRecord, doc: &MultiLevelDocument) -> Result<DocScores> {
    let ranked = record.ranked();
    let source: Vec<String> = stem_seq(&doc.all_tokens().cloned().collect::<Vec<_>>());
    let (present, absent): (Vec<Vec<String>>, Vec<Vec<String>>) =
        ranked.iter().cloned().partition(|p| is_present(p, &source));
    let targets: Vec<Vec<String>> = doc.keyphrases.all().cloned().collect();
    let m = ranked.len().max(1);
    let raw = record.raw_slots();
    Ok(DocScores {
        id: doc.doc_id.clone(),
        f1_at_5: f1_at_5(&ranked, &targets).f1,
        f1_at_m: f1_at_m(&ranked, &targets).f1,
        present_f1_at_5: f1_at_5(&present, &doc.keyphrases.present).f1,
        present_f1_at_m: f1_at_m(&present, &doc.keyphrases.present).f1,
        absent_f1_at_5: f1_at_5(&absent, &doc.keyphrases.absent).f1,
        absent_f1_at_m: f1_at_m(&absent, &doc.keyphrases.absent).f1,
        map_at_5: map_at_k(&ranked, &targets, 5)?,
        map_at_m: map_at_k(&ranked, &targets, m)?,
        ndcg_at_5: ndcg_at_k(&ranked, &targets, 5)?,
        ndcg_at_m: ndcg_at_k(&ranked, &targets, m)?,
        duplication: (!raw.is_empty()).then(|| duplication_ratio(&raw)),
        null_ratio: (!raw.is_empty()).then(|| null_ratio(&raw)),
        n_predictions: ranked.len() as f64,
        prediction_tokens: ranked.iter().map(Vec::len).sum::<usize>() as f64,
        source_tokens: doc.all_tokens().count() as f64,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn macro_average(rows: &[DocScores]) -> DocScores {
    let avg = |f: fn(&DocScores) -> f64| mean(rows.iter().map(f));
    let avg_opt = |f: fn(&DocScores) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| mean(v.into_iter()))
    };
    DocScores {
        id: "macro".into(),
        f1_at_5: avg(|r| r.f1_at_5),
        f1_at_m: avg(|r| r.f1_at_m),
        present_f1_at_5: avg(|r| r.present_f1_at_5),
        present_f1_at_m: avg(|r| r.present_f1_at_m),
        absent_f1_at_5: avg(|r| r.absent_f1_at_5),
        absent_f1_at_m: avg(|r| r.absent_f1_at_m),
        map_at_5: avg(|r| r.map_at_5),
        map_at_m: avg(|r| r.map_at_m),
        ndcg_at_5: avg(|r| r.ndcg_at_5),
        ndcg_at_m: avg(|r| r.ndcg_at_m),
        duplication: avg_opt(|r| r.duplication),
        null_ratio: avg_opt(|r| r.null_ratio),
        n_predictions: avg(|r| r.n_predictions),
        prediction_tokens: avg(|r| r.prediction_tokens),
        source_tokens: avg(|r| r.source_tokens),
    }
}

/// Scores every prediction record against its document. Documents without
/// a record are not scored; a record naming an unknown document is an error.
pub fn evaluate_documents(records: &[PredictionRecord], docs: &[MultiLevelDocument]) -> Result<EvalReport> {
    let by_id: HashMap<&str, &MultiLevelDocument> = docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let mut documents = Vec::with_capacity(records.len());
    for r in records {
        let doc = by_id
            .get(r.id.as_str())
            .ok_or_else(|| Error::invalid(format!("prediction for unknown document {:?}", r.id)))?;
        documents.push(score(r, doc)?);
    }
    let macro_avg = macro_average(&documents);
    Ok(EvalReport { documents, macro_avg })
}

impl EvalReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.documents.iter().chain(std::iter::once(&self.macro_avg)) {
            w.serialize(row).map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}
