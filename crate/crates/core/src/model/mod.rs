//! Encoder-decoder transformer with the keyword-extraction head, the
//! slot-parallel generation head and keyword-aware control codes.

mod config;
mod dope;
mod transformer;

pub use config::ModelConfig;
pub use dope::{dope_ape, rpe_bucket};
pub use transformer::{attention_scale, is_decoder_param, is_encoder_param, slot_keywords, Group, Model, Net, SlotInput, SlotState};

use crate::corpus::{decode_bio, Bio, KeywordSpan};
use crate::numerics::Tensor;

/// Argmax label per row of an `S x 3` B/I/O distribution.
pub fn argmax_labels(p_w: &Tensor) -> Vec<Bio> {
    (0..p_w.rows())
        .map(|r| {
            let row = p_w.row_slice(r);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            Bio::from_class(best)
        })
        .collect()
}

/// Decodes predicted keyword spans and returns the `n_k` most confident
/// distinct ones. Confidence is the mean over the span of `max(p_B, p_I)`;
/// ties go to the earlier span.
pub fn predict_keywords(p_w: &Tensor, segment: &[String], n_k: usize) -> Vec<KeywordSpan> {
    let labels = argmax_labels(p_w);
    let mut spans: Vec<KeywordSpan> = decode_bio(&labels)
        .into_iter()
        .filter(|&(s, n)| s + n <= segment.len())
        .map(|(s, n)| {
            let conf = (s..s + n)
                .map(|r| p_w.get(r, Bio::B.class()).max(p_w.get(r, Bio::I.class())))
                .sum::<f64>()
                / n as f64;
            KeywordSpan {
                tokens: segment[s..s + n].to_vec(),
                start: s,
                confidence: conf,
            }
        })
        .collect();
    spans.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.start.cmp(&b.start)));
    let mut out: Vec<KeywordSpan> = Vec::new();
    for s in spans {
        if out.len() == n_k {
            break;
        }
        if !out.iter().any(|o| o.tokens == s.tokens) {
            out.push(s);
        }
    }
    out
}
