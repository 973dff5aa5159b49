//! Keyword-padded targets, the keyword-extraction and generation losses, and
//! the three-stage training schedule.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign, Target, TargetList, TargetOrigin};
use crate::corpus::{bio_labels, derive_keywords, Bio, KeyphraseSet, KeywordSpan, MultiLevelDocument, Vocab, EOS, PAD};
use crate::error::{Error, Result};
use crate::inference::{phd_portrait, template_tokens, InferenceOptions, PromptedInput};
use crate::metrics::{duplication_ratio, null_ratio};
use crate::model::{is_decoder_param, is_encoder_param, predict_keywords, slot_keywords, Model, Net, SlotInput};
use crate::numerics::{AdamW, Tape, Tensor, Var, LOG_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsmtConfig {
    pub epochs: usize,
    pub stage1_epochs: usize,
    pub inner_epochs: usize,
    pub lambda_null: f64,
    pub lambda_kw: f64,
    pub lambda_g: f64,
    pub lr_w: f64,
    pub lr_g: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub kwp: bool,
    pub kcc: bool,
}

impl Default for TsmtConfig {
    fn default() -> Self {
        TsmtConfig {
            epochs: 40,
            stage1_epochs: 10,
            inner_epochs: 2,
            lambda_null: 0.2,
            lambda_kw: 0.7,
            lambda_g: 1.0,
            lr_w: 3e-4,
            lr_g: 3e-4,
            weight_decay: 0.01,
            batch_size: 8,
            seed: 0,
            kwp: true,
            kcc: true,
        }
    }
}

impl TsmtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        // E1 == E is allowed: a stage-1-only run
        if self.stage1_epochs > self.epochs {
            return bad("stage1_epochs must not exceed epochs");
        }
        if self.inner_epochs == 0 {
            return bad("inner_epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        for (name, v) in [
            ("lambda_null", self.lambda_null),
            ("lambda_kw", self.lambda_kw),
            ("lambda_g", self.lambda_g),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be a finite non-negative number"));
            }
        }
        if !(self.lr_w > 0.0 && self.lr_g > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    /// Generation loss weight for a target.
    pub fn xi(&self, origin: TargetOrigin) -> f64 {
        match origin {
            TargetOrigin::GroundTruth => 1.0,
            TargetOrigin::Keyword => self.lambda_kw,
            TargetOrigin::Null => self.lambda_null,
        }
    }
}

/// Padding keywords: ranked keywords that differ from every excluded phrase,
/// without repeats, limited to the room left after `n_present` keyphrases in
/// a group of `n / 2`.
pub fn padding_keywords(keywords: &[KeywordSpan], n_present: usize, exclude: &[Vec<String>], n: usize) -> Vec<Vec<String>> {
    let room = (n / 2).saturating_sub(n_present);
    let mut out: Vec<Vec<String>> = Vec::new();
    for k in keywords {
        if out.len() == room {
            break;
        }
        if !exclude.contains(&k.tokens) && !out.contains(&k.tokens) {
            out.push(k.tokens.clone());
        }
    }
    out
}

/// Target list of `n` entries. The present group holds the present
/// keyphrases, then padding keywords (ranked `keywords` minus `exclude`
/// and the present keyphrases), then null fill; the absent group holds the
/// absent keyphrases then null fill. Keyphrases beyond `n / 2` are dropped
/// with a warning.
pub fn kwp_build_targets(
    keyphrases: &KeyphraseSet,
    keywords: &[KeywordSpan],
    exclude: &[Vec<String>],
    n: usize,
    vocab: &Vocab,
) -> Result<TargetList> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::invalid(format!("slot count {n} must be positive and even")));
    }
    let half = n / 2;
    let truncate = |v: &[Vec<String>], what: &str| -> Vec<Vec<String>> {
        if v.len() > half {
            log::warn!("{} {what} keyphrases exceed {half} slots; keeping the first {half}", v.len());
        }
        v.iter().take(half).cloned().collect()
    };
    let present = truncate(&keyphrases.present, "present");
    let absent = truncate(&keyphrases.absent, "absent");
    let mut excluded: Vec<Vec<String>> = exclude.to_vec();
    excluded.extend(present.iter().cloned());
    let pads = padding_keywords(keywords, present.len(), &excluded, n);

    let fill = |mut v: Vec<Target>| {
        v.resize(half, Target::null());
        v
    };
    let gt = |p: &Vec<String>| Target::new(vocab.ids(p), TargetOrigin::GroundTruth);
    Ok(TargetList {
        present: fill(
            present
                .iter()
                .map(gt)
                .chain(pads.iter().map(|k| Target::new(vocab.ids(k), TargetOrigin::Keyword)))
                .collect(),
        ),
        absent: fill(absent.iter().map(gt).collect()),
    })
}

/// Reciprocal label counts `[B, I, O]` over a batch, counts floored at 1.
pub fn class_weights<'a>(labels: impl IntoIterator<Item = &'a [Bio]>) -> [f64; 3] {
    let mut counts = [0usize; 3];
    for seq in labels {
        for b in seq {
            counts[b.class()] += 1;
        }
    }
    counts.map(|c| 1.0 / c.max(1) as f64)
}

/// Class-weighted token cross-entropy over one segment, divided by its
/// length. Weights come from this segment alone.
pub fn loss_kwe(p_w: &Tensor, bio: &[Bio]) -> Result<f64> {
    loss_kwe_weighted(p_w, bio, class_weights([bio]))
}

pub fn loss_kwe_weighted(p_w: &Tensor, bio: &[Bio], weights: [f64; 3]) -> Result<f64> {
    if p_w.rows() != bio.len() || bio.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "loss_kwe",
            left: p_w.shape().to_vec(),
            right: vec![bio.len()],
        });
    }
    let s = bio.len() as f64;
    Ok(bio
        .iter()
        .enumerate()
        .map(|(r, b)| -weights[b.class()] * p_w.get(r, b.class()).max(LOG_FLOOR).ln())
        .sum::<f64>()
        / s)
}

/// `L1_W + lambda_g * mean(inner)`.
pub fn loss_encoder_stage3(l1_w: f64, inner: &[f64], lambda_g: f64) -> f64 {
    if inner.is_empty() {
        return l1_w;
    }
    l1_w + lambda_g * inner.iter().sum::<f64>() / inner.len() as f64
}

/// Teacher-forcing layout for assigned targets: each target followed by EOS
/// and cut at `m` tokens. Rows are slot-major with `T` steps per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForcing {
    pub steps: usize,
    pub prefixes: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn teacher_forcing(slot_targets: &[Target], m: usize, xi: impl Fn(TargetOrigin) -> f64) -> TeacherForcing {
    let seqs: Vec<Vec<usize>> = slot_targets
        .iter()
        .map(|t| {
            let mut s = t.tokens.clone();
            s.push(EOS);
            s.truncate(m);
            s
        })
        .collect();
    let steps = seqs.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let mut prefixes = Vec::with_capacity(seqs.len());
    let mut targets = Vec::with_capacity(seqs.len() * steps);
    let mut weights = Vec::with_capacity(seqs.len() * steps);
    for (seq, t) in seqs.iter().zip(slot_targets) {
        let mut prefix = vec![PAD];
        prefix.extend(&seq[..seq.len() - 1]);
        prefix.resize(steps, PAD);
        prefixes.push(prefix);
        let w = xi(t.origin);
        for i in 0..steps {
            targets.push(seq.get(i).copied().unwrap_or(PAD));
            weights.push(if i < seq.len() { w } else { 0.0 });
        }
    }
    TeacherForcing {
        steps,
        prefixes,
        targets,
        weights,
    }
}

/// Generation loss on a tape: weighted sum of per-token cross-entropies of
/// the teacher-forced decode.
pub fn kg_loss_tape(
    net: &Net,
    tape: &mut Tape,
    h_e: Var,
    keywords: &[Vec<usize>],
    slot_targets: &[Target],
    xi: impl Fn(TargetOrigin) -> f64,
) -> Result<Var> {
    let tf = teacher_forcing(slot_targets, net.model.config.max_kp_len, xi);
    let inputs: Vec<SlotInput> = tf
        .prefixes
        .iter()
        .zip(keywords)
        .map(|(p, k)| SlotInput {
            keyword: k.clone(),
            prefix: p.clone(),
        })
        .collect();
    let logits = net.decode(tape, h_e, &inputs)?;
    tape.softmax_xent(logits, tf.targets, tf.weights)
}

/// Value of the generation loss for fixed encoder states.
pub fn loss_kg(
    model: &Model,
    h_e: &Tensor,
    keywords: &[Vec<usize>],
    slot_targets: &[Target],
    config: &TsmtConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let net = model.bind(&mut tape, &|_| false);
    let h = tape.constant(h_e.clone());
    let l = kg_loss_tape(&net, &mut tape, h, keywords, slot_targets, |o| config.xi(o))?;
    Ok(tape.value(l).item())
}

/// Class-weighted KWE loss on a tape; `weights` already hold the batch
/// reciprocals.
pub fn kwe_loss_tape(net: &Net, tape: &mut Tape, h_e: Var, bio: &[Bio], weights: [f64; 3]) -> Result<Var> {
    let s = bio.len() as f64;
    let logits = net.kwe_logits(tape, h_e)?;
    let targets = bio.iter().map(|b| b.class()).collect();
    let w = bio.iter().map(|b| weights[b.class()] / s).collect();
    tape.softmax_xent(logits, targets, w)
}

/// One training segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub doc: usize,
    pub level: usize,
    pub body: Vec<String>,
    pub body_ids: Vec<usize>,
    pub bio: Vec<Bio>,
    pub keyphrases: KeyphraseSet,
    /// Reference keyphrases of the level above, used as the prompt.
    pub prev_gold: Option<Vec<Vec<String>>>,
    /// Document-level present keyphrases, never used as padding.
    pub exclude: Vec<Vec<String>>,
}

/// Vocabulary over document tokens, keyphrase tokens and the prompt
/// template.
pub fn corpus_vocab(docs: &[MultiLevelDocument]) -> Vocab {
    let template = template_tokens();
    let mut seqs: Vec<&[String]> = vec![&template];
    for d in docs {
        seqs.extend(d.segments.iter().map(|s| s.tokens.as_slice()));
        seqs.extend(d.keyphrases.all().map(Vec::as_slice));
    }
    Vocab::build(seqs)
}

pub fn build_examples(docs: &[MultiLevelDocument], vocab: &Vocab, max_input_len: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (di, doc) in docs.iter().enumerate() {
        for (si, seg) in doc.segments.iter().enumerate() {
            let spans = derive_keywords(seg, &doc.keyphrases);
            let mut bio = bio_labels(seg, &spans)?;
            let len = seg.tokens.len().min(max_input_len);
            bio.truncate(len);
            let body = seg.tokens[..len].to_vec();
            if body.is_empty() {
                continue;
            }
            let prev_gold = (si > 0).then(|| {
                let kp = doc.segment_keyphrases(si - 1);
                kp.present.into_iter().chain(kp.absent).collect()
            });
            out.push(Example {
                doc: di,
                level: si + 1,
                body_ids: vocab.ids(&body),
                body,
                bio,
                keyphrases: doc.segment_keyphrases(si),
                prev_gold,
                exclude: doc.keyphrases.present.clone(),
            });
        }
    }
    Ok(out)
}

/// Stage-2 state of one example: prompted encoder input, its (frozen)
/// encoder states, slot keywords, targets, and the accumulated gradient of
/// the inner-epoch losses with respect to the encoder states.
#[derive(Debug, Clone)]
pub struct KgItem {
    pub prompt: PromptedInput,
    pub ids: Vec<usize>,
    pub h_e: Tensor,
    pub keywords: Vec<Vec<usize>>,
    pub targets: TargetList,
    pub dh: Vec<f64>,
}

fn check_finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

fn add_grads(acc: &mut Vec<Option<Vec<f64>>>, g: Vec<Option<Vec<f64>>>) {
    if acc.is_empty() {
        *acc = g;
        return;
    }
    for (a, g) in acc.iter_mut().zip(g) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

fn scale_grads(g: &mut [Option<Vec<f64>>], c: f64) {
    for v in g.iter_mut().flatten() {
        v.iter_mut().for_each(|x| *x *= c);
    }
}

pub struct Trainer {
    pub model: Model,
    pub vocab: Vocab,
    pub config: TsmtConfig,
    enc_opt: AdamW,
    dec_opt: AdamW,
}

impl Trainer {
    pub fn new(model: Model, vocab: Vocab, config: TsmtConfig) -> Result<Self> {
        config.validate()?;
        model.config.validate()?;
        if vocab.len() != model.config.vocab_size {
            return Err(Error::VocabMismatch(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        let mut enc_opt = AdamW::new(config.lr_w);
        enc_opt.weight_decay = config.weight_decay;
        let mut dec_opt = AdamW::new(config.lr_g);
        dec_opt.weight_decay = config.weight_decay;
        Ok(Trainer {
            model,
            vocab,
            config,
            enc_opt,
            dec_opt,
        })
    }

    /// Encoder forward for the KWE loss of a batch on `tape`; returns the
    /// summed per-item losses divided by the batch size.
    fn kwe_batch(&self, net: &Net, tape: &mut Tape, batch: &[&Example]) -> Result<Var> {
        let weights = class_weights(batch.iter().map(|e| e.bio.as_slice()));
        let mut total: Option<Var> = None;
        for e in batch {
            let h = net.encode(tape, &e.body_ids)?;
            let l = kwe_loss_tape(net, tape, h, &e.bio, weights)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
        Ok(tape.scale(total, 1.0 / batch.len() as f64))
    }

    /// One encoder + KWE-head update on `L1_W`; the decoder is untouched.
    pub fn stage1_step(&mut self, batch: &[&Example]) -> Result<f64> {
        let mut tape = Tape::new();
        let net = self.model.bind(&mut tape, &is_encoder_param);
        let loss = self.kwe_batch(&net, &mut tape, batch)?;
        let value = check_finite("L1_W", tape.value(loss).item())?;
        let grads = net.bound.grads(&tape.backward(loss));
        self.enc_opt.step(&mut self.model.params, &grads);
        Ok(value)
    }

    /// Predicted keywords, prompts, encoder states and target lists for a
    /// batch under the current encoder.
    pub fn prepare_kg(&self, batch: &[&Example]) -> Result<Vec<KgItem>> {
        let cfg = &self.model.config;
        batch
            .iter()
            .map(|e| {
                let p_w = self.model.kwe_forward(&self.model.encode(&e.body_ids)?)?;
                let keywords = predict_keywords(&p_w, &e.body, usize::MAX);
                let prev = match &e.prev_gold {
                    Some(g) => g.clone(),
                    None => {
                        let mut by_pos = keywords.clone();
                        by_pos.sort_by_key(|k| k.start);
                        by_pos.into_iter().map(|k| k.tokens).collect()
                    }
                };
                let prompt = PromptedInput::build(e.level, &prev, &e.body, cfg.max_input_len)?;
                let ids = prompt.ids(&self.vocab);
                let h_e = self.model.encode(&ids)?;
                let pool: &[KeywordSpan] = if self.config.kwp { &keywords } else { &[] };
                let targets = kwp_build_targets(&e.keyphrases, pool, &e.exclude, cfg.n_slots, &self.vocab)?;
                let top: Vec<Vec<usize>> = if self.config.kcc {
                    keywords.iter().take(cfg.n_keywords).map(|k| self.vocab.ids(&k.tokens)).collect()
                } else {
                    Vec::new()
                };
                Ok(KgItem {
                    dh: vec![0.0; h_e.len()],
                    prompt,
                    ids,
                    h_e,
                    keywords: slot_keywords(&top, cfg),
                    targets,
                })
            })
            .collect()
    }

    /// One inner epoch: assign targets with the current decoder, update the
    /// decoder + KG head on `L_G`, and accumulate `dL_G / dH_E` per item.
    pub fn stage2_inner(&mut self, items: &mut [KgItem]) -> Result<f64> {
        let b = items.len() as f64;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        let mut total = 0.0;
        for item in items.iter_mut() {
            let a = assign(&self.model, &item.h_e, &item.keywords, &item.targets, self.model.config.k)?;
            let mut tape = Tape::new();
            let net = self.model.bind(&mut tape, &is_decoder_param);
            let h = tape.leaf(item.h_e.clone().with_grad());
            let cfg = &self.config;
            let loss = kg_loss_tape(&net, &mut tape, h, &item.keywords, &a.slot_targets, |o| cfg.xi(o))?;
            total += check_finite("L_G", tape.value(loss).item())?;
            let g = tape.backward(loss);
            if let Some(dh) = g.get(h) {
                item.dh.iter_mut().zip(dh).for_each(|(x, y)| *x += y / b);
            }
            add_grads(&mut grads, net.bound.grads(&g));
        }
        scale_grads(&mut grads, 1.0 / b);
        self.dec_opt.step(&mut self.model.params, &grads);
        Ok(total / b)
    }

    /// Gradient of `L2_W = L1_W + lambda_g / E2 * sum L_G` with respect to
    /// the encoder + KWE head. The generation term enters through the
    /// accumulated encoder-state gradients of the prompted inputs. Returns
    /// `(L1_W, L2_W, grads)`.
    pub fn stage3_grads(
        &self,
        batch: &[&Example],
        items: &[KgItem],
        inner: &[f64],
    ) -> Result<(f64, f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let net = self.model.bind(&mut tape, &is_encoder_param);
        let l1 = self.kwe_batch(&net, &mut tape, batch)?;
        let l1_value = check_finite("L1_W", tape.value(l1).item())?;
        let c = self.config.lambda_g / inner.len().max(1) as f64;
        let mut seeds = vec![(l1, vec![1.0])];
        for item in items {
            let h = net.encode(&mut tape, &item.ids)?;
            seeds.push((h, item.dh.iter().map(|x| c * x).collect()));
        }
        let grads = net.bound.grads(&tape.backward_seeded(&seeds));
        let l2 = check_finite("L2_W", loss_encoder_stage3(l1_value, inner, self.config.lambda_g))?;
        Ok((l1_value, l2, grads))
    }

    /// One encoder + KWE-head update on `L2_W`; returns `(L1_W, L2_W)`.
    pub fn stage3_step(&mut self, batch: &[&Example], items: &[KgItem], inner: &[f64]) -> Result<(f64, f64)> {
        let (l1, l2, grads) = self.stage3_grads(batch, items, inner)?;
        self.enc_opt.step(&mut self.model.params, &grads);
        Ok((l1, l2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Kwe,
    Kg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub stage: Stage,
    pub l1_w: f64,
    pub l_g: Option<f64>,
    pub l2_w: Option<f64>,
    pub null_pct: Option<f64>,
    pub dup_ratio: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub epochs: Vec<EpochLoss>,
}

impl LossReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.epochs {
            w.serialize(row).map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Null and duplication ratios of raw slot outputs over probe documents.
pub fn probe_ratios(model: &Model, vocab: &Vocab, probe: &[MultiLevelDocument], opts: InferenceOptions) -> Result<(f64, f64)> {
    let mut nulls = Vec::new();
    let mut dups = Vec::new();
    for d in probe {
        let p = phd_portrait(model, vocab, d, opts)?;
        for l in &p.levels {
            let raw: Vec<Option<Vec<String>>> = l.raw.iter().map(|r| (!r.is_null).then(|| r.tokens.clone())).collect();
            nulls.push(null_ratio(&raw));
            dups.push(duplication_ratio(&raw));
        }
    }
    Ok((mean(&nulls), mean(&dups)))
}

/// Runs the full schedule. Epochs up to `stage1_epochs` train the encoder
/// on keyword extraction alone; every later epoch runs, per batch, `E2`
/// decoder epochs followed by one encoder update. A checkpoint is written to
/// `ckpt_dir/latest.ckpt` after every epoch when a directory is given.
pub fn tsmt_train(
    model: Model,
    vocab: &Vocab,
    docs: &[MultiLevelDocument],
    config: &TsmtConfig,
    probe: &[MultiLevelDocument],
    ckpt_dir: Option<&Path>,
) -> Result<(Model, LossReport)> {
    let examples = build_examples(docs, vocab, model.config.max_input_len)?;
    if examples.is_empty() {
        return Err(Error::invalid("no training segments"));
    }
    let mut trainer = Trainer::new(model, vocab.clone(), config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = LossReport::default();
    let opts = InferenceOptions {
        kwp: config.kwp,
        kcc: config.kcc,
        hierarchical: true,
    };
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let kg = epoch > config.stage1_epochs;
        let (mut l1s, mut lgs, mut l2s) = (Vec::new(), Vec::new(), Vec::new());
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            if !kg {
                l1s.push(trainer.stage1_step(&batch)?);
                continue;
            }
            let mut items = trainer.prepare_kg(&batch)?;
            let mut inner = Vec::with_capacity(config.inner_epochs);
            for _ in 0..config.inner_epochs {
                inner.push(trainer.stage2_inner(&mut items)?);
            }
            let (l1, l2) = trainer.stage3_step(&batch, &items, &inner)?;
            l1s.push(l1);
            lgs.push(mean(&inner));
            l2s.push(l2);
        }
        let (null_pct, dup_ratio) = if kg && !probe.is_empty() {
            let (n, d) = probe_ratios(&trainer.model, vocab, probe, opts)?;
            (Some(n), Some(d))
        } else {
            (None, None)
        };
        let row = EpochLoss {
            epoch,
            stage: if kg { Stage::Kg } else { Stage::Kwe },
            l1_w: mean(&l1s),
            l_g: kg.then(|| mean(&lgs)),
            l2_w: kg.then(|| mean(&l2s)),
            null_pct,
            dup_ratio,
        };
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        log::info!(
            "epoch {epoch} {:?}: L1_W {:.4} L_G {} L2_W {} null {} dup {}",
            row.stage,
            row.l1_w,
            opt(row.l_g),
            opt(row.l2_w),
            opt(row.null_pct),
            opt(row.dup_ratio)
        );
        report.epochs.push(row);
        if let Some(dir) = ckpt_dir {
            trainer.model.save(&dir.join("latest.ckpt"), vocab)?;
        }
    }
    Ok((trainer.model, report))
}

#[cfg(test)]
mod tests;
