use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::dope::{dope_ape, rpe_bucket};
use crate::corpus::{KeywordSpan, Vocab, PAD};
use crate::error::{Error, Result};
use crate::numerics::{
    load_checkpoint, random_tensor, save_checkpoint, scaled_normal_tensor, Bound, ParamStore, Tape, Tensor, Var,
};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Present,
    Absent,
}

/// Decoder input for one slot: keyword token ids folded into its control
/// embedding (empty for none) and the prefix `w^0 .. w^{T-1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotInput {
    pub keyword: Vec<usize>,
    pub prefix: Vec<usize>,
}

/// One slot during free-running decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotState {
    pub slot: usize,
    pub group: Group,
    pub keyword: Option<KeywordSpan>,
    pub keyword_ids: Vec<usize>,
    /// `w^0 .. w^{t}`; `w^0` is the start token.
    pub prefix: Vec<usize>,
    /// `p^1 .. p^t`, one per emitted token.
    pub dists: Vec<Vec<f64>>,
}

impl SlotState {
    pub fn new(slot: usize, n_slots: usize, keyword: Option<KeywordSpan>, vocab: &Vocab) -> Self {
        let keyword_ids = keyword.as_ref().map(|k| vocab.ids(&k.tokens)).unwrap_or_default();
        SlotState {
            slot,
            group: if slot < n_slots / 2 { Group::Present } else { Group::Absent },
            keyword,
            keyword_ids,
            prefix: vec![PAD],
            dists: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    vocab: Vocab,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("kwe.")
}

pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("dec.") || name.starts_with("kg.")
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v, f, nb, h) = (
            config.d,
            config.vocab_size,
            config.ffn_width,
            config.rpe_buckets,
            config.n_heads,
        );
        let mut p = ParamStore::new();
        let rng = &mut rng;

        let attn = |p: &mut ParamStore, rng: &mut ChaCha8Rng, pre: &str| -> Result<()> {
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("{pre}.{w}"), scaled_normal_tensor(rng, &[d, d]))?;
            }
            Ok(())
        };
        let norm = |p: &mut ParamStore, pre: &str| -> Result<()> {
            p.insert(format!("{pre}.g"), Tensor::full(&[1, d], 1.0))?;
            p.insert(format!("{pre}.b"), Tensor::zeros(&[1, d]))?;
            Ok(())
        };
        let ffn = |p: &mut ParamStore, rng: &mut ChaCha8Rng, pre: &str| -> Result<()> {
            p.insert(format!("{pre}.w1"), scaled_normal_tensor(rng, &[d, f]))?;
            p.insert(format!("{pre}.b1"), Tensor::zeros(&[1, f]))?;
            p.insert(format!("{pre}.w2"), scaled_normal_tensor(rng, &[f, d]))?;
            p.insert(format!("{pre}.b2"), Tensor::zeros(&[1, d]))?;
            Ok(())
        };

        p.insert("enc.embed", random_tensor(rng, &[v, d]))?;
        p.insert("enc.rpe", scaled_normal_tensor(rng, &[nb, h]))?;
        for l in 0..config.n_enc_layers {
            norm(&mut p, &format!("enc.l{l}.ln1"))?;
            attn(&mut p, rng, &format!("enc.l{l}.attn"))?;
            norm(&mut p, &format!("enc.l{l}.ln2"))?;
            ffn(&mut p, rng, &format!("enc.l{l}.ff"))?;
        }
        norm(&mut p, "enc.ln_f")?;
        p.insert("kwe.w", scaled_normal_tensor(rng, &[d, 3]))?;
        p.insert("kwe.b", Tensor::zeros(&[1, 3]))?;

        p.insert("dec.embed", random_tensor(rng, &[v, d]))?;
        p.insert("dec.codes", random_tensor(rng, &[config.n_slots, d]))?;
        p.insert("dec.rpe", scaled_normal_tensor(rng, &[nb, h]))?;
        for l in 0..config.n_dec_layers {
            norm(&mut p, &format!("dec.l{l}.ln1"))?;
            attn(&mut p, rng, &format!("dec.l{l}.self"))?;
            norm(&mut p, &format!("dec.l{l}.ln2"))?;
            attn(&mut p, rng, &format!("dec.l{l}.cross"))?;
            norm(&mut p, &format!("dec.l{l}.ln3"))?;
            ffn(&mut p, rng, &format!("dec.l{l}.ff"))?;
        }
        norm(&mut p, "dec.ln_f")?;
        p.insert("kg.w", scaled_normal_tensor(rng, &[d, v]))?;
        p.insert("kg.b", Tensor::zeros(&[1, v]))?;

        Ok(Model { config, params: p })
    }

    /// Copies the parameters onto `tape`; gradients are tracked for the
    /// parameters selected by `trainable`.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Net<'a> {
        Net {
            model: self,
            bound: self.params.bind(tape, trainable),
        }
    }

    pub fn save(&self, path: &Path, vocab: &Vocab) -> Result<()> {
        let meta = CheckpointMeta {
            model: self.config.clone(),
            vocab: vocab.clone(),
        };
        let json = serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        save_checkpoint(path, &json, &self.params)
    }

    /// Loads a checkpoint and checks every parameter shape against a freshly
    /// initialized model of the stored configuration.
    pub fn load(path: &Path) -> Result<(Model, Vocab)> {
        let (json, params) = load_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if meta.vocab.len() != meta.model.vocab_size || !meta.vocab.has_specials() {
            return Err(Error::VocabMismatch(format!(
                "checkpoint vocabulary has {} entries, model expects {}",
                meta.vocab.len(),
                meta.model.vocab_size
            )));
        }
        let reference = Model::init(meta.model.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok((Model { config: meta.model, params }, meta.vocab))
    }

    fn frozen(&self, tape: &mut Tape) -> Net<'_> {
        self.bind(tape, &|_| false)
    }

    pub fn encode(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = self.frozen(&mut tape);
        let h = net.encode(&mut tape, ids)?;
        Ok(tape.value(h).clone())
    }

    /// Per-token B/I/O distributions for encoder states `h_e`.
    pub fn kwe_forward(&self, h_e: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = self.frozen(&mut tape);
        let h = tape.constant(h_e.clone());
        let logits = net.kwe_logits(&mut tape, h)?;
        let p = tape.softmax(logits, 1)?;
        Ok(tape.value(p).clone())
    }

    /// `e(C_n)` plus the summed decoder embeddings of the keyword tokens.
    pub fn control_embedding(&self, keyword: &[usize], slot: usize) -> Result<Vec<f64>> {
        if slot >= self.config.n_slots {
            return Err(Error::IndexOutOfRange {
                what: "slot",
                index: slot,
                len: self.config.n_slots,
            });
        }
        let embed = self.params.get("dec.embed").expect("dec.embed");
        let mut out = self.params.get("dec.codes").expect("dec.codes").row_slice(slot).to_vec();
        for &id in keyword {
            if id >= embed.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "keyword token",
                    index: id,
                    len: embed.rows(),
                });
            }
            for (o, x) in out.iter_mut().zip(embed.row_slice(id)) {
                *o += x;
            }
        }
        Ok(out)
    }

    /// Distributions `p^t_n` for every slot, given prefixes of length at
    /// least `t` (only `w^0 .. w^{t-1}` are read).
    pub fn decode_step(&self, h_e: &Tensor, slots: &[SlotState], t: usize) -> Result<Vec<Vec<f64>>> {
        if t == 0 || t > self.config.max_kp_len {
            return Err(Error::invalid(format!(
                "decode step {t} outside 1..={}",
                self.config.max_kp_len
            )));
        }
        let inputs = slots
            .iter()
            .map(|s| {
                if s.prefix.len() < t {
                    return Err(Error::invalid(format!("slot {} has a prefix shorter than {t}", s.slot)));
                }
                Ok(SlotInput {
                    keyword: s.keyword_ids.clone(),
                    prefix: s.prefix[..t].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let net = self.frozen(&mut tape);
        let h = tape.constant(h_e.clone());
        let logits = net.decode(&mut tape, h, &inputs)?;
        let p = tape.softmax(logits, 1)?;
        let pv = tape.value(p);
        Ok((0..slots.len()).map(|n| pv.row_slice(n * t + t - 1).to_vec()).collect())
    }
}

/// Factor applied to `QK^T + bias` before the softmax.
pub fn attention_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

/// A model bound onto a tape.
pub struct Net<'a> {
    pub model: &'a Model,
    pub bound: Bound,
}

impl Net<'_> {
    pub fn param(&self, name: &str) -> Var {
        let id = self
            .model
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.bound.var(id)
    }

    fn norm(&self, tape: &mut Tape, pre: &str, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.param(&format!("{pre}.g")), self.param(&format!("{pre}.b")), LN_EPS)
    }

    fn attend(
        &self,
        tape: &mut Tape,
        pre: &str,
        xq: Var,
        xkv: Var,
        bias: Option<Var>,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let cfg = &self.model.config;
        let q = tape.matmul(xq, self.param(&format!("{pre}.wq")))?;
        let k = tape.matmul(xkv, self.param(&format!("{pre}.wk")))?;
        let v = tape.matmul(xkv, self.param(&format!("{pre}.wv")))?;
        let scale = attention_scale(cfg.head_dim());
        let a = tape.attention(q, k, v, bias, mask, cfg.n_heads, scale)?;
        tape.matmul(a, self.param(&format!("{pre}.wo")))
    }

    fn feed_forward(&self, tape: &mut Tape, pre: &str, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.param(&format!("{pre}.w1")))?;
        let h = tape.add_row(h, self.param(&format!("{pre}.b1")))?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, self.param(&format!("{pre}.w2")))?;
        tape.add_row(h, self.param(&format!("{pre}.b2")))
    }

    /// Encoder states `H_E`, one row per input token.
    pub fn encode(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let cfg = &self.model.config;
        let s = ids.len();
        if s == 0 || s > cfg.max_input_len {
            return Err(Error::invalid(format!(
                "encoder input length {s} outside 1..={}",
                cfg.max_input_len
            )));
        }
        let mut x = tape.embed(self.param("enc.embed"), ids)?;
        let buckets = (0..s * s)
            .map(|uv| rpe_bucket(uv / s, uv % s, cfg.rpe_buckets, cfg.rpe_max_distance, true))
            .collect();
        let bias = tape.rel_bias(self.param("enc.rpe"), buckets, s, s)?;
        for l in 0..cfg.n_enc_layers {
            let h = self.norm(tape, &format!("enc.l{l}.ln1"), x)?;
            let a = self.attend(tape, &format!("enc.l{l}.attn"), h, h, Some(bias), None)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, &format!("enc.l{l}.ln2"), x)?;
            let f = self.feed_forward(tape, &format!("enc.l{l}.ff"), h)?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, "enc.ln_f", x)
    }

    /// Unnormalized B/I/O scores, `S x 3`.
    pub fn kwe_logits(&self, tape: &mut Tape, h_e: Var) -> Result<Var> {
        let z = tape.matmul(h_e, self.param("kwe.w"))?;
        tape.add_row(z, self.param("kwe.b"))
    }

    /// Control embeddings for all slots, `N x d`.
    pub fn controls(&self, tape: &mut Tape, keywords: Vec<Vec<usize>>) -> Result<Var> {
        let kw = tape.gather_sum(self.param("dec.embed"), keywords)?;
        tape.add(kw, self.param("dec.codes"))
    }

    /// Vocabulary logits for all slots and steps, `(N * T) x |V|`, rows
    /// ordered slot-major (`n * T + t - 1` holds step `t` of slot `n`).
    /// Every slot attends only to its own earlier steps.
    pub fn decode(&self, tape: &mut Tape, h_e: Var, slots: &[SlotInput]) -> Result<Var> {
        let cfg = &self.model.config;
        if slots.len() != cfg.n_slots {
            return Err(Error::invalid(format!("{} slots, model has {}", slots.len(), cfg.n_slots)));
        }
        let t_len = slots[0].prefix.len();
        if t_len == 0 || t_len > cfg.max_kp_len || slots.iter().any(|s| s.prefix.len() != t_len) {
            return Err(Error::invalid(format!(
                "slot prefixes must share a length in 1..={}",
                cfg.max_kp_len
            )));
        }
        let rows = cfg.n_slots * t_len;
        let ctrl = self.controls(tape, slots.iter().map(|s| s.keyword.clone()).collect())?;
        let ctrl_rows = tape.gather_sum(ctrl, (0..rows).map(|r| vec![r / t_len]).collect())?;
        let ids: Vec<usize> = slots.iter().flat_map(|s| s.prefix.iter().copied()).collect();
        let tok = tape.embed(self.param("dec.embed"), &ids)?;
        let mut ape = Vec::with_capacity(rows * cfg.d);
        for _ in 0..cfg.n_slots {
            for t in 1..=t_len {
                ape.extend(dope_ape(t, cfg.d));
            }
        }
        let ape = tape.constant(Tensor::new(vec![rows, cfg.d], ape)?);
        let x = tape.add(tok, ctrl_rows)?;
        let mut x = tape.add(x, ape)?;

        let mut mask = vec![false; rows * rows];
        let mut buckets = vec![0; rows * rows];
        for u in 0..rows {
            for v in 0..rows {
                if u / t_len == v / t_len && v <= u {
                    mask[u * rows + v] = true;
                    buckets[u * rows + v] =
                        rpe_bucket(u % t_len, v % t_len, cfg.rpe_buckets, cfg.rpe_max_distance, false);
                }
            }
        }
        let bias = tape.rel_bias(self.param("dec.rpe"), buckets, rows, rows)?;

        for l in 0..cfg.n_dec_layers {
            let h = self.norm(tape, &format!("dec.l{l}.ln1"), x)?;
            let a = self.attend(tape, &format!("dec.l{l}.self"), h, h, Some(bias), Some(&mask))?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, &format!("dec.l{l}.ln2"), x)?;
            let c = self.attend(tape, &format!("dec.l{l}.cross"), h, h_e, None, None)?;
            x = tape.add(x, c)?;
            let h = self.norm(tape, &format!("dec.l{l}.ln3"), x)?;
            let f = self.feed_forward(tape, &format!("dec.l{l}.ff"), h)?;
            x = tape.add(x, f)?;
        }
        let x = self.norm(tape, "dec.ln_f", x)?;
        let z = tape.matmul(x, self.param("kg.w"))?;
        tape.add_row(z, self.param("kg.b"))
    }
}

/// Keyword token ids per slot: the i-th ranked keyword (i < N_K) goes to
/// slot i of both groups; all other slots get none.
pub fn slot_keywords(keywords: &[Vec<usize>], config: &ModelConfig) -> Vec<Vec<usize>> {
    let half = config.group_size();
    (0..config.n_slots)
        .map(|n| {
            let i = n % half;
            if i < config.n_keywords {
                keywords.get(i).cloned().unwrap_or_default()
            } else {
                Vec::new()
            }
        })
        .collect()
}
