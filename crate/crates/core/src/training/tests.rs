use super::*;
use crate::assignment::assign;
use crate::corpus::{synth_corpus, VocabProfile, NULL};
use crate::model::ModelConfig;
use crate::numerics::{grad_check, Bound};
use proptest::prelude::*;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn kw(s: &str, conf: f64) -> KeywordSpan {
    KeywordSpan {
        tokens: words(s),
        start: 0,
        confidence: conf,
    }
}

fn toy_vocab() -> Vocab {
    let toks = words("neural network model graph tree alpha beta gamma delta a b c");
    Vocab::build([toks.as_slice()])
}

fn render(v: &Vocab, ts: &[Target]) -> Vec<String> {
    ts.iter().map(|t| v.tokens_of(&t.tokens).join(" ")).collect()
}

#[test]
fn kwp_removes_keywords_equal_to_present_keyphrases() {
    let v = toy_vocab();
    let kp = KeyphraseSet {
        present: vec![words("neural network")],
        absent: vec![],
    };
    let t = kwp_build_targets(&kp, &[kw("model", 0.9), kw("graph", 0.8)], &[words("model")], 8, &v).unwrap();
    assert_eq!(render(&v, &t.present), ["neural network", "graph", "[null]", "[null]"]);
    assert_eq!(t.present[1].origin, TargetOrigin::Keyword);
    assert!(t.absent.iter().all(Target::is_null));
}

#[test]
fn kwp_null_fill_without_keywords() {
    let v = toy_vocab();
    let kp = KeyphraseSet {
        present: vec![words("tree")],
        absent: vec![words("alpha beta")],
    };
    let t = kwp_build_targets(&kp, &[], &[], 4, &v).unwrap();
    assert_eq!(render(&v, &t.present), ["tree", "[null]"]);
    assert_eq!(render(&v, &t.absent), ["alpha beta", "[null]"]);
    assert!(kwp_build_targets(&kp, &[], &[], 5, &v).is_err());
}

#[test]
fn kwp_keeps_most_confident_keywords_that_fit() {
    let v = toy_vocab();
    let kp = KeyphraseSet {
        present: vec![words("a"), words("b")],
        absent: vec![],
    };
    let ranked = [kw("gamma", 0.9), kw("alpha", 0.7), kw("delta", 0.2)];
    let t = kwp_build_targets(&kp, &ranked, &[], 8, &v).unwrap();
    assert_eq!(render(&v, &t.present), ["a", "b", "gamma", "alpha"]);
}

#[test]
fn kwp_truncates_excess_keyphrases_in_order() {
    let v = toy_vocab();
    let kp = KeyphraseSet {
        present: vec![],
        absent: ["a", "b", "c"].iter().map(|s| words(s)).collect(),
    };
    let t = kwp_build_targets(&kp, &[], &[], 4, &v).unwrap();
    assert_eq!(render(&v, &t.absent), ["a", "b"]);
}

proptest! {
    #[test]
    fn kwp_size_and_exclusion(
        n_half in 1usize..6,
        present in prop::collection::vec(0usize..6, 0..5),
        absent in prop::collection::vec(0usize..6, 0..5),
        kws in prop::collection::vec(0usize..6, 0..8),
        excl in prop::collection::vec(0usize..6, 0..3),
    ) {
        let pool = ["tree", "alpha", "beta", "gamma", "delta", "graph"];
        let v = toy_vocab();
        let w = |i: &usize| vec![pool[*i].to_string()];
        let kp = KeyphraseSet {
            present: present.iter().map(w).collect(),
            absent: absent.iter().map(w).collect(),
        };
        let keywords: Vec<KeywordSpan> = kws.iter().map(|i| kw(pool[*i], 0.5)).collect();
        let exclude: Vec<Vec<String>> = excl.iter().map(w).collect();
        let t = kwp_build_targets(&kp, &keywords, &exclude, 2 * n_half, &v).unwrap();
        prop_assert_eq!(t.present.len(), n_half);
        prop_assert_eq!(t.absent.len(), n_half);
        for target in t.present.iter().filter(|t| t.origin == TargetOrigin::Keyword) {
            let toks = v.tokens_of(&target.tokens);
            prop_assert!(!exclude.contains(&toks));
            prop_assert!(!kp.present.contains(&toks));
        }
    }
}

#[test]
fn class_weight_reciprocals() {
    let mut bio = vec![Bio::B, Bio::I];
    bio.extend([Bio::O; 8]);
    assert_eq!(class_weights([bio.as_slice()]), [1.0, 1.0, 0.125]);
    assert_eq!(class_weights([[Bio::O, Bio::O].as_slice(), &[Bio::O]]), [1.0, 1.0, 1.0 / 3.0]);
}

#[test]
fn kwe_loss_examples() {
    let uniform = Tensor::full(&[4, 3], 1.0 / 3.0);
    let l = loss_kwe(&uniform, &[Bio::O; 4]).unwrap();
    assert!((l - 3f64.ln() / 4.0).abs() < 1e-12);
    assert!((l - 0.2747).abs() < 1e-4);

    let onehot = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    assert!(loss_kwe(&onehot, &[Bio::B, Bio::O]).unwrap().abs() < 1e-12);
    assert!(loss_kwe(&onehot, &[Bio::B]).is_err());
}

#[test]
fn kwe_tape_loss_matches_value_level() {
    let (model, vocab, docs) = setup(4, 1);
    let ex = build_examples(&docs, &vocab, model.config.max_input_len).unwrap();
    let e = &ex[0];
    let w = class_weights([e.bio.as_slice()]);
    let p = model.kwe_forward(&model.encode(&e.body_ids).unwrap()).unwrap();
    let mut tape = Tape::new();
    let net = model.bind(&mut tape, &|_| false);
    let h = net.encode(&mut tape, &e.body_ids).unwrap();
    let l = kwe_loss_tape(&net, &mut tape, h, &e.bio, w).unwrap();
    let expect = loss_kwe(&p, &e.bio).unwrap();
    assert!((tape.value(l).item() - expect).abs() < 1e-10);
}

#[test]
fn stage3_loss_arithmetic() {
    assert_eq!(loss_encoder_stage3(0.7, &[2.0, 4.0], 0.0), 0.7);
    assert_eq!(loss_encoder_stage3(0.5, &[2.0, 4.0], 1.0), 3.5);
}

#[test]
fn teacher_forcing_layout() {
    let targets = vec![Target::new(vec![7, 8], TargetOrigin::GroundTruth), Target::null()];
    let tf = teacher_forcing(&targets, 8, |o| if o == TargetOrigin::Null { 0.2 } else { 1.0 });
    assert_eq!(tf.steps, 3);
    assert_eq!(tf.prefixes, vec![vec![PAD, 7, 8], vec![PAD, NULL, PAD]]);
    assert_eq!(tf.targets, vec![7, 8, EOS, NULL, EOS, PAD]);
    assert_eq!(tf.weights, vec![1.0, 1.0, 1.0, 0.2, 0.2, 0.0]);
    let cut = teacher_forcing(&targets, 2, |_| 1.0);
    assert_eq!(cut.targets, vec![7, 8, NULL, EOS]);
}

#[test]
fn confident_decoder_has_zero_loss() {
    // one slot, target "graph EOS", logits put all mass on the right token
    let graph = 9;
    let tf = teacher_forcing(&[Target::new(vec![graph], TargetOrigin::GroundTruth)], 8, |_| 1.0);
    let mut logits = vec![0.0; 2 * 12];
    logits[graph] = 1e3;
    logits[12 + EOS] = 1e3;
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(vec![2, 12], logits).unwrap());
    let l = tape.softmax_xent(z, tf.targets, tf.weights).unwrap();
    assert!(tape.value(l).item().abs() < 1e-12);
}

fn small_config(vocab: usize, n_slots: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        d: 16,
        n_heads: 2,
        n_enc_layers: layers,
        n_dec_layers: layers,
        vocab_size: vocab,
        n_slots,
        n_keywords: 1,
        ffn_width: 24,
        rpe_buckets: 8,
        rpe_max_distance: 16,
        ..Default::default()
    }
}

fn setup(n_docs: usize, seed: u64) -> (Model, Vocab, Vec<MultiLevelDocument>) {
    let docs = synth_corpus(seed, n_docs, &VocabProfile::default());
    let vocab = corpus_vocab(&docs);
    let model = Model::init(small_config(vocab.len(), 8, 1), seed).unwrap();
    (model, vocab, docs)
}

fn assigned(model: &Model, vocab: &Vocab, docs: &[MultiLevelDocument]) -> (KgItem, Vec<Target>) {
    let ex = build_examples(docs, vocab, model.config.max_input_len).unwrap();
    let tr = Trainer::new(model.clone(), vocab.clone(), TsmtConfig::default()).unwrap();
    let item = tr.prepare_kg(&[&ex[0]]).unwrap().remove(0);
    let a = assign(model, &item.h_e, &item.keywords, &item.targets, model.config.k).unwrap();
    (item, a.slot_targets)
}

#[test]
fn null_weight_zero_silences_null_slots() {
    let (model, vocab, docs) = setup(2, 3);
    let (item, targets) = assigned(&model, &vocab, &docs);
    let cfg0 = TsmtConfig { lambda_null: 0.0, ..Default::default() };
    let only_nulls: Vec<Target> = targets.iter().map(|_| Target::null()).collect();
    assert_eq!(loss_kg(&model, &item.h_e, &item.keywords, &only_nulls, &cfg0).unwrap(), 0.0);
    let cfg1 = TsmtConfig { lambda_null: 1.0, ..Default::default() };
    assert!(loss_kg(&model, &item.h_e, &item.keywords, &only_nulls, &cfg1).unwrap() > 0.0);
}

#[test]
fn keyword_weight_scales_its_slot() {
    let (model, vocab, docs) = setup(2, 4);
    let (item, _) = assigned(&model, &vocab, &docs);
    let mut targets = vec![Target::null(); 8];
    targets[1] = Target::new(vocab.ids(&words(&docs[0].keyphrases.present[0].join(" "))), TargetOrigin::Keyword);
    let half = TsmtConfig { lambda_null: 0.0, lambda_kw: 0.5, ..Default::default() };
    let full = TsmtConfig { lambda_null: 0.0, lambda_kw: 1.0, ..Default::default() };
    let a = loss_kg(&model, &item.h_e, &item.keywords, &targets, &half).unwrap();
    let b = loss_kg(&model, &item.h_e, &item.keywords, &targets, &full).unwrap();
    assert!(b > 0.0);
    assert!((a - 0.5 * b).abs() <= 1e-12 * b);
}

/// Independent route: step-by-step value-level decoding with the target
/// prefix fed back, summing plain cross-entropies.
#[test]
fn unit_weights_equal_summed_token_cross_entropy() {
    let (model, vocab, docs) = setup(2, 5);
    let (item, targets) = assigned(&model, &vocab, &docs);
    let unit = TsmtConfig { lambda_null: 1.0, lambda_kw: 1.0, ..Default::default() };
    let tape_loss = loss_kg(&model, &item.h_e, &item.keywords, &targets, &unit).unwrap();

    let m = model.config.max_kp_len;
    let mut oracle = 0.0;
    for (n, t) in targets.iter().enumerate() {
        let mut seq = t.tokens.clone();
        seq.push(EOS);
        seq.truncate(m);
        let mut states: Vec<_> = (0..8)
            .map(|i| {
                let mut s = crate::model::SlotState::new(i, 8, None, &vocab);
                s.keyword_ids = item.keywords[i].clone();
                s
            })
            .collect();
        states[n].prefix.extend(&seq);
        for s in states.iter_mut().filter(|s| s.slot != n) {
            s.prefix.resize(seq.len() + 1, PAD);
        }
        for (step, &tok) in seq.iter().enumerate() {
            let p = &model.decode_step(&item.h_e, &states, step + 1).unwrap()[n];
            oracle -= p[tok].ln();
        }
    }
    assert!((tape_loss - oracle).abs() < 1e-9 * oracle.max(1.0), "{tape_loss} vs {oracle}");
}

fn gc_model() -> (Model, Vocab, Vec<MultiLevelDocument>) {
    let docs = synth_corpus(11, 2, &VocabProfile::default());
    let mut vocab = corpus_vocab(&docs);
    let tokens: Vec<String> = vocab.iter().take(50).map(str::to_string).collect();
    vocab = Vocab::from(tokens);
    let mut cfg = small_config(50, 4, 2);
    cfg.max_kp_len = 4;
    (Model::init(cfg, 11).unwrap(), vocab, docs)
}

#[test]
fn generation_loss_gradient_matches_finite_differences() {
    let (model, vocab, docs) = gc_model();
    let (item, targets) = assigned(&model, &vocab, &docs);
    let cfg = TsmtConfig::default();
    let params: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let rep = grad_check(
        |tape, vars| {
            let net = Net {
                model: &model,
                bound: Bound::from_vars(vars.to_vec()),
            };
            let h = net.encode(tape, &item.ids)?;
            kg_loss_tape(&net, tape, h, &item.keywords, &targets, |o| cfg.xi(o))
        },
        &params,
        60,
        1e-5,
        1,
    )
    .unwrap();
    assert!(rep.coordinates >= 50);
    assert!(rep.max_relative_error < 1e-4, "{rep:?}");
}

#[test]
fn keyword_loss_gradient_matches_finite_differences() {
    let (model, vocab, docs) = gc_model();
    let ex = build_examples(&docs, &vocab, model.config.max_input_len).unwrap();
    let e = &ex[0];
    let w = class_weights([e.bio.as_slice()]);
    let params: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let rep = grad_check(
        |tape, vars| {
            let net = Net {
                model: &model,
                bound: Bound::from_vars(vars.to_vec()),
            };
            let h = net.encode(tape, &e.body_ids)?;
            kwe_loss_tape(&net, tape, h, &e.bio, w)
        },
        &params,
        60,
        1e-5,
        2,
    )
    .unwrap();
    assert!(rep.max_relative_error < 1e-4, "{rep:?}");
}

fn snapshot(model: &Model, keep: fn(&str) -> bool) -> Vec<(String, Tensor)> {
    model
        .params
        .iter()
        .filter(|(n, _)| keep(n))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

#[test]
fn stages_leave_frozen_parameters_bit_identical() {
    let (model, vocab, docs) = setup(4, 6);
    let ex = build_examples(&docs, &vocab, model.config.max_input_len).unwrap();
    let batch: Vec<&Example> = ex.iter().take(4).collect();
    let mut tr = Trainer::new(model, vocab, TsmtConfig::default()).unwrap();

    let dec = snapshot(&tr.model, is_decoder_param);
    let enc = snapshot(&tr.model, is_encoder_param);
    tr.stage1_step(&batch).unwrap();
    assert_eq!(snapshot(&tr.model, is_decoder_param), dec);
    assert_ne!(snapshot(&tr.model, is_encoder_param), enc);

    let mut items = tr.prepare_kg(&batch).unwrap();
    let enc = snapshot(&tr.model, is_encoder_param);
    let inner = vec![tr.stage2_inner(&mut items).unwrap(), tr.stage2_inner(&mut items).unwrap()];
    assert_eq!(snapshot(&tr.model, is_encoder_param), enc);
    assert_ne!(snapshot(&tr.model, is_decoder_param), dec);

    let dec = snapshot(&tr.model, is_decoder_param);
    tr.stage3_step(&batch, &items, &inner).unwrap();
    assert_eq!(snapshot(&tr.model, is_decoder_param), dec);
    assert_ne!(snapshot(&tr.model, is_encoder_param), enc);
}

#[test]
fn stage1_only_run_keeps_decoder_at_initialization() {
    let (model, vocab, docs) = setup(3, 7);
    let init = snapshot(&model, is_decoder_param);
    let cfg = TsmtConfig { epochs: 2, stage1_epochs: 2, ..Default::default() };
    let (trained, report) = tsmt_train(model, &vocab, &docs, &cfg, &[], None).unwrap();
    assert_eq!(snapshot(&trained, is_decoder_param), init);
    assert!(report.epochs.iter().all(|e| e.stage == Stage::Kwe && e.l_g.is_none()));
}

#[test]
fn config_validation() {
    assert!(TsmtConfig::default().validate().is_ok());
    assert!(TsmtConfig { stage1_epochs: 41, ..Default::default() }.validate().is_err());
    assert!(TsmtConfig { inner_epochs: 0, ..Default::default() }.validate().is_err());
    assert!(TsmtConfig { lambda_kw: -0.1, ..Default::default() }.validate().is_err());
    assert!(TsmtConfig { lambda_null: f64::NAN, ..Default::default() }.validate().is_err());
}

/// The stage-3 gradient equals finite differences of
/// `L1_W + lambda_g / E2 * sum_e L_G(theta_E, theta_D^e)`, where each inner
/// term uses the decoder as it was during that inner epoch.
#[test]
fn stage3_gradient_matches_finite_differences() {
    let (model, vocab, docs) = setup(2, 8);
    let ex = build_examples(&docs, &vocab, model.config.max_input_len).unwrap();
    let batch: Vec<&Example> = ex.iter().take(2).collect();
    let cfg = TsmtConfig { lambda_g: 0.8, lr_g: 1e-2, ..Default::default() };
    let mut tr = Trainer::new(model, vocab.clone(), cfg.clone()).unwrap();
    let mut items = tr.prepare_kg(&batch).unwrap();
    let mut decoders = Vec::new();
    let mut inner = Vec::new();
    for _ in 0..2 {
        decoders.push(tr.model.clone());
        inner.push(tr.stage2_inner(&mut items).unwrap());
    }
    let (_, _, grads) = tr.stage3_grads(&batch, &items, &inner).unwrap();

    let objective = |enc: &Model| -> f64 {
        let weights = class_weights(batch.iter().map(|e| e.bio.as_slice()));
        let l1: f64 = batch
            .iter()
            .map(|e| {
                let p = enc.kwe_forward(&enc.encode(&e.body_ids).unwrap()).unwrap();
                loss_kwe_weighted(&p, &e.bio, weights).unwrap()
            })
            .sum::<f64>()
            / batch.len() as f64;
        let mut lg = Vec::new();
        for dec in &decoders {
            let mut m = dec.clone();
            for (name, t) in enc.params.iter().filter(|(n, _)| is_encoder_param(n)) {
                *m.params.get_mut(name).unwrap() = t.clone();
            }
            let l: f64 = items
                .iter()
                .map(|it| {
                    let h = m.encode(&it.ids).unwrap();
                    let a = assign(dec, &it.h_e, &it.keywords, &it.targets, m.config.k).unwrap();
                    loss_kg(&m, &h, &it.keywords, &a.slot_targets, &cfg).unwrap()
                })
                .sum::<f64>()
                / items.len() as f64;
            lg.push(l);
        }
        loss_encoder_stage3(l1, &lg, cfg.lambda_g)
    };

    let names: Vec<String> = tr
        .model
        .params
        .iter()
        .filter(|(n, _)| is_encoder_param(n))
        .map(|(n, _)| n.to_string())
        .collect();
    let mut worst: f64 = 0.0;
    let step = 1e-5;
    for (i, name) in names.iter().enumerate() {
        let id = tr.model.params.id(name).unwrap();
        let g = grads[id].as_ref().unwrap();
        let len = g.len();
        for j in [(i * 7) % len, (i * 13 + 5) % len] {
            let mut plus = tr.model.clone();
            plus.params.get_mut(name).unwrap().data_mut()[j] += step;
            let mut minus = tr.model.clone();
            minus.params.get_mut(name).unwrap().data_mut()[j] -= step;
            let num = (objective(&plus) - objective(&minus)) / (2.0 * step);
            let denom = g[j].abs().max(num.abs()).max(1e-8);
            worst = worst.max((g[j] - num).abs() / denom);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn overfit_generation_loss_drops() {
    let docs = synth_corpus(21, 8, &VocabProfile::default());
    let vocab = corpus_vocab(&docs);
    let model = Model::init(ModelConfig { vocab_size: vocab.len(), ..Default::default() }, 21).unwrap();
    let ex = build_examples(&docs, &vocab, model.config.max_input_len).unwrap();
    let batch: Vec<&Example> = ex.iter().filter(|e| e.level == 1).collect();
    let cfg = TsmtConfig::default();
    let mut tr = Trainer::new(model, vocab, cfg).unwrap();
    let mut items = tr.prepare_kg(&batch).unwrap();
    let first = tr.stage2_inner(&mut items).unwrap();
    let mut last = first;
    for _ in 1..200 {
        last = tr.stage2_inner(&mut items).unwrap();
    }
    assert!(last <= 0.1 * first, "L_G {first} -> {last}");
}
