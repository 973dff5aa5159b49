use std::path::Path;

use clap::Parser;
use setkp::cli::{run_cli, Cli};
use setkp::corpus::read_jsonl;
use setkp::metrics::PredictionRecord;
use setkp::Error;

const SMALL: &str = "seed = 2\n[corpus]\nn_docs = 8\n[model]\nd = 16\nn_heads = 2\nn_enc_layers = 1\nn_dec_layers = 1\n\
                     ffn_width = 24\n[train]\nepochs = 2\nstage1_epochs = 1\nbatch_size = 4\n";

fn run(dir: &Path, args: &[&str]) -> setkp::Result<()> {
    let conf = dir.join("run.toml");
    if !conf.exists() {
        std::fs::write(&conf, SMALL).unwrap();
    }
    let mut full = vec!["setkp".to_string(), "--config".into(), conf.to_string_lossy().into_owned()];
    full.extend(args.iter().map(|a| match a.strip_prefix('@') {
        Some(rel) => dir.join(rel).to_string_lossy().into_owned(),
        None => a.to_string(),
    }));
    run_cli(Cli::try_parse_from(&full).unwrap(), Vec::new())
}

fn trained(dir: &Path) {
    run(dir, &["gen-corpus", "--out", "@corpus.jsonl"]).unwrap();
    run(dir, &["train", "--corpus", "@corpus.jsonl", "--out", "@model"]).unwrap();
}

#[test]
fn thread_count_does_not_change_portraits() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    for (t, out) in [("1", "@p1.jsonl"), ("3", "@p3.jsonl")] {
        run(d, &["--threads", t, "portrait", "--ckpt", "@model/model.ckpt", "--corpus", "@corpus.jsonl", "--out", out])
            .unwrap();
    }
    let a: Vec<PredictionRecord> = read_jsonl(&d.join("p1.jsonl")).unwrap();
    let b: Vec<PredictionRecord> = read_jsonl(&d.join("p3.jsonl")).unwrap();
    assert_eq!(a.len(), 8);
    assert_eq!(a, b);
}

#[test]
fn train_writes_artifacts_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    for f in ["model.ckpt", "latest.ckpt", "loss.csv", "config.toml"] {
        assert!(d.join("model").join(f).is_file(), "{f}");
    }
    let loss = std::fs::read_to_string(d.join("model/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    let conf = std::fs::read_to_string(d.join("model/config.toml")).unwrap();
    assert!(conf.contains("epochs = 2"));
}

#[test]
fn seed_flag_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(d, &["gen-corpus", "--out", "@a.jsonl"]).unwrap();
    run(d, &["--seed", "2", "gen-corpus", "--out", "@b.jsonl"]).unwrap();
    run(d, &["--seed", "3", "gen-corpus", "--out", "@c.jsonl"]).unwrap();
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
}

#[test]
fn foreign_corpus_is_a_vocabulary_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    // a corpus built from a different seed has a disjoint synthetic lexicon
    run(d, &["--seed", "9", "gen-corpus", "--out", "@other.jsonl"]).unwrap();
    let err = run(d, &["generate", "--ckpt", "@model/model.ckpt", "--corpus", "@other.jsonl", "--out", "@g.jsonl"]);
    assert!(matches!(err, Err(Error::VocabMismatch(_))), "{err:?}");
}

#[test]
fn malformed_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.jsonl"), "{\"id\": 1}\n").unwrap();
    assert!(run(d, &["train", "--corpus", "@bad.jsonl", "--out", "@m"]).is_err());
    assert!(matches!(
        run(d, &["eval", "--predictions", "@missing.jsonl", "--corpus", "@bad.jsonl", "--out", "@e.csv"]),
        Err(Error::Io { .. })
    ));
    assert!(run(d, &["generate", "--ckpt", "@bad.jsonl", "--corpus", "@bad.jsonl", "--out", "@g.jsonl"]).is_err());
}

#[test]
fn single_document_overfit_reproduces_its_keyphrases() {
    use setkp::corpus::{synth_corpus, VocabProfile};
    use setkp::inference::{phd_portrait, InferenceOptions};
    use setkp::metrics::{evaluate_documents, stem_seq};
    use setkp::model::{Model, ModelConfig};
    use setkp::training::{corpus_vocab, tsmt_train, TsmtConfig};

    let docs = synth_corpus(3, 1, &VocabProfile::default());
    let vocab = corpus_vocab(&docs);
    let model = Model::init(ModelConfig { vocab_size: vocab.len(), d: 32, ffn_width: 64, ..Default::default() }, 3).unwrap();
    let cfg = TsmtConfig { epochs: 80, stage1_epochs: 10, lr_w: 1e-3, lr_g: 1e-3, ..Default::default() };
    let (model, _) = tsmt_train(model, &vocab, &docs, &cfg, &[], None).unwrap();
    let p = phd_portrait(&model, &vocab, &docs[0], InferenceOptions::default()).unwrap();
    let got: Vec<Vec<String>> = p.entries.iter().map(|e| stem_seq(&e.tokens)).collect();
    for k in docs[0].keyphrases.all() {
        assert!(got.contains(&stem_seq(k)), "missing {k:?} in {got:?}");
    }
    let m = evaluate_documents(&[p.to_record()], &docs).unwrap().macro_avg;
    assert!(m.f1_at_m > 0.6, "{m:?}");
}
