//! Command-line entry points.
//!
//! Settings resolve in four layers: built-in defaults, the TOML file given
//! by `--config`, `SETKP_*` environment variables, then flags. Environment
//! keys map onto the config tree with `__` between levels, so
//! `SETKP_TRAIN__EPOCHS=60` sets `train.epochs` and `SETKP_SEED=3` sets
//! `seed`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze, parse_levels, Mode, Task};
use crate::corpus::{load_corpus, read_jsonl, save_jsonl, synth_raw, write_jsonl, MultiLevelDocument, Vocab, VocabProfile};
use crate::error::{Error, Result};
use crate::inference::{par_map, phd_portrait, InferenceOptions};
use crate::metrics::{evaluate_documents, PredictionRecord};
use crate::model::{Model, ModelConfig};
use crate::training::{corpus_vocab, tsmt_train, TsmtConfig};

pub const ENV_PREFIX: &str = "SETKP_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_docs: usize,
    pub topics: usize,
    pub phrases_per_topic: usize,
    pub filler_words: usize,
    pub max_segment_tokens: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let p = VocabProfile::default();
        CorpusConfig {
            n_docs: 64,
            topics: p.topics,
            phrases_per_topic: p.phrases_per_topic,
            filler_words: p.filler_words,
            max_segment_tokens: p.max_segment_tokens,
        }
    }
}

impl CorpusConfig {
    pub fn profile(&self) -> VocabProfile {
        VocabProfile {
            topics: self.topics,
            phrases_per_topic: self.phrases_per_topic,
            filler_words: self.filler_words,
            max_segment_tokens: self.max_segment_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Modes to report; all three when empty.
    pub modes: Vec<Mode>,
    pub levels: Vec<Vec<usize>>,
    pub task: Task,
    pub train_fraction: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            modes: Vec::new(),
            levels: vec![vec![1], vec![1, 2], vec![1, 2, 3]],
            task: Task::Label,
            train_fraction: 0.5,
        }
    }
}

/// Every setting of a run. `seed` drives corpus generation, model
/// initialization and training order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TsmtConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TsmtConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults overlaid with an optional TOML file, then with `SETKP_*`
    /// variables from `env` (`SETKP_CONFIG` is ignored here).
    pub fn resolve(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let over: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, over);
        }
        let mut vars: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != "SETKP_CONFIG")
            .collect();
        vars.sort();
        for (key, raw) in vars {
            let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
            let mut over = toml::Table::new();
            let mut cursor = &mut over;
            for part in &path[..path.len() - 1] {
                cursor = cursor
                    .entry(part.clone())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .expect("fresh table");
            }
            cursor.insert(path[path.len() - 1].clone(), env_value(&raw));
            merge(&mut table, over);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "setkp", version, about = "Set-based keyphrase generation and document portraits")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "SETKP_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-document inference.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus as JSONL.
    GenCorpus {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.ckpt, latest.ckpt, loss.csv and config.toml into `out`.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Documents whose null and duplication ratios are tracked per epoch.
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Per-segment generation without hierarchical prompting.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hierarchical portraits.
    Portrait {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against the corpus keyphrases.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classification accuracy and token counts per input mode.
    Analyze {
        #[arg(long)]
        portraits: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        /// One of 1 | 1,2 | 1,2,3.
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command with the process
/// environment.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    run_cli(cli, std::env::vars())
}

pub fn run_cli(cli: Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), env)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.train.seed = cfg.seed;
    match cli.command {
        Command::GenCorpus { n, out } => cmd_gen_corpus(&cfg, n.unwrap_or(cfg.corpus.n_docs), &out),
        Command::Train { corpus, out, probe } => cmd_train(&cfg, &corpus, &out, probe.as_deref()),
        Command::Generate { ckpt, corpus, out } => cmd_predict(&cfg, &ckpt, &corpus, &out, false),
        Command::Portrait { ckpt, corpus, out } => cmd_predict(&cfg, &ckpt, &corpus, &out, true),
        Command::Eval {
            predictions,
            corpus,
            out,
        } => cmd_eval(&cfg, &predictions, &corpus, &out),
        Command::Analyze {
            portraits,
            corpus,
            mode,
            levels,
            out,
        } => {
            if let Some(m) = mode {
                cfg.analysis.modes = vec![m.parse()?];
            }
            if let Some(l) = levels {
                cfg.analysis.levels = vec![parse_levels(&l)?];
            }
            cmd_analyze(&cfg, &portraits, &corpus, &out)
        }
    }
}

pub fn cmd_gen_corpus(cfg: &RunConfig, n: usize, out: &Path) -> Result<()> {
    save_jsonl(out, &synth_raw(cfg.seed, n, &cfg.corpus.profile()))
}

fn load(cfg: &RunConfig, path: &Path) -> Result<Vec<MultiLevelDocument>> {
    load_corpus(path, cfg.corpus.max_segment_tokens)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_train(cfg: &RunConfig, corpus: &Path, out: &Path, probe: Option<&Path>) -> Result<()> {
    let docs = load(cfg, corpus)?;
    let probe = match probe {
        Some(p) => load(cfg, p)?,
        None => Vec::new(),
    };
    let vocab = corpus_vocab(&docs);
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    let model = Model::init(model_cfg, cfg.seed)?;
    create_dir(out)?;
    let (model, report) = tsmt_train(model, &vocab, &docs, &cfg.train, &probe, Some(out))?;
    model.save(&out.join("model.ckpt"), &vocab)?;
    report.write_csv(&out.join("loss.csv"))?;
    let conf = out.join("config.toml");
    std::fs::write(&conf, cfg.to_toml()?).map_err(|e| Error::io(&conf, e))
}

/// Rejects a corpus when more than half of its tokens are unknown to the
/// checkpoint vocabulary.
pub fn check_vocab(vocab: &Vocab, docs: &[MultiLevelDocument]) -> Result<()> {
    let (mut total, mut unknown) = (0usize, 0usize);
    for t in docs.iter().flat_map(|d| d.all_tokens()) {
        total += 1;
        if vocab.get(t).is_none() {
            unknown += 1;
        }
    }
    if total > 0 && 2 * unknown > total {
        return Err(Error::VocabMismatch(format!(
            "{unknown} of {total} corpus tokens are unknown to the checkpoint"
        )));
    }
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig, ckpt: &Path, corpus: &Path, out: &Path, hierarchical: bool) -> Result<()> {
    let (model, vocab) = Model::load(ckpt)?;
    let docs = load(cfg, corpus)?;
    check_vocab(&vocab, &docs)?;
    let opts = InferenceOptions {
        kwp: cfg.train.kwp,
        kcc: cfg.train.kcc,
        hierarchical,
    };
    let records = par_map(&docs, cfg.threads, |d| {
        phd_portrait(&model, &vocab, d, opts).map(|p| p.to_record())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    write_jsonl(out, &records)
}

pub fn cmd_eval(cfg: &RunConfig, predictions: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let records: Vec<PredictionRecord> = read_jsonl(predictions)?;
    let docs = load(cfg, corpus)?;
    let report = evaluate_documents(&records, &docs)?;
    report.write_csv(out)?;
    let m = &report.macro_avg;
    println!(
        "F1@5 {:.4}  F1@M {:.4}  present F1@M {:.4}  absent F1@M {:.4}  MAP@5 {:.4}  NDCG@5 {:.4}",
        m.f1_at_5, m.f1_at_m, m.present_f1_at_m, m.absent_f1_at_m, m.map_at_5, m.ndcg_at_5
    );
    Ok(())
}

pub fn cmd_analyze(cfg: &RunConfig, portraits: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let records: Vec<PredictionRecord> = read_jsonl(portraits)?;
    let docs = load(cfg, corpus)?;
    let modes = if cfg.analysis.modes.is_empty() {
        Mode::ALL.to_vec()
    } else {
        cfg.analysis.modes.clone()
    };
    let report = analyze(
        &docs,
        &records,
        &modes,
        &cfg.analysis.levels,
        cfg.analysis.task,
        cfg.analysis.train_fraction,
    )?;
    report.write(out)?;
    print!("{}", report.to_table());
    Ok(())
}
