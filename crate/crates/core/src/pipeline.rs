//! The pipeline stages behind the command-line tool. Every stage reads its
//! inputs from and writes its artifacts to one output directory, so each
//! stage's outputs are the next stage's inputs.

use crate::batch::{encode_nonparallel, encode_parallel};
use crate::classifiers::{pretrain_coherence_classifier, pretrain_style_classifier, CoherenceClassifier, PretrainReport, StyleClassifier};
use crate::config::PipelineConfig;
use crate::corpus::{
    generate_synthetic_benchmark, load_nonparallel, load_paragraphs, load_parallel, make_coherence_pairs, write_jsonl, Context,
    NonParallelSample, ParallelSample, Sentence, StyleLabel,
};
use crate::error::{CastError, Result};
use crate::eval::{evaluate_model, train_language_model, EvalReport, LanguageModel};
use crate::losses::Regularizers;
use crate::model::{CastModel, GenerateOptions};
use crate::training::{run_ablations, train, AblationData, HistoryRecord, TrainData, Variant};
use crate::vocab::Vocabulary;
use autograd::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// File names inside the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn vocab(&self) -> PathBuf {
        self.file("vocab.txt")
    }
    pub fn style(&self) -> PathBuf {
        self.file("style_classifier.json")
    }
    pub fn coherence(&self) -> PathBuf {
        self.file("coherence_classifier.json")
    }
    pub fn language_model(&self) -> PathBuf {
        self.file("language_model.json")
    }
    pub fn model(&self) -> PathBuf {
        self.file("model.json")
    }
    pub fn history(&self) -> PathBuf {
        self.file("history.jsonl")
    }
    pub fn batches(&self) -> PathBuf {
        self.file("batches.jsonl")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CastError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CastError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializes") + "\n"))
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("serializes"));
        text.push('\n');
    }
    write_text(path, &text)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CastError::MissingCheckpoint(path.to_path_buf()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub nonparallel: usize,
    pub style_classifier: usize,
    pub paragraphs: usize,
}

/// Writes the synthetic splits as JSONL plus `data/oracle.json`, which holds
/// the generator config (the oracle's full description) and the seed.
pub fn gen_data(cfg: &PipelineConfig, layout: &Layout) -> Result<DataSummary> {
    let syn = &cfg.data.synthetic;
    let b = generate_synthetic_benchmark(syn, cfg.seeds().data)?;
    let dir = layout.root().join("data");
    fs::create_dir_all(&dir).map_err(|e| CastError::io(&dir, e))?;
    let names = &syn.style_names;
    write_jsonl(&layout.data("train.jsonl"), &b.train, names)?;
    write_jsonl(&layout.data("dev.jsonl"), &b.dev, names)?;
    write_jsonl(&layout.data("test.jsonl"), &b.test, names)?;
    write_jsonl(&layout.data("nonparallel.jsonl"), &b.nonparallel, names)?;
    write_jsonl(&layout.data("style_classifier.jsonl"), &b.style_classifier, names)?;
    write_jsonl(&layout.data("paragraphs.jsonl"), &b.paragraphs, names)?;
    let summary = DataSummary {
        train: b.train.len(),
        dev: b.dev.len(),
        test: b.test.len(),
        nonparallel: b.nonparallel.len(),
        style_classifier: b.style_classifier.len(),
        paragraphs: b.paragraphs.len(),
    };
    write_json(
        &layout.data("oracle.json"),
        &serde_json::json!({ "provenance": cfg.provenance(), "oracle": syn, "num_topics": b.oracle.num_topics(), "splits": summary }),
    )?;
    Ok(summary)
}

/// The on-disk splits.
pub struct Splits {
    pub train: Vec<ParallelSample>,
    pub dev: Vec<ParallelSample>,
    pub test: Vec<ParallelSample>,
    pub nonparallel: Vec<NonParallelSample>,
}

fn load_splits(cfg: &PipelineConfig, layout: &Layout) -> Result<Splits> {
    let names = &cfg.data.synthetic.style_names;
    Ok(Splits {
        train: load_parallel(&layout.data("train.jsonl"), names)?,
        dev: load_parallel(&layout.data("dev.jsonl"), names)?,
        test: load_parallel(&layout.data("test.jsonl"), names)?,
        nonparallel: load_nonparallel(&layout.data("nonparallel.jsonl"), names)?,
    })
}

/// Vocabulary over every training slice (never dev or test).
pub fn build_vocab(cfg: &PipelineConfig, layout: &Layout) -> Result<Vocabulary> {
    let names = &cfg.data.synthetic.style_names;
    let train = load_parallel(&layout.data("train.jsonl"), names)?;
    let nonparallel = load_nonparallel(&layout.data("nonparallel.jsonl"), names)?;
    let style = load_nonparallel(&layout.data("style_classifier.jsonl"), names)?;
    let paragraphs = load_paragraphs(&layout.data("paragraphs.jsonl"))?;
    let contexts: Vec<Sentence> = train.iter().map(|s| s.context.flatten()).collect();
    let corpus = train
        .iter()
        .flat_map(|s| [&s.source, &s.reference])
        .chain(&contexts)
        .chain(nonparallel.iter().chain(&style).map(|s| &s.sentence))
        .chain(paragraphs.iter().flat_map(|p| &p.sentences));
    let vocab = Vocabulary::build(corpus, cfg.data.min_frequency)?;
    vocab.save(&layout.vocab())?;
    write_json(&layout.file("vocab.meta.json"), &serde_json::json!({ "provenance": cfg.provenance(), "size": vocab.len() }))?;
    Ok(vocab)
}

fn load_vocab(layout: &Layout) -> Result<Vocabulary> {
    require(&layout.vocab())?;
    Vocabulary::load(&layout.vocab())
}

pub fn pretrain_style(cfg: &PipelineConfig, layout: &Layout) -> Result<PretrainReport> {
    let vocab = load_vocab(layout)?;
    let data = load_nonparallel(&layout.data("style_classifier.jsonl"), &cfg.data.synthetic.style_names)?;
    let (clf, report) = pretrain_style_classifier(&data, &vocab, cfg.style.classifier.clone(), &cfg.style.pretrain, cfg.seeds().style)?;
    clf.save(&layout.style(), serde_json::json!({ "run": cfg.provenance(), "report": report }))?;
    Ok(report)
}

pub fn pretrain_coherence(cfg: &PipelineConfig, layout: &Layout) -> Result<PretrainReport> {
    let vocab = load_vocab(layout)?;
    let paragraphs = load_paragraphs(&layout.data("paragraphs.jsonl"))?;
    let seeds = cfg.seeds();
    let pairs = make_coherence_pairs(&paragraphs, cfg.data.negatives_per_positive, seeds.coherence_pairs)?;
    let (clf, report) =
        pretrain_coherence_classifier(&pairs, &vocab, cfg.coherence.classifier.clone(), &cfg.coherence.pretrain, seeds.coherence)?;
    clf.save(&layout.coherence(), serde_json::json!({ "run": cfg.provenance(), "report": report }))?;
    Ok(report)
}

/// The perplexity model learns the target-style half of the non-parallel pool.
pub fn train_lm(cfg: &PipelineConfig, layout: &Layout) -> Result<PretrainReport> {
    let vocab = load_vocab(layout)?;
    let splits = load_splits(cfg, layout)?;
    let target = splits.train.first().map_or(StyleLabel::B, |s| s.target_style);
    let sentences: Vec<Vec<usize>> =
        splits.nonparallel.iter().filter(|s| s.style == target).map(|s| vocab.encode(&s.sentence, false)).collect();
    let (lm, report) = train_language_model(
        &sentences,
        vocab.len(),
        cfg.language_model.model.clone(),
        &cfg.language_model.pretrain,
        cfg.seeds().language_model,
    )?;
    lm.save(&layout.language_model(), serde_json::json!({ "run": cfg.provenance(), "report": report }))?;
    Ok(report)
}

fn load_classifiers(layout: &Layout) -> Result<(StyleClassifier, CoherenceClassifier)> {
    require(&layout.style())?;
    require(&layout.coherence())?;
    Ok((StyleClassifier::load(&layout.style())?, CoherenceClassifier::load(&layout.coherence())?))
}

fn load_optional_lm(layout: &Layout) -> Result<Option<LanguageModel>> {
    let path = layout.language_model();
    if path.exists() {
        LanguageModel::load(&path).map(Some)
    } else {
        Ok(None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub provenance: serde_json::Value,
    pub steps: usize,
    pub best_step: Option<usize>,
    pub best_selection: Option<f64>,
    pub history_file: String,
    pub batch_log_file: String,
}

/// Trains CAST; writes the kept checkpoint, the metrics history and the batch log.
pub fn train_cast(cfg: &PipelineConfig, layout: &Layout) -> Result<(TrainSummary, Vec<HistoryRecord>)> {
    let vocab = load_vocab(layout)?;
    let (style, coherence) = load_classifiers(layout)?;
    let splits = load_splits(cfg, layout)?;
    let parallel = encode_parallel(&splits.train, &vocab, cfg.model.max_context_words)?;
    let nonparallel = encode_nonparallel(&splits.nonparallel, &vocab);
    let seeds = cfg.seeds();
    let model = CastModel::new(cfg.model.clone(), vocab.len(), seeds.model_init)?;
    let regs = Regularizers { style: &style, coherence: &coherence };
    let data = TrainData { parallel: &parallel, nonparallel: &nonparallel, dev: &splits.dev, vocab: &vocab };
    let out = train(model, regs, &data, &cfg.training, seeds.training)?;
    write_lines(&layout.history(), &out.history)?;
    write_lines(&layout.batches(), &out.batches)?;
    let summary = TrainSummary {
        provenance: cfg.provenance(),
        steps: cfg.training.max_steps,
        best_step: out.best_step,
        best_selection: out.best_selection,
        history_file: "history.jsonl".into(),
        batch_log_file: "batches.jsonl".into(),
    };
    out.model.save(&layout.model(), serde_json::json!({ "run": cfg.provenance(), "best_step": out.best_step }))?;
    write_json(&layout.file("train_summary.json"), &summary)?;
    Ok((summary, out.history))
}

/// Scores the kept checkpoint on the test split; writes `eval.json` and `eval.txt`.
pub fn evaluate(cfg: &PipelineConfig, layout: &Layout) -> Result<EvalReport> {
    require(&layout.model())?;
    let model = CastModel::load(&layout.model())?;
    let vocab = load_vocab(layout)?;
    let (style, coherence) = load_classifiers(layout)?;
    let lm = load_optional_lm(layout)?;
    let test = load_parallel(&layout.data("test.jsonl"), &cfg.data.synthetic.style_names)?;
    let regs = Regularizers { style: &style, coherence: &coherence };
    let t = &cfg.training;
    let report = evaluate_model("CAST", &model, regs, lm.as_ref(), &test, &vocab, t.switches.use_context_encoder, t.generation.max_len)?;
    write_json(&layout.file("eval.json"), &serde_json::json!({ "provenance": cfg.provenance(), "report": report }))?;
    write_text(&layout.file("eval.txt"), &EvalReport::table(std::slice::from_ref(&report)))?;
    Ok(report)
}

/// Trains and scores the five variants; writes `ablation.json` and `ablation.txt`.
pub fn ablate(cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<EvalReport>> {
    let vocab = load_vocab(layout)?;
    let (style, coherence) = load_classifiers(layout)?;
    let lm = load_optional_lm(layout)?;
    let splits = load_splits(cfg, layout)?;
    let parallel = encode_parallel(&splits.train, &vocab, cfg.model.max_context_words)?;
    let nonparallel = encode_nonparallel(&splits.nonparallel, &vocab);
    let seeds = cfg.seeds();
    let initial = CastModel::new(cfg.model.clone(), vocab.len(), seeds.model_init)?;
    let regs = Regularizers { style: &style, coherence: &coherence };
    let data = AblationData {
        train: TrainData { parallel: &parallel, nonparallel: &nonparallel, dev: &splits.dev, vocab: &vocab },
        test: &splits.test,
    };
    let rows = run_ablations(&initial, regs, lm.as_ref(), &data, &cfg.training, seeds.training, &Variant::ALL)?;
    let reports: Vec<EvalReport> = rows.into_iter().map(|(_, r)| r).collect();
    let summary: Vec<EvalReport> = reports.iter().map(|r| EvalReport { records: Vec::new(), ..r.clone() }).collect();
    write_json(&layout.file("ablation.json"), &serde_json::json!({ "provenance": cfg.provenance(), "variants": summary }))?;
    write_text(&layout.file("ablation.txt"), &EvalReport::table(&reports))?;
    Ok(reports)
}

/// A sentence given as tokens or as whitespace-separated text.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum Tokens {
    List(Sentence),
    Text(String),
}

impl Tokens {
    fn into_sentence(self) -> Sentence {
        match self {
            Tokens::List(s) => s,
            Tokens::Text(t) => t.split_whitespace().map(str::to_string).collect(),
        }
    }
}

/// One line of `transfer` input.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferRequest {
    pub source: Tokens,
    #[serde(default)]
    pub context_before: Vec<Tokens>,
    #[serde(default)]
    pub context_after: Vec<Tokens>,
    /// Style name; defaults to the second style.
    #[serde(default)]
    pub target_style: Option<String>,
}

/// Greedy transfer of each JSONL request line; one output line per request.
pub fn transfer(cfg: &PipelineConfig, layout: &Layout, input: &str, out: &mut dyn Write) -> Result<usize> {
    require(&layout.model())?;
    let model = CastModel::load(&layout.model())?;
    let vocab = load_vocab(layout)?;
    let names = &cfg.data.synthetic.style_names;
    let opts = GenerateOptions::greedy(cfg.training.generation.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut n = 0;
    for (i, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| CastError::Record { path: PathBuf::from("<stdin>"), line: i + 1, message };
        let req: TransferRequest = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let style = match &req.target_style {
            Some(s) => names.parse(s).ok_or_else(|| bad(format!("unknown style {s:?}")))?,
            None => StyleLabel::B,
        };
        let source = req.source.into_sentence();
        if source.is_empty() {
            return Err(bad("source is empty".into()));
        }
        let context = Context {
            before: req.context_before.into_iter().map(Tokens::into_sentence).collect(),
            after: req.context_after.into_iter().map(Tokens::into_sentence).collect(),
        };
        let x = vocab.encode(&source, false);
        let c = if cfg.training.switches.use_context_encoder && !context.is_empty() {
            Some(vocab.encode_context(&context, model.config().max_context_words)?.flat())
        } else {
            None
        };
        let mut g = Graph::inference();
        let y = model.transfer(&mut g, &x, c.as_deref(), style, &opts, &mut rng)?;
        let tokens = vocab.decode_display(y.content_ids())?;
        writeln!(out, "{}", tokens.join(" ")).map_err(|e| CastError::io("<stdout>", e))?;
        n += 1;
    }
    Ok(n)
}
