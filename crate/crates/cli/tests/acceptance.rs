//! Acceptance suite. One sequential test so that the timed pipeline runs do
//! not share the CPU with anything else; it writes one PASS/FAIL line per
//! criterion to stderr and fails if any criterion failed.

use autograd::{GradBuffer, Graph, Var};
use cast::batch::{encode_nonparallel, encode_parallel, EncodedNonParallel, EncodedParallel};
use cast::classifiers::{CoherenceClassifier, CoherenceClassifierConfig, StyleClassifier, StyleClassifierConfig};
use cast::corpus::{generate_synthetic_benchmark, SplitSizes, StyleLabel, SyntheticBenchmark, SyntheticConfig};
use cast::error::Result as CastResult;
use cast::eval::{bleu, gleu, LanguageModel, LanguageModelConfig};
use cast::losses::{
    back_translation_loss, coherence_loss, contextual_s2s_loss, final_loss, reconstruction_loss, style_loss, FirstHop, GenerationConfig,
    LossSettings, LossWeights, Regularizers,
};
use cast::model::{CastModel, GenMode, ModelConfig};
use cast::training::{train, TrainData, TrainingConfig};
use cast::vocab::{EncodedContext, Vocabulary, BOS, EOS};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

const V: usize = 20;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Written straight to the stream so the lines show without `--nocapture`.
fn report(n: usize, name: &str, v: &Verdict) {
    let line = format!("criterion {n} [{}] {name}: {}\n", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn framed(x: &[usize]) -> Vec<usize> {
    std::iter::once(BOS).chain(x.iter().copied()).chain(std::iter::once(EOS)).collect()
}

fn tiny_style() -> StyleClassifier {
    let mut c = StyleClassifier::new(StyleClassifierConfig { embed_dim: 4, filter_widths: vec![2], num_filters: 3 }, V, 1).unwrap();
    c.freeze();
    c
}

fn tiny_coherence(vocab_size: usize) -> CoherenceClassifier {
    let cfg = CoherenceClassifierConfig { num_heads: 2, head_dim: 2, ffn_dim: 6, ..Default::default() };
    let mut c = CoherenceClassifier::new(cfg, vocab_size, 2).unwrap();
    c.freeze();
    c
}

// ---------------------------------------------------------------- criterion 1

fn grad_batch() -> (Vec<EncodedParallel>, Vec<EncodedNonParallel>) {
    let p = vec![
        EncodedParallel {
            source: vec![4, 5, 6],
            target: framed(&[7, 5, 6]),
            context: EncodedContext { before: vec![8, 9], after: vec![10] },
            source_style: StyleLabel::A,
            target_style: StyleLabel::B,
        },
        EncodedParallel {
            source: vec![11, 12],
            target: framed(&[13, 12, 14]),
            context: EncodedContext { before: vec![], after: vec![15, 16, 17] },
            source_style: StyleLabel::A,
            target_style: StyleLabel::B,
        },
    ];
    let u = [(vec![4, 9, 6], StyleLabel::A), (vec![7, 12, 18, 19], StyleLabel::B)]
        .into_iter()
        .map(|(s, style)| EncodedNonParallel { target: framed(&s), sentence: s, style })
        .collect();
    (p, u)
}

struct GradEnv {
    m: CastModel,
    style: StyleClassifier,
    coherence: CoherenceClassifier,
    p: Vec<EncodedParallel>,
    u: Vec<EncodedNonParallel>,
    soft: GenerationConfig,
    stop: GenerationConfig,
}

type LossFn = for<'a> fn(&mut Graph<'a>, &'a GradEnv, &mut ChaCha8Rng) -> CastResult<Var>;

fn c_s2s<'a>(g: &mut Graph<'a>, e: &'a GradEnv, _: &mut ChaCha8Rng) -> CastResult<Var> {
    contextual_s2s_loss(g, &e.m, &e.p, true)
}
fn cohere<'a>(g: &mut Graph<'a>, e: &'a GradEnv, r: &mut ChaCha8Rng) -> CastResult<Var> {
    coherence_loss(g, &e.m, &e.coherence, &e.p, &e.soft, true, r)
}
fn recon<'a>(g: &mut Graph<'a>, e: &'a GradEnv, _: &mut ChaCha8Rng) -> CastResult<Var> {
    reconstruction_loss(g, &e.m, &e.u)
}
fn btrans<'a>(g: &mut Graph<'a>, e: &'a GradEnv, r: &mut ChaCha8Rng) -> CastResult<Var> {
    back_translation_loss(g, &e.m, &e.u, &e.stop, r)
}
fn style<'a>(g: &mut Graph<'a>, e: &'a GradEnv, r: &mut ChaCha8Rng) -> CastResult<Var> {
    style_loss(g, &e.m, &e.style, &e.u, &e.soft, r)
}

fn loss_value(e: &GradEnv, f: LossFn) -> f64 {
    let mut g = Graph::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = f(&mut g, e, &mut rng).unwrap();
    g.value(v).item()
}

/// Largest relative error between analytic and central-difference gradients
/// over every coordinate of every parameter.
fn max_relative_error(e: &mut GradEnv, f: LossFn) -> (f64, usize) {
    let analytic = {
        let mut g = Graph::new(Some(e.m.params()));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = f(&mut g, e, &mut rng).unwrap();
        let mut buf = GradBuffer::new(e.m.params());
        g.backward(v).accumulate_into(&g, &mut buf);
        buf
    };
    let eps = 1e-5;
    let ids: Vec<_> = e.m.params().ids().collect();
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for id in ids {
        let n = e.m.params().get(id).len();
        let grad: Vec<f64> = analytic.get(id).map_or(vec![0.0; n], |t| t.data().to_vec());
        for (k, &a) in grad.iter().enumerate() {
            let orig = e.m.params().get(id).data()[k];
            e.m.params_mut().get_mut(id).data_mut()[k] = orig + eps;
            let plus = loss_value(e, f);
            e.m.params_mut().get_mut(id).data_mut()[k] = orig - eps;
            let minus = loss_value(e, f);
            e.m.params_mut().get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

fn criterion_gradients() -> Verdict {
    let start = Instant::now();
    let (p, u) = grad_batch();
    let mut env = GradEnv {
        m: CastModel::new(ModelConfig::tiny(), V, 3).unwrap(),
        style: tiny_style(),
        coherence: tiny_coherence(V),
        p,
        u,
        soft: GenerationConfig { mode: GenMode::Soft, max_len: 6, ..Default::default() },
        stop: GenerationConfig { back_translation: FirstHop::Greedy, straight_through: false, max_len: 6, ..Default::default() },
    };
    let losses: [(&str, LossFn); 5] = [("c-s2s", c_s2s), ("cohere", cohere), ("recon", recon), ("btrans", btrans), ("style", style)];
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for (name, f) in losses {
        let (err, n) = max_relative_error(&mut env, f);
        worst = worst.max(err);
        parts.push(format!("{name} {err:.1e} ({n} coords)"));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst <= 1e-3 && secs <= 60.0, format!("max rel err {worst:.2e} <= 1e-3, {secs:.1}s <= 60s; {}", parts.join(", ")))
}

// ---------------------------------------------------------------- criteria 2, 3

struct Small {
    bench: SyntheticBenchmark,
    vocab: Vocabulary,
    parallel: Vec<EncodedParallel>,
    nonparallel: Vec<EncodedNonParallel>,
}

fn small() -> Small {
    let sizes = SplitSizes { train: 24, dev: 4, test: 4, nonparallel: 40, style_classifier: 4, coherence_paragraphs: 4 };
    let bench = generate_synthetic_benchmark(&SyntheticConfig { sizes, ..Default::default() }, 5).unwrap();
    let contexts: Vec<Vec<String>> = bench.train.iter().map(|s| s.context.flatten()).collect();
    let sents = bench.train.iter().flat_map(|s| [&s.source, &s.reference]).chain(bench.nonparallel.iter().map(|s| &s.sentence));
    let vocab = Vocabulary::build(sents.chain(contexts.iter()), 1).unwrap();
    let parallel = encode_parallel(&bench.train, &vocab, 50).unwrap();
    let nonparallel = encode_nonparallel(&bench.nonparallel, &vocab);
    Small { bench, vocab, parallel, nonparallel }
}

fn small_style(vocab_size: usize) -> StyleClassifier {
    let mut c =
        StyleClassifier::new(StyleClassifierConfig { embed_dim: 4, filter_widths: vec![2], num_filters: 3 }, vocab_size, 1).unwrap();
    c.freeze();
    c
}

fn criterion_composition() -> Verdict {
    let s = small();
    let m = CastModel::new(ModelConfig::tiny(), s.vocab.len(), 4).unwrap();
    let (style, coherence) = (small_style(s.vocab.len()), tiny_coherence(s.vocab.len()));
    let regs = Regularizers { style: &style, coherence: &coherence };
    let mut pick = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    let mut all_terms = 0;
    for _ in 0..100 {
        let np = 1 + (pick.next_u32() % 3) as usize;
        let p: Vec<EncodedParallel> = (0..np).map(|_| s.parallel[pick.next_u32() as usize % s.parallel.len()].clone()).collect();
        let u: Vec<EncodedNonParallel> = (0..np).map(|_| s.nonparallel[pick.next_u32() as usize % s.nonparallel.len()].clone()).collect();
        let mut w = || (pick.next_u32() % 2001) as f64 / 1000.0;
        let weights = LossWeights { cohere: w(), recon: w(), btrans: w(), style: w() };
        let settings =
            LossSettings { weights, generation: GenerationConfig { max_len: 8, ..Default::default() }, use_context_encoder: true };
        let mut g = Graph::new(Some(m.params()));
        let mut rng = ChaCha8Rng::seed_from_u64(pick.next_u64());
        let (_, b) = final_loss(&mut g, &m, regs, &p, &u, &settings, &mut rng).unwrap();
        let rel = (b.total - b.weighted_sum(&weights)).abs() / b.total.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        if [b.cohere, b.recon, b.btrans, b.style].iter().all(|&x| x > 0.0) {
            all_terms += 1;
        }
    }
    let p = &s.parallel[..4];
    let zero = LossSettings {
        weights: LossWeights::ZERO,
        generation: GenerationConfig { max_len: 8, ..Default::default() },
        use_context_encoder: true,
    };
    let total = {
        let mut g = Graph::new(Some(m.params()));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        final_loss(&mut g, &m, regs, p, &[], &zero, &mut rng).unwrap().1.total
    };
    let c_s2s = {
        let mut g = Graph::inference();
        let v = contextual_s2s_loss(&mut g, &m, p, true).unwrap();
        g.value(v).item()
    };
    verdict(
        worst <= 1e-6 && total == c_s2s,
        format!("max rel deviation {worst:.2e} <= 1e-6 over 100 batches ({all_terms} with all terms on); lambda=0 gives {total} vs c-s2s {c_s2s}"),
    )
}

fn criterion_frozen() -> Verdict {
    let s = small();
    let (style, coherence) = (small_style(s.vocab.len()), tiny_coherence(s.vocab.len()));
    let before = (style.params().checksum(), coherence.params().checksum());
    let model = CastModel::new(ModelConfig::tiny(), s.vocab.len(), 4).unwrap();
    let cfg = TrainingConfig {
        batch_size: 4,
        learning_rate: 1e-2,
        max_steps: 100,
        eval_every: 100,
        generation: GenerationConfig { max_len: 8, ..Default::default() },
        ..Default::default()
    };
    let data = TrainData { parallel: &s.parallel, nonparallel: &s.nonparallel, dev: &s.bench.dev, vocab: &s.vocab };
    let out = train(model, Regularizers { style: &style, coherence: &coherence }, &data, &cfg, 9).unwrap();
    let after = (style.params().checksum(), coherence.params().checksum());
    let t = out.history.last().unwrap().train;
    let used = t.cohere > 0.0 && t.style > 0.0;
    verdict(
        before == after && used && out.batches.len() == 100,
        format!(
            "{} steps with mean cohere {:.3} and style {:.3}; checksums {:x?} -> {:x?}",
            out.batches.len(),
            t.cohere,
            t.style,
            before,
            after
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<String, i64> {
    let mut out = BTreeMap::new();
    for i in 0..tokens.len().saturating_sub(n - 1) {
        *out.entry(tokens[i..i + n].join("\u{1}")).or_insert(0) += 1;
    }
    out
}

/// Straight from the definition: precision n-grams are rewarded for matching
/// the reference and penalized for matching source n-grams the reference lacks.
fn hand_gleu(src: &[Vec<String>], hyp: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=4 {
        let (mut num, mut den) = (0i64, 0i64);
        for i in 0..hyp.len() {
            let h = ngram_counts(&hyp[i], n);
            let r = ngram_counts(&refs[i], n);
            let s = ngram_counts(&src[i], n);
            let mut good = 0;
            let mut bad = 0;
            for (gram, &k) in &h {
                let rk = *r.get(gram).unwrap_or(&0);
                let sk = *s.get(gram).unwrap_or(&0);
                good += k.min(rk);
                bad += k.min((sk - rk).max(0));
            }
            num += (good - bad).max(0);
            den += (hyp[i].len() as i64 - n as i64 + 1).max(0);
        }
        log_p += (num as f64 / den as f64).ln() / 4.0;
    }
    let c: usize = hyp.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c < r { 1.0 - r as f64 / c as f64 } else { 0.0 };
    100.0 * (bp + log_p).exp()
}

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/gleu.json")
}

fn criterion_metrics() -> Verdict {
    let words = |t: &str| t.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let refs = vec![words("the cat sat on the mat"), words("a b c d e f")];
    let identity = bleu(&refs, &refs).unwrap();
    let fixture = bleu(&[words("the the the")], &[words("the cat")]).unwrap();
    // clipped unigram 1/3; bigram and trigram counts 0 of 2 and 0 of 1 smoothed to 0.1/2 and 0.1/1; no 4-grams
    let fixture_want = 100.0 * ((1.0f64 / 3.0) * (0.1 / 2.0) * (0.1 / 1.0)).powf(1.0 / 3.0);

    let f: Value = serde_json::from_str(&std::fs::read_to_string(fixture_path()).unwrap()).unwrap();
    let read = |k: &str| -> Vec<Vec<String>> { serde_json::from_value(f[k].clone()).unwrap() };
    let (src, hyp, rf) = (read("sources"), read("hypotheses"), read("references"));
    let got = gleu(&src, &hyp, &rf).unwrap();
    let want = hand_gleu(&src, &hyp, &rf);

    let mut lm = LanguageModel::new(LanguageModelConfig::default(), 77, 1).unwrap();
    lm.zero_head();
    let ppl = lm.perplexity(&[vec![4, 5, 6, 7], vec![9], vec![10, 11]]).unwrap();

    let pass = (identity - 100.0).abs() <= 1e-9
        && (fixture - fixture_want).abs() <= 1e-6
        && (got - want).abs() <= 1e-6
        && (ppl - 77.0).abs() <= 1e-9;
    verdict(
        pass,
        format!(
            "BLEU identity {identity}, fixture {fixture:.9} vs {fixture_want:.9}; GLEU {got:.9} vs {want:.9}; uniform PPL {ppl} (V 77)"
        ),
    )
}

// ---------------------------------------------------------------- pipeline runs

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml")
}

fn cast(out: &Path, args: &[&str]) -> std::result::Result<String, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_cast"))
        .args(args)
        .arg("--config")
        .arg(config_path())
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&output.stdout).into_owned();
    if output.status.success() {
        Ok(stdout)
    } else {
        Err(format!("cast {}: {}", args.join(" "), String::from_utf8_lossy(&output.stderr).trim()))
    }
}

const STAGES: [&str; 7] = ["gen-data", "build-vocab", "pretrain-style", "pretrain-coherence", "train-lm", "train", "eval"];

struct Run {
    stdout: Vec<String>,
    elapsed: Duration,
}

fn full_run(out: &Path) -> std::result::Result<Run, String> {
    let start = Instant::now();
    let mut stdout = Vec::new();
    for stage in STAGES {
        stdout.push(cast(out, &[stage])?);
    }
    Ok(Run { stdout, elapsed: start.elapsed() })
}

fn held_out(line: &str) -> Option<f64> {
    line.split_whitespace().last()?.trim_end_matches('%').parse().ok()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn criterion_classifiers(run: &Run) -> Verdict {
    let style = held_out(&run.stdout[2]);
    let coherence = held_out(&run.stdout[3]);
    let pass = style.is_some_and(|a| a >= 95.0) && coherence.is_some_and(|a| a >= 80.0);
    verdict(pass, format!("style held-out {style:?} >= 95, coherence held-out {coherence:?} >= 80"))
}

fn criterion_end_to_end(out: &Path, run: &Run) -> Verdict {
    let r = &read_json(&out.join("eval.json"))["report"];
    let (style, coherence, b) = (r["style_accuracy"].as_f64(), r["coherence_accuracy"].as_f64(), r["bleu"].as_f64());
    let minutes = run.elapsed.as_secs_f64() / 60.0;
    let pass = style.is_some_and(|a| a >= 90.0) && coherence.is_some_and(|a| a >= 75.0) && b.is_some_and(|a| a >= 60.0) && minutes <= 15.0;
    verdict(pass, format!("style {style:?} >= 90, coherence {coherence:?} >= 75, BLEU {b:?} >= 60, {minutes:.1} min <= 15"))
}

fn criterion_ablation(out: &Path) -> Verdict {
    if let Err(e) = cast(out, &["ablate"]) {
        return verdict(false, e);
    }
    let rows = read_json(&out.join("ablation.json"))["variants"].as_array().cloned().unwrap_or_default();
    let row = |name: &str| rows.iter().find(|r| r["model"] == name).cloned().unwrap_or(Value::Null);
    let (full, no_ctx, no_np) = (row("CAST"), row("w/o context encoder"), row("w/o non-parallel data"));
    let num = |v: &Value, k: &str| v[k].as_f64().unwrap_or(f64::NAN);
    let coh = (num(&full, "coherence_accuracy"), num(&no_ctx, "coherence_accuracy"));
    let bl = (num(&full, "bleu"), num(&no_np, "bleu"));
    let table = std::fs::read_to_string(out.join("ablation.txt")).unwrap_or_default();
    let _ = std::io::stderr().write_all(table.as_bytes());
    verdict(
        rows.len() == 5 && coh.0 >= coh.1 && bl.1 <= bl.0,
        format!("coherence CAST {:.2} >= w/o context {:.2}; BLEU w/o non-parallel {:.2} <= CAST {:.2}", coh.0, coh.1, bl.1, bl.0),
    )
}

fn criterion_batches(out: &Path) -> Verdict {
    let cfg = std::fs::read_to_string(config_path()).unwrap();
    let batch_size: usize = cfg
        .lines()
        .skip_while(|l| l.trim() != "[training]")
        .find_map(|l| l.strip_prefix("batch_size = ").map(|v| v.trim().parse().unwrap()))
        .unwrap();
    let half = batch_size / 2;
    let train_len = std::fs::read_to_string(out.join("data/train.jsonl")).unwrap().lines().filter(|l| !l.trim().is_empty()).count();
    let log = std::fs::read_to_string(out.join("batches.jsonl")).unwrap();
    let mut bad = 0;
    let mut epochs: BTreeMap<u64, HashSet<u64>> = BTreeMap::new();
    let mut batches = 0;
    for line in log.lines() {
        let b: Value = serde_json::from_str(line).unwrap();
        let (p, u) = (b["parallel"].as_array().unwrap(), b["nonparallel"].as_array().unwrap());
        if p.len() != half || u.len() != half {
            bad += 1;
        }
        epochs.entry(b["epoch"].as_u64().unwrap()).or_default().extend(p.iter().map(|i| i.as_u64().unwrap()));
        batches += 1;
    }
    let last = epochs.keys().next_back().copied();
    let complete: Vec<_> = epochs.iter().filter(|(e, _)| Some(**e) != last).collect();
    let covered = complete.iter().all(|(_, s)| s.len() == train_len);
    verdict(
        bad == 0 && batches > 0 && !complete.is_empty() && covered,
        format!(
            "{batches} logged batches, {bad} not {half}+{half}; {} complete epochs each cover all {train_len} parallel samples: {covered}",
            complete.len()
        ),
    )
}

fn criterion_determinism(a: &Path, b: &Path) -> Verdict {
    if let Err(e) = full_run(b) {
        return verdict(false, e);
    }
    let ha = std::fs::read(a.join("history.jsonl")).unwrap();
    let hb = std::fs::read(b.join("history.jsonl")).unwrap();
    let same_batches = std::fs::read(a.join("batches.jsonl")).unwrap() == std::fs::read(b.join("batches.jsonl")).unwrap();
    verdict(
        ha == hb && !ha.is_empty(),
        format!("history.jsonl {} vs {} bytes, identical: {}; batch logs identical: {same_batches}", ha.len(), hb.len(), ha == hb),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |n: usize, name: &'static str, v: Verdict| {
        report(n, name, &v);
        results.push((n, name, v));
    };
    record(1, "finite-difference gradients", criterion_gradients());
    record(2, "objective composition", criterion_composition());
    record(3, "frozen regularizers", criterion_frozen());
    record(4, "metric oracles", criterion_metrics());

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    match full_run(dir_a.path()) {
        Ok(run) => {
            record(5, "classifier pre-training", criterion_classifiers(&run));
            record(6, "end-to-end synthetic run", criterion_end_to_end(dir_a.path(), &run));
            record(8, "hybrid batching", criterion_batches(dir_a.path()));
            record(9, "determinism", criterion_determinism(dir_a.path(), dir_b.path()));
            record(7, "ablation direction", criterion_ablation(dir_a.path()));
        }
        Err(e) => {
            for (n, name) in [
                (5, "classifier pre-training"),
                (6, "end-to-end synthetic run"),
                (7, "ablation direction"),
                (8, "hybrid batching"),
                (9, "determinism"),
            ] {
                record(n, name, verdict(false, e.clone()));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("{} ({})", r.0, r.1)).collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
