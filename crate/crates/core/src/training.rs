//! Hybrid mini-batching, the optimizer loop with dev-set model selection,
//! and the ablation matrix.

use crate::batch::{EncodedNonParallel, EncodedParallel};
use crate::corpus::ParallelSample;
use crate::error::{CastError, Result};
use crate::eval::{evaluate_model, EvalReport, LanguageModel};
use crate::losses::{final_loss, GenerationConfig, LossBreakdown, LossSettings, LossWeights, Regularizers};
use crate::model::CastModel;
use crate::vocab::Vocabulary;
use autograd::{Adam, GradBuffer, Graph, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Component switches of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    pub use_context_encoder: bool,
    pub use_coherence_loss: bool,
    pub use_nonparallel: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Switches { use_context_encoder: true, use_coherence_loss: true, use_nonparallel: true }
    }
}

/// Dev score used to pick the kept checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Mean of dev BLEU and dev coherence accuracy.
    MeanBleuCoherence,
    Bleu,
    Coherence,
}

impl SelectionMetric {
    pub fn score(self, r: &EvalReport) -> f64 {
        match self {
            SelectionMetric::MeanBleuCoherence => 0.5 * (r.bleu + r.coherence_accuracy),
            SelectionMetric::Bleu => r.bleu,
            SelectionMetric::Coherence => r.coherence_accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Even; half parallel, half non-parallel.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Dev samples scored at each evaluation; 0 means all.
    pub dev_limit: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub switches: Switches,
    pub generation: GenerationConfig,
    pub selection: SelectionMetric,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 64,
            learning_rate: 5e-4,
            max_steps: 1000,
            eval_every: 100,
            dev_limit: 0,
            clip_norm: 5.0,
            weights: LossWeights::default(),
            switches: Switches::default(),
            generation: GenerationConfig::default(),
            selection: SelectionMetric::MeanBleuCoherence,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(CastError::Config(format!("training.batch_size must be even and >= 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(CastError::Config("training.learning_rate must be finite and >= 0".into()));
        }
        if self.eval_every == 0 {
            return Err(CastError::Config("training.eval_every must be at least 1".into()));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(CastError::Config("training.clip_norm must be finite and >= 0".into()));
        }
        self.weights.validate()
    }

    /// Loss weights after the switches: a disabled coherence loss or
    /// non-parallel pool zeroes the terms that depend on it.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.switches.use_coherence_loss {
            w.cohere = 0.0;
        }
        if !self.switches.use_nonparallel {
            w.recon = 0.0;
            w.btrans = 0.0;
            w.style = 0.0;
        }
        w
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            weights: self.effective_weights(),
            generation: self.generation.clone(),
            use_context_encoder: self.switches.use_context_encoder,
        }
    }
}

/// Pool indices of one mini-batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridBatch {
    pub epoch: usize,
    pub parallel: Vec<usize>,
    pub nonparallel: Vec<usize>,
}

/// Endless stream of hybrid batches. An epoch is one pass over a fresh
/// permutation of the parallel pool in chunks of `batch_size / 2`; a short
/// final chunk is topped up with other samples of the same epoch. Each epoch
/// down-samples the non-parallel pool to exactly as many samples as it needs.
#[derive(Clone, Debug)]
pub struct HybridBatches {
    parallel_len: usize,
    nonparallel_len: usize,
    half: usize,
    epoch: usize,
    rng: ChaCha8Rng,
    queue: VecDeque<HybridBatch>,
}

pub fn make_hybrid_batches(parallel_len: usize, nonparallel_len: usize, batch_size: usize, seed: u64) -> Result<HybridBatches> {
    if parallel_len == 0 || nonparallel_len == 0 {
        return Err(CastError::InvalidData("hybrid batching needs non-empty parallel and non-parallel pools".into()));
    }
    if batch_size < 2 || !batch_size.is_multiple_of(2) {
        return Err(CastError::Config(format!("batch_size must be even and >= 2, got {batch_size}")));
    }
    Ok(HybridBatches {
        parallel_len,
        nonparallel_len,
        half: batch_size / 2,
        epoch: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
        queue: VecDeque::new(),
    })
}

impl HybridBatches {
    pub fn batches_per_epoch(&self) -> usize {
        self.parallel_len.div_ceil(self.half)
    }

    fn fill_epoch(&mut self) {
        let half = self.half;
        let mut p: Vec<usize> = (0..self.parallel_len).collect();
        p.shuffle(&mut self.rng);
        let n = self.batches_per_epoch();
        let short = n * half - self.parallel_len;
        if short > 0 {
            let last_start = (n - 1) * half;
            let mut others: Vec<usize> = p[..last_start].to_vec();
            others.shuffle(&mut self.rng);
            // with fewer samples than a half-batch the pool is cycled
            let top_up: Vec<usize> = if others.is_empty() {
                p.iter().copied().cycle().take(short).collect()
            } else {
                others.into_iter().cycle().take(short).collect()
            };
            p.extend(top_up);
        }
        let mut u = Vec::with_capacity(n * half);
        while u.len() < n * half {
            let mut round: Vec<usize> = (0..self.nonparallel_len).collect();
            round.shuffle(&mut self.rng);
            u.extend(round.into_iter().take(n * half - u.len()));
        }
        for b in 0..n {
            self.queue.push_back(HybridBatch {
                epoch: self.epoch,
                parallel: p[b * half..(b + 1) * half].to_vec(),
                nonparallel: u[b * half..(b + 1) * half].to_vec(),
            });
        }
        self.epoch += 1;
    }
}

impl Iterator for HybridBatches {
    type Item = HybridBatch;

    fn next(&mut self) -> Option<HybridBatch> {
        if self.queue.is_empty() {
            self.fill_epoch();
        }
        self.queue.pop_front()
    }
}

/// One Adam update on the combined objective. Parameters outside the graph
/// (the context encoder when it is switched off) get no gradient.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut CastModel,
    adam: &mut Adam,
    regs: Regularizers<'_>,
    parallel: &[EncodedParallel],
    nonparallel: &[EncodedNonParallel],
    cfg: &TrainingConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let settings = cfg.loss_settings();
    let (grads, breakdown) = {
        let m: &CastModel = model;
        let mut g = Graph::new(Some(m.params()));
        let (loss, breakdown) = final_loss(&mut g, m, regs, parallel, nonparallel, &settings, rng)?;
        if !breakdown.total.is_finite() {
            return Err(CastError::NonFinite { step, detail: format!("{breakdown:?}") });
        }
        let mut buf = GradBuffer::new(m.params());
        g.backward(loss).accumulate_into(&g, &mut buf);
        (buf, breakdown)
    };
    let mut grads = grads;
    if !grads.all_finite() {
        return Err(CastError::NonFinite { step, detail: format!("gradient is not finite; losses {breakdown:?}") });
    }
    if cfg.clip_norm > 0.0 {
        grads.clip_global_norm(cfg.clip_norm);
    }
    adam.learning_rate = cfg.learning_rate;
    adam.step(model.params_mut(), &grads);
    Ok(breakdown)
}

/// Dev metrics of one evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    pub style_accuracy: f64,
    pub coherence_accuracy: f64,
    pub bleu: f64,
    pub gleu: f64,
}

/// One line of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean training losses since the previous record.
    pub train: LossBreakdown,
    pub dev: DevMetrics,
    pub selection: f64,
    /// Whether this point became the kept checkpoint.
    pub best: bool,
}

pub struct TrainData<'d> {
    pub parallel: &'d [EncodedParallel],
    pub nonparallel: &'d [EncodedNonParallel],
    pub dev: &'d [ParallelSample],
    pub vocab: &'d Vocabulary,
}

pub struct TrainOutcome {
    /// Parameters of the best dev point, or the last step without one.
    pub model: CastModel,
    pub history: Vec<HistoryRecord>,
    pub best_step: Option<usize>,
    pub best_selection: Option<f64>,
    pub batches: Vec<HybridBatch>,
}

fn mean_breakdown(sum: &LossBreakdown, n: usize) -> LossBreakdown {
    let k = 1.0 / n.max(1) as f64;
    LossBreakdown {
        c_s2s: sum.c_s2s * k,
        cohere: sum.cohere * k,
        recon: sum.recon * k,
        btrans: sum.btrans * k,
        style: sum.style * k,
        total: sum.total * k,
    }
}

fn accumulate(sum: &mut LossBreakdown, b: &LossBreakdown) {
    sum.c_s2s += b.c_s2s;
    sum.cohere += b.cohere;
    sum.recon += b.recon;
    sum.btrans += b.btrans;
    sum.style += b.style;
    sum.total += b.total;
}

/// Trains for `max_steps` updates, scores the dev split every `eval_every`
/// steps and keeps the parameters with the highest selection score.
pub fn train(mut model: CastModel, regs: Regularizers<'_>, data: &TrainData<'_>, cfg: &TrainingConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    regs.check_frozen()?;
    cfg.generation.validate(&model)?;
    if data.dev.is_empty() {
        return Err(CastError::InvalidData("training needs a dev split".into()));
    }
    let dev = if cfg.dev_limit > 0 && cfg.dev_limit < data.dev.len() { &data.dev[..cfg.dev_limit] } else { data.dev };
    let mut batches = make_hybrid_batches(data.parallel.len(), data.nonparallel.len(), cfg.batch_size, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_7a11);
    let mut adam = Adam::new(model.params(), cfg.learning_rate);
    let use_u = cfg.effective_weights().uses_nonparallel();

    let mut history = Vec::new();
    let mut log = Vec::with_capacity(cfg.max_steps);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since = LossBreakdown::default();
    let mut since_n = 0;
    for step in 1..=cfg.max_steps {
        let b = batches.next().expect("the batch stream is endless");
        let p: Vec<EncodedParallel> = b.parallel.iter().map(|&i| data.parallel[i].clone()).collect();
        let u: Vec<EncodedNonParallel> =
            if use_u { b.nonparallel.iter().map(|&i| data.nonparallel[i].clone()).collect() } else { Vec::new() };
        let breakdown = train_step(&mut model, &mut adam, regs, &p, &u, cfg, step as u64, &mut rng)?;
        accumulate(&mut since, &breakdown);
        since_n += 1;
        let epoch = b.epoch;
        log.push(b);

        if step % cfg.eval_every == 0 {
            let report =
                evaluate_model("dev", &model, regs, None, dev, data.vocab, cfg.switches.use_context_encoder, cfg.generation.max_len)?;
            let selection = cfg.selection.score(&report);
            let improved = best.as_ref().is_none_or(|(_, s, _)| selection > *s);
            if improved {
                best = Some((step, selection, model.params().clone()));
            }
            history.push(HistoryRecord {
                step,
                epoch,
                train: mean_breakdown(&since, since_n),
                dev: DevMetrics {
                    style_accuracy: report.style_accuracy,
                    coherence_accuracy: report.coherence_accuracy,
                    bleu: report.bleu,
                    gleu: report.gleu,
                },
                selection,
                best: improved,
            });
            since = LossBreakdown::default();
            since_n = 0;
        }
    }
    let (best_step, best_selection) = match best {
        Some((step, score, params)) => {
            *model.params_mut() = params;
            (Some(step), Some(score))
        }
        None => (None, None),
    };
    Ok(TrainOutcome { model, history, best_step, best_selection, batches: log })
}

/// Rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoContextEncoder,
    NoCoherence,
    NoBoth,
    NoNonparallel,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoContextEncoder, Variant::NoCoherence, Variant::NoBoth, Variant::NoNonparallel];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "CAST",
            Variant::NoContextEncoder => "w/o context encoder",
            Variant::NoCoherence => "w/o cohere. classifier",
            Variant::NoBoth => "w/o both",
            Variant::NoNonparallel => "w/o non-parallel data",
        }
    }

    pub fn switches(self) -> Switches {
        let on = Switches::default();
        match self {
            Variant::Full => on,
            Variant::NoContextEncoder => Switches { use_context_encoder: false, ..on },
            Variant::NoCoherence => Switches { use_coherence_loss: false, ..on },
            Variant::NoBoth => Switches { use_context_encoder: false, use_coherence_loss: false, ..on },
            Variant::NoNonparallel => Switches { use_nonparallel: false, ..on },
        }
    }
}

pub struct AblationData<'d> {
    pub train: TrainData<'d>,
    pub test: &'d [ParallelSample],
}

/// Trains every variant from the same initial parameters, seed and data, and
/// scores each on the test split.
pub fn run_ablations(
    initial: &CastModel,
    regs: Regularizers<'_>,
    lm: Option<&LanguageModel>,
    data: &AblationData<'_>,
    cfg: &TrainingConfig,
    seed: u64,
    variants: &[Variant],
) -> Result<Vec<(Variant, EvalReport)>> {
    variants
        .iter()
        .map(|&v| {
            let vcfg = TrainingConfig { switches: v.switches(), ..cfg.clone() };
            let out = train(initial.clone(), regs, &data.train, &vcfg, seed)?;
            let report = evaluate_model(
                v.name(),
                &out.model,
                regs,
                lm,
                data.test,
                data.train.vocab,
                vcfg.switches.use_context_encoder,
                vcfg.generation.max_len,
            )?;
            Ok((v, report))
        })
        .collect()
}
