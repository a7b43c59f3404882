//! Rule-based synthetic benchmark with a known answer for every metric.
//!
//! Sentences follow one template per style:
//!
//! ```text
//! style A: <openerA> <subject> <modalA> <verb> (<det> <noun> | <pronoun>) [<tail>] <closerA>
//! style B: <openerB> <subject> <modalB> <verb>  <det> <noun>              [<tail>] <closerB>
//! ```
//!
//! Openers, modals and closers come in A/B pairs, so restyling swaps each
//! marker for its partner. Every paragraph has one topic and every noun
//! belongs to exactly one topic. Style A never spells out a topic's head noun:
//! it writes the pronoun instead, and the B rewrite has to recover the head
//! noun from the surrounding paragraph. Coherence is decidable by topic overlap.

use super::{Context, NonParallelSample, Paragraph, ParallelSample, Sentence, StyleLabel, StyleNames};
use crate::error::{CastError, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};

/// Sizes of each data slice. Parallel data is split into train/dev/test plus
/// a held-apart paragraph pool for the coherence classifier; non-parallel
/// data into CAST training and the style classifier's slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub nonparallel: usize,
    pub style_classifier: usize,
    pub coherence_paragraphs: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { train: 500, dev: 50, test: 100, nonparallel: 2000, style_classifier: 1000, coherence_paragraphs: 2000 }
    }
}

/// A marker and its counterpart in the other style.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerPair {
    pub a: String,
    pub b: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub style_names: StyleNames,
    /// Nouns per topic; the first noun of each topic is its head noun.
    pub topics: Vec<Vec<String>>,
    pub openers: Vec<MarkerPair>,
    pub modals: Vec<MarkerPair>,
    pub closers: Vec<MarkerPair>,
    /// Style-A stand-in for "<det> <head noun>".
    pub pronoun: String,
    /// Determiner written before a head noun recovered from context.
    pub pronoun_determiner: String,
    pub subjects: Vec<String>,
    pub verbs: Vec<String>,
    pub determiners: Vec<String>,
    pub tails: Vec<String>,
    pub tail_rate: f64,
    /// Probability that a parallel source refers to the head noun (and so uses the pronoun).
    pub pronoun_rate: f64,
    pub sentences_per_paragraph: usize,
    pub sizes: SplitSizes,
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn pairs(v: &[(&str, &str)]) -> Vec<MarkerPair> {
    v.iter().map(|(a, b)| MarkerPair { a: a.to_string(), b: b.to_string() }).collect()
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            style_names: StyleNames::default(),
            topics: vec![
                strs(&["budget", "invoice"]),
                strs(&["flight", "hotel"]),
                strs(&["match", "stadium"]),
                strs(&["dinner", "recipe"]),
                strs(&["server", "laptop"]),
                strs(&["doctor", "clinic"]),
                strs(&["concert", "guitar"]),
                strs(&["exam", "lecture"]),
            ],
            openers: pairs(&[("hey", "hello"), ("yo", "greetings"), ("so", "furthermore"), ("ok", "certainly")]),
            modals: pairs(&[("gonna", "will"), ("gotta", "must"), ("wanna", "shall"), ("kinda", "should")]),
            closers: pairs(&[("lol", "regards"), ("haha", "sincerely"), ("!!", "."), ("thx", "thanks")]),
            pronoun: "it".into(),
            pronoun_determiner: "the".into(),
            subjects: strs(&["i", "we", "you", "they", "someone", "everyone"]),
            verbs: strs(&["check", "review", "send", "discuss", "update", "fix", "share", "plan", "book", "cancel", "finish", "print"]),
            determiners: strs(&["the", "our", "this", "that", "my", "your"]),
            tails: strs(&["today", "tomorrow", "soon", "later", "tonight", "again", "first", "now"]),
            tail_rate: 0.5,
            pronoun_rate: 0.5,
            sentences_per_paragraph: 4,
            sizes: SplitSizes::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CastError::Config(m));
        let lexicons: [(&str, bool); 7] = [
            ("topics", self.topics.is_empty()),
            ("openers", self.openers.is_empty()),
            ("modals", self.modals.is_empty()),
            ("closers", self.closers.is_empty()),
            ("subjects", self.subjects.is_empty()),
            ("verbs", self.verbs.is_empty()),
            ("determiners", self.determiners.is_empty()),
        ];
        for (name, empty) in lexicons {
            if empty {
                return err(format!("lexicon `{name}` is empty"));
            }
        }
        if self.topics.iter().any(|t| t.len() < 2) {
            return err("every topic needs a head noun and at least one other noun".into());
        }
        let a: HashSet<&str> = self.markers(StyleLabel::A).into_iter().collect();
        let b: HashSet<&str> = self.markers(StyleLabel::B).into_iter().collect();
        if let Some(m) = a.intersection(&b).next() {
            return err(format!("style marker lexicons overlap on {m:?}"));
        }
        let mut nouns = HashSet::new();
        for t in &self.topics {
            for n in t {
                if !nouns.insert(n.as_str()) {
                    return err(format!("noun {n:?} belongs to more than one topic"));
                }
            }
        }
        let neutral = self.subjects.iter().chain(&self.verbs).chain(&self.determiners).chain(&self.tails);
        if nouns.contains(self.pronoun.as_str()) {
            return err(format!("pronoun {:?} is also a topic noun", self.pronoun));
        }
        for w in neutral {
            if a.contains(w.as_str()) || b.contains(w.as_str()) {
                return err(format!("neutral word {w:?} is also a style marker"));
            }
            if nouns.contains(w.as_str()) {
                return err(format!("neutral word {w:?} is also a topic noun"));
            }
        }
        if !(0.0..=1.0).contains(&self.tail_rate) || !(0.0..=1.0).contains(&self.pronoun_rate) {
            return err("tail_rate and pronoun_rate must lie in [0, 1]".into());
        }
        if self.sentences_per_paragraph < 2 {
            return err("sentences_per_paragraph must be at least 2".into());
        }
        Ok(())
    }

    /// Every marker token of a style; the pronoun counts as a style-A marker.
    pub fn markers(&self, style: StyleLabel) -> Vec<&str> {
        fn pick(p: &MarkerPair, style: StyleLabel) -> &str {
            match style {
                StyleLabel::A => &p.a,
                StyleLabel::B => &p.b,
            }
        }
        let mut out: Vec<&str> = self.openers.iter().chain(&self.modals).chain(&self.closers).map(|p| pick(p, style)).collect();
        if style == StyleLabel::A {
            out.push(&self.pronoun);
        }
        out
    }
}

/// Ground-truth rewrite rules and coherence judgements for the synthetic task.
#[derive(Clone, Debug)]
pub struct Oracle {
    config: SyntheticConfig,
    counterpart: HashMap<String, (StyleLabel, String)>,
    noun_topic: HashMap<String, (usize, bool)>,
    determiners: HashSet<String>,
}

impl Oracle {
    pub fn new(config: &SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let mut counterpart = HashMap::new();
        for p in config.openers.iter().chain(&config.modals).chain(&config.closers) {
            counterpart.insert(p.a.clone(), (StyleLabel::A, p.b.clone()));
            counterpart.insert(p.b.clone(), (StyleLabel::B, p.a.clone()));
        }
        let mut noun_topic = HashMap::new();
        for (t, nouns) in config.topics.iter().enumerate() {
            for (k, n) in nouns.iter().enumerate() {
                noun_topic.insert(n.clone(), (t, k == 0));
            }
        }
        Ok(Oracle { config: config.clone(), counterpart, noun_topic, determiners: config.determiners.iter().cloned().collect() })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn num_topics(&self) -> usize {
        self.config.topics.len()
    }

    /// Style whose lexicon contains `token`, if it is a marker.
    pub fn marker_style(&self, token: &str) -> Option<StyleLabel> {
        if token == self.config.pronoun {
            return Some(StyleLabel::A);
        }
        self.counterpart.get(token).map(|(s, _)| *s)
    }

    /// Styles of every marker in the sentence, in order.
    pub fn markers(&self, sentence: &[String]) -> Vec<StyleLabel> {
        sentence.iter().filter_map(|t| self.marker_style(t)).collect()
    }

    /// Style with strictly more markers in the sentence, if any.
    pub fn style_by_markers(&self, sentence: &[String]) -> Option<StyleLabel> {
        let m = self.markers(sentence);
        let a = m.iter().filter(|s| **s == StyleLabel::A).count();
        let b = m.len() - a;
        match a.cmp(&b) {
            std::cmp::Ordering::Greater => Some(StyleLabel::A),
            std::cmp::Ordering::Less => Some(StyleLabel::B),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn topic_of_token(&self, token: &str) -> Option<usize> {
        self.noun_topic.get(token).map(|(t, _)| *t)
    }

    /// Topic of the first topic noun in the sentence.
    pub fn topic_of_sentence(&self, sentence: &[String]) -> Option<usize> {
        sentence.iter().find_map(|t| self.topic_of_token(t))
    }

    /// Most frequent noun topic among the context tokens; ties go to the lower topic index.
    pub fn topic_of_context(&self, context: &Context) -> Option<usize> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for tok in context.flatten() {
            if let Some(t) = self.topic_of_token(&tok) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let max = counts.values().copied().max()?;
        counts.into_iter().find(|(_, c)| *c == max).map(|(t, _)| t)
    }

    /// Topic-overlap rule: `Some(true)` if the candidate names the context's
    /// topic, `Some(false)` if it names another one, `None` if undecidable.
    pub fn is_coherent(&self, context: &Context, candidate: &[String]) -> Option<bool> {
        let ctx = self.topic_of_context(context)?;
        let cand = self.topic_of_sentence(candidate)?;
        Some(ctx == cand)
    }

    /// Rewrites `sentence` into `target` style. Markers are swapped for their
    /// partners; rewriting into style B resolves the pronoun to the head noun
    /// of the context's topic, rewriting into style A replaces
    /// `<det> <head noun>` by the pronoun.
    pub fn restyle(&self, sentence: &[String], context: &Context, target: StyleLabel) -> Sentence {
        let mut out = Vec::with_capacity(sentence.len() + 1);
        let mut i = 0;
        while i < sentence.len() {
            let tok = &sentence[i];
            if let Some((style, partner)) = self.counterpart.get(tok) {
                out.push(if *style == target { tok.clone() } else { partner.clone() });
                i += 1;
                continue;
            }
            match target {
                StyleLabel::B if *tok == self.config.pronoun => {
                    match self.topic_of_context(context) {
                        Some(t) => {
                            out.push(self.config.pronoun_determiner.clone());
                            out.push(self.config.topics[t][0].clone());
                        }
                        None => out.push(tok.clone()),
                    }
                    i += 1;
                }
                StyleLabel::A
                    if self.determiners.contains(tok)
                        && sentence.get(i + 1).is_some_and(|n| self.noun_topic.get(n).is_some_and(|(_, head)| *head)) =>
                {
                    out.push(self.config.pronoun.clone());
                    i += 2;
                }
                _ => {
                    out.push(tok.clone());
                    i += 1;
                }
            }
        }
        out
    }
}

/// All generated slices plus the oracle that produced the references.
#[derive(Clone, Debug)]
pub struct SyntheticBenchmark {
    pub train: Vec<ParallelSample>,
    pub dev: Vec<ParallelSample>,
    pub test: Vec<ParallelSample>,
    pub nonparallel: Vec<NonParallelSample>,
    pub style_classifier: Vec<NonParallelSample>,
    pub paragraphs: Vec<Paragraph>,
    pub oracle: Oracle,
}

#[derive(Clone, Copy)]
enum NounChoice {
    Any,
    NonHead,
    Head,
}

struct Generator<'a> {
    cfg: &'a SyntheticConfig,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn pick<'b>(&mut self, v: &'b [String]) -> &'b String {
        &v[self.rng.gen_range(0..v.len())]
    }

    fn sentence(&mut self, topic: usize, style: StyleLabel, noun: NounChoice) -> Sentence {
        let cfg = self.cfg;
        let side = |p: &MarkerPair| match style {
            StyleLabel::A => p.a.clone(),
            StyleLabel::B => p.b.clone(),
        };
        let nouns = &cfg.topics[topic];
        let noun_idx = match noun {
            NounChoice::Any => self.rng.gen_range(0..nouns.len()),
            NounChoice::NonHead => self.rng.gen_range(1..nouns.len()),
            NounChoice::Head => 0,
        };
        let mut s = vec![side(&cfg.openers[self.rng.gen_range(0..cfg.openers.len())])];
        s.push(self.pick(&cfg.subjects).clone());
        s.push(side(&cfg.modals[self.rng.gen_range(0..cfg.modals.len())]));
        s.push(self.pick(&cfg.verbs).clone());
        let det = self.pick(&cfg.determiners).clone();
        if style == StyleLabel::A && noun_idx == 0 {
            s.push(cfg.pronoun.clone());
        } else {
            s.push(det);
            s.push(nouns[noun_idx].clone());
        }
        if !cfg.tails.is_empty() && self.rng.gen_bool(cfg.tail_rate) {
            s.push(self.pick(&cfg.tails).clone());
        }
        s.push(side(&cfg.closers[self.rng.gen_range(0..cfg.closers.len())]));
        s
    }

    fn style(&mut self) -> StyleLabel {
        if self.rng.gen_bool(0.5) {
            StyleLabel::A
        } else {
            StyleLabel::B
        }
    }

    fn topic(&mut self) -> usize {
        self.rng.gen_range(0..self.cfg.topics.len())
    }

    fn parallel(&mut self, oracle: &Oracle) -> ParallelSample {
        let topic = self.topic();
        let n = self.cfg.sentences_per_paragraph;
        let hole = self.rng.gen_range(0..n);
        let mut context = Context::default();
        for i in 0..n {
            if i == hole {
                continue;
            }
            let s = self.sentence(topic, StyleLabel::A, NounChoice::NonHead);
            if i < hole {
                context.before.push(s);
            } else {
                context.after.push(s);
            }
        }
        let noun = if self.rng.gen_bool(self.cfg.pronoun_rate) { NounChoice::Head } else { NounChoice::NonHead };
        let source = self.sentence(topic, StyleLabel::A, noun);
        let reference = oracle.restyle(&source, &context, StyleLabel::B);
        ParallelSample { source, reference, context, source_style: StyleLabel::A, target_style: StyleLabel::B }
    }

    fn nonparallel(&mut self) -> NonParallelSample {
        let topic = self.topic();
        let style = self.style();
        NonParallelSample { sentence: self.sentence(topic, style, NounChoice::Any), style }
    }

    fn paragraph(&mut self) -> Paragraph {
        let topic = self.topic();
        let n = self.cfg.sentences_per_paragraph;
        // styles are drawn per sentence so that style says nothing about
        // coherence; style-A sentences avoid the pronoun and name their topic
        let sentences = (0..n)
            .map(|_| {
                let style = self.style();
                let noun = if style == StyleLabel::A { NounChoice::NonHead } else { NounChoice::Any };
                self.sentence(topic, style, noun)
            })
            .collect();
        Paragraph { sentences, target_index: self.rng.gen_range(0..n) }
    }
}

/// Generates every data slice from `(config, seed)`.
pub fn generate_synthetic_benchmark(config: &SyntheticConfig, seed: u64) -> Result<SyntheticBenchmark> {
    let oracle = Oracle::new(config)?;
    let mut g = Generator { cfg: config, rng: ChaCha8Rng::seed_from_u64(seed) };
    let sizes = &config.sizes;
    let parallel = |n: usize, g: &mut Generator<'_>| (0..n).map(|_| g.parallel(&oracle)).collect::<Vec<_>>();
    let train = parallel(sizes.train, &mut g);
    let dev = parallel(sizes.dev, &mut g);
    let test = parallel(sizes.test, &mut g);
    let nonparallel = (0..sizes.nonparallel).map(|_| g.nonparallel()).collect();
    let style_classifier = (0..sizes.style_classifier).map(|_| g.nonparallel()).collect();
    let paragraphs = (0..sizes.coherence_paragraphs).map(|_| g.paragraph()).collect();
    Ok(SyntheticBenchmark { train, dev, test, nonparallel, style_classifier, paragraphs, oracle })
}
