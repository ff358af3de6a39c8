//! Small-scale experiment: a template-grammar corpus in which many texts
//! are ambiguous without audio, rendered by the synthesizer, and used to
//! compare text-only and text+pitch models.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{class_counts, ClassWeights, CorpusError, LabeledSample, PunctClass};
use crate::dsp::yin_pitch;
use crate::eval::{self, AggregateReport, EvalError, EvalReport};
use crate::features::{token_features, AcousticMode, Acoustics, FeatureError, EMBED_DIM};
use crate::nn::ModelConfig;
use crate::rng::{derive_seed_str, SplitMix64};
use crate::synth::{augment_speakers, filter_mismatches, simulate_asr, speaker_pool, split_speakers, synthesize, FilterStats, SpeakerProfile, SynthError};
use crate::train::{train_loop, Example, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum DeskError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no examples survived the mismatch filter")]
    Empty,
}

const PLAIN_SUBJECTS: &[&str] = &["i", "we", "they", "she", "he", "my brother", "the neighbours", "our teacher"];
const PAST_VERBS: &[&str] = &["painted", "cleaned", "opened", "closed", "sold", "found", "fixed", "moved", "washed", "checked"];
const BASE_VERBS: &[&str] = &["paint", "clean", "open", "close", "sell", "find", "fix", "move", "wash", "check"];
const NOUNS: &[&str] = &["fence", "door", "car", "window", "garden", "kitchen", "letter", "table", "boxes", "bike"];
const TIMES: &[&str] = &["yesterday", "this morning", "last week", "again"];
const BE_SUBJECTS: &[(&str, &str)] = &[
    ("you", "are"),
    ("we", "are"),
    ("they", "are"),
    ("she", "is"),
    ("he", "is"),
    ("it", "is"),
    ("the kids", "are"),
    ("your sister", "is"),
    ("the plan", "is"),
];
const STATES: &[&str] = &["ready", "tired", "sure", "home", "late", "okay", "hungry", "done", "coming", "leaving", "serious", "free"];
const MARKERS: &[&str] = &["well", "so", "okay", "now", "anyway", "honestly"];
const WH: &[&str] = &["where", "when", "why", "how"];
const DID_SUBJECTS: &[&str] = &["you", "they", "she", "he", "we"];
const EXCLAIM_ADJ: &[&str] = &["lovely", "great", "strange", "huge", "beautiful", "terrible"];
const EXCLAIM_NOUNS: &[&str] = &["day", "idea", "surprise", "view", "game", "party"];

/// Share of each sentence template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarMix {
    pub plain: f64,
    /// Declaratives valid as statement or question, optionally opened by a
    /// discourse marker whose comma is itself optional.
    pub ambiguous: f64,
    pub wh_question: f64,
    pub exclamation: f64,
}

impl Default for GrammarMix {
    fn default() -> Self {
        Self { plain: 0.30, ambiguous: 0.40, wh_question: 0.15, exclamation: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SentenceKind {
    Plain,
    Ambiguous,
    WhQuestion,
    Exclamation,
}

fn pick<'a>(rng: &mut SplitMix64, items: &'a [&'a str]) -> &'a str {
    items[rng.below(items.len() as u64) as usize]
}

fn push_words(words: &mut Vec<String>, labels: &mut Vec<PunctClass>, phrase: &str) {
    for w in phrase.split(' ') {
        words.push(w.to_string());
        labels.push(PunctClass::None);
    }
}

/// Appends one sentence and returns its template.
pub fn sentence(rng: &mut SplitMix64, mix: &GrammarMix, words: &mut Vec<String>, labels: &mut Vec<PunctClass>) -> SentenceKind {
    let total = mix.plain + mix.ambiguous + mix.wh_question + mix.exclamation;
    let u = rng.next_f64() * total;
    let kind = if u < mix.plain {
        SentenceKind::Plain
    } else if u < mix.plain + mix.ambiguous {
        SentenceKind::Ambiguous
    } else if u < mix.plain + mix.ambiguous + mix.wh_question {
        SentenceKind::WhQuestion
    } else {
        SentenceKind::Exclamation
    };
    let end = match kind {
        SentenceKind::Plain => {
            push_words(words, labels, pick(rng, PLAIN_SUBJECTS));
            push_words(words, labels, pick(rng, PAST_VERBS));
            push_words(words, labels, "the");
            push_words(words, labels, pick(rng, NOUNS));
            if rng.bernoulli(0.5) {
                push_words(words, labels, pick(rng, TIMES));
            }
            PunctClass::Period
        }
        SentenceKind::Ambiguous => {
            if rng.bernoulli(0.5) {
                push_words(words, labels, pick(rng, MARKERS));
                if rng.bernoulli(0.5) {
                    *labels.last_mut().unwrap() = PunctClass::Comma;
                }
            }
            let (subj, be) = BE_SUBJECTS[rng.below(BE_SUBJECTS.len() as u64) as usize];
            push_words(words, labels, subj);
            push_words(words, labels, be);
            push_words(words, labels, pick(rng, STATES));
            if rng.bernoulli(0.5) {
                PunctClass::QuestionMark
            } else {
                PunctClass::Period
            }
        }
        SentenceKind::WhQuestion => {
            push_words(words, labels, pick(rng, WH));
            push_words(words, labels, "did");
            push_words(words, labels, pick(rng, DID_SUBJECTS));
            push_words(words, labels, pick(rng, BASE_VERBS));
            push_words(words, labels, "the");
            push_words(words, labels, pick(rng, NOUNS));
            PunctClass::QuestionMark
        }
        SentenceKind::Exclamation => {
            push_words(words, labels, "what a");
            push_words(words, labels, pick(rng, EXCLAIM_ADJ));
            push_words(words, labels, pick(rng, EXCLAIM_NOUNS));
            PunctClass::ExclamationMark
        }
    };
    *labels.last_mut().unwrap() = end;
    kind
}

/// `n` samples of one to three sentences each.
pub fn grammar_corpus(n: usize, mix: &GrammarMix, seed: u64) -> Vec<LabeledSample> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|i| {
            let mut words = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..1 + rng.below(3) {
                sentence(&mut rng, mix, &mut words, &mut labels);
            }
            LabeledSample::new(format!("desk-{i:06}"), words, labels)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskConfig {
    pub samples: usize,
    pub mix: GrammarMix,
    pub speakers: usize,
    pub held_out_speakers: usize,
    pub test_fraction: f64,
    pub asr_error_rate: f64,
    pub corpus_seed: u64,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub proj_dim: usize,
    pub qrnn_hidden: usize,
    pub kernel_width: usize,
    pub zoneout_p: f64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            mix: GrammarMix::default(),
            speakers: 8,
            held_out_speakers: 2,
            test_fraction: 0.2,
            asr_error_rate: 0.0,
            corpus_seed: 2024,
            seeds: vec![1, 2, 3],
            train: TrainConfig { lr0: 2e-3, ..TrainConfig::desk() },
            proj_dim: 64,
            qrnn_hidden: 32,
            kernel_width: 3,
            zoneout_p: 0.1,
        }
    }
}

impl DeskConfig {
    pub fn model(&self, mode: AcousticMode) -> ModelConfig {
        ModelConfig {
            input_dim: mode.feature_dim(),
            proj_dim: self.proj_dim,
            qrnn_hidden: self.qrnn_hidden,
            kernel_width: self.kernel_width,
            zoneout_p: self.zoneout_p,
            n_classes: 5,
            mel_channels: None,
        }
    }
}

/// Synthesizes, recognizes, filters and featurizes each (text, voice) pair
/// with pitch statistics.
pub fn render_examples(
    pairs: &[(LabeledSample, SpeakerProfile)],
    asr_error_rate: f64,
    seed: u64,
) -> Result<(Vec<Example>, FilterStats), DeskError> {
    let mut recognized = Vec::with_capacity(pairs.len());
    let mut utterances = Vec::with_capacity(pairs.len());
    for (sample, speaker) in pairs {
        let utt = synthesize(sample, speaker);
        let asr = simulate_asr(&utt, &sample.words, asr_error_rate, seed)?;
        recognized.push(((sample, utterances.len()), asr));
        utterances.push(utt);
    }
    let (kept, stats) = filter_mismatches(recognized);
    let mut out = Vec::with_capacity(kept.len());
    for ((sample, u), asr) in kept {
        let utt = &utterances[u];
        let track = yin_pitch(&utt.audio);
        let features = token_features(&asr.tokens, &asr.boundaries, Acoustics::Pitch(&track))?;
        out.push(Example { id: format!("{}__{}", sample.id, utt.speaker_id), features: features.rows, labels: sample.labels.clone() });
    }
    Ok((out, stats))
}

impl crate::synth::WordCount for (&LabeledSample, usize) {
    fn word_count(&self) -> usize {
        self.0.words.len()
    }
}

/// Drops the acoustic columns.
pub fn text_only(examples: &[Example]) -> Vec<Example> {
    examples
        .iter()
        .map(|e| Example { id: e.id.clone(), features: e.features.slice(ndarray::s![.., ..EMBED_DIM]).to_owned(), labels: e.labels.clone() })
        .collect()
}

/// Rendered train and test sets for one speaker multiplicity.
#[derive(Debug, Clone)]
pub struct DeskData {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub train_filter: FilterStats,
    pub train_speakers: Vec<String>,
    pub test_speakers: Vec<String>,
}

/// Texts are split into train and test; train texts are voiced by
/// `n_per_sample` distinct training speakers, test texts by one held-out
/// speaker each.
pub fn build_data(cfg: &DeskConfig, n_per_sample: usize) -> Result<DeskData, DeskError> {
    let corpus = grammar_corpus(cfg.samples, &cfg.mix, cfg.corpus_seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    SplitMix64::new(derive_seed_str(cfg.corpus_seed, "split")).shuffle(&mut order);
    let n_test = (cfg.test_fraction * corpus.len() as f64).round() as usize;
    let test_texts: Vec<LabeledSample> = order[..n_test].iter().map(|&i| corpus[i].clone()).collect();
    let train_texts: Vec<LabeledSample> = order[n_test..].iter().map(|&i| corpus[i].clone()).collect();

    let pool = speaker_pool("tts", cfg.speakers);
    let train_frac = (cfg.speakers - cfg.held_out_speakers) as f64 / cfg.speakers as f64;
    let (train_pool, test_pool) = split_speakers(&pool, train_frac, derive_seed_str(cfg.corpus_seed, "speakers"))?;
    let test_pool = if test_pool.is_empty() { train_pool.clone() } else { test_pool };

    let train_pairs = augment_speakers(&train_texts, n_per_sample, &train_pool, derive_seed_str(cfg.corpus_seed, "voices"))?;
    let test_pairs = augment_speakers(&test_texts, 1, &test_pool, derive_seed_str(cfg.corpus_seed, "test-voices"))?;
    let asr_seed = derive_seed_str(cfg.corpus_seed, "asr");
    let (train, train_filter) = render_examples(&train_pairs, cfg.asr_error_rate, asr_seed)?;
    let (test, _) = render_examples(&test_pairs, 0.0, asr_seed)?;
    if train.is_empty() || test.is_empty() {
        return Err(DeskError::Empty);
    }
    Ok(DeskData {
        train,
        test,
        train_filter,
        train_speakers: train_pool.iter().map(|s| s.speaker_id.clone()).collect(),
        test_speakers: test_pool.iter().map(|s| s.speaker_id.clone()).collect(),
    })
}

pub fn example_class_weights(examples: &[Example]) -> Result<ClassWeights, CorpusError> {
    let samples: Vec<LabeledSample> =
        examples.iter().map(|e| LabeledSample { id: String::new(), words: vec![], labels: e.labels.clone(), source_text: String::new() }).collect();
    ClassWeights::from_counts(class_counts(&samples))
}

/// Trains one model per seed and evaluates each on the test set.
pub fn run_seeds(cfg: &DeskConfig, mode: AcousticMode, train: &[Example], test: &[Example]) -> Result<Vec<EvalReport>, DeskError> {
    let (train, test) = match mode {
        AcousticMode::None => (text_only(train), text_only(test)),
        AcousticMode::Pitch => (train.to_vec(), test.to_vec()),
        AcousticMode::Logmel => return Err(DeskError::Feature(FeatureError::Dump("log-mel runs are not part of this experiment".into()))),
    };
    let weights = example_class_weights(&train)?;
    let model = cfg.model(mode);
    let mut reports = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let tc = TrainConfig { seed, ..cfg.train.clone() };
        let outcome = train_loop(&train, &[], &tc, &model, weights)?;
        let report = eval::evaluate(&outcome.last, &test, mode)?;
        log::info!("{mode:?} seed {seed}: QM F1 {:.3}, comma F1 {:.3}", report.class(PunctClass::QuestionMark).f1, report.class(PunctClass::Comma).f1);
        reports.push(report);
    }
    Ok(reports)
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub baseline: AggregateReport,
    pub candidate: AggregateReport,
}

impl Comparison {
    pub fn f1_gain(&self, c: PunctClass) -> f64 {
        self.candidate.class_f1(c).mean - self.baseline.class_f1(c).mean
    }

    pub fn accuracy_gain(&self) -> Option<f64> {
        Some(self.candidate.punctuation_accuracy?.mean - self.baseline.punctuation_accuracy?.mean)
    }
}

pub fn compare(baseline: &[EvalReport], candidate: &[EvalReport]) -> Result<Comparison, DeskError> {
    Ok(Comparison { baseline: eval::aggregate(baseline)?, candidate: eval::aggregate(candidate)? })
}
