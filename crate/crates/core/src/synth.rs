//! Toy prosody synthesizer and simulated ASR.
//!
//! Each word becomes a harmonic tone followed by a pause whose length
//! depends on the punctuation after the word. The pitch contour declines
//! over each sentence, rises at the end of questions and is raised and
//! steepened for exclamations. A simulated recognizer then reports jittered
//! token times and occasionally splits or merges tokens.

use std::f64::consts::PI;

use thiserror::Error;

use crate::corpus::{LabeledSample, PunctClass, Source};
use crate::dsp::{AudioBuffer, SAMPLE_RATE};
use crate::rng::{derive_seed_str, hash_bytes, SplitMix64};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("{name} must lie in [0, 1], got {value}")]
    Fraction { name: &'static str, value: f64 },
    #[error("cannot pick {requested} distinct speakers from a pool of {pool}")]
    PoolTooSmall { requested: usize, pool: usize },
    #[error("speaker pool is empty")]
    EmptyPool,
}

pub const F0_RANGE: (f64, f64) = (110.0, 220.0);
pub const VOICED_MS: (f64, f64) = (150.0, 300.0);
/// Boundary jitter applied by the simulated recognizer, in seconds.
pub const ASR_JITTER: f64 = 0.020;
const FADE_SECONDS: f64 = 0.010;
const QUESTION_RISE: f64 = 0.30;
const DECLINATION: f64 = 0.10;
const EXCLAMATION_LIFT: f64 = 0.20;

/// Pause after a word, by the punctuation that follows it.
pub fn pause_ms(label: PunctClass) -> f64 {
    match label {
        PunctClass::None => 20.0,
        PunctClass::Comma => 200.0,
        PunctClass::Period | PunctClass::QuestionMark | PunctClass::ExclamationMark => 300.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub base_f0: f64,
    pub f0_jitter: f64,
    /// Mean words per second; sets the centre of the voiced-duration range.
    pub speaking_rate: f64,
    pub seed: u64,
}

impl SpeakerProfile {
    /// Derives every field deterministically from the id.
    pub fn from_id(speaker_id: &str) -> Self {
        let seed = hash_bytes(0x5eed_5eed, speaker_id.as_bytes());
        let mut rng = SplitMix64::new(seed);
        let base_f0 = rng.uniform(F0_RANGE.0, F0_RANGE.1);
        let f0_jitter = rng.uniform(0.02, 0.06);
        let speaking_rate = rng.uniform(3.5, 6.5);
        Self { speaker_id: speaker_id.to_string(), base_f0, f0_jitter, speaking_rate, seed }
    }
}

/// `count` speakers named `{prefix}-00`, `{prefix}-01`, ...
pub fn speaker_pool(prefix: &str, count: usize) -> Vec<SpeakerProfile> {
    (0..count).map(|i| SpeakerProfile::from_id(&format!("{prefix}-{i:02}"))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedUtterance {
    pub audio: AudioBuffer,
    /// Voiced span of each word, `[start, end)` in seconds.
    pub true_boundaries: Vec<[f64; 2]>,
    pub sample_id: String,
    pub speaker_id: String,
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Renders `sample` in the voice of `profile`. Output depends only on the
/// sample id, its words and labels, and the speaker.
pub fn synthesize(sample: &LabeledSample, profile: &SpeakerProfile) -> SynthesizedUtterance {
    let sr = SAMPLE_RATE as f64;
    let mut rng = SplitMix64::new(derive_seed_str(profile.seed, &sample.id));
    let n = sample.words.len();

    let mut voiced = Vec::with_capacity(n);
    let mut jitter = Vec::with_capacity(n);
    for word in &sample.words {
        let u = (hash_bytes(profile.seed, word.as_bytes()) >> 11) as f64 / (1u64 << 53) as f64;
        let ms = (1000.0 / profile.speaking_rate * (0.75 + 0.5 * u)).clamp(VOICED_MS.0, VOICED_MS.1);
        voiced.push((ms * sr / 1000.0).round() as usize);
        jitter.push(1.0 + profile.f0_jitter * (2.0 * rng.next_f64() - 1.0));
    }
    let pauses: Vec<usize> = sample.labels.iter().map(|&l| (pause_ms(l) * sr / 1000.0).round() as usize).collect();

    let mut starts = Vec::with_capacity(n);
    let mut cursor = 0usize;
    for j in 0..n {
        starts.push(cursor);
        cursor += voiced[j] + pauses[j];
    }
    let total = cursor;

    let mut samples = vec![0.0f32; total];
    let amps = [0.5, 0.5 * 10f64.powf(-6.0 / 20.0), 0.5 * 10f64.powf(-12.0 / 20.0)];
    let fade = (FADE_SECONDS * sr) as usize;

    let mut sentence_start = 0;
    for end in 0..n {
        let last_label = sample.labels[end];
        if !(last_label.is_eos() || end + 1 == n) {
            continue;
        }
        let (base, depth) = if last_label == PunctClass::ExclamationMark {
            (profile.base_f0 * (1.0 + EXCLAMATION_LIFT), 2.0 * DECLINATION)
        } else {
            (profile.base_f0, DECLINATION)
        };
        let t0 = starts[sentence_start] as f64;
        let t1 = (starts[end] + voiced[end]) as f64;
        let mut phase = 0.0f64;
        for j in sentence_start..=end {
            let rising = j == end && last_label == PunctClass::QuestionMark;
            let len = voiced[j];
            for i in 0..len {
                let t = (starts[j] + i) as f64;
                let progress = (t - t0) / (t1 - t0).max(1.0);
                let mut f0 = base * (1.0 - depth * progress) * jitter[j];
                if rising {
                    // Rise over the first quarter of the word's second half, then hold.
                    let s = (i as f64 / len as f64 - 0.5) / 0.5;
                    if s > 0.0 {
                        f0 *= 1.0 + QUESTION_RISE * smoothstep(4.0 * s);
                    }
                }
                phase += 2.0 * PI * f0 / sr;
                let env = if i < fade {
                    0.5 - 0.5 * (PI * i as f64 / fade as f64).cos()
                } else if len - i <= fade {
                    0.5 - 0.5 * (PI * (len - i) as f64 / fade as f64).cos()
                } else {
                    1.0
                };
                let v = amps[0] * phase.sin() + amps[1] * (2.0 * phase).sin() + amps[2] * (3.0 * phase).sin();
                samples[starts[j] + i] = (env * v) as f32;
            }
        }
        sentence_start = end + 1;
    }

    let true_boundaries = (0..n)
        .map(|j| [starts[j] as f64 / sr, (starts[j] + voiced[j]) as f64 / sr])
        .collect();
    SynthesizedUtterance {
        audio: AudioBuffer::new(samples, SAMPLE_RATE).expect("synthesized samples stay within [-1, 1]"),
        true_boundaries,
        sample_id: sample.id.clone(),
        speaker_id: profile.speaker_id.clone(),
    }
}

/// Recognizer output: lowercased tokens with approximate times.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AsrResult {
    pub tokens: Vec<String>,
    pub boundaries: Vec<[f64; 2]>,
}

/// Lowercases a word and strips the four punctuation marks.
pub fn asr_token(word: &str) -> String {
    word.chars().filter(|c| PunctClass::from_symbol(*c).is_none()).flat_map(char::to_lowercase).collect()
}

/// Jitters every boundary endpoint by up to ±20 ms, then restores order.
/// With probability `error_rate` one token is split in two or two
/// neighbours are merged, so the token count no longer matches.
pub fn simulate_asr(
    utt: &SynthesizedUtterance,
    words: &[String],
    error_rate: f64,
    seed: u64,
) -> Result<AsrResult, SynthError> {
    if !(0.0..=1.0).contains(&error_rate) {
        return Err(SynthError::Fraction { name: "error_rate", value: error_rate });
    }
    let mut rng = SplitMix64::new(derive_seed_str(
        derive_seed_str(seed, &utt.sample_id),
        &utt.speaker_id,
    ));
    let duration = utt.audio.duration_seconds();
    let mut tokens: Vec<String> = words.iter().map(|w| asr_token(w)).collect();
    let mut boundaries = Vec::with_capacity(words.len());
    let mut prev_end = 0.0f64;
    for &[s, e] in &utt.true_boundaries {
        let js = s + rng.uniform(-ASR_JITTER, ASR_JITTER);
        let je = e + rng.uniform(-ASR_JITTER, ASR_JITTER);
        let start = js.max(prev_end).clamp(0.0, duration);
        let end = je.max(start).min(duration);
        boundaries.push([start, end]);
        prev_end = end;
    }

    if rng.bernoulli(error_rate) && !tokens.is_empty() {
        let splittable: Vec<usize> = (0..tokens.len()).filter(|&k| tokens[k].chars().count() >= 2).collect();
        let can_merge = tokens.len() >= 2;
        let split = !splittable.is_empty() && (!can_merge || rng.bernoulli(0.5));
        if split {
            let k = splittable[rng.below(splittable.len() as u64) as usize];
            let chars: Vec<char> = tokens[k].chars().collect();
            let mid = chars.len() / 2;
            let (left, right): (String, String) = (chars[..mid].iter().collect(), chars[mid..].iter().collect());
            let [s, e] = boundaries[k];
            let m = 0.5 * (s + e);
            tokens.splice(k..=k, [left, right]);
            boundaries.splice(k..=k, [[s, m], [m, e]]);
        } else if can_merge {
            let k = rng.below(tokens.len() as u64 - 1) as usize;
            let merged = format!("{}{}", tokens[k], tokens[k + 1]);
            let span = [boundaries[k][0], boundaries[k + 1][1]];
            tokens.splice(k..=k + 1, [merged]);
            boundaries.splice(k..=k + 1, [span]);
        }
    }
    Ok(AsrResult { tokens, boundaries })
}

pub trait WordCount {
    fn word_count(&self) -> usize;
}

impl WordCount for LabeledSample {
    fn word_count(&self) -> usize {
        self.words.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct FilterStats {
    pub total: usize,
    pub kept: usize,
    pub dropped: usize,
}

impl FilterStats {
    pub fn dropped_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.dropped as f64 / self.total as f64
        }
    }
}

/// Drops items whose recognized token count differs from the word count.
pub fn filter_mismatches<T: WordCount>(items: Vec<(T, AsrResult)>) -> (Vec<(T, AsrResult)>, FilterStats) {
    let total = items.len();
    let kept: Vec<_> = items.into_iter().filter(|(s, asr)| asr.tokens.len() == s.word_count()).collect();
    let stats = FilterStats { total, kept: kept.len(), dropped: total - kept.len() };
    log::info!("mismatch filter kept {}/{} samples", stats.kept, stats.total);
    (kept, stats)
}

/// Independent Bernoulli draw of the audio source for every sample.
pub fn mix_sources(samples: &[LabeledSample], human_fraction: f64, seed: u64) -> Result<Vec<Source>, SynthError> {
    if !(0.0..=1.0).contains(&human_fraction) {
        return Err(SynthError::Fraction { name: "human_fraction", value: human_fraction });
    }
    let mut rng = SplitMix64::new(seed);
    Ok(samples
        .iter()
        .map(|_| if rng.bernoulli(human_fraction) { Source::Human } else { Source::Tts })
        .collect())
}

/// Pairs each sample with `n` distinct speakers drawn without replacement.
pub fn augment_speakers(
    samples: &[LabeledSample],
    n: usize,
    pool: &[SpeakerProfile],
    seed: u64,
) -> Result<Vec<(LabeledSample, SpeakerProfile)>, SynthError> {
    if n == 0 || n > pool.len() {
        return Err(SynthError::PoolTooSmall { requested: n, pool: pool.len() });
    }
    let mut out = Vec::with_capacity(samples.len() * n);
    for s in samples {
        let mut rng = SplitMix64::new(derive_seed_str(seed, &s.id));
        for k in rng.sample_indices(pool.len(), n) {
            out.push((s.clone(), pool[k].clone()));
        }
    }
    Ok(out)
}

/// Speaker-disjoint random split; the train side gets `ceil(fraction * n)`.
pub fn split_speakers(
    pool: &[SpeakerProfile],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<SpeakerProfile>, Vec<SpeakerProfile>), SynthError> {
    if pool.is_empty() {
        return Err(SynthError::EmptyPool);
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(SynthError::Fraction { name: "train_fraction", value: train_fraction });
    }
    let mut shuffled = pool.to_vec();
    SplitMix64::new(seed).shuffle(&mut shuffled);
    let n_train = ((train_fraction * pool.len() as f64 - 1e-9).ceil() as usize).clamp(1, pool.len());
    let val = shuffled.split_off(n_train);
    if val.is_empty() {
        log::warn!("speaker split left no validation speakers ({} total)", pool.len());
    }
    Ok((shuffled, val))
}
