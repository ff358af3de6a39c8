//! Glue from corpus entries and audio files to model inputs.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::CorpusEntry;
use crate::dsp::{load_wav, log_mel, yin_pitch, AudioBuffer, DspError, SAMPLE_RATE};
use crate::features::{token_features, AcousticMode, Acoustics, FeatureError, FeatureMatrix};
use crate::synth::asr_token;
use crate::train::Example;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("entry {id}: {mode:?} features need audio and boundaries")]
    MissingAudio { id: String, mode: AcousticMode },
    #[error("entry {id}: {source}")]
    Feature { id: String, source: FeatureError },
    #[error("{path}: {source}")]
    Audio { path: PathBuf, source: DspError },
}

/// Recognizer-style tokens for a transcript: lowercased, marks stripped,
/// empty results dropped.
pub fn transcript_tokens(words: &[String]) -> Vec<String> {
    words.iter().map(|w| asr_token(w)).filter(|t| !t.is_empty()).collect()
}

/// Features for `tokens` with the acoustic part computed from `audio`.
pub fn features_from_audio(
    tokens: &[String],
    boundaries: &[[f64; 2]],
    audio: Option<&AudioBuffer>,
    mode: AcousticMode,
) -> Result<FeatureMatrix, FeatureError> {
    match (mode, audio) {
        (AcousticMode::None, _) => token_features(tokens, boundaries, Acoustics::None),
        (AcousticMode::Pitch, Some(a)) => token_features(tokens, boundaries, Acoustics::Pitch(&yin_pitch(a))),
        (AcousticMode::Logmel, Some(a)) => token_features(tokens, boundaries, Acoustics::LogMel(&log_mel(a))),
        (_, None) => Err(FeatureError::BoundaryCount { tokens: tokens.len(), boundaries: 0 }),
    }
}

/// Builds a training or evaluation example. Audio paths are resolved
/// against `base_dir`.
pub fn entry_example(entry: &CorpusEntry, base_dir: &Path, mode: AcousticMode) -> Result<Example, PipelineError> {
    let id = entry.sample.id.clone();
    let tokens: Vec<String> = entry.sample.words.iter().map(|w| w.to_lowercase()).collect();
    let features = if mode == AcousticMode::None {
        token_features(&tokens, &[], Acoustics::None).map_err(|source| PipelineError::Feature { id: id.clone(), source })?
    } else {
        let (Some(audio), Some(bounds)) = (&entry.audio, &entry.boundaries) else {
            return Err(PipelineError::MissingAudio { id, mode });
        };
        let path = base_dir.join(audio);
        let buffer = load_wav(&path).map_err(|source| PipelineError::Audio { path, source })?;
        features_from_audio(&tokens, bounds, Some(&buffer), mode).map_err(|source| PipelineError::Feature { id: id.clone(), source })?
    };
    let id = match &entry.speaker {
        Some(s) => format!("{id}__{s}"),
        None => id,
    };
    Ok(Example { id, features: features.rows, labels: entry.sample.labels.clone() })
}

const ENERGY_FRAME: usize = 80;

/// Splits audio into exactly `n` token spans using short-time energy:
/// active regions are found with a threshold relative to the loudest
/// frame, then the closest neighbours are merged or the longest spans
/// halved until the count matches. Silent input is divided evenly.
pub fn energy_boundaries(audio: &AudioBuffer, n: usize) -> Vec<[f64; 2]> {
    if n == 0 {
        return Vec::new();
    }
    let hop = ENERGY_FRAME as f64 / SAMPLE_RATE as f64;
    let energies: Vec<f32> = audio
        .samples()
        .chunks(ENERGY_FRAME)
        .map(|c| c.iter().map(|v| v * v).sum::<f32>() / c.len() as f32)
        .collect();
    let peak = energies.iter().cloned().fold(0.0f32, f32::max);
    let mut runs: Vec<(usize, usize)> = Vec::new();
    if peak > 0.0 {
        let threshold = peak * 0.01;
        let mut start = None;
        for (i, &e) in energies.iter().enumerate() {
            match (e > threshold, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s, energies.len()));
        }
    }
    if runs.is_empty() {
        let dur = audio.duration_seconds();
        return (0..n).map(|i| [dur * i as f64 / n as f64, dur * (i + 1) as f64 / n as f64]).collect();
    }
    while runs.len() > n {
        let k = (0..runs.len() - 1).min_by_key(|&k| runs[k + 1].0 - runs[k].1).unwrap();
        runs[k].1 = runs[k + 1].1;
        runs.remove(k + 1);
    }
    while runs.len() < n {
        let k = (0..runs.len()).max_by_key(|&k| (runs[k].1 - runs[k].0, usize::MAX - k)).unwrap();
        let (s, e) = runs[k];
        let mid = s + (e - s).div_ceil(2);
        runs[k] = (s, mid);
        runs.insert(k + 1, (mid, e));
    }
    runs.into_iter().map(|(s, e)| [s as f64 * hop, e as f64 * hop]).collect()
}
