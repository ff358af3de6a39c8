//! Per-token model inputs: a ternary hash embedding of the token bytes,
//! optionally followed by acoustic features pooled over the frames that
//! fall inside the token's time span.

use std::io::{Read, Write};
use std::ops::Range;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledSample;
use crate::dsp::{MelFrames, PitchTrack, MEL_BANDS};
use crate::rng::{derive_seed, hash_bytes, mix64};
use crate::synth::AsrResult;

pub const EMBED_DIM: usize = 1024;
pub const PITCH_STATS: usize = 5;
const HASH_BLOCKS: usize = 32;
const EMBED_SEED: u64 = 0x7072_6164_6f5f_6c73;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cannot embed an empty token")]
    EmptyToken,
    #[error("{tokens} tokens but {boundaries} boundaries")]
    BoundaryCount { tokens: usize, boundaries: usize },
    #[error("boundary {index} is not monotone")]
    NonMonotone { index: usize },
    #[error("sample has {words} words but the recognizer produced {tokens} tokens")]
    CountMismatch { words: usize, tokens: usize },
    #[error("feature dump: {0}")]
    Dump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcousticMode {
    None,
    Pitch,
    Logmel,
}

impl AcousticMode {
    pub fn acoustic_dim(self) -> usize {
        match self {
            AcousticMode::None => 0,
            AcousticMode::Pitch => PITCH_STATS,
            AcousticMode::Logmel => MEL_BANDS,
        }
    }

    pub fn feature_dim(self) -> usize {
        EMBED_DIM + self.acoustic_dim()
    }

    pub fn from_feature_dim(dim: usize) -> Option<Self> {
        [AcousticMode::None, AcousticMode::Pitch, AcousticMode::Logmel]
            .into_iter()
            .find(|m| m.feature_dim() == dim)
    }
}

impl std::str::FromStr for AcousticMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "text" => Ok(AcousticMode::None),
            "pitch" => Ok(AcousticMode::Pitch),
            "logmel" => Ok(AcousticMode::Logmel),
            other => Err(format!("unknown acoustic mode {other:?} (none|pitch|logmel)")),
        }
    }
}

/// Assigns frames to tokens. Each token's span is stretched to the start of
/// the next token (the last one to the end of the track, the first one back
/// to zero), and a frame belongs to the span containing its centre. The
/// returned ranges partition `0..n_frames`.
pub fn align_frame_grid(
    n_frames: usize,
    frame_center: impl Fn(usize) -> f64,
    boundaries: &[[f64; 2]],
) -> Result<Vec<Range<usize>>, FeatureError> {
    let mut prev_end = f64::NEG_INFINITY;
    for (index, &[s, e]) in boundaries.iter().enumerate() {
        if !(s.is_finite() && e.is_finite()) || s < prev_end || e < s {
            return Err(FeatureError::NonMonotone { index });
        }
        prev_end = e;
    }
    // First frame whose centre is at or after `t`.
    let first_at = |t: f64| -> usize {
        let mut lo = 0;
        let mut hi = n_frames;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if frame_center(mid) < t {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let n = boundaries.len();
    let cuts: Vec<usize> = (0..=n)
        .map(|j| match j {
            0 => 0,
            j if j == n => n_frames,
            j => first_at(boundaries[j][0]),
        })
        .collect();
    Ok(cuts.windows(2).map(|w| w[0]..w[1]).collect())
}

pub fn align_frames(
    track: &PitchTrack,
    boundaries: &[[f64; 2]],
    n_tokens: usize,
) -> Result<Vec<Range<usize>>, FeatureError> {
    if boundaries.len() != n_tokens {
        return Err(FeatureError::BoundaryCount { tokens: n_tokens, boundaries: boundaries.len() });
    }
    align_frame_grid(track.len(), |i| track.frame_center(i), boundaries)
}

/// Pitch statistics of one token, in Hz.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TokenAcoustics {
    pub mean: f64,
    pub stddev: f64,
    pub max: f64,
    pub min: f64,
    pub range: f64,
}

impl TokenAcoustics {
    pub fn to_array(self) -> [f32; PITCH_STATS] {
        [self.mean as f32, self.stddev as f32, self.max as f32, self.min as f32, self.range as f32]
    }
}

/// Mean, population standard deviation, max, min and range over all
/// frames, unvoiced zeros included.
pub fn token_stats(frames: &[f32]) -> TokenAcoustics {
    if frames.is_empty() {
        return TokenAcoustics::default();
    }
    let n = frames.len() as f64;
    let mean = frames.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = frames.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let max = frames.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let min = frames.iter().fold(f64::INFINITY, |m, &v| m.min(v as f64));
    TokenAcoustics { mean: mean.clamp(min, max), stddev: var.sqrt(), max, min, range: max - min }
}

/// 1024 ternary values derived from the token bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashEmbedding(pub Vec<i8>);

impl HashEmbedding {
    pub fn values(&self) -> &[i8] {
        &self.0
    }

    /// Number of positions where two embeddings differ.
    pub fn distance(&self, other: &HashEmbedding) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

/// Locality-sensitive ternary embedding.
///
/// The token is wrapped in start/end markers and cut into byte trigrams
/// (repeated trigrams are keyed by occurrence). For each of 32 seeds the
/// trigram with the smallest seeded hash is selected (MinHash) and rehashed
/// to a 64-bit block, so tokens sharing most trigrams share most blocks.
/// Each block's 32 bit pairs map `00 -> 0, 01 -> +1, 10 -> -1, 11 -> 0`.
pub fn hash_embed(token: &[u8]) -> Result<HashEmbedding, FeatureError> {
    if token.is_empty() {
        return Err(FeatureError::EmptyToken);
    }
    let mut padded = Vec::with_capacity(token.len() + 2);
    padded.push(0x02);
    padded.extend_from_slice(token);
    padded.push(0x03);
    let grams: Vec<&[u8]> = padded.windows(3).collect();
    let keys: Vec<u64> = grams
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let occurrence = grams[..i].iter().filter(|h| *h == g).count() as u64;
            hash_bytes(occurrence, g)
        })
        .collect();

    let mut values = vec![0i8; EMBED_DIM];
    for (k, chunk) in values.chunks_exact_mut(EMBED_DIM / HASH_BLOCKS).enumerate() {
        let seed = derive_seed(EMBED_SEED, k as u64);
        let winner = keys.iter().copied().min_by_key(|&key| mix64(key ^ seed)).expect("at least one trigram");
        let block = mix64(winner ^ seed.rotate_left(17) ^ 0xA5A5_A5A5_A5A5_A5A5);
        for (p, v) in chunk.iter_mut().enumerate() {
            *v = match (block >> (2 * p)) & 3 {
                0b01 => 1,
                0b10 => -1,
                _ => 0,
            };
        }
    }
    Ok(HashEmbedding(values))
}

/// Acoustic evidence available for a sample.
#[derive(Debug, Clone, Copy)]
pub enum Acoustics<'a> {
    None,
    Pitch(&'a PitchTrack),
    LogMel(&'a MelFrames),
}

impl Acoustics<'_> {
    pub fn mode(&self) -> AcousticMode {
        match self {
            Acoustics::None => AcousticMode::None,
            Acoustics::Pitch(_) => AcousticMode::Pitch,
            Acoustics::LogMel(_) => AcousticMode::Logmel,
        }
    }
}

/// Per-token input rows, ordered by token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Array2<f32>,
}

impl FeatureMatrix {
    pub fn n_tokens(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// Feature rows for recognizer tokens and their time spans.
pub fn token_features(
    tokens: &[String],
    boundaries: &[[f64; 2]],
    acoustics: Acoustics<'_>,
) -> Result<FeatureMatrix, FeatureError> {
    let mode = acoustics.mode();
    let mut rows = Array2::zeros((tokens.len(), mode.feature_dim()));
    for (i, tok) in tokens.iter().enumerate() {
        let e = hash_embed(tok.as_bytes())?;
        for (dst, &v) in rows.slice_mut(s![i, ..EMBED_DIM]).iter_mut().zip(e.values()) {
            *dst = v as f32;
        }
    }
    match acoustics {
        Acoustics::None => {}
        Acoustics::Pitch(track) => {
            let ranges = align_frames(track, boundaries, tokens.len())?;
            for (i, r) in ranges.into_iter().enumerate() {
                let stats = token_stats(&track.values[r]).to_array();
                rows.slice_mut(s![i, EMBED_DIM..]).iter_mut().zip(stats).for_each(|(d, v)| *d = v);
            }
        }
        Acoustics::LogMel(mel) => {
            if boundaries.len() != tokens.len() {
                return Err(FeatureError::BoundaryCount { tokens: tokens.len(), boundaries: boundaries.len() });
            }
            let ranges = align_frame_grid(mel.len(), |i| mel.frame_center(i), boundaries)?;
            for (i, r) in ranges.into_iter().enumerate() {
                if r.is_empty() {
                    continue;
                }
                let n = r.len() as f32;
                let mean = mel.frames.slice(s![r, ..]).sum_axis(ndarray::Axis(0)) / n;
                rows.slice_mut(s![i, EMBED_DIM..]).assign(&mean);
            }
        }
    }
    Ok(FeatureMatrix { rows })
}

/// Checks that recognizer and transcript agree on the token count, then
/// builds features from the recognizer tokens and times.
pub fn assemble_features(
    sample: &LabeledSample,
    asr: &AsrResult,
    acoustics: Acoustics<'_>,
) -> Result<FeatureMatrix, FeatureError> {
    if asr.tokens.len() != sample.words.len() {
        return Err(FeatureError::CountMismatch { words: sample.words.len(), tokens: asr.tokens.len() });
    }
    token_features(&asr.tokens, &asr.boundaries, acoustics)
}

/// Text-only rows from lowercased transcript words.
pub fn text_features(words: &[String]) -> Result<FeatureMatrix, FeatureError> {
    let lowered: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
    token_features(&lowered, &[], Acoustics::None)
}

pub const DUMP_MAGIC: &[u8; 5] = b"FEAT1";

/// Writes one block: `FEAT1`, u32 rows, u32 cols, row-major f32 data, all
/// little-endian.
pub fn write_feature_block(w: &mut impl Write, m: &FeatureMatrix) -> Result<(), FeatureError> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&(m.n_tokens() as u32).to_le_bytes())?;
    w.write_all(&(m.dim() as u32).to_le_bytes())?;
    for v in m.rows.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads every block until end of input.
pub fn read_feature_blocks(r: &mut impl Read) -> Result<Vec<FeatureMatrix>, FeatureError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let header = bytes.get(pos..pos + 13).ok_or_else(|| FeatureError::Dump(format!("short header at {pos}")))?;
        if &header[..5] != DUMP_MAGIC {
            return Err(FeatureError::Dump(format!("bad magic at {pos}")));
        }
        let rows = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
        pos += 13;
        let len = rows * cols * 4;
        let data = bytes.get(pos..pos + len).ok_or_else(|| FeatureError::Dump(format!("truncated block at {pos}")))?;
        let values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(FeatureMatrix { rows: Array2::from_shape_vec((rows, cols), values).expect("shape matches") });
        pos += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn track(n: usize) -> PitchTrack {
        PitchTrack { values: vec![100.0; n], hop_seconds: 0.005 }
    }

    #[test]
    fn alignment_centre_arithmetic() {
        let r = align_frames(&track(200), &[[0.0, 0.5], [0.7, 1.0]], 2).unwrap();
        assert_eq!(r, vec![0..140, 140..200]);
        // Oracle: frame i goes to the last token whose start <= centre.
        let starts = [0.0, 0.7];
        for i in 0..200 {
            let c = (i as f64 + 0.5) * 0.005;
            let tok = starts.iter().rposition(|&s| s <= c).unwrap_or(0);
            assert!(r[tok].contains(&i));
        }
    }

    #[test]
    fn alignment_degenerate_cases() {
        assert_eq!(align_frames(&track(50), &[[0.1, 0.2]], 1).unwrap(), vec![0..50]);
        let r = align_frames(&track(100), &[[0.0, 0.1], [0.2, 0.2], [0.2, 0.4]], 3).unwrap();
        assert!(r[1].is_empty());
        assert_eq!(token_stats(&track(100).values[r[1].clone()]), TokenAcoustics::default());
        assert!(matches!(
            align_frames(&track(10), &[[0.5, 0.6], [0.1, 0.2]], 2),
            Err(FeatureError::NonMonotone { index: 1 })
        ));
        assert!(matches!(align_frames(&track(10), &[[0.0, 0.1]], 2), Err(FeatureError::BoundaryCount { .. })));
    }

    #[test]
    fn stats_examples() {
        let s = token_stats(&[100.0, 110.0, 120.0]);
        assert!((s.mean - 110.0).abs() < 1e-9);
        assert!((s.stddev - 8.16496580927726).abs() < 1e-4);
        assert_eq!((s.max, s.min, s.range), (120.0, 100.0, 20.0));

        assert_eq!(token_stats(&[]), TokenAcoustics::default());

        let s = token_stats(&[0.0, 0.0, 200.0, 200.0]);
        assert_eq!((s.mean, s.min, s.max, s.range, s.stddev), (100.0, 0.0, 200.0, 200.0, 100.0));
    }

    proptest! {
        #[test]
        fn stats_invariants(frames in prop::collection::vec(prop_oneof![Just(0.0f32), 60.0f32..500.0], 0..200)) {
            let s = token_stats(&frames);
            prop_assert!(s.min <= s.mean && s.mean <= s.max || frames.is_empty());
            prop_assert!(s.range >= 0.0 && (s.range - (s.max - s.min)).abs() < 1e-9);
            prop_assert!(s.stddev >= 0.0);
        }

        #[test]
        fn alignment_partitions(mut starts in prop::collection::vec(0.0f64..3.0, 1..20), n in 0usize..700) {
            starts.sort_by(f64::total_cmp);
            let b: Vec<[f64; 2]> = starts.iter().enumerate()
                .map(|(i, &s)| [s, starts.get(i + 1).copied().unwrap_or(3.0).min(s + 0.1)])
                .collect();
            let r = align_frames(&track(n), &b, b.len()).unwrap();
            prop_assert_eq!(r.len(), b.len());
            prop_assert_eq!(r[0].start, 0);
            prop_assert_eq!(r.last().unwrap().end, n);
            for w in r.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
            }
        }
    }

    fn random_token(rng: &mut SplitMix64) -> Vec<u8> {
        let len = 3 + rng.below(10) as usize;
        (0..len).map(|_| b'a' + rng.below(26) as u8).collect()
    }

    #[test]
    fn embedding_is_deterministic_ternary() {
        let a = hash_embed(b"hello").unwrap();
        assert_eq!(a, hash_embed(b"hello").unwrap());
        assert_eq!(a.values().len(), EMBED_DIM);
        assert!(a.values().iter().all(|v| [-1, 0, 1].contains(v)));
        assert!(matches!(hash_embed(b""), Err(FeatureError::EmptyToken)));
    }

    #[test]
    fn embedding_nonzero_fraction() {
        let mut rng = SplitMix64::new(1);
        let mut nonzero = 0usize;
        for _ in 0..10_000 {
            let e = hash_embed(&random_token(&mut rng)).unwrap();
            nonzero += e.values().iter().filter(|&&v| v != 0).count();
        }
        let frac = nonzero as f64 / (10_000 * EMBED_DIM) as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn embedding_distinct_tokens_never_collide() {
        let mut rng = SplitMix64::new(2);
        let mut tokens = std::collections::HashSet::new();
        while tokens.len() < 10_000 {
            tokens.insert(random_token(&mut rng));
        }
        let mut vecs: Vec<Vec<i8>> = tokens.iter().map(|t| hash_embed(t).unwrap().0).collect();
        // Sorting places identical vectors next to each other, which covers every pair.
        vecs.sort();
        assert!(vecs.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn embedding_is_locality_sensitive() {
        let mut rng = SplitMix64::new(3);
        let (mut near, mut far) = (0usize, 0usize);
        for _ in 0..1000 {
            let a = random_token(&mut rng);
            let mut b = a.clone();
            let pos = rng.below(b.len() as u64) as usize;
            b[pos] = b'a' + ((b[pos] - b'a' + 1 + rng.below(25) as u8) % 26);
            let c = random_token(&mut rng);
            let ea = hash_embed(&a).unwrap();
            near += ea.distance(&hash_embed(&b).unwrap());
            far += ea.distance(&hash_embed(&c).unwrap());
        }
        assert!(near < far, "near {near} far {far}");
    }

    #[test]
    fn feature_dims_per_mode() {
        let words: Vec<String> = ["you", "are", "ready"].iter().map(|s| s.to_string()).collect();
        let b = vec![[0.0, 0.2], [0.25, 0.45], [0.5, 0.7]];
        let t = PitchTrack { values: vec![150.0; 200], hop_seconds: 0.005 };
        let mel = crate::dsp::log_mel(&crate::dsp::AudioBuffer::silence(16_000));
        assert_eq!(token_features(&words, &b, Acoustics::None).unwrap().dim(), 1024);
        assert_eq!(token_features(&words, &b, Acoustics::Pitch(&t)).unwrap().dim(), 1029);
        assert_eq!(token_features(&words, &b, Acoustics::LogMel(&mel)).unwrap().dim(), 1152);
    }

    #[test]
    fn rows_follow_token_order() {
        let words: Vec<String> = ["a", "bb", "ccc"].iter().map(|s| s.to_string()).collect();
        let values: Vec<f32> = (0..300).map(|i| (i / 100) as f32 * 50.0 + 100.0).collect();
        let t = PitchTrack { values, hop_seconds: 0.005 };
        let b = vec![[0.0, 0.4], [0.5, 0.9], [1.0, 1.4]];
        let m = token_features(&words, &b, Acoustics::Pitch(&t)).unwrap();
        // Reverse tokens and mirror the track so each token keeps its frames.
        let rev_words: Vec<String> = words.iter().rev().cloned().collect();
        let rev_t = PitchTrack { values: t.values.iter().rev().copied().collect(), hop_seconds: 0.005 };
        let rev_b = vec![[0.0, 0.4], [0.5, 0.9], [1.0, 1.4]];
        let r = token_features(&rev_words, &rev_b, Acoustics::Pitch(&rev_t)).unwrap();
        for i in 0..3 {
            assert_eq!(m.rows.row(i), r.rows.row(2 - i));
        }
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let sample = LabeledSample::new(
            "x",
            vec!["a".into(), "b".into(), "c".into()],
            vec![crate::corpus::PunctClass::None, crate::corpus::PunctClass::None, crate::corpus::PunctClass::Period],
        );
        let asr = AsrResult { tokens: vec!["a".into(), "bc".into()], boundaries: vec![[0.0, 0.1], [0.1, 0.2]] };
        assert!(matches!(
            assemble_features(&sample, &asr, Acoustics::None),
            Err(FeatureError::CountMismatch { words: 3, tokens: 2 })
        ));
    }

    #[test]
    fn dump_round_trip() {
        let a = text_features(&["Hello".into(), "world".into()]).unwrap();
        let b = FeatureMatrix { rows: Array2::from_shape_fn((3, 5), |(i, j)| i as f32 - j as f32 * 0.5) };
        let mut buf = Vec::new();
        write_feature_block(&mut buf, &a).unwrap();
        write_feature_block(&mut buf, &b).unwrap();
        assert_eq!(read_feature_blocks(&mut buf.as_slice()).unwrap(), vec![a, b]);
        buf.pop();
        assert!(read_feature_blocks(&mut buf.as_slice()).is_err());
    }
}
