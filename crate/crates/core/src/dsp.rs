//! Audio I/O and acoustic analysis: YIN pitch tracking at a 5 ms hop and
//! 128-band log-mel energies.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;
/// Samples per pitch frame (5 ms).
pub const PITCH_HOP: usize = 80;
pub const MEL_BANDS: usize = 128;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed WAV file: {0}")]
    Malformed(String),
    #[error("sample rate must be {SAMPLE_RATE} Hz, got {0}")]
    SampleRate(u32),
    #[error("sample {index} is {value}, outside [-1, 1]")]
    SampleRange { index: usize, value: f32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono 16 kHz audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, DspError> {
        if sample_rate != SAMPLE_RATE {
            return Err(DspError::SampleRate(sample_rate));
        }
        if let Some((index, &value)) = samples.iter().enumerate().find(|(_, s)| !s.is_finite() || s.abs() > 1.0) {
            return Err(DspError::SampleRange { index, value });
        }
        Ok(Self { samples })
    }

    pub fn silence(len: usize) -> Self {
        Self { samples: vec![0.0; len] }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses a RIFF/WAVE byte stream holding 16-bit PCM mono at 16 kHz.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer, DspError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(DspError::Malformed("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut format = None;
    let mut data = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| DspError::Malformed(format!("chunk at offset {pos} overruns file")))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(DspError::Malformed("short fmt chunk".into()));
                }
                format = Some((
                    le_u16(bytes, body),
                    le_u16(bytes, body + 2),
                    le_u32(bytes, body + 4),
                    le_u16(bytes, body + 14),
                ));
            }
            b"data" => data = Some(&bytes[body..end]),
            _ => {}
        }
        // Chunks are padded to even length.
        pos = end + (size & 1);
    }
    let (tag, channels, rate, bits) = format.ok_or_else(|| DspError::Malformed("no fmt chunk".into()))?;
    if tag != 1 || bits != 16 || channels != 1 || rate != SAMPLE_RATE {
        return Err(DspError::UnsupportedFormat(format!(
            "format tag {tag}, {channels} channel(s), {rate} Hz, {bits} bits; need PCM 16-bit mono {SAMPLE_RATE} Hz"
        )));
    }
    let data = data.ok_or_else(|| DspError::Malformed("no data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(DspError::Malformed("odd data length".into()));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Ok(AudioBuffer { samples })
}

/// Canonical 44-byte-header PCM encoding.
pub fn encode_wav(buffer: &AudioBuffer) -> Vec<u8> {
    let data_len = (buffer.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &buffer.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn load_wav(path: &Path) -> Result<AudioBuffer, DspError> {
    decode_wav(&fs::read(path)?)
}

pub fn save_wav(buffer: &AudioBuffer, path: &Path) -> Result<(), DspError> {
    fs::write(path, encode_wav(buffer))?;
    Ok(())
}

/// Pitch estimates every 5 ms; `0.0` marks unvoiced frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub values: Vec<f32>,
    pub hop_seconds: f64,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Center time of frame `i` in seconds.
    pub fn frame_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.hop_seconds
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YinConfig {
    pub window: usize,
    pub hop: usize,
    pub threshold: f32,
    pub f0_min: f32,
    pub f0_max: f32,
}

impl Default for YinConfig {
    fn default() -> Self {
        Self { window: 400, hop: PITCH_HOP, threshold: 0.1, f0_min: 60.0, f0_max: 500.0 }
    }
}

#[inline]
fn squared_difference(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += (x - y) * (x - y);
    }
    acc.iter().sum::<f32>() + tail
}

pub fn yin_pitch(audio: &AudioBuffer) -> PitchTrack {
    yin_pitch_with(audio, &YinConfig::default())
}

/// YIN: squared-difference function, cumulative mean normalization, first
/// dip under the absolute threshold, parabolic refinement. Frame `i` is
/// analysed around sample `i * hop + hop / 2`; windows that would run past
/// either end of the buffer are shifted inside it.
pub fn yin_pitch_with(audio: &AudioBuffer, cfg: &YinConfig) -> PitchTrack {
    let hop_seconds = cfg.hop as f64 / SAMPLE_RATE as f64;
    let x = audio.samples();
    let n = x.len();
    if n < cfg.window {
        return PitchTrack { values: Vec::new(), hop_seconds };
    }
    let sr = SAMPLE_RATE as f32;
    let tau_min = ((sr / cfg.f0_max).floor() as usize).max(2);
    // One extra lag so the refinement has a right neighbour.
    let tau_limit = ((sr / cfg.f0_min).ceil() as usize + 1).min(n - cfg.window);
    let n_frames = n / cfg.hop;
    let mut values = vec![0.0f32; n_frames];
    if tau_limit < tau_min + 1 {
        return PitchTrack { values, hop_seconds };
    }
    let span = cfg.window + tau_limit;
    let mut cmnd = vec![1.0f32; tau_limit + 1];
    for (i, value) in values.iter_mut().enumerate() {
        let center = i * cfg.hop + cfg.hop / 2;
        let start = center.saturating_sub(cfg.window / 2).min(n - span);
        let frame = &x[start..start + span];
        let head = &frame[..cfg.window];
        let mut running = 0.0f32;
        for tau in 1..=tau_limit {
            let d = squared_difference(head, &frame[tau..tau + cfg.window]);
            running += d;
            cmnd[tau] = if running > 0.0 { d * tau as f32 / running } else { 1.0 };
        }
        *value = pick_period(&cmnd, tau_min, tau_limit, cfg)
            .map(|period| (sr / period).clamp(cfg.f0_min, cfg.f0_max))
            .unwrap_or(0.0);
    }
    PitchTrack { values, hop_seconds }
}

fn pick_period(cmnd: &[f32], tau_min: usize, tau_limit: usize, cfg: &YinConfig) -> Option<f32> {
    let mut tau = (tau_min..tau_limit).find(|&t| cmnd[t] < cfg.threshold)?;
    while tau + 1 < tau_limit && cmnd[tau + 1] < cmnd[tau] {
        tau += 1;
    }
    let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > f32::EPSILON { (0.5 * (a - c) / denom).clamp(-1.0, 1.0) } else { 0.0 };
    Some(tau as f32 + shift)
}

/// Log-mel energies, one 128-band row per 10 ms frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFrames {
    pub frames: Array2<f32>,
    pub hop_seconds: f64,
    pub window_seconds: f64,
}

impl MelFrames {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn frame_center(&self, i: usize) -> f64 {
        i as f64 * self.hop_seconds + self.window_seconds / 2.0
    }
}

pub const MEL_WINDOW: usize = 400;
pub const MEL_HOP: usize = 160;
pub const MEL_FFT: usize = 512;
pub const MEL_FMIN: f64 = 125.0;
pub const MEL_FMAX: f64 = 7500.0;
pub const LOG_FLOOR: f32 = 1e-6;

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(f: f64) -> f64 {
    let log_step = 6.4f64.ln() / 27.0;
    if f < 1000.0 {
        f * 3.0 / 200.0
    } else {
        15.0 + (f / 1000.0).ln() / log_step
    }
}

pub fn mel_to_hz(m: f64) -> f64 {
    let log_step = 6.4f64.ln() / 27.0;
    if m < 15.0 {
        m * 200.0 / 3.0
    } else {
        1000.0 * ((m - 15.0) * log_step).exp()
    }
}

/// The `bands + 2` edge frequencies of the triangular filters.
pub fn mel_edges(bands: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..bands + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (bands + 1) as f64))
        .collect()
}

/// Triangular filterbank over the `fft_size / 2 + 1` spectrum bins.
pub fn mel_filterbank(bands: usize, fft_size: usize, fmin: f64, fmax: f64) -> Array2<f32> {
    let edges = mel_edges(bands, fmin, fmax);
    let bins = fft_size / 2 + 1;
    let mut fb = Array2::zeros((bands, bins));
    for m in 0..bands {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * SAMPLE_RATE as f64 / fft_size as f64;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[[m, k]] = w as f32;
        }
    }
    fb
}

pub struct LogMel {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    filterbank: Array2<f32>,
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMel {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(MEL_FFT);
        let window = (0..MEL_WINDOW)
            .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / MEL_WINDOW as f64).cos()) as f32)
            .collect();
        let filterbank = mel_filterbank(MEL_BANDS, MEL_FFT, MEL_FMIN, MEL_FMAX);
        Self { fft, window, filterbank }
    }

    pub fn filterbank(&self) -> &Array2<f32> {
        &self.filterbank
    }

    pub fn compute(&self, audio: &AudioBuffer) -> MelFrames {
        let x = audio.samples();
        let n_frames = if x.len() < MEL_WINDOW { 0 } else { 1 + (x.len() - MEL_WINDOW) / MEL_HOP };
        let mut frames = Array2::zeros((n_frames, MEL_BANDS));
        let mut buf = vec![Complex::new(0.0f32, 0.0); MEL_FFT];
        let mut power = vec![0.0f32; MEL_FFT / 2 + 1];
        for i in 0..n_frames {
            let seg = &x[i * MEL_HOP..i * MEL_HOP + MEL_WINDOW];
            for (k, slot) in buf.iter_mut().enumerate() {
                let v = if k < MEL_WINDOW { seg[k] * self.window[k] } else { 0.0 };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, out) in frames.row_mut(i).iter_mut().enumerate() {
                let energy: f32 = self.filterbank.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
                *out = (energy + LOG_FLOOR).ln();
            }
        }
        MelFrames {
            frames,
            hop_seconds: MEL_HOP as f64 / SAMPLE_RATE as f64,
            window_seconds: MEL_WINDOW as f64 / SAMPLE_RATE as f64,
        }
    }
}

pub fn log_mel(audio: &AudioBuffer) -> MelFrames {
    LogMel::new().compute(audio)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, seconds: f64, amp: f64) -> AudioBuffer {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        let s = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect();
        AudioBuffer::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn rejects_wrong_rate_and_range() {
        assert!(matches!(AudioBuffer::new(vec![0.0], 44_100), Err(DspError::SampleRate(44_100))));
        assert!(matches!(AudioBuffer::new(vec![0.0, 1.5], SAMPLE_RATE), Err(DspError::SampleRange { index: 1, .. })));
        assert!(AudioBuffer::new(vec![f32::NAN], SAMPLE_RATE).is_err());
    }

    #[test]
    fn silence_wav_round_trip() {
        let bytes = encode_wav(&AudioBuffer::silence(16_000));
        let audio = decode_wav(&bytes).unwrap();
        assert_eq!(audio.len(), 16_000);
        assert!(audio.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rejects_stereo_44k() {
        let mut bytes = encode_wav(&AudioBuffer::silence(100));
        bytes[22..24].copy_from_slice(&2u16.to_le_bytes());
        bytes[24..28].copy_from_slice(&44_100u32.to_le_bytes());
        assert!(matches!(decode_wav(&bytes), Err(DspError::UnsupportedFormat(_))));
    }

    #[test]
    fn canonical_wav_bytes_round_trip() {
        // Canonical file built independently of the encoder: every 16-bit value.
        let mut bytes = Vec::new();
        let values: Vec<i16> = (i16::MIN..=i16::MAX).step_by(7).collect();
        let data_len = (values.len() * 2) as u32;
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
        bytes.extend_from_slice(b"WAVEfmt ");
        bytes.extend_from_slice(&[16, 0, 0, 0, 1, 0, 1, 0]);
        bytes.extend_from_slice(&16_000u32.to_le_bytes());
        bytes.extend_from_slice(&32_000u32.to_le_bytes());
        bytes.extend_from_slice(&[2, 0, 16, 0]);
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&data_len.to_le_bytes());
        for v in &values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let audio = decode_wav(&bytes).unwrap();
        assert_eq!(encode_wav(&audio), bytes);
    }

    #[test]
    fn skips_unknown_chunks() {
        let plain = encode_wav(&sine(200.0, 0.01, 0.5));
        let mut bytes = plain[..12].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 0]);
        bytes.extend_from_slice(&plain[12..]);
        assert_eq!(decode_wav(&bytes).unwrap(), decode_wav(&plain).unwrap());
    }

    #[test]
    fn yin_frame_count() {
        assert_eq!(yin_pitch(&sine(200.0, 1.0, 0.5)).len(), 200);
        assert!(yin_pitch(&AudioBuffer::silence(399)).is_empty());
    }

    #[test]
    fn yin_pure_tone() {
        let track = yin_pitch(&sine(200.0, 0.5, 0.8));
        assert_eq!(track.len(), 100);
        for &v in &track.values {
            assert!((v - 200.0).abs() < 2.0, "{v}");
        }
    }

    #[test]
    fn yin_silence_unvoiced() {
        let track = yin_pitch(&AudioBuffer::silence(8000));
        assert!(track.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn yin_no_octave_errors() {
        for f in [80.0, 95.0, 130.0, 170.0, 250.0, 333.0, 400.0] {
            let track = yin_pitch(&sine(f, 0.3, 0.5));
            for &v in &track.values {
                let r = v as f64 / f;
                assert!((r - 1.0).abs() < 0.02, "f={f} got {v}");
            }
        }
    }

    #[test]
    fn log_mel_silence_is_floor() {
        let mel = log_mel(&AudioBuffer::silence(16_000));
        assert_eq!(mel.len(), 98);
        let floor = LOG_FLOOR.ln();
        assert!(mel.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn log_mel_frame_count() {
        for n in [399usize, 400, 559, 560, 16_000] {
            let expected = if n < 400 { 0 } else { 1 + (n - 400) / 160 };
            assert_eq!(log_mel(&AudioBuffer::silence(n)).len(), expected);
        }
    }

    #[test]
    fn filterbank_rows_positive_and_local() {
        let fb = mel_filterbank(MEL_BANDS, MEL_FFT, MEL_FMIN, MEL_FMAX);
        for m in 0..MEL_BANDS {
            assert!(fb.row(m).sum() > 0.0, "row {m} empty");
            for other in m + 2..MEL_BANDS {
                let overlap = fb.row(m).iter().zip(fb.row(other).iter()).any(|(a, b)| *a > 0.0 && *b > 0.0);
                assert!(!overlap, "rows {m} and {other} overlap");
            }
        }
    }

    #[test]
    fn log_mel_tone_peaks_at_nearest_center() {
        let mel = log_mel(&sine(1000.0, 0.5, 0.5));
        let edges = mel_edges(MEL_BANDS, MEL_FMIN, MEL_FMAX);
        let nearest = (0..MEL_BANDS)
            .min_by(|&a, &b| (edges[a + 1] - 1000.0).abs().total_cmp(&(edges[b + 1] - 1000.0).abs()))
            .unwrap();
        for row in mel.frames.rows() {
            let argmax = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax, nearest);
        }
    }
}
