//! Punctuation-aware text preprocessing.
//!
//! Raw text is normalized (punctuation outside `. ? ! ,` is turned into
//! whitespace), split into word / punctuation / whitespace tokens along
//! word boundaries, grouped into sentences, and packed into
//! [`LabeledSample`]s where every word carries the punctuation mark that
//! follows it.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_SAMPLE_WORDS: usize = 3;
pub const MAX_SAMPLE_WORDS: usize = 100;
pub const NUM_CLASSES: usize = 5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("sample starts with punctuation")]
    LeadingPunctuation,
    #[error("no word tokens")]
    NoWords,
    #[error("class weights need a non-empty training split")]
    EmptySplit,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: truncated record (missing trailing newline)")]
    Truncated { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Word,
    Punct,
    Whitespace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
}

impl Token {
    pub fn word(text: &str) -> Self {
        Self { text: text.to_string(), kind: TokenKind::Word }
    }

    pub fn punct(text: &str) -> Self {
        Self { text: text.to_string(), kind: TokenKind::Punct }
    }

    pub fn whitespace(text: &str) -> Self {
        Self { text: text.to_string(), kind: TokenKind::Whitespace }
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.text.as_bytes()
    }
}

/// Punctuation appended to a word. The discriminants are persisted in
/// corpus files and checkpoints and must not be reordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum PunctClass {
    Period = 0,
    QuestionMark = 1,
    ExclamationMark = 2,
    Comma = 3,
    None = 4,
}

impl PunctClass {
    pub const ALL: [PunctClass; NUM_CLASSES] = [
        PunctClass::Period,
        PunctClass::QuestionMark,
        PunctClass::ExclamationMark,
        PunctClass::Comma,
        PunctClass::None,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        match c {
            '.' => Some(Self::Period),
            '?' => Some(Self::QuestionMark),
            '!' => Some(Self::ExclamationMark),
            ',' => Some(Self::Comma),
            _ => None,
        }
    }

    pub fn symbol(self) -> Option<char> {
        match self {
            Self::Period => Some('.'),
            Self::QuestionMark => Some('?'),
            Self::ExclamationMark => Some('!'),
            Self::Comma => Some(','),
            Self::None => None,
        }
    }

    /// Period, question mark and exclamation mark end a sentence.
    pub fn is_eos(self) -> bool {
        matches!(self, Self::Period | Self::QuestionMark | Self::ExclamationMark)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Period => "Period",
            Self::QuestionMark => "Question mark",
            Self::ExclamationMark => "Exclamation mark",
            Self::Comma => "Comma",
            Self::None => "None",
        }
    }
}

impl fmt::Display for PunctClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSample {
    pub id: String,
    pub words: Vec<String>,
    pub labels: Vec<PunctClass>,
    pub source_text: String,
}

impl LabeledSample {
    /// Builds a sample whose `source_text` is the canonical rendering.
    pub fn new(id: impl Into<String>, words: Vec<String>, labels: Vec<PunctClass>) -> Self {
        let source_text = render(&words, &labels);
        Self { id: id.into(), words, labels, source_text }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn check(&self) -> Result<(), String> {
        if self.labels.len() != self.words.len() {
            return Err(format!(
                "{} words but {} labels",
                self.words.len(),
                self.labels.len()
            ));
        }
        if !(MIN_SAMPLE_WORDS..=MAX_SAMPLE_WORDS).contains(&self.words.len()) {
            return Err(format!(
                "{} words outside [{MIN_SAMPLE_WORDS}, {MAX_SAMPLE_WORDS}]",
                self.words.len()
            ));
        }
        if self.labels.iter().all(|&l| l == PunctClass::None) {
            return Err("no punctuation label".into());
        }
        if let Some(w) = self.words.iter().find(|w| w.is_empty() || w.chars().any(char::is_whitespace)) {
            return Err(format!("invalid word {w:?}"));
        }
        Ok(())
    }
}

/// Renders words and labels as `word, word.` text.
pub fn render(words: &[String], labels: &[PunctClass]) -> String {
    let mut out = String::new();
    for (i, (w, l)) in words.iter().zip(labels).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(w);
        if let Some(c) = l.symbol() {
            out.push(c);
        }
    }
    out
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Replaces every character that is neither a word character, whitespace,
/// one of `. ? ! ,`, nor a word-internal apostrophe with a space.
pub fn normalize(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    for (i, &c) in chars.iter().enumerate() {
        let keep = c.is_whitespace()
            || is_word_char(c)
            || PunctClass::from_symbol(c).is_some()
            || (is_apostrophe(c)
                && i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphabetic()
                && chars[i + 1].is_alphabetic());
        out.push(if keep { c } else { ' ' });
    }
    out
}

// Word-internal joiners: apostrophe and period between letters, period and
// comma between digits ("don't", "U.S", "3.14", "1,000").
fn joins(prev: char, mid: char, next: char) -> bool {
    let letters = prev.is_alphabetic() && next.is_alphabetic();
    let digits = prev.is_numeric() && next.is_numeric();
    (is_apostrophe(mid) && letters) || (mid == '.' && (letters || digits)) || (mid == ',' && digits)
}

/// Tokenizes UTF-8 bytes, reporting the offset of the first invalid byte.
pub fn tokenize_bytes(bytes: &[u8]) -> Result<Vec<Token>, CorpusError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| CorpusError::InvalidUtf8 { offset: e.valid_up_to() })?;
    Ok(tokenize(text))
}

/// Normalizes `text` and splits it into word, punctuation and whitespace
/// tokens. Concatenating the token texts reproduces [`normalize`]`(text)`.
pub fn tokenize(text: &str) -> Vec<Token> {
    let norm = normalize(text);
    let chars: Vec<(usize, char)> = norm.char_indices().collect();
    let byte_at = |i: usize| chars.get(i).map_or(norm.len(), |&(b, _)| b);
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i].1;
        let start = i;
        let kind = if c.is_whitespace() {
            while i < chars.len() && chars[i].1.is_whitespace() {
                i += 1;
            }
            TokenKind::Whitespace
        } else if is_word_char(c) {
            loop {
                while i < chars.len() && is_word_char(chars[i].1) {
                    i += 1;
                }
                if i + 1 < chars.len()
                    && is_word_char(chars[i + 1].1)
                    && joins(chars[i - 1].1, chars[i].1, chars[i + 1].1)
                {
                    i += 1;
                    continue;
                }
                break;
            }
            TokenKind::Word
        } else {
            // After normalization only the four marks remain here.
            i += 1;
            TokenKind::Punct
        };
        tokens.push(Token { text: norm[byte_at(start)..byte_at(i)].to_string(), kind });
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedLabels {
    pub words: Vec<String>,
    pub labels: Vec<PunctClass>,
    /// Marks discarded because another mark already followed the same word.
    pub dropped_puncts: usize,
}

/// Attaches each punctuation mark to the word before it. Only the first
/// mark after a word counts; whitespace tokens are ignored.
pub fn extract_labels(tokens: &[Token]) -> Result<ExtractedLabels, CorpusError> {
    let mut words = Vec::new();
    let mut labels = Vec::new();
    let mut dropped_puncts = 0;
    let mut labeled = false;
    for tok in tokens {
        match tok.kind {
            TokenKind::Whitespace => {}
            TokenKind::Word => {
                words.push(tok.text.clone());
                labels.push(PunctClass::None);
                labeled = false;
            }
            TokenKind::Punct => {
                let Some(last) = labels.last_mut() else {
                    return Err(CorpusError::LeadingPunctuation);
                };
                let class = tok.text.chars().next().and_then(PunctClass::from_symbol);
                match class {
                    Some(class) if !labeled => {
                        *last = class;
                        labeled = true;
                    }
                    _ => dropped_puncts += 1,
                }
            }
        }
    }
    if words.is_empty() {
        return Err(CorpusError::NoWords);
    }
    Ok(ExtractedLabels { words, labels, dropped_puncts })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BuildStats {
    pub sentences: usize,
    pub dropped_too_long: usize,
    pub dropped_too_short: usize,
    pub dropped_unlabeled: usize,
    pub dropped_leading_punct: usize,
    pub dropped_puncts: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleBuild {
    pub samples: Vec<LabeledSample>,
    pub stats: BuildStats,
}

/// Splits a token stream into sentences. A sentence ends after the run of
/// marks following a word when the first mark of that run is `.`, `?` or
/// `!`.
pub fn split_sentences(tokens: &[Token]) -> Vec<Vec<Token>> {
    let mut sentences = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    let mut after_word = false;
    let mut pending_end = false;
    for tok in tokens.iter().filter(|t| t.kind != TokenKind::Whitespace) {
        match tok.kind {
            TokenKind::Word => {
                if pending_end {
                    sentences.push(std::mem::take(&mut current));
                    pending_end = false;
                }
                after_word = true;
            }
            TokenKind::Punct => {
                if after_word {
                    pending_end = tok.text.chars().next().and_then(PunctClass::from_symbol).is_some_and(PunctClass::is_eos);
                }
                after_word = false;
            }
            TokenKind::Whitespace => unreachable!(),
        }
        current.push(tok.clone());
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
}

/// Greedily packs whole sentences into samples of at most
/// [`MAX_SAMPLE_WORDS`] words. Samples with fewer than
/// [`MIN_SAMPLE_WORDS`] words or no punctuation are dropped, as are
/// sentences that alone exceed the limit.
pub fn build_samples(tokens: &[Token]) -> SampleBuild {
    build_samples_with_prefix(tokens, "sample-")
}

pub fn build_samples_with_prefix(tokens: &[Token], id_prefix: &str) -> SampleBuild {
    let mut stats = BuildStats::default();
    let mut samples = Vec::new();
    let mut words: Vec<String> = Vec::new();
    let mut labels: Vec<PunctClass> = Vec::new();

    let mut flush = |words: &mut Vec<String>, labels: &mut Vec<PunctClass>, stats: &mut BuildStats| {
        if words.is_empty() {
            return;
        }
        if words.len() < MIN_SAMPLE_WORDS {
            stats.dropped_too_short += 1;
        } else if labels.iter().all(|&l| l == PunctClass::None) {
            stats.dropped_unlabeled += 1;
        } else {
            let id = format!("{id_prefix}{:06}", samples.len());
            samples.push(LabeledSample::new(id, std::mem::take(words), std::mem::take(labels)));
        }
        words.clear();
        labels.clear();
    };

    for sentence in split_sentences(tokens) {
        stats.sentences += 1;
        let extracted = match extract_labels(&sentence) {
            Ok(e) => e,
            Err(_) => {
                stats.dropped_leading_punct += 1;
                continue;
            }
        };
        stats.dropped_puncts += extracted.dropped_puncts;
        if extracted.words.len() > MAX_SAMPLE_WORDS {
            stats.dropped_too_long += 1;
            continue;
        }
        if words.len() + extracted.words.len() > MAX_SAMPLE_WORDS {
            flush(&mut words, &mut labels, &mut stats);
        }
        words.extend(extracted.words);
        labels.extend(extracted.labels);
    }
    flush(&mut words, &mut labels, &mut stats);
    if stats.dropped_too_long + stats.dropped_too_short + stats.dropped_unlabeled > 0 {
        log::info!("sample building dropped entries: {stats:?}");
    }
    SampleBuild { samples, stats }
}

/// Per-class weights proportional to inverse training frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub weights: [f64; NUM_CLASSES],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self { weights: [1.0; NUM_CLASSES] }
    }

    /// `N / (K n_c)` for classes with `n_c > 0`, zero otherwise, where `K`
    /// is the number of classes that occur. Uniform counts give weight 1.
    pub fn from_counts(counts: [u64; NUM_CLASSES]) -> Result<Self, CorpusError> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(CorpusError::EmptySplit);
        }
        let present = counts.iter().filter(|&&n| n > 0).count() as f64;
        let mut weights = [0.0; NUM_CLASSES];
        for (w, &n) in weights.iter_mut().zip(&counts) {
            if n > 0 {
                *w = total as f64 / (present * n as f64);
            }
        }
        Ok(Self { weights })
    }

    pub fn get(&self, class: PunctClass) -> f64 {
        self.weights[class.index()]
    }
}

pub fn class_counts<'a>(samples: impl IntoIterator<Item = &'a LabeledSample>) -> [u64; NUM_CLASSES] {
    let mut counts = [0u64; NUM_CLASSES];
    for s in samples {
        for l in &s.labels {
            counts[l.index()] += 1;
        }
    }
    counts
}

pub fn compute_class_weights(train_samples: &[LabeledSample]) -> Result<ClassWeights, CorpusError> {
    if train_samples.is_empty() {
        return Err(CorpusError::EmptySplit);
    }
    ClassWeights::from_counts(class_counts(train_samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Tts,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Human => "human",
            Source::Tts => "tts",
        })
    }
}

/// One line of a corpus file: a sample plus optional audio metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub sample: LabeledSample,
    pub audio: Option<String>,
    pub boundaries: Option<Vec<[f64; 2]>>,
    pub speaker: Option<String>,
    pub source: Source,
}

impl CorpusEntry {
    pub fn text_only(sample: LabeledSample) -> Self {
        Self { sample, audio: None, boundaries: None, speaker: None, source: Source::Human }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    words: Vec<String>,
    labels: Vec<u8>,
    audio: Option<String>,
    boundaries: Option<Vec<[f64; 2]>>,
    speaker: Option<String>,
    source: Source,
}

fn entry_from_record(r: Record) -> Result<CorpusEntry, String> {
    let labels = r
        .labels
        .iter()
        .map(|&l| PunctClass::from_index(l as usize).ok_or_else(|| format!("label {l} out of range")))
        .collect::<Result<Vec<_>, _>>()?;
    let sample = LabeledSample::new(r.id, r.words, labels);
    sample.check()?;
    if let Some(b) = &r.boundaries {
        if b.len() != sample.words.len() {
            return Err(format!("{} boundaries for {} words", b.len(), sample.words.len()));
        }
        check_boundaries(b)?;
    }
    Ok(CorpusEntry { sample, audio: r.audio, boundaries: r.boundaries, speaker: r.speaker, source: r.source })
}

/// `[start, end)` pairs must be finite, non-negative, ordered and
/// non-overlapping.
pub fn check_boundaries(b: &[[f64; 2]]) -> Result<(), String> {
    let mut prev_end = 0.0;
    for (i, &[s, e]) in b.iter().enumerate() {
        if !(s.is_finite() && e.is_finite()) || s < prev_end || e < s {
            return Err(format!("boundary {i} [{s}, {e}) is not monotone"));
        }
        prev_end = e;
    }
    Ok(())
}

pub fn entry_to_json(e: &CorpusEntry) -> String {
    let r = Record {
        id: e.sample.id.clone(),
        words: e.sample.words.clone(),
        labels: e.sample.labels.iter().map(|&l| l as u8).collect(),
        audio: e.audio.clone(),
        boundaries: e.boundaries.clone(),
        speaker: e.speaker.clone(),
        source: e.source,
    };
    serde_json::to_string(&r).expect("corpus record serializes")
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusEntry>, CorpusError> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let lines: Vec<&str> = text.split('\n').collect();
    // A well-formed file ends with a newline, leaving an empty final piece.
    let complete = lines.len() - 1;
    if !lines[complete].is_empty() {
        return Err(CorpusError::Truncated { line: lines.len() });
    }
    lines[..complete]
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let line_no = i + 1;
            let record: Record = serde_json::from_str(line)
                .map_err(|e| CorpusError::Malformed { line: line_no, message: e.to_string() })?;
            entry_from_record(record).map_err(|message| CorpusError::Malformed { line: line_no, message })
        })
        .collect()
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusEntry>, CorpusError> {
    let bytes = fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CorpusError::InvalidUtf8 { offset: e.valid_up_to() })?;
    parse_corpus(text)
}

pub fn save_corpus(entries: &[CorpusEntry], path: &Path) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for e in entries {
        out.write_all(entry_to_json(e).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Counts in the layout of a dataset summary table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub samples: usize,
    pub tokens: usize,
    pub punct: usize,
    pub eos: usize,
    pub period: usize,
    pub question_mark: usize,
    pub exclamation_mark: usize,
    pub comma: usize,
}

impl CorpusSummary {
    pub fn of<'a>(samples: impl IntoIterator<Item = &'a LabeledSample>) -> Self {
        let mut s = Self::default();
        let mut counts = [0u64; NUM_CLASSES];
        for sample in samples {
            s.samples += 1;
            s.tokens += sample.words.len();
            for l in &sample.labels {
                counts[l.index()] += 1;
            }
        }
        s.period = counts[0] as usize;
        s.question_mark = counts[1] as usize;
        s.exclamation_mark = counts[2] as usize;
        s.comma = counts[3] as usize;
        s.eos = s.period + s.question_mark + s.exclamation_mark;
        s.punct = s.eos + s.comma;
        s
    }

    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>7} {:>7} {:>7} {:>9} {:>12} {:>7}\n{:>8} {:>8} {:>7} {:>7} {:>7} {:>9} {:>12} {:>7}\n",
            "samples", "tokens", "punct.", "EoS", "Period", "Question", "Exclamation", "Comma",
            self.samples, self.tokens, self.punct, self.eos, self.period, self.question_mark,
            self.exclamation_mark, self.comma
        )
    }
}
