use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use punkt::corpus::{self, build_samples, compute_class_weights, load_corpus, render, save_corpus, CorpusEntry, CorpusSummary, Source, TokenKind};
use punkt::dsp::{load_wav, save_wav, yin_pitch};
use punkt::eval;
use punkt::features::AcousticMode;
use punkt::nn::{self, Batch, Mode, ModelConfig, ModelParams};
use punkt::pipeline::{energy_boundaries, entry_example, features_from_audio, transcript_tokens};
use punkt::rng::{derive_seed_str, SplitMix64};
use punkt::synth::{augment_speakers, mix_sources, simulate_asr, speaker_pool, synthesize, AsrResult, FilterStats};
use punkt::train::{self, load_checkpoint, save_checkpoint, Checkpoint, Example, TrainConfig, Trainer};

/// Bad input or usage; exits with status 2.
#[derive(Debug)]
struct InputError(String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_err(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

trait InputContext<T> {
    fn input(self, what: impl fmt::Display) -> Result<T>;
}

impl<T, E: fmt::Display> InputContext<T> for std::result::Result<T, E> {
    fn input(self, what: impl fmt::Display) -> Result<T> {
        self.map_err(|e| input_err(format!("{what}: {e}")))
    }
}

#[derive(Parser)]
#[command(name = "punkt", version, about = "Punctuation prediction from transcripts and prosody")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn raw text into a labelled corpus.
    Prepare {
        input: PathBuf,
        /// Corpus file to write (default: OUT/corpus.jsonl).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render a corpus as audio with simulated recognition.
    Synth {
        corpus: PathBuf,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        n_per_sample: Option<usize>,
        #[arg(long)]
        error_rate: Option<f64>,
        #[arg(long)]
        human_fraction: Option<f64>,
        #[arg(long)]
        speaker_prefix: Option<String>,
    },
    /// Train a model.
    Train {
        /// Training corpus (overrides the config).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// none | pitch | logmel
        #[arg(long)]
        mode: Option<AcousticMode>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus.
    Eval { checkpoint: PathBuf, corpus: PathBuf },
    /// Insert punctuation into a transcript.
    Punctuate {
        checkpoint: PathBuf,
        #[arg(long)]
        transcript: Option<String>,
        #[arg(long)]
        wav: Option<PathBuf>,
        /// Recognizer output as JSON: {"tokens": [...], "boundaries": [[s, e], ...]}.
        #[arg(long)]
        asr: Option<PathBuf>,
    },
    /// Print the pitch track of a WAV file.
    Pitch {
        wav: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Time single-sequence inference.
    Bench {
        /// Checkpoint to time (default: freshly initialized full-size model).
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        tokens: usize,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSettings {
    proj_dim: usize,
    qrnn_hidden: usize,
    kernel_width: usize,
    zoneout_p: f64,
    mel_channels: Option<usize>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let f = ModelConfig::full(0);
        Self { proj_dim: f.proj_dim, qrnn_hidden: f.qrnn_hidden, kernel_width: f.kernel_width, zoneout_p: f.zoneout_p, mel_channels: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SynthSettings {
    speakers: usize,
    speaker_prefix: String,
    n_per_sample: usize,
    error_rate: f64,
    human_fraction: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self { speakers: 8, speaker_prefix: "tts".into(), n_per_sample: 1, error_rate: 0.0, human_fraction: 0.0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    seed: Option<u64>,
    acoustic_mode: Option<AcousticMode>,
    train_corpus: Option<PathBuf>,
    val_corpus: Option<PathBuf>,
    model: ModelSettings,
    train: TrainConfig,
    synth: SynthSettings,
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).input(format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).input(format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_corpus, &mut cfg.val_corpus].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn model(&self, mode: AcousticMode) -> ModelConfig {
        let m = &self.model;
        let mel_channels = match mode {
            AcousticMode::Logmel => Some(m.mel_channels.unwrap_or(32)),
            _ => None,
        };
        ModelConfig {
            input_dim: mode.feature_dim(),
            proj_dim: m.proj_dim,
            qrnn_hidden: m.qrnn_hidden,
            kernel_width: m.kernel_width,
            zoneout_p: m.zoneout_p,
            n_classes: corpus::NUM_CLASSES,
            mel_channels,
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PUNKT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(cfg.train.seed);
    let ctx = Ctx { cfg, seed, out: cli.out.unwrap_or_else(|| PathBuf::from("punkt-out")) };
    match cli.command {
        Command::Prepare { input, output } => cmd_prepare(&ctx, &input, output),
        Command::Synth { corpus, speakers, n_per_sample, error_rate, human_fraction, speaker_prefix } => {
            let mut s = ctx.cfg.synth.clone();
            s.speakers = speakers.unwrap_or(s.speakers);
            s.n_per_sample = n_per_sample.unwrap_or(s.n_per_sample);
            s.error_rate = error_rate.unwrap_or(s.error_rate);
            s.human_fraction = human_fraction.unwrap_or(s.human_fraction);
            s.speaker_prefix = speaker_prefix.unwrap_or(s.speaker_prefix);
            cmd_synth(&ctx, &corpus, &s)
        }
        Command::Train { corpus, val, mode, steps, batch_size, resume } => {
            let mut tc = ctx.cfg.train.clone();
            tc.seed = ctx.seed;
            tc.total_steps = steps.unwrap_or(tc.total_steps);
            tc.batch_size = batch_size.unwrap_or(tc.batch_size);
            let corpus = corpus.or(ctx.cfg.train_corpus.clone()).ok_or_else(|| input_err("no training corpus (use --corpus or train_corpus)"))?;
            let val = val.or(ctx.cfg.val_corpus.clone());
            let mode = mode.or(ctx.cfg.acoustic_mode).unwrap_or(AcousticMode::Pitch);
            cmd_train(&ctx, &corpus, val.as_deref(), mode, tc, resume.as_deref())
        }
        Command::Eval { checkpoint, corpus } => cmd_eval(&ctx, &checkpoint, &corpus),
        Command::Punctuate { checkpoint, transcript, wav, asr } => cmd_punctuate(&checkpoint, transcript, wav.as_deref(), asr.as_deref()),
        Command::Pitch { wav, output } => cmd_pitch(&wav, output.as_deref()),
        Command::Bench { checkpoint, tokens, iters } => cmd_bench(ctx.seed, checkpoint.as_deref(), tokens, iters),
    }
}

fn cmd_prepare(ctx: &Ctx, input: &Path, output: Option<PathBuf>) -> Result<()> {
    let bytes = fs::read(input).input(format!("cannot read {}", input.display()))?;
    let tokens = corpus::tokenize_bytes(&bytes).input(input.display())?;
    let build = build_samples(&tokens);
    if build.samples.is_empty() {
        log::warn!("{} produced no samples", input.display());
        eprintln!("warning: no samples in {}", input.display());
    }
    let output = output.unwrap_or_else(|| ctx.out.join("corpus.jsonl"));
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let entries: Vec<CorpusEntry> = build.samples.iter().cloned().map(CorpusEntry::text_only).collect();
    save_corpus(&entries, &output).with_context(|| format!("writing {}", output.display()))?;
    print!("{}", CorpusSummary::of(&build.samples).table());
    println!("wrote {}", output.display());
    Ok(())
}

fn cmd_synth(ctx: &Ctx, corpus_path: &Path, s: &SynthSettings) -> Result<()> {
    let entries = load_corpus(corpus_path).input(format!("cannot load {}", corpus_path.display()))?;
    if s.speakers == 0 || s.n_per_sample == 0 || s.n_per_sample > s.speakers {
        return Err(input_err(format!("need 1 <= n_per_sample ({}) <= speakers ({})", s.n_per_sample, s.speakers)));
    }
    for (name, v) in [("error_rate", s.error_rate), ("human_fraction", s.human_fraction)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(input_err(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    let created = !ctx.out.exists();
    let audio_dir = ctx.out.join("audio");
    let audio_existed = audio_dir.exists();
    let result = synth_into(ctx, &entries, s, &audio_dir);
    if result.is_err() {
        if created {
            let _ = fs::remove_dir_all(&ctx.out);
        } else {
            if !audio_existed {
                let _ = fs::remove_dir_all(&audio_dir);
            }
            let _ = fs::remove_file(ctx.out.join("synth.jsonl"));
        }
    }
    result
}

fn synth_into(ctx: &Ctx, entries: &[CorpusEntry], s: &SynthSettings, audio_dir: &Path) -> Result<()> {
    fs::create_dir_all(audio_dir).with_context(|| format!("creating {}", audio_dir.display()))?;
    let samples: Vec<_> = entries.iter().map(|e| e.sample.clone()).collect();
    let sources = mix_sources(&samples, s.human_fraction, derive_seed_str(ctx.seed, "mix"))?;
    let tts = speaker_pool(&s.speaker_prefix, s.speakers);
    let human = speaker_pool("human", s.speakers);
    let voice_seed = derive_seed_str(ctx.seed, "voices");
    let asr_seed = derive_seed_str(ctx.seed, "asr");
    let mut stats = FilterStats::default();
    let mut out = Vec::new();
    let mut humans = 0usize;
    for (sample, source) in samples.iter().zip(&sources) {
        let pool = if *source == Source::Human { &human } else { &tts };
        for (sample, speaker) in augment_speakers(std::slice::from_ref(sample), s.n_per_sample, pool, voice_seed)? {
            stats.total += 1;
            let utt = synthesize(&sample, &speaker);
            let asr = simulate_asr(&utt, &sample.words, s.error_rate, asr_seed)?;
            if asr.tokens.len() != sample.words.len() {
                stats.dropped += 1;
                continue;
            }
            stats.kept += 1;
            humans += (*source == Source::Human) as usize;
            let name = format!("{}__{}.wav", sample.id, speaker.speaker_id);
            save_wav(&utt.audio, &audio_dir.join(&name)).with_context(|| format!("writing {name}"))?;
            out.push(CorpusEntry {
                sample,
                audio: Some(format!("audio/{name}")),
                boundaries: Some(asr.boundaries),
                speaker: Some(speaker.speaker_id),
                source: *source,
            });
        }
    }
    let path = ctx.out.join("synth.jsonl");
    save_corpus(&out, &path).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "input samples {}, rendered {}, filtered {} ({:.1}%), kept {}, human share {:.1}%",
        samples.len(),
        stats.total,
        stats.dropped,
        100.0 * stats.dropped_fraction(),
        stats.kept,
        if stats.kept == 0 { 0.0 } else { 100.0 * humans as f64 / stats.kept as f64 },
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn load_examples(path: &Path, mode: AcousticMode) -> Result<(Vec<CorpusEntry>, Vec<Example>)> {
    let entries = load_corpus(path).input(format!("cannot load {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let examples = entries
        .iter()
        .map(|e| entry_example(e, base, mode))
        .collect::<std::result::Result<Vec<_>, _>>()
        .input(path.display())?;
    Ok((entries, examples))
}

fn cmd_train(ctx: &Ctx, corpus: &Path, val: Option<&Path>, mode: AcousticMode, tc: TrainConfig, resume: Option<&Path>) -> Result<()> {
    for p in std::iter::once(corpus).chain(val) {
        if !p.is_file() {
            return Err(input_err(format!("corpus {} does not exist", p.display())));
        }
    }
    tc.validate().input("train config")?;
    let model = ctx.cfg.model(mode);
    model.validate().input("model config")?;
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;

    let (entries, train_set) = load_examples(corpus, mode)?;
    if train_set.is_empty() {
        return Err(input_err(format!("{} has no samples", corpus.display())));
    }
    let val_set = match val {
        Some(p) => load_examples(p, mode)?.1,
        None => Vec::new(),
    };
    let samples: Vec<_> = entries.iter().map(|e| e.sample.clone()).collect();
    let weights = compute_class_weights(&samples).input("class weights")?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = load_checkpoint(p).input(format!("cannot load {}", p.display()))?;
            if ckpt.model != model {
                return Err(input_err("checkpoint model config differs from the requested one"));
            }
            let mut ckpt = ckpt;
            ckpt.train.total_steps = tc.total_steps;
            Trainer::resume(ckpt, &train_set, &val_set)?
        }
        None => Trainer::new(model, tc, weights, &train_set, &val_set)?,
    };
    let start = Instant::now();
    trainer.run(None)?;
    let outcome = trainer.finish();
    save_checkpoint(&ctx.out.join("last.ckpt"), &outcome.last)?;
    save_checkpoint(&ctx.out.join("model.ckpt"), &outcome.best)?;
    fs::write(ctx.out.join("history.json"), serde_json::to_string_pretty(&outcome.history)?)?;
    println!(
        "trained {} steps ({} rejected) in {:.1}s; best val loss {:?}",
        outcome.last.step,
        outcome.last.rejected_steps,
        start.elapsed().as_secs_f64(),
        outcome.last.best_val_loss
    );
    println!("wrote {}", ctx.out.join("model.ckpt").display());
    Ok(())
}

fn checkpoint_mode(ckpt: &Checkpoint) -> Result<AcousticMode> {
    AcousticMode::from_feature_dim(ckpt.model.input_dim)
        .ok_or_else(|| input_err(format!("checkpoint input width {} matches no feature mode", ckpt.model.input_dim)))
}

fn cmd_eval(ctx: &Ctx, checkpoint: &Path, corpus: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint).input(format!("cannot load {}", checkpoint.display()))?;
    let mode = checkpoint_mode(&ckpt)?;
    let (_, examples) = load_examples(corpus, mode)?;
    let mut report = eval::evaluate(&ckpt, &examples, mode)?;
    report.checkpoint = Some(checkpoint.display().to_string());
    fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join("report.json");
    fs::write(&path, report.to_json())?;
    print!("{}", report.table());
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_punctuate(checkpoint: &Path, transcript: Option<String>, wav: Option<&Path>, asr: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint).input(format!("cannot load {}", checkpoint.display()))?;
    let mode = checkpoint_mode(&ckpt)?;
    let asr: Option<AsrResult> = match asr {
        Some(p) => {
            let text = fs::read_to_string(p).input(format!("cannot read {}", p.display()))?;
            Some(serde_json::from_str(&text).input(format!("invalid recognizer output {}", p.display()))?)
        }
        None => None,
    };
    let words: Vec<String> = match (&asr, transcript) {
        (Some(a), _) => a.tokens.clone(),
        (None, Some(t)) => corpus::tokenize(&t).into_iter().filter(|t| t.kind == TokenKind::Word).map(|t| t.text).collect(),
        (None, None) => bail!(input_err("give --transcript or --asr")),
    };
    let tokens = transcript_tokens(&words);
    if tokens.is_empty() {
        return Err(input_err("transcript has no words"));
    }
    let audio = match wav {
        Some(p) => Some(load_wav(p).input(format!("cannot load {}", p.display()))?),
        None if mode != AcousticMode::None => return Err(input_err(format!("a {mode:?} model needs --wav"))),
        None => None,
    };
    let boundaries = match (&asr, &audio) {
        (Some(a), _) => a.boundaries.clone(),
        (None, Some(a)) => energy_boundaries(a, tokens.len()),
        (None, None) => Vec::new(),
    };
    let features = features_from_audio(&tokens, &boundaries, audio.as_ref(), mode).input("features")?;
    let example = Example { id: "input".into(), labels: vec![corpus::PunctClass::None; tokens.len()], features: features.rows };
    let labels = train::predict(&ckpt.params, &ckpt.model, std::slice::from_ref(&example), 1)?.remove(0);
    println!("{}", render(&tokens, &labels));
    Ok(())
}

fn cmd_pitch(wav: &Path, output: Option<&Path>) -> Result<()> {
    let audio = load_wav(wav).input(format!("cannot load {}", wav.display()))?;
    let track = yin_pitch(&audio);
    let mut text = String::from("time_s\tf0_hz\n");
    for (i, v) in track.values.iter().enumerate() {
        text.push_str(&format!("{:.4}\t{:.2}\n", track.frame_center(i), v));
    }
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    tokens: usize,
    iters: usize,
    parameters: usize,
    median_ms: f64,
    p95_ms: f64,
}

fn cmd_bench(seed: u64, checkpoint: Option<&Path>, tokens: usize, iters: usize) -> Result<()> {
    if tokens == 0 || iters == 0 {
        return Err(input_err("tokens and iters must be positive"));
    }
    let (cfg, params) = match checkpoint {
        Some(p) => {
            let c = load_checkpoint(p).input(format!("cannot load {}", p.display()))?;
            (c.model, c.params)
        }
        None => {
            let cfg = ModelConfig::full(AcousticMode::Pitch.feature_dim());
            let params = ModelParams::init(&cfg, seed)?;
            (cfg, params)
        }
    };
    let report = bench(&cfg, &params, tokens, iters, seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn bench(cfg: &ModelConfig, params: &ModelParams<f32>, tokens: usize, iters: usize, seed: u64) -> Result<BenchReport> {
    let mut rng = SplitMix64::new(seed);
    let x = ndarray::Array2::from_shape_simple_fn((tokens, cfg.input_dim), || rng.uniform(-1.0, 1.0) as f32);
    let batch = Batch::<f32>::from_sequences(&[x.view()]);
    for _ in 0..10 {
        nn::forward(params, cfg, &batch, Mode::Eval, None)?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        let out = nn::forward(params, cfg, &batch, Mode::Eval, None)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    times.sort_by(f64::total_cmp);
    let pick = |q: f64| times[((q * (times.len() - 1) as f64).round() as usize).min(times.len() - 1)];
    Ok(BenchReport { tokens, iters, parameters: nn::param_count(cfg), median_ms: pick(0.5), p95_ms: pick(0.95) })
}
