//! Flat `key = value` configuration files with typed parsing and strict
//! key validation: unknown keys are rejected so stale configs fail loudly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fusion::FusionMode;

/// Parse `key = value` lines. Blank lines and `#` comments are ignored.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("duplicate key `{key}`")));
        }
    }
    Ok(map)
}

pub(crate) fn take<T: std::str::FromStr>(
    map: &mut BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    match map.remove(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse::<T>()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`"))),
    }
}

pub(crate) fn reject_unknown(map: &BTreeMap<String, String>, what: &str) -> Result<()> {
    if let Some(key) = map.keys().next() {
        return Err(Error::Config(format!("unknown {what} key `{key}`")));
    }
    Ok(())
}

/// Synthetic corpus shape: lexicon sizes, sentence statistics, feature
/// geometry, noise levels and split sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_function_words: usize,
    pub n_content_words: usize,
    pub n_homophone_pairs: usize,
    pub sentence_len_min: usize,
    pub sentence_len_max: usize,
    pub p_content: f64,
    pub d_audio: usize,
    pub d_raw_video: usize,
    pub d_embed: usize,
    pub frames_per_token_audio: usize,
    pub frames_per_token_video: usize,
    pub sigma_audio: f64,
    pub sigma_video: f64,
    pub content_norm: f64,
    pub function_norm: f64,
    pub audio_proto_norm: f64,
    pub window_size: usize,
    pub stride: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_function_words: 40,
            n_content_words: 40,
            n_homophone_pairs: 10,
            sentence_len_min: 6,
            sentence_len_max: 12,
            p_content: 0.4,
            d_audio: 12,
            d_raw_video: 16,
            d_embed: 16,
            frames_per_token_audio: 4,
            frames_per_token_video: 4,
            sigma_audio: 0.3,
            sigma_video: 0.1,
            content_norm: 1.4,
            function_norm: 0.5,
            audio_proto_norm: 2.0,
            window_size: 4,
            stride: 2,
            seed: 7,
            n_train: 4000,
            n_dev: 300,
            n_test: 300,
        }
    }
}

impl SynthConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = parse_flat(text)?;
        let cfg = Self::from_map(&mut map)?;
        reject_unknown(&map, "corpus config")?;
        Ok(cfg)
    }

    /// Consume the keys this config understands, leaving the rest in `map`.
    pub fn from_map(map: &mut BTreeMap<String, String>) -> Result<Self> {
        let d = SynthConfig::default();
        let cfg = SynthConfig {
            n_function_words: take(map, "n_function_words", d.n_function_words)?,
            n_content_words: take(map, "n_content_words", d.n_content_words)?,
            n_homophone_pairs: take(map, "n_homophone_pairs", d.n_homophone_pairs)?,
            sentence_len_min: take(map, "sentence_len_min", d.sentence_len_min)?,
            sentence_len_max: take(map, "sentence_len_max", d.sentence_len_max)?,
            p_content: take(map, "p_content", d.p_content)?,
            d_audio: take(map, "d_audio", d.d_audio)?,
            d_raw_video: take(map, "d_raw_video", d.d_raw_video)?,
            d_embed: take(map, "d_embed", d.d_embed)?,
            frames_per_token_audio: take(map, "frames_per_token_audio", d.frames_per_token_audio)?,
            frames_per_token_video: take(map, "frames_per_token_video", d.frames_per_token_video)?,
            sigma_audio: take(map, "sigma_audio", d.sigma_audio)?,
            sigma_video: take(map, "sigma_video", d.sigma_video)?,
            content_norm: take(map, "content_norm", d.content_norm)?,
            function_norm: take(map, "function_norm", d.function_norm)?,
            audio_proto_norm: take(map, "audio_proto_norm", d.audio_proto_norm)?,
            window_size: take(map, "window_size", d.window_size)?,
            stride: take(map, "stride", d.stride)?,
            seed: take(map, "seed", d.seed)?,
            n_train: take(map, "n_train", d.n_train)?,
            n_dev: take(map, "n_dev", d.n_dev)?,
            n_test: take(map, "n_test", d.n_test)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 13] = [
            ("n_function_words", self.n_function_words),
            ("n_content_words", self.n_content_words),
            ("sentence_len_min", self.sentence_len_min),
            ("sentence_len_max", self.sentence_len_max),
            ("d_audio", self.d_audio),
            ("d_raw_video", self.d_raw_video),
            ("d_embed", self.d_embed),
            ("frames_per_token_audio", self.frames_per_token_audio),
            ("frames_per_token_video", self.frames_per_token_video),
            ("n_train", self.n_train),
            ("n_dev", self.n_dev),
            ("n_test", self.n_test),
            ("stride", self.stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if !(self.p_content > 0.0 && self.p_content < 1.0) {
            return Err(Error::Config("p_content must be in (0, 1)".into()));
        }
        for (name, v) in [
            ("sigma_audio", self.sigma_audio),
            ("sigma_video", self.sigma_video),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        for (name, v) in [
            ("content_norm", self.content_norm),
            ("function_norm", self.function_norm),
            ("audio_proto_norm", self.audio_proto_norm),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if self.n_homophone_pairs * 2 > self.n_content_words {
            return Err(Error::Config(
                "n_homophone_pairs: need n_homophone_pairs*2 <= n_content_words".into(),
            ));
        }
        if self.sentence_len_min > self.sentence_len_max {
            return Err(Error::Config("sentence_len_min must be <= sentence_len_max".into()));
        }
        if self.d_embed > self.d_raw_video {
            return Err(Error::Config(
                "d_embed must be <= d_raw_video (concepts embed into raw video space)".into(),
            ));
        }
        if self.window_size < self.stride {
            return Err(Error::Config("window_size must be >= stride".into()));
        }
        if self.window_size > self.sentence_len_min * self.frames_per_token_video {
            return Err(Error::Config(
                "window_size exceeds the shortest possible video (sentence_len_min * frames_per_token_video)"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_function_words = {}", self.n_function_words);
        let _ = writeln!(s, "n_content_words = {}", self.n_content_words);
        let _ = writeln!(s, "n_homophone_pairs = {}", self.n_homophone_pairs);
        let _ = writeln!(s, "sentence_len_min = {}", self.sentence_len_min);
        let _ = writeln!(s, "sentence_len_max = {}", self.sentence_len_max);
        let _ = writeln!(s, "p_content = {}", self.p_content);
        let _ = writeln!(s, "d_audio = {}", self.d_audio);
        let _ = writeln!(s, "d_raw_video = {}", self.d_raw_video);
        let _ = writeln!(s, "d_embed = {}", self.d_embed);
        let _ = writeln!(s, "frames_per_token_audio = {}", self.frames_per_token_audio);
        let _ = writeln!(s, "frames_per_token_video = {}", self.frames_per_token_video);
        let _ = writeln!(s, "sigma_audio = {}", self.sigma_audio);
        let _ = writeln!(s, "sigma_video = {}", self.sigma_video);
        let _ = writeln!(s, "content_norm = {}", self.content_norm);
        let _ = writeln!(s, "function_norm = {}", self.function_norm);
        let _ = writeln!(s, "audio_proto_norm = {}", self.audio_proto_norm);
        let _ = writeln!(s, "window_size = {}", self.window_size);
        let _ = writeln!(s, "stride = {}", self.stride);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "n_train = {}", self.n_train);
        let _ = writeln!(s, "n_dev = {}", self.n_dev);
        let _ = writeln!(s, "n_test = {}", self.n_test);
        s
    }
}

/// Which recognizer a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    AudioOnly,
    Vat,
    MultiStream,
    Deliberation,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio-only" => Ok(ModelKind::AudioOnly),
            "vat" => Ok(ModelKind::Vat),
            "multistream" => Ok(ModelKind::MultiStream),
            "deliberation" => Ok(ModelKind::Deliberation),
            other => Err(Error::Config(format!(
                "model must be audio-only | vat | multistream | deliberation, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::AudioOnly => "audio-only",
            ModelKind::Vat => "vat",
            ModelKind::MultiStream => "multistream",
            ModelKind::Deliberation => "deliberation",
        })
    }
}

/// Architecture description; stored in checkpoints so decoding can rebuild
/// the exact parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub fusion: FusionMode,
    pub vg: bool,
    /// Whether a video attention stream is present (always for multistream;
    /// optional for deliberation, whose no-video ablation drops it).
    pub use_video: bool,
    pub d_model: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub attn_filters: usize,
    pub attn_kernel: usize,
    pub audio_layers: usize,
    pub video_layers: usize,
    pub hyp_layers: usize,
    pub vocab: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    /// Hypotheses consumed per utterance by the second pass.
    pub n_hyps: usize,
    /// Width of the frozen first-pass encoding (second pass only).
    pub d_enc_audio: usize,
    /// Token embedding width of the frozen first pass (second pass only).
    pub d_first_embed: usize,
}

impl ModelConfig {
    /// Desk-scale defaults for a given corpus geometry; callers override the
    /// kind and fusion fields as needed.
    pub fn desk(vocab: usize, d_audio: usize, d_visual: usize) -> Self {
        ModelConfig {
            kind: ModelKind::AudioOnly,
            fusion: FusionMode::Cat,
            vg: false,
            use_video: false,
            d_model: 32,
            hidden: 32,
            attn_dim: 16,
            attn_filters: 4,
            attn_kernel: 7,
            audio_layers: 6,
            video_layers: 3,
            hyp_layers: 2,
            vocab,
            d_audio,
            d_visual,
            n_hyps: 4,
            d_enc_audio: 0,
            d_first_embed: 0,
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = parse_flat(text)?;
        let cfg = Self::from_map(&mut map)?;
        reject_unknown(&map, "model config")?;
        Ok(cfg)
    }

    pub fn from_map(map: &mut BTreeMap<String, String>) -> Result<Self> {
        let kind: String = take(map, "model", "audio-only".to_string())?;
        let kind: ModelKind = kind.parse()?;
        let fusion: String = take(map, "fusion", "cat".to_string())?;
        let fusion: FusionMode = fusion.parse()?;
        let d = ModelConfig::desk(0, 0, 0);
        let video_default = matches!(kind, ModelKind::MultiStream | ModelKind::Deliberation);
        let cfg = ModelConfig {
            kind,
            fusion,
            vg: take(map, "vg", false)?,
            use_video: take(map, "use_video", video_default)?,
            d_model: take(map, "d_model", d.d_model)?,
            hidden: take(map, "hidden", d.hidden)?,
            attn_dim: take(map, "attn_dim", d.attn_dim)?,
            attn_filters: take(map, "attn_filters", d.attn_filters)?,
            attn_kernel: take(map, "attn_kernel", d.attn_kernel)?,
            audio_layers: take(map, "audio_layers", d.audio_layers)?,
            video_layers: take(map, "video_layers", d.video_layers)?,
            hyp_layers: take(map, "hyp_layers", d.hyp_layers)?,
            vocab: take(map, "vocab", 0usize)?,
            d_audio: take(map, "d_audio", 0usize)?,
            d_visual: take(map, "d_visual", 0usize)?,
            n_hyps: take(map, "n_hyps", d.n_hyps)?,
            d_enc_audio: take(map, "d_enc_audio", 0usize)?,
            d_first_embed: take(map, "d_first_embed", 0usize)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("hidden", self.hidden),
            ("attn_dim", self.attn_dim),
            ("attn_filters", self.attn_filters),
            ("attn_kernel", self.attn_kernel),
            ("vocab", self.vocab),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if self.attn_kernel % 2 == 0 {
            return Err(Error::Config("attn_kernel must be odd".into()));
        }
        match self.kind {
            ModelKind::AudioOnly => {
                if self.d_audio == 0 {
                    return Err(Error::Config("d_audio must be > 0".into()));
                }
                if self.use_video {
                    return Err(Error::Config("audio-only model cannot use a video stream".into()));
                }
            }
            ModelKind::Vat => {
                if self.d_audio == 0 || self.d_visual == 0 {
                    return Err(Error::Config("vat model needs d_audio and d_visual".into()));
                }
                if self.use_video {
                    return Err(Error::Config(
                        "vat mixes video into the audio features, not a separate stream".into(),
                    ));
                }
            }
            ModelKind::MultiStream => {
                if self.d_audio == 0 || self.d_visual == 0 {
                    return Err(Error::Config("multistream model needs d_audio and d_visual".into()));
                }
                if !self.use_video {
                    return Err(Error::Config("multistream model requires use_video".into()));
                }
            }
            ModelKind::Deliberation => {
                if self.d_enc_audio == 0 || self.d_first_embed == 0 {
                    return Err(Error::Config(
                        "deliberation model needs d_enc_audio and d_first_embed".into(),
                    ));
                }
                if self.use_video && self.d_visual == 0 {
                    return Err(Error::Config(
                        "deliberation with a video stream needs d_visual".into(),
                    ));
                }
                if self.n_hyps == 0 {
                    return Err(Error::Config("n_hyps must be > 0".into()));
                }
            }
        }
        if self.vg && self.d_visual == 0 {
            return Err(Error::Config("vg grounding needs d_visual".into()));
        }
        if self.vg && self.kind != ModelKind::Deliberation {
            return Err(Error::Config("vg requires the deliberation model".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model = {}", self.kind);
        let _ = writeln!(s, "fusion = {}", self.fusion);
        let _ = writeln!(s, "vg = {}", self.vg);
        let _ = writeln!(s, "use_video = {}", self.use_video);
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "attn_dim = {}", self.attn_dim);
        let _ = writeln!(s, "attn_filters = {}", self.attn_filters);
        let _ = writeln!(s, "attn_kernel = {}", self.attn_kernel);
        let _ = writeln!(s, "audio_layers = {}", self.audio_layers);
        let _ = writeln!(s, "video_layers = {}", self.video_layers);
        let _ = writeln!(s, "hyp_layers = {}", self.hyp_layers);
        let _ = writeln!(s, "vocab = {}", self.vocab);
        let _ = writeln!(s, "d_audio = {}", self.d_audio);
        let _ = writeln!(s, "d_visual = {}", self.d_visual);
        let _ = writeln!(s, "n_hyps = {}", self.n_hyps);
        let _ = writeln!(s, "d_enc_audio = {}", self.d_enc_audio);
        let _ = writeln!(s, "d_first_embed = {}", self.d_first_embed);
        s
    }
}

/// Optimization schedule for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub halving_period: u64,
    pub dev_every: u64,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 16,
            lr0: 4.0e-4,
            halving_period: 1000,
            dev_every: 200,
            label_smoothing: 0.2,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_map(map: &mut BTreeMap<String, String>) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            steps: take(map, "steps", d.steps)?,
            batch_size: take(map, "batch_size", d.batch_size)?,
            lr0: take(map, "lr0", d.lr0)?,
            halving_period: take(map, "halving_period", d.halving_period)?,
            dev_every: take(map, "dev_every", d.dev_every)?,
            label_smoothing: take(map, "label_smoothing", d.label_smoothing)?,
            clip_norm: take(map, "clip_norm", d.clip_norm)?,
            seed: take(map, "seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if self.halving_period == 0 {
            return Err(Error::Config("halving_period must be > 0".into()));
        }
        if self.dev_every == 0 {
            return Err(Error::Config("dev_every must be > 0".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr0 = {}", self.lr0);
        let _ = writeln!(s, "halving_period = {}", self.halving_period);
        let _ = writeln!(s, "dev_every = {}", self.dev_every);
        let _ = writeln!(s, "label_smoothing = {}", self.label_smoothing);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

/// One training-command file: model architecture plus optimization keys.
pub fn parse_train_file(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut map = parse_flat(text)?;
    let tc = TrainConfig::from_map(&mut map)?;
    let mc = ModelConfig::from_map(&mut map)?;
    reject_unknown(&map, "training config")?;
    Ok((mc, tc))
}
