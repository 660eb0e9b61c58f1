//! Seeded synthetic multimodal corpus: a lexicon of function and content
//! words (some content words grouped into homophone pairs that share an audio
//! prototype but carry distinct concepts), utterances rendered as noisy audio
//! and latent video frames, and audio-stream word masking.
//!
//! The geometry is tuned so that a content word's concept is recoverable from
//! video exactly (its video frames are an orthonormal embedding of the
//! concept), while homophone pair members are indistinguishable from audio
//! alone. That reproduces the ambiguity structure a visual context model is
//! supposed to exploit: masked or homophonous words can only be resolved by
//! looking at the video stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::SynthConfig;
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

/// Pairwise cosine cap for content concepts. Keeps mismatched word-window
/// similarities safely below the grounding candidate threshold and homophone
/// pair members visually distinguishable.
const MAX_CONTENT_COS: f64 = 0.45;
/// Pairwise cosine cap for distinct audio prototypes: close enough for
/// occasional acoustic confusions, far enough to be learnable.
const MAX_PROTO_COS: f64 = 0.7;
const MAX_REJECTION_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexWord {
    pub word: String,
    pub concept: Vec<f64>,
    pub audio_proto: Vec<f64>,
    pub homophone_group: Option<u32>,
    pub is_content: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: Vec<LexWord>,
    /// Orthonormal rows; maps a concept (d_embed) into raw video space.
    pub video_embed: Vec<Vec<f64>>,
    /// Raw-video vector emitted by function-word tokens.
    pub background: Vec<f64>,
    pub d_embed: usize,
    pub d_audio: usize,
    pub d_raw_video: usize,
}

impl Lexicon {
    pub fn find(&self, word: &str) -> Option<&LexWord> {
        self.words.iter().find(|w| w.word == word)
    }

    pub fn word_list(&self) -> Vec<String> {
        self.words.iter().map(|w| w.word.clone()).collect()
    }

    pub fn video_embed_tensor(&self) -> Tensor {
        Tensor::from_fn(self.d_embed, self.d_raw_video, |r, c| self.video_embed[r][c])
    }

    /// Raw-video -> concept-space projection (transpose of the embedding).
    pub fn projection_tensor(&self) -> Tensor {
        Tensor::from_fn(self.d_raw_video, self.d_embed, |r, c| self.video_embed[c][r])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpan {
    pub word_index: usize,
    pub frame_start: usize,
    pub frame_end: usize,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub words: Vec<String>,
    pub token_ids: Vec<u32>,
    pub audio: Tensor,
    pub raw_video: Tensor,
    pub mask_spans: Vec<MaskSpan>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: SynthConfig,
    pub lexicon: Lexicon,
    pub vocab: Vocab,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Input(format!("unknown split `{other}`"))),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_scaled(rng: &mut ChaCha8Rng, d: usize, norm: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.iter().map(|x| x * norm / n).collect();
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Sample a vector of the given norm whose |cosine| against every vector in
/// `others` stays below `max_cos`.
fn sample_separated(
    rng: &mut ChaCha8Rng,
    d: usize,
    norm: f64,
    others: &[Vec<f64>],
    max_cos: f64,
    what: &str,
) -> Result<Vec<f64>> {
    for _ in 0..MAX_REJECTION_ATTEMPTS {
        let v = random_scaled(rng, d, norm);
        if others.iter().all(|o| cosine(&v, o).abs() < max_cos) {
            return Ok(v);
        }
    }
    Err(Error::Config(format!(
        "cannot place {what}: dimension too small for the requested count at separation {max_cos}"
    )))
}

/// Orthonormal rows via Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    assert!(rows <= cols);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| normal(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    basis
}

pub fn generate_lexicon(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Lexicon> {
    cfg.validate()?;
    let n_regular = cfg.n_content_words - 2 * cfg.n_homophone_pairs;
    let mut words = Vec::with_capacity(cfg.n_function_words + cfg.n_content_words);

    let mut protos: Vec<Vec<f64>> = Vec::new();
    let mut content_concepts: Vec<Vec<f64>> = Vec::new();

    for i in 0..cfg.n_function_words {
        let proto = sample_separated(
            rng,
            cfg.d_audio,
            cfg.audio_proto_norm,
            &protos,
            MAX_PROTO_COS,
            "audio prototypes",
        )?;
        protos.push(proto.clone());
        words.push(LexWord {
            word: format!("f{i:02}"),
            concept: random_scaled(rng, cfg.d_embed, cfg.function_norm),
            audio_proto: proto,
            homophone_group: None,
            is_content: false,
        });
    }

    for i in 0..n_regular {
        let proto = sample_separated(
            rng,
            cfg.d_audio,
            cfg.audio_proto_norm,
            &protos,
            MAX_PROTO_COS,
            "audio prototypes",
        )?;
        protos.push(proto.clone());
        let concept = sample_separated(
            rng,
            cfg.d_embed,
            cfg.content_norm,
            &content_concepts,
            MAX_CONTENT_COS,
            "content concepts",
        )?;
        content_concepts.push(concept.clone());
        words.push(LexWord {
            word: format!("c{i:02}"),
            concept,
            audio_proto: proto,
            homophone_group: None,
            is_content: true,
        });
    }

    for pair in 0..cfg.n_homophone_pairs {
        let proto = sample_separated(
            rng,
            cfg.d_audio,
            cfg.audio_proto_norm,
            &protos,
            MAX_PROTO_COS,
            "audio prototypes",
        )?;
        protos.push(proto.clone());
        for suffix in ["a", "b"] {
            let concept = sample_separated(
                rng,
                cfg.d_embed,
                cfg.content_norm,
                &content_concepts,
                MAX_CONTENT_COS,
                "content concepts",
            )?;
            content_concepts.push(concept.clone());
            words.push(LexWord {
                word: format!("h{pair:02}{suffix}"),
                concept,
                audio_proto: proto.clone(),
                homophone_group: Some(pair as u32),
                is_content: true,
            });
        }
    }

    let video_embed = orthonormal_rows(rng, cfg.d_embed, cfg.d_raw_video);
    let background = random_scaled(rng, cfg.d_raw_video, 1.0);

    Ok(Lexicon {
        words,
        video_embed,
        background,
        d_embed: cfg.d_embed,
        d_audio: cfg.d_audio,
        d_raw_video: cfg.d_raw_video,
    })
}

pub fn render_audio(
    words: &[String],
    lexicon: &Lexicon,
    frames_per_token: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut out = Tensor::zeros(words.len() * frames_per_token, lexicon.d_audio);
    for (w_idx, word) in words.iter().enumerate() {
        let entry = lexicon
            .find(word)
            .ok_or_else(|| Error::Input(format!("word `{word}` not in lexicon")))?;
        for f in 0..frames_per_token {
            let row = out.row_mut(w_idx * frames_per_token + f);
            for (dst, &p) in row.iter_mut().zip(&entry.audio_proto) {
                *dst = if sigma > 0.0 { p + sigma * normal(rng) } else { p };
            }
        }
    }
    Ok(out)
}

pub fn render_video(
    words: &[String],
    lexicon: &Lexicon,
    frames_per_token: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let embed = lexicon.video_embed_tensor();
    let mut out = Tensor::zeros(words.len() * frames_per_token, lexicon.d_raw_video);
    for (w_idx, word) in words.iter().enumerate() {
        let entry = lexicon
            .find(word)
            .ok_or_else(|| Error::Input(format!("word `{word}` not in lexicon")))?;
        let base: Vec<f64> = if entry.is_content {
            let c = Tensor::row_vector(entry.concept.clone());
            c.matmul(&embed)?.data().to_vec()
        } else {
            lexicon.background.clone()
        };
        for f in 0..frames_per_token {
            let row = out.row_mut(w_idx * frames_per_token + f);
            for (dst, &p) in row.iter_mut().zip(&base) {
                *dst = if sigma > 0.0 { p + sigma * normal(rng) } else { p };
            }
        }
    }
    Ok(out)
}

fn sample_sentence(cfg: &SynthConfig, lexicon: &Lexicon, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let content: Vec<usize> =
        (0..lexicon.words.len()).filter(|&i| lexicon.words[i].is_content).collect();
    let function: Vec<usize> =
        (0..lexicon.words.len()).filter(|&i| !lexicon.words[i].is_content).collect();
    let len = rng.gen_range(cfg.sentence_len_min..=cfg.sentence_len_max);
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < cfg.p_content {
                content[rng.gen_range(0..content.len())]
            } else {
                function[rng.gen_range(0..function.len())]
            }
        })
        .collect()
}

const MIN_CONTENT_COUNT: usize = 5;

/// Substitute rare content words into positions held by frequent ones until
/// every content word occurs at least `MIN_CONTENT_COUNT` times. At realistic
/// split sizes this is a no-op; it is a guarantee, not a frequent code path.
fn enforce_min_counts(
    sentences: &mut [Vec<usize>],
    lexicon: &Lexicon,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n_words = lexicon.words.len();
    loop {
        let mut counts = vec![0usize; n_words];
        for s in sentences.iter() {
            for &w in s {
                counts[w] += 1;
            }
        }
        let deficit = (0..n_words)
            .filter(|&w| lexicon.words[w].is_content && counts[w] < MIN_CONTENT_COUNT)
            .min_by_key(|&w| (counts[w], w));
        let Some(rare) = deficit else { return Ok(()) };
        let mut donors: Vec<(usize, usize)> = Vec::new();
        for (si, s) in sentences.iter().enumerate() {
            for (pi, &w) in s.iter().enumerate() {
                if w != rare && counts[w] > MIN_CONTENT_COUNT && lexicon.words[w].is_content {
                    donors.push((si, pi));
                }
            }
        }
        if donors.is_empty() {
            return Err(Error::Config(
                "train split too small: cannot give every content word 5 occurrences".into(),
            ));
        }
        let (si, pi) = donors[rng.gen_range(0..donors.len())];
        sentences[si][pi] = rare;
    }
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let lexicon = generate_lexicon(cfg, &mut seeds::rng(cfg.seed, "lexicon"))?;
    let vocab = Vocab::new(&lexicon.word_list());

    let mut splits = Vec::new();
    for (name, count) in [("train", cfg.n_train), ("dev", cfg.n_dev), ("test", cfg.n_test)] {
        let mut rng = seeds::rng(cfg.seed, &format!("text/{name}"));
        let mut sentences: Vec<Vec<usize>> =
            (0..count).map(|_| sample_sentence(cfg, &lexicon, &mut rng)).collect();
        if name == "train" {
            enforce_min_counts(&mut sentences, &lexicon, &mut seeds::rng(cfg.seed, "mincount"))?;
        }
        let mut utts = Vec::with_capacity(count);
        for (i, sentence) in sentences.iter().enumerate() {
            let words: Vec<String> =
                sentence.iter().map(|&w| lexicon.words[w].word.clone()).collect();
            let audio = render_audio(
                &words,
                &lexicon,
                cfg.frames_per_token_audio,
                cfg.sigma_audio,
                &mut seeds::rng(cfg.seed, &format!("audio/{name}/{i}")),
            )?;
            let raw_video = render_video(
                &words,
                &lexicon,
                cfg.frames_per_token_video,
                cfg.sigma_video,
                &mut seeds::rng(cfg.seed, &format!("video/{name}/{i}")),
            )?;
            let token_ids = vocab.encode(&words);
            utts.push(Utterance {
                id: format!("{name}-{i:05}"),
                words,
                token_ids,
                audio,
                raw_video,
                mask_spans: Vec::new(),
            });
        }
        splits.push(utts);
    }
    let test = splits.pop().unwrap();
    let dev = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Corpus { config: cfg.clone(), lexicon, vocab, train, dev, test })
}

fn frames_per_token(utt: &Utterance) -> usize {
    debug_assert!(!utt.words.is_empty() && utt.audio.rows() % utt.words.len() == 0);
    utt.audio.rows() / utt.words.len()
}

fn mask_words(utt: &Utterance, mut indices: Vec<usize>, rng: &mut ChaCha8Rng) -> Utterance {
    indices.sort_unstable();
    let fpt = frames_per_token(utt);
    let mut masked = utt.clone();
    for &w in &indices {
        let start = w * fpt;
        let end = start + fpt;
        for f in start..end {
            for v in masked.audio.row_mut(f) {
                *v = normal(rng);
            }
        }
        masked.mask_spans.push(MaskSpan { word_index: w, frame_start: start, frame_end: end });
    }
    masked
}

fn check_candidates(utt: &Utterance, candidates: &[(usize, f64)]) -> Result<()> {
    for &(idx, _) in candidates {
        if idx >= utt.words.len() {
            return Err(Error::Input(format!(
                "mask candidate index {idx} out of range for {} words",
                utt.words.len()
            )));
        }
    }
    Ok(())
}

/// Mask a random subset of the candidates, at most 10% of the words; masked
/// audio frames are overwritten with standard normal noise. The input
/// utterance is left untouched.
pub fn apply_mask_training(
    utt: &Utterance,
    candidates: &[(usize, f64)],
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    check_candidates(utt, candidates)?;
    let k = (utt.words.len() / 10).min(candidates.len());
    let chosen = rand::seq::index::sample(rng, candidates.len(), k);
    let indices: Vec<usize> = chosen.iter().map(|c| candidates[c].0).collect();
    Ok(mask_words(utt, indices, rng))
}

/// Mask the top-k candidates by similarity score (ties to the earlier word),
/// k = max(1, 10% of the words) clipped to the candidate count.
pub fn apply_mask_eval(
    utt: &Utterance,
    candidates: &[(usize, f64)],
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    check_candidates(utt, candidates)?;
    let k = if candidates.is_empty() {
        0
    } else {
        (utt.words.len() / 10).max(1).min(candidates.len())
    };
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let indices: Vec<usize> = ranked[..k].iter().map(|c| c.0).collect();
    Ok(mask_words(utt, indices, rng))
}

/// Small corpus settings for fast unit tests (shared across modules).
#[cfg(test)]
pub(crate) fn tiny_config() -> SynthConfig {
    SynthConfig {
        n_function_words: 6,
        n_content_words: 8,
        n_homophone_pairs: 2,
        sentence_len_min: 4,
        sentence_len_max: 6,
        d_audio: 6,
        d_raw_video: 8,
        d_embed: 8,
        seed: 11,
        n_train: 60,
        n_dev: 6,
        n_test: 6,
        ..SynthConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = tiny_config();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a.train.len(), 60);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.words, y.words);
            assert_eq!(x.audio.data(), y.audio.data());
            assert_eq!(x.raw_video.data(), y.raw_video.data());
        }
        let c = generate_corpus(&SynthConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.train[0].audio.data(), c.train[0].audio.data());
    }

    #[test]
    fn homophones_share_audio_but_not_video() {
        let lex = generate_lexicon(&tiny_config(), &mut seeds::rng(11, "lexicon")).unwrap();
        let a = lex.find("h00a").unwrap();
        let b = lex.find("h00b").unwrap();
        assert_eq!(a.audio_proto, b.audio_proto);
        assert!(cosine(&a.concept, &b.concept).abs() < 0.5);
        let c = lex.find("c00").unwrap();
        assert_ne!(a.audio_proto, c.audio_proto);
    }

    #[test]
    fn concept_norms_follow_word_class() {
        let cfg = tiny_config();
        let lex = generate_lexicon(&cfg, &mut seeds::rng(11, "lexicon")).unwrap();
        for w in &lex.words {
            let norm = w.concept.iter().map(|x| x * x).sum::<f64>().sqrt();
            let want = if w.is_content { cfg.content_norm } else { cfg.function_norm };
            assert!((norm - want).abs() < 1e-9, "{}: {norm}", w.word);
        }
    }

    #[test]
    fn video_embedding_rows_are_orthonormal() {
        let lex = generate_lexicon(&tiny_config(), &mut seeds::rng(11, "lexicon")).unwrap();
        for (i, a) in lex.video_embed.iter().enumerate() {
            for (j, b) in lex.video_embed.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn render_shapes_and_zero_noise() {
        let cfg = tiny_config();
        let lex = generate_lexicon(&cfg, &mut seeds::rng(11, "lexicon")).unwrap();
        let words: Vec<String> = ["c00", "f00", "c01", "f01", "c02"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rng = seeds::rng(1, "r");
        let audio = render_audio(&words, &lex, 4, 0.0, &mut rng).unwrap();
        assert_eq!(audio.shape(), (20, cfg.d_audio));
        let proto = &lex.find("c00").unwrap().audio_proto;
        assert_eq!(audio.row(0), proto.as_slice());
        assert_eq!(audio.row(3), proto.as_slice());

        let video = render_video(&words, &lex, 4, 0.0, &mut rng).unwrap();
        assert_eq!(video.shape(), (20, cfg.d_raw_video));
        assert_eq!(video.row(4), lex.background.as_slice());
    }

    #[test]
    fn unknown_word_is_an_input_error() {
        let lex = generate_lexicon(&tiny_config(), &mut seeds::rng(11, "lexicon")).unwrap();
        let mut rng = seeds::rng(1, "r");
        let words = vec!["zzz".to_string()];
        assert!(matches!(render_audio(&words, &lex, 4, 0.1, &mut rng), Err(Error::Input(_))));
    }

    #[test]
    fn noisy_frames_average_to_the_prototype() {
        let lex = generate_lexicon(&tiny_config(), &mut seeds::rng(11, "lexicon")).unwrap();
        let words = vec!["c00".to_string(); 2500];
        let mut rng = seeds::rng(2, "mc");
        let audio = render_audio(&words, &lex, 4, 0.3, &mut rng).unwrap();
        let proto = &lex.find("c00").unwrap().audio_proto;
        let t = audio.rows();
        for dim in 0..lex.d_audio {
            let mean = (0..t).map(|r| audio.get(r, dim)).sum::<f64>() / t as f64;
            assert!((mean - proto[dim]).abs() < 0.02, "dim {dim}: {mean} vs {}", proto[dim]);
        }
    }

    #[test]
    fn every_content_word_is_frequent_enough_in_train() {
        let corpus = generate_corpus(&tiny_config()).unwrap();
        let mut counts = std::collections::HashMap::new();
        for utt in &corpus.train {
            for w in &utt.words {
                *counts.entry(w.clone()).or_insert(0usize) += 1;
            }
        }
        for w in &corpus.lexicon.words {
            if w.is_content {
                assert!(counts.get(&w.word).copied().unwrap_or(0) >= 5, "{} too rare", w.word);
            }
        }
    }

    fn demo_utterance() -> (Corpus, Utterance) {
        let corpus = generate_corpus(&tiny_config()).unwrap();
        let utt = corpus.train[0].clone();
        (corpus, utt)
    }

    #[test]
    fn small_utterances_get_zero_training_masks() {
        let (_, utt) = demo_utterance();
        assert!(utt.words.len() < 10);
        let cands = vec![(0usize, 3.9), (1, 3.8)];
        let masked =
            apply_mask_training(&utt, &cands, &mut seeds::rng(3, "m")).unwrap();
        assert!(masked.mask_spans.is_empty());
        assert_eq!(masked.audio.data(), utt.audio.data());
    }

    #[test]
    fn eval_masks_top_scores_with_index_ties() {
        let (_, utt) = demo_utterance();
        let cands = vec![(0usize, 3.7), (2, 3.9), (3, 3.9)];
        let masked = apply_mask_eval(&utt, &cands, &mut seeds::rng(3, "m")).unwrap();
        // len < 10 so k = 1; the tie at 3.9 resolves to the earlier index 2.
        assert_eq!(masked.mask_spans.len(), 1);
        assert_eq!(masked.mask_spans[0].word_index, 2);
        let fpt = utt.audio.rows() / utt.words.len();
        assert_eq!(masked.mask_spans[0].frame_start, 2 * fpt);
        assert_eq!(masked.mask_spans[0].frame_end, 3 * fpt);
    }

    #[test]
    fn eval_with_no_candidates_masks_nothing() {
        let (_, utt) = demo_utterance();
        let masked = apply_mask_eval(&utt, &[], &mut seeds::rng(3, "m")).unwrap();
        assert!(masked.mask_spans.is_empty());
    }

    #[test]
    fn masking_never_touches_other_frames() {
        let (_, utt) = demo_utterance();
        let cands: Vec<(usize, f64)> = (0..utt.words.len()).map(|i| (i, 3.9)).collect();
        let masked = apply_mask_eval(&utt, &cands, &mut seeds::rng(4, "m")).unwrap();
        let in_span = |f: usize| {
            masked.mask_spans.iter().any(|s| f >= s.frame_start && f < s.frame_end)
        };
        for f in 0..utt.audio.rows() {
            if !in_span(f) {
                assert_eq!(masked.audio.row(f), utt.audio.row(f), "frame {f} changed");
            }
        }
    }

    #[test]
    fn masked_frames_look_like_standard_noise() {
        let (_, utt) = demo_utterance();
        let cands: Vec<(usize, f64)> = (0..utt.words.len()).map(|i| (i, 3.9)).collect();
        let mut vals = Vec::new();
        for trial in 0..800 {
            let masked =
                apply_mask_eval(&utt, &cands, &mut seeds::rng(trial, "mc")).unwrap();
            for s in &masked.mask_spans {
                for f in s.frame_start..s.frame_end {
                    vals.extend_from_slice(masked.audio.row(f));
                }
            }
        }
        assert!(vals.len() > 10_000);
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn candidate_out_of_range_is_rejected() {
        let (_, utt) = demo_utterance();
        let cands = vec![(99usize, 3.9)];
        assert!(matches!(
            apply_mask_training(&utt, &cands, &mut seeds::rng(3, "m")),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn exact_mask_count_at_twenty_words() {
        // 20 words with 5 candidates must mask exactly floor(0.1 * 20) = 2.
        let cfg = SynthConfig {
            sentence_len_min: 20,
            sentence_len_max: 20,
            n_train: 20,
            n_dev: 1,
            n_test: 1,
            ..tiny_config()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let utt = &corpus.train[0];
        let cands: Vec<(usize, f64)> = (0..5).map(|i| (i, 3.6 + i as f64 * 0.1)).collect();
        let masked = apply_mask_training(utt, &cands, &mut seeds::rng(5, "m")).unwrap();
        assert_eq!(masked.mask_spans.len(), 2);
        let masked = apply_mask_eval(utt, &cands, &mut seeds::rng(5, "m")).unwrap();
        assert_eq!(masked.mask_spans.len(), 2);
        assert_eq!(masked.mask_spans[0].word_index, 3);
        assert_eq!(masked.mask_spans[1].word_index, 4);
    }
}
