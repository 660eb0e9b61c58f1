//! First-pass training and decoding over a stored corpus: model assembly
//! from the dataset geometry, the train-from-scratch entry point shared by
//! the audio-only, visually adapted and multi-stream recognizers, and beam
//! decoding with optional deliberate video misalignment.
//!
//! Streams are exact-length per utterance, so no padding frames exist on the
//! audio or video side; the one padded stream (second-pass hypotheses) is
//! masked and handled in the deliberation module.

use rand::Rng;

use crate::config::{ModelConfig, ModelKind, TrainConfig};
use crate::error::{Error, Result};
use crate::io::{DataUtt, Dataset, HypRecord, NBestRecord};
use crate::modelkit::{Checkpoint, Params};
use crate::s2s::beam::{beam_search, NBestList};
use crate::s2s::{run_training, warm_start, Model, TrainLog, TrainUtt, UttStreams};
use crate::seeds;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

/// Desk-scale model configuration matched to a dataset's geometry. The
/// deliberation pass needs a trained first pass and builds its configuration
/// in its own module.
pub fn desk_config(ds: &Dataset, kind: ModelKind, fusion: crate::fusion::FusionMode) -> Result<ModelConfig> {
    if kind == ModelKind::Deliberation {
        return Err(Error::Config(
            "the deliberation configuration derives from a first pass".into(),
        ));
    }
    let mut cfg = ModelConfig::desk(ds.vocab.size(), ds.config.d_audio, ds.config.d_embed);
    cfg.kind = kind;
    cfg.fusion = fusion;
    cfg.use_video = kind == ModelKind::MultiStream;
    cfg.validate()?;
    Ok(cfg)
}

/// Package stored utterances for first-pass training. Every kind gets both
/// streams; models ignore what they do not attend to.
pub fn first_pass_utts(utts: &[DataUtt]) -> Vec<TrainUtt> {
    utts.iter()
        .map(|u| TrainUtt {
            id: u.id.clone(),
            targets: u.token_ids.clone(),
            audio: Some(u.audio.clone()),
            visual: Some(u.visual.clone()),
            enc_audio: None,
            hyp_embeds: None,
            hyp_mask: None,
        })
        .collect()
}

/// Train an audio-only, visually adapted or multi-stream model from scratch
/// (or from a warm-start checkpoint) and package the winning parameters.
pub fn train_first_pass(
    ds: &Dataset,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    warm: Option<&Checkpoint>,
) -> Result<(Checkpoint, TrainLog)> {
    if cfg.kind == ModelKind::Deliberation {
        return Err(Error::Config(
            "the deliberation pass trains through its own entry point".into(),
        ));
    }
    if cfg.vocab != ds.vocab.size() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match the corpus ({})",
            cfg.vocab,
            ds.vocab.size()
        )));
    }
    let mut params = Params::new();
    let model = Model::new(&mut params, cfg, &mut seeds::rng(tcfg.seed, "init"))?;
    if let Some(ck) = warm {
        warm_start(&mut params, ck)?;
    }
    let train = first_pass_utts(&ds.train);
    let dev = first_pass_utts(&ds.dev);
    let log = run_training(&model, &mut params, &train, &dev, tcfg)?;
    let mut ckpt = Checkpoint::new(cfg.to_text());
    ckpt.push_params("", &params);
    Ok((ckpt, log))
}

/// Which recognizer a checkpoint holds, without rebuilding it.
pub fn checkpoint_kind(ckpt: &Checkpoint) -> Result<ModelKind> {
    let map = crate::config::parse_flat(&ckpt.config_text)?;
    map.get("model")
        .ok_or_else(|| Error::Format("checkpoint lacks a model kind".into()))?
        .parse()
}

/// Rebuild a first-pass model from its checkpoint. Deliberation bundles
/// carry two models and load through the deliberation module instead.
pub fn load_model(ckpt: &Checkpoint) -> Result<(Model, Params)> {
    let cfg = ModelConfig::from_text(&ckpt.config_text)?;
    if cfg.kind == ModelKind::Deliberation {
        return Err(Error::Config(
            "this is a deliberation bundle; load it through the deliberation module".into(),
        ));
    }
    let mut params = Params::new();
    let model = Model::new(&mut params, &cfg, &mut seeds::rng(0, "init"))?;
    ckpt.apply_to("", &mut params)?;
    Ok((model, params))
}

/// Seeded derangement of 0..n (Sattolo's algorithm yields a single n-cycle,
/// so no index maps to itself). Hands every utterance someone else's video.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Config(
            "misaligned decoding needs at least 2 utterances to swap videos".into(),
        ));
    }
    let mut rng = seeds::rng(seed, "misalign");
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        p.swap(i, j);
    }
    Ok(p)
}

/// The visual features each utterance presents at decode time: its own, or
/// under misalignment the features of its deranged partner.
pub fn presented_visuals<'a>(
    utts: &'a [DataUtt],
    misalign_seed: Option<u64>,
) -> Result<Vec<&'a Tensor>> {
    match misalign_seed {
        None => Ok(utts.iter().map(|u| &u.visual).collect()),
        Some(seed) => {
            let p = derangement(utts.len(), seed)?;
            Ok(p.into_iter().map(|j| &utts[j].visual).collect())
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeOpts {
    pub beam: usize,
    pub n_best: usize,
    pub misalign_seed: Option<u64>,
}

/// Longest token sequence worth searching for an utterance of n words.
pub fn max_len_for(n_words: usize) -> usize {
    2 * n_words + 10
}

pub fn to_record(id: &str, nbest: &NBestList, vocab: &Vocab) -> NBestRecord {
    NBestRecord {
        id: id.to_string(),
        hyps: nbest
            .hyps
            .iter()
            .map(|h| HypRecord {
                tokens: h.content_tokens().to_vec(),
                words: vocab.decode(h.content_tokens()),
                score: h.score,
            })
            .collect(),
    }
}

/// Beam-decode a split with a first-pass model. With a misalignment seed the
/// video features are permuted across utterances by a seeded derangement
/// before decoding; the audio always stays the utterance's own.
pub fn decode_first_pass(
    model: &Model,
    params: &Params,
    vocab: &Vocab,
    utts: &[DataUtt],
    opts: &DecodeOpts,
) -> Result<Vec<NBestRecord>> {
    let visuals = presented_visuals(utts, opts.misalign_seed)?;
    let mut out = Vec::with_capacity(utts.len());
    for (u, visual) in utts.iter().zip(visuals) {
        let streams =
            UttStreams { audio: Some(&u.audio), visual: Some(visual), ..Default::default() };
        let nbest =
            beam_search(model, params, &streams, opts.beam, opts.n_best, max_len_for(u.words.len()))?;
        out.push(to_record(&u.id, &nbest, vocab));
    }
    Ok(out)
}
