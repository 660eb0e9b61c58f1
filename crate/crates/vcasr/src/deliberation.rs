//! The deliberation second pass: a frozen first pass proposes N-best
//! hypotheses, which are embedded with the frozen first-pass table,
//! optionally visually grounded word by word, encoded hypothesis by
//! hypothesis, and attended to alongside the frozen audio encoding and the
//! video stream.

use std::path::{Path, PathBuf};

use crate::config::{ModelConfig, ModelKind, TrainConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::grounding::{similarity_matrix, vg_context, JointEmbedding};
use crate::io::{self, DataUtt, Dataset, HypRecord, NBestRecord};
use crate::modelkit::{Checkpoint, Params};
use crate::multistream::{decode_first_pass, max_len_for, presented_visuals, to_record, DecodeOpts};
use crate::s2s::beam::beam_search;
use crate::s2s::{run_training, Model, TrainLog, TrainUtt, UttStreams};
use crate::seeds;
use crate::tensor::Tensor;
use crate::vocab;

/// A trained first pass held immutable while the second pass trains on its
/// hypotheses and audio encodings.
pub struct FirstPass {
    pub model: Model,
    pub params: Params,
    pub cfg: ModelConfig,
}

impl FirstPass {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<FirstPass> {
        let (model, params) = crate::multistream::load_model(ckpt)?;
        let cfg = model.cfg.clone();
        Ok(FirstPass { model, params, cfg })
    }

    /// The frozen token embedding table of the first decoder.
    pub fn embed_table(&self) -> &Tensor {
        let id = self.params.by_name("dec.embed").expect("decoder embedding table");
        self.params.get(id)
    }

    /// Stable content hash of every parameter, for freeze verification.
    pub fn param_hash(&self) -> String {
        param_hash(&self.params)
    }
}

/// Hash of names, shapes and exact payload bits of every parameter.
pub fn param_hash(params: &Params) -> String {
    let mut bytes = Vec::new();
    for (_, name, t) in params.iter() {
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        bytes.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    io::sha256_hex(&bytes)
}

/// Deterministic first-pass N-best over one split, for the second pass to
/// train against. Decoding is always aligned here.
pub fn precompute_nbest(
    fp: &FirstPass,
    ds: &Dataset,
    split: &str,
    beam: usize,
    n_best: usize,
) -> Result<Vec<NBestRecord>> {
    if fp.cfg.vocab != ds.vocab.size() {
        return Err(Error::Config(format!(
            "first pass was trained on a {}-word vocabulary, corpus has {}",
            fp.cfg.vocab,
            ds.vocab.size()
        )));
    }
    let opts = DecodeOpts { beam, n_best, misalign_seed: None };
    decode_first_pass(&fp.model, &fp.params, &ds.vocab, ds.split(split)?, &opts)
}

pub fn nbest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("nbest_{split}.jsonl"))
}

pub fn save_nbest(dir: &Path, split: &str, records: &[NBestRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    io::write_jsonl(&nbest_path(dir, split), records)
}

pub fn load_nbest(dir: &Path, split: &str) -> Result<Vec<NBestRecord>> {
    io::read_jsonl(&nbest_path(dir, split))
}

/// One utterance's hypotheses readied for the second pass.
#[derive(Debug, Clone)]
pub struct HypBatch {
    /// One padded_len x width embedding matrix per hypothesis.
    pub embeds: Vec<Tensor>,
    /// Validity over the concatenated stream, length n_hyps * padded_len.
    pub mask: Vec<bool>,
    pub padded_len: usize,
}

/// Per-word visual contexts for each hypothesis against one video. Empty
/// hypotheses get an empty context matrix.
pub fn ground_hypotheses(
    joint: &JointEmbedding,
    hyps: &[HypRecord],
    visual: &Tensor,
) -> Result<Vec<Tensor>> {
    hyps.iter()
        .map(|h| {
            if h.words.is_empty() {
                return Ok(Tensor::zeros(0, visual.cols()));
            }
            let embeds = joint.embed_words(&h.words);
            let sim = similarity_matrix(&embeds, visual)?;
            vg_context(&sim, visual)
        })
        .collect()
}

/// Pad the first n_hyps hypotheses to a common length with end markers and
/// embed them with the frozen first-pass table. Each hypothesis keeps one
/// end marker as a real sequence position; padding beyond it is masked out
/// of attention. With VG contexts, each word's context vector is appended
/// to its embedding; end markers and padding get zero context.
pub fn hyp_batch(
    table: &Tensor,
    hyps: &[HypRecord],
    n_hyps: usize,
    vg: Option<&[Tensor]>,
) -> Result<HypBatch> {
    if n_hyps == 0 {
        return Err(Error::Input("a hypothesis batch needs at least one hypothesis".into()));
    }
    if hyps.len() < n_hyps {
        return Err(Error::Input(format!(
            "N-best list holds {} hypotheses, the second pass needs {n_hyps}",
            hyps.len()
        )));
    }
    let hyps = &hyps[..n_hyps];
    if let Some(v) = vg {
        if v.len() < n_hyps {
            return Err(Error::Input("need one VG context matrix per hypothesis".into()));
        }
    }
    let padded_len = hyps.iter().map(|h| h.tokens.len()).max().unwrap() + 1;
    let d_embed = table.cols();
    let d_vg = vg.map_or(0, |v| v[0].cols());
    let mut embeds = Vec::with_capacity(n_hyps);
    let mut mask = Vec::with_capacity(n_hyps * padded_len);
    for (i, h) in hyps.iter().enumerate() {
        if let Some(v) = vg {
            if v[i].rows() != h.tokens.len() || v[i].cols() != d_vg {
                return Err(Error::Shape(format!(
                    "VG contexts for hypothesis {i} are {}x{}, expected {}x{d_vg}",
                    v[i].rows(),
                    v[i].cols(),
                    h.tokens.len()
                )));
            }
        }
        let mut m = Tensor::zeros(padded_len, d_embed + d_vg);
        for pos in 0..padded_len {
            let tok = h.tokens.get(pos).copied().unwrap_or(vocab::EOS);
            if tok as usize >= table.rows() {
                return Err(Error::Input(format!(
                    "hypothesis token {tok} is outside the embedding table"
                )));
            }
            m.row_mut(pos)[..d_embed].copy_from_slice(table.row(tok as usize));
            if pos < h.tokens.len() {
                if let Some(v) = vg {
                    m.row_mut(pos)[d_embed..].copy_from_slice(v[i].row(pos));
                }
            }
            mask.push(pos <= h.tokens.len());
        }
        embeds.push(m);
    }
    Ok(HypBatch { embeds, mask, padded_len })
}

/// Desk deliberation configuration derived from the dataset geometry and a
/// trained first pass.
pub fn delib_config(
    ds: &Dataset,
    fp: &FirstPass,
    fusion: FusionMode,
    vg: bool,
    use_video: bool,
    n_hyps: usize,
) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::desk(ds.vocab.size(), ds.config.d_audio, ds.config.d_embed);
    cfg.kind = ModelKind::Deliberation;
    cfg.vg = vg;
    cfg.use_video = use_video;
    cfg.fusion = fusion;
    cfg.n_hyps = n_hyps;
    cfg.d_enc_audio = fp.model.encoded_audio_width();
    cfg.d_first_embed = fp.cfg.d_model;
    cfg.validate()?;
    Ok(cfg)
}

fn grounder(ds: &Dataset, cfg: &ModelConfig) -> Result<Option<JointEmbedding>> {
    if cfg.vg {
        Ok(Some(JointEmbedding::new(&ds.lexicon, ds.config.window_size, ds.config.stride)?))
    } else {
        Ok(None)
    }
}

fn batch_for(
    table: &Tensor,
    joint: Option<&JointEmbedding>,
    nb: &NBestRecord,
    n_hyps: usize,
    visual: &Tensor,
) -> Result<HypBatch> {
    if nb.hyps.len() < n_hyps {
        return Err(Error::Input(format!(
            "utterance {}: N-best list holds {} hypotheses, need {n_hyps}",
            nb.id,
            nb.hyps.len()
        )));
    }
    let hyps = &nb.hyps[..n_hyps];
    let vg = match joint {
        Some(j) => Some(ground_hypotheses(j, hyps, visual)?),
        None => None,
    };
    hyp_batch(table, hyps, n_hyps, vg.as_deref())
}

/// Build second-pass training utterances: frozen first-pass audio encodings
/// plus embedded (optionally grounded) hypothesis batches. Everything here
/// is aligned; misalignment is a decode-time condition.
pub fn delib_utts(
    fp: &FirstPass,
    ds: &Dataset,
    utts: &[DataUtt],
    nbest: &[NBestRecord],
    cfg: &ModelConfig,
) -> Result<Vec<TrainUtt>> {
    if utts.len() != nbest.len() {
        return Err(Error::Input(format!(
            "split has {} utterances but the N-best store has {}",
            utts.len(),
            nbest.len()
        )));
    }
    let table = fp.embed_table().clone();
    let joint = grounder(ds, cfg)?;
    utts.iter()
        .zip(nbest)
        .map(|(u, nb)| {
            if u.id != nb.id {
                return Err(Error::Input(format!(
                    "N-best store does not line up with the split: {} vs {}",
                    nb.id, u.id
                )));
            }
            let enc = fp.model.encode_audio_tensor(&fp.params, &u.audio, Some(&u.visual))?;
            let batch = batch_for(&table, joint.as_ref(), nb, cfg.n_hyps, &u.visual)?;
            Ok(TrainUtt {
                id: u.id.clone(),
                targets: u.token_ids.clone(),
                audio: None,
                visual: Some(u.visual.clone()),
                enc_audio: Some(enc),
                hyp_embeds: Some(batch.embeds),
                hyp_mask: Some(batch.mask),
            })
        })
        .collect()
}

/// Train the second pass against precomputed N-best lists. Only the
/// deliberation components are updated; the first pass is verified frozen
/// and bundled into the returned checkpoint under the `first.` prefix.
pub fn train_deliberation(
    fp: &FirstPass,
    ds: &Dataset,
    nbest_train: &[NBestRecord],
    nbest_dev: &[NBestRecord],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    if cfg.kind != ModelKind::Deliberation {
        return Err(Error::Config("train_deliberation needs a deliberation configuration".into()));
    }
    if cfg.vocab != ds.vocab.size() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match the corpus ({})",
            cfg.vocab,
            ds.vocab.size()
        )));
    }
    if cfg.d_enc_audio != fp.model.encoded_audio_width() {
        return Err(Error::Config(format!(
            "d_enc_audio {} does not match the first pass ({})",
            cfg.d_enc_audio,
            fp.model.encoded_audio_width()
        )));
    }
    if cfg.d_first_embed != fp.cfg.d_model {
        return Err(Error::Config(format!(
            "d_first_embed {} does not match the first-pass embedding width ({})",
            cfg.d_first_embed, fp.cfg.d_model
        )));
    }
    let hash_before = fp.param_hash();
    let train = delib_utts(fp, ds, &ds.train, nbest_train, cfg)?;
    let dev = delib_utts(fp, ds, &ds.dev, nbest_dev, cfg)?;
    let mut params = Params::new();
    let model = Model::new(&mut params, cfg, &mut seeds::rng(tcfg.seed, "init"))?;
    let log = run_training(&model, &mut params, &train, &dev, tcfg)?;
    if fp.param_hash() != hash_before {
        return Err(Error::Numeric(
            "frozen first-pass parameters drifted during deliberation training".into(),
        ));
    }
    let mut ckpt = Checkpoint::new(bundle_config_text(cfg, &fp.cfg));
    ckpt.push_params("", &params);
    ckpt.push_params("first.", &fp.params);
    Ok((ckpt, log))
}

/// A deliberation checkpoint stores both configurations in one text: the
/// second pass plainly, the first pass with every key prefixed `first.`.
fn bundle_config_text(second: &ModelConfig, first: &ModelConfig) -> String {
    let mut s = second.to_text();
    for line in first.to_text().lines() {
        s.push_str("first.");
        s.push_str(line);
        s.push('\n');
    }
    s
}

fn split_config_text(text: &str) -> (String, String) {
    let mut second = String::new();
    let mut first = String::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("first.") {
            first.push_str(rest);
            first.push('\n');
        } else {
            second.push_str(line);
            second.push('\n');
        }
    }
    (second, first)
}

/// A trained second pass together with its frozen first pass.
pub struct DelibBundle {
    pub first: FirstPass,
    pub model: Model,
    pub params: Params,
}

impl DelibBundle {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<DelibBundle> {
        let (second_text, first_text) = split_config_text(&ckpt.config_text);
        let cfg = ModelConfig::from_text(&second_text)?;
        if cfg.kind != ModelKind::Deliberation {
            return Err(Error::Config("not a deliberation bundle".into()));
        }
        let fp_cfg = ModelConfig::from_text(&first_text)?;
        let mut fp_params = Params::new();
        let fp_model = Model::new(&mut fp_params, &fp_cfg, &mut seeds::rng(0, "init"))?;
        ckpt.apply_to("first.", &mut fp_params)?;
        let mut params = Params::new();
        let model = Model::new(&mut params, &cfg, &mut seeds::rng(0, "init"))?;
        ckpt.apply_to("", &mut params)?;
        Ok(DelibBundle {
            first: FirstPass { model: fp_model, params: fp_params, cfg: fp_cfg },
            model,
            params,
        })
    }
}

/// Second-pass beam decoding. Hypotheses and the frozen audio encoding
/// always come from the utterance's own inputs; a misalignment seed
/// deranges only the video presented to the second pass (its attention
/// stream and the VG grounding both see the swapped video).
pub fn decode_deliberation(
    bundle: &DelibBundle,
    ds: &Dataset,
    utts: &[DataUtt],
    nbest: Option<&[NBestRecord]>,
    opts: &DecodeOpts,
) -> Result<Vec<NBestRecord>> {
    let cfg = &bundle.model.cfg;
    let fp = &bundle.first;
    let fresh;
    let nbest: &[NBestRecord] = match nbest {
        Some(r) => {
            if r.len() != utts.len() {
                return Err(Error::Input(format!(
                    "have {} utterances but {} N-best lists",
                    utts.len(),
                    r.len()
                )));
            }
            r
        }
        None => {
            let fp_opts = DecodeOpts {
                beam: opts.beam.max(cfg.n_hyps),
                n_best: cfg.n_hyps,
                misalign_seed: None,
            };
            fresh = decode_first_pass(&fp.model, &fp.params, &ds.vocab, utts, &fp_opts)?;
            &fresh
        }
    };
    let table = fp.embed_table().clone();
    let joint = grounder(ds, cfg)?;
    let visuals = presented_visuals(utts, opts.misalign_seed)?;
    let mut out = Vec::with_capacity(utts.len());
    for ((u, nb), visual) in utts.iter().zip(nbest).zip(visuals) {
        if u.id != nb.id {
            return Err(Error::Input(format!(
                "N-best store does not line up with the utterances: {} vs {}",
                nb.id, u.id
            )));
        }
        let enc = fp.model.encode_audio_tensor(&fp.params, &u.audio, Some(&u.visual))?;
        let batch = batch_for(&table, joint.as_ref(), nb, cfg.n_hyps, visual)?;
        let streams = UttStreams {
            audio: None,
            visual: Some(visual),
            enc_audio: Some(&enc),
            hyp_embeds: Some(&batch.embeds),
            hyp_mask: Some(&batch.mask),
        };
        let decoded = beam_search(
            &bundle.model,
            &bundle.params,
            &streams,
            opts.beam,
            opts.n_best,
            max_len_for(u.words.len()),
        )?;
        out.push(to_record(&u.id, &decoded, &ds.vocab));
    }
    Ok(out)
}
