//! The sequence-to-sequence recognizer. One model type covers all four
//! configurations: audio-only, audio-only with a visual bias on the input
//! frames, multi-stream audio+video, and the deliberation second pass that
//! re-decodes over a frozen first-pass encoding plus encoded hypotheses.
//! Every configuration keeps the same decoder: two stacked GRU cells, one
//! location-aware attention head per stream, and a context fusion block.

pub mod attention;
pub mod beam;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, ModelKind, TrainConfig};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::modelkit::{
    clip_global_norm, label_smoothed_loss, xavier, Adam, AdamConfig, Checkpoint, DecoderCore,
    EncoderStack, GradStore, Graph, ParamId, Params, Tape, Var,
};
use crate::seeds;
use crate::tensor::Tensor;
use crate::vocab;
use attention::{AttentionHead, PreparedStream};

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    audio_enc: EncoderStack,
    audio_proj: ParamId,
    video_enc: Option<EncoderStack>,
    video_proj: Option<ParamId>,
    hyp_enc: Option<EncoderStack>,
    hyp_proj: Option<ParamId>,
    /// Visual bias projection (d_visual x d_audio), zero at init so a warm
    /// start from an audio-only checkpoint reproduces it exactly.
    vat_proj: Option<ParamId>,
    heads: Vec<AttentionHead>,
    fusion: Fusion,
    dec: DecoderCore,
}

/// Per-utterance input streams, borrowed from wherever the caller keeps them.
/// Which fields must be present depends on the model kind.
#[derive(Debug, Clone, Copy, Default)]
pub struct UttStreams<'a> {
    /// Audio frames, T_a x d_audio.
    pub audio: Option<&'a Tensor>,
    /// Visual feature windows, T_v x d_visual.
    pub visual: Option<&'a Tensor>,
    /// Frozen first-pass audio encoding, T_a x d_enc_audio.
    pub enc_audio: Option<&'a Tensor>,
    /// One embedding matrix per hypothesis, each padded_len x hyp width.
    pub hyp_embeds: Option<&'a [Tensor]>,
    /// Validity over the concatenated hypothesis stream; padding gets `false`.
    pub hyp_mask: Option<&'a [bool]>,
}

impl Model {
    pub fn new(p: &mut Params, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
        cfg.validate()?;
        let cfg = cfg.clone();
        let needs_video = cfg.use_video;
        let is_delib = cfg.kind == ModelKind::Deliberation;

        // The second pass consumes a precomputed encoding, so its own audio
        // branch is just a width projection (an empty encoder is identity).
        let (audio_in, audio_layers) = if is_delib {
            (cfg.d_enc_audio, 0)
        } else {
            (cfg.d_audio, cfg.audio_layers)
        };
        let audio_enc = EncoderStack::new(p, "audio_enc", audio_in, cfg.hidden, audio_layers, rng);
        let audio_proj =
            p.add("audio_proj", xavier(audio_enc.out_width(audio_in), cfg.d_model, rng));

        let (video_enc, video_proj) = if needs_video {
            let enc = EncoderStack::new(p, "video_enc", cfg.d_visual, cfg.hidden, cfg.video_layers, rng);
            let proj = p.add("video_proj", xavier(enc.out_width(cfg.d_visual), cfg.d_model, rng));
            (Some(enc), Some(proj))
        } else {
            (None, None)
        };

        let (hyp_enc, hyp_proj) = if is_delib {
            let d_in = cfg.d_first_embed + if cfg.vg { cfg.d_visual } else { 0 };
            let enc = EncoderStack::new(p, "hyp_enc", d_in, cfg.hidden, cfg.hyp_layers, rng);
            let proj = p.add("hyp_proj", xavier(enc.out_width(d_in), cfg.d_model, rng));
            (Some(enc), Some(proj))
        } else {
            (None, None)
        };

        let mut head_names = vec!["attn.audio"];
        if needs_video {
            head_names.push("attn.video");
        }
        if is_delib {
            head_names.push("attn.hyp");
        }
        let heads = head_names
            .iter()
            .map(|name| {
                AttentionHead::new(
                    p,
                    name,
                    cfg.d_model,
                    cfg.d_model,
                    cfg.attn_dim,
                    cfg.attn_filters,
                    cfg.attn_kernel,
                    rng,
                )
            })
            .collect::<Vec<_>>();

        let fusion = Fusion::new(p, "", cfg.fusion, heads.len(), cfg.d_model, rng);
        let dec = DecoderCore::new(p, "dec", cfg.vocab, cfg.d_model, rng);
        let vat_proj = (cfg.kind == ModelKind::Vat)
            .then(|| p.add("vat.proj", Tensor::zeros(cfg.d_visual, cfg.d_audio)));

        Ok(Model {
            cfg,
            audio_enc,
            audio_proj,
            video_enc,
            video_proj,
            hyp_enc,
            hyp_proj,
            vat_proj,
            heads,
            fusion,
            dec,
        })
    }

    pub fn n_streams(&self) -> usize {
        self.heads.len()
    }

    fn require<'a>(t: Option<&'a Tensor>, what: &str) -> Result<&'a Tensor> {
        t.ok_or_else(|| Error::Input(format!("model needs {what} for this utterance")))
    }

    /// The audio branch: either the owned encoder over raw frames (with the
    /// visual bias shift for the adapted variant) or, for the second pass,
    /// the precomputed frozen first-pass encoding. Width precedes the
    /// d_model projection.
    fn encode_audio(&self, g: &mut Graph<'_>, utt: &UttStreams<'_>) -> Result<Var> {
        if self.cfg.kind == ModelKind::Deliberation {
            let enc = Self::require(utt.enc_audio, "a first-pass audio encoding")?;
            if enc.cols() != self.cfg.d_enc_audio {
                return Err(Error::Shape(format!(
                    "first-pass encoding is {} wide, model expects {}",
                    enc.cols(),
                    self.cfg.d_enc_audio
                )));
            }
            Ok(g.input(enc))
        } else {
            let audio = Self::require(utt.audio, "audio frames")?;
            if audio.cols() != self.cfg.d_audio {
                return Err(Error::Shape(format!(
                    "audio frames are {} wide, model expects {}",
                    audio.cols(),
                    self.cfg.d_audio
                )));
            }
            let mut a = g.input(audio);
            if let Some(proj) = self.vat_proj {
                let visual = Self::require(utt.visual, "visual features")?;
                let mut mean = vec![0.0; visual.cols()];
                for r in 0..visual.rows() {
                    for (c, m) in mean.iter_mut().enumerate() {
                        *m += visual.get(r, c);
                    }
                }
                for m in &mut mean {
                    *m /= visual.rows().max(1) as f64;
                }
                let vm = g.input_row(&mean);
                let pr = g.param(proj);
                let shift = g.matmul(vm, pr);
                a = g.add_row(a, shift);
            }
            Ok(self.audio_enc.encode(g, a))
        }
    }

    /// Encode one utterance's audio and hand the frames back as a plain
    /// tensor. This is the frozen encoding a second pass attends over.
    pub fn encode_audio_tensor(
        &self,
        params: &Params,
        audio: &Tensor,
        visual: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, params);
        let utt = UttStreams { audio: Some(audio), visual, ..Default::default() };
        let enc = self.encode_audio(&mut g, &utt)?;
        Ok(g.read_tensor(enc))
    }

    /// Width of the encoded audio frames this model produces.
    pub fn encoded_audio_width(&self) -> usize {
        let d_in = if self.cfg.kind == ModelKind::Deliberation {
            self.cfg.d_enc_audio
        } else {
            self.cfg.d_audio
        };
        self.audio_enc.out_width(d_in)
    }

    /// Encode every input stream of one utterance and prepare it for
    /// attention. Streams are always ordered audio, video, hypotheses.
    pub fn prepare(&self, g: &mut Graph<'_>, utt: &UttStreams<'_>) -> Result<Vec<PreparedStream>> {
        let mut streams = Vec::with_capacity(self.heads.len());
        let mut head = 0;

        let audio_keys = self.encode_audio(g, utt)?;
        let ap = g.param(self.audio_proj);
        let audio_keys = g.matmul(audio_keys, ap);
        streams.push(PreparedStream::new(g, &self.heads[head], audio_keys, None));
        head += 1;

        if let (Some(enc), Some(proj)) = (&self.video_enc, self.video_proj) {
            let visual = Self::require(utt.visual, "visual features")?;
            if visual.cols() != self.cfg.d_visual {
                return Err(Error::Shape(format!(
                    "visual features are {} wide, model expects {}",
                    visual.cols(),
                    self.cfg.d_visual
                )));
            }
            let v = g.input(visual);
            let v = enc.encode(g, v);
            let vp = g.param(proj);
            let keys = g.matmul(v, vp);
            streams.push(PreparedStream::new(g, &self.heads[head], keys, None));
            head += 1;
        }

        if let (Some(enc), Some(proj)) = (&self.hyp_enc, self.hyp_proj) {
            let hyps = utt
                .hyp_embeds
                .ok_or_else(|| Error::Input("model needs hypothesis embeddings".into()))?;
            if hyps.len() != self.cfg.n_hyps {
                return Err(Error::Shape(format!(
                    "got {} hypotheses, model expects {}",
                    hyps.len(),
                    self.cfg.n_hyps
                )));
            }
            let want = self.cfg.d_first_embed + if self.cfg.vg { self.cfg.d_visual } else { 0 };
            // Each hypothesis is encoded independently and the encodings are
            // concatenated in time, so reordering hypotheses reorders whole
            // stream blocks without changing any value inside them.
            let mut encoded = Vec::with_capacity(hyps.len());
            for hyp in hyps {
                if hyp.cols() != want {
                    return Err(Error::Shape(format!(
                        "hypothesis embeddings are {} wide, model expects {want}",
                        hyp.cols()
                    )));
                }
                let h = g.input(hyp);
                encoded.push(enc.encode(g, h));
            }
            let h = if encoded.len() == 1 { encoded[0] } else { g.concat_rows(&encoded) };
            let hp = g.param(proj);
            let keys = g.matmul(h, hp);
            streams.push(PreparedStream::new(g, &self.heads[head], keys, utt.hyp_mask));
        }

        Ok(streams)
    }

    pub fn init_state(&self, g: &mut Graph<'_>, streams: &[PreparedStream]) -> DecodeState {
        DecodeState {
            h1: g.zeros(1, self.cfg.d_model),
            h2: g.zeros(1, self.cfg.d_model),
            fused: g.zeros(1, self.cfg.d_model),
            alphas: streams.iter().map(|s| s.alpha0).collect(),
        }
    }

    /// Advance the decoder one step: consume the previous token, refresh all
    /// attention heads, and fuse the contexts into the next output state.
    fn advance(
        &self,
        g: &mut Graph<'_>,
        streams: &[PreparedStream],
        prev_token: u32,
        state: &DecodeState,
    ) -> Result<DecodeState> {
        let table = g.param(self.dec.embed);
        let emb = g.embed(table, &[prev_token]);
        let x = g.concat_cols(&[emb, state.fused]);
        let h1 = self.dec.gru1.step(g, x, state.h1);
        let h2 = self.dec.gru2.step(g, h1, state.h2);
        let mut contexts = Vec::with_capacity(streams.len());
        let mut alphas = Vec::with_capacity(streams.len());
        for (i, s) in streams.iter().enumerate() {
            let (ctx, alpha) = s.attend(g, &self.heads[i], h2, state.alphas[i]);
            contexts.push(ctx);
            alphas.push(alpha);
        }
        let fused = self.fusion.fuse(g, &contexts, h2)?;
        Ok(DecodeState { h1, h2, fused, alphas })
    }

    /// One decoding step returning the (pre-softmax) logits over the vocab.
    pub fn decode_step(
        &self,
        g: &mut Graph<'_>,
        streams: &[PreparedStream],
        prev_token: u32,
        state: &DecodeState,
    ) -> Result<(Var, DecodeState)> {
        let next = self.advance(g, streams, prev_token, state)?;
        let out_w = g.param(self.dec.out_w);
        let out_b = g.param(self.dec.out_b);
        let logits = g.matmul(next.fused, out_w);
        let logits = g.add_row(logits, out_b);
        Ok((logits, next))
    }

    /// Teacher-forced label-smoothed loss for one utterance. Returns the mean
    /// per-token loss and the token count (targets plus the end marker).
    pub fn utterance_loss(
        &self,
        g: &mut Graph<'_>,
        streams: &[PreparedStream],
        targets: &[u32],
        smoothing: f64,
    ) -> Result<(Var, usize)> {
        let mut state = self.init_state(g, streams);
        let mut fused_rows = Vec::with_capacity(targets.len() + 1);
        let mut prev = vocab::SOS;
        for i in 0..=targets.len() {
            state = self.advance(g, streams, prev, &state)?;
            fused_rows.push(state.fused);
            if i < targets.len() {
                prev = targets[i];
            }
        }
        let fmat =
            if fused_rows.len() == 1 { fused_rows[0] } else { g.concat_rows(&fused_rows) };
        let out_w = g.param(self.dec.out_w);
        let out_b = g.param(self.dec.out_b);
        let logits = g.matmul(fmat, out_w);
        let logits = g.add_row(logits, out_b);
        let mut step_targets = targets.to_vec();
        step_targets.push(vocab::EOS);
        let active = vec![true; step_targets.len()];
        let loss = label_smoothed_loss(g, logits, &step_targets, &active, smoothing)?;
        Ok((loss, step_targets.len()))
    }
}

/// Decoder state threaded between steps.
#[derive(Debug, Clone)]
pub struct DecodeState {
    h1: Var,
    h2: Var,
    /// Fused context/output vector; the output projection reads this row.
    pub fused: Var,
    /// One attention distribution per stream, audio first.
    pub alphas: Vec<Var>,
}

/// Load every tensor of `ckpt` into `params` by name, leaving parameters the
/// checkpoint does not mention at their initial values. Used to fine-tune a
/// model that extends another one (the visual bias variant starts from an
/// audio-only checkpoint this way).
pub fn warm_start(params: &mut Params, ckpt: &Checkpoint) -> Result<usize> {
    for (name, t) in &ckpt.tensors {
        params.load_tensor(name, t.clone())?;
    }
    Ok(ckpt.tensors.len())
}

/// One training utterance with every stream the model kind may need.
#[derive(Debug, Clone)]
pub struct TrainUtt {
    pub id: String,
    pub targets: Vec<u32>,
    pub audio: Option<Tensor>,
    pub visual: Option<Tensor>,
    pub enc_audio: Option<Tensor>,
    pub hyp_embeds: Option<Vec<Tensor>>,
    pub hyp_mask: Option<Vec<bool>>,
}

impl TrainUtt {
    pub fn streams(&self) -> UttStreams<'_> {
        UttStreams {
            audio: self.audio.as_ref(),
            visual: self.visual.as_ref(),
            enc_audio: self.enc_audio.as_ref(),
            hyp_embeds: self.hyp_embeds.as_deref(),
            hyp_mask: self.hyp_mask.as_deref(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// Pooled (token-weighted) training loss per step.
    pub step_losses: Vec<f64>,
    /// (step, pooled dev loss) at every evaluation point.
    pub dev_losses: Vec<(u64, f64)>,
    pub best_step: u64,
    pub best_dev: f64,
}

/// Pooled token-weighted teacher-forced loss over a whole split.
pub fn pooled_loss(model: &Model, params: &Params, utts: &[TrainUtt], smoothing: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    let mut tape = Tape::new();
    for utt in utts {
        let mut g = Graph::new(&mut tape, params);
        let streams = model.prepare(&mut g, &utt.streams())?;
        let (loss, m) = model.utterance_loss(&mut g, &streams, &utt.targets, smoothing)?;
        total += g.value(loss)[0] * m as f64;
        tokens += m;
    }
    if tokens == 0 {
        return Err(Error::Input("cannot evaluate a loss over zero utterances".into()));
    }
    Ok(total / tokens as f64)
}

/// Minibatch training with Adam, gradient clipping, a halving learning-rate
/// schedule and periodic dev evaluation. Batches are drawn with replacement
/// from a seeded stream, so a fixed seed reproduces the run exactly. The
/// parameters that scored the best dev loss are restored before returning.
pub fn run_training(
    model: &Model,
    params: &mut Params,
    train: &[TrainUtt],
    dev: &[TrainUtt],
    tcfg: &TrainConfig,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut adam = Adam::new(
        params,
        AdamConfig { lr0: tcfg.lr0, halving_period: tcfg.halving_period, ..Default::default() },
    );
    let mut grads = GradStore::zeros_like(params);
    let mut rng = seeds::rng(tcfg.seed, "batching");
    let mut log = TrainLog::default();
    let mut best: Option<(f64, u64, Vec<Tensor>)> = None;
    let mut tape = Tape::new();

    for step in 0..tcfg.steps {
        grads.zero();
        let batch: Vec<usize> =
            (0..tcfg.batch_size).map(|_| rng.gen_range(0..train.len())).collect();
        let m_tot: usize = batch.iter().map(|&i| train[i].targets.len() + 1).sum();
        let mut pooled = 0.0;
        for &i in &batch {
            let utt = &train[i];
            let mut g = Graph::new(&mut tape, params);
            let streams = model.prepare(&mut g, &utt.streams())?;
            let (loss, m) =
                model.utterance_loss(&mut g, &streams, &utt.targets, tcfg.label_smoothing)?;
            let lv = g.value(loss)[0];
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {step} on utterance {}",
                    utt.id
                )));
            }
            pooled += lv * m as f64;
            g.backward(loss, m as f64 / m_tot as f64, &mut grads);
        }
        log.step_losses.push(pooled / m_tot as f64);
        clip_global_norm(&mut grads, tcfg.clip_norm);
        adam.step(params, &grads)?;

        let at_eval = (step + 1) % tcfg.dev_every == 0 || step + 1 == tcfg.steps;
        if at_eval && !dev.is_empty() {
            let d = pooled_loss(model, params, dev, tcfg.label_smoothing)?;
            log.dev_losses.push((step + 1, d));
            if best.as_ref().map_or(true, |(b, _, _)| d < *b) {
                best = Some((d, step + 1, params.snapshot()));
            }
        }
    }
    if let Some((d, step, snap)) = best {
        params.restore(&snap);
        log.best_dev = d;
        log.best_step = step;
    }
    Ok(log)
}
