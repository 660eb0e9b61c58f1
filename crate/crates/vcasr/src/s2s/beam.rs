//! Beam decoding over the trained model. Scores are plain sums of token
//! log-probabilities with no length normalization; ties keep generation
//! order, which makes a width-1 beam reproduce greedy decoding bit for bit.

use crate::error::{Error, Result};
use crate::modelkit::{Graph, Params, Tape};
use crate::vocab;

use super::{DecodeState, Model, UttStreams};

/// One decoded hypothesis. `tokens` ends with the end marker unless the
/// search gave up at the length limit, in which case `truncated` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyp {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub truncated: bool,
}

impl Hyp {
    /// Tokens without the trailing end marker.
    pub fn content_tokens(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == vocab::EOS => rest,
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NBestList {
    pub hyps: Vec<Hyp>,
}

struct BeamEntry {
    tokens: Vec<u32>,
    score: f64,
    state: DecodeState,
    finished: bool,
    truncated: bool,
}

/// Tokens a decode step may emit: the end marker plus every real word id.
/// Padding, start and unknown markers are never produced.
fn allowed_tokens(vocab_size: usize) -> Vec<u32> {
    let mut v = Vec::with_capacity(vocab_size - vocab::N_SPECIALS as usize + 1);
    v.push(vocab::EOS);
    v.extend(vocab::N_SPECIALS..vocab_size as u32);
    v
}

/// Left-to-right beam search. Keeps `beam_width` live hypotheses, carries
/// finished ones in the pool, and stops when every hypothesis has finished
/// or has emitted `max_len` tokens. Returns the best `n_best` in score
/// order; equal scores keep the order the hypotheses were generated in.
pub fn beam_search(
    model: &Model,
    params: &Params,
    utt: &UttStreams<'_>,
    beam_width: usize,
    n_best: usize,
    max_len: usize,
) -> Result<NBestList> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if n_best == 0 || n_best > beam_width {
        return Err(Error::Config(format!(
            "n_best must be between 1 and the beam width ({beam_width}), got {n_best}"
        )));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let allowed = allowed_tokens(model.cfg.vocab);

    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, params);
    let streams = model.prepare(&mut g, utt)?;
    let init = model.init_state(&mut g, &streams);
    let mut pool = vec![BeamEntry {
        tokens: Vec::new(),
        score: 0.0,
        state: init,
        finished: false,
        truncated: false,
    }];

    // A candidate is either a finished hypothesis carried over or a live one
    // extended by a token; both are ranked together, and a stable sort keeps
    // generation order (carries first, then expansions in token order) on
    // score ties.
    struct Cand {
        score: f64,
        carry: Option<usize>,
        src: usize,
        tok: u32,
    }

    for _ in 0..max_len {
        if pool.iter().all(|b| b.finished) {
            break;
        }
        let mut carry: Vec<Option<BeamEntry>> = Vec::new();
        let mut live: Vec<(BeamEntry, DecodeState, Vec<f64>)> = Vec::new();
        for entry in pool {
            if entry.finished {
                carry.push(Some(entry));
                continue;
            }
            let prev = entry.tokens.last().copied().unwrap_or(vocab::SOS);
            let (logits, next) = model.decode_step(&mut g, &streams, prev, &entry.state)?;
            let logp = g.log_softmax_rows(logits);
            let row = g.value(logp).to_vec();
            live.push((entry, next, row));
        }
        let mut cands = Vec::with_capacity(carry.len() + live.len() * allowed.len());
        for (i, c) in carry.iter().enumerate() {
            cands.push(Cand { score: c.as_ref().unwrap().score, carry: Some(i), src: 0, tok: 0 });
        }
        for (s, (entry, _, row)) in live.iter().enumerate() {
            for &tok in &allowed {
                cands.push(Cand {
                    score: entry.score + row[tok as usize],
                    carry: None,
                    src: s,
                    tok,
                });
            }
        }
        cands.sort_by(|a, b| b.score.total_cmp(&a.score));
        cands.truncate(beam_width);
        pool = cands
            .into_iter()
            .map(|c| match c.carry {
                Some(i) => carry[i].take().expect("a carried hypothesis is ranked once"),
                None => {
                    let (entry, state, _) = &live[c.src];
                    let mut tokens = entry.tokens.clone();
                    tokens.push(c.tok);
                    BeamEntry {
                        tokens,
                        score: c.score,
                        state: state.clone(),
                        finished: c.tok == vocab::EOS,
                        truncated: false,
                    }
                }
            })
            .collect();
    }

    for entry in &mut pool {
        if !entry.finished {
            entry.truncated = true;
        }
    }
    pool.sort_by(|a, b| b.score.total_cmp(&a.score));
    let hyps = pool
        .into_iter()
        .take(n_best)
        .map(|b| Hyp { tokens: b.tokens, score: b.score, truncated: b.truncated })
        .collect();
    Ok(NBestList { hyps })
}

/// Greedy decode plus a per-step record of each attention head's total
/// weight (each entry should be 1 up to floating-point error).
pub fn greedy_decode_with_trace(
    model: &Model,
    params: &Params,
    utt: &UttStreams<'_>,
    max_len: usize,
) -> Result<(Hyp, Vec<Vec<f64>>)> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let allowed = allowed_tokens(model.cfg.vocab);
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, params);
    let streams = model.prepare(&mut g, utt)?;
    let mut state = model.init_state(&mut g, &streams);
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut alpha_sums = Vec::new();
    let mut finished = false;

    while tokens.len() < max_len && !finished {
        let prev = tokens.last().copied().unwrap_or(vocab::SOS);
        let (logits, next) = model.decode_step(&mut g, &streams, prev, &state)?;
        let logp = g.log_softmax_rows(logits);
        let row = g.value(logp);
        let mut best = allowed[0];
        let mut best_lp = row[allowed[0] as usize];
        for &tok in &allowed[1..] {
            if row[tok as usize] > best_lp {
                best_lp = row[tok as usize];
                best = tok;
            }
        }
        score += best_lp;
        tokens.push(best);
        alpha_sums.push(next.alphas.iter().map(|&a| g.value(a).iter().sum()).collect());
        state = next;
        finished = best == vocab::EOS;
    }
    Ok((Hyp { tokens, score, truncated: !finished }, alpha_sums))
}

pub fn greedy_decode(
    model: &Model,
    params: &Params,
    utt: &UttStreams<'_>,
    max_len: usize,
) -> Result<Hyp> {
    greedy_decode_with_trace(model, params, utt, max_len).map(|(h, _)| h)
}

/// Teacher-forced score of a fixed token sequence: the sum of the model's
/// log-probabilities along exactly that path. A hypothesis returned by the
/// beam replays to its reported score.
pub fn replay_score(
    model: &Model,
    params: &Params,
    utt: &UttStreams<'_>,
    tokens: &[u32],
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, params);
    let streams = model.prepare(&mut g, utt)?;
    let mut state = model.init_state(&mut g, &streams);
    let mut prev = vocab::SOS;
    let mut score = 0.0;
    for &tok in tokens {
        let (logits, next) = model.decode_step(&mut g, &streams, prev, &state)?;
        let logp = g.log_softmax_rows(logits);
        score += g.value(logp)[tok as usize];
        state = next;
        prev = tok;
    }
    Ok(score)
}
