//! Word-level scoring: edit alignments, pooled WER, oracle WER, masked-word
//! recovery rate, and relative-improvement arithmetic.
//!
//! All comparisons are case-insensitive with surrounding whitespace stripped.
//! WER pools over the corpus: 100 * (total edit cost) / (total reference
//! words), not a mean of per-utterance rates.

use std::borrow::Cow;

use crate::{Error, Result};

/// One aligned position pair in an edit alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    /// Reference word r equals hypothesis word h.
    Match { r: usize, h: usize },
    /// Reference word r was recognized as the different hypothesis word h.
    Substitute { r: usize, h: usize },
    /// Reference word r has no hypothesis counterpart.
    Delete { r: usize },
    /// Hypothesis word h has no reference counterpart.
    Insert { h: usize },
}

/// Minimal-cost word alignment between a reference and a hypothesis.
///
/// Every reference and hypothesis position appears in exactly one op, and
/// `cost()` is the Levenshtein distance under unit costs.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub ops: Vec<EditOp>,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl Alignment {
    pub fn cost(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Whether reference position r is aligned as an exact match.
    pub fn ref_matched(&self, r: usize) -> bool {
        self.ops
            .iter()
            .any(|op| matches!(op, EditOp::Match { r: rr, .. } if *rr == r))
    }
}

/// Split a transcript into words for scoring.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

fn norm(w: &str) -> Cow<'_, str> {
    let t = w.trim();
    if t.chars().any(char::is_uppercase) {
        Cow::Owned(t.to_lowercase())
    } else {
        Cow::Borrowed(t)
    }
}

/// Minimal-cost alignment with unit costs. When several alignments share the
/// minimal cost, the backtrace prefers match > substitution > deletion >
/// insertion at each step, so the result is deterministic.
pub fn edit_alignment<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Alignment {
    let r: Vec<Cow<'_, str>> = refs.iter().map(|w| norm(w.as_ref())).collect();
    let h: Vec<Cow<'_, str>> = hyps.iter().map(|w| norm(w.as_ref())).collect();
    let (n, m) = (r.len(), h.len());
    // cost[i * (m + 1) + j] = distance between the first i reference words
    // and the first j hypothesis words.
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    let mut cost = vec![0usize; (n + 1) * (m + 1)];
    for i in 0..=n {
        cost[idx(i, 0)] = i;
    }
    for j in 0..=m {
        cost[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[idx(i - 1, j - 1)] + usize::from(r[i - 1] != h[j - 1]);
            let del = cost[idx(i - 1, j)] + 1;
            let ins = cost[idx(i, j - 1)] + 1;
            cost[idx(i, j)] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut subs, mut dels, mut inss) = (0usize, 0usize, 0usize);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let c = cost[idx(i, j)];
        if i > 0 && j > 0 && r[i - 1] == h[j - 1] && cost[idx(i - 1, j - 1)] == c {
            ops.push(EditOp::Match { r: i - 1, h: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && cost[idx(i - 1, j - 1)] + 1 == c && r[i - 1] != h[j - 1] {
            ops.push(EditOp::Substitute { r: i - 1, h: j - 1 });
            subs += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && cost[idx(i - 1, j)] + 1 == c {
            ops.push(EditOp::Delete { r: i - 1 });
            dels += 1;
            i -= 1;
        } else {
            ops.push(EditOp::Insert { h: j - 1 });
            inss += 1;
            j -= 1;
        }
    }
    ops.reverse();
    Alignment { ops, substitutions: subs, deletions: dels, insertions: inss }
}

/// Corpus-pooled WER with per-type error counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerStats {
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

/// Masked-word recovery with its numerator and denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryStats {
    pub rate: f64,
    pub recovered: usize,
    pub masked: usize,
}

/// Scores for one model/condition row in an eval report. The optional fields
/// apply only where the inputs exist (N-best lists, masked corpora, a
/// baseline row to compare against).
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub wer: WerStats,
    pub oracle_wer: Option<f64>,
    pub recovery: Option<RecoveryStats>,
    /// Relative improvements vs a baseline row: WER, oracle WER (lower is
    /// better), and recovery rate (higher is better).
    pub rel_wer: Option<f64>,
    pub rel_oracle: Option<f64>,
    pub rel_recovery: Option<f64>,
}

/// Pooled corpus WER over paired reference/hypothesis word lists.
pub fn wer<R: AsRef<str>, H: AsRef<str>>(refs: &[Vec<R>], hyps: &[Vec<H>]) -> Result<WerStats> {
    if refs.len() != hyps.len() {
        return Err(Error::Input(format!(
            "wer needs paired corpora, got {} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::Input("wer on an empty reference corpus".into()));
    }
    let mut stats = WerStats { wer: 0.0, substitutions: 0, deletions: 0, insertions: 0, ref_words: 0 };
    for (r, h) in refs.iter().zip(hyps) {
        let a = edit_alignment(r, h);
        stats.substitutions += a.substitutions;
        stats.deletions += a.deletions;
        stats.insertions += a.insertions;
        stats.ref_words += r.len();
    }
    if stats.ref_words == 0 {
        return Err(Error::Input("wer reference corpus has no words".into()));
    }
    let cost = stats.substitutions + stats.deletions + stats.insertions;
    stats.wer = 100.0 * cost as f64 / stats.ref_words as f64;
    Ok(stats)
}

/// Oracle WER: per utterance the minimum edit cost over its N-best
/// hypotheses, pooled over reference words.
pub fn oracle_wer<R: AsRef<str>, H: AsRef<str>>(
    refs: &[Vec<R>],
    nbests: &[Vec<Vec<H>>],
) -> Result<f64> {
    if refs.len() != nbests.len() {
        return Err(Error::Input(format!(
            "oracle_wer needs paired corpora, got {} references vs {} N-best lists",
            refs.len(),
            nbests.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::Input("oracle_wer on an empty reference corpus".into()));
    }
    let mut total_cost = 0usize;
    let mut total_words = 0usize;
    for (u, (r, hyps)) in refs.iter().zip(nbests).enumerate() {
        if hyps.is_empty() {
            return Err(Error::Input(format!("utterance {u} has an empty N-best list")));
        }
        let best = hyps.iter().map(|h| edit_alignment(r, h).cost()).min().unwrap();
        total_cost += best;
        total_words += r.len();
    }
    if total_words == 0 {
        return Err(Error::Input("oracle_wer reference corpus has no words".into()));
    }
    Ok(100.0 * total_cost as f64 / total_words as f64)
}

/// Recovery rate of masked reference words: a masked word counts as
/// recovered iff the minimal alignment maps it to an identical hypothesis
/// word (a match op at that reference position). A bag-of-words rule would
/// over-credit repeated words, so alignment decides.
pub fn recovery_rate<R: AsRef<str>, H: AsRef<str>>(
    refs: &[Vec<R>],
    hyps: &[Vec<H>],
    mask_indices: &[Vec<usize>],
) -> Result<RecoveryStats> {
    if refs.len() != hyps.len() || refs.len() != mask_indices.len() {
        return Err(Error::Input(format!(
            "recovery_rate needs aligned corpora, got {} refs, {} hyps, {} mask lists",
            refs.len(),
            hyps.len(),
            mask_indices.len()
        )));
    }
    let mut recovered = 0usize;
    let mut masked = 0usize;
    for (u, ((r, h), masks)) in refs.iter().zip(hyps).zip(mask_indices).enumerate() {
        if masks.is_empty() {
            continue;
        }
        let a = edit_alignment(r, h);
        for &pos in masks {
            if pos >= r.len() {
                return Err(Error::Input(format!(
                    "utterance {u} masks position {pos} but has only {} words",
                    r.len()
                )));
            }
            masked += 1;
            if a.ref_matched(pos) {
                recovered += 1;
            }
        }
    }
    if masked == 0 {
        return Err(Error::Input("recovery_rate with zero masked words".into()));
    }
    Ok(RecoveryStats { rate: 100.0 * recovered as f64 / masked as f64, recovered, masked })
}

/// Relative improvement of a quantity where lower is better (WER):
/// 100 * (baseline - improved) / baseline.
pub fn relative_improvement(baseline: f64, improved: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Input(format!(
            "relative improvement needs a positive baseline, got {baseline}"
        )));
    }
    Ok(100.0 * (baseline - improved) / baseline)
}

/// Relative improvement of a rate where higher is better (recovery rate):
/// 100 * (improved - baseline) / baseline.
pub fn relative_rate_improvement(baseline: f64, improved: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Input(format!(
            "relative improvement needs a positive baseline, got {baseline}"
        )));
    }
    Ok(100.0 * (improved - baseline) / baseline)
}
