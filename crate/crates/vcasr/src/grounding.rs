//! Visual grounding: a joint word/video embedding space, bilinear word-window
//! similarities, attention over video windows, and the per-word visual
//! contexts that get appended to hypothesis embeddings. Also selects the
//! maskable word positions (those with a strong visual anchor).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::synthdata::Lexicon;
use crate::tensor::Tensor;

/// A word is a mask candidate when some video window matches it this well.
pub const CANDIDATE_THRESHOLD: f64 = 3.5;

/// Similarity offset: keeps scores positive so they can be normalized
/// directly into attention weights without an exponential.
const SIMILARITY_OFFSET: f64 = 2.0;

/// Floor for non-positive similarities during normalization.
const SIMILARITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct VisualFeatures {
    pub utt_id: String,
    /// One row per video window, in concept space.
    pub feats: Tensor,
    pub window_size: usize,
    pub stride: usize,
}

/// Word and video embeddings living in one space: words map to their lexicon
/// concepts, raw video maps down through the (transposed) embedding that
/// generated it.
#[derive(Debug, Clone)]
pub struct JointEmbedding {
    concepts: HashMap<String, Vec<f64>>,
    projection: Tensor,
    pub d_embed: usize,
    pub window_size: usize,
    pub stride: usize,
}

impl JointEmbedding {
    pub fn new(lexicon: &Lexicon, window_size: usize, stride: usize) -> Result<JointEmbedding> {
        if window_size == 0 || stride == 0 || stride > window_size {
            return Err(Error::Config(format!(
                "bad window geometry: window {window_size}, stride {stride}"
            )));
        }
        let concepts = lexicon
            .words
            .iter()
            .map(|w| (w.word.clone(), w.concept.clone()))
            .collect();
        Ok(JointEmbedding {
            concepts,
            projection: lexicon.projection_tensor(),
            d_embed: lexicon.d_embed,
            window_size,
            stride,
        })
    }

    /// Embedding of a word; zero vector for out-of-lexicon words.
    pub fn embed_word(&self, word: &str) -> Vec<f64> {
        self.concepts.get(word).cloned().unwrap_or_else(|| vec![0.0; self.d_embed])
    }

    /// One row per word.
    pub fn embed_words<S: AsRef<str>>(&self, words: &[S]) -> Tensor {
        let mut out = Tensor::zeros(words.len(), self.d_embed);
        for (i, w) in words.iter().enumerate() {
            if let Some(c) = self.concepts.get(w.as_ref()) {
                out.row_mut(i).copy_from_slice(c);
            }
        }
        out
    }

    /// Mean-pool raw video over sliding windows, then project into concept
    /// space. Window t covers raw frames [t*stride, t*stride + window_size).
    pub fn extract_visual_features(&self, raw_video: &Tensor) -> Result<Tensor> {
        let t_raw = raw_video.rows();
        if t_raw < self.window_size {
            return Err(Error::Shape(format!(
                "{} raw video frames cannot fill a window of {}",
                t_raw, self.window_size
            )));
        }
        let t_out = (t_raw - self.window_size) / self.stride + 1;
        let mut means = Tensor::zeros(t_out, raw_video.cols());
        for t in 0..t_out {
            let start = t * self.stride;
            let row = means.row_mut(t);
            for f in start..start + self.window_size {
                for (dst, v) in row.iter_mut().zip(raw_video.row(f)) {
                    *dst += v;
                }
            }
            for v in row.iter_mut() {
                *v /= self.window_size as f64;
            }
        }
        means.matmul(&self.projection)
    }
}

/// Bilinear similarity between word embeddings (rows of `embeds`) and visual
/// features (rows of `feats`), shifted to be positive in the typical case.
pub fn similarity_matrix(embeds: &Tensor, feats: &Tensor) -> Result<Tensor> {
    if embeds.cols() != feats.cols() {
        return Err(Error::Shape(format!(
            "word embedding dim {} != visual feature dim {}",
            embeds.cols(),
            feats.cols()
        )));
    }
    let mut sim = Tensor::zeros(embeds.rows(), feats.rows());
    for i in 0..embeds.rows() {
        let e = embeds.row(i);
        for j in 0..feats.rows() {
            let dot: f64 = e.iter().zip(feats.row(j)).map(|(a, b)| a * b).sum();
            sim.set(i, j, dot + SIMILARITY_OFFSET);
        }
    }
    Ok(sim)
}

/// Normalize each similarity row into attention weights. Non-positive
/// entries (possible for adversarial inputs, not for rendered corpora) are
/// floored to a small positive value first.
pub fn attention_weights(sim: &Tensor) -> Tensor {
    let mut out = sim.clone();
    let mut floored = 0usize;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for v in row.iter_mut() {
            if *v <= 0.0 {
                *v = SIMILARITY_FLOOR;
                floored += 1;
            }
        }
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    if floored > 0 {
        log::warn!("floored {floored} non-positive similarity entries before normalizing");
    }
    out
}

/// Per-word visual context: attention-weighted average of the visual
/// features, one row per word row of `sim`.
pub fn vg_context(sim: &Tensor, feats: &Tensor) -> Result<Tensor> {
    if sim.cols() != feats.rows() {
        return Err(Error::Shape(format!(
            "similarity has {} windows but features have {}",
            sim.cols(),
            feats.rows()
        )));
    }
    attention_weights(sim).matmul(feats)
}

/// Word positions whose best window similarity clears the threshold,
/// with that best score. Order follows word position.
pub fn select_mask_candidates(sim: &Tensor, threshold: f64) -> Vec<(usize, f64)> {
    (0..sim.rows())
        .filter_map(|i| {
            let best = sim.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (best > threshold).then_some((i, best))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use crate::synthdata::{generate_corpus, tiny_config};
    use rand::Rng;

    #[test]
    fn unit_vectors_score_three() {
        let e = Tensor::row_vector(vec![1.0, 0.0]);
        let v = Tensor::row_vector(vec![1.0, 0.0]);
        let sim = similarity_matrix(&e, &v).unwrap();
        assert_eq!(sim.get(0, 0), 3.0);
        let v_orth = Tensor::row_vector(vec![0.0, 1.0]);
        assert_eq!(similarity_matrix(&e, &v_orth).unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn similarity_is_affine_in_feature_scale() {
        let mut rng = seeds::rng(5, "t");
        let e = Tensor::from_fn(3, 4, |_, _| rng.gen::<f64>() - 0.5);
        let v = Tensor::from_fn(6, 4, |_, _| rng.gen::<f64>() - 0.5);
        let lam = 2.5;
        let v_scaled = Tensor::from_fn(6, 4, |r, c| lam * v.get(r, c));
        let s = similarity_matrix(&e, &v).unwrap();
        let s_scaled = similarity_matrix(&e, &v_scaled).unwrap();
        for i in 0..3 {
            for j in 0..6 {
                let want = lam * (s.get(i, j) - 2.0) + 2.0;
                assert!((s_scaled.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = seeds::rng(6, "t");
        let sim = Tensor::from_fn(4, 7, |_, _| rng.gen::<f64>() * 4.0 - 1.0);
        let alpha = attention_weights(&sim);
        for i in 0..4 {
            let row = alpha.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&a| a > 0.0));
        }
    }

    #[test]
    fn contexts_stay_inside_the_feature_hull() {
        let mut rng = seeds::rng(7, "t");
        let e = Tensor::from_fn(5, 3, |_, _| rng.gen::<f64>());
        let v = Tensor::from_fn(8, 3, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let sim = similarity_matrix(&e, &v).unwrap();
        let ctx = vg_context(&sim, &v).unwrap();
        for d in 0..3 {
            let lo = (0..8).map(|j| v.get(j, d)).fold(f64::INFINITY, f64::min);
            let hi = (0..8).map(|j| v.get(j, d)).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..5 {
                let c = ctx.get(i, d);
                assert!(c >= lo - 1e-12 && c <= hi + 1e-12, "ctx[{i},{d}] = {c}");
            }
        }
    }

    #[test]
    fn single_window_context_is_that_window() {
        let e = Tensor::from_fn(2, 3, |r, c| (r + c) as f64);
        let v = Tensor::row_vector(vec![0.5, -1.0, 2.0]);
        let sim = similarity_matrix(&e, &v).unwrap();
        let ctx = vg_context(&sim, &v).unwrap();
        for i in 0..2 {
            assert_eq!(ctx.row(i), v.row(0));
        }
    }

    #[test]
    fn window_extraction_means_then_projects() {
        let corpus = generate_corpus(&tiny_config()).unwrap();
        let je = JointEmbedding::new(&corpus.lexicon, 4, 2).unwrap();
        let utt = &corpus.train[0];
        let feats = je.extract_visual_features(&utt.raw_video).unwrap();
        let t_raw = utt.raw_video.rows();
        assert_eq!(feats.rows(), (t_raw - 4) / 2 + 1);
        assert_eq!(feats.cols(), corpus.lexicon.d_embed);

        // Window 1 covers raw frames 2..6 by hand.
        let mut mean = vec![0.0; corpus.lexicon.d_raw_video];
        for f in 2..6 {
            for (m, v) in mean.iter_mut().zip(utt.raw_video.row(f)) {
                *m += v / 4.0;
            }
        }
        let by_hand = Tensor::row_vector(mean)
            .matmul(&corpus.lexicon.projection_tensor())
            .unwrap();
        for d in 0..feats.cols() {
            assert!((feats.get(1, d) - by_hand.get(0, d)).abs() < 1e-12);
        }

        let short = Tensor::zeros(3, corpus.lexicon.d_raw_video);
        assert!(je.extract_visual_features(&short).is_err());
    }

    #[test]
    fn noiseless_content_windows_project_back_to_the_concept() {
        let cfg = crate::config::SynthConfig {
            sigma_audio: 0.0,
            sigma_video: 0.0,
            ..tiny_config()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let je = JointEmbedding::new(&corpus.lexicon, 4, 2).unwrap();
        let utt = &corpus.train[0];
        let feats = je.extract_visual_features(&utt.raw_video).unwrap();
        for (i, w) in utt.words.iter().enumerate() {
            let entry = corpus.lexicon.find(w).unwrap();
            if !entry.is_content {
                continue;
            }
            // Word i owns raw frames [4i, 4i+4) == window 2i exactly.
            let window = 2 * i;
            for d in 0..feats.cols() {
                assert!((feats.get(window, d) - entry.concept[d]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn candidates_are_exactly_the_content_positions() {
        let corpus = generate_corpus(&tiny_config()).unwrap();
        let je = JointEmbedding::new(&corpus.lexicon, 4, 2).unwrap();
        for utt in corpus.train.iter().take(25) {
            let feats = je.extract_visual_features(&utt.raw_video).unwrap();
            let embeds = je.embed_words(&utt.words);
            let sim = similarity_matrix(&embeds, &feats).unwrap();
            let cands = select_mask_candidates(&sim, CANDIDATE_THRESHOLD);
            let got: Vec<usize> = cands.iter().map(|c| c.0).collect();
            let want: Vec<usize> = utt
                .words
                .iter()
                .enumerate()
                .filter(|(_, w)| corpus.lexicon.find(w).unwrap().is_content)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(got, want, "utt {}", utt.id);
            for &(_, score) in &cands {
                assert!(score > CANDIDATE_THRESHOLD && score < 4.5);
            }
        }
    }

    #[test]
    fn unknown_words_embed_to_zero() {
        let corpus = generate_corpus(&tiny_config()).unwrap();
        let je = JointEmbedding::new(&corpus.lexicon, 4, 2).unwrap();
        assert!(je.embed_word("nope").iter().all(|&v| v == 0.0));
        let embeds = je.embed_words(&["c00", "nope"]);
        assert!(embeds.row(1).iter().all(|&v| v == 0.0));
        assert_eq!(embeds.row(0), je.embed_word("c00").as_slice());
    }

    #[test]
    fn bad_geometry_is_rejected() {
        let corpus = generate_corpus(&tiny_config()).unwrap();
        assert!(JointEmbedding::new(&corpus.lexicon, 2, 4).is_err());
        assert!(JointEmbedding::new(&corpus.lexicon, 0, 1).is_err());
    }
}
