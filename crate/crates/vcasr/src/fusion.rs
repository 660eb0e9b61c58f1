//! Context fusion: combines one or more attention context vectors with the
//! decoder output, either by a learned linear map over the concatenated
//! contexts (cat) or by per-context sigmoid gates (gate). Both variants are
//! residual around the decoder output, so a freshly initialized fusion block
//! starts out close to a plain attention decoder.
//!
//! Also hosts the video-adapted-training helper that shifts every audio frame
//! by a projected utterance-level visual mean.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::modelkit::{xavier, Graph, ParamId, Params, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Cat,
    Gate,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cat" => Ok(FusionMode::Cat),
            "gate" => Ok(FusionMode::Gate),
            other => Err(Error::Config(format!("unknown fusion mode `{other}` (cat|gate)"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Cat => "cat",
            FusionMode::Gate => "gate",
        })
    }
}

/// Fusion block over `k` context streams of width `d` each.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub mode: FusionMode,
    pub k: usize,
    pub d: usize,
    cat_w: Option<ParamId>,
    cat_b: Option<ParamId>,
    /// One (W, b) pair per context stream, in stream order.
    gate: Vec<(ParamId, ParamId)>,
}

impl Fusion {
    pub fn new(
        p: &mut Params,
        prefix: &str,
        mode: FusionMode,
        k: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Fusion {
        assert!(k >= 1 && d >= 1, "fusion needs at least one stream and one dim");
        let mut f = Fusion { mode, k, d, cat_w: None, cat_b: None, gate: Vec::new() };
        match mode {
            FusionMode::Cat => {
                f.cat_w = Some(p.add(format!("{prefix}fusion.cat.W"), xavier(k * d, d, rng)));
                f.cat_b = Some(p.add(format!("{prefix}fusion.cat.b"), Tensor::zeros(1, d)));
            }
            FusionMode::Gate => {
                for c in 1..=k {
                    let w = p.add(
                        format!("{prefix}fusion.gate.{c}.W"),
                        xavier((k + 1) * d, d, rng),
                    );
                    let b = p.add(format!("{prefix}fusion.gate.{c}.b"), Tensor::zeros(1, d));
                    f.gate.push((w, b));
                }
            }
        }
        f
    }

    /// Fuse row-vector contexts (each 1 x d) with the decoder output (1 x d).
    pub fn fuse(&self, g: &mut Graph<'_>, contexts: &[Var], dec_out: Var) -> Result<Var> {
        if contexts.len() != self.k {
            return Err(Error::Shape(format!(
                "fusion built for {} contexts, got {}",
                self.k,
                contexts.len()
            )));
        }
        match self.mode {
            FusionMode::Cat => {
                let cat = if contexts.len() == 1 {
                    contexts[0]
                } else {
                    g.concat_cols(contexts)
                };
                let w = g.param(self.cat_w.unwrap());
                let b = g.param(self.cat_b.unwrap());
                let mixed = g.matmul(cat, w);
                let mixed = g.add_row(mixed, b);
                Ok(g.add(mixed, dec_out))
            }
            FusionMode::Gate => {
                let mut pieces = contexts.to_vec();
                pieces.push(dec_out);
                let full = g.concat_cols(&pieces);
                let mut out = dec_out;
                for (c, &(w_id, b_id)) in self.gate.iter().enumerate() {
                    let w = g.param(w_id);
                    let b = g.param(b_id);
                    let pre = g.matmul(full, w);
                    let pre = g.add_row(pre, b);
                    let gate = g.sigmoid(pre);
                    let gated = g.mul(contexts[c], gate);
                    out = g.add(out, gated);
                }
                Ok(out)
            }
        }
    }
}

/// Video-adapted training: shift every audio frame by the utterance-mean
/// visual vector pushed through a learned projection. With a zero projection
/// this is the identity, which is how the fine-tune starts.
pub fn vat_adapt(audio: &Tensor, video_mean: &[f64], proj: &Tensor) -> Result<Tensor> {
    if proj.rows() != video_mean.len() || proj.cols() != audio.cols() {
        return Err(Error::Shape(format!(
            "vat projection {}x{} does not map visual dim {} to audio dim {}",
            proj.rows(),
            proj.cols(),
            video_mean.len(),
            audio.cols()
        )));
    }
    let shift = Tensor::row_vector(video_mean.to_vec()).matmul(proj)?;
    let mut out = audio.clone();
    for r in 0..out.rows() {
        for (dst, s) in out.row_mut(r).iter_mut().zip(shift.data()) {
            *dst += s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::Tape;
    use crate::seeds;

    fn eval_fused(
        fusion: &Fusion,
        params: &Params,
        contexts: &[Vec<f64>],
        dec: &[f64],
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, params);
        let ctx_vars: Vec<Var> = contexts
            .iter()
            .map(|c| g.input(&Tensor::row_vector(c.clone())))
            .collect();
        let dec_var = g.input(&Tensor::row_vector(dec.to_vec()));
        let out = fusion.fuse(&mut g, &ctx_vars, dec_var).unwrap();
        g.value(out).to_vec()
    }

    fn zeroed(p: &mut Params) {
        let ids: Vec<ParamId> = p.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            p.get_mut(id).fill(0.0);
        }
    }

    #[test]
    fn zero_cat_params_reduce_to_the_decoder_output() {
        let mut p = Params::default();
        let f = Fusion::new(&mut p, "", FusionMode::Cat, 2, 3, &mut seeds::rng(0, "t"));
        zeroed(&mut p);
        let out = eval_fused(&f, &p, &[vec![9.0; 3], vec![-4.0; 3]], &[1.0, 2.0, 3.0]);
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_gate_params_pass_half_of_each_context() {
        let mut p = Params::default();
        let f = Fusion::new(&mut p, "", FusionMode::Gate, 2, 1, &mut seeds::rng(0, "t"));
        zeroed(&mut p);
        let out = eval_fused(&f, &p, &[vec![2.0], vec![3.0]], &[5.0]);
        assert!((out[0] - 7.5).abs() < 1e-12, "{out:?}");
    }

    #[test]
    fn large_gate_bias_saturates_to_a_plain_sum() {
        let mut p = Params::default();
        let f = Fusion::new(&mut p, "", FusionMode::Gate, 2, 2, &mut seeds::rng(0, "t"));
        zeroed(&mut p);
        let bias_ids: Vec<ParamId> = p
            .iter()
            .filter(|(_, name, _)| name.ends_with(".b"))
            .map(|(id, _, _)| id)
            .collect();
        for id in bias_ids {
            p.get_mut(id).fill(100.0);
        }
        let out = eval_fused(&f, &p, &[vec![2.0, -1.0], vec![3.0, 4.0]], &[5.0, 0.5]);
        assert!((out[0] - 10.0).abs() < 1e-9);
        assert!((out[1] - 3.5).abs() < 1e-9);
    }

    #[test]
    fn cat_is_sensitive_to_context_order() {
        let mut p = Params::default();
        let f = Fusion::new(&mut p, "", FusionMode::Cat, 2, 1, &mut seeds::rng(0, "t"));
        let w = p.by_name("fusion.cat.W").unwrap();
        p.get_mut(w).data_mut().copy_from_slice(&[1.0, 2.0]);
        let b = p.by_name("fusion.cat.b").unwrap();
        p.get_mut(b).fill(0.0);
        let ab = eval_fused(&f, &p, &[vec![2.0], vec![3.0]], &[5.0]);
        let ba = eval_fused(&f, &p, &[vec![3.0], vec![2.0]], &[5.0]);
        assert!((ab[0] - 13.0).abs() < 1e-12);
        assert!((ba[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn gated_contribution_never_exceeds_the_context() {
        let mut p = Params::default();
        let f = Fusion::new(&mut p, "", FusionMode::Gate, 1, 4, &mut seeds::rng(3, "t"));
        let dec = vec![0.3, -0.7, 0.1, 2.0];
        let ctx = vec![1.5, -2.0, 0.0, 0.25];
        let out = eval_fused(&f, &p, std::slice::from_ref(&ctx), &dec);
        for i in 0..4 {
            let contribution = out[i] - dec[i];
            assert!(contribution.abs() <= ctx[i].abs() + 1e-12, "dim {i}");
            assert!(contribution * ctx[i] >= 0.0, "gate flipped a sign at dim {i}");
        }
    }

    #[test]
    fn context_count_mismatch_is_a_shape_error() {
        let mut p = Params::default();
        let f = Fusion::new(&mut p, "", FusionMode::Cat, 2, 3, &mut seeds::rng(0, "t"));
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &p);
        let c = g.input(&Tensor::row_vector(vec![0.0; 3]));
        let d = g.input(&Tensor::row_vector(vec![0.0; 3]));
        assert!(matches!(f.fuse(&mut g, &[c], d), Err(Error::Shape(_))));
    }

    #[test]
    fn mode_parses_and_prints() {
        assert_eq!("cat".parse::<FusionMode>().unwrap(), FusionMode::Cat);
        assert_eq!("gate".parse::<FusionMode>().unwrap(), FusionMode::Gate);
        assert!("Cat".parse::<FusionMode>().is_err());
        assert_eq!(FusionMode::Gate.to_string(), "gate");
    }

    #[test]
    fn gate_tensor_names_are_one_based() {
        let mut p = Params::default();
        Fusion::new(&mut p, "pre.", FusionMode::Gate, 3, 2, &mut seeds::rng(0, "t"));
        for c in 1..=3 {
            assert!(p.by_name(&format!("pre.fusion.gate.{c}.W")).is_some());
            assert!(p.by_name(&format!("pre.fusion.gate.{c}.b")).is_some());
        }
        assert!(p.by_name("pre.fusion.gate.0.W").is_none());
    }

    #[test]
    fn vat_shift_is_identity_with_zero_projection() {
        let audio = Tensor::from_fn(3, 2, |r, c| (r * 2 + c) as f64);
        let proj = Tensor::zeros(4, 2);
        let out = vat_adapt(&audio, &[1.0, 2.0, 3.0, 4.0], &proj).unwrap();
        assert_eq!(out.data(), audio.data());
    }

    #[test]
    fn vat_shift_adds_the_projected_mean_to_every_frame() {
        let audio = Tensor::zeros(2, 2);
        let mut proj = Tensor::zeros(2, 2);
        proj.set(0, 0, 1.0);
        proj.set(1, 1, 2.0);
        let out = vat_adapt(&audio, &[3.0, 4.0], &proj).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), &[3.0, 8.0]);
        }
        assert!(matches!(
            vat_adapt(&audio, &[3.0, 4.0, 5.0], &proj),
            Err(Error::Shape(_))
        ));
    }
}
