//! Location-aware attention: scores combine the decoder query, the encoded
//! frame, and convolved features of the previous attention weights, through a
//! tanh and a scoring vector. One head per input stream; every head produces
//! a proper distribution over its stream's frames.

use rand_chacha::ChaCha8Rng;

use crate::modelkit::{xavier, Graph, ParamId, Params, Var};
use crate::tensor::Tensor;

/// Additive score mask for padded frames; large enough that softmax assigns
/// them exactly zero weight in double precision.
const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct AttentionHead {
    /// Query projection, d_query x attn_dim.
    pub w_q: ParamId,
    /// Key projection, d_key x attn_dim.
    pub v_k: ParamId,
    /// Location-feature projection, n_filters x attn_dim.
    pub u_f: ParamId,
    /// Score vector, attn_dim x 1.
    pub w_e: ParamId,
    /// Score bias, 1 x attn_dim.
    pub b_e: ParamId,
    /// Convolution filters over previous weights, n_filters x kernel.
    pub filters: ParamId,
}

impl AttentionHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: &mut Params,
        prefix: &str,
        d_query: usize,
        d_key: usize,
        attn_dim: usize,
        n_filters: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> AttentionHead {
        AttentionHead {
            w_q: p.add(format!("{prefix}.w_q"), xavier(d_query, attn_dim, rng)),
            v_k: p.add(format!("{prefix}.v_k"), xavier(d_key, attn_dim, rng)),
            u_f: p.add(format!("{prefix}.u_f"), xavier(n_filters, attn_dim, rng)),
            w_e: p.add(format!("{prefix}.w_e"), xavier(attn_dim, 1, rng)),
            b_e: p.add(format!("{prefix}.b_e"), Tensor::zeros(1, attn_dim)),
            filters: p.add(format!("{prefix}.filters"), xavier(n_filters, kernel, rng)),
        }
    }
}

/// A stream readied for decoding: projected keys, the key-side score term
/// (constant across decode steps), padding mask, and the initial attention
/// distribution (uniform over valid frames).
#[derive(Debug, Clone)]
pub struct PreparedStream {
    pub keys: Var,
    vh: Var,
    mask_bias: Option<Var>,
    pub alpha0: Var,
    pub t: usize,
}

impl PreparedStream {
    /// `keys`: T x d_key encoded stream (already projected to model width).
    /// `mask`: per-frame validity; `None` means every frame is attendable.
    pub fn new(
        g: &mut Graph<'_>,
        head: &AttentionHead,
        keys: Var,
        mask: Option<&[bool]>,
    ) -> PreparedStream {
        let t = g.rows(keys);
        let v_k = g.param(head.v_k);
        let vh = g.matmul(keys, v_k);
        let (mask_bias, alpha0) = match mask {
            Some(m) if m.iter().any(|&v| !v) => {
                assert_eq!(m.len(), t, "mask length");
                let n_valid = m.iter().filter(|&&v| v).count();
                assert!(n_valid > 0, "a stream needs at least one valid frame");
                let bias: Vec<f64> =
                    m.iter().map(|&v| if v { 0.0 } else { MASK_BIAS }).collect();
                let uniform: Vec<f64> =
                    m.iter().map(|&v| if v { 1.0 / n_valid as f64 } else { 0.0 }).collect();
                (Some(g.input_row(&bias)), g.input_row(&uniform))
            }
            _ => (None, g.input_row(&vec![1.0 / t as f64; t])),
        };
        PreparedStream { keys, vh, mask_bias, alpha0, t }
    }

    /// One attention step: previous weights in, (context, new weights) out.
    pub fn attend(
        &self,
        g: &mut Graph<'_>,
        head: &AttentionHead,
        query: Var,
        prev_alpha: Var,
    ) -> (Var, Var) {
        let filters = g.param(head.filters);
        let loc_feats = g.conv1d_same(prev_alpha, filters);
        let u_f = g.param(head.u_f);
        let loc = g.matmul(loc_feats, u_f);
        let w_q = g.param(head.w_q);
        let qw = g.matmul(query, w_q);
        let b_e = g.param(head.b_e);
        let qb = g.add(qw, b_e);
        let pre = g.add(self.vh, loc);
        let pre = g.add_row(pre, qb);
        let act = g.tanh(pre);
        let w_e = g.param(head.w_e);
        let scores = g.matmul(act, w_e);
        let mut scores = g.transpose(scores);
        if let Some(bias) = self.mask_bias {
            scores = g.add(scores, bias);
        }
        let alpha = g.softmax_rows(scores);
        let context = g.matmul(alpha, self.keys);
        (context, alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::Tape;
    use crate::seeds;
    use rand::Rng;

    struct Setup {
        p: Params,
        head: AttentionHead,
    }

    fn setup(d_model: usize, attn: usize, filters: usize, kernel: usize, seed: u64) -> Setup {
        let mut p = Params::new();
        let head =
            AttentionHead::new(&mut p, "attn", d_model, d_model, attn, filters, kernel, &mut seeds::rng(seed, "t"));
        Setup { p, head }
    }

    fn run_attend(
        s: &Setup,
        keys: &Tensor,
        query: &[f64],
        mask: Option<&[bool]>,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &s.p);
        let keys = g.input(keys);
        let stream = PreparedStream::new(&mut g, &s.head, keys, mask);
        let q = g.input_row(query);
        let (ctx, alpha) = stream.attend(&mut g, &s.head, q, stream.alpha0);
        (g.value(ctx).to_vec(), g.value(alpha).to_vec())
    }

    #[test]
    fn identical_keys_give_that_key_as_context() {
        let s = setup(3, 4, 2, 3, 1);
        let keys = Tensor::from_fn(5, 3, |_, c| [0.4, -1.1, 2.2][c]);
        let (ctx, alpha) = run_attend(&s, &keys, &[0.3, -0.2, 0.9], None);
        for (c, want) in ctx.iter().zip([0.4, -1.1, 2.2]) {
            assert!((c - want).abs() < 1e-12);
        }
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_score_vector_gives_uniform_weights_and_frame_mean() {
        let mut s = setup(2, 4, 2, 3, 2);
        s.p.get_mut(s.head.w_e).fill(0.0);
        let keys = Tensor::from_fn(4, 2, |r, c| (r * 2 + c) as f64);
        let (ctx, alpha) = run_attend(&s, &keys, &[1.0, -1.0], None);
        for a in &alpha {
            assert!((a - 0.25).abs() < 1e-12);
        }
        // Mean of rows [0,1],[2,3],[4,5],[6,7] is [3,4].
        assert!((ctx[0] - 3.0).abs() < 1e-12 && (ctx[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn three_frame_case_matches_direct_evaluation() {
        // Independent evaluation with plain vector arithmetic.
        let s = setup(2, 2, 1, 3, 3);
        let get = |id: ParamId| s.p.get(id).data().to_vec();
        let (w_q, v_k, u_f, w_e, b_e, filt) = (
            get(s.head.w_q),
            get(s.head.v_k),
            get(s.head.u_f),
            get(s.head.w_e),
            get(s.head.b_e),
            get(s.head.filters),
        );
        let keys = Tensor::from_vec(3, 2, vec![0.5, -0.3, 1.0, 0.2, -0.7, 0.9]).unwrap();
        let query = [0.4, -0.6];
        let prev = [1.0 / 3.0; 3];

        // conv1d, same padding, kernel 3, single filter.
        let mut conv = [0.0; 3];
        for (j, c) in conv.iter_mut().enumerate() {
            for (k, f) in filt.iter().enumerate() {
                let idx = j as isize + k as isize - 1;
                if (0..3).contains(&idx) {
                    *c += f * prev[idx as usize];
                }
            }
        }
        let mut scores = [0.0; 3];
        for j in 0..3 {
            let mut e = 0.0;
            for a in 0..2 {
                let mut pre = b_e[a] + conv[j] * u_f[a];
                for d in 0..2 {
                    pre += query[d] * w_q[d * 2 + a] + keys.get(j, d) * v_k[d * 2 + a];
                }
                e += pre.tanh() * w_e[a];
            }
            scores[j] = e;
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let want_alpha: Vec<f64> = exps.iter().map(|v| v / z).collect();
        let mut want_ctx = [0.0; 2];
        for j in 0..3 {
            for d in 0..2 {
                want_ctx[d] += want_alpha[j] * keys.get(j, d);
            }
        }

        let (ctx, alpha) = run_attend(&s, &keys, &query, None);
        for (a, w) in alpha.iter().zip(&want_alpha) {
            assert!((a - w).abs() < 1e-10, "{alpha:?} vs {want_alpha:?}");
        }
        for (c, w) in ctx.iter().zip(&want_ctx) {
            assert!((c - w).abs() < 1e-10);
        }
    }

    #[test]
    fn masked_frames_get_zero_weight() {
        let s = setup(3, 4, 2, 3, 4);
        let mut rng = seeds::rng(9, "k");
        let keys = Tensor::from_fn(6, 3, |_, _| rng.gen::<f64>() - 0.5);
        let mask = [true, true, false, true, false, true];
        let (_, alpha) = run_attend(&s, &keys, &[0.1, 0.2, 0.3], Some(&mask));
        assert_eq!(alpha[2], 0.0);
        assert_eq!(alpha[4], 0.0);
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // The initial distribution is uniform over the four valid frames.
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &s.p);
        let kv = g.input(&keys);
        let stream = PreparedStream::new(&mut g, &s.head, kv, Some(&mask));
        let a0 = g.value(stream.alpha0);
        assert_eq!(a0[2], 0.0);
        assert!((a0[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn weights_depend_on_previous_alignment() {
        let s = setup(2, 3, 2, 3, 5);
        let keys = Tensor::from_fn(5, 2, |r, c| (r as f64 * 0.3) - c as f64 * 0.7);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &s.p);
        let kv = g.input(&keys);
        let stream = PreparedStream::new(&mut g, &s.head, kv, None);
        let q = g.input_row(&[0.2, -0.4]);
        let peaked = g.input_row(&[0.0, 0.0, 1.0, 0.0, 0.0]);
        let (_, a_uniform) = stream.attend(&mut g, &s.head, q, stream.alpha0);
        let (_, a_peaked) = stream.attend(&mut g, &s.head, q, peaked);
        let u = g.value(a_uniform).to_vec();
        let p = g.value(a_peaked).to_vec();
        assert!(u.iter().zip(&p).any(|(x, y)| (x - y).abs() > 1e-9));
    }
}
