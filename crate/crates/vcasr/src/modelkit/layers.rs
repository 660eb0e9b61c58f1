//! Recurrent building blocks shared by every model: gated recurrent cells,
//! bidirectional encoder stacks with per-layer layer normalization, and the
//! two-layer decoder core.

use rand_chacha::ChaCha8Rng;

use crate::modelkit::graph::{Graph, Var};
use crate::modelkit::params::{xavier, ParamId, Params};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(p: &mut Params, prefix: &str, d_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        GruCell {
            w_x: p.add(format!("{prefix}.w_x"), xavier(d_in, 3 * hidden, rng)),
            w_h: p.add(format!("{prefix}.w_h"), xavier(hidden, 3 * hidden, rng)),
            b: p.add(format!("{prefix}.b"), Tensor::zeros(1, 3 * hidden)),
            hidden,
        }
    }

    pub fn step(&self, g: &mut Graph, x: Var, h_prev: Var) -> Var {
        let w_x = g.param(self.w_x);
        let w_h = g.param(self.w_h);
        let b = g.param(self.b);
        g.gru_step(x, h_prev, w_x, w_h, b)
    }

    /// Scan the whole sequence (T x d_in) from a zero state in one fused op.
    pub fn seq(&self, g: &mut Graph, x: Var, reverse: bool) -> Var {
        let w_x = g.param(self.w_x);
        let w_h = g.param(self.w_h);
        let b = g.param(self.b);
        g.gru_seq(x, w_x, w_h, b, reverse)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub fwd: GruCell,
    pub bwd: GruCell,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

/// Stack of bidirectional GRU layers; each layer's forward/backward states are
/// concatenated per frame and layer-normalized (learned gain starting at 1,
/// bias at 0). An empty stack is the identity, which lets a frozen upstream
/// encoding feed an attention stream directly.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub hidden: usize,
}

impl EncoderStack {
    pub fn new(
        p: &mut Params,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        n_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(n_layers);
        let mut din = d_in;
        for l in 0..n_layers {
            let fwd = GruCell::new(p, &format!("{prefix}.{l}.fwd"), din, hidden, rng);
            let bwd = GruCell::new(p, &format!("{prefix}.{l}.bwd"), din, hidden, rng);
            let mut gain = Tensor::zeros(1, 2 * hidden);
            gain.fill(1.0);
            let ln_gain = p.add(format!("{prefix}.{l}.ln_gain"), gain);
            let ln_bias = p.add(format!("{prefix}.{l}.ln_bias"), Tensor::zeros(1, 2 * hidden));
            layers.push(EncoderLayer { fwd, bwd, ln_gain, ln_bias });
            din = 2 * hidden;
        }
        EncoderStack { layers, hidden }
    }

    /// Output width (input width passes through an empty stack).
    pub fn out_width(&self, d_in: usize) -> usize {
        if self.layers.is_empty() {
            d_in
        } else {
            2 * self.hidden
        }
    }

    pub fn encode(&self, g: &mut Graph, input: Var) -> Var {
        assert!(g.rows(input) > 0, "cannot encode an empty sequence");
        let mut cur = input;
        for layer in &self.layers {
            let fmat = layer.fwd.seq(g, cur, false);
            let bmat = layer.bwd.seq(g, cur, true);
            let cat = g.concat_cols(&[fmat, bmat]);
            let ln = g.layer_norm_rows(cat, LAYER_NORM_EPS);
            let gain = g.param(layer.ln_gain);
            let bias = g.param(layer.ln_bias);
            let scaled = g.mul_row(ln, gain);
            cur = g.add_row(scaled, bias);
        }
        cur
    }
}

/// Token embedding, two unidirectional GRU layers and the output projection.
/// The fusion module sits between the second GRU layer and the projection.
#[derive(Debug, Clone)]
pub struct DecoderCore {
    pub embed: ParamId,
    pub gru1: GruCell,
    pub gru2: GruCell,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub d_model: usize,
    pub vocab: usize,
}

impl DecoderCore {
    pub fn new(p: &mut Params, prefix: &str, vocab: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        let embed = p.add(format!("{prefix}.embed"), xavier(vocab, d_model, rng));
        let gru1 = GruCell::new(p, &format!("{prefix}.gru1"), 2 * d_model, d_model, rng);
        let gru2 = GruCell::new(p, &format!("{prefix}.gru2"), d_model, d_model, rng);
        let out_w = p.add(format!("{prefix}.out_w"), xavier(d_model, vocab, rng));
        let out_b = p.add(format!("{prefix}.out_b"), Tensor::zeros(1, vocab));
        DecoderCore { embed, gru1, gru2, out_w, out_b, d_model, vocab }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::graph::Tape;
    use crate::seeds;

    #[test]
    fn zero_stack_on_zero_input_stays_zero() {
        // Layer norm of a constant row is zero by the eps convention, gain 1 /
        // bias 0 keep it zero, and zero GRU weights propagate zero states.
        let mut rng = seeds::rng(0, "t");
        let mut p = Params::new();
        let stack = EncoderStack::new(&mut p, "enc", 3, 4, 2, &mut rng);
        let names: Vec<String> = p.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            if !name.ends_with("ln_gain") {
                let id = p.by_name(&name).unwrap();
                p.get_mut(id).fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &p);
        let input = g.zeros(5, 3);
        let out = stack.encode(&mut g, input);
        assert_eq!((g.rows(out), g.cols(out)), (5, 8));
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardizes_each_frame() {
        let mut rng = seeds::rng(5, "ln");
        let mut p = Params::new();
        let stack = EncoderStack::new(&mut p, "enc", 3, 4, 1, &mut rng);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &p);
        let x = Tensor::from_fn(6, 3, |r, c| ((r * 3 + c) as f64).sin() * 2.0);
        let input = g.input(&x);
        // Reach inside: encode, then undo gain/bias to look at the normalized values.
        let out = stack.encode(&mut g, input);
        // gain is 1 and bias is 0 at init, so `out` is the normalized tensor.
        let v = g.value(out);
        for r in 0..6 {
            let row = &v[r * 8..(r + 1) * 8];
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6, "frame mean {mean}");
            // Variance comes out at raw_var / (raw_var + eps), just shy of 1.
            assert!(var > 0.99 && var <= 1.0 + 1e-9, "frame var {var}");
        }
    }

    #[test]
    fn encode_matches_manual_recurrence_on_tiny_config() {
        // Independent oracle: replay the layer-0 forward direction by hand and
        // compare against the first `hidden` columns before normalization is
        // applied... normalization mixes columns, so instead run a one-layer
        // stack with gain/bias left at init and verify against a full manual
        // computation of the same pipeline.
        let mut rng = seeds::rng(11, "oracle");
        let mut p = Params::new();
        let stack = EncoderStack::new(&mut p, "enc", 2, 3, 1, &mut rng);
        let x = Tensor::from_fn(4, 2, |r, c| ((r * 2 + c) as f64 * 0.9).cos());

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let cell = |cellp: &GruCell, x: &[f64], hp: &[f64], p: &Params| -> Vec<f64> {
            let h = cellp.hidden;
            let (wx, wh, bb) = (p.get(cellp.w_x), p.get(cellp.w_h), p.get(cellp.b));
            let mut gx = bb.data().to_vec();
            let mut gh = vec![0.0; 3 * h];
            for j in 0..3 * h {
                for i in 0..x.len() {
                    gx[j] += x[i] * wx.get(i, j);
                }
                for i in 0..h {
                    gh[j] += hp[i] * wh.get(i, j);
                }
            }
            (0..h)
                .map(|i| {
                    let z = sig(gx[i] + gh[i]);
                    let r = sig(gx[h + i] + gh[h + i]);
                    let n = (gx[2 * h + i] + r * gh[2 * h + i]).tanh();
                    (1.0 - z) * n + z * hp[i]
                })
                .collect()
        };

        let layer = &stack.layers[0];
        let mut fwd = vec![vec![0.0; 3]; 4];
        let mut hcur = vec![0.0; 3];
        for t in 0..4 {
            hcur = cell(&layer.fwd, x.row(t), &hcur, &p);
            fwd[t] = hcur.clone();
        }
        let mut bwd = vec![vec![0.0; 3]; 4];
        let mut hcur = vec![0.0; 3];
        for t in (0..4).rev() {
            hcur = cell(&layer.bwd, x.row(t), &hcur, &p);
            bwd[t] = hcur.clone();
        }
        let mut want = Vec::new();
        for t in 0..4 {
            let row: Vec<f64> = fwd[t].iter().chain(bwd[t].iter()).cloned().collect();
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            want.extend(row.iter().map(|v| (v - mean) * inv));
        }

        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &p);
        let input = g.input(&x);
        let out = stack.encode(&mut g, input);
        for (a, w) in g.value(out).iter().zip(&want) {
            assert!((a - w).abs() < 1e-10, "{a} vs {w}");
        }
    }
}
