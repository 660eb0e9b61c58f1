//! Reverse-mode tape over row-major f64 matrices.
//!
//! A `Tape` owns the node list plus one flat value buffer and one flat
//! gradient buffer; offsets line up between the two, so a graph rebuild per
//! utterance costs no allocation in steady state. `Graph` is a short-lived
//! view pairing the tape with the parameter store so parameter values can be
//! injected as leaves.
//!
//! The op set is deliberately small. The only fused op is `GruStep`, which
//! carries the whole gated-recurrence cell:
//!
//!   gx = x W_x + b,  gh = h_prev W_h          (three gate blocks each)
//!   z = sigmoid(gx_z + gh_z)
//!   r = sigmoid(gx_r + gh_r)
//!   n = tanh(gx_n + r * gh_n)
//!   h = (1 - z) * n + z * h_prev
//!
//! (reset gate applied to the recurrent matmul output). Its hand-derived
//! backward is pinned by the finite-difference suite like everything else.
//! Builders panic on shape misuse (programming errors); fallible validation
//! belongs to the public APIs that feed the graph.

use crate::modelkit::params::{GradStore, ParamId, Params};
use crate::tensor::{axpy, dot, mm_a_bt_acc, mm_acc, mm_at_b_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// matrix + row vector broadcast over rows
    AddRow(Var, Var),
    /// matrix * row vector broadcast over rows
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// per-row standardization (no affine), eps inside the sqrt
    LayerNorm(Var, f64),
    /// same-padded 1-D convolution: signal 1xT, filters KxW -> TxK
    Conv1d(Var, Var),
    SumAll(Var),
    /// value layout [h | z | r | n | gh_n], 1 x 5*hidden
    GruStep { x: Var, h_prev: Var, w_x: Var, w_h: Var, b: Var },
    /// whole-sequence recurrence over x (T x d_in), same cell and value
    /// layout as GruStep but row t holds frame t; `reverse` runs the scan
    /// from the last frame with rows kept in frame order
    GruSeq { x: Var, w_x: Var, w_h: Var, b: Var, reverse: bool },
    /// table (VxD) row gather -> len(ids) x D
    Embed(Var, Vec<u32>),
}

struct Node {
    rows: u32,
    cols: u32,
    off: usize,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    buf: Vec<f64>,
    grad: Vec<f64>,
    param_nodes: Vec<(ParamId, Var)>,
    scratch: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn reset(&mut self) {
        self.nodes.clear();
        self.buf.clear();
        self.param_nodes.clear();
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

pub struct Graph<'a> {
    tape: &'a mut Tape,
    params: &'a Params,
}

impl<'a> Graph<'a> {
    /// Start a fresh graph on `tape` (clears any previous one).
    pub fn new(tape: &'a mut Tape, params: &'a Params) -> Self {
        tape.reset();
        Graph { tape, params }
    }

    pub fn rows(&self, v: Var) -> usize {
        self.tape.nodes[v.0 as usize].rows as usize
    }

    pub fn cols(&self, v: Var) -> usize {
        self.tape.nodes[v.0 as usize].cols as usize
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.tape.nodes[v.0 as usize];
        &self.tape.buf[n.off..n.off + (n.rows * n.cols) as usize]
    }

    pub fn read_tensor(&self, v: Var) -> Tensor {
        let n = &self.tape.nodes[v.0 as usize];
        Tensor::from_vec(n.rows as usize, n.cols as usize, self.value(v).to_vec()).unwrap()
    }

    fn push(&mut self, rows: usize, cols: usize, op: Op) -> Var {
        let off = self.tape.buf.len();
        self.tape.buf.resize(off + rows * cols, 0.0);
        self.tape.nodes.push(Node { rows: rows as u32, cols: cols as u32, off, op });
        let var = Var((self.tape.nodes.len() - 1) as u32);
        self.compute(var);
        var
    }

    fn compute(&mut self, v: Var) {
        let idx = v.0 as usize;
        let off = self.tape.nodes[idx].off;
        let rows = self.tape.nodes[idx].rows as usize;
        let cols = self.tape.nodes[idx].cols as usize;
        let (head, tail) = self.tape.buf.split_at_mut(off);
        let out = &mut tail[..rows * cols];
        let nodes = &self.tape.nodes[..idx];
        let val = |x: Var| -> &[f64] {
            let n = &nodes[x.0 as usize];
            &head[n.off..n.off + (n.rows * n.cols) as usize]
        };
        let shape = |x: Var| -> (usize, usize) {
            let n = &nodes[x.0 as usize];
            (n.rows as usize, n.cols as usize)
        };
        match &self.tape.nodes[idx].op {
            Op::Input => {}
            Op::Param(pid) => out.copy_from_slice(self.params.get(*pid).data()),
            Op::MatMul(a, b) => {
                let (m, k) = shape(*a);
                let (_, n) = shape(*b);
                mm_acc(out, val(*a), m, k, val(*b), n);
            }
            Op::Add(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                for i in 0..out.len() {
                    out[i] = va[i] + vb[i];
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                for i in 0..out.len() {
                    out[i] = va[i] * vb[i];
                }
            }
            Op::AddRow(m, r) => {
                let (vm, vr) = (val(*m), val(*r));
                for (orow, mrow) in out.chunks_exact_mut(cols).zip(vm.chunks_exact(cols)) {
                    for i in 0..cols {
                        orow[i] = mrow[i] + vr[i];
                    }
                }
            }
            Op::MulRow(m, r) => {
                let (vm, vr) = (val(*m), val(*r));
                for (orow, mrow) in out.chunks_exact_mut(cols).zip(vm.chunks_exact(cols)) {
                    for i in 0..cols {
                        orow[i] = mrow[i] * vr[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                let va = val(*a);
                for i in 0..out.len() {
                    out[i] = va[i] * s;
                }
            }
            Op::Sigmoid(a) => {
                let va = val(*a);
                for i in 0..out.len() {
                    out[i] = sigmoid(va[i]);
                }
            }
            Op::Tanh(a) => {
                let va = val(*a);
                for i in 0..out.len() {
                    out[i] = va[i].tanh();
                }
            }
            Op::SliceCols(src, start) => {
                let (_, sc) = shape(*src);
                let vs = val(*src);
                for r in 0..rows {
                    out[r * cols..(r + 1) * cols]
                        .copy_from_slice(&vs[r * sc + start..r * sc + start + cols]);
                }
            }
            Op::SliceRows(src, start) => {
                let (_, sc) = shape(*src);
                out.copy_from_slice(&val(*src)[start * sc..(start + rows) * sc]);
            }
            Op::ConcatCols(vars) => {
                let mut c0 = 0;
                for x in vars {
                    let (_, xc) = shape(*x);
                    let vx = val(*x);
                    for r in 0..rows {
                        out[r * cols + c0..r * cols + c0 + xc]
                            .copy_from_slice(&vx[r * xc..(r + 1) * xc]);
                    }
                    c0 += xc;
                }
            }
            Op::ConcatRows(vars) => {
                let mut r0 = 0;
                for x in vars {
                    let (xr, _) = shape(*x);
                    out[r0 * cols..(r0 + xr) * cols].copy_from_slice(val(*x));
                    r0 += xr;
                }
            }
            Op::Transpose(a) => {
                let (ar, ac) = shape(*a);
                let va = val(*a);
                for r in 0..ar {
                    for c in 0..ac {
                        out[c * ar + r] = va[r * ac + c];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let va = val(*a);
                for (orow, arow) in out.chunks_exact_mut(cols).zip(va.chunks_exact(cols)) {
                    softmax_row(orow, arow);
                }
            }
            Op::LogSoftmaxRows(a) => {
                let va = val(*a);
                for (orow, arow) in out.chunks_exact_mut(cols).zip(va.chunks_exact(cols)) {
                    let m = arow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = arow.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
                    for i in 0..cols {
                        orow[i] = arow[i] - lse;
                    }
                }
            }
            Op::LayerNorm(a, eps) => {
                let va = val(*a);
                for (orow, arow) in out.chunks_exact_mut(cols).zip(va.chunks_exact(cols)) {
                    let mean = arow.iter().sum::<f64>() / cols as f64;
                    let var = arow.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for i in 0..cols {
                        orow[i] = (arow[i] - mean) * inv;
                    }
                }
            }
            Op::Conv1d(sig, filt) => {
                let (_, t) = shape(*sig);
                let (kf, w) = shape(*filt);
                let (vs, vf) = (val(*sig), val(*filt));
                let c = w / 2;
                for ti in 0..t {
                    for k in 0..kf {
                        let mut s = 0.0;
                        for wi in 0..w {
                            let j = ti + wi;
                            if j >= c && j - c < t {
                                s += vf[k * w + wi] * vs[j - c];
                            }
                        }
                        out[ti * kf + k] = s;
                    }
                }
            }
            Op::SumAll(a) => {
                out[0] = val(*a).iter().sum();
            }
            Op::GruStep { x, h_prev, w_x, w_h, b } => {
                let (_, din) = shape(*x);
                let h = cols / 5;
                let scratch = &mut self.tape.scratch;
                scratch.clear();
                scratch.resize(6 * h, 0.0);
                let (gx, gh) = scratch.split_at_mut(3 * h);
                gx.copy_from_slice(val(*b));
                mm_acc(gx, val(*x), 1, din, val(*w_x), 3 * h);
                mm_acc(gh, val(*h_prev), 1, h, val(*w_h), 3 * h);
                let hp = val(*h_prev);
                for i in 0..h {
                    let z = sigmoid(gx[i] + gh[i]);
                    let r = sigmoid(gx[h + i] + gh[h + i]);
                    let n = (gx[2 * h + i] + r * gh[2 * h + i]).tanh();
                    out[i] = (1.0 - z) * n + z * hp[i];
                    out[h + i] = z;
                    out[2 * h + i] = r;
                    out[3 * h + i] = n;
                    out[4 * h + i] = gh[2 * h + i];
                }
            }
            Op::GruSeq { x, w_x, w_h, b, reverse } => {
                let (t_len, din) = shape(*x);
                let h = cols / 5;
                let reverse = *reverse;
                let scratch = &mut self.tape.scratch;
                scratch.clear();
                scratch.resize(t_len * 3 * h + 3 * h, 0.0);
                let (gx_all, gh) = scratch.split_at_mut(t_len * 3 * h);
                // Input-side gates for every frame in one matmul.
                let vb = val(*b);
                for row in gx_all.chunks_exact_mut(3 * h) {
                    row.copy_from_slice(vb);
                }
                mm_acc(gx_all, val(*x), t_len, din, val(*w_x), 3 * h);
                let vwh = val(*w_h);
                let mut h_prev = vec![0.0; h];
                let order: Box<dyn Iterator<Item = usize>> =
                    if reverse { Box::new((0..t_len).rev()) } else { Box::new(0..t_len) };
                for ti in order {
                    let gx = &gx_all[ti * 3 * h..(ti + 1) * 3 * h];
                    gh.iter_mut().for_each(|v| *v = 0.0);
                    mm_acc(gh, &h_prev, 1, h, vwh, 3 * h);
                    let orow = &mut out[ti * 5 * h..(ti + 1) * 5 * h];
                    for i in 0..h {
                        let z = sigmoid(gx[i] + gh[i]);
                        let r = sigmoid(gx[h + i] + gh[h + i]);
                        let n = (gx[2 * h + i] + r * gh[2 * h + i]).tanh();
                        orow[i] = (1.0 - z) * n + z * h_prev[i];
                        orow[h + i] = z;
                        orow[2 * h + i] = r;
                        orow[3 * h + i] = n;
                        orow[4 * h + i] = gh[2 * h + i];
                    }
                    h_prev.copy_from_slice(&orow[..h]);
                }
            }
            Op::Embed(table, ids) => {
                let (_, d) = shape(*table);
                let vt = val(*table);
                for (r, &id) in ids.iter().enumerate() {
                    out[r * d..(r + 1) * d]
                        .copy_from_slice(&vt[id as usize * d..(id as usize + 1) * d]);
                }
            }
        }
    }

    // ---- builders ----

    pub fn input(&mut self, t: &Tensor) -> Var {
        let v = self.push(t.rows(), t.cols(), Op::Input);
        let n = &self.tape.nodes[v.0 as usize];
        let off = n.off;
        self.tape.buf[off..off + t.len()].copy_from_slice(t.data());
        v
    }

    pub fn input_row(&mut self, data: &[f64]) -> Var {
        let v = self.push(1, data.len(), Op::Input);
        let off = self.tape.nodes[v.0 as usize].off;
        self.tape.buf[off..off + data.len()].copy_from_slice(data);
        v
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, Op::Input)
    }

    /// Inject a parameter as a leaf (deduplicated per graph).
    pub fn param(&mut self, pid: ParamId) -> Var {
        if let Some(&(_, v)) = self.tape.param_nodes.iter().find(|(p, _)| *p == pid) {
            return v;
        }
        let t = self.params.get(pid);
        let v = self.push(t.rows(), t.cols(), Op::Param(pid));
        self.tape.param_nodes.push((pid, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul {m}x{k} @ {k2}x{n}");
        self.push(m, n, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!((self.rows(a), self.cols(a)), (self.rows(b), self.cols(b)), "add shape");
        self.push(self.rows(a), self.cols(a), Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!((self.rows(a), self.cols(a)), (self.rows(b), self.cols(b)), "mul shape");
        self.push(self.rows(a), self.cols(a), Op::Mul(a, b))
    }

    pub fn add_row(&mut self, m: Var, row: Var) -> Var {
        assert_eq!(self.rows(row), 1, "add_row broadcast needs a row vector");
        assert_eq!(self.cols(m), self.cols(row), "add_row width");
        self.push(self.rows(m), self.cols(m), Op::AddRow(m, row))
    }

    pub fn mul_row(&mut self, m: Var, row: Var) -> Var {
        assert_eq!(self.rows(row), 1, "mul_row broadcast needs a row vector");
        assert_eq!(self.cols(m), self.cols(row), "mul_row width");
        self.push(self.rows(m), self.cols(m), Op::MulRow(m, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.push(self.rows(a), self.cols(a), Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(self.rows(a), self.cols(a), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(self.rows(a), self.cols(a), Op::Tanh(a))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.cols(src), "slice_cols range");
        self.push(self.rows(src), len, Op::SliceCols(src, start))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.rows(src), "slice_rows range");
        self.push(len, self.cols(src), Op::SliceRows(src, start))
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let rows = self.rows(vars[0]);
        assert!(vars.iter().all(|v| self.rows(*v) == rows), "concat_cols row count");
        let cols = vars.iter().map(|v| self.cols(*v)).sum();
        self.push(rows, cols, Op::ConcatCols(vars.to_vec()))
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let cols = self.cols(vars[0]);
        assert!(vars.iter().all(|v| self.cols(*v) == cols), "concat_rows col count");
        let rows = vars.iter().map(|v| self.rows(*v)).sum();
        self.push(rows, cols, Op::ConcatRows(vars.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.push(self.cols(a), self.rows(a), Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.push(self.rows(a), self.cols(a), Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        self.push(self.rows(a), self.cols(a), Op::LogSoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        self.push(self.rows(a), self.cols(a), Op::LayerNorm(a, eps))
    }

    pub fn conv1d_same(&mut self, signal: Var, filters: Var) -> Var {
        assert_eq!(self.rows(signal), 1, "conv1d signal must be 1xT");
        assert_eq!(self.cols(filters) % 2, 1, "conv1d kernel width must be odd");
        self.push(self.cols(signal), self.rows(filters), Op::Conv1d(signal, filters))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.push(1, 1, Op::SumAll(a))
    }

    pub fn gru_step(&mut self, x: Var, h_prev: Var, w_x: Var, w_h: Var, b: Var) -> Var {
        let h = self.cols(h_prev);
        assert_eq!(self.rows(x), 1, "gru_step x must be a row");
        assert_eq!(self.rows(h_prev), 1, "gru_step h_prev must be a row");
        assert_eq!(self.cols(w_x), 3 * h, "gru_step w_x width");
        assert_eq!(self.rows(w_x), self.cols(x), "gru_step w_x height");
        assert_eq!((self.rows(w_h), self.cols(w_h)), (h, 3 * h), "gru_step w_h shape");
        assert_eq!((self.rows(b), self.cols(b)), (1, 3 * h), "gru_step bias shape");
        let full = self.push(1, 5 * h, Op::GruStep { x, h_prev, w_x, w_h, b });
        self.slice_cols(full, 0, h)
    }

    /// Run the same cell over every row of `x` (T x d_in) from a zero state,
    /// returning the T x hidden state sequence in frame order. One node does
    /// the whole scan, so long sequences stay cheap. `reverse` scans from the
    /// last frame (the output still keeps frame order).
    pub fn gru_seq(&mut self, x: Var, w_x: Var, w_h: Var, b: Var, reverse: bool) -> Var {
        let h = self.rows(w_h);
        let t_len = self.rows(x);
        assert!(t_len > 0, "gru_seq needs at least one frame");
        assert_eq!(self.cols(w_x), 3 * h, "gru_seq w_x width");
        assert_eq!(self.rows(w_x), self.cols(x), "gru_seq w_x height");
        assert_eq!(self.cols(w_h), 3 * h, "gru_seq w_h width");
        assert_eq!((self.rows(b), self.cols(b)), (1, 3 * h), "gru_seq bias shape");
        let full = self.push(t_len, 5 * h, Op::GruSeq { x, w_x, w_h, b, reverse });
        self.slice_cols(full, 0, h)
    }

    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let (v, d) = (self.rows(table), self.cols(table));
        assert!(ids.iter().all(|&i| (i as usize) < v), "embed id out of range");
        self.push(ids.len(), d, Op::Embed(table, ids.to_vec()))
    }

    // ---- backward ----

    /// Reverse sweep from `loss` (1x1) with upstream gradient `seed`,
    /// accumulating parameter gradients into `grads`.
    pub fn backward(&mut self, loss: Var, seed: f64, grads: &mut GradStore) {
        let tape = &mut *self.tape;
        assert_eq!(
            (tape.nodes[loss.0 as usize].rows, tape.nodes[loss.0 as usize].cols),
            (1, 1),
            "backward needs a scalar loss"
        );
        tape.grad.clear();
        tape.grad.resize(tape.buf.len(), 0.0);
        tape.grad[tape.nodes[loss.0 as usize].off] = seed;

        for idx in (0..tape.nodes.len()).rev() {
            let off = tape.nodes[idx].off;
            let rows = tape.nodes[idx].rows as usize;
            let cols = tape.nodes[idx].cols as usize;
            let (ghead, gtail) = tape.grad.split_at_mut(off);
            let g = &gtail[..rows * cols];
            let nodes = &tape.nodes;
            let buf = &tape.buf;
            let val = |x: Var| -> &[f64] {
                let n = &nodes[x.0 as usize];
                &buf[n.off..n.off + (n.rows * n.cols) as usize]
            };
            let shape = |x: Var| -> (usize, usize) {
                let n = &nodes[x.0 as usize];
                (n.rows as usize, n.cols as usize)
            };
            // Gradient slice for an input var; inputs always precede the node.
            macro_rules! gin {
                ($x:expr) => {{
                    let n = &nodes[$x.0 as usize];
                    &mut ghead[n.off..n.off + (n.rows * n.cols) as usize]
                }};
            }
            match &tape.nodes[idx].op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (m, k) = shape(*a);
                    let (_, n) = shape(*b);
                    let (va, vb) = (val(*a), val(*b));
                    // Two sequential mutable borrows of ghead.
                    {
                        let ga = gin!(*a);
                        mm_a_bt_acc(ga, g, m, n, vb, k);
                    }
                    let gb = gin!(*b);
                    mm_at_b_acc(gb, va, m, k, g, n);
                }
                Op::Add(a, b) => {
                    {
                        let ga = gin!(*a);
                        axpy(ga, 1.0, g);
                    }
                    let gb = gin!(*b);
                    axpy(gb, 1.0, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    {
                        let ga = gin!(*a);
                        for i in 0..g.len() {
                            ga[i] += g[i] * vb[i];
                        }
                    }
                    let gb = gin!(*b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
                Op::AddRow(m, r) => {
                    {
                        let gm = gin!(*m);
                        axpy(gm, 1.0, g);
                    }
                    let gr = gin!(*r);
                    for grow in g.chunks_exact(cols) {
                        axpy(gr, 1.0, grow);
                    }
                }
                Op::MulRow(m, r) => {
                    let (vm, vr) = (val(*m), val(*r));
                    {
                        let gm = gin!(*m);
                        for (gmrow, grow) in gm.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                            for i in 0..cols {
                                gmrow[i] += grow[i] * vr[i];
                            }
                        }
                    }
                    let gr = gin!(*r);
                    for (mrow, grow) in vm.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        for i in 0..cols {
                            gr[i] += grow[i] * mrow[i];
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = gin!(*a);
                    axpy(ga, *s, g);
                }
                Op::Sigmoid(a) => {
                    let y = &buf[off..off + rows * cols];
                    let ga = gin!(*a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Tanh(a) => {
                    let y = &buf[off..off + rows * cols];
                    let ga = gin!(*a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::SliceCols(src, start) => {
                    let (_, sc) = shape(*src);
                    let gs = gin!(*src);
                    for r in 0..rows {
                        axpy(
                            &mut gs[r * sc + start..r * sc + start + cols],
                            1.0,
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                }
                Op::SliceRows(src, start) => {
                    let (_, sc) = shape(*src);
                    let gs = gin!(*src);
                    axpy(&mut gs[start * sc..start * sc + rows * sc], 1.0, g);
                }
                Op::ConcatCols(vars) => {
                    let mut c0 = 0;
                    for x in vars {
                        let (_, xc) = shape(*x);
                        let gx = gin!(*x);
                        for r in 0..rows {
                            axpy(
                                &mut gx[r * xc..(r + 1) * xc],
                                1.0,
                                &g[r * cols + c0..r * cols + c0 + xc],
                            );
                        }
                        c0 += xc;
                    }
                }
                Op::ConcatRows(vars) => {
                    let mut r0 = 0;
                    for x in vars {
                        let (xr, _) = shape(*x);
                        let gx = gin!(*x);
                        axpy(gx, 1.0, &g[r0 * cols..(r0 + xr) * cols]);
                        r0 += xr;
                    }
                }
                Op::Transpose(a) => {
                    let (ar, ac) = shape(*a);
                    let ga = gin!(*a);
                    for r in 0..ar {
                        for c in 0..ac {
                            ga[r * ac + c] += g[c * ar + r];
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &buf[off..off + rows * cols];
                    let ga = gin!(*a);
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s = dot(gr, yr);
                        let gar = &mut ga[r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            gar[i] += yr[i] * (gr[i] - s);
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &buf[off..off + rows * cols];
                    let ga = gin!(*a);
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s: f64 = gr.iter().sum();
                        let gar = &mut ga[r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            gar[i] += gr[i] - yr[i].exp() * s;
                        }
                    }
                }
                Op::LayerNorm(a, eps) => {
                    let va = val(*a);
                    let y = &buf[off..off + rows * cols];
                    let ga = gin!(*a);
                    for r in 0..rows {
                        let xr = &va[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mean = xr.iter().sum::<f64>() / cols as f64;
                        let var =
                            xr.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = gr.iter().sum::<f64>() / cols as f64;
                        let gymean = dot(gr, yr) / cols as f64;
                        let gar = &mut ga[r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            gar[i] += inv * (gr[i] - gmean - yr[i] * gymean);
                        }
                    }
                }
                Op::Conv1d(sig, filt) => {
                    let (_, t) = shape(*sig);
                    let (kf, w) = shape(*filt);
                    let c = w / 2;
                    let vs = val(*sig);
                    let vf = val(*filt);
                    {
                        let gs = gin!(*sig);
                        for ti in 0..t {
                            for k in 0..kf {
                                let gv = g[ti * kf + k];
                                if gv == 0.0 {
                                    continue;
                                }
                                for wi in 0..w {
                                    let j = ti + wi;
                                    if j >= c && j - c < t {
                                        gs[j - c] += gv * vf[k * w + wi];
                                    }
                                }
                            }
                        }
                    }
                    let gf = gin!(*filt);
                    for ti in 0..t {
                        for k in 0..kf {
                            let gv = g[ti * kf + k];
                            if gv == 0.0 {
                                continue;
                            }
                            for wi in 0..w {
                                let j = ti + wi;
                                if j >= c && j - c < t {
                                    gf[k * w + wi] += gv * vs[j - c];
                                }
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    let ga = gin!(*a);
                    let gv = g[0];
                    for v in ga.iter_mut() {
                        *v += gv;
                    }
                }
                Op::GruStep { x, h_prev, w_x, w_h, b } => {
                    let h = cols / 5;
                    let out = &buf[off..off + cols];
                    let (hv, zv, rv, nv, ghn) = (
                        &out[0..h],
                        &out[h..2 * h],
                        &out[2 * h..3 * h],
                        &out[3 * h..4 * h],
                        &out[4 * h..5 * h],
                    );
                    let _ = hv;
                    let dh = &g[0..h];
                    let hp = val(*h_prev);
                    let (_, din) = shape(*x);
                    let scratch = &mut tape.scratch;
                    scratch.clear();
                    scratch.resize(6 * h, 0.0);
                    let (dgx, dgh) = scratch.split_at_mut(3 * h);
                    for i in 0..h {
                        let dz = dh[i] * (hp[i] - nv[i]);
                        let dn = dh[i] * (1.0 - zv[i]);
                        let dn_pre = dn * (1.0 - nv[i] * nv[i]);
                        let dr = dn_pre * ghn[i];
                        let da_z = dz * zv[i] * (1.0 - zv[i]);
                        let da_r = dr * rv[i] * (1.0 - rv[i]);
                        dgx[i] = da_z;
                        dgx[h + i] = da_r;
                        dgx[2 * h + i] = dn_pre;
                        dgh[i] = da_z;
                        dgh[h + i] = da_r;
                        dgh[2 * h + i] = dn_pre * rv[i];
                    }
                    {
                        let gx = gin!(*x);
                        mm_a_bt_acc(gx, dgx, 1, 3 * h, val(*w_x), din);
                    }
                    {
                        let ghp = gin!(*h_prev);
                        for i in 0..h {
                            ghp[i] += dh[i] * zv[i];
                        }
                        mm_a_bt_acc(ghp, dgh, 1, 3 * h, val(*w_h), h);
                    }
                    {
                        let gwx = gin!(*w_x);
                        mm_at_b_acc(gwx, val(*x), 1, din, dgx, 3 * h);
                    }
                    {
                        let gwh = gin!(*w_h);
                        mm_at_b_acc(gwh, hp, 1, h, dgh, 3 * h);
                    }
                    let gb = gin!(*b);
                    axpy(gb, 1.0, dgx);
                }
                Op::GruSeq { x, w_x, w_h, b, reverse } => {
                    let h = cols / 5;
                    let (t_len, din) = shape(*x);
                    let out = &buf[off..off + rows * cols];
                    let reverse = *reverse;
                    let scratch = &mut tape.scratch;
                    scratch.clear();
                    scratch.resize(t_len * 7 * h + 2 * h, 0.0);
                    let (dgx_all, rest) = scratch.split_at_mut(t_len * 3 * h);
                    let (dgh_all, rest) = rest.split_at_mut(t_len * 3 * h);
                    let (hprev_all, rest) = rest.split_at_mut(t_len * h);
                    let (dh, dcarry) = rest.split_at_mut(h);
                    for ti in 0..t_len {
                        let src = if reverse {
                            (ti + 1 < t_len).then(|| ti + 1)
                        } else {
                            ti.checked_sub(1)
                        };
                        if let Some(s) = src {
                            hprev_all[ti * h..(ti + 1) * h]
                                .copy_from_slice(&out[s * 5 * h..s * 5 * h + h]);
                        }
                    }
                    let vwh = val(*w_h);
                    // Walk frames in reverse scan order, threading the hidden
                    // state gradient backwards through the recurrence.
                    let order: Box<dyn Iterator<Item = usize>> =
                        if reverse { Box::new(0..t_len) } else { Box::new((0..t_len).rev()) };
                    for ti in order {
                        let orow = &out[ti * 5 * h..(ti + 1) * 5 * h];
                        let grow = &g[ti * 5 * h..ti * 5 * h + h];
                        let hp = &hprev_all[ti * h..(ti + 1) * h];
                        let dgx = &mut dgx_all[ti * 3 * h..(ti + 1) * 3 * h];
                        let dgh = &mut dgh_all[ti * 3 * h..(ti + 1) * 3 * h];
                        for i in 0..h {
                            let dh_i = dh[i] + grow[i];
                            let (zv, rv, nv, ghn) =
                                (orow[h + i], orow[2 * h + i], orow[3 * h + i], orow[4 * h + i]);
                            let dz = dh_i * (hp[i] - nv);
                            let dn_pre = dh_i * (1.0 - zv) * (1.0 - nv * nv);
                            let dr = dn_pre * ghn;
                            let da_z = dz * zv * (1.0 - zv);
                            let da_r = dr * rv * (1.0 - rv);
                            dgx[i] = da_z;
                            dgx[h + i] = da_r;
                            dgx[2 * h + i] = dn_pre;
                            dgh[i] = da_z;
                            dgh[h + i] = da_r;
                            dgh[2 * h + i] = dn_pre * rv;
                            dcarry[i] = dh_i * zv;
                        }
                        mm_a_bt_acc(dcarry, dgh, 1, 3 * h, vwh, h);
                        dh.copy_from_slice(dcarry);
                    }
                    {
                        let gx = gin!(*x);
                        mm_a_bt_acc(gx, dgx_all, t_len, 3 * h, val(*w_x), din);
                    }
                    {
                        let gwx = gin!(*w_x);
                        mm_at_b_acc(gwx, val(*x), t_len, din, dgx_all, 3 * h);
                    }
                    {
                        let gwh = gin!(*w_h);
                        mm_at_b_acc(gwh, hprev_all, t_len, h, dgh_all, 3 * h);
                    }
                    let gb = gin!(*b);
                    for row in dgx_all.chunks_exact(3 * h) {
                        axpy(gb, 1.0, row);
                    }
                }
                Op::Embed(table, ids) => {
                    let (_, d) = shape(*table);
                    let gt = gin!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(
                            &mut gt[id as usize * d..(id as usize + 1) * d],
                            1.0,
                            &g[r * d..(r + 1) * d],
                        );
                    }
                }
            }
        }

        for &(pid, v) in &tape.param_nodes {
            let n = &tape.nodes[v.0 as usize];
            grads.acc(pid, &tape.grad[n.off..n.off + (n.rows * n.cols) as usize]);
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(out: &mut [f64], x: &[f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for i in 0..x.len() {
        let e = (x[i] - m).exp();
        out[i] = e;
        s += e;
    }
    let inv = 1.0 / s;
    for v in out.iter_mut() {
        *v *= inv;
    }
}
