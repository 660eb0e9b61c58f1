//! Dense row-major f64 matrices and the few hot kernels the tape needs.
//!
//! Everything model-sized here is small (tens of KB), so plain autovectorized
//! loops beat any BLAS hand-off. The three matmul variants cover forward,
//! input-gradient and weight-gradient products without materializing
//! transposes.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "tensor {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// self @ other.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} @ {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        mm_acc(out.data_mut(), &self.data, self.rows, self.cols, &other.data, other.cols);
        Ok(out)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators so LLVM can keep the FMAs pipelined.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let p = i * 4;
        acc[0] = a[p].mul_add(b[p], acc[0]);
        acc[1] = a[p + 1].mul_add(b[p + 1], acc[1]);
        acc[2] = a[p + 2].mul_add(b[p + 2], acc[2]);
        acc[3] = a[p + 3].mul_add(b[p + 3], acc[3]);
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = a[i].mul_add(b[i], s);
    }
    s
}

// Register-tiled matmul kernels. The hot loops hold four 16-wide named
// accumulator rows in registers so each output element is read and written
// once instead of once per contraction step; with plain axpy rows the output
// traffic dominates and the kernels run at a fraction of machine peak. Every
// path fuses with mul_add and accumulates in ascending contraction order, so
// a given output element gets the exact same operation sequence no matter
// how the matrix is split into tiles, remainder rows, or column tails.
const TILE_COLS: usize = 16;

#[inline(always)]
fn fma_row(acc: &mut [f64; TILE_COLS], a: f64, b: &[f64; TILE_COLS]) {
    for c in 0..TILE_COLS {
        acc[c] = a.mul_add(b[c], acc[c]);
    }
}

/// One TILE_COLS-wide accumulator row: out[o..] += sum over (av, b row)
/// pairs from the zipped iterator. Iterator-driven so the loop carries no
/// index arithmetic for overflow checks to instrument.
#[inline(always)]
fn mm_rem_row<'a>(
    out: &mut [f64],
    o: usize,
    steps: impl Iterator<Item = (&'a f64, &'a [f64])>,
    j: usize,
) {
    let mut acc = [0.0f64; TILE_COLS];
    acc.copy_from_slice(&out[o..o + TILE_COLS]);
    for (&av, brow_full) in steps {
        let brow: &[f64; TILE_COLS] = brow_full[j..j + TILE_COLS].try_into().unwrap();
        fma_row(&mut acc, av, brow);
    }
    out[o..o + TILE_COLS].copy_from_slice(&acc);
}

/// Trailing n % TILE_COLS columns of one output row, same op order.
#[inline(always)]
fn mm_tail_row<'a>(
    out: &mut [f64],
    o: usize,
    width: usize,
    steps: impl Iterator<Item = (&'a f64, &'a [f64])>,
    j: usize,
) {
    for (&av, brow_full) in steps {
        let brow = &brow_full[j..j + width];
        let orow = &mut out[o..o + width];
        for (ov, &bv) in orow.iter_mut().zip(brow) {
            *ov = av.mul_add(bv, *ov);
        }
    }
}

/// out(m x n) += a(m x k) @ b(k x n); all row-major slices.
pub fn mm_acc(out: &mut [f64], a: &[f64], m: usize, k: usize, b: &[f64], n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let tail = n % TILE_COLS;
    let mut i = 0;
    while i + 4 <= m {
        let (r0, rest) = a[i * k..].split_at(k);
        let (r1, rest) = rest.split_at(k);
        let (r2, rest) = rest.split_at(k);
        let r3 = &rest[..k];
        let mut j = 0;
        while j + TILE_COLS <= n {
            let mut a0 = [0.0f64; TILE_COLS];
            let mut a1 = [0.0f64; TILE_COLS];
            let mut a2 = [0.0f64; TILE_COLS];
            let mut a3 = [0.0f64; TILE_COLS];
            a0.copy_from_slice(&out[i * n + j..i * n + j + TILE_COLS]);
            a1.copy_from_slice(&out[(i + 1) * n + j..(i + 1) * n + j + TILE_COLS]);
            a2.copy_from_slice(&out[(i + 2) * n + j..(i + 2) * n + j + TILE_COLS]);
            a3.copy_from_slice(&out[(i + 3) * n + j..(i + 3) * n + j + TILE_COLS]);
            let avs = r0.iter().zip(r1).zip(r2.iter().zip(r3));
            for (brow_full, ((&av0, &av1), (&av2, &av3))) in b.chunks_exact(n).zip(avs) {
                let brow: &[f64; TILE_COLS] = brow_full[j..j + TILE_COLS].try_into().unwrap();
                fma_row(&mut a0, av0, brow);
                fma_row(&mut a1, av1, brow);
                fma_row(&mut a2, av2, brow);
                fma_row(&mut a3, av3, brow);
            }
            out[i * n + j..i * n + j + TILE_COLS].copy_from_slice(&a0);
            out[(i + 1) * n + j..(i + 1) * n + j + TILE_COLS].copy_from_slice(&a1);
            out[(i + 2) * n + j..(i + 2) * n + j + TILE_COLS].copy_from_slice(&a2);
            out[(i + 3) * n + j..(i + 3) * n + j + TILE_COLS].copy_from_slice(&a3);
            j += TILE_COLS;
        }
        if tail > 0 {
            for (r, arow) in [r0, r1, r2, r3].into_iter().enumerate() {
                mm_tail_row(
                    out,
                    (i + r) * n + j,
                    tail,
                    arow.iter().zip(b.chunks_exact(n)),
                    j,
                );
            }
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        let mut j = 0;
        while j + TILE_COLS <= n {
            mm_rem_row(out, i * n + j, arow.iter().zip(b.chunks_exact(n)), j);
            j += TILE_COLS;
        }
        if tail > 0 {
            mm_tail_row(out, i * n + j, tail, arow.iter().zip(b.chunks_exact(n)), j);
        }
        i += 1;
    }
}

/// out(k x n) += a(m x k)^T @ b(m x n). Same tiling as mm_acc; the a element
/// feeding output row i at contraction step p sits at a[p * k + i].
pub fn mm_at_b_acc(out: &mut [f64], a: &[f64], m: usize, k: usize, b: &[f64], n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let tail = n % TILE_COLS;
    let mut i = 0;
    while i + 4 <= k {
        let mut j = 0;
        while j + TILE_COLS <= n {
            let mut a0 = [0.0f64; TILE_COLS];
            let mut a1 = [0.0f64; TILE_COLS];
            let mut a2 = [0.0f64; TILE_COLS];
            let mut a3 = [0.0f64; TILE_COLS];
            a0.copy_from_slice(&out[i * n + j..i * n + j + TILE_COLS]);
            a1.copy_from_slice(&out[(i + 1) * n + j..(i + 1) * n + j + TILE_COLS]);
            a2.copy_from_slice(&out[(i + 2) * n + j..(i + 2) * n + j + TILE_COLS]);
            a3.copy_from_slice(&out[(i + 3) * n + j..(i + 3) * n + j + TILE_COLS]);
            for (brow_full, arow) in b.chunks_exact(n).zip(a.chunks_exact(k)) {
                let brow: &[f64; TILE_COLS] = brow_full[j..j + TILE_COLS].try_into().unwrap();
                let af: &[f64; 4] = arow[i..i + 4].try_into().unwrap();
                fma_row(&mut a0, af[0], brow);
                fma_row(&mut a1, af[1], brow);
                fma_row(&mut a2, af[2], brow);
                fma_row(&mut a3, af[3], brow);
            }
            out[i * n + j..i * n + j + TILE_COLS].copy_from_slice(&a0);
            out[(i + 1) * n + j..(i + 1) * n + j + TILE_COLS].copy_from_slice(&a1);
            out[(i + 2) * n + j..(i + 2) * n + j + TILE_COLS].copy_from_slice(&a2);
            out[(i + 3) * n + j..(i + 3) * n + j + TILE_COLS].copy_from_slice(&a3);
            j += TILE_COLS;
        }
        if tail > 0 {
            for r in 0..4 {
                mm_tail_row(
                    out,
                    (i + r) * n + j,
                    tail,
                    a[i + r..].iter().step_by(k).zip(b.chunks_exact(n)),
                    j,
                );
            }
        }
        i += 4;
    }
    while i < k {
        let avs = a[i..].iter().step_by(k);
        let mut j = 0;
        while j + TILE_COLS <= n {
            mm_rem_row(out, i * n + j, avs.clone().zip(b.chunks_exact(n)), j);
            j += TILE_COLS;
        }
        if tail > 0 {
            mm_tail_row(out, i * n + j, tail, avs.zip(b.chunks_exact(n)), j);
        }
        i += 1;
    }
}

/// out(m x k) += a(m x n) @ b(k x n)^T.
pub fn mm_a_bt_acc(out: &mut [f64], a: &[f64], m: usize, n: usize, b: &[f64], k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            orow[p] += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::from_fn(3, 5, |r, c| (r * 5 + c) as f64 * 0.25 - 1.0);
        let b = Tensor::from_fn(5, 4, |r, c| ((r + 2 * c) % 7) as f64 - 3.0);
        let got = a.matmul(&b).unwrap();
        let want = naive_mm(&a, &b);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn transpose_variants_match_explicit_transposes() {
        let a = Tensor::from_fn(4, 3, |r, c| (r as f64 - 1.5) * (c as f64 + 0.5));
        let b = Tensor::from_fn(4, 2, |r, c| ((r * 2 + c) as f64).sin());
        // a^T @ b
        let mut got = Tensor::zeros(3, 2);
        mm_at_b_acc(got.data_mut(), a.data(), 4, 3, b.data(), 2);
        let at = Tensor::from_fn(3, 4, |r, c| a.get(c, r));
        let want = naive_mm(&at, &b);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
        // b @ c^T with c 5x2
        let c = Tensor::from_fn(5, 2, |r, cc| (r + cc) as f64 * 0.1 - 0.3);
        let mut got2 = Tensor::zeros(4, 5);
        mm_a_bt_acc(got2.data_mut(), b.data(), 4, 2, c.data(), 5);
        let ct = Tensor::from_fn(2, 5, |r, cc| c.get(cc, r));
        let want2 = naive_mm(&b, &ct);
        for (g, w) in got2.iter().zip(want2.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}
