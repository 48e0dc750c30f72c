//! Numeric kernels shared by the forward and backward rules of the graph.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::Real;

/// A strided read-only view of a matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [Real],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    /// Dense row-major `rows × cols`, optionally read transposed.
    pub fn dense(data: &'a [Real], cols: usize, transposed: bool) -> Self {
        if transposed {
            Self { data, offset: 0, rs: 1, cs: cols }
        } else {
            Self { data, offset: 0, rs: cols, cs: 1 }
        }
    }

    pub fn t(self) -> Self {
        Self {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

/// `c = alpha * a·b + beta * c` where `a` is `m×k`, `b` is `k×n` and `c` is
/// `m×n` stored with row stride `rsc`, starting at `c_off`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: Real,
    c: &mut [Real],
    c_off: usize,
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!(c_off + (m - 1) * rsc + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[c_off + i * rsc..c_off + i * rsc + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above for the given extents.
    unsafe {
        gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            1,
        );
    }
}

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as gemm_raw;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as gemm_raw;

/// Maps every flat index of `out_shape` to the flat index of `b_shape`
/// under right-aligned broadcasting. Returns `None` when `b` cannot be
/// broadcast into `out`.
pub(crate) fn broadcast_map(out_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if b_shape.len() > out_shape.len() {
        return None;
    }
    let offset = out_shape.len() - b_shape.len();
    for (i, &bd) in b_shape.iter().enumerate() {
        if bd != 1 && bd != out_shape[offset + i] {
            return None;
        }
    }
    let n: usize = out_shape.iter().product();
    let mut b_strides = vec![0usize; out_shape.len()];
    let mut stride = 1;
    for i in (0..b_shape.len()).rev() {
        if b_shape[i] != 1 {
            b_strides[offset + i] = stride;
        }
        stride *= b_shape[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut bi = 0usize;
    for _ in 0..n {
        map.push(bi);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            bi += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            bi -= b_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

/// Row-wise RMS normalization over contiguous groups of `group` values.
/// Returns the output and the per-group inverse RMS.
pub(crate) fn rmsnorm_groups(x: &[Real], group: usize, eps: Real) -> (Vec<Real>, Vec<Real>) {
    let mut out = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / group.max(1));
    for (xs, ys) in x.chunks(group).zip(out.chunks_mut(group)) {
        let ms = xs.iter().map(|v| v * v).sum::<Real>() / group as Real;
        let r = 1.0 / math::sqrt(ms + eps);
        for (y, v) in ys.iter_mut().zip(xs) {
            *y = v * r;
        }
        inv.push(r);
    }
    (out, inv)
}

/// Angles `position / base^(2i/d_head)` for `i < d_head/2`, as (cos, sin).
pub(crate) fn rope_table(position: usize, half: usize, base: Real) -> Vec<(Real, Real)> {
    let d_head = (2 * half) as Real;
    (0..half)
        .map(|i| {
            let freq = 1.0 / math::powf(base, (2 * i) as Real / d_head);
            let angle = position as Real * freq;
            (math::cos(angle), math::sin(angle))
        })
        .collect()
}

/// Rotates feature pairs `(j, j + d_head/2)` of every head in every row.
/// `inverse` rotates by the negative angle (the backward rule).
pub(crate) fn rope_rows(
    x: &[Real],
    cols: usize,
    d_head: usize,
    positions: &[usize],
    base: Real,
    inverse: bool,
) -> Vec<Real> {
    let half = d_head / 2;
    let mut out = vec![0.0; x.len()];
    for (r, &pos) in positions.iter().enumerate() {
        let table = rope_table(pos, half, base);
        let row = &x[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        for h in 0..cols / d_head {
            let base_i = h * d_head;
            for (j, &(c, s)) in table.iter().enumerate() {
                let s = if inverse { -s } else { s };
                let x1 = row[base_i + j];
                let x2 = row[base_i + half + j];
                orow[base_i + j] = x1 * c - x2 * s;
                orow[base_i + half + j] = x1 * s + x2 * c;
            }
        }
    }
    out
}

/// Shapes for the fused multi-head attention kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub n_q: usize,
    pub n_k: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub d_head: usize,
}

/// Masked softmax attention. `mask[i * n_k + j]` allows query `i` to see key
/// `j`. Returns the output `[n_q, heads*d_head]` and the attention weights
/// `[heads, n_q, n_k]`.
pub(crate) fn attention_forward(
    q: &[Real],
    k: &[Real],
    v: &[Real],
    mask: &[bool],
    dims: AttnDims,
) -> (Vec<Real>, Vec<Real>) {
    let AttnDims {
        n_q,
        n_k,
        heads,
        kv_heads,
        d_head,
    } = dims;
    let qc = heads * d_head;
    let kc = kv_heads * d_head;
    let group = heads / kv_heads;
    let scale = 1.0 / math::sqrt(d_head as Real);
    let mut probs = vec![0.0; heads * n_q * n_k];
    let mut out = vec![0.0; n_q * qc];
    for h in 0..heads {
        let kh = h / group;
        let p = &mut probs[h * n_q * n_k..(h + 1) * n_q * n_k];
        let qv = MatRef { data: q, offset: h * d_head, rs: qc, cs: 1 };
        let kt = MatRef { data: k, offset: kh * d_head, rs: kc, cs: 1 }.t();
        gemm(n_q, d_head, n_k, scale, qv, kt, 0.0, p, 0, n_k);
        for i in 0..n_q {
            let row = &mut p[i * n_k..(i + 1) * n_k];
            let allowed = &mask[i * n_k..(i + 1) * n_k];
            let mut mx = Real::NEG_INFINITY;
            for (s, &ok) in row.iter().zip(allowed) {
                if ok && *s > mx {
                    mx = *s;
                }
            }
            if mx == Real::NEG_INFINITY {
                row.iter_mut().for_each(|s| *s = 0.0);
                continue;
            }
            let mut total = 0.0;
            for (s, &ok) in row.iter_mut().zip(allowed) {
                *s = if ok { math::exp(*s - mx) } else { 0.0 };
                total += *s;
            }
            row.iter_mut().for_each(|s| *s /= total);
        }
        let pv = MatRef { data: p, offset: 0, rs: n_k, cs: 1 };
        let vv = MatRef { data: v, offset: kh * d_head, rs: kc, cs: 1 };
        gemm(n_q, n_k, d_head, 1.0, pv, vv, 0.0, &mut out, h * d_head, qc);
    }
    (out, probs)
}

/// Backward rule for [`attention_forward`]; returns `(dq, dk, dv)`.
pub(crate) fn attention_backward(
    q: &[Real],
    k: &[Real],
    v: &[Real],
    probs: &[Real],
    dout: &[Real],
    dims: AttnDims,
) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let AttnDims {
        n_q,
        n_k,
        heads,
        kv_heads,
        d_head,
    } = dims;
    let qc = heads * d_head;
    let kc = kv_heads * d_head;
    let group = heads / kv_heads;
    let scale = 1.0 / math::sqrt(d_head as Real);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut ds = vec![0.0; n_q * n_k];
    for h in 0..heads {
        let kh = h / group;
        let p = &probs[h * n_q * n_k..(h + 1) * n_q * n_k];
        let do_h = MatRef { data: dout, offset: h * d_head, rs: qc, cs: 1 };
        // dV += Pᵀ dO
        let pt = MatRef { data: p, offset: 0, rs: n_k, cs: 1 }.t();
        gemm(n_k, n_q, d_head, 1.0, pt, do_h, 1.0, &mut dv, kh * d_head, kc);
        // dP = dO Vᵀ
        let vt = MatRef { data: v, offset: kh * d_head, rs: kc, cs: 1 }.t();
        gemm(n_q, d_head, n_k, 1.0, do_h, vt, 0.0, &mut ds, 0, n_k);
        for i in 0..n_q {
            let prow = &p[i * n_k..(i + 1) * n_k];
            let drow = &mut ds[i * n_k..(i + 1) * n_k];
            let dot: Real = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
            for (d, &pp) in drow.iter_mut().zip(prow) {
                *d = pp * (*d - dot);
            }
        }
        let dsv = MatRef { data: &ds, offset: 0, rs: n_k, cs: 1 };
        let kv = MatRef { data: k, offset: kh * d_head, rs: kc, cs: 1 };
        gemm(n_q, n_k, d_head, scale, dsv, kv, 0.0, &mut dq, h * d_head, qc);
        let qv = MatRef { data: q, offset: h * d_head, rs: qc, cs: 1 };
        gemm(n_k, n_q, d_head, scale, dsv.t(), qv, 1.0, &mut dk, kh * d_head, kc);
    }
    (dq, dk, dv)
}
