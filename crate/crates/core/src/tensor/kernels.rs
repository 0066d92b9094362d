//! Raw slice kernels shared by the graph ops.

use crate::error::{Error, Result};

/// `c = a · b + beta · c` where `a` is `m×k` (or `k×m` when `ta`) and `b` is
/// `k×n` (or `n×k` when `tb`), all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major layouts whose
    // lengths are checked by the debug assertions; `c` does not alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits a shape into (outer, axis extent, inner) around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::IndexOutOfRange {
            what: "axis",
            index: axis,
            len: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_inplace(data: &mut [f64], outer: usize, size: usize, inner: usize) {
    for o in 0..outer {
        let base = o * size * inner;
        for i in 0..inner {
            let at = |c: usize| base + c * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for c in 0..size {
                mx = mx.max(data[at(c)]);
            }
            let mut sum = 0.0;
            for c in 0..size {
                let e = (data[at(c)] - mx).exp();
                data[at(c)] = e;
                sum += e;
            }
            for c in 0..size {
                data[at(c)] /= sum;
            }
        }
    }
}

pub(crate) fn max_along(
    data: &[f64],
    outer: usize,
    size: usize,
    inner: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut vals = Vec::with_capacity(outer * inner);
    let mut idx = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let base = o * size * inner;
        for i in 0..inner {
            let mut best = 0;
            let mut bv = data[base + i];
            for c in 1..size {
                let v = data[base + c * inner + i];
                // strict: ties keep the lower index
                if v > bv {
                    bv = v;
                    best = c;
                }
            }
            vals.push(bv);
            idx.push(best);
        }
    }
    (vals, idx)
}

/// Unfolds one `c×h×w` image into a `(c·k·k) × (h·w)` column matrix for a
/// stride-1 convolution with zero padding `k/2`.
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dr = ki as isize - pad;
                let dc = kj as isize - pad;
                for r in 0..h {
                    let sr = r as isize + dr;
                    let out = &mut dst[r * w..(r + 1) * w];
                    if sr < 0 || sr >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sr as usize * w..(sr as usize + 1) * w];
                    let lo = (-dc).max(0) as usize;
                    let hi = (w as isize - dc.max(0)) as usize;
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let s0 = (lo as isize + dc) as usize;
                    out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `dx`.
pub(crate) fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let dr = ki as isize - pad;
                let dc = kj as isize - pad;
                for r in 0..h {
                    let sr = r as isize + dr;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let lo = (-dc).max(0) as usize;
                    let hi = (w as isize - dc.max(0)) as usize;
                    let s0 = (lo as isize + dc) as usize;
                    let dst = &mut plane[sr as usize * w + s0..sr as usize * w + s0 + (hi - lo)];
                    for (d, s) in dst.iter_mut().zip(&src[r * w + lo..r * w + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Permutes a row-major array with extents `shape` so that output axis `i`
/// is input axis `axes[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (lext, lstride) = (out_shape[last], strides[last]);
    'outer: loop {
        let base: usize = idx[..last].iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..lext {
            out.push(data[base + j * lstride]);
        }
        let mut d = last;
        loop {
            if d == 0 {
                break 'outer;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
