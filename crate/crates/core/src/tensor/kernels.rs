//! Raw forward/backward kernels over flat row-major buffers.
//!
//! Every reduction runs in a fixed row-major order so repeated runs are
//! bit-identical.

use super::Scalar;

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Images per im2col chunk.
    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.positions() * self.patch()).max(1)).clamp(1, self.batch.max(1))
    }
}

impl ConvGeom {
    fn padded_plane(&self) -> (usize, usize) {
        (self.h + 2 * self.pad, self.w + 2 * self.pad)
    }

    /// For tap `j` and output position `p`, the offset into one zero-padded
    /// image; stored at `j * positions + p`.
    fn tap_map(&self) -> Vec<u32> {
        let (hp, wp) = self.padded_plane();
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut map = Vec::with_capacity(self.patch() * self.positions());
        for c in 0..self.in_ch {
            for u in 0..self.kh {
                for v in 0..self.kw {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            map.push((c * hp * wp + (oy + u) * wp + ox + v) as u32);
                        }
                    }
                }
            }
        }
        map
    }
}

/// Copies image `b` into the interior of a zeroed padded buffer.
fn pad_image<T: Scalar>(x: &[T], g: &ConvGeom, b: usize, buf: &mut [T]) {
    let (hp, wp) = g.padded_plane();
    let img = g.in_ch * g.h * g.w;
    let xb = &x[b * img..(b + 1) * img];
    for c in 0..g.in_ch {
        for y in 0..g.h {
            let dst = c * hp * wp + (y + g.pad) * wp + g.pad;
            let src = (c * g.h + y) * g.w;
            buf[dst..dst + g.w].copy_from_slice(&xb[src..src + g.w]);
        }
    }
}

/// Patch-major columns: row `j` of `col` (length `nb·positions`) holds tap
/// `j` of every output position of images `b0..b0+nb`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, map: &[u32], b0: usize, nb: usize, col: &mut [T]) {
    let pos = g.positions();
    let cols = nb * pos;
    let (hp, wp) = g.padded_plane();
    let mut buf = vec![T::zero(); g.in_ch * hp * wp];
    assert!(map.iter().all(|&i| (i as usize) < buf.len()));
    for bi in 0..nb {
        pad_image(x, g, b0 + bi, &mut buf);
        for (j, m) in map.chunks_exact(pos).enumerate() {
            let dst = &mut col[j * cols + bi * pos..j * cols + (bi + 1) * pos];
            for (d, &i) in dst.iter_mut().zip(m) {
                // SAFETY: every map entry was checked against `buf.len()` above.
                *d = unsafe { *buf.get_unchecked(i as usize) };
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, map: &[u32], b0: usize, nb: usize, dx: &mut [T]) {
    let pos = g.positions();
    let cols = nb * pos;
    let (hp, wp) = g.padded_plane();
    let img = g.in_ch * g.h * g.w;
    let mut buf = vec![T::zero(); g.in_ch * hp * wp];
    assert!(map.iter().all(|&i| (i as usize) < buf.len()));
    for bi in 0..nb {
        buf.fill(T::zero());
        for (j, m) in map.chunks_exact(pos).enumerate() {
            let src = &col[j * cols + bi * pos..j * cols + (bi + 1) * pos];
            for (&s, &i) in src.iter().zip(m) {
                // SAFETY: every map entry was checked against `buf.len()` above.
                unsafe {
                    let d = buf.get_unchecked_mut(i as usize);
                    *d = *d + s;
                }
            }
        }
        let db = &mut dx[(b0 + bi) * img..(b0 + bi + 1) * img];
        for c in 0..g.in_ch {
            for y in 0..g.h {
                let src = c * hp * wp + (y + g.pad) * wp + g.pad;
                let dst = (c * g.h + y) * g.w;
                for (d, &s) in db[dst..dst + g.w].iter_mut().zip(&buf[src..src + g.w]) {
                    *d = *d + s;
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let (pos, patch, k) = (g.positions(), g.patch(), g.out_ch);
    let mut out = vec![T::zero(); g.batch * k * pos];
    let chunk = g.chunk();
    let map = g.tap_map();
    let mut col = vec![T::zero(); chunk * pos * patch];
    let mut acc = vec![T::zero(); chunk * pos * k];
    let mut b0 = 0;
    while b0 < g.batch {
        let nb = chunk.min(g.batch - b0);
        let cols = nb * pos;
        im2col(x, g, &map, b0, nb, &mut col[..cols * patch]);
        let a = &mut acc[..cols * k];
        // k × cols = w(k × patch) · col(patch × cols)
        T::gemm(
            k,
            patch,
            cols,
            w,
            patch as isize,
            1,
            &col[..cols * patch],
            cols as isize,
            1,
            T::zero(),
            a,
            cols as isize,
            1,
        );
        for bi in 0..nb {
            for kk in 0..k {
                let dst = &mut out[((b0 + bi) * k + kk) * pos..((b0 + bi) * k + kk + 1) * pos];
                let src = &a[kk * cols + bi * pos..kk * cols + (bi + 1) * pos];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[kk];
                }
            }
        }
        b0 += nb;
    }
    out
}

/// Returns (dx, dw, dbias); each only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (pos, patch, k) = (g.positions(), g.patch(), g.out_ch);
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); k];
        for b in 0..g.batch {
            for (kk, acc) in db.iter_mut().enumerate() {
                let s = &dout[(b * k + kk) * pos..(b * k + kk + 1) * pos];
                *acc = s.iter().fold(*acc, |a, &v| a + v);
            }
        }
        db
    });
    if dx.is_none() && dw.is_none() {
        return (dx, dw, db);
    }
    let chunk = g.chunk();
    let map = g.tap_map();
    let mut col = vec![T::zero(); chunk * pos * patch];
    let mut drows = vec![T::zero(); chunk * pos * k];
    let mut b0 = 0;
    while b0 < g.batch {
        let nb = chunk.min(g.batch - b0);
        let cols = nb * pos;
        let dr = &mut drows[..cols * k];
        for bi in 0..nb {
            for kk in 0..k {
                let src = &dout[((b0 + bi) * k + kk) * pos..((b0 + bi) * k + kk + 1) * pos];
                dr[kk * cols + bi * pos..kk * cols + (bi + 1) * pos].copy_from_slice(src);
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(x, g, &map, b0, nb, &mut col[..cols * patch]);
            // k × patch += dr(k × cols) · colᵀ(cols × patch)
            T::gemm_acc(
                k,
                cols,
                patch,
                dr,
                cols as isize,
                1,
                &col[..cols * patch],
                1,
                cols as isize,
                dw,
                patch as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let c = &mut col[..cols * patch];
            // patch × cols = wᵀ(patch × k) · dr(k × cols)
            T::gemm(patch, k, cols, w, 1, patch as isize, dr, cols as isize, 1, T::zero(), c, cols as isize, 1);
            col2im_add(c, g, &map, b0, nb, dx);
        }
        b0 += nb;
    }
    (dx, dw, db)
}

/// Max pooling without padding. Returns output and flat argmax into the input.
pub(crate) fn maxpool2d_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<u32>, usize, usize) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * stride * w + j * stride;
                for u in 0..k {
                    for v in 0..k {
                        let idx = base + (i * stride + u) * w + j * stride + v;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg, oh, ow)
}

/// (outer, axis extent, inner) view of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum = sum + e;
            }
            if log {
                let ls = sum.ln();
                for j in 0..n {
                    out[at(j)] = x[at(j)] - max - ls;
                }
            } else {
                for j in 0..n {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
    }
    out
}

/// Gradient of softmax (given its output `y`) or log-softmax (given `y` = log-probs).
pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    shape: &[usize],
    axis: usize,
    log: bool,
) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            if log {
                let mut s = T::zero();
                for j in 0..n {
                    s = s + dy[at(j)];
                }
                for j in 0..n {
                    dx[at(j)] = dy[at(j)] - y[at(j)].exp() * s;
                }
            } else {
                let mut dot = T::zero();
                for j in 0..n {
                    dot = dot + dy[at(j)] * y[at(j)];
                }
                for j in 0..n {
                    dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
                }
            }
        }
    }
    dx
}

pub(crate) fn sum_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let src = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
        }
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output element, the flat source index under `src_strides`.
pub(crate) fn gather_map(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

/// Source strides for broadcasting `in_shape` (right-aligned) to `out_shape`.
pub(crate) fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape.len() > out_shape.len() {
        return None;
    }
    let lead = out_shape.len() - in_shape.len();
    let st = strides(in_shape);
    let mut out = vec![0; out_shape.len()];
    for (i, &e) in in_shape.iter().enumerate() {
        let o = out_shape[lead + i];
        if e == o {
            out[lead + i] = st[i];
        } else if e != 1 {
            return None;
        }
    }
    Some(out)
}

/// Origins of all stride-1 windows of size `win` in an `n`×`n` plane, row-major.
pub(crate) fn window_origins(n: usize, win: usize) -> Vec<(usize, usize)> {
    let per = n + 1 - win;
    (0..per * per).map(|i| (i / per, i % per)).collect()
}

/// [B, C, N, N] → [B·R, C, W, W]
pub(crate) fn extract_windows<T: Scalar>(x: &[T], b: usize, c: usize, n: usize, win: usize) -> Vec<T> {
    let origins = window_origins(n, win);
    let mut out = Vec::with_capacity(b * origins.len() * c * win * win);
    for bi in 0..b {
        for &(r0, c0) in &origins {
            for ch in 0..c {
                let plane = &x[(bi * c + ch) * n * n..(bi * c + ch + 1) * n * n];
                for u in 0..win {
                    let row = (r0 + u) * n + c0;
                    out.extend_from_slice(&plane[row..row + win]);
                }
            }
        }
    }
    out
}

pub(crate) fn extract_windows_backward<T: Scalar>(
    dy: &[T],
    b: usize,
    c: usize,
    n: usize,
    win: usize,
) -> Vec<T> {
    let origins = window_origins(n, win);
    let mut dx = vec![T::zero(); b * c * n * n];
    let mut k = 0;
    for bi in 0..b {
        for &(r0, c0) in &origins {
            for ch in 0..c {
                let plane = &mut dx[(bi * c + ch) * n * n..(bi * c + ch + 1) * n * n];
                for u in 0..win {
                    let row = (r0 + u) * n + c0;
                    for v in 0..win {
                        plane[row + v] = plane[row + v] + dy[k];
                        k += 1;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_map_transposes() {
        // 2×3 source read as its 3×2 transpose
        let map = gather_map(&[3, 2], &[1, 3]);
        assert_eq!(map, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn broadcast_strides_rules() {
        assert_eq!(broadcast_strides(&[3], &[2, 3]), Some(vec![0, 1]));
        assert_eq!(broadcast_strides(&[1], &[2, 3]), Some(vec![0, 0]));
        assert_eq!(broadcast_strides(&[2, 1], &[2, 3]), Some(vec![1, 0]));
        assert_eq!(broadcast_strides(&[2], &[2, 3]), None);
    }

    #[test]
    fn conv_chunking_matches_single_pass() {
        let g = ConvGeom {
            batch: 7,
            in_ch: 2,
            h: 4,
            w: 4,
            out_ch: 3,
            kh: 3,
            kw: 3,
            pad: 1,
        };
        let x: Vec<f64> = (0..g.batch * 2 * 16).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let b = vec![0.5, -1.0, 2.0];
        let full = conv2d_forward(&x, &w, &b, &g);
        // per-image reference
        let mut one = g;
        one.batch = 1;
        for bi in 0..g.batch {
            let xi = &x[bi * 32..(bi + 1) * 32];
            let yi = conv2d_forward(xi, &w, &b, &one);
            assert_eq!(&full[bi * 48..(bi + 1) * 48], &yi[..]);
        }
    }
}
