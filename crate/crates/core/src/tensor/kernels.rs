//! Raw slice kernels behind the graph ops. No shape checking happens here;
//! callers in `graph.rs` validate dims first.

use std::mem::MaybeUninit;

use super::Element;

/// `C (+)= op(A)·op(B)` where `op(A)` is `m×k` and `op(B)` is `k×n`, all
/// row-major. `ta`/`tb` mean the slice stores the transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Window {
    pub fn out_dim(&self, input: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.pad;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Unfold one `c×h×w` image into a `(c·kh·kw)×(ho·wo)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ky * win.dilation) as isize - win.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kx * win.dilation) as isize - win.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Element>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ky * win.dilation) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * win.stride + kx * win.dilation) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Integer part and weight of the source coordinate for half-pixel
/// (align-corners false) bilinear resampling.
pub fn bilinear_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let lambda = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
    (i0, i1, lambda)
}

/// Spatial offset CycleFC applies to input channel `c`.
pub fn cycle_offset(c: usize, step: usize) -> isize {
    (c % step) as isize - (step / 2) as isize
}

/// Destination range `lo..hi` whose source `i + d` stays inside `0..len`.
fn shift_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Appends one `h×w` plane with `out[y][x] = src[y+dh][x+dw]`, zero
/// outside.
pub fn shift_plane<T: Element>(src: &[T], out: &mut Vec<T>, h: usize, w: usize, dh: isize, dw: isize) {
    let (y0, y1) = shift_range(h, dh);
    let (x0, x1) = shift_range(w, dw);
    out.resize(out.len() + y0 * w, T::zero());
    for y in y0..y1 {
        let s = ((y as isize + dh) as usize * w) as isize + dw;
        out.resize(out.len() + x0, T::zero());
        if x1 > x0 {
            out.extend_from_slice(&src[(s + x0 as isize) as usize..(s + x1 as isize) as usize]);
        }
        out.resize(out.len() + w - x1, T::zero());
    }
    out.resize(out.len() + (h - y1) * w, T::zero());
}

/// Adjoint of [`shift_plane`]: `d[y+dh][x+dw] += g[y][x]`.
pub fn unshift_plane_add<T: Element>(g: &[T], d: &mut [T], h: usize, w: usize, dh: isize, dw: isize) {
    let (y0, y1) = shift_range(h, dh);
    let (x0, x1) = shift_range(w, dw);
    if x0 == x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dh) as usize;
        let s = ((sy * w) as isize + dw + x0 as isize) as usize;
        for (d, &g) in d[s..s + (x1 - x0)].iter_mut().zip(&g[y * w + x0..y * w + x1]) {
            *d += g;
        }
    }
}

/// Positions gathered per strip in [`cycle_fc_image`].
const STRIP: usize = 512;

/// Rows `y0..y1` of one shifted plane into `dst`, zero outside.
fn shift_rows<T: Element>(src: &[T], dst: &mut [T], h: usize, w: usize, dh: isize, dw: isize, y0: usize) {
    let (x0, x1) = shift_range(w, dw);
    for (r, row) in dst.chunks_mut(w).enumerate() {
        let sy = (y0 + r) as isize + dh;
        if sy < 0 || sy >= h as isize || x0 == x1 {
            row.fill(T::zero());
            continue;
        }
        let s = (sy * w as isize + dw + x0 as isize) as usize;
        row[..x0].fill(T::zero());
        row[x0..x1].copy_from_slice(&src[s..s + x1 - x0]);
        row[x1..].fill(T::zero());
    }
}

/// CycleFC on one image: `x` is `cin×h×w`, `wt` is `cout×cin`, and every
/// element of `out` (`cout×h×w`) is written, one strip of rows at a time.
#[allow(clippy::too_many_arguments)]
pub fn cycle_fc_image<T: Element>(
    x: &[T],
    wt: &[T],
    bias: Option<&[T]>,
    (cin, cout, h, w): (usize, usize, usize, usize),
    step: (usize, usize),
    out: &mut [MaybeUninit<T>],
    col: &mut Vec<T>,
) {
    let p = h * w;
    assert!(x.len() >= cin * p && wt.len() >= cin * cout && out.len() >= cout * p);
    let rows = (STRIP / w).max(1);
    col.resize(cin * rows * w, T::zero());
    let base = out.as_mut_ptr() as *mut T;
    let mut y0 = 0;
    while y0 < h {
        let y1 = (y0 + rows).min(h);
        let t = (y1 - y0) * w;
        for ch in 0..cin {
            let (dh, dw) = (cycle_offset(ch, step.0), cycle_offset(ch, step.1));
            shift_rows(&x[ch * p..(ch + 1) * p], &mut col[ch * t..(ch + 1) * t], h, w, dh, dw, y0);
        }
        // SAFETY: rows `y0..y1` of each of the `cout` planes lie inside
        // `out`; with beta zero the product never reads `c`, so the
        // uninitialised destination is only written.
        unsafe {
            let c = base.add(y0 * w);
            T::gemm(
                cout,
                cin,
                t,
                T::one(),
                wt.as_ptr(),
                cin as isize,
                1,
                col.as_ptr(),
                t as isize,
                1,
                T::zero(),
                c,
                p as isize,
                1,
            );
            if let Some(bias) = bias {
                for (co, &bv) in bias.iter().enumerate().take(cout) {
                    let row = std::slice::from_raw_parts_mut(c.add(co * p), t);
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        y0 = y1;
    }
}
