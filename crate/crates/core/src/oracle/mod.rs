//! Naive reference implementations used to cross-check the tensor engine.
//!
//! Everything here is written as direct loops over the defining formulas and
//! does its own index arithmetic; nothing calls into the engine's kernels.

#![allow(clippy::needless_range_loop)]

mod gradcheck;

pub use gradcheck::{
    block_suite, check_loss, check_module, loss_suite, model_suite, relative_error, GradReport, BLOCK_TOLERANCE,
    SINGLE_TOLERANCE,
};

use crate::tensor::{Element, Tensor};

/// 64-bit mirror of [`Tensor`] for tight-tolerance comparisons.
pub type ShadowTensor = Tensor<f64>;

fn dims4(t: &ShadowTensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "oracle expects rank-4 tensors, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Six nested loops over
/// `out(n,o,i,j) = b(o) + Σ_c Σ_ky Σ_kx x(n,c,i·s+r·ky−p, j·s+r·kx−p)·w(o,c,ky,kx)`.
pub fn naive_conv2d(
    x: &ShadowTensor,
    w: &ShadowTensor,
    b: Option<&[f64]>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> ShadowTensor {
    let (n, cin, h, wd) = dims4(x);
    let (cout, wcin, kh, kw) = dims4(w);
    assert_eq!(cin, wcin);
    let ho = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    let wo = (wd + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * cout * ho * wo];
    for bn in 0..n {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let yy = (i * stride + dilation * ky) as isize - padding as isize;
                                let xx = (j * stride + dilation * kx) as isize - padding as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((bn * cin + c) * h + yy as usize) * wd + xx as usize];
                                let wv = wdat[((o * cin + c) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bn * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).expect("shape matches data")
}

/// Scatter form of the transposed convolution: each input pixel adds
/// `x·w(c,o,ky,kx)` at `(i·s+ky, j·s+kx)`. `w` is `Cin×Cout×K×K`.
pub fn naive_conv_transpose2d(x: &ShadowTensor, w: &ShadowTensor, b: Option<&[f64]>, stride: usize) -> ShadowTensor {
    let (n, cin, h, wd) = dims4(x);
    let (wcin, cout, kh, kw) = dims4(w);
    assert_eq!(cin, wcin);
    let ho = (h - 1) * stride + kh;
    let wo = (wd - 1) * stride + kw;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bn in 0..n {
        for o in 0..cout {
            for p in 0..ho * wo {
                out[(bn * cout + o) * ho * wo + p] = b.map_or(0.0, |b| b[o]);
            }
        }
        for c in 0..cin {
            for i in 0..h {
                for j in 0..wd {
                    let xv = x.data()[((bn * cin + c) * h + i) * wd + j];
                    for o in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = w.data()[((c * cout + o) * kh + ky) * kw + kx];
                                out[((bn * cout + o) * ho + i * stride + ky) * wo + j * stride + kx] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).expect("shape matches data")
}

/// Per-pixel affine map `out_i = W·y_i + b` (a 1×1 convolution written as a
/// matrix-vector product). `w` is `Cout×Cin` (any trailing 1×1 dims ignored).
fn pixel_affine(y: &ShadowTensor, w: &ShadowTensor, b: &[f64]) -> Vec<Vec<Vec<f64>>> {
    let (n, cin, h, wd) = dims4(y);
    let cout = w.shape()[0];
    (0..n)
        .map(|bn| {
            (0..h * wd)
                .map(|p| {
                    (0..cout)
                        .map(|o| {
                            b[o] + (0..cin)
                                .map(|c| w.data()[o * cin + c] * y.data()[(bn * cin + c) * h * wd + p])
                                .sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn dense_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Attention projections for [`naive_attention`].
pub struct Projections<'a> {
    pub wq: &'a ShadowTensor,
    pub bq: &'a [f64],
    pub wk: &'a ShadowTensor,
    pub bk: &'a [f64],
    pub wv: &'a ShadowTensor,
    pub bv: &'a [f64],
}

/// `out_j = α·Σ_i S_ij·V_i + Y_j` with `S_i· = softmax_j(Q_i·K_j)`, positions
/// flattened row-major.
pub fn naive_attention(y: &ShadowTensor, p: &Projections, alpha: f64) -> ShadowTensor {
    let (n, c, h, w) = dims4(y);
    let hw = h * w;
    let q = pixel_affine(y, p.wq, p.bq);
    let k = pixel_affine(y, p.wk, p.bk);
    let v = pixel_affine(y, p.wv, p.bv);
    let mut out = y.data().to_vec();
    for bn in 0..n {
        let s: Vec<Vec<f64>> = (0..hw)
            .map(|i| {
                let scores: Vec<f64> = (0..hw)
                    .map(|j| (0..c).map(|ch| q[bn][i][ch] * k[bn][j][ch]).sum())
                    .collect();
                dense_softmax(&scores)
            })
            .collect();
        for j in 0..hw {
            for ch in 0..c {
                let mut acc = 0.0;
                for i in 0..hw {
                    acc += s[i][j] * v[bn][i][ch];
                }
                out[(bn * c + ch) * hw + j] += alpha * acc;
            }
        }
    }
    Tensor::new(&[n, c, h, w], out).expect("shape matches data")
}

/// Row-stochastic position map `S` of one sample, for inspection.
pub fn naive_attention_map(y: &ShadowTensor, p: &Projections, sample: usize) -> Vec<Vec<f64>> {
    let (_, c, h, w) = dims4(y);
    let q = pixel_affine(y, p.wq, p.bq);
    let k = pixel_affine(y, p.wk, p.bk);
    (0..h * w)
        .map(|i| {
            let scores: Vec<f64> = (0..h * w)
                .map(|j| (0..c).map(|ch| q[sample][i][ch] * k[sample][j][ch]).sum())
                .collect();
            dense_softmax(&scores)
        })
        .collect()
}

/// `out(p,c) = β·Σ_d F(p,d)·M(c,d) + F(p,c)` with `M = softmax(FᵀF)` row-wise.
pub fn naive_channel_attention(f: &ShadowTensor, beta: f64) -> ShadowTensor {
    let (n, c, h, w) = dims4(f);
    let hw = h * w;
    let fd = f.data();
    let mut out = fd.to_vec();
    for bn in 0..n {
        let at = |p: usize, ch: usize| fd[(bn * c + ch) * hw + p];
        let map: Vec<Vec<f64>> = (0..c)
            .map(|a| {
                let energy: Vec<f64> = (0..c).map(|b| (0..hw).map(|p| at(p, a) * at(p, b)).sum()).collect();
                dense_softmax(&energy)
            })
            .collect();
        for p in 0..hw {
            for ch in 0..c {
                let mixed: f64 = (0..c).map(|d| at(p, d) * map[ch][d]).sum();
                out[(bn * c + ch) * hw + p] += beta * mixed;
            }
        }
    }
    Tensor::new(&[n, c, h, w], out).expect("shape matches data")
}

/// Gathers `X(c, i+δh(c), j+δw(c))` into a `(H·W)×Cin` matrix per sample,
/// then multiplies by `Wᵀ` and adds `b`. `w` is `Cout×Cin` (trailing 1×1
/// ignored); `δ(c) = (c mod S) − ⌊S/2⌋`.
pub fn naive_cyclefc(x: &ShadowTensor, w: &ShadowTensor, b: &[f64], stepsize: (usize, usize)) -> ShadowTensor {
    let (n, cin, h, wd) = dims4(x);
    let cout = w.shape()[0];
    let delta = |c: usize, s: usize| (c % s) as isize - (s / 2) as isize;
    let mut out = vec![0.0; n * cout * h * wd];
    for bn in 0..n {
        let mut gathered = vec![vec![0.0; cin]; h * wd];
        for i in 0..h {
            for j in 0..wd {
                for c in 0..cin {
                    let si = i as isize + delta(c, stepsize.0);
                    let sj = j as isize + delta(c, stepsize.1);
                    if si >= 0 && sj >= 0 && si < h as isize && sj < wd as isize {
                        gathered[i * wd + j][c] = x.data()[((bn * cin + c) * h + si as usize) * wd + sj as usize];
                    }
                }
            }
        }
        for (p, row) in gathered.iter().enumerate() {
            for o in 0..cout {
                let dot: f64 = (0..cin).map(|c| row[c] * w.data()[o * cin + c]).sum();
                out[(bn * cout + o) * h * wd + p] = dot + b[o];
            }
        }
    }
    Tensor::new(&[n, cout, h, wd], out).expect("shape matches data")
}

/// Half-pixel bilinear interpolation written from the coordinate formula
/// `src = (dst + ½)/f − ½`, clamped to the border.
pub fn naive_upsample_bilinear(x: &ShadowTensor, factor: usize) -> ShadowTensor {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (h * factor, w * factor);
    let sample = |plane: &[f64], sy: f64, sx: f64| {
        let sy = sy.clamp(0.0, (h - 1) as f64);
        let sx = sx.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ly, lx) = (sy - y0 as f64, sx - x0 as f64);
        let v = |y: usize, x: usize| plane[y * w + x];
        (1.0 - ly) * ((1.0 - lx) * v(y0, x0) + lx * v(y0, x1)) + ly * ((1.0 - lx) * v(y1, x0) + lx * v(y1, x1))
    };
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for i in 0..ho {
            for j in 0..wo {
                let sy = (i as f64 + 0.5) / factor as f64 - 0.5;
                let sx = (j as f64 + 0.5) / factor as f64 - 0.5;
                out.push(sample(plane, sy, sx));
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out).expect("shape matches data")
}

/// FD step for the element type: `1e-3` at 32 bits, `1e-5` at 64 bits.
pub fn fd_step<T: Element>() -> f64 {
    if std::mem::size_of::<T>() == 4 {
        1e-3
    } else {
        1e-5
    }
}

/// Central differences `(f(x+h·e_i) − f(x−h·e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<T: Element>(mut f: impl FnMut(&Tensor<T>) -> f64, x: &Tensor<T>, h: f64) -> ShadowTensor {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.to_f64_lossy() + h);
        let up = f(&probe);
        probe.data_mut()[i] = T::from_f64(orig.to_f64_lossy() - h);
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad).expect("shape matches data")
}

/// Set sizes from pixel-by-pixel enumeration of two binary masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SetCounts {
    pub pred: u64,
    pub gt: u64,
    pub intersection: u64,
    pub union: u64,
}

impl SetCounts {
    fn or_one(num: u64, den: u64) -> f64 {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn iou(&self) -> f64 {
        Self::or_one(self.intersection, self.union)
    }

    pub fn dsc(&self) -> f64 {
        Self::or_one(2 * self.intersection, self.pred + self.gt)
    }

    /// Via precision `|P∩G|/|P|` and recall `|P∩G|/|G|`.
    pub fn f1(&self) -> f64 {
        if self.union == 0 {
            return 1.0;
        }
        if self.intersection == 0 {
            return 0.0;
        }
        let p = self.intersection as f64 / self.pred as f64;
        let r = self.intersection as f64 / self.gt as f64;
        2.0 * p * r / (p + r)
    }
}

/// Counts `|P|`, `|G|`, `|P∩G|`, `|P∪G|` where `P = {pred == class}` and
/// `G = {gt == class}`.
pub fn enumerate_metrics(pred: &[u8], gt: &[u8], class: u8) -> SetCounts {
    let mut s = SetCounts {
        pred: 0,
        gt: 0,
        intersection: 0,
        union: 0,
    };
    for (&p, &g) in pred.iter().zip(gt) {
        let (inp, ing) = (p == class, g == class);
        s.pred += u64::from(inp);
        s.gt += u64::from(ing);
        s.intersection += u64::from(inp && ing);
        s.union += u64::from(inp || ing);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_sum_is_ones() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0);
        let g = finite_diff_grad(|t: &ShadowTensor| t.data().iter().sum(), &x, fd_step::<f64>());
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn fd_of_sum_of_squares_is_twice_x() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let g = finite_diff_grad(|t: &ShadowTensor| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn fd_in_single_precision_uses_wider_step() {
        assert_eq!(fd_step::<f32>(), 1e-3);
        let x = Tensor::<f32>::from_fn(&[4], |i| i as f32);
        let g = finite_diff_grad(|t: &Tensor<f32>| t.data().iter().map(|&v| (v as f64).powi(2)).sum(), &x, 1e-3);
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * *xi as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn identity_kernel_conv_copies_input() {
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64);
        let mut w = Tensor::zeros(&[2, 2, 3, 3]);
        w.data_mut()[4] = 1.0;
        w.data_mut()[9 + 9 + 9 + 4] = 1.0;
        let y = naive_conv2d(&x, &w, None, 1, 1, 1);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_input_conv_gives_bias_only() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| i as f64);
        let y = naive_conv2d(&x, &w, None, 1, 2, 2);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    fn identity_projections(c: usize) -> (ShadowTensor, Vec<f64>) {
        (Tensor::from_fn(&[c, c, 1, 1], |i| f64::from(u8::from(i / c == i % c))), vec![0.0; c])
    }

    #[test]
    fn attention_rows_are_stochastic_and_alpha_zero_is_identity() {
        let y = Tensor::from_fn(&[1, 2, 2, 2], |i| (i as f64 * 0.7).sin());
        let (w, b) = identity_projections(2);
        let p = Projections {
            wq: &w,
            bq: &b,
            wk: &w,
            bk: &b,
            wv: &w,
            bv: &b,
        };
        for row in naive_attention_map(&y, &p, 0) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(naive_attention(&y, &p, 0.0).data(), y.data());
    }

    #[test]
    fn attention_two_by_two_enumeration() {
        // two channels, positions p0..p3; identity projections so Q = K = V = Y.
        let y = Tensor::new(&[1, 2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let (w, b) = identity_projections(2);
        let p = Projections {
            wq: &w,
            bq: &b,
            wk: &w,
            bk: &b,
            wv: &w,
            bv: &b,
        };
        // vectors: p0=(1,0) p1=(0,1) p2=(0,1) p3=(1,0); dot = 1 when equal, else 0.
        let e = std::f64::consts::E;
        let z = 2.0 * e + 2.0;
        let out = naive_attention(&y, &p, 1.0);
        // column j = p0 receives from rows i with S[i][0]: p0,p3 give e/z, p1,p2 give 1/z.
        let ch0 = 1.0 + (e / z) * 1.0 + (1.0 / z) * 0.0 + (1.0 / z) * 0.0 + (e / z) * 1.0;
        assert!((out.data()[0] - ch0).abs() < 1e-12);
    }

    #[test]
    fn cyclefc_single_channel_shift_down() {
        let x = Tensor::from_fn(&[1, 1, 3, 2], |i| i as f64 + 1.0);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let y = naive_cyclefc(&x, &w, &[0.0], (3, 1));
        assert_eq!(y.data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn cyclefc_unit_stepsize_is_pointwise_matmul() {
        let x = Tensor::from_fn(&[1, 3, 2, 2], |i| (i as f64).cos());
        let w = Tensor::from_fn(&[2, 3, 1, 1], |i| i as f64 - 2.0);
        let b = [0.5, -0.5];
        let y = naive_cyclefc(&x, &w, &b, (1, 1));
        let z = naive_conv2d(&x, &w, Some(&b), 1, 0, 1);
        assert!(y.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn bilinear_constant_stays_constant() {
        let x = Tensor::full(&[1, 1, 3, 3], 2.5);
        let y = naive_upsample_bilinear(&x, 2);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn enumeration_of_shared_metric_examples() {
        let pred = [1, 1, 0, 0];
        let gt = [0, 1, 1, 0];
        let s = enumerate_metrics(&pred, &gt, 1);
        assert!((s.iou() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.dsc(), 0.5);
        assert_eq!(s.f1(), 0.5);
        let same = enumerate_metrics(&gt, &gt, 1);
        assert_eq!((same.iou(), same.dsc(), same.f1()), (1.0, 1.0, 1.0));
        let disjoint = enumerate_metrics(&[1, 0], &[0, 1], 1);
        assert_eq!((disjoint.iou(), disjoint.dsc(), disjoint.f1()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn relative_error_floors_tiny_entries() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!(relative_error(&[1.0, 1e-9], &[1.0, 0.0]) < 1e-5);
        assert!(relative_error(&[1.1], &[1.0]) > 0.09);
    }

    #[test]
    fn single_precision_gradients_match_shadow_reference() {
        for r in block_suite::<f32>(11).unwrap().into_iter().chain(loss_suite::<f32>(11).unwrap()) {
            assert!(r.passed(SINGLE_TOLERANCE), "{} worst {}", r.name, r.worst);
        }
    }

    #[test]
    fn gradient_suites_pass_in_shadow_precision() {
        for r in block_suite::<f64>(7).unwrap().into_iter().chain(loss_suite::<f64>(7).unwrap()) {
            println!("{:<22} worst {:.3e} over {} coords", r.name, r.worst, r.coords);
            assert!(r.passed(BLOCK_TOLERANCE), "{} worst {}", r.name, r.worst);
        }
    }
}
