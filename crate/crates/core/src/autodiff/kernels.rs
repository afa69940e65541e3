//! Dense numeric kernels behind the tape operators.

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c`, with `op` a transpose
/// when the matching flag is set. `a` is stored `m x k` (or `k x m` when
/// transposed), `b` is `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the length assertions above bound every index matrixmultiply
    // derives from (m, k, n) and the row/column strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Valid output-column range `[lo, hi)` for tap offset `kx` (stride 1).
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let off = kx as isize - g.pad as isize;
    let lo = (-off).max(0) as usize;
    let hi = ((g.w as isize - off).min(g.out_w as isize)).max(lo as isize) as usize;
    (lo.min(g.out_w), hi)
}

fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let hw = g.col_cols();
    for c in 0..g.in_ch {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let off = kx as isize - g.pad as isize;
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if hi > lo {
                            let s0 = (lo as isize + off) as usize;
                            line[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let hw = g.col_cols();
    for c in 0..g.in_ch {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        if hi > lo {
                            let d0 = (lo as isize + kx as isize - g.pad as isize) as usize;
                            dst[d0..d0 + (hi - lo)]
                                .iter_mut()
                                .zip(&line[lo..hi])
                                .for_each(|(d, s)| *d += s);
                        }
                        continue;
                    }
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_sz = g.in_ch * g.h * g.w;
    let out_hw = g.col_cols();
    let out_sz = g.out_ch * out_hw;
    let mut out = vec![0.0; g.batch * out_sz];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * out_hw]
    };
    for n in 0..g.batch {
        let img = &input[n * in_sz..(n + 1) * in_sz];
        let dst = &mut out[n * out_sz..(n + 1) * out_sz];
        let cols_ref: &[f64] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        gemm(
            g.out_ch,
            g.col_rows(),
            out_hw,
            kernel,
            false,
            cols_ref,
            false,
            0.0,
            dst,
        );
        if let Some(b) = bias {
            for (o, plane) in dst.chunks_mut(out_hw).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    out
}

/// Gradients of a cross-correlation. Each requested output buffer is
/// accumulated into, not overwritten.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let in_sz = g.in_ch * g.h * g.w;
    let out_hw = g.col_cols();
    let out_sz = g.out_ch * out_hw;
    let rows = g.col_rows();

    if let Some(gb) = grad_bias {
        for n in 0..g.batch {
            let go = &grad_out[n * out_sz..(n + 1) * out_sz];
            for (o, plane) in go.chunks(out_hw).enumerate() {
                gb[o] += plane.iter().sum::<f64>();
            }
        }
    }

    if let Some(gk) = grad_kernel {
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * out_hw]
        };
        for n in 0..g.batch {
            let img = &input[n * in_sz..(n + 1) * in_sz];
            let cols_ref: &[f64] = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            let go = &grad_out[n * out_sz..(n + 1) * out_sz];
            // [O, HW] x [HW, rows]
            gemm(g.out_ch, out_hw, rows, go, false, cols_ref, true, 1.0, gk);
        }
    }

    if let Some(gi) = grad_input {
        let mut cols = vec![0.0; rows * out_hw];
        for n in 0..g.batch {
            let go = &grad_out[n * out_sz..(n + 1) * out_sz];
            let dst = &mut gi[n * in_sz..(n + 1) * in_sz];
            if g.is_pointwise() {
                // [rows, O] x [O, HW] straight into the input gradient
                gemm(rows, g.out_ch, out_hw, kernel, true, go, false, 1.0, dst);
            } else {
                gemm(
                    rows, g.out_ch, out_hw, kernel, true, go, false, 0.0, &mut cols,
                );
                col2im_add(g, &cols, dst);
            }
        }
    }
}

/// Depthwise filtering of every channel by every kernel of a fixed bank,
/// stride 1 with "same" zero padding. Output channel `c * n_k + j` is
/// channel `c` filtered by kernel `j`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_forward(
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
    bank: &[f64],
    n_k: usize,
    k: usize,
    input: &[f64],
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; batch * ch * n_k * h * w];
    for nc in 0..batch * ch {
        let plane = &input[nc * h * w..(nc + 1) * h * w];
        for j in 0..n_k {
            let kern = &bank[j * k * k..(j + 1) * k * k];
            let dst = &mut out[(nc * n_k + j) * h * w..(nc * n_k + j + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let iy = y as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let line = &mut dst[y * w..(y + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        let s0 = (x0 as isize + dx) as usize;
                        line[x0..x1]
                            .iter_mut()
                            .zip(&src[s0..s0 + (x1 - x0)])
                            .for_each(|(o, i)| *o += wv * i);
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward(
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
    bank: &[f64],
    n_k: usize,
    k: usize,
    grad_out: &[f64],
    grad_input: &mut [f64],
) {
    let pad = (k / 2) as isize;
    for nc in 0..batch * ch {
        let gi = &mut grad_input[nc * h * w..(nc + 1) * h * w];
        for j in 0..n_k {
            let kern = &bank[j * k * k..(j + 1) * k * k];
            let go = &grad_out[(nc * n_k + j) * h * w..(nc * n_k + j + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let iy = y as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut gi[iy as usize * w..(iy as usize + 1) * w];
                        let line = &go[y * w..(y + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        let d0 = (x0 as isize + dx) as usize;
                        dst[d0..d0 + (x1 - x0)]
                            .iter_mut()
                            .zip(&line[x0..x1])
                            .for_each(|(o, g)| *o += wv * g);
                    }
                }
            }
        }
    }
}
