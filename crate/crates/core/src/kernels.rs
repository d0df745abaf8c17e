//! Convolution kernels: im2col lowering onto a single-threaded GEMM.
//!
//! Every convolution is treated as 3-D (`[C, D, H, W]` per batch item); a 2-D
//! convolution is the `D = 1`, `kd = 1` special case.

/// Static geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn output(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (self.input[a] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    /// Rows of the lowered column matrix.
    pub fn col_rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn out_positions(&self) -> usize {
        self.output().iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.out_positions()
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.col_rows()
    }
}

/// Lower one batch item `[cin, D, H, W]` into `[cin*kd*kh*kw, P]`.
pub fn im2col(g: &ConvGeom, input: &[f64], cols: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output();
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let p = od * oh * ow;
    debug_assert_eq!(cols.len(), g.col_rows() * p);
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &input[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut q = 0;
                    for z in 0..od {
                        let iz = (z * sd + a) as isize - pd as isize;
                        for y in 0..oh {
                            let iy = (y * sh + b) as isize - ph as isize;
                            let valid_zy =
                                iz >= 0 && iz < id as isize && iy >= 0 && iy < ih as isize;
                            let base = if valid_zy {
                                (iz as usize * ih + iy as usize) * iw
                            } else {
                                0
                            };
                            for x in 0..ow {
                                let ix = (x * sw + e) as isize - pw as isize;
                                dst[q] = if valid_zy && ix >= 0 && ix < iw as isize {
                                    plane[base + ix as usize]
                                } else {
                                    0.0
                                };
                                q += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[cin, D, H, W]`.
pub fn col2im(g: &ConvGeom, cols: &[f64], out: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output();
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut out[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut q = 0;
                    for z in 0..od {
                        let iz = (z * sd + a) as isize - pd as isize;
                        for y in 0..oh {
                            let iy = (y * sh + b) as isize - ph as isize;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                q += ow;
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            for x in 0..ow {
                                let ix = (x * sw + e) as isize - pw as isize;
                                if ix >= 0 && ix < iw as isize {
                                    plane[base + ix as usize] += src[q];
                                }
                                q += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with row-major storage.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: slice lengths are checked above against the strides we pass.
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

/// Forward convolution over a batch. `input` is `[N, cin, D, H, W]`.
pub fn conv_forward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let p = g.out_positions();
    let rows = g.col_rows();
    let mut out = vec![0.0; batch * g.out_len()];
    let mut cols = vec![0.0; rows * p];
    for n in 0..batch {
        let x = &input[n * g.in_len()..(n + 1) * g.in_len()];
        let y = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(p).enumerate() {
                chunk.fill(b[co]);
            }
        }
        im2col(g, x, &mut cols);
        gemm(g.cout, rows, p, weight, false, &cols, false, y, 1.0);
    }
    out
}

/// Gradients of a convolution given the upstream gradient `grad_out` (`[N, cout, P]`).
///
/// Returns `(grad_input, grad_weight, grad_bias)`; each is only computed when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let p = g.out_positions();
    let rows = g.col_rows();
    let mut gx = want_input.then(|| vec![0.0; batch * g.in_len()]);
    let mut gw = want_weight.then(|| vec![0.0; g.weight_len()]);
    let mut gb = want_bias.then(|| vec![0.0; g.cout]);
    let mut cols = vec![0.0; rows * p];
    for n in 0..batch {
        let dy = &grad_out[n * g.out_len()..(n + 1) * g.out_len()];
        if let Some(gb) = gb.as_mut() {
            for (co, chunk) in dy.chunks(p).enumerate() {
                gb[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let x = &input[n * g.in_len()..(n + 1) * g.in_len()];
            im2col(g, x, &mut cols);
            gemm(g.cout, p, rows, dy, false, &cols, true, gw, 1.0);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(rows, g.cout, p, weight, true, dy, false, &mut cols, 0.0);
            col2im(g, &cols, &mut gx[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
    (gx, gw, gb)
}
