/// `c = a·b + beta·c` for row-major `a [m, k]`, `b [k, n]`, with optional
/// transposition of the stored operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
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
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: bounds asserted above; strides describe the same row-major buffers.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        assert!(
            h + 2 * pad >= k && w + 2 * pad >= k,
            "conv kernel larger than padded input"
        );
        Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            hout: (h + 2 * pad - k) / stride + 1,
            wout: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.hout * self.wout
    }
}

/// Output positions `[lo, hi)` along one axis whose input index
/// `o * stride + offset - pad` falls inside `0..size`.
fn valid_span(out: usize, stride: usize, offset: usize, pad: usize, size: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if size + pad > offset {
        ((size + pad - offset - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Appends the `[cin*k*k, hout*wout]` column matrix of one sample to `col`.
fn im2col(x: &[f64], g: &ConvGeom, col: &mut Vec<f64>) {
    for c in 0..g.cin {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_span(g.hout, g.stride, ky, g.pad, g.h);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_span(g.wout, g.stride, kx, g.pad, g.w);
                for oy in 0..g.hout {
                    if oy < ylo || oy >= yhi || xlo == xhi {
                        col.resize(col.len() + g.wout, 0.0);
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let start = xlo * g.stride + kx - g.pad;
                    let srow = &src[iy * g.w + start..(iy + 1) * g.w];
                    col.resize(col.len() + xlo, 0.0);
                    if g.stride == 1 {
                        col.extend_from_slice(&srow[..xhi - xlo]);
                    } else {
                        col.extend(srow.iter().step_by(g.stride).take(xhi - xlo));
                    }
                    col.resize(col.len() + g.wout - xhi, 0.0);
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.cin {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_span(g.hout, g.stride, ky, g.pad, g.h);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_span(g.wout, g.stride, kx, g.pad, g.w);
                let src = &col[row * plane..(row + 1) * plane];
                row += 1;
                if xlo == xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let start = xlo * g.stride + kx - g.pad;
                    let drow = &mut dst[iy * g.w + start..(iy + 1) * g.w];
                    let srow = &src[oy * g.wout + xlo..oy * g.wout + xhi];
                    for (d, s) in drow.iter_mut().step_by(g.stride).zip(srow) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Returns the output and, when requested, the per-sample column buffers.
pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    w: &[f64],
    b: Option<&[f64]>,
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let rows = g.col_rows();
    let plane = g.out_plane();
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * plane;
    let mut out = vec![0.0; n * out_item];
    let mut cols = Vec::with_capacity(if keep_cols {
        n * rows * plane
    } else {
        rows * plane
    });
    for s in 0..n {
        if !keep_cols {
            cols.clear();
        }
        let offset = cols.len();
        im2col(&x[s * in_item..(s + 1) * in_item], g, &mut cols);
        let col = &cols[offset..];
        let dst = &mut out[s * out_item..(s + 1) * out_item];
        let beta = if let Some(b) = b {
            for (o, bias) in dst.chunks_mut(plane).zip(b) {
                o.fill(*bias);
            }
            1.0
        } else {
            0.0
        };
        gemm(g.cout, rows, plane, w, false, col, false, dst, beta);
    }
    (out, keep_cols.then_some(cols))
}

pub(crate) fn conv2d_weight_grad(gy: &[f64], cols: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let rows = g.col_rows();
    let plane = g.out_plane();
    let mut dw = vec![0.0; g.cout * rows];
    for s in 0..n {
        gemm(
            g.cout,
            plane,
            rows,
            &gy[s * g.cout * plane..(s + 1) * g.cout * plane],
            false,
            &cols[s * rows * plane..(s + 1) * rows * plane],
            true,
            &mut dw,
            1.0,
        );
    }
    dw
}

pub(crate) fn conv2d_input_grad(gy: &[f64], w: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let rows = g.col_rows();
    let plane = g.out_plane();
    let in_item = g.cin * g.h * g.w;
    let mut dx = vec![0.0; n * in_item];
    let mut dcol = vec![0.0; rows * plane];
    for s in 0..n {
        gemm(
            rows,
            g.cout,
            plane,
            w,
            true,
            &gy[s * g.cout * plane..(s + 1) * g.cout * plane],
            false,
            &mut dcol,
            0.0,
        );
        col2im(&dcol, g, &mut dx[s * in_item..(s + 1) * in_item]);
    }
    dx
}

/// Two-tap interpolation weights along one axis (half-pixel centers).
#[derive(Clone, Debug)]
pub(crate) struct BilinearTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl BilinearTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(src - i0 as f64);
        }
        Self { lo, hi, frac }
    }

    fn len(&self) -> usize {
        self.lo.len()
    }
}

pub(crate) fn bilinear_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    rows: &BilinearTaps,
    cols: &BilinearTaps,
) -> Vec<f64> {
    let (ho, wo) = (rows.len(), cols.len());
    let mut out = vec![0.0; planes * ho * wo];
    for (src, dst) in x.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for oy in 0..ho {
            let (r0, r1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
            for ox in 0..wo {
                let (c0, c1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let top = src[r0 * w + c0] * (1.0 - fx) + src[r0 * w + c1] * fx;
                let bot = src[r1 * w + c0] * (1.0 - fx) + src[r1 * w + c1] * fx;
                dst[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    gy: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    rows: &BilinearTaps,
    cols: &BilinearTaps,
) -> Vec<f64> {
    let (ho, wo) = (rows.len(), cols.len());
    let mut dx = vec![0.0; planes * h * w];
    for (g, dst) in gy.chunks(ho * wo).zip(dx.chunks_mut(h * w)) {
        for oy in 0..ho {
            let (r0, r1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
            for ox in 0..wo {
                let (c0, c1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let v = g[oy * wo + ox];
                dst[r0 * w + c0] += v * (1.0 - fy) * (1.0 - fx);
                dst[r0 * w + c1] += v * (1.0 - fy) * fx;
                dst[r1 * w + c0] += v * fy * (1.0 - fx);
                dst[r1 * w + c1] += v * fy * fx;
            }
        }
    }
    dx
}

pub(crate) fn softmax_channels(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for pix in 0..hw {
            let mut max = f64::NEG_INFINITY;
            for k in 0..c {
                max = max.max(x[base + k * hw + pix]);
            }
            let mut sum = 0.0;
            for k in 0..c {
                let e = (x[base + k * hw + pix] - max).exp();
                out[base + k * hw + pix] = e;
                sum += e;
            }
            for k in 0..c {
                out[base + k * hw + pix] /= sum;
            }
        }
    }
    out
}
