//! Dense kernels behind the tape ops. Everything here is shape-checked by the
//! caller; these functions only do arithmetic.

/// `c (m×n) = a (m×k) · b (k×n) + beta·c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe views that stay inside `a`, `b` and `c`; every
    // caller passes buffers whose lengths match the declared extents.
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
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.channels * self.height * self.width
    }
}

fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.channels {
        let chan = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
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

fn col2im_add(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.channels {
        let chan = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut out = vec![0.0; g.batch * g.filters * plane];
    let mut cols = vec![0.0; patch * plane];
    for b in 0..g.batch {
        im2col(g, &input[b * g.in_image()..(b + 1) * g.in_image()], &mut cols);
        let dst = &mut out[b * g.filters * plane..(b + 1) * g.filters * plane];
        for (f, row) in dst.chunks_mut(plane).enumerate() {
            row.fill(bias[f]);
        }
        gemm(
            g.filters,
            patch,
            plane,
            kernel,
            patch as isize,
            1,
            &cols,
            plane as isize,
            1,
            1.0,
            dst,
        );
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut d_input = vec![0.0; g.batch * g.in_image()];
    let mut d_kernel = vec![0.0; g.filters * patch];
    let mut d_bias = vec![0.0; g.filters];
    let mut cols = vec![0.0; patch * plane];
    let mut d_cols = vec![0.0; patch * plane];
    for b in 0..g.batch {
        let go = &grad_out[b * g.filters * plane..(b + 1) * g.filters * plane];
        for (f, row) in go.chunks(plane).enumerate() {
            d_bias[f] += row.iter().sum::<f64>();
        }
        im2col(g, &input[b * g.in_image()..(b + 1) * g.in_image()], &mut cols);
        // d_kernel (F×P) += go (F×plane) · colsᵀ (plane×P)
        gemm(
            g.filters,
            plane,
            patch,
            go,
            plane as isize,
            1,
            &cols,
            1,
            plane as isize,
            1.0,
            &mut d_kernel,
        );
        // d_cols (P×plane) = kernelᵀ (P×F) · go (F×plane)
        gemm(
            patch,
            g.filters,
            plane,
            kernel,
            1,
            patch as isize,
            go,
            plane as isize,
            1,
            0.0,
            &mut d_cols,
        );
        col2im_add(g, &d_cols, &mut d_input[b * g.in_image()..(b + 1) * g.in_image()]);
    }
    (d_input, d_kernel, d_bias)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Max pooling; returns values and the flat input index of each window's
/// first (row-major) maximum.
pub(crate) fn max_pool_forward(g: &PoolGeom, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = g.planes * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * g.stride * g.width + ox * g.stride;
                for ky in 0..g.window {
                    for kx in 0..g.window {
                        let idx = base + (oy * g.stride + ky) * g.width + ox * g.stride + kx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn avg_pool_forward(g: &PoolGeom, input: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (g.window * g.window) as f64;
    let mut out = Vec::with_capacity(g.planes * g.out_h * g.out_w);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = 0.0;
                for ky in 0..g.window {
                    let row = base + (oy * g.stride + ky) * g.width + ox * g.stride;
                    acc += input[row..row + g.window].iter().sum::<f64>();
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(g: &PoolGeom, grad_out: &[f64], d_input: &mut [f64]) {
    let inv = 1.0 / (g.window * g.window) as f64;
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let gv = grad_out[(p * g.out_h + oy) * g.out_w + ox] * inv;
                for ky in 0..g.window {
                    let row = base + (oy * g.stride + ky) * g.width + ox * g.stride;
                    for v in &mut d_input[row..row + g.window] {
                        *v += gv;
                    }
                }
            }
        }
    }
}
