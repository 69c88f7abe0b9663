//! im2col convolution kernels backed by `matrixmultiply::sgemm`.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Rows of the unfolded input.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_item_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_item_len(&self) -> usize {
        self.out_channels * self.out_pixels()
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c`, strides given as (row, col).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    let a_extent = (m - 1) * a_strides.0 + k.saturating_sub(1) * a_strides.1;
    let b_extent = k.saturating_sub(1) * b_strides.0 + (n - 1) * b_strides.1;
    assert!(k == 0 || a_extent < a.len(), "gemm: lhs too short");
    assert!(k == 0 || b_extent < b.len(), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    // SAFETY: the extents of all three operands were bounds-checked above and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let p = g.out_pixels();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
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

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.out_pixels();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(x: &[f32], kernel: &[f32], bias: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let mut out = vec![0.0; g.batch * g.out_item_len()];
    let mut cols = vec![0.0; k * p];
    for n in 0..g.batch {
        im2col(
            &x[n * g.in_item_len()..(n + 1) * g.in_item_len()],
            g,
            &mut cols,
        );
        let y = &mut out[n * g.out_item_len()..(n + 1) * g.out_item_len()];
        gemm(g.out_channels, k, p, kernel, (k, 1), &cols, (p, 1), 0.0, y);
        for (co, b) in bias.iter().enumerate() {
            y[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub kernel: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub(crate) fn conv_backward(
    x: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    g: &ConvGeom,
    want: [bool; 3],
) -> ConvGrads {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let mut dx = want[0].then(|| vec![0.0; x.len()]);
    let mut dk = want[1].then(|| vec![0.0; kernel.len()]);
    let mut db = want[2].then(|| vec![0.0; g.out_channels]);
    let mut cols = vec![0.0; k * p];
    let mut dcols = if want[0] {
        vec![0.0; k * p]
    } else {
        Vec::new()
    };
    for n in 0..g.batch {
        let dy = &grad_out[n * g.out_item_len()..(n + 1) * g.out_item_len()];
        if let Some(db) = db.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dy[co * p..(co + 1) * p].iter().sum::<f32>();
            }
        }
        if let Some(dk) = dk.as_mut() {
            im2col(
                &x[n * g.in_item_len()..(n + 1) * g.in_item_len()],
                g,
                &mut cols,
            );
            // dK (Co x K) += dY (Co x P) * cols^T (P x K)
            gemm(g.out_channels, p, k, dy, (p, 1), &cols, (1, p), 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols (K x P) = K^T (K x Co) * dY (Co x P)
            gemm(
                k,
                g.out_channels,
                p,
                kernel,
                (1, k),
                dy,
                (p, 1),
                0.0,
                &mut dcols,
            );
            col2im(
                &dcols,
                g,
                &mut dx[n * g.in_item_len()..(n + 1) * g.in_item_len()],
            );
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}
