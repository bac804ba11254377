//! Dense numeric kernels shared by the tape's forward and backward passes.

/// Strided view of a row-major or transposed matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `out = beta * out + a * b`, with `out` a contiguous `a.rows x b.cols` buffer.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut out[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches:
    // a spans m x k, b spans k x n with the given strides, out spans m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one `[C, H, W]` image into `[C*k*k, OH*OW]` columns.
pub(crate) fn im2col(img: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src_row = &plane[(oy * g.stride + ki) * g.width..];
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        d.copy_from_slice(&src_row[kj..kj + ow]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            *v = src_row[ox * g.stride + kj];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeometry, img: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let base = (oy * g.stride + ki) * g.width + kj;
                    let s = &src[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        for (dst, v) in plane[base..base + ow].iter_mut().zip(s) {
                            *dst += v;
                        }
                    } else {
                        for (ox, v) in s.iter().enumerate() {
                            plane[base + ox * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Valid (unpadded) cross-correlation of `[B, C, H, W]` with `[O, C, k, k]`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeometry,
    weight: &[f64],
    out_channels: usize,
) -> Vec<f64> {
    let img_len = g.channels * g.height * g.width;
    let (kk, p) = (g.patch_len(), g.positions());
    let mut out = vec![0.0; batch * out_channels * p];
    let mut cols = vec![0.0; kk * p];
    let w = MatRef::new(weight, out_channels, kk);
    for b in 0..batch {
        im2col(&x[b * img_len..(b + 1) * img_len], g, &mut cols);
        gemm(
            w,
            MatRef::new(&cols, kk, p),
            &mut out[b * out_channels * p..(b + 1) * out_channels * p],
            0.0,
        );
    }
    out
}

/// Returns `(grad_input, grad_weight)`; either may be skipped.
pub(crate) fn conv2d_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeometry,
    weight: &[f64],
    out_channels: usize,
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let img_len = g.channels * g.height * g.width;
    let (kk, p) = (g.patch_len(), g.positions());
    let mut gx = need_input.then(|| vec![0.0; batch * img_len]);
    let mut gw = need_weight.then(|| vec![0.0; out_channels * kk]);
    let mut cols = vec![0.0; kk * p];
    let w = MatRef::new(weight, out_channels, kk);
    for b in 0..batch {
        let go = MatRef::new(
            &grad_out[b * out_channels * p..(b + 1) * out_channels * p],
            out_channels,
            p,
        );
        if let Some(gw) = gw.as_mut() {
            im2col(&x[b * img_len..(b + 1) * img_len], g, &mut cols);
            gemm(go, MatRef::new(&cols, kk, p).t(), gw, 1.0);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(w.t(), go, &mut cols, 0.0);
            col2im_add(&cols, g, &mut gx[b * img_len..(b + 1) * img_len]);
        }
    }
    (gx, gw)
}

/// Non-overlapping max pooling over `[B, C, H, W]`; trailing rows/cols that do
/// not fill a window are dropped. Returns the output and the flat argmax index
/// of each window (first maximum wins on ties).
pub(crate) fn maxpool2d_forward(
    x: &[f64],
    planes: usize,
    height: usize,
    width: usize,
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (height / size, width / size);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * width + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * width + ox * size + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
