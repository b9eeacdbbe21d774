//! im2col/col2im kernels shared by convolution and transposed convolution.

use super::Scalar;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        assert!(kernel > 0 && stride > 0 && dilation > 0);
        Self {
            kernel,
            stride,
            padding,
            dilation,
        }
    }

    /// "Same" padding at stride 1.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(kernel, 1, dilation * (kernel - 1) / 2, dilation)
    }

    /// Output length of a convolution over an input of length `len`.
    pub fn conv_out(&self, len: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        assert!(
            padded >= span,
            "input of length {len} too small for kernel span {span}"
        );
        (padded - span) / self.stride + 1
    }

    /// Output length of a transposed convolution over an input of length `len`.
    pub fn transpose_out(&self, len: usize) -> usize {
        (len - 1) * self.stride + self.dilation * (self.kernel - 1) + 1 - 2 * self.padding
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Expands `src` (`c×h×w`) into columns (`c·k·k × oh·ow`).
pub fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    im2col_rows(src, c, h, w, g, ow, 0, oh, dst);
}

/// [`im2col`] restricted to output rows `oy0..oy1`; `dst` is
/// `c·k·k × (oy1 − oy0)·ow`.
#[allow(clippy::too_many_arguments)]
pub fn im2col_rows<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ow: usize,
    oy0: usize,
    oy1: usize,
    dst: &mut [T],
) {
    let p = (oy1 - oy0) * ow;
    if g.is_pointwise() {
        for ch in 0..c {
            dst[ch * p..(ch + 1) * p]
                .copy_from_slice(&src[ch * h * w + oy0 * w..ch * h * w + oy1 * w]);
        }
        return;
    }
    let k = g.kernel;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let out = &mut dst[row * p..(row + 1) * p];
                let dy = (ki * g.dilation) as isize - g.padding as isize;
                let dx = (kj * g.dilation) as isize - g.padding as isize;
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride) as isize + dy;
                    let orow = &mut out[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        orow.fill(T::zero());
                        continue;
                    }
                    let irow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        // valid span copied in one go, padding zeroed around it
                        let lo = (-dx).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - dx).clamp(lo as isize, ow as isize) as usize;
                        orow[..lo].fill(T::zero());
                        orow[hi..].fill(T::zero());
                        if hi > lo {
                            let s0 = (lo as isize + dx) as usize;
                            orow[lo..hi].copy_from_slice(&irow[s0..s0 + hi - lo]);
                        }
                    } else {
                        for (ox, v) in orow.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + dx;
                            *v = if ix >= 0 && ix < w as isize {
                                irow[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dst`.
pub fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    col2im_rows(cols, c, h, w, g, ow, 0, oh, dst);
}

/// Adjoint of [`im2col_rows`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_rows<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ow: usize,
    oy0: usize,
    oy1: usize,
    dst: &mut [T],
) {
    let p = (oy1 - oy0) * ow;
    if g.is_pointwise() {
        for ch in 0..c {
            let d = &mut dst[ch * h * w + oy0 * w..ch * h * w + oy1 * w];
            for (d, &s) in d.iter_mut().zip(&cols[ch * p..(ch + 1) * p]) {
                *d = *d + s;
            }
        }
        return;
    }
    let k = g.kernel;
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let col = &cols[row * p..(row + 1) * p];
                let dy = (ki * g.dilation) as isize - g.padding as isize;
                let dx = (kj * g.dilation) as isize - g.padding as isize;
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let crow = &col[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    if g.stride == 1 {
                        let lo = (-dx).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - dx).clamp(lo as isize, ow as isize) as usize;
                        if hi > lo {
                            let s0 = (lo as isize + dx) as usize;
                            for (d, &v) in irow[s0..s0 + hi - lo].iter_mut().zip(&crow[lo..hi]) {
                                *d = *d + v;
                            }
                        }
                    } else {
                        for (ox, &v) in crow.iter().enumerate() {
                            let ix = (ox * g.stride) as isize + dx;
                            if ix >= 0 && ix < w as isize {
                                irow[ix as usize] = irow[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output rows per im2col tile, keeping a tile near `budget` elements.
pub(crate) fn tile_rows(kk: usize, ow: usize, oh: usize) -> usize {
    let budget = 1 << 14;
    (budget / (kk * ow).max(1)).clamp(1, oh.max(1))
}
