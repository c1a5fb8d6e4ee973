//! Dense NCHW `f32` tensors and the GEMM / im2col kernels behind the
//! convolution layers.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    /// (batch, channels, height, width)
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Elements per batch item.
    #[inline]
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn item(&self, n: usize) -> &[f32] {
        let l = self.item_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub(crate) fn from_items(shape_cxhxw: [usize; 3], items: Vec<Vec<f32>>) -> Tensor {
        let n = items.len();
        let mut data = Vec::with_capacity(n * shape_cxhxw.iter().product::<usize>());
        for it in items {
            data.extend_from_slice(&it);
        }
        Tensor {
            shape: [n, shape_cxhxw[0], shape_cxhxw[1], shape_cxhxw[2]],
            data,
        }
    }
}

/// Row/column strides of a GEMM operand.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    pub fn transposed(cols_of_stored: usize) -> Self {
        Self {
            rs: 1,
            cs: cols_of_stored,
        }
    }
}

/// `C (m×n) = A (m×k) · B (k×n) + beta · C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    let max_idx = |rows: usize, cols: usize, l: Layout| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * l.rs + (cols - 1) * l.cs + 1
        }
    };
    assert!(a.len() >= max_idx(m, k, la), "gemm: A too short");
    assert!(b.len() >= max_idx(k, n, lb), "gemm: B too short");
    assert!(c.len() >= m * n, "gemm: C too short");
    // SAFETY: operand extents are checked above; the three buffers are
    // distinct borrows so C does not alias A or B.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convolution geometry for one spatial axis pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Unfolds one `C×H×W` item into a `(C·k·k) × (Ho·Wo)` matrix.
pub(crate) fn im2col(x: &[f32], g: ConvGeom, cols: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let off = kj as isize - g.pad as isize;
                let (lo, hi) = valid_range(wo, g.w, g.stride, off);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(0.0);
                    drow[hi..].fill(0.0);
                    if g.stride == 1 {
                        let s0 = (lo as isize + off) as usize;
                        drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    } else {
                        for (ox, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = src[(((lo + ox) * g.stride) as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input index `ox·stride + off` lies in
/// `[0, n_in)`.
fn valid_range(n_out: usize, n_in: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let room = n_in as isize - off;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let hi = (hi as usize).min(n_out);
    let lo = (lo as usize).min(hi);
    (lo, hi)
}

/// Adjoint of [`im2col`]: accumulates columns back into a `C×H×W` item.
pub(crate) fn col2im(cols: &[f32], g: ConvGeom, dx: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let off = kj as isize - g.pad as isize;
                let (lo, hi) = valid_range(wo, g.w, g.stride, off);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * wo + lo..oy * wo + hi];
                    if g.stride == 1 {
                        let d0 = (lo as isize + off) as usize;
                        for (d, v) in drow[d0..d0 + (hi - lo)].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (ox, v) in srow.iter().enumerate() {
                            drow[(((lo + ox) * g.stride) as isize + off) as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
