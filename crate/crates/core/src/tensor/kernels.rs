//! Raw convolution kernels on channel-first buffers.
//!
//! Both directions run one GEMM per kernel tap against a shifted copy of the
//! input, so the scratch buffer never exceeds `C_in × H_out × W_out`.

/// Strided matrix view: `(rows, cols, row_stride, col_stride)` over a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Mat {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = a·b + beta·c`.
pub(crate) fn gemm(a: &[f64], am: Mat, b: &[f64], bm: Mat, c: &mut [f64], cm: Mat, beta: f64) {
    assert_eq!(am.cols, bm.rows, "gemm inner dims");
    assert_eq!(am.rows, cm.rows, "gemm rows");
    assert_eq!(bm.cols, cm.cols, "gemm cols");
    assert!(a.len() >= am.span() && b.len() >= bm.span() && c.len() >= cm.span());
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    // SAFETY: every index touched lies within the spans asserted above.
    unsafe {
        matrixmultiply::dgemm(
            am.rows,
            am.cols,
            bm.cols,
            1.0,
            a.as_ptr(),
            am.rs as isize,
            am.cs as isize,
            b.as_ptr(),
            bm.rs as isize,
            bm.cs as isize,
            beta,
            c.as_mut_ptr(),
            cm.rs as isize,
            cm.cs as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn conv(cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Transposed convolution; `(ho, wo)` is the output size.
    #[allow(clippy::too_many_arguments)]
    pub fn deconv(
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Option<Self> {
        if h == 0 || w == 0 || stride == 0 {
            return None;
        }
        let ho = ((h - 1) * stride + k + out_pad).checked_sub(2 * pad)?;
        let wo = ((w - 1) * stride + k + out_pad).checked_sub(2 * pad)?;
        Some(Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn tap(&self, ky: usize, kx: usize) -> (Mat, usize) {
        let kk = self.k * self.k;
        (
            Mat {
                rows: self.cout,
                cols: self.cin,
                rs: self.cin * kk,
                cs: kk,
            },
            ky * self.k + kx,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output→input coordinate for a convolution tap, if in range.
    #[inline]
    fn src(&self, o: usize, kt: usize, dim: usize) -> Option<usize> {
        let p = (o * self.stride + kt) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < dim).then_some(p as usize)
    }

    /// Input→output coordinate for a transposed-convolution tap.
    #[inline]
    fn dst(&self, i: usize, kt: usize, dim: usize) -> Option<usize> {
        let p = (i * self.stride + kt) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < dim).then_some(p as usize)
    }
}

/// `shifted[c, oy*wo+ox] = x[c, oy*s+ky-p, ox*s+kx-p]`, zero outside.
fn gather_tap(x: &[f64], g: &ConvGeom, ky: usize, kx: usize, out: &mut [f64]) {
    let hw_o = g.ho * g.wo;
    let cols: Vec<Option<usize>> = (0..g.wo).map(|ox| g.src(ox, kx, g.w)).collect();
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let oc = &mut out[c * hw_o..(c + 1) * hw_o];
        for oy in 0..g.ho {
            let row = &mut oc[oy * g.wo..(oy + 1) * g.wo];
            match g.src(oy, ky, g.h) {
                Some(iy) => {
                    let xr = &xc[iy * g.w..(iy + 1) * g.w];
                    for (dst, col) in row.iter_mut().zip(&cols) {
                        *dst = col.map_or(0.0, |ix| xr[ix]);
                    }
                }
                None => row.fill(0.0),
            }
        }
    }
}

/// Adjoint of [`gather_tap`]: accumulates `shifted` back into `dx`.
fn scatter_tap(shifted: &[f64], g: &ConvGeom, ky: usize, kx: usize, dx: &mut [f64]) {
    let hw_o = g.ho * g.wo;
    let cols: Vec<Option<usize>> = (0..g.wo).map(|ox| g.src(ox, kx, g.w)).collect();
    for c in 0..g.cin {
        let sc = &shifted[c * hw_o..(c + 1) * hw_o];
        let dc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for oy in 0..g.ho {
            if let Some(iy) = g.src(oy, ky, g.h) {
                let dr = &mut dc[iy * g.w..(iy + 1) * g.w];
                for (v, col) in sc[oy * g.wo..(oy + 1) * g.wo].iter().zip(&cols) {
                    if let Some(ix) = col {
                        dr[*ix] += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw_o = g.ho * g.wo;
    let mut out = vec![0.0; g.cout * hw_o];
    let om = Mat::dense(g.cout, hw_o);
    if g.is_pointwise() {
        gemm(kernel, Mat::dense(g.cout, g.cin), x, Mat::dense(g.cin, hw_o), &mut out, om, 0.0);
        return out;
    }
    let mut shifted = vec![0.0; g.cin * hw_o];
    for ky in 0..g.k {
        for kx in 0..g.k {
            gather_tap(x, g, ky, kx, &mut shifted);
            let (km, off) = g.tap(ky, kx);
            gemm(&kernel[off..], km, &shifted, Mat::dense(g.cin, hw_o), &mut out, om, 1.0);
        }
    }
    out
}

/// Returns `(d_input, d_kernel)`.
pub(crate) fn conv2d_backward(x: &[f64], kernel: &[f64], dout: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let hw_o = g.ho * g.wo;
    let mut dx = vec![0.0; g.cin * g.h * g.w];
    let mut dk = vec![0.0; kernel.len()];
    let dm = Mat::dense(g.cout, hw_o);
    if g.is_pointwise() {
        let xm = Mat::dense(g.cin, hw_o);
        gemm(dout, dm, x, xm.t(), &mut dk, Mat::dense(g.cout, g.cin), 0.0);
        gemm(kernel, Mat::dense(g.cout, g.cin).t(), dout, dm, &mut dx, xm, 0.0);
        return (dx, dk);
    }
    let mut shifted = vec![0.0; g.cin * hw_o];
    let sm = Mat::dense(g.cin, hw_o);
    for ky in 0..g.k {
        for kx in 0..g.k {
            let (km, off) = g.tap(ky, kx);
            gather_tap(x, g, ky, kx, &mut shifted);
            gemm(dout, dm, &shifted, sm.t(), &mut dk[off..], km, 0.0);
            gemm(&kernel[off..], km.t(), dout, dm, &mut shifted, sm, 0.0);
            scatter_tap(&shifted, g, ky, kx, &mut dx);
        }
    }
    (dx, dk)
}

pub(crate) fn deconv2d_forward(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let hw_o = g.ho * g.wo;
    let mut out = vec![0.0; g.cout * hw_o];
    let mut tap_out = vec![0.0; g.cout * hw];
    for ky in 0..g.k {
        for kx in 0..g.k {
            let (km, off) = g.tap(ky, kx);
            gemm(&kernel[off..], km, x, Mat::dense(g.cin, hw), &mut tap_out, Mat::dense(g.cout, hw), 0.0);
            let cols: Vec<Option<usize>> = (0..g.w).map(|ix| g.dst(ix, kx, g.wo)).collect();
            for co in 0..g.cout {
                for iy in 0..g.h {
                    let Some(oy) = g.dst(iy, ky, g.ho) else { continue };
                    let src = &tap_out[co * hw + iy * g.w..co * hw + (iy + 1) * g.w];
                    let dst = &mut out[co * hw_o + oy * g.wo..co * hw_o + (oy + 1) * g.wo];
                    for (v, col) in src.iter().zip(&cols) {
                        if let Some(ox) = col {
                            dst[*ox] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel)`.
pub(crate) fn deconv2d_backward(x: &[f64], kernel: &[f64], dout: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let hw = g.h * g.w;
    let hw_o = g.ho * g.wo;
    let mut dx = vec![0.0; g.cin * hw];
    let mut dk = vec![0.0; kernel.len()];
    let mut gathered = vec![0.0; g.cout * hw];
    let gm = Mat::dense(g.cout, hw);
    let xm = Mat::dense(g.cin, hw);
    for ky in 0..g.k {
        for kx in 0..g.k {
            let (km, off) = g.tap(ky, kx);
            let cols: Vec<Option<usize>> = (0..g.w).map(|ix| g.dst(ix, kx, g.wo)).collect();
            for co in 0..g.cout {
                for iy in 0..g.h {
                    let row = &mut gathered[co * hw + iy * g.w..co * hw + (iy + 1) * g.w];
                    match g.dst(iy, ky, g.ho) {
                        Some(oy) => {
                            let src = &dout[co * hw_o + oy * g.wo..co * hw_o + (oy + 1) * g.wo];
                            for (d, col) in row.iter_mut().zip(&cols) {
                                *d = col.map_or(0.0, |ox| src[ox]);
                            }
                        }
                        None => row.fill(0.0),
                    }
                }
            }
            gemm(&kernel[off..], km.t(), &gathered, gm, &mut dx, xm, 1.0);
            gemm(&gathered, gm, x, xm.t(), &mut dk[off..], km, 0.0);
        }
    }
    (dx, dk)
}
