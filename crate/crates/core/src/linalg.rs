//! Small dense f64 matrix kernel used internally by the training engine and
//! the analog simulator. Activation tensors cross module boundaries as `f32`
//! (`crate::tensor::Tensor`); everything numerical-gradient-sensitive runs in
//! f64.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    /// `self (m,k) * b (k,n)`.
    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows);
        let mut out = Mat::zeros(self.rows, b.cols);
        for m in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[m * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                let orow = &mut out.data[m * b.cols..(m + 1) * b.cols];
                for n in 0..b.cols {
                    orow[n] += a * brow[n];
                }
            }
        }
        out
    }

    /// `self (m,k) * b^T` where `b` is `(n,k)`.
    pub fn matmul_nt(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.cols);
        let mut out = Mat::zeros(self.rows, b.rows);
        for m in 0..self.rows {
            let arow = &self.data[m * self.cols..(m + 1) * self.cols];
            for n in 0..b.rows {
                let brow = &b.data[n * b.cols..(n + 1) * b.cols];
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += arow[k] * brow[k];
                }
                out.data[m * b.rows + n] = acc;
            }
        }
        out
    }

    /// `self^T * b` where `self` is `(k,m)` and `b` is `(k,n)`.
    pub fn matmul_tn(&self, b: &Mat) -> Mat {
        assert_eq!(self.rows, b.rows);
        let mut out = Mat::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            let arow = &self.data[k * self.cols..(k + 1) * self.cols];
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for m in 0..self.cols {
                let a = arow[m];
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[m * b.cols..(m + 1) * b.cols];
                for n in 0..b.cols {
                    orow[n] += a * brow[n];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImgDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        ((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1)
    }
}

/// Patch matrix `(c*kh*kw, n*oh*ow)` with zero padding; batch-major columns.
pub fn im2col(data: &[f64], d: ImgDims, g: ConvGeom) -> Mat {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let (oh, ow) = g.output_hw(d.h, d.w);
    let rows = d.c * kh * kw;
    let cols = d.n * oh * ow;
    let mut out = Mat::zeros(rows, cols);
    for b in 0..d.n {
        let img = &data[b * d.c * d.h * d.w..(b + 1) * d.c * d.h * d.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let col = b * oh * ow + oy * ow + ox;
                for c in 0..d.c {
                    for i in 0..kh {
                        let iy = (oy * sh + i) as isize - ph as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix = (ox * sw + j) as isize - pw as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            let row = c * kh * kw + i * kw + j;
                            out.data[row * cols + col] = img[c * d.h * d.w + iy as usize * d.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-accumulate the adjoint of [`im2col`] back onto image coordinates.
pub fn col2im_accumulate(dcols: &Mat, d: ImgDims, g: ConvGeom) -> Vec<f64> {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let (oh, ow) = g.output_hw(d.h, d.w);
    let mut out = vec![0.0f64; d.n * d.c * d.h * d.w];
    for b in 0..d.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let col = b * oh * ow + oy * ow + ox;
                for c in 0..d.c {
                    for i in 0..kh {
                        let iy = (oy * sh + i) as isize - ph as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix = (ox * sw + j) as isize - pw as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            let row = c * kh * kw + i * kw + j;
                            out[b * d.c * d.h * d.w + c * d.h * d.w + iy as usize * d.w + ix as usize] +=
                                dcols.data[row * dcols.cols + col];
                        }
                    }
                }
            }
        }
    }
    out
}
