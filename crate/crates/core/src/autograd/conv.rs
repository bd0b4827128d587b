//! 2-D convolution by im2col + GEMM, split per batch item.

use super::gemm::{gemm, Mat};
use crate::parallel;

/// Geometry of one convolution call. Tensors are NCHW; weights are `(cout, cin, k, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_len(&self) -> usize {
        self.h * self.w
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// 1×1 stride-1 unpadded convolutions use the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let n = oh * ow;
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..self.cin {
            let plane = &x[ci * self.in_len()..(ci + 1) * self.in_len()];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (ci * self.k + ki) * self.k + kj;
                    let row = &mut cols[r * n..(r + 1) * n];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ki as isize - p;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let n = oh * ow;
        let (s, p) = (self.stride as isize, self.pad as isize);
        dx.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.in_len()..(ci + 1) * self.in_len()];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (ci * self.k + ki) * self.k + kj;
                    let row = &cols[r * n..(r + 1) * n];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..ow {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let n = g.out_len();
    let per_out = g.cout * n;
    let mut out = vec![0.0; g.batch * per_out];
    parallel::for_each_chunk_mut(&mut out, per_out, |i, y| {
        let xi = &x[i * g.cin * g.in_len()..(i + 1) * g.cin * g.in_len()];
        let owned;
        let cols: &[f64] = if g.is_pointwise() {
            xi
        } else {
            let mut c = vec![0.0; g.patch() * n];
            g.im2col(xi, &mut c);
            owned = c;
            &owned
        };
        if let Some(b) = b {
            for (co, row) in y.chunks_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(1.0, Mat::new(w, g.cout, g.patch()), Mat::new(cols, g.patch(), n), beta, y);
    });
    out
}

/// Gradients of a convolution: `(dx if requested, dw, db)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = g.out_len();
    let per_in = g.cin * g.in_len();
    let parts = parallel::map_indexed(g.batch, |i| {
        let xi = &x[i * per_in..(i + 1) * per_in];
        let dyi = &dy[i * g.cout * n..(i + 1) * g.cout * n];
        let owned;
        let cols: &[f64] = if g.is_pointwise() {
            xi
        } else {
            let mut c = vec![0.0; g.patch() * n];
            g.im2col(xi, &mut c);
            owned = c;
            &owned
        };
        let mut dw = vec![0.0; g.cout * g.patch()];
        gemm(1.0, Mat::new(dyi, g.cout, n), Mat::new(cols, g.patch(), n).t(), 0.0, &mut dw);
        let db: Vec<f64> = dyi.chunks(n).map(|r| r.iter().sum()).collect();
        let dx = need_dx.then(|| {
            let mut dcols = vec![0.0; g.patch() * n];
            gemm(1.0, Mat::new(w, g.cout, g.patch()).t(), Mat::new(dyi, g.cout, n), 0.0, &mut dcols);
            if g.is_pointwise() {
                dcols
            } else {
                let mut dxi = vec![0.0; per_in];
                g.col2im(&dcols, &mut dxi);
                dxi
            }
        });
        (dx, dw, db)
    });
    let mut dw = vec![0.0; g.cout * g.patch()];
    let mut db = vec![0.0; g.cout];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.batch * per_in));
    for (pdx, pdw, pdb) in parts {
        dw.iter_mut().zip(&pdw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&pdb).for_each(|(a, b)| *a += b);
        if let (Some(acc), Some(p)) = (dx.as_mut(), pdx) {
            acc.extend_from_slice(&p);
        }
    }
    (dx, dw, db)
}
