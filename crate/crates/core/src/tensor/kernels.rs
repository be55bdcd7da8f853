//! Raw numeric kernels behind the graph ops. All buffers are row-major.

/// Strided view of a matrix operand: (row stride, column stride).
pub(crate) type Strides = (usize, usize);

/// `c = a · b + beta · c` where `a` is m×k, `b` is k×n and `c` is a dense
/// row-major m×n buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * sa.0 + (k - 1) * sa.1 < a.len(), "gemm lhs out of bounds");
    assert!((k - 1) * sb.0 + (n - 1) * sb.1 < b.len(), "gemm rhs out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches, and the
    // three slices cannot alias because `c` is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    /// Input position read by output step `t` at kernel tap `k`, if inside the signal.
    #[inline]
    fn source(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k).checked_sub(self.padding)?;
        (pos < self.len_in).then_some(pos)
    }

    /// Lays out input patches as a [in_ch·kernel, batch·len_out] matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let bt = self.batch * self.len_out;
        let mut cols = vec![0.0; self.in_ch * self.kernel * bt];
        for c in 0..self.in_ch {
            for k in 0..self.kernel {
                let row = &mut cols[(c * self.kernel + k) * bt..][..bt];
                for b in 0..self.batch {
                    let xs = &x[(b * self.in_ch + c) * self.len_in..][..self.len_in];
                    let dst = &mut row[b * self.len_out..][..self.len_out];
                    for (t, d) in dst.iter_mut().enumerate() {
                        if let Some(p) = self.source(t, k) {
                            *d = xs[p];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let bt = self.batch * self.len_out;
        for c in 0..self.in_ch {
            for k in 0..self.kernel {
                let row = &cols[(c * self.kernel + k) * bt..][..bt];
                for b in 0..self.batch {
                    let xs = &mut dx[(b * self.in_ch + c) * self.len_in..][..self.len_in];
                    let src = &row[b * self.len_out..][..self.len_out];
                    for (t, &v) in src.iter().enumerate() {
                        if let Some(p) = self.source(t, k) {
                            xs[p] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `weight` is [out_ch, in_ch/groups, kernel].
pub(crate) fn conv1d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    geo: &ConvGeometry,
) -> Vec<f64> {
    let mut out = if geo.groups == 1 {
        let bt = geo.batch * geo.len_out;
        let ck = geo.in_ch * geo.kernel;
        let cols = geo.im2col(x);
        let mut out2d = vec![0.0; geo.out_ch * bt];
        gemm(geo.out_ch, ck, bt, weight, (ck, 1), &cols, (bt, 1), 0.0, &mut out2d);
        let mut out = vec![0.0; geo.batch * geo.out_ch * geo.len_out];
        for o in 0..geo.out_ch {
            for b in 0..geo.batch {
                out[(b * geo.out_ch + o) * geo.len_out..][..geo.len_out]
                    .copy_from_slice(&out2d[o * bt + b * geo.len_out..][..geo.len_out]);
            }
        }
        out
    } else {
        grouped_forward(x, weight, geo)
    };
    if let Some(bias) = bias {
        for row in out.chunks_exact_mut(geo.len_out).enumerate() {
            let o = row.0 % geo.out_ch;
            row.1.iter_mut().for_each(|v| *v += bias[o]);
        }
    }
    out
}

fn grouped_forward(x: &[f64], weight: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let (cin_g, cout_g) = (geo.in_per_group(), geo.out_per_group());
    let mut out = vec![0.0; geo.batch * geo.out_ch * geo.len_out];
    for b in 0..geo.batch {
        for o in 0..geo.out_ch {
            let g = o / cout_g;
            let dst = &mut out[(b * geo.out_ch + o) * geo.len_out..][..geo.len_out];
            for ic in 0..cin_g {
                let c = g * cin_g + ic;
                let xs = &x[(b * geo.in_ch + c) * geo.len_in..][..geo.len_in];
                for k in 0..geo.kernel {
                    let w = weight[(o * cin_g + ic) * geo.kernel + k];
                    for (t, d) in dst.iter_mut().enumerate() {
                        if let Some(p) = geo.source(t, k) {
                            *d += w * xs[p];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv1d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    geo: &ConvGeometry,
    want: (bool, bool, bool),
) -> ConvGrads {
    let (want_dx, want_dw, want_db) = want;
    let db = want_db.then(|| {
        let mut db = vec![0.0; geo.out_ch];
        for (i, row) in dy.chunks_exact(geo.len_out).enumerate() {
            db[i % geo.out_ch] += row.iter().sum::<f64>();
        }
        db
    });
    if !want_dx && !want_dw {
        return ConvGrads {
            dx: None,
            dw: None,
            db,
        };
    }
    if geo.groups == 1 {
        let bt = geo.batch * geo.len_out;
        let ck = geo.in_ch * geo.kernel;
        let mut dy2d = vec![0.0; geo.out_ch * bt];
        for o in 0..geo.out_ch {
            for b in 0..geo.batch {
                dy2d[o * bt + b * geo.len_out..][..geo.len_out]
                    .copy_from_slice(&dy[(b * geo.out_ch + o) * geo.len_out..][..geo.len_out]);
            }
        }
        let dw = want_dw.then(|| {
            let cols = geo.im2col(x);
            let mut dw = vec![0.0; geo.out_ch * ck];
            // dW = dY · colsᵀ
            gemm(geo.out_ch, bt, ck, &dy2d, (bt, 1), &cols, (1, bt), 0.0, &mut dw);
            dw
        });
        let dx = want_dx.then(|| {
            let mut dcols = vec![0.0; ck * bt];
            // dcols = Wᵀ · dY
            gemm(ck, geo.out_ch, bt, weight, (1, ck), &dy2d, (bt, 1), 0.0, &mut dcols);
            let mut dx = vec![0.0; x.len()];
            geo.col2im_add(&dcols, &mut dx);
            dx
        });
        ConvGrads { dx, dw, db }
    } else {
        let (cin_g, cout_g) = (geo.in_per_group(), geo.out_per_group());
        let mut dx = want_dx.then(|| vec![0.0; x.len()]);
        let mut dw = want_dw.then(|| vec![0.0; weight.len()]);
        for b in 0..geo.batch {
            for o in 0..geo.out_ch {
                let g = o / cout_g;
                let dys = &dy[(b * geo.out_ch + o) * geo.len_out..][..geo.len_out];
                for ic in 0..cin_g {
                    let c = g * cin_g + ic;
                    let base = (b * geo.in_ch + c) * geo.len_in;
                    for k in 0..geo.kernel {
                        let wi = (o * cin_g + ic) * geo.kernel + k;
                        let mut acc = 0.0;
                        for (t, &d) in dys.iter().enumerate() {
                            if let Some(p) = geo.source(t, k) {
                                acc += d * x[base + p];
                                if let Some(dx) = dx.as_mut() {
                                    dx[base + p] += d * weight[wi];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[wi] += acc;
                        }
                    }
                }
            }
        }
        ConvGrads { dx, dw, db }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (2, 1), &b, (2, 1), 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ · b
        gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn strided_conv_output_positions() {
        let geo = ConvGeometry {
            batch: 1,
            in_ch: 1,
            out_ch: 1,
            len_in: 6,
            len_out: 3,
            kernel: 2,
            stride: 2,
            padding: 0,
            groups: 1,
        };
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = conv1d_forward(&x, &[1.0, 10.0], None, &geo);
        assert_eq!(y, vec![21.0, 43.0, 65.0]);
    }
}
