use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Conv2dOpts {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dOpts {
    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(k: usize, dilation: usize) -> Self {
        Conv2dOpts {
            stride: 1,
            padding: dilation * (k - 1) / 2,
            dilation,
        }
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    opts: Conv2dOpts,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `lo..hi` of row `oy` whose input column lies inside
    /// the image for kernel offset `kx`, and the input column of `lo`.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize, usize) {
        let Conv2dOpts {
            stride,
            padding,
            dilation,
        } = self.opts;
        let off = kx * dilation;
        // ox * stride + off - padding in [0, w)
        let lo = if off >= padding { 0 } else { (padding - off).div_ceil(stride) }.min(self.wo);
        let end = self.w + padding;
        let hi = if end > off { ((end - off - 1) / stride + 1).min(self.wo) } else { 0 };
        let hi = hi.max(lo);
        if hi == lo {
            return (lo, hi, 0);
        }
        (lo, hi, lo * stride + off - padding)
    }

    /// Calls `f(row offset in the column buffer, input row offset, lo, hi,
    /// first input column)` for every kernel tap and output row that lands
    /// inside the image.
    #[inline]
    fn for_each_span(&self, mut f: impl FnMut(usize, Option<usize>, usize, usize, usize)) {
        let Conv2dOpts {
            stride,
            padding,
            dilation,
        } = self.opts;
        let p = self.cols();
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let (lo, hi, ix0) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        let c0 = row * p + oy * self.wo;
                        if iy < 0 || iy >= self.h as isize {
                            f(c0, None, lo, hi, ix0);
                        } else {
                            f(c0, Some(ci * self.h * self.w + iy as usize * self.w), lo, hi, ix0);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (wo, s) = (self.wo, self.opts.stride);
        self.for_each_span(|c0, in_row, lo, hi, ix0| {
            let dst = &mut cols[c0..c0 + wo];
            match in_row {
                None => dst.fill(0.0),
                Some(r) => {
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&x[r + ix0..r + ix0 + hi - lo]);
                    } else {
                        for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = x[r + ix0 + j * s];
                        }
                    }
                }
            }
        });
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let s = self.opts.stride;
        self.for_each_span(|c0, in_row, lo, hi, ix0| {
            if let Some(r) = in_row {
                let src = &cols[c0 + lo..c0 + hi];
                if s == 1 {
                    for (d, v) in gx[r + ix0..r + ix0 + hi - lo].iter_mut().zip(src) {
                        *d += v;
                    }
                } else {
                    for (j, v) in src.iter().enumerate() {
                        gx[r + ix0 + j * s] += v;
                    }
                }
            }
        });
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the debug assertions above bound every index the kernel
    // touches, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// Cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin, k, k]`.
    ///
    /// Output extents follow the usual floor rule
    /// `(H + 2p - d(k-1) - 1) / s + 1`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, opts: Conv2dOpts) -> Result<Tensor> {
        let (b, cin, h, w) = self.dims4("conv2d")?;
        let (cout, wcin, k, k2) = weight.dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::dim("conv2d", "input channels", wcin, cin));
        }
        if k != k2 {
            return Err(Error::dim("conv2d", "kernel width", k, k2));
        }
        if k % 2 == 0 {
            return Err(Error::dim("conv2d", "kernel size", "odd", k));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::Contract("conv2d: stride and dilation must be >= 1".into()));
        }
        if let Some(bias) = bias {
            if bias.shape() != [cout] {
                return Err(Error::dim("conv2d", "bias", cout, format!("{:?}", bias.shape())));
            }
        }
        let span = opts.dilation * (k - 1) + 1;
        if h + 2 * opts.padding < span {
            return Err(Error::dim("conv2d", "height", format!(">= {span}"), h + 2 * opts.padding));
        }
        if w + 2 * opts.padding < span {
            return Err(Error::dim("conv2d", "width", format!(">= {span}"), w + 2 * opts.padding));
        }
        let geo = Geometry {
            cin,
            h,
            w,
            k,
            ho: (h + 2 * opts.padding - span) / opts.stride + 1,
            wo: (w + 2 * opts.padding - span) / opts.stride + 1,
            opts,
        };
        let (kk, p) = (geo.rows(), geo.cols());
        let in_len = cin * h * w;
        let mut out = vec![0.0; b * cout * p];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
        for bi in 0..b {
            let x = &self.data()[bi * in_len..(bi + 1) * in_len];
            let cols_ref: &[f64] = if geo.is_pointwise() {
                x
            } else {
                geo.im2col(x, &mut cols);
                &cols
            };
            let o = &mut out[bi * cout * p..(bi + 1) * cout * p];
            gemm(cout, kk, p, weight.data(), (kk, 1), cols_ref, (p, 1), 0.0, o);
            if let Some(bias) = bias {
                for (co, bv) in bias.data().iter().enumerate() {
                    o[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        let has_bias = bias.is_some();
        let (need_x, need_w, need_b) = (
            self.requires_grad(),
            weight.requires_grad(),
            bias.is_some_and(|b| b.requires_grad()),
        );
        let (x, wt) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            vec![b, cout, geo.ho, geo.wo],
            out,
            parents,
            Box::new(move |g| {
                let mut gx = need_x.then(|| vec![0.0; b * in_len]);
                let mut gw = need_w.then(|| vec![0.0; cout * kk]);
                let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
                let mut gcols = if need_x && !geo.is_pointwise() { vec![0.0; kk * p] } else { Vec::new() };
                for bi in 0..b {
                    let gout = &g[bi * cout * p..(bi + 1) * cout * p];
                    if let Some(gw) = gw.as_mut() {
                        let xb = &x.data()[bi * in_len..(bi + 1) * in_len];
                        let cols_ref: &[f64] = if geo.is_pointwise() {
                            xb
                        } else {
                            geo.im2col(xb, &mut cols);
                            &cols
                        };
                        gemm(cout, p, kk, gout, (p, 1), cols_ref, (1, p), 1.0, gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxb = &mut gx[bi * in_len..(bi + 1) * in_len];
                        if geo.is_pointwise() {
                            gemm(kk, cout, p, wt.data(), (1, kk), gout, (p, 1), 1.0, gxb);
                        } else {
                            gemm(kk, cout, p, wt.data(), (1, kk), gout, (p, 1), 0.0, &mut gcols);
                            geo.col2im(&gcols, gxb);
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(need_b.then(|| {
                        (0..cout)
                            .map(|co| {
                                (0..b)
                                    .map(|bi| {
                                        let s = (bi * cout + co) * p;
                                        g[s..s + p].iter().sum::<f64>()
                                    })
                                    .sum()
                            })
                            .collect()
                    }));
                }
                grads
            }),
        ))
    }
}
