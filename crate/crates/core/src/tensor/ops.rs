use super::Tensor;
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            "shape",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

/// Per-axis bilinear taps for align-corners-false 2x upsampling.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| v * s).collect())]),
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![self.data().iter().sum()],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// `max(x, slope * x)`; the derivative at exactly zero is `slope`.
    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let x = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| sigmoid(v)).collect();
        let y = data.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(g.iter().zip(&y).map(|(g, y)| g * y * (1.0 - y)).collect())]
            }),
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of an empty list".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::dim("concat", "axis", format!("< {rank}"), axis));
        }
        for t in &inputs[1..] {
            if t.shape().len() != rank {
                return Err(Error::dim("concat", "rank", rank, t.shape().len()));
            }
            for (ax, (a, b)) in first.shape().iter().zip(t.shape()).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::dim("concat", ax, a, b));
                }
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = inputs.iter().map(|t| t.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (t, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
        Ok(Tensor::from_op(
            shape,
            data,
            inputs.iter().map(|t| (*t).clone()).collect(),
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> =
                    widths.iter().map(|w| Vec::with_capacity(w * outer)).collect();
                for o in 0..outer {
                    let mut off = o * total;
                    for (gi, &w) in grads.iter_mut().zip(&widths) {
                        gi.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// The slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim("narrow", "axis", format!("< {}", shape.len()), axis));
        }
        if start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                axis,
                format!("<= {}", shape[axis]),
                start + len,
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for o in 0..outer {
                    let base = o * full + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Bilinear 2x upsampling of `[B, C, H, W]`, align-corners-false.
    pub fn upsample2x(&self) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4("upsample2x")?;
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let (ho, wo) = (2 * h, 2 * w);
        let x = self.data();
        let mut data = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * ho * wo..(p + 1) * ho * wo];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = (1.0 - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1];
                    let bot = (1.0 - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1];
                    dst[oy * wo + ox] = (1.0 - ly) * top + ly * bot;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![b, c, ho, wo],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    let gs = &g[p * ho * wo..(p + 1) * ho * wo];
                    let gd = &mut gx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let v = gs[oy * wo + ox];
                            gd[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * v;
                            gd[y0 * w + x1] += (1.0 - ly) * lx * v;
                            gd[y1 * w + x0] += ly * (1.0 - lx) * v;
                            gd[y1 * w + x1] += ly * lx * v;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// 2x2 average pooling of `[B, C, H, W]`; H and W must be even.
    pub fn avgpool2x(&self) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4("avgpool2x")?;
        if h % 2 != 0 {
            return Err(Error::dim("avgpool2x", "height", "even", h));
        }
        if w % 2 != 0 {
            return Err(Error::dim("avgpool2x", "width", "even", w));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data();
        let mut data = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            let src = &x[p * h * w..];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    data[p * ho * wo + y * wo + xx] =
                        0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![b, c, ho, wo],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = 0.25 * g[p * ho * wo + y * wo + xx];
                            let i = p * h * w + 2 * y * w + 2 * xx;
                            gx[i] += v;
                            gx[i + 1] += v;
                            gx[i + w] += v;
                            gx[i + w + 1] += v;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
