//! Bilinear backward warping and the correlation cost volume.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel displacement `[B, 2, H, W]` in pixels of its own scale level.
///
/// Channel 0 is horizontal (rightward), channel 1 vertical (downward).
#[derive(Debug, Clone)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, c, _, _) = tensor.dims4("flow field")?;
        if c != 2 {
            return Err(Error::dim("flow field", "channels", 2, c));
        }
        Ok(FlowField(tensor))
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        FlowField(Tensor::zeros(&[batch, 2, height, width]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// `(batch, height, width)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[2], s[3])
    }

    /// Doubles the resolution and the displacement values.
    pub fn upsample(&self) -> Result<FlowField> {
        Ok(FlowField(self.0.upsample2x()?.scale(2.0)))
    }

    /// Halves the resolution (2x2 mean) and the displacement values.
    pub fn downsample(&self) -> Result<FlowField> {
        Ok(FlowField(self.0.avgpool2x()?.scale(0.5)))
    }

    pub fn detach(&self) -> FlowField {
        FlowField(self.0.detach())
    }
}

/// Bilinear sample positions and corner weights for one pixel.
#[derive(Clone, Copy)]
struct Tap {
    x0: isize,
    y0: isize,
    ax: f64,
    ay: f64,
}

impl Tap {
    fn new(x: usize, y: usize, u: f64, v: f64) -> Self {
        let sx = x as f64 + u;
        let sy = y as f64 + v;
        let (fx, fy) = (sx.floor(), sy.floor());
        Tap {
            x0: fx as isize,
            y0: fy as isize,
            ax: sx - fx,
            ay: sy - fy,
        }
    }

    /// `(dx, dy, weight, d weight / d ax, d weight / d ay)` per corner.
    fn corners(&self) -> [(isize, isize, f64, f64, f64); 4] {
        let (ax, ay) = (self.ax, self.ay);
        [
            (0, 0, (1.0 - ax) * (1.0 - ay), -(1.0 - ay), -(1.0 - ax)),
            (1, 0, ax * (1.0 - ay), 1.0 - ay, -ax),
            (0, 1, (1.0 - ax) * ay, -ay, 1.0 - ax),
            (1, 1, ax * ay, ay, ax),
        ]
    }
}

fn check_same_spatial(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (ba, _, ha, wa) = a.dims4(op)?;
    let (bb, _, hb, wb) = b.dims4(op)?;
    if ba != bb {
        return Err(Error::dim(op, "batch", ba, bb));
    }
    if ha != hb {
        return Err(Error::dim(op, "height", ha, hb));
    }
    if wa != wb {
        return Err(Error::dim(op, "width", wa, wb));
    }
    Ok(())
}

/// `out(x) = features(x + flow(x))` by bilinear sampling.
///
/// Corners falling outside the image contribute zero. Corners with zero
/// weight are skipped in the forward pass, so integer flows copy values
/// exactly.
pub fn warp(features: &Tensor, flow: &FlowField) -> Result<Tensor> {
    check_same_spatial("warp", features, flow.tensor())?;
    let (b, c, h, w) = features.dims4("warp")?;
    let hw = h * w;
    let fl = flow.tensor().data();
    let taps: Vec<Tap> = (0..b)
        .flat_map(|bi| {
            (0..hw).map(move |p| {
                let (y, x) = (p / w, p % w);
                Tap::new(x, y, fl[(bi * 2) * hw + p], fl[(bi * 2 + 1) * hw + p])
            })
        })
        .collect();
    let inside = move |xx: isize, yy: isize| xx >= 0 && yy >= 0 && xx < w as isize && yy < h as isize;

    let f = features.data();
    let mut out = vec![0.0; b * c * hw];
    for bi in 0..b {
        for p in 0..hw {
            let tap = taps[bi * hw + p];
            for (dx, dy, wgt, _, _) in tap.corners() {
                let (xx, yy) = (tap.x0 + dx, tap.y0 + dy);
                if wgt == 0.0 || !inside(xx, yy) {
                    continue;
                }
                let q = yy as usize * w + xx as usize;
                for ch in 0..c {
                    let base = (bi * c + ch) * hw;
                    out[base + p] += wgt * f[base + q];
                }
            }
        }
    }

    let feats = features.clone();
    let need_f = features.requires_grad();
    let need_flow = flow.tensor().requires_grad();
    Ok(Tensor::from_op(
        vec![b, c, h, w],
        out,
        vec![features.clone(), flow.tensor().clone()],
        Box::new(move |g| {
            let f = feats.data();
            let mut gf = need_f.then(|| vec![0.0; b * c * hw]);
            let mut gflow = need_flow.then(|| vec![0.0; b * 2 * hw]);
            for bi in 0..b {
                for p in 0..hw {
                    let tap = taps[bi * hw + p];
                    let (mut gu, mut gv) = (0.0, 0.0);
                    for (dx, dy, wgt, dwx, dwy) in tap.corners() {
                        let (xx, yy) = (tap.x0 + dx, tap.y0 + dy);
                        if !inside(xx, yy) {
                            continue;
                        }
                        let q = yy as usize * w + xx as usize;
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            let go = g[base + p];
                            if let Some(gf) = gf.as_mut() {
                                gf[base + q] += wgt * go;
                            }
                            gu += dwx * f[base + q] * go;
                            gv += dwy * f[base + q] * go;
                        }
                    }
                    if let Some(gflow) = gflow.as_mut() {
                        gflow[(bi * 2) * hw + p] = gu;
                        gflow[(bi * 2 + 1) * hw + p] = gv;
                    }
                }
            }
            vec![gf, gflow]
        }),
    ))
}

/// Channel index of displacement `(dx, dy)` in a cost volume of radius `max_disp`.
pub fn displacement_channel(dx: isize, dy: isize, max_disp: usize) -> usize {
    let d = max_disp as isize;
    ((dy + d) * (2 * d + 1) + (dx + d)) as usize
}

/// Cost volume `[B, (2d+1)^2, H, W]`: channel for `(dx, dy)` holds
/// `(1/C) sum_c f1(x) f2(x + (dx, dy))`, zero where the second sample falls
/// outside the image.
pub fn correlation(f1: &Tensor, f2: &Tensor, max_disp: usize) -> Result<Tensor> {
    if f1.shape() != f2.shape() {
        let (_, c1, _, _) = f1.dims4("correlation")?;
        let (_, c2, _, _) = f2.dims4("correlation")?;
        if c1 != c2 {
            return Err(Error::dim("correlation", "channels", c1, c2));
        }
        check_same_spatial("correlation", f1, f2)?;
    }
    if max_disp == 0 {
        return Err(Error::Contract("correlation: max_disp must be >= 1".into()));
    }
    let (b, c, h, w) = f1.dims4("correlation")?;
    let d = max_disp as isize;
    let side = 2 * max_disp + 1;
    let nd = side * side;
    let hw = h * w;
    let norm = 1.0 / c as f64;

    // Visits (pixel row range, column range) pairs overlapping for a displacement.
    let overlap = move |dx: isize, dy: isize| {
        let y_lo = (-dy).max(0) as usize;
        let y_hi = (h as isize - dy.max(0)).max(0) as usize;
        let x_lo = (-dx).max(0) as usize;
        let x_hi = (w as isize - dx.max(0)).max(0) as usize;
        (y_lo..y_hi.max(y_lo), x_lo..x_hi.max(x_lo))
    };

    let (a, bdat) = (f1.data(), f2.data());
    let mut out = vec![0.0; b * nd * hw];
    for bi in 0..b {
        for dy in -d..=d {
            for dx in -d..=d {
                let k = displacement_channel(dx, dy, max_disp);
                let (ys, xs) = overlap(dx, dy);
                let o = &mut out[(bi * nd + k) * hw..(bi * nd + k + 1) * hw];
                for ch in 0..c {
                    let base = (bi * c + ch) * hw;
                    for y in ys.clone() {
                        let y2 = (y as isize + dy) as usize;
                        for x in xs.clone() {
                            let x2 = (x as isize + dx) as usize;
                            o[y * w + x] += a[base + y * w + x] * bdat[base + y2 * w + x2];
                        }
                    }
                }
                o.iter_mut().for_each(|v| *v *= norm);
            }
        }
    }

    let (t1, t2) = (f1.clone(), f2.clone());
    let (need1, need2) = (f1.requires_grad(), f2.requires_grad());
    Ok(Tensor::from_op(
        vec![b, nd, h, w],
        out,
        vec![f1.clone(), f2.clone()],
        Box::new(move |g| {
            let (a, bdat) = (t1.data(), t2.data());
            let mut g1 = need1.then(|| vec![0.0; b * c * hw]);
            let mut g2 = need2.then(|| vec![0.0; b * c * hw]);
            for bi in 0..b {
                for dy in -d..=d {
                    for dx in -d..=d {
                        let k = displacement_channel(dx, dy, max_disp);
                        let (ys, xs) = overlap(dx, dy);
                        let go = &g[(bi * nd + k) * hw..(bi * nd + k + 1) * hw];
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            for y in ys.clone() {
                                let y2 = (y as isize + dy) as usize;
                                for x in xs.clone() {
                                    let x2 = (x as isize + dx) as usize;
                                    let gv = go[y * w + x] * norm;
                                    if let Some(g1) = g1.as_mut() {
                                        g1[base + y * w + x] += gv * bdat[base + y2 * w + x2];
                                    }
                                    if let Some(g2) = g2.as_mut() {
                                        g2[base + y2 * w + x2] += gv * a[base + y * w + x];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![g1, g2]
        }),
    ))
}
