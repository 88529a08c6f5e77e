use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Source taps for one output coordinate of a half-pixel bilinear resize.
#[derive(Clone, Copy)]
struct Tap<S> {
    lo: usize,
    hi: usize,
    frac: S,
}

fn bilinear_taps<S: Scalar>(input: usize, output: usize) -> Vec<Tap<S>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: S::c(src - lo as f64),
            }
        })
        .collect()
}

/// Rows `[floor(i * n / out), ceil((i + 1) * n / out))` of an adaptive pooling bin.
pub(crate) fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| (i * input / output, ((i + 1) * input).div_ceil(output)))
        .collect()
}

fn check_nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b * c, h, w)),
        _ => Err(Error::dim(op, format!("expected [B, C, H, W], got {shape:?}"))),
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    /// Bilinear resize with half-pixel centers, `src = (dst + 0.5) * in / out - 0.5`,
    /// clamped to the edge.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let shape = self.shape().to_vec();
        let (planes, h, w) = check_nchw("bilinear_resize", &shape)?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::dim(
                "bilinear_resize",
                format!("zero extent: {h}x{w} -> {out_h}x{out_w}"),
            ));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(self.clone());
        }
        let rows = bilinear_taps::<S>(h, out_h);
        let cols = bilinear_taps::<S>(w, out_w);
        let x = self.value().data();
        let mut out = vec![S::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (i, r) in rows.iter().enumerate() {
                for (j, c) in cols.iter().enumerate() {
                    let top = src[r.lo * w + c.lo] * (S::one() - c.frac) + src[r.lo * w + c.hi] * c.frac;
                    let bot = src[r.hi * w + c.lo] * (S::one() - c.frac) + src[r.hi * w + c.hi] * c.frac;
                    dst[i * out_w + j] = top * (S::one() - r.frac) + bot * r.frac;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[2] = out_h;
        out_shape[3] = out_w;
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.tape().record(value, &[self], move |g, _| {
            let gd = g.data();
            let mut dx = vec![S::zero(); planes * h * w];
            for p in 0..planes {
                let src = &gd[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for (i, r) in rows.iter().enumerate() {
                    for (j, c) in cols.iter().enumerate() {
                        let v = src[i * out_w + j];
                        let top = v * (S::one() - r.frac);
                        let bot = v * r.frac;
                        dst[r.lo * w + c.lo] = dst[r.lo * w + c.lo] + top * (S::one() - c.frac);
                        dst[r.lo * w + c.hi] = dst[r.lo * w + c.hi] + top * c.frac;
                        dst[r.hi * w + c.lo] = dst[r.hi * w + c.lo] + bot * (S::one() - c.frac);
                        dst[r.hi * w + c.hi] = dst[r.hi * w + c.hi] + bot * c.frac;
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape, dx))]
        }))
    }

    /// Adaptive average pooling; output extents must not exceed the input.
    pub fn adaptive_avg_pool2d(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let shape = self.shape().to_vec();
        let (planes, h, w) = check_nchw("adaptive_avg_pool2d", &shape)?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::dim(
                "adaptive_avg_pool2d",
                format!("cannot pool {h}x{w} to {out_h}x{out_w}"),
            ));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(self.clone());
        }
        let rows = adaptive_bins(h, out_h);
        let cols = adaptive_bins(w, out_w);
        let x = self.value().data();
        let mut out = vec![S::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for (i, &(r0, r1)) in rows.iter().enumerate() {
                for (j, &(c0, c1)) in cols.iter().enumerate() {
                    let mut acc = S::zero();
                    for r in r0..r1 {
                        for c in c0..c1 {
                            acc = acc + src[r * w + c];
                        }
                    }
                    out[(p * out_h + i) * out_w + j] = acc / S::c(((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[2] = out_h;
        out_shape[3] = out_w;
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.tape().record(value, &[self], move |g, _| {
            let gd = g.data();
            let mut dx = vec![S::zero(); planes * h * w];
            for p in 0..planes {
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for (i, &(r0, r1)) in rows.iter().enumerate() {
                    for (j, &(c0, c1)) in cols.iter().enumerate() {
                        let share = gd[(p * out_h + i) * out_w + j] / S::c(((r1 - r0) * (c1 - c0)) as f64);
                        for r in r0..r1 {
                            for c in c0..c1 {
                                dst[r * w + c] = dst[r * w + c] + share;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape, dx))]
        }))
    }
}
