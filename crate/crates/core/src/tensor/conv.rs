use super::linalg::{matmul_into, transpose};
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Stride, zero padding and group count of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    /// Stride 1 with `(k - 1) / 2` padding, so odd kernels keep the spatial size.
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Self::default()
        }
    }

    pub fn strided(stride: usize) -> Self {
        Self {
            stride,
            ..Self::default()
        }
    }

    pub fn with_groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= kernel && self.stride > 0).then(|| (padded - kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin_g: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds one group of one image (`[cin_g, h, w]`) into `[k, ho * wo]`.
    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        let hw = self.ho * self.wo;
        for c in 0..self.cin_g {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let row = &mut cols[r * hw..(r + 1) * hw];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut row[oh * self.wo..(oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            dst.fill(S::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            *d = if iw < 0 || iw >= self.w as isize {
                                S::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters `[k, ho * wo]` back into `[cin_g, h, w]`.
    fn col2im<S: Scalar>(&self, cols: &[S], dx: &mut [S]) {
        let hw = self.ho * self.wo;
        for c in 0..self.cin_g {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let row = &cols[r * hw..(r + 1) * hw];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] = dst[iw as usize] + row[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    /// 2D cross-correlation. x `[B, Cin, H, W]`, kernel `[Cout, Cin / groups, kh, kw]`.
    pub fn conv2d(&self, kernel: &Self, bias: Option<&Self>, spec: Conv2dSpec) -> Result<Self> {
        let xs = self.shape().to_vec();
        let ks = kernel.shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        let g = spec.groups;
        if g == 0 || cin % g != 0 {
            return Err(Error::Groups { cin, groups: g });
        }
        if cout % g != 0 || kcin != cin / g {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        if let Some(bias) = bias {
            if bias.shape() != [cout] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    lhs: ks,
                    rhs: bias.shape().to_vec(),
                });
            }
        }
        let (Some(ho), Some(wo)) = (spec.output_size(h, kh), spec.output_size(w, kw)) else {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            ));
        };
        let geo = Geometry {
            cin_g: cin / g,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            stride: spec.stride,
            pad: spec.padding,
        };
        let cout_g = cout / g;
        let (k, hw) = (geo.k(), ho * wo);
        let xd = self.value().data();
        let kd = kernel.value().data();
        let mut out = vec![S::zero(); b * cout * hw];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![S::zero(); k * hw] };
        for bi in 0..b {
            for gi in 0..g {
                let x_off = (bi * cin + gi * geo.cin_g) * h * w;
                let x_g = &xd[x_off..x_off + geo.cin_g * h * w];
                let src: &[S] = if geo.is_pointwise() {
                    x_g
                } else {
                    geo.im2col(x_g, &mut cols);
                    &cols
                };
                let o_off = (bi * cout + gi * cout_g) * hw;
                let w_g = &kd[gi * cout_g * k..(gi + 1) * cout_g * k];
                matmul_into(w_g, src, &mut out[o_off..o_off + cout_g * hw], cout_g, k, hw);
            }
            if let Some(bias) = bias {
                for (c, &bv) in bias.value().data().iter().enumerate() {
                    let o = (bi * cout + c) * hw;
                    for v in &mut out[o..o + hw] {
                        *v = *v + bv;
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![b, cout, ho, wo], out);

        let (xv, kv) = (self.value().clone(), kernel.value().clone());
        let backward = move |gout: &Tensor<S>, need: &[bool]| {
            let gd = gout.data();
            let xd = xv.data();
            let kd = kv.data();
            let mut dx = need[0].then(|| vec![S::zero(); xv.len()]);
            let mut dk = need[1].then(|| vec![S::zero(); kv.len()]);
            let mut cols = vec![S::zero(); k * hw];
            let mut cols_t = vec![S::zero(); hw * k];
            for bi in 0..b {
                for gi in 0..g {
                    let x_off = (bi * cin + gi * geo.cin_g) * h * w;
                    let o_off = (bi * cout + gi * cout_g) * hw;
                    let g_g = &gd[o_off..o_off + cout_g * hw];
                    if let Some(dk) = dk.as_mut() {
                        let x_g = &xd[x_off..x_off + geo.cin_g * h * w];
                        if geo.is_pointwise() {
                            cols.copy_from_slice(x_g);
                        } else {
                            geo.im2col(x_g, &mut cols);
                        }
                        for (r, row) in cols.chunks(hw).enumerate() {
                            for (c, &v) in row.iter().enumerate() {
                                cols_t[c * k + r] = v;
                            }
                        }
                        matmul_into(g_g, &cols_t, &mut dk[gi * cout_g * k..(gi + 1) * cout_g * k], cout_g, hw, k);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let w_t = transpose(&kd[gi * cout_g * k..(gi + 1) * cout_g * k], cout_g, k);
                        let mut dcols = vec![S::zero(); k * hw];
                        matmul_into(&w_t, g_g, &mut dcols, k, cout_g, hw);
                        let dx_g = &mut dx[x_off..x_off + geo.cin_g * h * w];
                        if geo.is_pointwise() {
                            for (d, &v) in dx_g.iter_mut().zip(&dcols) {
                                *d = *d + v;
                            }
                        } else {
                            geo.col2im(&dcols, dx_g);
                        }
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
                dk.map(|d| Tensor::from_parts(kv.shape().to_vec(), d)),
            ];
            if need.len() == 3 {
                grads.push(need[2].then(|| {
                    let mut db = vec![S::zero(); cout];
                    for bi in 0..b {
                        for (c, acc) in db.iter_mut().enumerate() {
                            let o = (bi * cout + c) * hw;
                            *acc = *acc + gd[o..o + hw].iter().copied().sum::<S>();
                        }
                    }
                    Tensor::from_parts(vec![cout], db)
                }));
            }
            grads
        };
        let tape = self.tape();
        Ok(match bias {
            Some(bias) => tape.record(value, &[self, kernel, bias], backward),
            None => tape.record(value, &[self, kernel], backward),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn identity_pointwise_kernel() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_fn(vec![1, 1, 3, 4], |i| i as f64 * 0.5 - 1.0);
        let y = tape
            .constant(x.clone())
            .conv2d(&tape.constant(Tensor::ones(vec![1, 1, 1, 1])), None, Conv2dSpec::default())
            .unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn averaging_kernel_interior_is_one() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(vec![1, 1, 5, 5]));
        let k = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0 / 9.0));
        let y = x.conv2d(&k, None, Conv2dSpec::same(3)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        for i in 1..4 {
            for j in 1..4 {
                assert!((y.value().data()[i * 5 + j] - 1.0).abs() < 1e-15);
            }
        }
        // corners only see 4 of 9 taps
        assert!((y.value().data()[0] - 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn depthwise_per_channel_scale() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(vec![1, 2, 2, 2]));
        let k = tape.constant(Tensor::from_f64(vec![2, 1, 1, 1], &[2.0, 3.0]).unwrap());
        let y = x.conv2d(&k, None, Conv2dSpec::default().with_groups(2)).unwrap();
        assert_eq!(y.value().data(), &[2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn indivisible_groups() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let k = tape.constant(Tensor::zeros(vec![2, 1, 1, 1]));
        let err = x.conv2d(&k, None, Conv2dSpec::default().with_groups(2)).unwrap_err();
        assert!(matches!(err, Error::Groups { cin: 3, groups: 2 }));
    }

    #[test]
    fn strided_output_size() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(vec![2, 3, 8, 8]));
        let k = tape.constant(Tensor::ones(vec![5, 3, 4, 4]));
        let y = x.conv2d(&k, None, Conv2dSpec::strided(4)).unwrap();
        assert_eq!(y.shape(), &[2, 5, 2, 2]);
        assert!(y.value().data().iter().all(|&v| v == 48.0));
    }
}
