//! Elementwise, reduction and shape ops on [`Var`].

use super::{numel, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Right-aligned broadcast of two shapes, numpy style.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for k in 0..last {
            f(o + k, ia + k * la, ib + k * lb);
        }
        o += last;
        // advance the odometer over the leading axes
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn binary<'t, S: Scalar>(
    op: &'static str,
    a: &Var<'t, S>,
    b: &Var<'t, S>,
    f: fn(S, S) -> S,
    da: fn(S, S) -> S,
    db: fn(S, S) -> S,
) -> Result<Var<'t, S>> {
    let (av, bv) = (a.value().clone(), b.value().clone());
    let out_shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| Error::Shape {
        op,
        lhs: av.shape().to_vec(),
        rhs: bv.shape().to_vec(),
    })?;
    let value = if av.shape() == bv.shape() {
        av.zip_map(&bv, f)?
    } else {
        let sa = broadcast_strides(av.shape(), &out_shape);
        let sb = broadcast_strides(bv.shape(), &out_shape);
        let mut out = vec![S::zero(); numel(&out_shape)];
        let (x, y) = (av.data(), bv.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(x[i], y[j]));
        Tensor::from_parts(out_shape.clone(), out)
    };
    Ok(a.tape().record(value, &[a, b], move |g, need| {
        let sa = broadcast_strides(av.shape(), g.shape());
        let sb = broadcast_strides(bv.shape(), g.shape());
        let (x, y, gd) = (av.data(), bv.data(), g.data());
        let mut ga = need[0].then(|| vec![S::zero(); av.len()]);
        let mut gb = need[1].then(|| vec![S::zero(); bv.len()]);
        for_each_broadcast(g.shape(), &sa, &sb, |o, i, j| {
            if let Some(ga) = ga.as_mut() {
                ga[i] = ga[i] + gd[o] * da(x[i], y[j]);
            }
            if let Some(gb) = gb.as_mut() {
                gb[j] = gb[j] + gd[o] * db(x[i], y[j]);
            }
        });
        vec![
            ga.map(|d| Tensor::from_parts(av.shape().to_vec(), d)),
            gb.map(|d| Tensor::from_parts(bv.shape().to_vec(), d)),
        ]
    }))
}

fn unary<'t, S: Scalar>(
    x: &Var<'t, S>,
    f: impl Fn(S) -> S,
    df: impl Fn(S, S) -> S + 'static,
) -> Var<'t, S> {
    let xv = x.value().clone();
    let y = xv.map(f);
    let yv = y.clone();
    x.tape().record(y, &[x], move |g, _| {
        let d: Vec<S> = g
            .data()
            .iter()
            .zip(xv.data().iter().zip(yv.data()))
            .map(|(&g, (&x, &y))| g * df(x, y))
            .collect();
        vec![Some(Tensor::from_parts(xv.shape().to_vec(), d))]
    })
}

pub(crate) fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softplus_scalar<S: Scalar>(x: S) -> S {
    if x > S::c(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn add(&self, other: &Self) -> Result<Self> {
        binary("add", self, other, |a, b| a + b, |_, _| S::one(), |_, _| S::one())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        binary("sub", self, other, |a, b| a - b, |_, _| S::one(), |_, _| -S::one())
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        binary("mul", self, other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |_, b| S::one() / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn scale(&self, k: S) -> Self {
        unary(self, move |x| x * k, move |_, _| k)
    }

    pub fn add_scalar(&self, k: S) -> Self {
        unary(self, move |x| x + k, |_, _| S::one())
    }

    pub fn neg(&self) -> Self {
        self.scale(-S::one())
    }

    pub fn exp(&self) -> Self {
        unary(self, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Self {
        unary(self, |x| x.ln(), |x, _| S::one() / x)
    }

    pub fn sigmoid(&self) -> Self {
        unary(self, sigmoid_scalar, |_, y| y * (S::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Self {
        unary(
            self,
            |x| x * sigmoid_scalar(x),
            |x, _| {
                let s = sigmoid_scalar(x);
                s * (S::one() + x * (S::one() - s))
            },
        )
    }

    pub fn softplus(&self) -> Self {
        unary(self, softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    pub fn relu(&self) -> Self {
        unary(
            self,
            |x| x.max(S::zero()),
            |x, _| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: S, hi: S) -> Self {
        unary(
            self,
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    S::one()
                } else {
                    S::zero()
                }
            },
        )
    }

    pub fn sum_all(&self) -> Self {
        let shape = self.shape().to_vec();
        let value = Tensor::scalar(self.value().sum());
        self.tape().record(value, &[self], move |g, _| {
            vec![Some(Tensor::full(shape, g.data()[0]))]
        })
    }

    pub fn mean_all(&self) -> Self {
        let n = S::c(self.value().len() as f64);
        self.sum_all().scale(S::one() / n)
    }

    /// Sum over one axis.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Self> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value().data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                let acc = &mut out[o * inner..(o + 1) * inner];
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
        }
        let out_shape = reduced_shape(&shape, axis, keepdim);
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.tape().record(value, &[self], move |g, _| {
            let gd = g.data();
            let mut dx = vec![S::zero(); outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    dx[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(shape, dx))]
        }))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Self> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", format!("axis {axis}")))?;
        Ok(self.sum_axis(axis, keepdim)?.scale(S::one() / S::c(n as f64)))
    }

    /// Max over one axis; the gradient goes to the first maximal element.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Self> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::dim("max_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value().data();
        let mut out = vec![S::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let v = x[(o * n + k) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = k;
                    }
                }
            }
        }
        let value = Tensor::from_parts(reduced_shape(&shape, axis, keepdim), out);
        Ok(self.tape().record(value, &[self], move |g, _| {
            let gd = g.data();
            let mut dx = vec![S::zero(); outer * n * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let k = arg[o * inner + i];
                    dx[(o * n + k) * inner + i] = gd[o * inner + i];
                }
            }
            vec![Some(Tensor::from_parts(shape, dx))]
        }))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let old = self.shape().to_vec();
        let value = self.value().reshape(shape)?;
        Ok(self.tape().record(value, &[self], move |g, _| {
            vec![Some(g.reshape(old).expect("same element count"))]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} for rank {rank}")));
        }
        let value = permute_tensor(self.value(), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.tape().record(value, &[self], move |g, _| {
            vec![Some(permute_tensor(g, &inverse))]
        }))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.tape().record(value, &[self], move |g, _| {
            let gd = g.data();
            let mut dx = vec![S::zero(); outer * n * inner];
            for o in 0..outer {
                dx[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape, dx))]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} of {base:?}")));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                out.extend_from_slice(&p.value().data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let value = Tensor::from_parts(out_shape, out);
        let tape = first.tape();
        Ok(tape.record(value, parts, move |g, need| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(extents.len());
            for (&e, &needed) in extents.iter().zip(need) {
                if needed {
                    let mut d = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let row = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[row..row + e * inner]);
                    }
                    let mut s = base.clone();
                    s[axis] = e;
                    grads.push(Some(Tensor::from_parts(s, d)));
                } else {
                    grads.push(None);
                }
                offset += e;
            }
            grads
        }))
    }
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    out
}

pub(crate) fn permute_tensor<S: Scalar>(t: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; rank];
    let src = t.data();
    let mut out = vec![S::zero(); t.len()];
    for_each_broadcast(&out_shape, &strides, &zeros, |o, i, _| out[o] = src[i]);
    Tensor::from_parts(out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn broadcast_mul_and_gradient_reduction() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(t(&[3], &[10., 20., 30.]));
        let y = a.mul(&b).unwrap();
        assert_eq!(y.value().data(), &[10., 40., 90., 40., 100., 180.]);
        let g = tape.backward(&y.sum_all()).unwrap();
        assert_eq!(g.wrt(&a).data(), &[10., 20., 30., 10., 20., 30.]);
        assert_eq!(g.wrt(&b).data(), &[5., 7., 9.]);
    }

    #[test]
    fn mismatched_broadcast_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.; 6]));
        let b = tape.constant(t(&[2], &[0.; 2]));
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn silu_values() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 1.0]));
        let y = x.silu();
        assert_eq!(y.value().data()[0], 0.0);
        assert!((y.value().data()[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let g = tape.backward(&y.sum_all()).unwrap();
        assert!((g.wrt(&x).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn permute_roundtrip_and_values() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64);
        let p = permute_tensor(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] = x[i, j, k]
        assert_eq!(p.data()[1 * 6 + 1 * 3 + 2], x.data()[1 * 12 + 2 * 4 + 1]);
        let back = permute_tensor(&p, &[1, 2, 0]);
        assert_eq!(back, x);
    }

    #[test]
    fn axis_reductions() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., 5., 3., 4., 2., 6.]));
        let s = x.sum_axis(1, false).unwrap();
        assert_eq!(s.value().data(), &[9., 12.]);
        let m = x.max_axis(0, true).unwrap();
        assert_eq!(m.value().shape(), &[1, 3]);
        assert_eq!(m.value().data(), &[4., 5., 6.]);
        let g = tape.backward(&m.sum_all()).unwrap();
        assert_eq!(g.wrt(&x).data(), &[0., 1., 0., 1., 0., 1.]);
    }

    #[test]
    fn narrow_concat_inverse() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::from_fn(vec![2, 5, 3], |i| i as f64));
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 3).unwrap();
        let joined = Var::concat(&[&a, &b], 1).unwrap();
        assert_eq!(joined.value(), x.value());
        let g = tape.backward(&joined.scale(2.0).sum_all()).unwrap();
        assert!(g.wrt(&x).data().iter().all(|&v| v == 2.0));
    }
}
