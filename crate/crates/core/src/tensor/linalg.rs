use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// `out[m, n] += a[m, k] · b[k, n]`, all row-major.
pub fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// Row-major transpose of an `[m, n]` matrix.
pub(crate) fn transpose<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

impl<'t, S: Scalar> Var<'t, S> {
    /// `x · w + b` over the trailing axis: x `[.., d_in]`, w `[d_in, d_out]`, b `[d_out]`.
    pub fn linear(&self, w: &Self, b: Option<&Self>) -> Result<Self> {
        let xs = self.shape().to_vec();
        let ws = w.shape().to_vec();
        let d_in = *xs.last().ok_or_else(|| Error::dim("linear", "rank-0 input"))?;
        if ws.len() != 2 || ws[0] != d_in {
            return Err(Error::Shape {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let d_out = ws[1];
        if let Some(b) = b {
            if b.shape() != [d_out] {
                return Err(Error::Shape {
                    op: "linear bias",
                    lhs: ws,
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let rows = self.value().len() / d_in.max(1);
        let mut out = vec![S::zero(); rows * d_out];
        if let Some(b) = b {
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(b.value().data());
            }
        }
        matmul_into(self.value().data(), w.value().data(), &mut out, rows, d_in, d_out);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = d_out;
        let value = Tensor::from_parts(out_shape, out);

        let (xv, wv) = (self.value().clone(), w.value().clone());
        let tape = self.tape();
        let backward = move |g: &Tensor<S>, need: &[bool]| {
            let gd = g.data();
            let dx = need[0].then(|| {
                let wt = transpose(wv.data(), d_in, d_out);
                let mut dx = vec![S::zero(); rows * d_in];
                matmul_into(gd, &wt, &mut dx, rows, d_out, d_in);
                Tensor::from_parts(xs.clone(), dx)
            });
            let dw = need[1].then(|| {
                let xt = transpose(xv.data(), rows, d_in);
                let mut dw = vec![S::zero(); d_in * d_out];
                matmul_into(&xt, gd, &mut dw, d_in, rows, d_out);
                Tensor::from_parts(vec![d_in, d_out], dw)
            });
            let mut grads = vec![dx, dw];
            if need.len() == 3 {
                grads.push(need[2].then(|| {
                    let mut db = vec![S::zero(); d_out];
                    for row in gd.chunks(d_out) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    Tensor::from_parts(vec![d_out], db)
                }));
            }
            grads
        };
        Ok(match b {
            Some(b) => tape.record(value, &[self, w, b], backward),
            None => tape.record(value, &[self, w], backward),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn identity_weight() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![2]));
        let y = x.linear(&w, Some(&b)).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0]);
    }

    #[test]
    fn hand_arithmetic() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(vec![2], &[1.0, 1.0]).unwrap());
        let w = tape.constant(Tensor::from_f64(vec![2, 1], &[2.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::from_f64(vec![1], &[1.0]).unwrap());
        assert_eq!(x.linear(&w, Some(&b)).unwrap().value().data(), &[6.0]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![4, 3]));
        let w = tape.constant(Tensor::zeros(vec![2, 5]));
        let err = x.linear(&w, None).unwrap_err().to_string();
        assert!(err.contains("[4, 3]") && err.contains("[2, 5]"), "{err}");
    }

    #[test]
    fn weight_gradient_of_sum_is_column_sums_of_x() {
        let tape = Tape::<f64>::new();
        let xv = Tensor::from_f64(vec![3, 2], &[1.0, -2.0, 0.5, 4.0, 3.0, 1.0]).unwrap();
        let x = tape.constant(xv);
        let w = tape.leaf(Tensor::zeros(vec![2, 4]));
        let g = tape.backward(&x.linear(&w, None).unwrap().sum_all()).unwrap();
        let gw = g.wrt(&w);
        for j in 0..4 {
            assert_eq!(gw.data()[j], 4.5);
            assert_eq!(gw.data()[4 + j], 3.0);
        }
    }
}
