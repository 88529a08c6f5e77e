use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

impl<'t, S: Scalar> Var<'t, S> {
    /// Normalizes over the last axis (biased variance), then applies `gamma * x̂ + beta`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: S) -> Result<Self> {
        let shape = self.shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::dim("layer_norm", "rank-0 input"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape().to_vec(),
            });
        }
        if eps <= S::zero() {
            return Err(Error::Domain("layer_norm eps must be positive".into()));
        }
        let rows = self.value().len() / c;
        let inv_c = S::one() / S::c(c as f64);
        let x = self.value().data();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![S::zero(); rows * c];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * c];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = gd[j] * xh + bd[j];
            }
        }
        let value = Tensor::from_parts(shape.clone(), out);
        let gv = gamma.value().clone();
        Ok(self.tape().record(value, &[self, gamma, beta], move |g, need| {
            let gd = g.data();
            let gamma = gv.data();
            let dx = need[0].then(|| {
                let mut dx = vec![S::zero(); rows * c];
                for r in 0..rows {
                    let (mut m1, mut m2) = (S::zero(), S::zero());
                    for j in 0..c {
                        let dxh = gd[r * c + j] * gamma[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xhat[r * c + j];
                    }
                    m1 = m1 * inv_c;
                    m2 = m2 * inv_c;
                    for j in 0..c {
                        let dxh = gd[r * c + j] * gamma[j];
                        dx[r * c + j] = inv_std[r] * (dxh - m1 - xhat[r * c + j] * m2);
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            let mut dgamma = need[1].then(|| vec![S::zero(); c]);
            let mut dbeta = need[2].then(|| vec![S::zero(); c]);
            for r in 0..rows {
                for j in 0..c {
                    let gv = gd[r * c + j];
                    if let Some(dg) = dgamma.as_mut() {
                        dg[j] = dg[j] + gv * xhat[r * c + j];
                    }
                    if let Some(db) = dbeta.as_mut() {
                        db[j] = db[j] + gv;
                    }
                }
            }
            vec![
                dx,
                dgamma.map(|d| Tensor::from_parts(vec![c], d)),
                dbeta.map(|d| Tensor::from_parts(vec![c], d)),
            ]
        }))
    }
}
