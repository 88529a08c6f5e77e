//! The gated residual vision state-space block.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Bound, Conv2d, LayerNorm, Linear, ParamStore};
use crate::ss2d::Ss2d;
use crate::ssm::SelectiveScan;
use crate::tensor::{Conv2dSpec, Scalar, Var};

/// Channels-last residual block:
///
/// ```text
/// s1  = LN(SS2D(SiLU(DWConv3x3(Linear_in(x)))))
/// s2  = SiLU(Linear_gate(x))
/// out = Linear_out(s1 * s2) + x
/// ```
#[derive(Debug, Clone)]
pub struct VssBlock {
    pub in_proj: Linear,
    pub gate_proj: Linear,
    pub dwconv: Conv2d,
    pub ss2d: Ss2d,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
    pub channels: usize,
    pub inner: usize,
}

impl VssBlock {
    /// `inner` is the width of both streams.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        inner: usize,
        state_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), channels, inner, false, rng)?;
        let gate_proj = Linear::new(store, &format!("{name}.gate_proj"), channels, inner, false, rng)?;
        let dwconv = Conv2d::new(
            store,
            &format!("{name}.dwconv"),
            inner,
            inner,
            3,
            Conv2dSpec::same(3).with_groups(inner),
            true,
            rng,
        )?;
        let rank = SelectiveScan::default_rank(channels);
        let ss2d = Ss2d::new(store, &format!("{name}.ss2d"), inner, state_dim, rank, rng)?;
        let out_norm = LayerNorm::new(store, &format!("{name}.out_norm"), inner)?;
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), inner, channels, false, rng)?;
        Ok(Self {
            in_proj,
            gate_proj,
            dwconv,
            ss2d,
            out_norm,
            out_proj,
            channels,
            inner,
        })
    }

    /// `[B, H, W, C] -> [B, H, W, C]`.
    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: &Var<'t, S>) -> Result<Var<'t, S>> {
        match *x.shape() {
            [_, _, _, c] if c == self.channels => {}
            _ => {
                return Err(Error::dim(
                    "vss_forward",
                    format!("expected [B, H, W, {}], got {:?}", self.channels, x.shape()),
                ))
            }
        }
        let u = self.in_proj.forward(p, x)?.permute(&[0, 3, 1, 2])?;
        let u = self.dwconv.forward(p, &u)?.silu();
        let s1 = self.ss2d.forward(p, &u)?.permute(&[0, 2, 3, 1])?;
        let s1 = self.out_norm.forward(p, &s1)?;
        let s2 = self.gate_proj.forward(p, x)?.silu();
        self.out_proj.forward(p, &s1.mul(&s2)?)?.add(x)
    }
}
