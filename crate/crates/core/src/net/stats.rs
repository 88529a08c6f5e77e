//! Analytic parameter and operation counts.
//!
//! Convolutions, linear layers and the scan recurrence contribute
//! multiply-accumulates (bias adds folded in); every other op contributes one
//! operation per output element. `flops = 2 * macs + elementwise`.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use super::{ModelConfig, VmUnet};
use crate::layers::{Conv2d, Linear};
use crate::sdi::Cbam;
use crate::ss2d::Ss2d;
use crate::ssm::SelectiveScan;
use crate::tensor::Scalar;
use crate::vss::VssBlock;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    pub macs: u64,
    pub elementwise: u64,
}

impl Cost {
    pub fn macs(macs: u64) -> Self {
        Self { macs, elementwise: 0 }
    }

    pub fn elementwise(n: u64) -> Self {
        Self { macs: 0, elementwise: n }
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            macs: self.macs + o.macs,
            elementwise: self.elementwise + o.elementwise,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), Add::add)
    }
}

pub fn conv_cost(conv: &Conv2d, out_h: usize, out_w: usize) -> Cost {
    Cost::macs(conv.macs(out_h, out_w))
}

pub fn linear_cost(l: &Linear, tokens: usize) -> Cost {
    Cost::macs((tokens * l.d_in * l.d_out) as u64)
}

pub fn scan_cost(s: &SelectiveScan, len: usize) -> Cost {
    let (l, d, n) = (len as u64, s.channels as u64, s.state_dim as u64);
    linear_cost(&s.x_proj, len)
        + linear_cost(&s.dt_proj, len)
        // state update (two products) and readout per state, skip per channel
        + Cost::macs(3 * l * d * n + l * d)
        // softplus, A = -exp(A_log), and the exp / gain of each discretized step
        + Cost::elementwise(l * d + d * n + 2 * l * d * n)
}

pub fn ss2d_cost(s: &Ss2d, h: usize, w: usize) -> Cost {
    let merge = Cost::elementwise(3 * (s.channels * h * w) as u64);
    s.scans.iter().map(|sc| scan_cost(sc, h * w)).sum::<Cost>() + merge
}

pub fn vss_cost(b: &VssBlock, h: usize, w: usize) -> Cost {
    let t = h * w;
    let (te, tc) = ((t * b.inner) as u64, (t * b.channels) as u64);
    linear_cost(&b.in_proj, t)
        + linear_cost(&b.gate_proj, t)
        + linear_cost(&b.out_proj, t)
        + conv_cost(&b.dwconv, h, w)
        + ss2d_cost(&b.ss2d, h, w)
        // two SiLUs, layer norm, gate product, residual
        + Cost::elementwise(4 * te + tc)
}

pub fn cbam_cost(c: &Cbam, h: usize, w: usize) -> Cost {
    let (ch, t) = (c.channels as u64, (h * w) as u64);
    let hidden = c.fc1.d_out as u64;
    Cost::macs(2 * (ch * hidden + hidden * ch))
        + conv_cost(&c.spatial, h, w)
        // global pools, relu, add, sigmoid, channel scale, channel pools, sigmoid, spatial scale
        + Cost::elementwise(2 * ch * t + 2 * hidden + 2 * ch + ch * t + 2 * t + t + ch * t)
}

pub fn stage_cost(cfg: &ModelConfig, m: &super::Stage, s: usize, h: usize, w: usize) -> Cost {
    let (lh, lw) = ModelConfig::level_size(h, w, s);
    let c = cfg.stage_channels()[s];
    let mut cost = conv_cost(&m.embed, lh, lw) + Cost::elementwise((lh * lw * c) as u64);
    for b in &m.blocks {
        cost += vss_cost(b, lh, lw);
    }
    cost
}

pub fn sdi_cost<S: Scalar>(m: &VmUnet<S>, h: usize, w: usize) -> Cost {
    let sdi = &m.sdi;
    let sizes: Vec<(usize, usize)> = (0..4).map(|i| ModelConfig::level_size(h, w, i)).collect();
    let c = sdi.width as u64;
    let mut cost = Cost::default();
    for (i, &(lh, lw)) in sizes.iter().enumerate() {
        let t = (lh * lw) as u64;
        cost += cbam_cost(&sdi.attention[i], lh, lw) + conv_cost(&sdi.align[i], lh, lw);
        for j in 0..4 {
            cost += conv_cost(&sdi.smooth[i][j], lh, lw);
            if j != i {
                cost += Cost::elementwise(c * t);
            }
        }
        // three Hadamard products per level
        cost += Cost::elementwise(3 * c * t);
    }
    cost
}

pub fn decoder_cost<S: Scalar>(m: &VmUnet<S>, h: usize, w: usize) -> Cost {
    let c = m.sdi.width as u64;
    let mut cost = Cost::default();
    for i in 0..3 {
        let (lh, lw) = ModelConfig::level_size(h, w, i);
        // upsample, SiLU, skip add
        cost += conv_cost(&m.decoder[i], lh, lw) + Cost::elementwise(3 * c * (lh * lw) as u64);
    }
    for (k, head) in m.heads.iter().enumerate() {
        let (lh, lw) = ModelConfig::level_size(h, w, k);
        cost += conv_cost(head, lh, lw) + Cost::elementwise((h * w) as u64);
    }
    cost
}

pub fn model_cost<S: Scalar>(m: &VmUnet<S>, h: usize, w: usize) -> Cost {
    let enc: Cost = (0..4).map(|s| stage_cost(&m.config, &m.stages[s], s, h, w)).sum();
    enc + sdi_cost(m, h, w) + decoder_cost(m, h, w)
}

/// Exact trainable element count.
pub fn count_params<S: Scalar>(m: &VmUnet<S>) -> usize {
    m.params.numel()
}

/// Analytic operation count for one `h x w` sample.
pub fn count_flops<S: Scalar>(m: &VmUnet<S>, h: usize, w: usize) -> u64 {
    model_cost(m, h, w).flops()
}

#[derive(Debug, Clone)]
pub struct PartStats {
    pub name: &'static str,
    pub params: usize,
    pub cost: Cost,
}

#[derive(Debug, Clone)]
pub struct ModelStats {
    pub param_count: usize,
    pub flops: u64,
    pub macs: u64,
    pub input_size: (usize, usize),
    pub parts: Vec<PartStats>,
}

impl ModelStats {
    pub fn of<S: Scalar>(m: &VmUnet<S>, h: usize, w: usize) -> Self {
        let params_with = |prefix: &str| -> usize {
            m.params.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.len()).sum()
        };
        let enc: Cost = (0..4).map(|s| stage_cost(&m.config, &m.stages[s], s, h, w)).sum();
        let parts = vec![
            PartStats { name: "encoder", params: params_with("encoder."), cost: enc },
            PartStats { name: "sdi", params: params_with("sdi."), cost: sdi_cost(m, h, w) },
            PartStats {
                name: "decoder",
                params: params_with("decoder.") + params_with("head."),
                cost: decoder_cost(m, h, w),
            },
        ];
        let total: Cost = parts.iter().map(|p| p.cost).sum();
        Self {
            param_count: count_params(m),
            flops: total.flops(),
            macs: total.macs,
            input_size: (h, w),
            parts,
        }
    }

    /// `part,params,macs,flops` rows plus a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("part,params,macs,flops\n");
        for p in &self.parts {
            s += &format!("{},{},{},{}\n", p.name, p.params, p.cost.macs, p.cost.flops());
        }
        s += &format!("total,{},{},{}\n", self.param_count, self.macs, self.flops);
        s
    }
}

impl fmt::Display for ModelStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {}x{}", self.input_size.0, self.input_size.1)?;
        writeln!(f, "{:<10} {:>12} {:>14} {:>14}", "part", "params(M)", "MACs(G)", "FLOPs(G)")?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, p: usize, c: Cost| {
            writeln!(
                f,
                "{:<10} {:>12.3} {:>14.3} {:>14.3}",
                name,
                p as f64 / 1e6,
                c.macs as f64 / 1e9,
                c.flops() as f64 / 1e9
            )
        };
        for p in &self.parts {
            row(f, p.name, p.params, p.cost)?;
        }
        let total: Cost = self.parts.iter().map(|p| p.cost).sum();
        row(f, "total", self.param_count, total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamStore;
    use crate::tensor::Conv2dSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_pointwise_conv_on_8x8() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv2d::new(&mut store, "c", 1, 1, 1, Conv2dSpec::default(), false, &mut rng).unwrap();
        assert_eq!(conv_cost(&c, 8, 8).flops(), 128);
    }

    #[test]
    fn single_linear_cost() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, "fc", 3, 4, true, &mut rng).unwrap();
        assert_eq!(linear_cost(&l, 1).flops(), 24);
        assert_eq!(store.numel(), 16);
    }

    #[test]
    fn cost_scales_with_area() {
        let m = VmUnet::<f32>::new(ModelConfig::desk(), 0).unwrap();
        let small = count_flops(&m, 64, 64) as f64;
        let big = count_flops(&m, 128, 128) as f64;
        assert!((big / small - 4.0).abs() < 0.02, "{}", big / small);
    }

    #[test]
    fn parts_sum_to_total() {
        let m = VmUnet::<f32>::new(ModelConfig::micro(), 0).unwrap();
        let s = ModelStats::of(&m, 32, 32);
        assert_eq!(s.parts.iter().map(|p| p.params).sum::<usize>(), s.param_count);
        assert_eq!(s.flops, count_flops(&m, 32, 32));
        assert!(s.to_csv().lines().count() == 5);
    }
}
