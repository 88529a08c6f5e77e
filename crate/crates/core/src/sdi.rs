//! Multi-level semantics/detail fusion: attention-refine each level, align to a
//! common width, resize every level to every target, smooth, multiply.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Bound, Conv2d, Linear, ParamStore};
use crate::tensor::{Conv2dSpec, Scalar, Var};

/// Per-level feature maps, finest first, each `[B, C_i, H_i, W_i]`.
pub type FeaturePyramid<'t, S> = Vec<Var<'t, S>>;

pub const CBAM_REDUCTION: usize = 16;
pub const CBAM_SPATIAL_KERNEL: usize = 7;

/// Channel gate then spatial gate.
#[derive(Debug, Clone)]
pub struct Cbam {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
    pub channels: usize,
}

impl Cbam {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = (channels / CBAM_REDUCTION).max(1);
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, true, rng)?,
            spatial: Conv2d::new(
                store,
                &format!("{name}.spatial"),
                2,
                1,
                CBAM_SPATIAL_KERNEL,
                Conv2dSpec::same(CBAM_SPATIAL_KERNEL),
                true,
                rng,
            )?,
            channels,
        })
    }

    fn mlp<'t, S: Scalar>(&self, p: &Bound<'t, S>, v: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.fc2.forward(p, &self.fc1.forward(p, v)?.relu())
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: &Var<'t, S>) -> Result<Var<'t, S>> {
        let &[b, c, h, w] = x.shape() else {
            return Err(Error::dim("cbam", format!("expected [B, C, H, W], got {:?}", x.shape())));
        };
        if c != self.channels {
            return Err(Error::dim("cbam", format!("{c} channels for a {}-channel gate", self.channels)));
        }
        let flat = x.reshape(vec![b, c, h * w])?;
        let avg = flat.mean_axis(2, false)?;
        let max = flat.max_axis(2, false)?;
        let gate = self.mlp(p, &avg)?.add(&self.mlp(p, &max)?)?.sigmoid();
        let x1 = x.mul(&gate.reshape(vec![b, c, 1, 1])?)?;

        let pooled = Var::concat(&[&x1.mean_axis(1, true)?, &x1.max_axis(1, true)?], 1)?;
        let sgate = self.spatial.forward(p, &pooled)?.sigmoid();
        x1.mul(&sgate)
    }
}

/// `j < i`: adaptive average pool; `j == i`: identity; `j > i`: bilinear.
pub fn resize_to_level<'t, S: Scalar>(
    f: &Var<'t, S>,
    target: (usize, usize),
    j: usize,
    i: usize,
) -> Result<Var<'t, S>> {
    let &[_, _, h, w] = f.shape() else {
        return Err(Error::dim("resize_to_level", format!("expected [B, C, H, W], got {:?}", f.shape())));
    };
    let (th, tw) = target;
    let consistent = match j.cmp(&i) {
        std::cmp::Ordering::Less => h >= th && w >= tw && (h, w) != (th, tw),
        std::cmp::Ordering::Equal => (h, w) == (th, tw),
        std::cmp::Ordering::Greater => h <= th && w <= tw && (h, w) != (th, tw),
    };
    if !consistent {
        return Err(Error::Contract(format!(
            "level {j} of size {h}x{w} cannot be resized to level {i} of size {th}x{tw}"
        )));
    }
    match j.cmp(&i) {
        std::cmp::Ordering::Less => f.adaptive_avg_pool2d(th, tw),
        std::cmp::Ordering::Equal => Ok(f.clone()),
        std::cmp::Ordering::Greater => f.bilinear_resize(th, tw),
    }
}

#[derive(Debug, Clone)]
pub struct Sdi {
    pub attention: Vec<Cbam>,
    pub align: Vec<Conv2d>,
    /// `smooth[i][j]` maps level `j` (resized to level `i`) before fusion.
    pub smooth: Vec<Vec<Conv2d>>,
    pub width: usize,
}

impl Sdi {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        level_channels: &[usize],
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let m = level_channels.len();
        let mut attention = Vec::with_capacity(m);
        let mut align = Vec::with_capacity(m);
        for (i, &ci) in level_channels.iter().enumerate() {
            attention.push(Cbam::new(store, &format!("{name}.level{i}.cbam"), ci, rng)?);
            align.push(Conv2d::new(
                store,
                &format!("{name}.level{i}.align"),
                ci,
                width,
                1,
                Conv2dSpec::default(),
                true,
                rng,
            )?);
        }
        let mut smooth = Vec::with_capacity(m);
        for i in 0..m {
            let mut row = Vec::with_capacity(m);
            for j in 0..m {
                row.push(Conv2d::new(
                    store,
                    &format!("{name}.smooth{i}{j}"),
                    width,
                    width,
                    3,
                    Conv2dSpec::same(3),
                    true,
                    rng,
                )?);
            }
            smooth.push(row);
        }
        Ok(Self { attention, align, smooth, width })
    }

    pub fn levels(&self) -> usize {
        self.align.len()
    }

    /// Refined and aligned level `i` (`f_i^2`).
    pub fn align_channels<'t, S: Scalar>(&self, p: &Bound<'t, S>, f: &Var<'t, S>, i: usize) -> Result<Var<'t, S>> {
        let refined = self.attention[i].forward(p, f)?;
        self.align[i].forward(p, &refined)
    }

    /// One fused output per input level, each `[B, width, H_i, W_i]`.
    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, pyr: &[Var<'t, S>]) -> Result<FeaturePyramid<'t, S>> {
        let m = self.levels();
        if pyr.len() != m {
            return Err(Error::dim("sdi_forward", format!("{} levels for a {m}-level fusion", pyr.len())));
        }
        let aligned = pyr
            .iter()
            .enumerate()
            .map(|(i, f)| self.align_channels(p, f, i).map_err(|e| e.tagged(format!("sdi level {i}"))))
            .collect::<Result<Vec<_>>>()?;
        (0..m)
            .map(|i| {
                let target = (aligned[i].shape()[2], aligned[i].shape()[3]);
                let mut acc: Option<Var<'t, S>> = None;
                for (j, fj) in aligned.iter().enumerate() {
                    let branch = resize_to_level(fj, target, j, i)
                        .and_then(|r| self.smooth[i][j].forward(p, &r))
                        .map_err(|e| e.tagged(format!("sdi (i, j) = ({i}, {j})")))?;
                    acc = Some(match acc {
                        None => branch,
                        Some(a) => a.mul(&branch)?,
                    });
                }
                Ok(acc.expect("at least one level"))
            })
            .collect()
    }
}
