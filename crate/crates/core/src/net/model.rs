use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{Bound, Conv2d, LayerNorm, ParamStore};
use crate::sdi::{FeaturePyramid, Sdi};
use crate::tensor::{Conv2dSpec, Scalar, Tape, Tensor, Var};
use crate::vss::VssBlock;

/// One encoder stage: optional 2x downsample, then VSS blocks (channels-last).
#[derive(Debug, Clone)]
pub struct Stage {
    /// Patch embedding for stage 0, patch merging afterwards.
    pub embed: Conv2d,
    pub norm: LayerNorm,
    pub blocks: Vec<VssBlock>,
}

/// Encoder, fusion and decoder with one or two full-resolution heads.
#[derive(Debug, Clone)]
pub struct VmUnet<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub stages: Vec<Stage>,
    pub sdi: Sdi,
    /// `decoder[i]` refines the upsampled map at level `i` (0..3).
    pub decoder: Vec<Conv2d>,
    /// `heads[0]` reads the finest decoder map; `heads[1]`, if present, the next one.
    pub heads: Vec<Conv2d>,
}

impl<S: Scalar> VmUnet<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let chans = config.stage_channels();
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let name = format!("encoder.stage{s}");
            let (c_in, k) = if s == 0 { (config.in_channels, 4) } else { (chans[s - 1], 2) };
            let embed = Conv2d::new(
                &mut params,
                &format!("{name}.embed"),
                c_in,
                chans[s],
                k,
                Conv2dSpec::strided(k),
                true,
                &mut rng,
            )?;
            let norm = LayerNorm::new(&mut params, &format!("{name}.norm"), chans[s])?;
            let blocks = (0..config.depths[s])
                .map(|b| {
                    VssBlock::new(
                        &mut params,
                        &format!("{name}.block{b}"),
                        chans[s],
                        config.inner_channels(s),
                        config.state_dim,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { embed, norm, blocks });
        }
        let c = config.sdi_channels;
        let sdi = Sdi::new(&mut params, "sdi", &chans, c, &mut rng)?;
        let decoder = (0..3)
            .map(|i| {
                Conv2d::new(&mut params, &format!("decoder.up{i}"), c, c, 3, Conv2dSpec::same(3), true, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = ["final", "aux"][..config.heads()]
            .iter()
            .map(|h| {
                Conv2d::new(
                    &mut params,
                    &format!("head.{h}"),
                    c,
                    config.num_classes,
                    1,
                    Conv2dSpec::default(),
                    true,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params, stages, sdi, decoder, heads })
    }

    /// Same architecture and values in another precision.
    pub fn cast<T: Scalar>(&self) -> VmUnet<T> {
        VmUnet {
            config: self.config.clone(),
            params: self.params.cast(),
            stages: self.stages.clone(),
            sdi: self.sdi.clone(),
            decoder: self.decoder.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match *shape {
            [_, c, h, w]
                if c == self.config.in_channels
                    && h > 0
                    && w > 0
                    && h % ModelConfig::STRIDE == 0
                    && w % ModelConfig::STRIDE == 0 =>
            {
                Ok((h, w))
            }
            _ => Err(Error::dim(
                "vmunet",
                format!(
                    "expected [B, {}, H, W] with H, W multiples of {}, got {shape:?}",
                    self.config.in_channels,
                    ModelConfig::STRIDE
                ),
            )),
        }
    }

    /// `[B, 3, H, W]` to four NCHW levels `[B, 2^i C, H / 2^(i+2), W / 2^(i+2)]`.
    pub fn encode<'t>(&self, p: &Bound<'t, S>, x: &Var<'t, S>) -> Result<FeaturePyramid<'t, S>> {
        self.check_input(x.shape())?;
        let mut levels = Vec::with_capacity(4);
        let mut cur = x.clone();
        for (s, stage) in self.stages.iter().enumerate() {
            let t = stage.embed.forward(p, &cur)?.permute(&[0, 2, 3, 1])?;
            let mut t = stage.norm.forward(p, &t)?;
            for (b, block) in stage.blocks.iter().enumerate() {
                t = block.forward(p, &t).map_err(|e| e.tagged(format!("stage {s} block {b}")))?;
            }
            cur = t.permute(&[0, 3, 1, 2])?;
            levels.push(cur.clone());
        }
        Ok(levels)
    }

    /// Fused levels to logits: `[final]` or `[final, aux]`, each `[B, 1, H, W]`.
    pub fn decode<'t>(&self, p: &Bound<'t, S>, pyr: &[Var<'t, S>], out: (usize, usize)) -> Result<Vec<Var<'t, S>>> {
        if pyr.len() != 4 {
            return Err(Error::dim("decode", format!("expected 4 levels, got {}", pyr.len())));
        }
        let mut d = pyr[3].clone();
        let mut maps = Vec::with_capacity(2);
        for i in (0..3).rev() {
            let (h, w) = (pyr[i].shape()[2], pyr[i].shape()[3]);
            let up = d.bilinear_resize(h, w)?;
            d = self.decoder[i].forward(p, &up)?.silu().add(&pyr[i])?;
            if i <= 1 {
                maps.push(d.clone());
            }
        }
        // maps = [level 1, level 0]
        maps.reverse();
        self.heads
            .iter()
            .zip(&maps)
            .map(|(head, m)| head.forward(p, m)?.bilinear_resize(out.0, out.1))
            .collect()
    }

    /// Encoder, fusion and decoder.
    pub fn forward<'t>(&self, p: &Bound<'t, S>, x: &Var<'t, S>) -> Result<Vec<Var<'t, S>>> {
        let (h, w) = self.check_input(x.shape())?;
        let levels = self.encode(p, x)?;
        let fused = self.sdi.forward(p, &levels)?;
        self.decode(p, &fused, (h, w))
    }

    /// Untracked forward; returns head logits.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let tape = Tape::new();
        let p = self.params.constants(&tape);
        let out = self.forward(&p, &tape.constant(x.clone()))?;
        Ok(out.into_iter().map(Var::into_value).collect())
    }
}
