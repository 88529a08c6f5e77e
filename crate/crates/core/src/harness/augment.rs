//! Exactly invertible flips and quarter-turn rotations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::Sample;
use crate::tensor::{Scalar, Tensor};

/// Which augmentations may fire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { hflip: true, vflip: true, rotate: true }
    }
}

impl AugmentConfig {
    pub const NONE: Self = Self { hflip: false, vflip: false, rotate: false };
}

/// Horizontal flip, then vertical flip, then `quarter_turns` counter-clockwise rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl AugmentDraw {
    pub const IDENTITY: Self = Self { hflip: false, vflip: false, quarter_turns: 0 };

    /// Always consumes the same three draws so disabled switches do not shift the stream.
    /// Non-square maps only rotate by 0 or 180 degrees.
    pub fn sample(rng: &mut impl Rng, cfg: AugmentConfig, square: bool) -> Self {
        let h = rng.gen_bool(0.5);
        let v = rng.gen_bool(0.5);
        let mut k = rng.gen_range(0..4u8);
        if !square {
            k &= 2;
        }
        Self {
            hflip: cfg.hflip && h,
            vflip: cfg.vflip && v,
            quarter_turns: if cfg.rotate { k } else { 0 },
        }
    }

    /// The draw for sample `index` of `epoch` under `seed`.
    pub fn for_sample(seed: u64, epoch: usize, index: usize, cfg: AugmentConfig, square: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a6a6_0000_0000);
        rng.set_stream(((epoch as u64) << 32) | index as u64);
        Self::sample(&mut rng, cfg, square)
    }

    pub fn apply<S: Scalar>(&self, t: &Tensor<S>) -> Tensor<S> {
        let mut out = t.clone();
        if self.hflip {
            out = flip(&out, false);
        }
        if self.vflip {
            out = flip(&out, true);
        }
        for _ in 0..self.quarter_turns % 4 {
            out = rot90(&out);
        }
        out
    }

    pub fn invert<S: Scalar>(&self, t: &Tensor<S>) -> Tensor<S> {
        let mut out = t.clone();
        for _ in 0..(4 - self.quarter_turns % 4) % 4 {
            out = rot90(&out);
        }
        if self.vflip {
            out = flip(&out, true);
        }
        if self.hflip {
            out = flip(&out, false);
        }
        out
    }
}

fn dims(t: &[usize]) -> (usize, usize, usize) {
    match *t {
        [c, h, w] => (c, h, w),
        _ => panic!("augmentation expects [C, H, W], got {t:?}"),
    }
}

fn flip<S: Scalar>(t: &Tensor<S>, vertical: bool) -> Tensor<S> {
    let (c, h, w) = dims(t.shape());
    let d = t.data();
    Tensor::from_fn(vec![c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (y, x) = if vertical { (h - 1 - y, x) } else { (y, w - 1 - x) };
        d[ch * h * w + y * w + x]
    })
}

/// Counter-clockwise quarter turn: `[C, H, W]` to `[C, W, H]`.
fn rot90<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = dims(t.shape());
    let d = t.data();
    Tensor::from_fn(vec![c, w, h], |i| {
        let (ch, y, x) = (i / (h * w), (i / h) % w, i % h);
        d[ch * h * w + x * w + (w - 1 - y)]
    })
}

/// Same transform on image and mask.
pub fn augment(s: &Sample, d: AugmentDraw) -> Sample {
    Sample { image: d.apply(&s.image), mask: d.apply(&s.mask) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::gen_synthetic;
    use proptest::prelude::*;

    fn grid(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![c, h, w], |i| i as f32)
    }

    fn all_draws() -> impl Iterator<Item = AugmentDraw> {
        (0..16u8).map(|b| AugmentDraw { hflip: b & 1 != 0, vflip: b & 2 != 0, quarter_turns: b >> 2 })
    }

    #[test]
    fn identity_draw_is_noop() {
        let s = &gen_synthetic(1, 32, 32, 0).unwrap().samples[0];
        assert_eq!(&augment(s, AugmentDraw::IDENTITY), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let t = grid(2, 3, 4);
        let h = AugmentDraw { hflip: true, ..AugmentDraw::IDENTITY };
        assert_eq!(h.apply(&h.apply(&t)), t);
    }

    #[test]
    fn quarter_turn_layout() {
        // [[0, 1], [2, 3]] turned counter-clockwise is [[1, 3], [0, 2]]
        let r = AugmentDraw { quarter_turns: 1, ..AugmentDraw::IDENTITY }.apply(&grid(1, 2, 2));
        assert_eq!(r.data(), &[1.0, 3.0, 0.0, 2.0]);
        let r = rot90(&grid(1, 2, 3));
        assert_eq!(r.shape(), &[1, 3, 2]);
        assert_eq!(r.data(), &[2.0, 5.0, 1.0, 4.0, 0.0, 3.0]);
    }

    #[test]
    fn every_draw_inverts_exactly() {
        let t = grid(3, 4, 4);
        for d in all_draws() {
            assert_eq!(d.invert(&d.apply(&t)), t, "{d:?}");
        }
    }

    #[test]
    fn disabled_switches_give_identity() {
        for i in 0..50 {
            assert_eq!(AugmentDraw::for_sample(1, 2, i, AugmentConfig::NONE, true), AugmentDraw::IDENTITY);
        }
    }

    #[test]
    fn draws_cover_the_transform_set() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..400 {
            seen.insert(AugmentDraw::for_sample(7, 0, i, AugmentConfig::default(), true));
        }
        assert_eq!(seen.len(), 16);
        for i in 0..100 {
            assert_eq!(AugmentDraw::for_sample(7, 0, i, AugmentConfig::default(), false).quarter_turns % 2, 0);
        }
    }

    proptest! {
        #[test]
        fn mask_count_and_label_geometry_preserved(seed in 0u64..1000, b in 0u8..16) {
            let s = &gen_synthetic(1, 32, 32, seed).unwrap().samples[0];
            let d = AugmentDraw { hflip: b & 1 != 0, vflip: b & 2 != 0, quarter_turns: b >> 2 };
            let a = augment(s, d);
            prop_assert_eq!(a.foreground(), s.foreground());
            prop_assert_eq!(&d.invert(&a.mask), &s.mask);
            prop_assert_eq!(&d.invert(&a.image), &s.image);
        }
    }
}
