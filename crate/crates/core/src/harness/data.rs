//! Synthetic ellipse segmentation data and its on-disk form.
//!
//! A dataset directory holds `images.vtns` (`[n, 3, H, W]`), `masks.vtns`
//! (`[n, 1, H, W]`) and a `key = value` file `index.txt`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{decode_tensor, encode_tensor};
use crate::net::ModelConfig;
use crate::tensor::Tensor;

/// Bounds on the foreground fraction of every generated mask.
pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.6;

pub const INDEX_FILE: &str = "index.txt";
pub const IMAGES_FILE: &str = "images.vtns";
pub const MASKS_FILE: &str = "masks.vtns";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, H, W]`, values 0 or 1.
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn foreground(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground() as f64 / self.mask.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    /// First `n` samples and the rest.
    pub fn split_at(mut self, n: usize) -> (Dataset, Dataset) {
        let rest = self.samples.split_off(n.min(self.samples.len()));
        let tail = Dataset { height: self.height, width: self.width, samples: rest };
        (self, tail)
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    level: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

fn draw_ellipses(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<Ellipse> {
    let side = h.min(w) as f64;
    let k = rng.gen_range(1..=3);
    (0..k)
        .map(|_| {
            let theta = rng.gen_range(0.0..PI);
            Ellipse {
                cx: rng.gen_range(0.15..0.85) * w as f64,
                cy: rng.gen_range(0.15..0.85) * h as f64,
                a: rng.gen_range(0.07..0.3) * side,
                b: rng.gen_range(0.07..0.3) * side,
                cos: theta.cos(),
                sin: theta.sin(),
                level: rng.gen_range(0.6..0.9),
            }
        })
        .collect()
}

/// Ellipses are redrawn until the mask fraction lies in the declared bounds.
fn generate_one(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Sample {
    let (ellipses, mask) = loop {
        let e = draw_ellipses(rng, h, w);
        let owner: Vec<Option<usize>> = (0..h * w)
            .map(|i| {
                let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                e.iter().position(|el| el.contains(x, y))
            })
            .collect();
        let fg = owner.iter().filter(|o| o.is_some()).count() as f64 / (h * w) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fg) {
            break (e, owner);
        }
    };

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.12..0.4));
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.85..1.0));
    let (fx, fy) = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5));
    let (px, py) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let mut image = vec![0f32; 3 * h * w];
    for (i, owner) in mask.iter().enumerate() {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let texture = 0.07 * (fx * x + px).sin() * (fy * y + py).sin();
        for c in 0..3 {
            let level = match owner {
                Some(k) => ellipses[*k].level * tint[c],
                None => base[c] + texture,
            };
            let v = level + rng.gen_range(-0.06..0.06);
            image[c * h * w + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    let mask: Vec<f32> = mask.iter().map(|o| o.is_some() as u8 as f32).collect();
    Sample {
        image: Tensor::new(vec![3, h, w], image).expect("sized buffer"),
        mask: Tensor::new(vec![1, h, w], mask).expect("sized buffer"),
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % ModelConfig::STRIDE != 0 || w % ModelConfig::STRIDE != 0 {
        return Err(Error::Config(format!(
            "image size {h}x{w} must be a positive multiple of {}",
            ModelConfig::STRIDE
        )));
    }
    Ok(())
}

/// Sample `i` depends only on `(seed, i)`.
pub fn gen_synthetic(n: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    check_size(h, w)?;
    let samples = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_one(&mut rng, h, w)
        })
        .collect();
    Ok(Dataset { height: h, width: w, samples })
}

fn stack_or_empty(items: Vec<Tensor<f32>>, inner: [usize; 3]) -> Result<Tensor<f32>> {
    if items.is_empty() {
        Ok(Tensor::zeros(vec![0, inner[0], inner[1], inner[2]]))
    } else {
        Tensor::stack(&items)
    }
}

pub fn save_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (h, w) = (data.height, data.width);
    let images = stack_or_empty(data.samples.iter().map(|s| s.image.clone()).collect(), [3, h, w])?;
    let masks = stack_or_empty(data.samples.iter().map(|s| s.mask.clone()).collect(), [1, h, w])?;
    fs::write(dir.join(IMAGES_FILE), encode_tensor(&images)?)?;
    fs::write(dir.join(MASKS_FILE), encode_tensor(&masks)?)?;
    fs::write(
        dir.join(INDEX_FILE),
        format!(
            "samples = {}\nheight = {h}\nwidth = {w}\nimages = {IMAGES_FILE}\nmasks = {MASKS_FILE}\n",
            data.len()
        ),
    )?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let index = fs::read_to_string(dir.join(INDEX_FILE))?;
    let (mut n, mut h, mut w) = (None, None, None);
    let (mut images_file, mut masks_file) = (IMAGES_FILE.to_string(), MASKS_FILE.to_string());
    for e in super::config::key_values(&index)? {
        let (k, v) = (e.key, e.value);
        let num = || v.parse::<usize>().map_err(|_| Error::Format(format!("index: bad value for {k}: {v:?}")));
        match k.as_str() {
            "samples" => n = Some(num()?),
            "height" => h = Some(num()?),
            "width" => w = Some(num()?),
            "images" => images_file = v,
            "masks" => masks_file = v,
            _ => return Err(Error::Format(format!("index: unknown key {k:?}"))),
        }
    }
    let (Some(n), Some(h), Some(w)) = (n, h, w) else {
        return Err(Error::Format("index: samples, height and width are required".into()));
    };
    let images: Tensor<f32> = decode_tensor(&fs::read(dir.join(&images_file))?).map_err(|e| e.tagged(images_file))?;
    let masks: Tensor<f32> = decode_tensor(&fs::read(dir.join(&masks_file))?).map_err(|e| e.tagged(masks_file))?;
    if images.shape() != [n, 3, h, w] || masks.shape() != [n, 1, h, w] {
        return Err(Error::Format(format!(
            "dataset tensors {:?} / {:?} disagree with index ({n} samples of {h}x{w})",
            images.shape(),
            masks.shape()
        )));
    }
    if masks.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Format("masks must be 0/1".into()));
    }
    let samples = (0..n)
        .map(|i| Ok(Sample { image: images.index_axis0(i)?, mask: masks.index_axis0(i)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { height: h, width: w, samples })
}
