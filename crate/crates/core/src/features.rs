//! Multi-scale dense feature grids: a small learnable conv pyramid with
//! top-down lateral fusion, and a frozen handcrafted variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numeric::{Graph, Scalar, Tensor, Var};
use crate::params::{fan_in_uniform, Bound, Params};

/// Colour (3), orientation histogram (8) and a constant bias channel.
pub const HANDCRAFTED_CHANNELS: usize = 12;
const ORIENTATION_BINS: usize = 8;
const GRADIENT_GAIN: f64 = 2.0;
const BIAS_CHANNEL: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Learnable,
    Handcrafted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Number of scales `L`; scale `l` has stride `2^(l-1)`.
    pub levels: usize,
    /// `C_l` for `l = 1..=L`. Ignored in handcrafted mode.
    pub channels: Vec<usize>,
    pub mode: FeatureMode,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            levels: 5,
            channels: vec![16, 32, 32, 64, 64],
            mode: FeatureMode::Learnable,
        }
    }
}

impl PyramidConfig {
    /// Backbone depths of the full-size network.
    pub fn paper() -> Self {
        PyramidConfig {
            channels: vec![64, 128, 128, 256, 256],
            ..Self::default()
        }
    }

    pub fn handcrafted(levels: usize) -> Self {
        PyramidConfig {
            levels,
            channels: vec![HANDCRAFTED_CHANNELS; levels],
            mode: FeatureMode::Handcrafted,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("need at least 2 scales, got {}", self.levels)));
        }
        if self.mode == FeatureMode::Learnable
            && (self.channels.len() != self.levels || self.channels.contains(&0))
        {
            return Err(Error::Config(format!(
                "channels {:?} must list {} positive depths",
                self.channels, self.levels
            )));
        }
        Ok(())
    }

    /// Feature depth at scale `l` (1-based).
    pub fn channels_at(&self, l: usize) -> usize {
        match self.mode {
            FeatureMode::Learnable => self.channels[l - 1],
            FeatureMode::Handcrafted => HANDCRAFTED_CHANNELS,
        }
    }

    /// Image sides must be multiples of this.
    pub fn stride(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Closed-form count of learnable weights.
    pub fn parameter_count(&self) -> usize {
        if self.mode == FeatureMode::Handcrafted {
            return 0;
        }
        let c = &self.channels;
        let mut n = 0;
        for l in 0..self.levels {
            let cin = if l == 0 { 3 } else { c[l - 1] };
            n += 9 * cin * c[l] + c[l]; // first conv
            n += 9 * c[l] * c[l] + c[l]; // second conv
            n += c[l] * c[l] + c[l]; // lateral
            if l + 1 < self.levels {
                n += c[l + 1] * c[l]; // top-down
            }
        }
        n
    }
}

/// Per-scale grids, finest first. Scale `l` is `[H/2^(l-1), W/2^(l-1), C_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn level(&self, l: usize) -> &Tensor<T> {
        &self.levels[l - 1]
    }
}

fn name(l: usize, part: &str) -> String {
    format!("pyramid.l{}.{}", l, part)
}

/// Fan-in uniform weights, zero biases. Deterministic per seed.
pub fn init_weights<T: Scalar>(config: &PyramidConfig, seed: u64, params: &mut Params<T>) -> Result<()> {
    config.validate()?;
    if config.mode == FeatureMode::Handcrafted {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = &config.channels;
    for l in 1..=config.levels {
        let cl = c[l - 1];
        let cin = if l == 1 { 3 } else { c[l - 2] };
        params.insert(name(l, "conv1.w"), fan_in_uniform(&[3, 3, cin, cl], 9 * cin, &mut rng))?;
        params.insert(name(l, "conv1.b"), Tensor::zeros(&[cl]))?;
        params.insert(name(l, "conv2.w"), fan_in_uniform(&[3, 3, cl, cl], 9 * cl, &mut rng))?;
        params.insert(name(l, "conv2.b"), Tensor::zeros(&[cl]))?;
        params.insert(name(l, "lateral.w"), fan_in_uniform(&[cl, cl], cl, &mut rng))?;
        params.insert(name(l, "lateral.b"), Tensor::zeros(&[cl]))?;
        if l < config.levels {
            let cup = c[l];
            params.insert(name(l, "topdown.w"), fan_in_uniform(&[cup, cl], cup, &mut rng))?;
        }
    }
    Ok(())
}

pub(crate) fn check_image_dims(config: &PyramidConfig, h: usize, w: usize) -> Result<()> {
    let s = config.stride();
    if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Argument(format!(
            "image {}x{} is not a multiple of {} in both sides",
            h, w, s
        )));
    }
    Ok(())
}

/// `[H, W, 3]` tensor of the image, centred on zero.
pub fn image_tensor<T: Scalar>(image: &Image) -> Tensor<T> {
    let data = image.data().iter().map(|v| T::from_f64(*v as f64 - 0.5)).collect();
    Tensor::new(vec![image.height(), image.width(), 3], data).expect("image shape")
}

/// Learnable pyramid on a graph. `image` is `[H, W, 3]`; returns one
/// `[H_l, W_l, C_l]` node per scale, finest first.
pub fn extract_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &Bound,
    config: &PyramidConfig,
    image: Var,
) -> Result<Vec<Var>> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Dimension(format!("expected [H, W, 3] image, got {:?}", s)));
    }
    check_image_dims(config, s[0], s[1])?;
    if config.mode == FeatureMode::Handcrafted {
        let img = image_from_tensor(g.value(image));
        let pyr: FeaturePyramid<T> = handcrafted(&img, config.levels);
        return Ok(pyr.levels.into_iter().map(|t| g.constant(t)).collect());
    }
    let mut enc = Vec::with_capacity(config.levels);
    let mut x = image;
    for l in 1..=config.levels {
        let stride = if l == 1 { 1 } else { 2 };
        let y = g.conv2d(x, params.get(&name(l, "conv1.w"))?, Some(params.get(&name(l, "conv1.b"))?), stride)?;
        let y = g.relu(y);
        let y = g.conv2d(y, params.get(&name(l, "conv2.w"))?, Some(params.get(&name(l, "conv2.b"))?), 1)?;
        x = g.relu(y);
        enc.push(x);
    }
    let mut out = vec![None; config.levels];
    let mut above: Option<Var> = None;
    for l in (1..=config.levels).rev() {
        let lat = g.linear(enc[l - 1], params.get(&name(l, "lateral.w"))?, Some(params.get(&name(l, "lateral.b"))?))?;
        let f = match above {
            None => lat,
            Some(up) => {
                let td = g.linear(up, params.get(&name(l, "topdown.w"))?, None)?;
                let td = g.upsample2x(td)?;
                g.add(lat, td)?
            }
        };
        out[l - 1] = Some(f);
        above = Some(f);
    }
    Ok(out.into_iter().map(|v| v.expect("every scale filled")).collect())
}

fn image_from_tensor<T: Scalar>(t: &Tensor<T>) -> Image {
    let s = t.shape();
    let data = t.data().iter().map(|v| (v.as_f64() + 0.5) as f32).collect();
    Image::new(s[0], s[1], data).expect("image shape")
}

/// Extracts a pyramid outside any training graph.
pub fn extract<T: Scalar>(image: &Image, config: &PyramidConfig, weights: Option<&Params<T>>) -> Result<FeaturePyramid<T>> {
    config.validate()?;
    check_image_dims(config, image.height(), image.width())?;
    match config.mode {
        FeatureMode::Handcrafted => Ok(handcrafted(image, config.levels)),
        FeatureMode::Learnable => {
            let weights = weights.ok_or_else(|| Error::Argument("learnable pyramid needs weights".into()))?;
            let mut g = Graph::new();
            let bound = weights.bind(&mut g, false);
            let x = g.constant(image_tensor(image));
            let vars = extract_graph(&mut g, &bound, config, x)?;
            Ok(FeaturePyramid {
                levels: vars.into_iter().map(|v| g.value(v).clone()).collect(),
            })
        }
    }
}

/// Average-pooled centred colour and soft-binned gradient orientations,
/// L2-normalized per location.
pub fn handcrafted<T: Scalar>(image: &Image, levels: usize) -> FeaturePyramid<T> {
    let (h, w) = (image.height(), image.width());
    let lum = |x: usize, y: usize| -> f64 {
        let p = image.pixel(x, y);
        (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0
    };
    // Full-resolution raw channels (before normalization).
    let mut base = vec![0.0f64; h * w * (HANDCRAFTED_CHANNELS - 1)];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * (HANDCRAFTED_CHANNELS - 1);
            let p = image.pixel(x, y);
            for c in 0..3 {
                base[o + c] = p[c] as f64 - 0.5;
            }
            let gx = lum((x + 1).min(w - 1), y) - lum(x.saturating_sub(1), y);
            let gy = lum(x, (y + 1).min(h - 1)) - lum(x, y.saturating_sub(1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag > 0.0 {
                let bins = ORIENTATION_BINS as f64;
                let theta = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
                let pos = theta / std::f64::consts::TAU * bins;
                let b0 = pos.floor() as usize % ORIENTATION_BINS;
                let frac = pos - pos.floor();
                base[o + 3 + b0] += GRADIENT_GAIN * mag * (1.0 - frac);
                base[o + 3 + (b0 + 1) % ORIENTATION_BINS] += GRADIENT_GAIN * mag * frac;
            }
        }
    }
    let raw = HANDCRAFTED_CHANNELS - 1;
    let mut out = Vec::with_capacity(levels);
    for l in 1..=levels {
        let f = 1usize << (l - 1);
        let (hl, wl) = (h / f, w / f);
        let mut data = vec![T::zero(); hl * wl * HANDCRAFTED_CHANNELS];
        let inv = 1.0 / (f * f) as f64;
        let mut acc = vec![0.0f64; HANDCRAFTED_CHANNELS];
        for cy in 0..hl {
            for cx in 0..wl {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for y in cy * f..(cy + 1) * f {
                    for x in cx * f..(cx + 1) * f {
                        let o = (y * w + x) * raw;
                        for c in 0..raw {
                            acc[c] += base[o + c];
                        }
                    }
                }
                acc[..raw].iter_mut().for_each(|a| *a *= inv);
                acc[raw] = BIAS_CHANNEL;
                let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
                let o = (cy * wl + cx) * HANDCRAFTED_CHANNELS;
                for c in 0..HANDCRAFTED_CHANNELS {
                    data[o + c] = T::from_f64(acc[c] / norm);
                }
            }
        }
        out.push(Tensor::new(vec![hl, wl, HANDCRAFTED_CHANNELS], data).expect("shape"));
    }
    FeaturePyramid { levels: out }
}
