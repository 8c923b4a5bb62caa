//! Synthetic image pairs with exact dense ground truth.
//!
//! A scene is one or two textured planes seen in a source and a target
//! view. The source view is the reference frame: each layer's texture is
//! anchored there, and a per-layer homography carries source coordinates
//! into the target. With two layers the foreground occludes the background
//! in both views, which creates depth-discontinuity-like patches whose
//! correspondents fall into two separated clusters.

mod homography;
mod manifest;
mod texture;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use homography::Homography;
pub use manifest::{
    load_dataset, read_manifest, write_dataset, Manifest, ManifestEntry, MANIFEST_SCHEMA_VERSION,
};
pub use texture::{Texture, TextureMode};

use crate::error::{Error, Result};
use crate::image::Image;

/// Image sides must be multiples of this so every scale halves exactly.
pub const DIM_MULTIPLE: usize = 16;

/// Half-open axis-aligned rectangle `[x0, x1) x [y0, y1)` in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] < self.x1 && p[1] >= self.y0 && p[1] < self.y1
    }
}

/// Foreground plane: its support in the source view and its own motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForegroundLayer {
    pub homography: Homography,
    pub region: Rect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub texture: TextureMode,
    /// Source-to-target map of the background plane.
    pub background: Homography,
    /// Second layer; `None` gives a planar scene.
    pub foreground: Option<ForegroundLayer>,
    pub seed: u64,
}

impl SceneConfig {
    pub fn planar(height: usize, width: usize, homography: Homography, seed: u64) -> Self {
        SceneConfig {
            height,
            width,
            texture: TextureMode::Octave,
            background: homography,
            foreground: None,
            seed,
        }
    }

    pub fn layer_count(&self) -> usize {
        1 + self.foreground.is_some() as usize
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.height, self.width)?;
        self.background.inverse()?;
        if let Some(fg) = &self.foreground {
            fg.homography.inverse()?;
            let r = fg.region;
            if !(r.x1 > r.x0 && r.y1 > r.y0) {
                return Err(Error::Config("empty foreground region".into()));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % DIM_MULTIPLE != 0 || width % DIM_MULTIPLE != 0 {
        return Err(Error::Config(format!(
            "image dims {}x{} must be positive multiples of {}",
            height, width, DIM_MULTIPLE
        )));
    }
    Ok(())
}

/// Dense per-pixel correspondence field from one image into another.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    /// Continuous `(x, y)` in the other image, one per pixel, row-major.
    pub coords: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn at(&self, x: usize, y: usize) -> Option<[f64; 2]> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.coords[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// A rendered pair plus analytic ground truth in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub config: SceneConfig,
    pub source: Image,
    pub target: Image,
    /// Source pixel -> target coordinate.
    pub gt_flow: FlowField,
    /// Target pixel -> source coordinate.
    pub gt_flow_reverse: FlowField,
    /// Layer index (0 background, 1 foreground) of every source pixel.
    pub source_layer: Vec<u8>,
}

/// Integer correspondence at some scale; points are `(x, y)` grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Correspondence {
    pub src: [u32; 2],
    pub tgt: [u32; 2],
}

/// How fine coordinates are carried to a coarser grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    /// Nearest integer, halves away from zero.
    #[default]
    Round,
    /// The coarse cell containing the fine cell (quadtree parent).
    Floor,
}

impl Downsample {
    /// Coarse coordinate of `v` on a grid `factor` times smaller with
    /// `extent` cells, clamped into the grid.
    pub fn apply(self, v: f64, factor: f64, extent: usize) -> u32 {
        let c = match self {
            Downsample::Round => (v / factor).round(),
            Downsample::Floor => (v / factor).floor(),
        };
        c.clamp(0.0, (extent - 1) as f64) as u32
    }
}

struct Layers {
    bg: Texture,
    fg: Option<(Texture, ForegroundLayer, Homography)>,
    bg_inv: Homography,
}

impl Layers {
    fn new(cfg: &SceneConfig) -> Result<Self> {
        let bg = Texture::new(cfg.texture, cfg.seed.wrapping_mul(2).wrapping_add(1));
        let fg = match cfg.foreground {
            Some(layer) => Some((
                Texture::new(cfg.texture, cfg.seed.wrapping_mul(2).wrapping_add(2)),
                layer,
                layer.homography.inverse()?,
            )),
            None => None,
        };
        Ok(Layers {
            bg,
            fg,
            bg_inv: cfg.background.inverse()?,
        })
    }

    /// Source point of the foreground seen at target point `q`, if any.
    fn fg_at_target(&self, q: [f64; 2]) -> Option<[f64; 2]> {
        let (_, layer, inv) = self.fg.as_ref()?;
        let p = inv.apply(q)?;
        layer.region.contains(p).then_some(p)
    }

    fn in_fg_source(&self, p: [f64; 2]) -> bool {
        self.fg.as_ref().is_some_and(|(_, l, _)| l.region.contains(p))
    }
}

/// Snaps to the 8-bit grid so images survive a PPM round trip bit-exactly.
fn quantize(c: [f64; 3]) -> [f32; 3] {
    c.map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8) as f32 / 255.0)
}

fn in_bounds(p: [f64; 2], width: usize, height: usize) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (width - 1) as f64 && p[1] <= (height - 1) as f64
}

/// Renders a pair and its ground truth.
pub fn generate(cfg: &SceneConfig) -> Result<ScenePair> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let layers = Layers::new(cfg)?;
    let n = h * w;

    let mut source = Image::filled(h, w, [0.0; 3]);
    let mut target = Image::filled(h, w, [0.0; 3]);
    let mut flow = FlowField {
        height: h,
        width: w,
        coords: vec![[0.0; 2]; n],
        valid: vec![false; n],
    };
    let mut reverse = flow.clone();
    let mut source_layer = vec![0u8; n];

    for y in 0..h {
        for x in 0..w {
            let p = [x as f64, y as f64];
            let i = y * w + x;
            let on_fg = layers.in_fg_source(p);
            let color = match (&layers.fg, on_fg) {
                (Some((tex, _, _)), true) => tex.sample(p),
                _ => layers.bg.sample(p),
            };
            source.set_pixel(x, y, quantize(color));
            source_layer[i] = on_fg as u8;

            let mapped = if on_fg {
                cfg.foreground.and_then(|f| f.homography.apply(p))
            } else {
                cfg.background.apply(p)
            };
            if let Some(q) = mapped {
                flow.coords[i] = q;
                // A background point is hidden when the foreground covers
                // its target location.
                let occluded = !on_fg && layers.fg_at_target(q).is_some();
                flow.valid[i] = in_bounds(q, w, h) && !occluded;
            }
        }
    }

    for y in 0..h {
        for x in 0..w {
            let q = [x as f64, y as f64];
            let i = y * w + x;
            let (color, src) = match layers.fg_at_target(q) {
                Some(p) => (layers.fg.as_ref().unwrap().0.sample(p), Some((p, true))),
                None => match layers.bg_inv.apply(q) {
                    Some(p) => (layers.bg.sample(p), Some((p, false))),
                    None => ([0.0; 3], None),
                },
            };
            target.set_pixel(x, y, quantize(color));
            if let Some((p, is_fg)) = src {
                reverse.coords[i] = p;
                let hidden = !is_fg && layers.in_fg_source(p);
                reverse.valid[i] = in_bounds(p, w, h) && !hidden;
            }
        }
    }

    Ok(ScenePair {
        config: cfg.clone(),
        source,
        target,
        gt_flow: flow,
        gt_flow_reverse: reverse,
        source_layer,
    })
}

/// Ground-truth correspondences of `field` carried to scale `l`
/// (`l = 1` is full resolution, each further scale halves the grid).
pub fn gt_at_scale(field: &FlowField, target_dims: (usize, usize), l: usize, rule: Downsample) -> Result<Vec<Correspondence>> {
    if l == 0 {
        return Err(Error::Argument("scales start at 1".into()));
    }
    let factor = 1usize << (l - 1);
    let (th, tw) = target_dims;
    if field.height % factor != 0 || field.width % factor != 0 || th % factor != 0 || tw % factor != 0 {
        return Err(Error::Argument(format!("scale {} does not divide the image grid", l)));
    }
    let f = factor as f64;
    let (sh, sw) = (field.height / factor, field.width / factor);
    let (gh, gw) = (th / factor, tw / factor);
    let mut out = Vec::with_capacity(field.valid_count());
    for y in 0..field.height {
        for x in 0..field.width {
            let Some(q) = field.at(x, y) else { continue };
            // Full-resolution integer GT first, then down-sampled.
            let q1 = [q[0].round(), q[1].round()];
            out.push(Correspondence {
                src: [
                    rule.apply(x as f64, f, sw),
                    rule.apply(y as f64, f, sh),
                ],
                tgt: [rule.apply(q1[0], f, gw), rule.apply(q1[1], f, gh)],
            });
        }
    }
    Ok(out)
}

impl ScenePair {
    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// Source-to-target ground truth at scale `l`, down-sampled to the
    /// nearest integer cell.
    pub fn gt_at_scale(&self, l: usize) -> Result<Vec<Correspondence>> {
        gt_at_scale(&self.gt_flow, (self.height(), self.width()), l, Downsample::Round)
    }
}

/// Families of random scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Identity,
    Translation,
    /// Mild rotation, scale, translation and perspective.
    Planar,
    /// Foreground plane moving relative to the background.
    TwoLayer,
    /// Scale-dominant homography (strong zoom-in).
    Zoom,
}

/// Draws random [`SceneConfig`]s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSampler {
    pub height: usize,
    pub width: usize,
    pub texture: TextureMode,
    pub kinds: Vec<SceneKind>,
    /// Zoom factor range for [`SceneKind::Zoom`].
    pub zoom_range: (f64, f64),
    /// Range of the foreground's extra horizontal shift, in pixels.
    pub layer_shift: (f64, f64),
}

impl SceneSampler {
    pub fn new(height: usize, width: usize, kinds: Vec<SceneKind>) -> Self {
        SceneSampler {
            height,
            width,
            texture: TextureMode::Octave,
            kinds,
            zoom_range: (1.5, 3.0),
            layer_shift: (0.3 * width as f64, 0.55 * width as f64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.height, self.width)?;
        if self.kinds.is_empty() {
            return Err(Error::Config("scene sampler needs at least one scene kind".into()));
        }
        let (z0, z1) = self.zoom_range;
        if !(z0 > 0.0 && z1 >= z0) {
            return Err(Error::Config(format!("zoom range ({}, {}) must be positive and ordered", z0, z1)));
        }
        let (s0, s1) = self.layer_shift;
        if !(s0 >= 0.0 && s1 >= s0) {
            return Err(Error::Config("layer shift range must be non-negative and ordered".into()));
        }
        Ok(())
    }

    pub fn sample(&self, seed: u64) -> Result<SceneConfig> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = self.kinds[rng.gen_range(0..self.kinds.len())];
        let (h, w) = (self.height as f64, self.width as f64);
        let center = [(w - 1.0) / 2.0, (h - 1.0) / 2.0];
        let mut jitter = |r: f64| rng.gen_range(-r..=r);
        let mut cfg = SceneConfig {
            height: self.height,
            width: self.width,
            texture: self.texture,
            background: Homography::identity(),
            foreground: None,
            seed,
        };
        match kind {
            SceneKind::Identity => {}
            SceneKind::Translation => {
                cfg.background = Homography::translation(jitter(w / 8.0), jitter(h / 8.0));
            }
            SceneKind::Planar => {
                cfg.background = Homography::similarity_with_perspective(
                    jitter(0.1),
                    1.0 + jitter(0.1),
                    center,
                    [jitter(w / 10.0), jitter(h / 10.0)],
                    [jitter(2e-4), jitter(2e-4)],
                );
            }
            SceneKind::TwoLayer => {
                let bg_shift = [jitter(w / 16.0), jitter(h / 16.0)];
                cfg.background = Homography::translation(bg_shift[0], bg_shift[1]);
                let fw = w * (0.25 + 0.15 * (jitter(1.0) + 1.0) / 2.0);
                let fh = h * (0.5 + 0.3 * (jitter(1.0) + 1.0) / 2.0);
                let x0 = (w - fw) / 2.0 + jitter(w / 8.0);
                let y0 = ((h - fh) / 2.0 + jitter(h / 8.0)).max(0.0);
                let region = Rect {
                    x0,
                    y0,
                    x1: x0 + fw,
                    y1: (y0 + fh).min(h),
                };
                let (s0, s1) = self.layer_shift;
                let mag = s0 + (s1 - s0) * (jitter(1.0) + 1.0) / 2.0;
                let dx = if jitter(1.0) < 0.0 { -mag } else { mag };
                cfg.foreground = Some(ForegroundLayer {
                    homography: Homography::translation(bg_shift[0] + dx, bg_shift[1] + jitter(h / 16.0)),
                    region,
                });
            }
            SceneKind::Zoom => {
                let (z0, z1) = self.zoom_range;
                let s = z0 + (z1 - z0) * (jitter(1.0) + 1.0) / 2.0;
                let c = [center[0] + jitter(w / 6.0), center[1] + jitter(h / 6.0)];
                cfg.background = Homography::zoom(s, c, [center[0] - c[0], center[1] - c[1]]);
            }
        }
        Ok(cfg)
    }
}

/// Independent per-pair seed stream derived from a dataset seed.
pub fn pair_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

/// `count` pairs drawn from `sampler`, pair `i` seeded by
/// [`pair_seed`]`(seed, i)`.
pub fn sample_pairs(sampler: &SceneSampler, seed: u64, count: usize) -> Result<Vec<ScenePair>> {
    (0..count)
        .map(|i| generate(&sampler.sample(pair_seed(seed, i))?))
        .collect()
}

#[cfg(test)]
mod tests;
