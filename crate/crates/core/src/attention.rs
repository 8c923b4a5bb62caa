//! Dense and beam attention modules. Each module runs self-, cross-, self-
//! and cross-attention layers, then a convolutional feedforward block, on
//! both images at once. Sparse layers restrict every query to a key list.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beam::{hypotheses_from_probs, regions_from, SearchRegions};
use crate::corrmap::{logit_scale, normalize_scores, scores_into, GridDims};
use crate::error::{Error, Result};
use crate::features::PyramidConfig;
use crate::numeric::{Graph, IndexPlan, Scalar, Tensor, Var};
use crate::params::{fan_in_uniform, Bound, Params};

/// Output projections start at this fraction of the fan-in bound, so fresh
/// modules stay close to the identity.
const OUT_INIT_GAIN: f64 = 0.1;

const LAYERS: [LayerKind; 4] = [LayerKind::SelfAttn, LayerKind::Cross, LayerKind::SelfAttn, LayerKind::Cross];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerKind {
    SelfAttn,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Heads per scale, `l = 1..=L`. Head size is `C_l / heads`.
    pub heads: Vec<usize>,
    /// Dense modules at the coarsest scale.
    pub dense_modules: usize,
    /// Beam modules for `l = L-1` down to `1`.
    pub beam_modules: Vec<usize>,
    /// Feedforward convolution kernel size.
    pub ffn_kernel: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: vec![2, 4, 4, 4, 8],
            dense_modules: 4,
            beam_modules: vec![2, 2, 1, 1],
            ffn_kernel: 3,
        }
    }
}

impl AttentionConfig {
    /// No modules at any scale: maps come straight from the pyramid.
    pub fn disabled(levels: usize) -> Self {
        AttentionConfig {
            heads: vec![1; levels],
            dense_modules: 0,
            beam_modules: vec![0; levels - 1],
            ffn_kernel: 3,
        }
    }

    /// Number of modules run at scale `l`.
    pub fn modules_at(&self, l: usize) -> usize {
        let levels = self.heads.len();
        if l == levels {
            self.dense_modules
        } else {
            self.beam_modules[levels - 1 - l]
        }
    }

    pub fn validate(&self, pyramid: &PyramidConfig) -> Result<()> {
        let levels = pyramid.levels;
        if self.heads.len() != levels || self.beam_modules.len() + 1 != levels {
            return Err(Error::Config(format!(
                "attention config lists {} head counts and {} beam module counts for {} scales",
                self.heads.len(),
                self.beam_modules.len(),
                levels
            )));
        }
        if self.ffn_kernel % 2 == 0 {
            return Err(Error::Config("feedforward kernel must be odd".into()));
        }
        for l in 1..=levels {
            let (c, h) = (pyramid.channels_at(l), self.heads[l - 1]);
            if self.modules_at(l) > 0 && (h == 0 || c % h != 0) {
                return Err(Error::Config(format!(
                    "{} heads do not divide {} channels at scale {}",
                    h, c, l
                )));
            }
        }
        Ok(())
    }
}

fn module_prefix(l: usize, m: usize) -> String {
    format!("attention.l{}.m{}", l, m)
}

/// Weights of every module in `config`, deterministic per seed.
pub fn init_weights<T: Scalar>(
    config: &AttentionConfig,
    pyramid: &PyramidConfig,
    seed: u64,
    params: &mut Params<T>,
) -> Result<()> {
    config.validate(pyramid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.ffn_kernel;
    for l in (1..=pyramid.levels).rev() {
        let c = pyramid.channels_at(l);
        for m in 0..config.modules_at(l) {
            let p = module_prefix(l, m);
            for j in 0..LAYERS.len() {
                params.insert(format!("{}.a{}.ln.g", p, j), Tensor::filled(&[c], T::one()))?;
                params.insert(format!("{}.a{}.ln.b", p, j), Tensor::zeros(&[c]))?;
                for w in ["wq", "wk", "wv"] {
                    params.insert(format!("{}.a{}.{}", p, j, w), fan_in_uniform(&[c, c], c, &mut rng))?;
                }
                let mut wo: Tensor<T> = fan_in_uniform(&[c, c], c, &mut rng);
                wo.data_mut().iter_mut().for_each(|v| *v *= T::from_f64(OUT_INIT_GAIN));
                params.insert(format!("{}.a{}.wo", p, j), wo)?;
                params.insert(format!("{}.a{}.bo", p, j), Tensor::zeros(&[c]))?;
            }
            params.insert(format!("{}.ffn.ln.g", p), Tensor::filled(&[c], T::one()))?;
            params.insert(format!("{}.ffn.ln.b", p), Tensor::zeros(&[c]))?;
            params.insert(format!("{}.ffn.w1", p), fan_in_uniform(&[k, k, c, c], k * k * c, &mut rng))?;
            params.insert(format!("{}.ffn.b1", p), Tensor::zeros(&[c]))?;
            let mut w2: Tensor<T> = fan_in_uniform(&[k, k, c, c], k * k * c, &mut rng);
            w2.data_mut().iter_mut().for_each(|v| *v *= T::from_f64(OUT_INIT_GAIN));
            params.insert(format!("{}.ffn.w2", p), w2)?;
            params.insert(format!("{}.ffn.b2", p), Tensor::zeros(&[c]))?;
        }
    }
    Ok(())
}

/// Zeroes every residual-branch output (attention output projections and
/// the second feedforward conv), turning all modules into identities.
pub fn zero_output_projections<T: Scalar>(params: &mut Params<T>) {
    let names: Vec<String> = params
        .names()
        .iter()
        .filter(|n| {
            n.starts_with("attention.")
                && (n.ends_with(".wo") || n.ends_with(".bo") || n.ends_with(".ffn.w2") || n.ends_with(".ffn.b2"))
        })
        .cloned()
        .collect();
    for n in names {
        if let Some(t) = params.get_mut(&n) {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Fixed 2D sinusoidal encoding `[H, W, C]`: the first half of the
/// channels encodes x, the second half y, as sin/cos pairs over
/// geometrically spaced wavelengths. Odd leftovers stay zero.
pub fn positional_encoding<T: Scalar>(grid: GridDims, channels: usize) -> Tensor<T> {
    let pairs = channels / 4;
    let mut t = Tensor::zeros(&[grid.height, grid.width, channels]);
    if pairs == 0 {
        return t;
    }
    let data = t.data_mut();
    for y in 0..grid.height {
        for x in 0..grid.width {
            let o = (y * grid.width + x) * channels;
            for k in 0..pairs {
                let freq = 1.0 / 100f64.powf(k as f64 / pairs as f64);
                let (ax, ay) = (x as f64 * freq, y as f64 * freq);
                data[o + 2 * k] = T::from_f64(ax.sin());
                data[o + 2 * k + 1] = T::from_f64(ax.cos());
                data[o + 2 * pairs + 2 * k] = T::from_f64(ay.sin());
                data[o + 2 * pairs + 2 * k + 1] = T::from_f64(ay.cos());
            }
        }
    }
    t
}

/// Key lists for the four attention layers of a module. `None` attends
/// densely.
#[derive(Clone, Debug, Default)]
pub struct ModulePlans {
    /// Source queries over target keys.
    pub cross_s: Option<Arc<IndexPlan>>,
    /// Target queries over source keys.
    pub cross_t: Option<Arc<IndexPlan>>,
    pub self_s: Option<Arc<IndexPlan>>,
    pub self_t: Option<Arc<IndexPlan>>,
}

/// Pre-norm residual attention: `x + Wo · attn(LN(x) Wq, LN(ctx) Wk, LN(ctx) Wv)`.
fn attention_layer<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    ctx: Option<Var>,
    heads: usize,
    plan: Option<Arc<IndexPlan>>,
) -> Result<Var> {
    let (gamma, beta) = (p.get(&format!("{}.ln.g", prefix))?, p.get(&format!("{}.ln.b", prefix))?);
    let xn = g.layer_norm(x, gamma, beta)?;
    let cn = match ctx {
        Some(c) => g.layer_norm(c, gamma, beta)?,
        None => xn,
    };
    let q = g.linear(xn, p.get(&format!("{}.wq", prefix))?, None)?;
    let k = g.linear(cn, p.get(&format!("{}.wk", prefix))?, None)?;
    let v = g.linear(cn, p.get(&format!("{}.wv", prefix))?, None)?;
    let a = g.attention(q, k, v, heads, plan)?;
    let o = g.linear(a, p.get(&format!("{}.wo", prefix))?, Some(p.get(&format!("{}.bo", prefix))?))?;
    g.add(x, o)
}

/// `x + conv(relu(conv(LN(x))))` on an `[H, W, C]` grid.
fn feedforward<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let xn = g.layer_norm(x, p.get(&format!("{}.ln.g", prefix))?, p.get(&format!("{}.ln.b", prefix))?)?;
    let h = g.conv2d(xn, p.get(&format!("{}.w1", prefix))?, Some(p.get(&format!("{}.b1", prefix))?), 1)?;
    let h = g.relu(h);
    let o = g.conv2d(h, p.get(&format!("{}.w2", prefix))?, Some(p.get(&format!("{}.b2", prefix))?), 1)?;
    g.add(x, o)
}

fn grid_of<T: Scalar>(g: &Graph<T>, v: Var) -> Result<(usize, usize, usize)> {
    match g.shape(v) {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::Dimension(format!("expected [H, W, C] features, got {:?}", s))),
    }
}

/// One module on source and target grids `[H, W, C]`. Both images are
/// updated from the same pre-layer state at every layer.
pub fn beam_module<T: Scalar>(
    g: &mut Graph<T>,
    params: &Bound,
    prefix: &str,
    fs: Var,
    ft: Var,
    heads: usize,
    plans: &ModulePlans,
) -> Result<(Var, Var)> {
    let (hs, ws, c) = grid_of(g, fs)?;
    let (ht, wt, ct) = grid_of(g, ft)?;
    if c != ct {
        return Err(Error::Dimension(format!("source has {} channels, target {}", c, ct)));
    }
    let mut s = g.reshape(fs, &[hs * ws, c])?;
    let mut t = g.reshape(ft, &[ht * wt, c])?;
    for (j, kind) in LAYERS.iter().enumerate() {
        let lp = format!("{}.a{}", prefix, j);
        let (ns, nt) = match kind {
            LayerKind::SelfAttn => (
                attention_layer(g, params, &lp, s, None, heads, plans.self_s.clone())?,
                attention_layer(g, params, &lp, t, None, heads, plans.self_t.clone())?,
            ),
            LayerKind::Cross => (
                attention_layer(g, params, &lp, s, Some(t), heads, plans.cross_s.clone())?,
                attention_layer(g, params, &lp, t, Some(s), heads, plans.cross_t.clone())?,
            ),
        };
        s = ns;
        t = nt;
    }
    let s = g.reshape(s, &[hs, ws, c])?;
    let t = g.reshape(t, &[ht, wt, c])?;
    let fp = format!("{}.ffn", prefix);
    Ok((feedforward(g, params, &fp, s)?, feedforward(g, params, &fp, t)?))
}

/// [`beam_module`] with every layer dense.
pub fn dense_module<T: Scalar>(
    g: &mut Graph<T>,
    params: &Bound,
    prefix: &str,
    fs: Var,
    ft: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    beam_module(g, params, prefix, fs, ft, heads, &ModulePlans::default())
}

/// Runs the configured modules of scale `l`.
pub(crate) fn run_scale<T: Scalar>(
    g: &mut Graph<T>,
    params: &Bound,
    config: &AttentionConfig,
    l: usize,
    mut fs: Var,
    mut ft: Var,
    plans: &ModulePlans,
) -> Result<(Var, Var)> {
    let heads = config.heads[l - 1];
    for m in 0..config.modules_at(l) {
        (fs, ft) = beam_module(g, params, &module_prefix(l, m), fs, ft, heads, plans)?;
    }
    Ok((fs, ft))
}

/// Intra-image search regions at scale `l - 1`, from self-similarity maps
/// of `features` (scale `l`) over `coarse` key lists (every location when
/// `None`): keep the `k` most similar locations, expand their children.
pub fn self_plan<T: Scalar>(
    features: &Tensor<T>,
    coarse: Option<&IndexPlan>,
    l: usize,
    k: usize,
) -> Result<SearchRegions> {
    let grid = GridDims::of(features)?;
    let c = features.last_dim();
    let width = coarse.map_or(grid.len(), IndexPlan::width);
    if let Some(p) = coarse {
        if p.rows() != grid.len() {
            return Err(Error::Dimension(format!("self plan has {} rows for {} locations", p.rows(), grid.len())));
        }
        p.check_bounds(grid.len())?;
    }
    let scale = T::from_f64(logit_scale(c, 1.0));
    let mut probs = Vec::with_capacity(grid.len() * width);
    let mut row = Vec::with_capacity(width);
    for i in 0..grid.len() {
        scores_into(features.row(i), features.data(), coarse.map(|p| p.row(i)), &mut row);
        normalize_scores(&mut row, scale);
        probs.extend_from_slice(&row);
    }
    let h = hypotheses_from_probs(&probs, coarse, grid, grid, l, k);
    Ok(regions_from(&h))
}
