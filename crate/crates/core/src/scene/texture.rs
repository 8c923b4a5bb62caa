use serde::{Deserialize, Serialize};

/// Procedural texture family painted on each scene layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureMode {
    /// Bilinearly interpolated random lattice colours, one frequency.
    Noise,
    /// Sum of noise octaves with lattice spacings 16, 8, 4, 2.
    Octave,
    /// Two-colour checkerboard modulated by faint noise.
    Checker,
}

/// A texture is a pure function of continuous plane coordinates, so a
/// warped view can be rendered exactly without resampling a raster.
#[derive(Clone, Copy, Debug)]
pub struct Texture {
    mode: TextureMode,
    seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64, ch: u64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1f1f_1f1f) ^ splitmix(iy as u64 ^ (ch << 48))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl Texture {
    pub fn new(mode: TextureMode, seed: u64) -> Self {
        Texture { mode, seed }
    }

    fn noise(&self, p: [f64; 2], spacing: f64, salt: u64) -> [f64; 3] {
        let (u, v) = (p[0] / spacing, p[1] / spacing);
        let (x0, y0) = (u.floor(), v.floor());
        let (fx, fy) = (u - x0, v - y0);
        let (ix, iy) = (x0 as i64, y0 as i64);
        let seed = splitmix(self.seed ^ salt);
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let c = ch as u64;
            let a = lattice(seed, ix, iy, c);
            let b = lattice(seed, ix + 1, iy, c);
            let d = lattice(seed, ix, iy + 1, c);
            let e = lattice(seed, ix + 1, iy + 1, c);
            *o = (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (d * (1.0 - fx) + e * fx) * fy;
        }
        out
    }

    /// RGB colour in `[0, 1]` at plane point `p`.
    pub fn sample(&self, p: [f64; 2]) -> [f64; 3] {
        match self.mode {
            TextureMode::Noise => self.noise(p, 3.0, 1),
            TextureMode::Octave => {
                let mut acc = [0.0; 3];
                let mut norm = 0.0;
                for (i, (spacing, amp)) in [(16.0, 1.0), (8.0, 0.8), (4.0, 0.65), (2.0, 0.5)]
                    .into_iter()
                    .enumerate()
                {
                    let n = self.noise(p, spacing, 10 + i as u64);
                    for c in 0..3 {
                        acc[c] += amp * n[c];
                    }
                    norm += amp;
                }
                acc.map(|v| v / norm)
            }
            TextureMode::Checker => {
                let cell = 6.0;
                let parity = ((p[0] / cell).floor() as i64 + (p[1] / cell).floor() as i64) & 1;
                let base = if parity == 0 { 0.8 } else { 0.2 };
                let n = self.noise(p, 2.0, 3);
                n.map(|v| base * 0.75 + 0.25 * v)
            }
        }
    }
}
