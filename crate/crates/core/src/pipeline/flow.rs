//! Binary dense-flow files: `BMFL`, version, height, width (`u32` LE), then
//! `f32` LE planes of x, y and confidence, each row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::write_file;

const MAGIC: &[u8; 4] = b"BMFL";
const VERSION: u32 = 1;
const HEADER: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseFlow {
    pub height: usize,
    pub width: usize,
    /// Target `(x, y)` per source pixel.
    pub coords: Vec<[f32; 2]>,
    pub confidence: Vec<f32>,
}

impl DenseFlow {
    pub fn at(&self, x: usize, y: usize) -> [f32; 2] {
        self.coords[y * self.width + x]
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(HEADER + 12 * n);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.height as u32, self.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for plane in 0..3 {
            for i in 0..n {
                let v = match plane {
                    0 => self.coords[i][0],
                    1 => self.coords[i][1],
                    _ => self.confidence[i],
                };
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<DenseFlow> {
        let bad = |why: String| Error::format(path, why);
        if bytes.len() < HEADER || &bytes[..4] != MAGIC {
            return Err(bad("not a flow file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        if word(1) != VERSION {
            return Err(bad(format!("flow version {} (expected {})", word(1), VERSION)));
        }
        let (height, width) = (word(2) as usize, word(3) as usize);
        let n = height * width;
        if bytes.len() != HEADER + 12 * n {
            return Err(bad(format!("{} bytes for a {}x{} flow", bytes.len(), height, width)));
        }
        let f = |k: usize| f32::from_le_bytes(bytes[HEADER + 4 * k..HEADER + 4 * k + 4].try_into().expect("4 bytes"));
        Ok(DenseFlow {
            height,
            width,
            coords: (0..n).map(|i| [f(i), f(n + i)]).collect(),
            confidence: (0..n).map(|i| f(2 * n + i)).collect(),
        })
    }

    pub fn summary(&self) -> FlowSummary {
        let n = self.coords.len().max(1) as f64;
        let mut disp = 0.0;
        for (i, c) in self.coords.iter().enumerate() {
            let (x, y) = ((i % self.width) as f64, (i / self.width) as f64);
            disp += ((c[0] as f64 - x).powi(2) + (c[1] as f64 - y).powi(2)).sqrt();
        }
        FlowSummary {
            height: self.height,
            width: self.width,
            mean_displacement: disp / n,
            mean_confidence: self.confidence.iter().map(|&c| c as f64).sum::<f64>() / n,
        }
    }
}

/// Small JSON companion of a flow file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub height: usize,
    pub width: usize,
    pub mean_displacement: f64,
    pub mean_confidence: f64,
}

pub fn write_flow(path: &Path, flow: &DenseFlow) -> Result<()> {
    write_file(path, &flow.encode())
}

pub fn read_flow(path: &Path) -> Result<DenseFlow> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DenseFlow::decode(&bytes, path)
}
