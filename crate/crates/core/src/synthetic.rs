//! Synthetic video pair used by the toy experiments: two differently shaped,
//! differently textured ellipses translating along distinct periodic paths
//! on a black background.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::keypoints::pixel_center;
use crate::media_io::{Domain, Frame, MaskSource, SilhouetteMask, VideoPairDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    /// Semi-axes `(u, v)` in normalized units.
    pub radii: [f64; 2],
    /// Path amplitude `(u, v)` in normalized units.
    pub amplitude: [f64; 2],
    /// Path frequency multipliers `(u, v)` over one period of the video.
    pub frequency: [f64; 2],
    /// Path phase offsets `(u, v)` in radians.
    pub phase: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyPairConfig {
    pub size: usize,
    pub frames: usize,
    pub a: EllipseSpec,
    pub b: EllipseSpec,
}

impl Default for ToyPairConfig {
    fn default() -> Self {
        Self {
            size: 64,
            frames: 60,
            // A is B under diag(1.1, 0.9) in both shape and path locus, so a
            // single learned affine can align the two keypoint distributions.
            a: EllipseSpec {
                radii: [0.198, 0.234],
                amplitude: [0.33, 0.27],
                frequency: [1.0, 1.0],
                phase: [0.0, PI / 2.0],
            },
            b: EllipseSpec {
                radii: [0.18, 0.26],
                amplitude: [0.3, 0.3],
                frequency: [1.0, 1.0],
                phase: [PI / 2.0, 0.0],
            },
        }
    }
}

impl EllipseSpec {
    pub fn center(&self, t: usize, period: usize) -> [f64; 2] {
        let phase = 2.0 * PI * t as f64 / period as f64;
        [
            self.amplitude[0] * (self.frequency[0] * phase + self.phase[0]).sin(),
            self.amplitude[1] * (self.frequency[1] * phase + self.phase[1]).sin(),
        ]
    }

    /// Ellipse coordinates of `(u, v)` relative to the center at time `t`;
    /// the point is inside when `x² + y² <= 1`.
    fn local(&self, u: f64, v: f64, center: [f64; 2]) -> (f64, f64) {
        ((u - center[0]) / self.radii[0], (v - center[1]) / self.radii[1])
    }
}

fn texture(domain: Domain, x: f64, y: f64) -> [f32; 3] {
    match domain {
        // Warm body shading left to right.
        Domain::A => [0.9, (0.45 + 0.35 * x) as f32, 0.15],
        // Cool body with a band across the middle.
        Domain::B => {
            let band = if y.abs() < 0.3 { 0.35 } else { 0.0 };
            [0.15, (0.45 + band) as f32, 0.85]
        }
    }
}

fn render(spec: &EllipseSpec, domain: Domain, t: usize, cfg: &ToyPairConfig) -> (Frame, SilhouetteMask) {
    let n = cfg.size;
    let center = spec.center(t, cfg.frames);
    let mut pixels = Array3::<f32>::zeros((n, n, 3));
    let mut mask = Array2::<f32>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let (x, y) = spec.local(pixel_center(j, n), pixel_center(i, n), center);
            if x * x + y * y <= 1.0 {
                let c = texture(domain, x, y);
                for ch in 0..3 {
                    pixels[[i, j, ch]] = c[ch];
                }
                mask[[i, j]] = 1.0;
            }
        }
    }
    (
        Frame {
            pixels,
            index: t,
            video: domain,
        },
        SilhouetteMask::new(mask, MaskSource::GroundTruth),
    )
}

/// Renders the pair. Masks are exact pixel-center rasterizations.
pub fn toy_pair(cfg: &ToyPairConfig) -> Result<VideoPairDataset> {
    let mut out = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    for (slot, (spec, domain)) in out.iter_mut().zip([(&cfg.a, Domain::A), (&cfg.b, Domain::B)]) {
        for t in 0..cfg.frames {
            let (f, m) = render(spec, domain, t, cfg);
            slot.0.push(f);
            slot.1.push(m);
        }
    }
    let [(fa, ma), (fb, mb)] = out;
    VideoPairDataset::new(fa, ma, fb, mb)
}
