//! Mirroring and color jitter of training windows.

use blinknet_tensor::RngStream;

use super::config::AugmentConfig;
use crate::datagen::SequenceSample;
use crate::semantics::FrameLabel;

/// A training window: `len` square HWC frames and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub size: usize,
    pub frames: Vec<u8>,
    pub labels: Vec<FrameLabel>,
}

impl Clip {
    pub fn from_sample(sample: &SequenceSample, start: usize, len: usize) -> Self {
        let n = sample.frame_bytes();
        Clip {
            size: sample.canvas(),
            frames: sample.frames[start * n..(start + len) * n].to_vec(),
            labels: sample.labels[start..start + len].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Flips every frame left to right and mirrors the labels to match.
pub fn mirror(clip: &Clip) -> Clip {
    let s = clip.size;
    let mut frames = clip.frames.clone();
    for row in frames.chunks_exact_mut(s * 3) {
        for x in 0..s / 2 {
            let (a, b) = (x * 3, (s - 1 - x) * 3);
            for c in 0..3 {
                row.swap(a + c, b + c);
            }
        }
    }
    Clip {
        size: s,
        frames,
        labels: clip.labels.iter().map(|l| l.mirrored()).collect(),
    }
}

/// Color transform applied to each pixel: hue rotation about the gray axis,
/// then contrast about mid-gray, then brightness scaling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    /// Rotation in turns.
    pub hue: f64,
}

impl Jitter {
    pub fn identity() -> Self {
        Jitter {
            brightness: 1.0,
            contrast: 1.0,
            hue: 0.0,
        }
    }

    pub fn sample(config: &AugmentConfig, rng: &mut RngStream) -> Self {
        let mut draw = |r: f64| if r > 0.0 { rng.uniform_range(-r, r) } else { 0.0 };
        Jitter {
            brightness: 1.0 + draw(config.brightness),
            contrast: 1.0 + draw(config.contrast),
            hue: draw(config.hue),
        }
    }

    /// 3×3 RGB rotation by `hue` turns about the (1,1,1) axis.
    fn hue_matrix(&self) -> [[f64; 3]; 3] {
        let theta = self.hue * std::f64::consts::TAU;
        let (sin, cos) = theta.sin_cos();
        let third = (1.0 - cos) / 3.0;
        let s = (1.0f64 / 3.0).sqrt() * sin;
        [
            [cos + third, third - s, third + s],
            [third + s, cos + third, third - s],
            [third - s, third + s, cos + third],
        ]
    }

    pub fn apply(&self, frames: &mut [u8]) {
        let m = self.hue_matrix();
        for px in frames.chunks_exact_mut(3) {
            let rgb = [px[0] as f64, px[1] as f64, px[2] as f64];
            for (c, out) in px.iter_mut().enumerate() {
                let rotated = m[c][0] * rgb[0] + m[c][1] * rgb[1] + m[c][2] * rgb[2];
                let v = ((rotated - 127.5) * self.contrast + 127.5) * self.brightness;
                *out = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}

/// Mirrors with probability `config.mirror`, then applies one jitter draw to
/// every frame. With mirroring and all jitter ranges at zero, returns the
/// clip unchanged.
pub fn augment(clip: &Clip, config: &AugmentConfig, rng: &mut RngStream) -> Clip {
    let mut out = if config.mirror > 0.0 && rng.bernoulli(config.mirror) {
        mirror(clip)
    } else {
        clip.clone()
    };
    if config.jitters() {
        Jitter::sample(config, rng).apply(&mut out.frames);
    }
    out
}
