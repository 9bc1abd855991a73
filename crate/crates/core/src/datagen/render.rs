//! Rasterization of scenes into labeled frames.

use serde::{Deserialize, Serialize};

use blinknet_tensor::RngStream;

use super::scene::{Rect, Rgb, SceneSpec};
use crate::error::{Error, Result};
use crate::semantics::{FrameLabel, IntentState, LightState};

/// 50% duty square wave: lit iff `frac(t * freq / fps + phase) < 0.5`.
pub fn blink_waveform(freq: f64, phase: f64, fps: f64, t: u32) -> bool {
    let x = t as f64 * freq / fps + phase;
    x - x.floor() < 0.5
}

/// One rendered sequence. Frames are row-major HWC bytes, one frame after
/// another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub spec: SceneSpec,
    pub seed: u64,
    pub frames: Vec<u8>,
    pub labels: Vec<FrameLabel>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn canvas(&self) -> usize {
        self.spec.canvas as usize
    }

    pub fn frame_bytes(&self) -> usize {
        self.canvas() * self.canvas() * 3
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_bytes();
        &self.frames[t * n..(t + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub image: Vec<u8>,
    pub label: FrameLabel,
}

/// Whether the signal of one light is active, i.e. logically ON.
fn light_active(intent: IntentState, left: bool) -> bool {
    match intent {
        IntentState::LeftTurn => left,
        IntentState::RightTurn => !left,
        IntentState::Flashers => true,
        IntentState::Off | IntentState::Unknown => false,
    }
}

/// Pixels of `light` covered by the union of occluders active at `t`.
fn covered_pixels(spec: &SceneSpec, light: &Rect, t: u32) -> i64 {
    let active: Vec<&Rect> = spec.occlusions.iter().filter(|o| o.active(t)).map(|o| &o.rect).collect();
    if active.is_empty() {
        return 0;
    }
    let mut n = 0;
    for y in light.y..light.bottom() {
        for x in light.x..light.right() {
            if active.iter().any(|r| r.contains(x, y)) {
                n += 1;
            }
        }
    }
    n
}

/// A light is occluded when at least half of its pixels are hidden.
pub fn light_occluded(spec: &SceneSpec, light: &Rect, t: u32) -> bool {
    2 * covered_pixels(spec, light, t) >= light.area()
}

/// Logical labels of frame `t`, independent of the pixels.
pub fn frame_label(spec: &SceneSpec, t: u32) -> FrameLabel {
    let state = |rect: &Rect, left: bool| {
        if light_occluded(spec, rect, t) {
            LightState::Unknown
        } else if light_active(spec.intent, left) {
            LightState::On
        } else {
            LightState::Off
        }
    };
    let g = &spec.geometry;
    FrameLabel::from_lights(state(&g.left_light, true), state(&g.right_light, false), spec.view)
}

fn fill(image: &mut [u8], s: i32, rect: &Rect, color: Rgb) {
    let r = rect.intersect(&Rect::new(0, 0, s, s));
    for y in r.y..r.bottom() {
        let row = (y * s) as usize * 3;
        for x in r.x..r.right() {
            let i = row + x as usize * 3;
            image[i..i + 3].copy_from_slice(&color);
        }
    }
}

/// Renders frame `t`. All randomness (exposure and pixel noise) comes from `rng`.
pub fn render_frame(spec: &SceneSpec, t: u32, rng: &mut RngStream) -> Result<RenderedFrame> {
    if t >= spec.length {
        return Err(Error::InvalidScene(format!("frame {t} beyond length {}", spec.length)));
    }
    let s = spec.canvas as i32;
    let c = &spec.colors;
    let g = &spec.geometry;
    let mut image = vec![0u8; (s * s * 3) as usize];
    for px in image.chunks_exact_mut(3) {
        px.copy_from_slice(&c.background);
    }
    fill(&mut image, s, &g.body, c.body);
    for p in &g.details {
        fill(&mut image, s, &p.rect, p.color);
    }
    let lit = blink_waveform(spec.blink_freq, spec.blink_phase, spec.fps, t);
    for (rect, left) in [(&g.left_light, true), (&g.right_light, false)] {
        let on = lit && light_active(spec.intent, left);
        fill(&mut image, s, rect, if on { c.light_on } else { c.light_off });
    }
    for o in spec.occlusions.iter().filter(|o| o.active(t)) {
        fill(&mut image, s, &o.rect, o.color);
    }

    let exposure = c.exposure as i64;
    let offset = rng.int_range(-exposure, exposure) as i32;
    let noise = c.noise as i32;
    let levels = 2 * noise + 1;
    let mut bits = [0u8; 8];
    for (i, v) in image.iter_mut().enumerate() {
        if i % 8 == 0 {
            bits = rng.bits().to_le_bytes();
        }
        // Maps a uniform byte onto -noise..=noise.
        let n = ((bits[i % 8] as i32 * levels) >> 8) - noise;
        *v = (*v as i32 + offset + n).clamp(0, 255) as u8;
    }

    Ok(RenderedFrame {
        image,
        label: frame_label(spec, t),
    })
}

/// Renders a whole sequence; frame `t` uses stream `split(t)` of `seed`.
pub fn generate_sequence(spec: &SceneSpec, seed: u64) -> Result<SequenceSample> {
    spec.validate()?;
    let root = RngStream::new(seed);
    let s = spec.canvas as usize;
    let mut frames = Vec::with_capacity(spec.length as usize * s * s * 3);
    let mut labels = Vec::with_capacity(spec.length as usize);
    for t in 0..spec.length {
        let frame = render_frame(spec, t, &mut root.split(t as u64))?;
        frames.extend_from_slice(&frame.image);
        labels.push(frame.label);
    }
    Ok(SequenceSample {
        spec: spec.clone(),
        seed,
        frames,
        labels,
    })
}
