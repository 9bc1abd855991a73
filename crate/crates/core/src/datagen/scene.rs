//! Scene descriptions: everything needed to render one sequence, drawn at
//! random per sequence and stored verbatim next to the pixels.

use serde::{Deserialize, Serialize};

use blinknet_tensor::RngStream;

use crate::error::{Error, Result};
use crate::semantics::{IntentState, ViewFace};

pub const MIN_BLINK_HZ: f64 = 1.0;
pub const MAX_BLINK_HZ: f64 = 2.0;

/// Axis-aligned pixel rectangle, half-open on the right and bottom.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl Rect {
    pub fn new(x: i32, y: i32, w: i32, h: i32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn right(&self) -> i32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i32 {
        self.y + self.h
    }

    pub fn area(&self) -> i64 {
        self.w.max(0) as i64 * self.h.max(0) as i64
    }

    pub fn is_empty(&self) -> bool {
        self.w <= 0 || self.h <= 0
    }

    /// Doubled centroid x, exact in integers.
    pub fn center_x2(&self) -> i32 {
        2 * self.x + self.w
    }

    pub fn intersect(&self, other: &Rect) -> Rect {
        let x = self.x.max(other.x);
        let y = self.y.max(other.y);
        let r = self.right().min(other.right());
        let b = self.bottom().min(other.bottom());
        Rect::new(x, y, (r - x).max(0), (b - y).max(0))
    }

    pub fn contains(&self, px: i32, py: i32) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    pub fn inflate(&self, by: i32) -> Rect {
        Rect::new(self.x - by, self.y - by, self.w + 2 * by, self.h + 2 * by)
    }

    /// Reflection across the vertical center line of a `canvas`-wide image.
    pub fn mirrored(&self, canvas: i32) -> Rect {
        Rect::new(canvas - self.right(), self.y, self.w, self.h)
    }

    fn inside(&self, canvas: i32) -> bool {
        !self.is_empty() && self.x >= 0 && self.y >= 0 && self.right() <= canvas && self.bottom() <= canvas
    }
}

pub type Rgb = [u8; 3];

/// A flat-colored shape drawn over the body (windows, wheels, plates, lamps).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub rect: Rect,
    pub color: Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub body: Rect,
    /// The vehicle's own left signal light, wherever it lands in the image.
    pub left_light: Rect,
    pub right_light: Rect,
    pub details: Vec<Patch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Photometrics {
    pub background: Rgb,
    pub body: Rgb,
    pub light_on: Rgb,
    pub light_off: Rgb,
    /// Per-frame global brightness offset is uniform in `-exposure..=exposure`.
    pub exposure: u8,
    /// Per-pixel, per-channel noise is uniform in `-noise..=noise`.
    pub noise: u8,
}

/// An opaque rectangle covering frames `start..end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occlusion {
    pub start: u32,
    pub end: u32,
    pub rect: Rect,
    pub color: Rgb,
}

impl Occlusion {
    pub fn active(&self, t: u32) -> bool {
        t >= self.start && t < self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub canvas: u32,
    pub fps: f64,
    pub length: u32,
    pub view: ViewFace,
    /// The signal the vehicle displays. `Unknown` is not a signal; unknown
    /// frames arise from occlusion.
    pub intent: IntentState,
    pub blink_freq: f64,
    pub blink_phase: f64,
    /// Apparent-distance scale the geometry was drawn with.
    pub scale: f64,
    pub geometry: Geometry,
    pub colors: Photometrics,
    #[serde(default)]
    pub occlusions: Vec<Occlusion>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScene(msg));
        if self.canvas < 8 || self.canvas > 4096 {
            return bad(format!("canvas {} outside 8..=4096", self.canvas));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.length == 0 {
            return bad("length must be at least one frame".into());
        }
        if !(MIN_BLINK_HZ..=MAX_BLINK_HZ).contains(&self.blink_freq) {
            return bad(format!(
                "blink_freq {} outside [{MIN_BLINK_HZ}, {MAX_BLINK_HZ}] Hz",
                self.blink_freq
            ));
        }
        if !(0.0..1.0).contains(&self.blink_phase) {
            return bad(format!("blink_phase {} outside [0, 1)", self.blink_phase));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return bad(format!("scale {} outside (0, 1]", self.scale));
        }
        if self.intent == IntentState::Unknown {
            return bad("intent must be a displayable signal; unknown frames come from occlusion".into());
        }
        let s = self.canvas as i32;
        let g = &self.geometry;
        let named = [("body", g.body), ("left_light", g.left_light), ("right_light", g.right_light)];
        for (name, r) in named {
            if !r.inside(s) {
                return bad(format!("{name} {r:?} is empty or outside the {s}x{s} canvas"));
            }
        }
        for (i, p) in g.details.iter().enumerate() {
            if !p.rect.inside(s) {
                return bad(format!("detail {i} {:?} is empty or outside the canvas", p.rect));
            }
        }
        if !g.left_light.intersect(&g.right_light).is_empty() {
            return bad("left and right lights overlap".into());
        }
        let (lx, rx) = (g.left_light.center_x2(), g.right_light.center_x2());
        // Only the front face reverses the sides; side views are seen from
        // the rear quarter and keep the rear ordering.
        let left_on_image_left = self.view != ViewFace::Front;
        if (lx < rx) != left_on_image_left {
            return bad(format!(
                "light placement does not match view {}: the vehicle's left light must be on the image {}",
                self.view,
                if left_on_image_left { "left" } else { "right" }
            ));
        }
        for (i, o) in self.occlusions.iter().enumerate() {
            if o.start >= o.end || o.end > self.length {
                return bad(format!("occlusion {i} interval {}..{} invalid for length {}", o.start, o.end, self.length));
            }
            if !o.rect.inside(s) {
                return bad(format!("occlusion {i} {:?} is empty or outside the canvas", o.rect));
            }
        }
        Ok(())
    }

    /// Canonical text form stored in dataset records.
    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidScene(format!("cannot serialize: {e}")))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidScene(format!("cannot parse: {e}")))
    }
}

/// Distribution parameters for drawing random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneOptions {
    pub canvas: u32,
    pub fps: f64,
    pub length: u32,
    /// Apparent-distance scale range.
    pub scale: [f64; 2],
    pub noise: [u8; 2],
    pub exposure: u8,
    /// Probability that a signal sequence gets one light briefly occluded.
    pub partial_occlusion: f64,
    /// Fraction of an unknown-class sequence covered by the full-vehicle occluder.
    pub unknown_coverage: [f64; 2],
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions {
            canvas: 64,
            fps: 10.0,
            length: 30,
            scale: [0.7, 1.0],
            noise: [3, 10],
            exposure: 6,
            partial_occlusion: 0.15,
            unknown_coverage: [0.6, 0.9],
        }
    }
}

impl SceneOptions {
    pub fn validate(&self) -> Result<()> {
        let cfg = Error::config;
        if self.canvas < 16 {
            return Err(cfg("canvas", "must be at least 16"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(cfg("fps", "must be positive"));
        }
        if self.length == 0 {
            return Err(cfg("length", "must be positive"));
        }
        let [lo, hi] = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(cfg("scale", "need 0 < lo <= hi <= 1"));
        }
        if self.noise[0] > self.noise[1] {
            return Err(cfg("noise", "lo must not exceed hi"));
        }
        if !(0.0..=1.0).contains(&self.partial_occlusion) {
            return Err(cfg("partial_occlusion", "must be a probability"));
        }
        let [lo, hi] = self.unknown_coverage;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(cfg("unknown_coverage", "need 0 < lo <= hi <= 1"));
        }
        Ok(())
    }
}

fn jitter(rng: &mut RngStream, base: Rgb, amount: i64) -> Rgb {
    base.map(|c| (c as i64 + rng.int_range(-amount, amount)).clamp(0, 255) as u8)
}

fn round(v: f64) -> i32 {
    v.round() as i32
}

const BODY_PALETTE: [Rgb; 8] = [
    [205, 205, 210],
    [35, 35, 40],
    [125, 125, 130],
    [40, 60, 140],
    [150, 30, 35],
    [30, 95, 55],
    [95, 75, 55],
    [60, 120, 150],
];

/// Layout for a rear/front face. Returns (body, image-left light, image-right light, details).
fn face_layout(s: i32, scale: f64, cx: i32, cy: i32, front: bool, rng: &mut RngStream) -> (Rect, Rect, Rect, Vec<Patch>) {
    let bw = round(0.78 * s as f64 * scale);
    let bh = round(0.62 * s as f64 * scale);
    let body = Rect::new(cx - bw / 2, cy - bh / 2, bw, bh);
    let f = |v: f64| round(v);
    let lw = f(0.16 * bw as f64).max(3);
    let lh = f(0.14 * bh as f64).max(3);
    let inset = f(0.05 * bw as f64).max(1);
    let ly = body.y + f(0.55 * bh as f64);
    let img_left = Rect::new(body.x + inset, ly, lw, lh);
    let img_right = Rect::new(body.right() - inset - lw, ly, lw, lh);

    let mut details = Vec::new();
    if front {
        let glass = jitter(rng, [130, 145, 160], 15);
        details.push(Patch {
            rect: Rect::new(body.x + f(0.1 * bw as f64), body.y + f(0.06 * bh as f64), f(0.8 * bw as f64), f(0.36 * bh as f64)),
            color: glass,
        });
        let lamp = jitter(rng, [235, 235, 225], 15);
        let gap = (lw / 2).max(1);
        details.push(Patch { rect: Rect::new(img_left.right() + gap, ly, lw, lh), color: lamp });
        details.push(Patch { rect: Rect::new(img_right.x - gap - lw, ly, lw, lh), color: lamp });
        let gx = img_left.right() + 2 * gap + lw;
        let gw = img_right.x - 2 * gap - lw - gx;
        if gw > 0 {
            details.push(Patch { rect: Rect::new(gx, ly, gw, lh), color: jitter(rng, [30, 30, 30], 10) });
        }
    } else {
        let glass = jitter(rng, [50, 60, 75], 12);
        details.push(Patch {
            rect: Rect::new(body.x + f(0.15 * bw as f64), body.y + f(0.08 * bh as f64), f(0.7 * bw as f64), f(0.3 * bh as f64)),
            color: glass,
        });
        let pw = f(0.22 * bw as f64).max(2);
        let ph = f(0.1 * bh as f64).max(2);
        details.push(Patch {
            rect: Rect::new(cx - pw / 2, body.y + f(0.74 * bh as f64), pw, ph),
            color: jitter(rng, [225, 225, 215], 12),
        });
    }
    let bumper_h = f(0.1 * bh as f64).max(1);
    details.push(Patch {
        rect: Rect::new(body.x, body.bottom() - bumper_h, bw, bumper_h),
        color: jitter(rng, [45, 45, 48], 10),
    });
    (body, img_left, img_right, details)
}

/// Stylized rear three-quarter layout of the vehicle's left flank. The
/// near-side light is large at the image-left end; the far-side light peeks
/// out small at the image-right end.
fn side_layout(s: i32, scale: f64, cx: i32, cy: i32, body_color: Rgb, rng: &mut RngStream) -> (Rect, Rect, Rect, Vec<Patch>) {
    let bw = round(0.92 * s as f64 * scale);
    let bh = round(0.36 * s as f64 * scale);
    let f = |v: f64| round(v);
    let cabin_h = f(0.6 * bh as f64);
    let top = cy - (bh + cabin_h) / 2 + cabin_h;
    let body = Rect::new(cx - bw / 2, top, bw, bh);
    let lw = f(0.09 * bw as f64).max(3);
    let lh = f(0.28 * bh as f64).max(3);
    let ly = body.y + f(0.2 * bh as f64);
    let near = Rect::new(body.x + 1, ly, lw, lh);
    let fw = f(0.6 * lw as f64).max(3);
    let fh = f(0.7 * lh as f64).max(3);
    let far = Rect::new(body.right() - 1 - fw, ly, fw, fh);

    let mut details = Vec::new();
    let cabin = Rect::new(body.x + f(0.3 * bw as f64), body.y - cabin_h, f(0.55 * bw as f64), cabin_h);
    details.push(Patch { rect: cabin, color: body_color });
    let glass = jitter(rng, [60, 75, 95], 15);
    let inner = Rect::new(cabin.x + 2, cabin.y + 2, cabin.w - 4, cabin.h - 3);
    if !inner.is_empty() {
        let half = inner.w / 2;
        details.push(Patch { rect: Rect::new(inner.x, inner.y, half - 1, inner.h), color: glass });
        details.push(Patch { rect: Rect::new(inner.x + half, inner.y, inner.w - half, inner.h), color: glass });
    }
    let wheel = jitter(rng, [25, 25, 25], 8);
    let ww = f(0.16 * bw as f64).max(3);
    let wh = f(0.45 * bh as f64).max(3);
    for at in [0.14, 0.7] {
        details.push(Patch {
            rect: Rect::new(body.x + f(at * bw as f64), body.bottom() - wh / 2, ww, wh),
            color: wheel,
        });
    }
    (body, near, far, details)
}

fn clip_details(details: Vec<Patch>, s: i32) -> Vec<Patch> {
    let canvas = Rect::new(0, 0, s, s);
    details
        .into_iter()
        .filter_map(|p| {
            let rect = p.rect.intersect(&canvas);
            (!rect.is_empty()).then_some(Patch { rect, ..p })
        })
        .collect()
}

/// Draws a random scene of the given dataset class. `class` may be
/// `Unknown`, which picks a random underlying signal and hides the whole
/// vehicle for most of the sequence.
pub fn random_scene(options: &SceneOptions, class: IntentState, view: ViewFace, rng: &mut RngStream) -> Result<SceneSpec> {
    options.validate()?;
    let s = options.canvas as i32;
    let scale = rng.uniform_range(options.scale[0], options.scale[1]);
    let shift = (s / 16).max(1) as i64;
    let cx = s / 2 + rng.int_range(-shift, shift) as i32;
    let cy = s / 2 + rng.int_range(-shift, shift) as i32;

    let background = {
        let g = rng.int_range(70, 190);
        let tint = [rng.int_range(-20, 20), rng.int_range(-20, 20), rng.int_range(-20, 20)];
        tint.map(|d| (g + d).clamp(0, 255) as u8)
    };
    let base = BODY_PALETTE[rng.below(BODY_PALETTE.len() as u64) as usize];
    let body_color = jitter(rng, base, 15);
    let light_on = [255 - rng.below(20) as u8, 155 + rng.below(35) as u8, rng.below(30) as u8];
    let light_off = [100 + rng.below(30) as u8, 72 + rng.below(22) as u8, 40 + rng.below(20) as u8];

    let (body, img_left, img_right, details) = match view {
        ViewFace::Behind | ViewFace::Front => face_layout(s, scale, cx, cy, view == ViewFace::Front, rng),
        ViewFace::Left | ViewFace::Right => side_layout(s, scale, cx, cy, body_color, rng),
    };
    // Keep the body on the canvas; details may be clipped.
    let dx = (-body.x).max(0) - (body.right() - s).max(0);
    let dy = (-body.y).max(0) - (body.bottom() - s).max(0);
    let shift = |r: Rect| Rect::new(r.x + dx, r.y + dy, r.w, r.h);
    let (body, img_left, img_right) = (shift(body), shift(img_left), shift(img_right));
    let details = details.into_iter().map(|p| Patch { rect: shift(p.rect), ..p }).collect();
    let details = clip_details(details, s);
    // Which image-side light belongs to which side of the vehicle.
    let geometry = match view {
        ViewFace::Behind | ViewFace::Left => Geometry { body, left_light: img_left, right_light: img_right, details },
        ViewFace::Front => Geometry { body, left_light: img_right, right_light: img_left, details },
        ViewFace::Right => Geometry {
            body: body.mirrored(s),
            left_light: img_right.mirrored(s),
            right_light: img_left.mirrored(s),
            details: details.into_iter().map(|p| Patch { rect: p.rect.mirrored(s), ..p }).collect(),
        },
    };

    let signals = [IntentState::LeftTurn, IntentState::RightTurn, IntentState::Flashers, IntentState::Off];
    let intent = if class == IntentState::Unknown {
        signals[rng.below(signals.len() as u64) as usize]
    } else {
        class
    };
    let blink_freq = rng.uniform_range(MIN_BLINK_HZ, MAX_BLINK_HZ);
    let blink_phase = rng.uniform();
    let noise = rng.int_range(options.noise[0] as i64, options.noise[1] as i64) as u8;
    let len = options.length;

    let occluder = |rng: &mut RngStream| {
        let g = rng.int_range(60, 200);
        [g, g + rng.int_range(-10, 10), g + rng.int_range(-10, 10)].map(|c| c.clamp(0, 255) as u8)
    };
    let mut occlusions = Vec::new();
    let canvas_rect = Rect::new(0, 0, s, s);
    if class == IntentState::Unknown {
        let [lo, hi] = options.unknown_coverage;
        let span = ((rng.uniform_range(lo, hi) * len as f64).round() as u32).clamp(1, len);
        let start = rng.below((len - span + 1) as u64) as u32;
        let mut cover = geometry.body;
        for p in &geometry.details {
            cover = union(&cover, &p.rect);
        }
        occlusions.push(Occlusion {
            start,
            end: start + span,
            rect: cover.inflate(2).intersect(&canvas_rect),
            color: occluder(rng),
        });
    } else if len >= 4 && rng.bernoulli(options.partial_occlusion) {
        let target = if rng.bernoulli(0.5) { geometry.left_light } else { geometry.right_light };
        let span = rng.int_range(2.max(len as i64 / 6), (len as i64 / 2).max(2)) as u32;
        let start = rng.below((len - span + 1) as u64) as u32;
        occlusions.push(Occlusion {
            start,
            end: start + span,
            rect: target.inflate(1).intersect(&canvas_rect),
            color: occluder(rng),
        });
    }

    let spec = SceneSpec {
        canvas: options.canvas,
        fps: options.fps,
        length: len,
        view,
        intent,
        blink_freq,
        blink_phase,
        scale,
        geometry,
        colors: Photometrics {
            background,
            body: body_color,
            light_on,
            light_off,
            exposure: options.exposure,
            noise,
        },
        occlusions,
    };
    spec.validate()?;
    Ok(spec)
}

fn union(a: &Rect, b: &Rect) -> Rect {
    let x = a.x.min(b.x);
    let y = a.y.min(b.y);
    Rect::new(x, y, a.right().max(b.right()) - x, a.bottom().max(b.bottom()) - y)
}
