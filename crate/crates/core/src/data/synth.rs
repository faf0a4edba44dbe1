//! Procedural seven-segment digit domains.
//!
//! Each [`DomainStyle`] describes how glyphs are distorted and composited
//! onto a background. Different styles give datasets with the same label
//! space but different input distributions, which is what transfer
//! experiments need.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Plain,
    ColoredNoise,
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Normal,
    Inverted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub name: String,
    pub background: Background,
    /// Standard deviation of glyph vertex jitter, in glyph-width units.
    pub stroke_jitter: f32,
    /// Glyphs are rotated uniformly within `±rotation_deg`.
    pub rotation_deg: f32,
    pub polarity: Polarity,
    /// Per-channel multiplier applied to the stroke colour.
    pub tint: [f32; 3],
    /// Stroke width range in pixels.
    pub stroke_width: [f32; 2],
    /// Glyph height range in pixels.
    pub glyph_height: [f32; 2],
    /// Maximum horizontal shear factor.
    pub shear: f32,
    /// Maximum centre offset in pixels.
    pub shift: f32,
    /// Standard deviation of additive pixel noise on the `[0, 1]` scale.
    pub noise: f32,
    /// Number of distractor strokes per image.
    pub clutter: usize,
    /// When set, stroke colours are drawn at random and then tinted.
    pub random_colors: bool,
}

impl DomainStyle {
    /// White strokes on black, mild distortion.
    pub fn plain() -> Self {
        Self {
            name: "plain".into(),
            background: Background::Plain,
            stroke_jitter: 0.08,
            rotation_deg: 10.0,
            polarity: Polarity::Normal,
            tint: [1.0, 1.0, 1.0],
            stroke_width: [2.0, 3.2],
            glyph_height: [17.0, 23.0],
            shear: 0.2,
            shift: 2.0,
            noise: 0.02,
            clutter: 0,
            random_colors: false,
        }
    }

    /// Warm-tinted strokes over colour gradients, heavier distortion and clutter.
    pub fn gradient() -> Self {
        Self {
            name: "gradient".into(),
            background: Background::Gradient,
            stroke_jitter: 0.14,
            rotation_deg: 18.0,
            polarity: Polarity::Normal,
            tint: [1.0, 0.85, 0.6],
            stroke_width: [1.6, 3.6],
            glyph_height: [15.0, 24.0],
            shear: 0.3,
            shift: 3.0,
            noise: 0.06,
            clutter: 2,
            random_colors: false,
        }
    }

    /// The plain style with dark strokes on a light background.
    pub fn inverted() -> Self {
        Self {
            name: "inverted".into(),
            polarity: Polarity::Inverted,
            background: Background::Gradient,
            tint: [0.9, 1.0, 0.8],
            ..Self::plain()
        }
    }

    /// Random stroke colours over coloured noise, like street-view digits.
    pub fn noisy_color() -> Self {
        Self {
            name: "noisy_color".into(),
            background: Background::ColoredNoise,
            stroke_jitter: 0.12,
            rotation_deg: 15.0,
            polarity: Polarity::Normal,
            tint: [1.0, 1.0, 1.0],
            stroke_width: [2.0, 4.0],
            glyph_height: [16.0, 25.0],
            shear: 0.25,
            shift: 3.0,
            noise: 0.08,
            clutter: 3,
            random_colors: true,
        }
    }

    /// Looks up a named preset.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "plain" => Some(Self::plain()),
            "gradient" => Some(Self::gradient()),
            "inverted" => Some(Self::inverted()),
            "noisy_color" => Some(Self::noisy_color()),
            _ => None,
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["plain", "gradient", "inverted", "noisy_color"]
    }
}

// Glyph vertices in glyph units: x in [0, 1], y in [0, 2] (top to bottom).
const VERTICES: [(f32, f32); 6] = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (0.0, 2.0), (1.0, 2.0)];
// Segments a..g as vertex pairs.
const SEGMENTS: [(usize, usize); 7] = [(0, 1), (1, 3), (3, 5), (4, 5), (2, 4), (0, 2), (2, 3)];
// Lit segments per digit, bit i = segment i (a = bit 0).
const DIGITS: [u8; 10] = [
    0b011_1111, // 0: abcdef
    0b000_0110, // 1: bc
    0b101_1011, // 2: abdeg
    0b100_1111, // 3: abcdg
    0b110_0110, // 4: bcfg
    0b110_1101, // 5: acdfg
    0b111_1101, // 6: acdefg
    0b000_0111, // 7: abc
    0b111_1111, // 8
    0b110_1111, // 9: abcdfg
];

type Segment = ((f32, f32), (f32, f32));

fn dist_to_segment(p: (f32, f32), s: Segment) -> f32 {
    let ((ax, ay), (bx, by)) = s;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - ax) * dx + (p.1 - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Anti-aliased coverage in `[0, 1]` of a set of strokes at every pixel.
fn coverage(strokes: &[(Segment, f32)]) -> Vec<f32> {
    let mut out = vec![0.0f32; SIZE * SIZE];
    for y in 0..SIZE {
        for x in 0..SIZE {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let mut best = 0.0f32;
            for &(seg, width) in strokes {
                let c = (width * 0.5 + 0.5 - dist_to_segment(p, seg)).clamp(0.0, 1.0);
                best = best.max(c);
            }
            out[y * SIZE + x] = best;
        }
    }
    out
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn luminance(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Background as three `SIZE×SIZE` planes on the `[0, 1]` scale.
fn background(kind: Background, rng: &mut ChaCha8Rng) -> [Vec<f32>; 3] {
    match kind {
        Background::Plain => {
            let level = rng.random_range(0.0..0.08f32);
            std::array::from_fn(|_| vec![level; SIZE * SIZE])
        }
        Background::Gradient => {
            let (c0, c1) = (random_color(rng), random_color(rng));
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            let (ux, uy) = (angle.cos(), angle.sin());
            std::array::from_fn(|ch| {
                (0..SIZE * SIZE)
                    .map(|i| {
                        let (x, y) = ((i % SIZE) as f32 / 31.0 - 0.5, (i / SIZE) as f32 / 31.0 - 0.5);
                        let t = ((x * ux + y * uy) * std::f32::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
                        (c0[ch] * (1.0 - t) + c1[ch] * t) * 0.6
                    })
                    .collect()
            })
        }
        Background::ColoredNoise => {
            // 5×5 grid of random colours, bilinearly upsampled.
            const GRID: usize = 5;
            let cells: Vec<[f32; 3]> = (0..GRID * GRID).map(|_| random_color(rng)).collect();
            std::array::from_fn(|ch| {
                let plane: Vec<f32> = cells.iter().map(|c| c[ch]).collect();
                super::idx::resize_bilinear(&plane, GRID, GRID, SIZE, SIZE)
            })
        }
    }
}

fn render(style: &DomainStyle, digit: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let jitter = Normal::new(0.0f32, style.stroke_jitter.max(0.0)).expect("finite sigma");
    let verts: Vec<(f32, f32)> = VERTICES
        .iter()
        .map(|&(x, y)| (x + jitter.sample(rng), y + jitter.sample(rng)))
        .collect();

    let height = rng.random_range(style.glyph_height[0]..=style.glyph_height[1]);
    let scale = height / 2.0;
    let theta = rng.random_range(-style.rotation_deg..=style.rotation_deg).to_radians();
    let shear = rng.random_range(-style.shear..=style.shear);
    let cx = 16.0 + rng.random_range(-style.shift..=style.shift);
    let cy = 16.0 + rng.random_range(-style.shift..=style.shift);
    let (sin, cos) = theta.sin_cos();
    let to_px = |(x, y): (f32, f32)| {
        let (gx, gy) = ((x - 0.5) * scale, (y - 1.0) * scale);
        let gx = gx - shear * gy;
        (cx + cos * gx - sin * gy, cy + sin * gx + cos * gy)
    };
    let width = rng.random_range(style.stroke_width[0]..=style.stroke_width[1]);
    let mut strokes: Vec<(Segment, f32)> = SEGMENTS
        .iter()
        .enumerate()
        .filter(|(i, _)| DIGITS[digit] & (1 << i) != 0)
        .map(|(_, &(a, b))| ((to_px(verts[a]), to_px(verts[b])), width))
        .collect();
    let glyph = coverage(&strokes);

    strokes.clear();
    for _ in 0..style.clutter {
        let x0 = rng.random_range(0.0..SIZE as f32);
        let y0 = rng.random_range(0.0..SIZE as f32);
        let len = rng.random_range(3.0..8.0f32);
        let a = rng.random_range(0.0..std::f32::consts::TAU);
        let w = rng.random_range(1.0..2.0f32);
        strokes.push((((x0, y0), (x0 + len * a.cos(), y0 + len * a.sin())), w));
    }
    let clutter = coverage(&strokes);

    let bg = background(style.background, rng);
    let bg_lum = luminance(std::array::from_fn(|c| {
        bg[c].iter().sum::<f32>() / (SIZE * SIZE) as f32
    }));
    let mut fg = if style.random_colors {
        random_color(rng)
    } else {
        [1.0; 3]
    };
    // keep the glyph visible: push the stroke colour away from the background
    if (luminance(fg) - bg_lum).abs() < 0.35 {
        let lift = if bg_lum < 0.5 { 1.0 } else { 0.0 };
        fg = fg.map(|v| 0.3 * v + 0.7 * lift);
    }
    let fg: [f32; 3] = std::array::from_fn(|c| (fg[c] * style.tint[c]).clamp(0.0, 1.0));
    let clutter_strength = rng.random_range(0.3..0.7f32);

    let noise = Normal::new(0.0f32, style.noise.max(0.0)).expect("finite sigma");
    let mut out = Vec::with_capacity(3 * SIZE * SIZE);
    for (c, plane) in bg.iter().enumerate() {
        for i in 0..SIZE * SIZE {
            let k = clutter[i] * clutter_strength;
            let base = plane[i] * (1.0 - k) + fg[c] * k;
            let mut v = base * (1.0 - glyph[i]) + fg[c] * glyph[i];
            if style.polarity == Polarity::Inverted {
                v = 1.0 - v;
            }
            v = (v + noise.sample(rng)).clamp(0.0, 1.0);
            out.push(v * 2.0 - 1.0);
        }
    }
    out
}

/// Renders `n` labeled glyph images for classes `0..num_classes`, balanced
/// to within one sample per class and shuffled. Deterministic per
/// `(style, n, num_classes, seed)`.
pub fn synth_domain(style: &DomainStyle, n: usize, num_classes: usize, seed: u64) -> Result<LabeledDataset> {
    if !(2..=10).contains(&num_classes) {
        return Err(Error::argument(format!(
            "synthetic digits support 2..=10 classes, got {num_classes}"
        )));
    }
    if n < num_classes {
        return Err(Error::argument(format!(
            "need at least one sample per class: n = {n} < {num_classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * 3 * SIZE * SIZE);
    for &y in &labels {
        data.extend(render(style, y, &mut rng));
    }
    LabeledDataset::new(
        Tensor::new([n, 3, SIZE, SIZE], data)?,
        labels,
        style.name.clone(),
        num_classes,
    )
}
