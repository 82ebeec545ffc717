//! Procedural datasets.
//!
//! Glyphs are small face-like drawings: identity fixes head shape, tint,
//! eye geometry and an off-axis mark (so all eight transforms differ);
//! expression fixes mouth and brows. Digits are rendered from a stroke font,
//! with per-variant affine jitter.

use crate::error::{GcnError, Result};
use crate::tensor::{RngState, Tensor};

use super::transform::{apply_transform, colorize, Transform};
use super::Sample;

const SUPERSAMPLE: usize = 3;

type Point = (f64, f64);

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn polyline_distance(p: Point, line: &[Point]) -> f64 {
    line.windows(2)
        .map(|w| segment_distance(p, w[0], w[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Average a colour function over a supersampled `res x res` grid. The
/// function receives coordinates in `[0, 1]^2`, x right and y down.
fn rasterize(res: usize, channels: usize, f: impl Fn(Point) -> [f64; 3]) -> Tensor<f32> {
    let plane = res * res;
    let mut data = vec![0f32; channels * plane];
    let n = SUPERSAMPLE as f64;
    for i in 0..res {
        for j in 0..res {
            let mut acc = [0f64; 3];
            for si in 0..SUPERSAMPLE {
                for sj in 0..SUPERSAMPLE {
                    let y = (i as f64 + (si as f64 + 0.5) / n) / res as f64;
                    let x = (j as f64 + (sj as f64 + 0.5) / n) / res as f64;
                    let c = f((x, y));
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for ch in 0..channels {
                // Snap to the 8-bit grid so images survive netpbm storage exactly.
                let byte = (acc[ch] / (n * n) * 255.0).round().clamp(0.0, 255.0) as u8;
                data[ch * plane + i * res + j] = byte as f32 / 255.0;
            }
        }
    }
    Tensor::new([channels, res, res], data).expect("consistent raster shape")
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

#[derive(Clone, Debug)]
struct IdentityLook {
    radii: (f64, f64),
    tint: [f64; 3],
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    mark: Point,
    mark_r: f64,
    hair: f64,
}

#[derive(Clone, Copy, Debug)]
struct ExpressionLook {
    /// Mouth centre drop relative to the corners (positive smiles).
    curve: f64,
    open: f64,
    /// Inner brow ends move down by this much (positive frowns).
    brow_tilt: f64,
    brow_raise: f64,
    mouth_shift: f64,
}

const EXPRESSIONS: [ExpressionLook; 7] = [
    ExpressionLook { curve: 0.0, open: 0.0, brow_tilt: 0.0, brow_raise: 0.0, mouth_shift: 0.0 },
    ExpressionLook { curve: -0.04, open: 0.0, brow_tilt: 0.05, brow_raise: 0.0, mouth_shift: 0.09 },
    ExpressionLook { curve: 0.09, open: 0.0, brow_tilt: 0.0, brow_raise: -0.02, mouth_shift: 0.0 },
    ExpressionLook { curve: 0.0, open: 0.075, brow_tilt: 0.0, brow_raise: -0.06, mouth_shift: 0.0 },
    ExpressionLook { curve: -0.08, open: 0.0, brow_tilt: -0.07, brow_raise: 0.0, mouth_shift: 0.0 },
    ExpressionLook { curve: -0.03, open: 0.0, brow_tilt: 0.08, brow_raise: 0.03, mouth_shift: 0.0 },
    ExpressionLook { curve: -0.05, open: 0.045, brow_tilt: -0.05, brow_raise: -0.05, mouth_shift: 0.0 },
];

/// Renderer for the identity x expression glyph family.
#[derive(Clone, Debug)]
pub struct GlyphRenderer {
    looks: Vec<IdentityLook>,
    expressions: Vec<ExpressionLook>,
    resolution: usize,
}

impl GlyphRenderer {
    pub fn new(seed: u64, identities: usize, expressions: usize, resolution: usize) -> Result<Self> {
        Self::with_offset(seed, 0, identities, expressions, resolution)
    }

    /// Identities `first..first + identities` of the family for `seed`,
    /// addressed locally as `0..identities`.
    pub fn with_offset(
        seed: u64,
        first: usize,
        identities: usize,
        expressions: usize,
        resolution: usize,
    ) -> Result<Self> {
        if identities < 2 || expressions < 2 {
            return Err(GcnError::Config(format!(
                "glyphs need at least 2 identities and 2 expressions, got {identities} x {expressions}"
            )));
        }
        if resolution < 8 {
            return Err(GcnError::Config(format!("glyph resolution {resolution} is below 8")));
        }
        let root = RngState::new(seed);
        let looks = (first..first + identities)
            .map(|i| {
                let mut r = root.fork(1 + i as u64);
                let hue = (i as f64 * 0.618_033_988_75 + r.uniform(0.0, 0.05)).fract();
                IdentityLook {
                    radii: (r.uniform(0.26, 0.40), r.uniform(0.32, 0.44)),
                    tint: hsv(hue, r.uniform(0.45, 0.9), r.uniform(0.6, 0.95)),
                    eye_dx: r.uniform(0.09, 0.15),
                    eye_y: r.uniform(-0.14, -0.06),
                    eye_r: r.uniform(0.035, 0.06),
                    mark: (r.uniform(0.14, 0.24), r.uniform(-0.28, -0.18)),
                    mark_r: r.uniform(0.035, 0.055),
                    hair: r.uniform(0.0, 0.35),
                }
            })
            .collect();
        let expressions = (0..expressions)
            .map(|e| {
                EXPRESSIONS.get(e).copied().unwrap_or_else(|| {
                    let mut r = root.fork(10_000 + e as u64);
                    ExpressionLook {
                        curve: r.uniform(-0.09, 0.09),
                        open: r.uniform(0.0, 0.07),
                        brow_tilt: r.uniform(-0.08, 0.08),
                        brow_raise: r.uniform(-0.06, 0.04),
                        mouth_shift: r.uniform(-0.08, 0.08),
                    }
                })
            })
            .collect();
        Ok(GlyphRenderer {
            looks,
            expressions,
            resolution,
        })
    }

    pub fn identities(&self) -> usize {
        self.looks.len()
    }

    pub fn expressions(&self) -> usize {
        self.expressions.len()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Canonical (untransformed) `[3, R, R]` glyph.
    pub fn render(&self, identity: usize, expression: usize) -> Result<Tensor<f32>> {
        let look = self.looks.get(identity).ok_or_else(|| {
            GcnError::Label(format!("identity {identity} out of range 0..{}", self.looks.len()))
        })?;
        let ex = *self.expressions.get(expression).ok_or_else(|| {
            GcnError::Label(format!(
                "expression {expression} out of range 0..{}",
                self.expressions.len()
            ))
        })?;
        let (rx, ry) = look.radii;
        let dark = [0.05, 0.05, 0.08];
        let mouth_y = 0.16 + ry * 0.25;
        let mouth_w = rx * 0.55;
        let brow_y = look.eye_y - look.eye_r - 0.05 + ex.brow_raise;
        let brows: Vec<[Point; 2]> = [-1.0, 1.0]
            .iter()
            .map(|&side| {
                let outer = (side * (look.eye_dx + 0.06), brow_y);
                let inner = (side * (look.eye_dx - 0.05), brow_y + ex.brow_tilt);
                [outer, inner]
            })
            .collect();
        Ok(rasterize(self.resolution, 3, |(x, y)| {
            // Centred coordinates in [-0.5, 0.5].
            let (u, v) = (x - 0.5, y - 0.5);
            let head = (u / rx).powi(2) + (v / ry).powi(2);
            if head > 1.0 {
                return [0.0; 3];
            }
            let mut c = look.tint;
            if v < -ry + look.hair * ry {
                c = [c[0] * 0.35, c[1] * 0.3, c[2] * 0.3];
            }
            for side in [-1.0, 1.0] {
                let (du, dv) = (u - side * look.eye_dx, v - look.eye_y);
                if du * du + dv * dv < look.eye_r * look.eye_r {
                    c = dark;
                }
            }
            for b in &brows {
                if segment_distance((u, v), b[0], b[1]) < 0.018 {
                    c = dark;
                }
            }
            let mu = u - ex.mouth_shift;
            if ex.open > 0.0 {
                let (du, dv) = (mu / (mouth_w * 0.6), (v - mouth_y) / ex.open);
                if du * du + dv * dv < 1.0 {
                    c = [0.6, 0.05, 0.05];
                }
            }
            if mu.abs() < mouth_w {
                let t = mu / mouth_w;
                let my = mouth_y + ex.curve * (1.0 - t * t) - ex.curve * 0.5;
                if (v - my).abs() < 0.022 {
                    c = [0.55, 0.05, 0.05];
                }
            }
            let (du, dv) = (u - look.mark.0, v - look.mark.1);
            if du * du + dv * dv < look.mark_r * look.mark_r {
                c = [1.0, 1.0, 0.85];
            }
            c
        }))
    }
}

/// Every (identity, expression, transform) glyph; labels follow the schema
/// `identity, expression, transform`.
pub fn synth_glyphs(seed: u64, identities: usize, expressions: usize, resolution: usize) -> Result<Vec<Sample>> {
    synth_glyph_range(seed, 0, identities, expressions, resolution)
}

/// [`synth_glyphs`] for identities `first..first + identities`; labels are
/// relative to `first`, sources keep the absolute identity.
pub fn synth_glyph_range(
    seed: u64,
    first: usize,
    identities: usize,
    expressions: usize,
    resolution: usize,
) -> Result<Vec<Sample>> {
    let r = GlyphRenderer::with_offset(seed, first, identities, expressions, resolution)?;
    let mut out = Vec::with_capacity(identities * expressions * 8);
    for p in 0..identities {
        for e in 0..expressions {
            let base = r.render(p, e)?;
            for t in Transform::all() {
                out.push(Sample {
                    image: apply_transform(&base, t)?,
                    labels: vec![p, e, t.index()],
                    source: format!("glyph/p{}/e{e}/{}", first + p, t.name()),
                });
            }
        }
    }
    Ok(out)
}

/// Untransformed glyphs with labels `identity, expression`.
pub fn canonical_glyphs(seed: u64, identities: usize, expressions: usize, resolution: usize) -> Result<Vec<Sample>> {
    canonical_glyph_range(seed, 0, identities, expressions, resolution)
}

pub fn canonical_glyph_range(
    seed: u64,
    first: usize,
    identities: usize,
    expressions: usize,
    resolution: usize,
) -> Result<Vec<Sample>> {
    let r = GlyphRenderer::with_offset(seed, first, identities, expressions, resolution)?;
    let mut out = Vec::with_capacity(identities * expressions);
    for p in 0..identities {
        for e in 0..expressions {
            out.push(Sample {
                image: r.render(p, e)?,
                labels: vec![p, e],
                source: format!("glyph/p{}/e{e}/rot0", first + p),
            });
        }
    }
    Ok(out)
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64) -> Vec<Point> {
    let n = 24;
    (0..=n)
        .map(|k| {
            let a = from + (to - from) * k as f64 / n as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Strokes for each digit in the unit square (x right, y down).
fn digit_strokes(d: usize) -> Vec<Vec<Point>> {
    use std::f64::consts::TAU;
    match d {
        0 => vec![
            ellipse(0.5, 0.5, 0.24, 0.35, 0.0, TAU),
            vec![(0.6, 0.18), (0.72, 0.1)],
        ],
        1 => vec![
            vec![(0.33, 0.3), (0.55, 0.14), (0.55, 0.86)],
            vec![(0.38, 0.86), (0.72, 0.86)],
        ],
        2 => vec![vec![
            (0.28, 0.3), (0.38, 0.17), (0.58, 0.14), (0.7, 0.26), (0.66, 0.44), (0.28, 0.85), (0.74, 0.85),
        ]],
        3 => vec![vec![
            (0.28, 0.2), (0.6, 0.15), (0.7, 0.3), (0.46, 0.48), (0.72, 0.62), (0.66, 0.82), (0.28, 0.85),
        ]],
        4 => vec![vec![(0.62, 0.86), (0.62, 0.14), (0.24, 0.62), (0.78, 0.62)]],
        5 => vec![vec![
            (0.72, 0.15), (0.35, 0.15), (0.31, 0.47), (0.6, 0.44), (0.72, 0.62), (0.63, 0.83), (0.28, 0.82),
        ]],
        6 => vec![vec![
            (0.66, 0.14), (0.42, 0.32), (0.31, 0.62), (0.42, 0.85), (0.64, 0.8), (0.69, 0.62), (0.52, 0.5),
            (0.33, 0.6),
        ]],
        7 => vec![
            vec![(0.26, 0.16), (0.74, 0.16), (0.42, 0.86)],
            vec![(0.4, 0.5), (0.64, 0.5)],
        ],
        8 => vec![
            ellipse(0.5, 0.31, 0.16, 0.16, 0.0, TAU),
            ellipse(0.5, 0.66, 0.22, 0.2, 0.0, TAU),
        ],
        _ => vec![
            ellipse(0.5, 0.34, 0.18, 0.18, 0.0, TAU),
            vec![(0.68, 0.34), (0.6, 0.86)],
        ],
    }
}

/// Grey `[1, R, R]` digit; `variant` 0 is undistorted, others are jittered
/// deterministically from `seed`.
pub fn render_digit(seed: u64, digit: usize, variant: usize, resolution: usize) -> Result<Tensor<f32>> {
    if digit > 9 {
        return Err(GcnError::Label(format!("digit {digit} out of range 0..10")));
    }
    let (scale, shift, slant, width) = if variant == 0 {
        (1.0, (0.0, 0.0), 0.0, 0.085)
    } else {
        let mut r = RngState::new(seed).fork((digit * 100_003 + variant) as u64);
        (
            r.uniform(0.88, 1.05),
            (r.uniform(-0.05, 0.05), r.uniform(-0.05, 0.05)),
            r.uniform(-0.12, 0.12),
            r.uniform(0.07, 0.1),
        )
    };
    let strokes: Vec<Vec<Point>> = digit_strokes(digit)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x - 0.5, y - 0.5);
                    let x = x + slant * -y;
                    (0.5 + scale * x + shift.0, 0.5 + scale * y + shift.1)
                })
                .collect()
        })
        .collect();
    let half = width / 2.0;
    Ok(rasterize(resolution, 1, |p| {
        let d = strokes
            .iter()
            .map(|s| polyline_distance(p, s))
            .fold(f64::INFINITY, f64::min);
        let v = if d < half { 1.0 } else { 0.0 };
        [v, v, v]
    }))
}

/// Colored, rotated digit samples with labels `digit, color, rotation`.
pub fn synth_digits(
    seed: u64,
    variants_per_digit: usize,
    colors: &[usize],
    rotations: &[usize],
    resolution: usize,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for d in 0..10 {
        for v in 0..variants_per_digit {
            let grey = render_digit(seed, d, v, resolution)?;
            expand_digit(&grey, d, colors, rotations, &format!("digit/d{d}/v{v}"), &mut out)?;
        }
    }
    Ok(out)
}

/// Colorize and rotate one grey digit into every requested combination.
pub fn expand_digit(
    grey: &Tensor<f32>,
    digit: usize,
    colors: &[usize],
    rotations: &[usize],
    source: &str,
    out: &mut Vec<Sample>,
) -> Result<()> {
    for &c in colors {
        let rgb = colorize(grey, c)?;
        for &q in rotations {
            if q >= 4 {
                return Err(GcnError::Label(format!("rotation {q} out of range 0..4")));
            }
            let t = Transform::rotation(q as u8);
            out.push(Sample {
                image: apply_transform(&rgb, t)?,
                labels: vec![digit, c, q],
                source: format!("{source}/{}/{}", crate::schema::COLOR_NAMES[c], t.name()),
            });
        }
    }
    Ok(())
}
