//! Font loading, scaled glyph metrics, and an anti-aliased scanline
//! rasterizer with a pinned rounding rule.
//!
//! Coverage accumulation follows the signed-area sweep used by font-rs:
//! each outline segment deposits per-cell area deltas, a prefix sum per row
//! recovers coverage. All arithmetic is plain IEEE f32 in a fixed order and
//! glyphs are rendered at integer pixel origins, so output is byte-identical
//! across runs and platforms. Advance accounting uses 26.6 fixed point.

use std::collections::HashMap;
use std::path::Path;

use ttf_parser::{Face, GlyphId, OutlineBuilder};

use crate::error::{Error, Result};

/// Bundled fallback face (DejaVu Sans, see assets/DejaVuSans-LICENSE.txt).
const BUNDLED_TTF: &[u8] = include_bytes!("../assets/DejaVuSans.ttf");

pub const FALLBACK_GLYPH: char = '\u{25A1}'; // white square

pub struct Font {
    data: Vec<u8>,
}

impl Font {
    pub fn bundled() -> Font {
        Font { data: BUNDLED_TTF.to_vec() }
    }

    pub fn from_file(path: &Path) -> Result<Font> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        // validate now so later parses can't fail
        Face::parse(&data, 0).map_err(|e| Error::Font(format!("{path:?}: {e}")))?;
        Ok(Font { data })
    }

    /// Metrics and raster access at one pixel size.
    pub fn scaled(&self, font_size_px: u32) -> Result<Scaled<'_>> {
        let face = Face::parse(&self.data, 0).map_err(|e| Error::Font(e.to_string()))?;
        let upem = face.units_per_em() as i64;
        if upem == 0 {
            return Err(Error::Font("units_per_em is zero".into()));
        }
        if face.glyph_index(FALLBACK_GLYPH).is_none() {
            return Err(Error::Font("font lacks the fallback glyph".into()));
        }
        Ok(Scaled {
            face,
            px: font_size_px as i64,
            upem,
            advances: HashMap::new(),
            rasters: HashMap::new(),
        })
    }
}

/// Coverage bitmap of one glyph, positioned relative to its pen origin.
#[derive(Clone)]
pub struct GlyphBitmap {
    /// x offset of the bitmap's left edge from the pen position.
    pub left: i32,
    /// y offset of the bitmap's top edge from the baseline (negative = above).
    pub top: i32,
    pub width: usize,
    pub height: usize,
    /// Row-major coverage, 0 = empty, 255 = full.
    pub coverage: Vec<u8>,
}

pub struct Scaled<'a> {
    face: Face<'a>,
    px: i64,
    upem: i64,
    advances: HashMap<char, i32>,
    rasters: HashMap<u16, GlyphBitmap>,
}

impl<'a> Scaled<'a> {
    fn glyph(&self, c: char) -> GlyphId {
        self.face
            .glyph_index(c)
            .unwrap_or_else(|| self.face.glyph_index(FALLBACK_GLYPH).unwrap())
    }

    /// font units -> 26.6 fixed-point pixels, round half up.
    fn units_to_fixed(&self, units: i64) -> i32 {
        let num = units * self.px * 64;
        (num.div_euclid(self.upem) + i64::from(num.rem_euclid(self.upem) * 2 >= self.upem)) as i32
    }

    /// Horizontal advance in 26.6 fixed-point pixels.
    pub fn advance_fixed(&mut self, c: char) -> i32 {
        if let Some(&a) = self.advances.get(&c) {
            return a;
        }
        let gid = self.glyph(c);
        let units = self.face.glyph_hor_advance(gid).unwrap_or(0) as i64;
        let a = self.units_to_fixed(units);
        self.advances.insert(c, a);
        a
    }

    /// Width of a string in 26.6 fixed-point pixels.
    pub fn width_fixed(&mut self, s: &str) -> i64 {
        s.chars().map(|c| self.advance_fixed(c) as i64).sum()
    }

    pub fn ascent_px(&self) -> i32 {
        (self.units_to_fixed(self.face.ascender() as i64) + 32) >> 6
    }

    pub fn descent_px(&self) -> i32 {
        (self.units_to_fixed(-(self.face.descender() as i64)) + 32) >> 6
    }

    /// Rasterize (and cache) the coverage bitmap for one character.
    pub fn raster(&mut self, c: char) -> &GlyphBitmap {
        let gid = self.glyph(c);
        if !self.rasters.contains_key(&gid.0) {
            let bm = rasterize_glyph(&self.face, gid, self.px as f32 / self.upem as f32);
            self.rasters.insert(gid.0, bm);
        }
        &self.rasters[&gid.0]
    }
}

#[derive(Clone, Copy)]
struct Pt {
    x: f32,
    y: f32,
}

/// Collects the outline as flattened line segments in pixel space
/// (y grows downward). Curves are flattened at a pinned subdivision count.
struct Flattener {
    scale: f32,
    start: Pt,
    cur: Pt,
    segs: Vec<(Pt, Pt)>,
}

const QUAD_STEPS: usize = 8;
const CUBIC_STEPS: usize = 12;

impl Flattener {
    fn pt(&self, x: f32, y: f32) -> Pt {
        Pt { x: x * self.scale, y: -y * self.scale }
    }
    fn push(&mut self, to: Pt) {
        self.segs.push((self.cur, to));
        self.cur = to;
    }
}

impl OutlineBuilder for Flattener {
    fn move_to(&mut self, x: f32, y: f32) {
        let p = self.pt(x, y);
        self.start = p;
        self.cur = p;
    }
    fn line_to(&mut self, x: f32, y: f32) {
        let p = self.pt(x, y);
        self.push(p);
    }
    fn quad_to(&mut self, x1: f32, y1: f32, x: f32, y: f32) {
        let c = self.pt(x1, y1);
        let e = self.pt(x, y);
        let s = self.cur;
        for i in 1..=QUAD_STEPS {
            let t = i as f32 / QUAD_STEPS as f32;
            let u = 1.0 - t;
            let px = u * u * s.x + 2.0 * u * t * c.x + t * t * e.x;
            let py = u * u * s.y + 2.0 * u * t * c.y + t * t * e.y;
            self.push(Pt { x: px, y: py });
        }
    }
    fn curve_to(&mut self, x1: f32, y1: f32, x2: f32, y2: f32, x: f32, y: f32) {
        let c1 = self.pt(x1, y1);
        let c2 = self.pt(x2, y2);
        let e = self.pt(x, y);
        let s = self.cur;
        for i in 1..=CUBIC_STEPS {
            let t = i as f32 / CUBIC_STEPS as f32;
            let u = 1.0 - t;
            let px = u * u * u * s.x + 3.0 * u * u * t * c1.x + 3.0 * u * t * t * c2.x + t * t * t * e.x;
            let py = u * u * u * s.y + 3.0 * u * u * t * c1.y + 3.0 * u * t * t * c2.y + t * t * t * e.y;
            self.push(Pt { x: px, y: py });
        }
    }
    fn close(&mut self) {
        let s = self.start;
        if self.cur.x != s.x || self.cur.y != s.y {
            self.push(s);
        }
    }
}

fn rasterize_glyph(face: &Face<'_>, gid: GlyphId, scale: f32) -> GlyphBitmap {
    let mut fl = Flattener {
        scale,
        start: Pt { x: 0.0, y: 0.0 },
        cur: Pt { x: 0.0, y: 0.0 },
        segs: Vec::new(),
    };
    if face.outline_glyph(gid, &mut fl).is_none() || fl.segs.is_empty() {
        return GlyphBitmap { left: 0, top: 0, width: 0, height: 0, coverage: Vec::new() };
    }
    let (mut minx, mut miny, mut maxx, mut maxy) = (f32::MAX, f32::MAX, f32::MIN, f32::MIN);
    for (a, b) in &fl.segs {
        for p in [a, b] {
            minx = minx.min(p.x);
            miny = miny.min(p.y);
            maxx = maxx.max(p.x);
            maxy = maxy.max(p.y);
        }
    }
    let left = minx.floor() as i32 - 1;
    let top = miny.floor() as i32 - 1;
    let width = (maxx.ceil() as i32 - left + 2) as usize;
    let height = (maxy.ceil() as i32 - top + 2) as usize;

    let mut acc = Accumulator::new(width, height);
    for (a, b) in &fl.segs {
        acc.add_line(
            Pt { x: a.x - left as f32, y: a.y - top as f32 },
            Pt { x: b.x - left as f32, y: b.y - top as f32 },
        );
    }
    GlyphBitmap { left, top, width, height, coverage: acc.coverage() }
}

/// Signed-area coverage accumulator (font-rs style sweep).
struct Accumulator {
    w: usize,
    h: usize,
    a: Vec<f32>,
}

impl Accumulator {
    fn new(w: usize, h: usize) -> Self {
        Accumulator { w, h, a: vec![0.0; w * h + 4] }
    }

    fn add_line(&mut self, p0: Pt, p1: Pt) {
        if p0.y == p1.y {
            return;
        }
        let (dir, p0, p1) = if p0.y < p1.y { (1.0, p0, p1) } else { (-1.0f32, p1, p0) };
        let dxdy = (p1.x - p0.x) / (p1.y - p0.y);
        let mut x = p0.x;
        if p0.y < 0.0 {
            x -= p0.y * dxdy;
        }
        let y0 = p0.y.max(0.0) as usize;
        let y_end = (self.h as f32).min(p1.y.ceil()).max(0.0) as usize;
        for y in y0..y_end {
            let linestart = y * self.w;
            let dy = ((y + 1) as f32).min(p1.y) - (y as f32).max(p0.y);
            let xnext = x + dxdy * dy;
            let d = dy * dir;
            let (x0, x1) = if x < xnext { (x, xnext) } else { (xnext, x) };
            let x0 = x0.max(0.0).min(self.w as f32 - 1.0);
            let x1 = x1.max(0.0).min(self.w as f32 - 1.0);
            let x0floor = x0.floor();
            let x0i = x0floor as usize;
            let x1ceil = x1.ceil();
            let x1i = x1ceil as i32;
            if x1i <= x0i as i32 + 1 {
                let xmf = 0.5 * (x + xnext) - x0floor;
                self.a[linestart + x0i] += d - d * xmf;
                self.a[linestart + x0i + 1] += d * xmf;
            } else {
                let s = (x1 - x0).recip();
                let x0f = x0 - x0floor;
                let a0 = 0.5 * s * (1.0 - x0f) * (1.0 - x0f);
                let x1f = x1 - x1ceil + 1.0;
                let am = 0.5 * s * x1f * x1f;
                self.a[linestart + x0i] += d * a0;
                if x1i == x0i as i32 + 2 {
                    self.a[linestart + x0i + 1] += d * (1.0 - a0 - am);
                } else {
                    let a1 = s * (1.5 - x0f);
                    self.a[linestart + x0i + 1] += d * (a1 - a0);
                    for xi in x0i + 2..(x1i - 1) as usize {
                        self.a[linestart + xi] += d * s;
                    }
                    let a2 = a1 + (x1i - x0i as i32 - 3) as f32 * s;
                    self.a[linestart + (x1i - 1) as usize] += d * (1.0 - a2 - am);
                }
                self.a[linestart + x1i as usize] += d * am;
            }
            x = xnext;
        }
    }

    /// Row prefix sums; coverage = round(min(|sum|, 1) * 255).
    fn coverage(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.w * self.h];
        for y in 0..self.h {
            let mut sum = 0.0f32;
            for xcol in 0..self.w {
                sum += self.a[y * self.w + xcol];
                let cov = sum.abs().min(1.0);
                out[y * self.w + xcol] = (cov * 255.0 + 0.5) as u8;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_font_parses() {
        let font = Font::bundled();
        let scaled = font.scaled(24).unwrap();
        assert!(scaled.ascent_px() > 0);
        assert!(scaled.descent_px() > 0);
    }

    #[test]
    fn advances_positive_and_cached() {
        let font = Font::bundled();
        let mut scaled = font.scaled(24).unwrap();
        let a1 = scaled.advance_fixed('a');
        assert!(a1 > 0);
        assert_eq!(scaled.advance_fixed('a'), a1);
        // wider glyph has larger advance
        assert!(scaled.advance_fixed('W') > scaled.advance_fixed('i'));
    }

    #[test]
    fn raster_nonempty_for_visible_glyph() {
        let font = Font::bundled();
        let mut scaled = font.scaled(24).unwrap();
        let bm = scaled.raster('A').clone();
        assert!(bm.width > 0 && bm.height > 0);
        assert!(bm.coverage.iter().any(|&c| c > 128));
        // fully above the baseline
        assert!(bm.top < 0);
    }

    #[test]
    fn raster_empty_for_space() {
        let font = Font::bundled();
        let mut scaled = font.scaled(24).unwrap();
        let bm = scaled.raster(' ');
        assert_eq!(bm.width, 0);
    }

    #[test]
    fn raster_deterministic() {
        let font = Font::bundled();
        let mut s1 = font.scaled(19).unwrap();
        let mut s2 = font.scaled(19).unwrap();
        for c in "Quick5jumps!".chars() {
            assert_eq!(s1.raster(c).coverage, s2.raster(c).coverage);
        }
    }

    #[test]
    fn missing_glyph_falls_back() {
        let font = Font::bundled();
        let mut scaled = font.scaled(24).unwrap();
        // a codepoint DejaVu Sans does not cover
        let bm = scaled.raster('\u{10FFF}').clone();
        let fallback = scaled.raster(FALLBACK_GLYPH).clone();
        assert_eq!(bm.coverage, fallback.coverage);
    }
}
