//! Deterministic page layout and rasterization: fixed-size grayscale pages,
//! greedy word wrap from font advance widths, per-page ground-truth text.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::font::Font;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Square canvas side in pixels.
    pub canvas_px: u32,
    pub margin_px: u32,
    pub font_size_px: u32,
    pub line_height_factor: f64,
    /// Some(cell) lays out on a monospace grid: every character advances
    /// exactly `cell` pixels and is centered in its cell. Lets glyphs align
    /// one-to-one with model patches.
    pub char_cell_px: Option<u32>,
    /// None = bundled DejaVu Sans.
    pub font_file: Option<PathBuf>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            canvas_px: 1024,
            margin_px: 32,
            font_size_px: 24,
            line_height_factor: 1.2,
            char_cell_px: None,
            font_file: None,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas_px <= 2 * self.margin_px + self.font_size_px {
            return Err(Error::InvalidArg(format!(
                "canvas {} px too small for margin {} and font {}",
                self.canvas_px, self.margin_px, self.font_size_px
            )));
        }
        if self.line_height_factor < 1.0 {
            return Err(Error::InvalidArg("line_height_factor must be >= 1.0".into()));
        }
        if let Some(cell) = self.char_cell_px {
            if cell == 0 || cell > self.content_px() {
                return Err(Error::InvalidArg(format!(
                    "char_cell_px {cell} must be in 1..={}",
                    self.content_px()
                )));
            }
        }
        Ok(())
    }

    pub fn load_font(&self) -> Result<Font> {
        match &self.font_file {
            Some(path) => Font::from_file(path),
            None => Ok(Font::bundled()),
        }
    }

    fn content_px(&self) -> u32 {
        self.canvas_px - 2 * self.margin_px
    }

    /// floor(content_height / (font_size * line_height_factor))
    pub fn lines_per_page(&self) -> usize {
        (self.content_px() as f64 / (self.font_size_px as f64 * self.line_height_factor)) as usize
    }
}

#[derive(Debug, Clone)]
pub struct LayoutLine {
    pub text: String,
    pub baseline_y: i32,
    /// True when this line starts mid-word after a hard split.
    pub continues_previous: bool,
}

#[derive(Debug, Clone)]
pub struct PageLayout {
    pub lines: Vec<LayoutLine>,
    pub page_index: usize,
}

impl PageLayout {
    /// Page text with hard-split words rejoined.
    pub fn ground_truth(&self) -> String {
        let mut out = String::new();
        for (i, line) in self.lines.iter().enumerate() {
            if i > 0 && !line.continues_previous {
                out.push('\n');
            }
            out.push_str(&line.text);
        }
        out
    }
}

/// One rasterized page. Background is 255, ink < 255.
#[derive(Debug, Clone)]
pub struct PageImage {
    pub side_px: u32,
    pub pixels: Vec<u8>,
    pub page_index: usize,
    pub ground_truth: String,
}

impl PageImage {
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.side_px + x) as usize]
    }
}

/// Greedy word wrap into fixed-capacity pages. Words wider than the content
/// box are hard-split at the last fitting glyph.
pub fn layout_text(text: &str, cfg: &RenderConfig) -> Result<Vec<PageLayout>> {
    cfg.validate()?;
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let font = cfg.load_font()?;
    let mut scaled = font.scaled(cfg.font_size_px)?;
    let content_fixed = (cfg.content_px() as i64) << 6;
    let cell_fixed = cfg.char_cell_px.map(|c| (c as i64) << 6);
    let space_fixed = cell_fixed.unwrap_or(scaled.advance_fixed(' ') as i64);

    // (text, continues_previous)
    let mut lines: Vec<(String, bool)> = Vec::new();
    let mut cur = String::new();
    let mut cur_width: i64 = 0;
    let mut cur_continues = false;
    for word in text.split_whitespace() {
        let mut rest = word;
        let mut first_piece = true;
        loop {
            let word_width = match cell_fixed {
                Some(f) => f * rest.chars().count() as i64,
                None => scaled.width_fixed(rest),
            };
            let extra = if cur.is_empty() { word_width } else { space_fixed + word_width };
            if cur_width + extra <= content_fixed {
                if cur.is_empty() {
                    cur_continues = !first_piece;
                } else {
                    cur.push(' ');
                }
                cur.push_str(rest);
                cur_width += extra;
                break;
            }
            if !cur.is_empty() {
                lines.push((std::mem::take(&mut cur), cur_continues));
                cur_width = 0;
                continue;
            }
            // hard split: longest prefix that fits, at least one glyph
            let mut width: i64 = 0;
            let mut split_at = 0;
            for (i, c) in rest.char_indices() {
                let adv = cell_fixed.unwrap_or(scaled.advance_fixed(c) as i64);
                if width + adv > content_fixed && split_at > 0 {
                    break;
                }
                width += adv;
                split_at = i + c.len_utf8();
            }
            lines.push((rest[..split_at].to_string(), !first_piece));
            rest = &rest[split_at..];
            first_piece = false;
            if rest.is_empty() {
                break;
            }
        }
    }
    if !cur.is_empty() {
        lines.push((cur, cur_continues));
    }

    let per_page = cfg.lines_per_page().max(1);
    let ascent = scaled.ascent_px();
    let step = cfg.font_size_px as f64 * cfg.line_height_factor;
    let pages = lines
        .chunks(per_page)
        .enumerate()
        .map(|(page_index, chunk)| PageLayout {
            page_index,
            lines: chunk
                .iter()
                .enumerate()
                .map(|(k, (text, continues_previous))| LayoutLine {
                    text: text.clone(),
                    baseline_y: cfg.margin_px as i32 + ascent + (k as f64 * step + 0.5) as i32,
                    continues_previous: *continues_previous,
                })
                .collect(),
        })
        .collect();
    Ok(pages)
}

/// Paint one laid-out page. Glyph origins land on integer pixels and ink is
/// clipped to the content box, so identical inputs give identical bytes.
pub fn rasterize_page(layout: &PageLayout, cfg: &RenderConfig) -> Result<PageImage> {
    cfg.validate()?;
    let font = cfg.load_font()?;
    let mut scaled = font.scaled(cfg.font_size_px)?;
    let side = cfg.canvas_px;
    let mut pixels = vec![255u8; (side * side) as usize];

    let clip_lo = cfg.margin_px as i32;
    let clip_hi = (cfg.canvas_px - cfg.margin_px) as i32;

    let cell_fixed = cfg.char_cell_px.map(|c| (c as i64) << 6);
    for line in &layout.lines {
        let mut pen_fixed: i64 = (cfg.margin_px as i64) << 6;
        for c in line.text.chars() {
            let adv = scaled.advance_fixed(c) as i64;
            let (origin_fixed, step) = match cell_fixed {
                // center the glyph in its cell
                Some(f) => (pen_fixed + (f - adv) / 2, f),
                None => (pen_fixed, adv),
            };
            if !c.is_whitespace() {
                let origin_x = ((origin_fixed + 32) >> 6) as i32;
                let bm = scaled.raster(c);
                for row in 0..bm.height {
                    let y = line.baseline_y + bm.top + row as i32;
                    if y < clip_lo || y >= clip_hi {
                        continue;
                    }
                    for col in 0..bm.width {
                        let x = origin_x + bm.left + col as i32;
                        if x < clip_lo || x >= clip_hi {
                            continue;
                        }
                        let cov = bm.coverage[row * bm.width + col];
                        let dst = &mut pixels[(y as u32 * side + x as u32) as usize];
                        *dst = (*dst).min(255 - cov);
                    }
                }
            }
            pen_fixed += step;
        }
    }
    Ok(PageImage {
        side_px: side,
        pixels,
        page_index: layout.page_index,
        ground_truth: layout.ground_truth(),
    })
}

pub fn render_document(doc: &Document, cfg: &RenderConfig) -> Result<Vec<PageImage>> {
    layout_text(&doc.text, cfg)?
        .iter()
        .map(|layout| rasterize_page(layout, cfg))
        .collect()
}

/// Page count without rasterizing.
pub fn page_count(text: &str, cfg: &RenderConfig) -> Result<usize> {
    Ok(layout_text(text, cfg)?.len())
}

/// Triangle-filtered downscale to a square model-input side.
pub fn downscale(img: &PageImage, dst_side: u32) -> PageImage {
    if dst_side == img.side_px {
        return img.clone();
    }
    let src = image::GrayImage::from_raw(img.side_px, img.side_px, img.pixels.clone()).unwrap();
    let out = image::imageops::resize(&src, dst_side, dst_side, image::imageops::FilterType::Triangle);
    PageImage {
        side_px: dst_side,
        pixels: out.into_raw(),
        page_index: img.page_index,
        ground_truth: img.ground_truth.clone(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PageRecord {
    pub doc_id: String,
    pub page_index: usize,
    pub image_path: String,
    pub ground_truth_path: String,
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn save_png(img: &PageImage, path: &Path) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.side_px, img.side_px, img.pixels.clone()).unwrap();
    buf.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Write pages as PNG plus ground-truth sidecars under `out_dir`, returning
/// one manifest record per page.
pub fn export_pages(doc_id: &str, pages: &[PageImage], out_dir: &Path) -> Result<Vec<PageRecord>> {
    let sub = sanitize(doc_id);
    let dir = out_dir.join(&sub);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut records = Vec::with_capacity(pages.len());
    for page in pages {
        let image_rel = format!("{sub}/page_{:04}.png", page.page_index);
        let gt_rel = format!("{sub}/page_{:04}.txt", page.page_index);
        save_png(page, &out_dir.join(&image_rel))?;
        let gt_path = out_dir.join(&gt_rel);
        std::fs::write(&gt_path, &page.ground_truth).map_err(|e| Error::io(&gt_path, e))?;
        records.push(PageRecord {
            doc_id: doc_id.to_string(),
            page_index: page.page_index,
            image_path: image_rel,
            ground_truth_path: gt_rel,
        });
    }
    Ok(records)
}

/// One JSON record per page.
pub fn write_manifest(records: &[PageRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
