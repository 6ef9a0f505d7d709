//! Detection overlays for human review: class-coloured outlines with the
//! score printed above each box.

use image::{DynamicImage, Rgb, RgbImage};

use crate::detections::Detection;
use crate::taxonomy::ClassTaxonomy;

pub const OUTLINE: u32 = 2;
const GLYPH_SCALE: u32 = 2;

pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [0, 0, 128],
];

pub fn class_color(taxonomy: &ClassTaxonomy, class: &str) -> Rgb<u8> {
    let i = taxonomy.index_of(class).unwrap_or(PALETTE.len() - 1);
    Rgb(PALETTE[i % PALETTE.len()])
}

// 3x5 bitmaps, one row per byte, low three bits used
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => return None,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_text(img: &mut RgbImage, text: &str, x: i64, y: i64, color: Rgb<u8>) {
    let s = GLYPH_SCALE as i64;
    for (k, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let gx = x + k as i64 * 4 * s;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    for dy in 0..s {
                        for dx in 0..s {
                            put(img, gx + col * s + dx, y + r as i64 * s + dy, color);
                        }
                    }
                }
            }
        }
    }
}

/// Outline `[x0, x1) x [y0, y1)` with an inward border of `OUTLINE` pixels.
fn draw_outline(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let t = OUTLINE as i64;
    for y in y0..y1 {
        for x in x0..x1 {
            let edge = x < x0 + t || x >= x1 - t || y < y0 + t || y >= y1 - t;
            if edge {
                put(img, x, y, color);
            }
        }
    }
}

/// Draws each detection onto a copy of `image`. Box coordinates must be in
/// the image's pixel frame.
pub fn render_overlay(image: &DynamicImage, detections: &[Detection], taxonomy: &ClassTaxonomy) -> RgbImage {
    let mut out = image.to_rgb8();
    for d in detections {
        let color = class_color(taxonomy, &d.class);
        let x0 = d.bbox.x_min().floor() as i64;
        let y0 = d.bbox.y_min().floor() as i64;
        let x1 = d.bbox.x_max().ceil() as i64;
        let y1 = d.bbox.y_max().ceil() as i64;
        draw_outline(&mut out, x0, y0, x1, y1, color);
        let label = format!("{:.2}", d.score);
        let text_h = 5 * GLYPH_SCALE as i64;
        let ty = if y0 - text_h > 0 { y0 - text_h - 1 } else { y1 + 1 };
        draw_text(&mut out, &label, x0, ty, color);
    }
    out
}
