//! Annotated output images: class-coloured boxes with a caption strip drawn
//! in an embedded 5x7 bitmap font.

use crate::data::{Image, ObjectClass};
use crate::eval::ScoredDetection;

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

/// Rows of a glyph, most significant of the low five bits on the left.
fn glyph(c: char) -> [u8; GLYPH_H] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '|' => [0x04; GLYPH_H],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        _ => [0x00; GLYPH_H],
    }
}

pub fn class_colour(class: ObjectClass) -> [f32; 3] {
    match class {
        ObjectClass::Bottle => [0.12, 0.47, 0.71],
        ObjectClass::Hairdryer => [1.0, 0.5, 0.05],
        ObjectClass::Iron => [0.17, 0.63, 0.17],
        ObjectClass::Toaster => [0.58, 0.4, 0.74],
        ObjectClass::Mobile => [0.55, 0.34, 0.29],
        ObjectClass::Laptop => [0.09, 0.75, 0.81],
    }
}

/// Nearest-neighbour enlargement by an integer factor.
pub fn upscale(image: &Image, factor: usize) -> Image {
    let factor = factor.max(1);
    let (h, w) = (image.height() * factor, image.width() * factor);
    let mut out = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(y, x, image.pixel(y / factor, x / factor));
        }
    }
    out
}

fn put(image: &mut Image, y: isize, x: isize, rgb: [f32; 3]) {
    if y >= 0 && x >= 0 && (y as usize) < image.height() && (x as usize) < image.width() {
        image.set_pixel(y as usize, x as usize, rgb);
    }
}

fn fill_rect(image: &mut Image, (x0, y0, x1, y1): (isize, isize, isize, isize), rgb: [f32; 3]) {
    for y in y0..y1 {
        for x in x0..x1 {
            put(image, y, x, rgb);
        }
    }
}

/// Rectangle outline `thickness` pixels wide, growing inwards.
pub fn draw_box(image: &mut Image, (x0, y0, x1, y1): (isize, isize, isize, isize), thickness: isize, rgb: [f32; 3]) {
    fill_rect(image, (x0, y0, x1, y0 + thickness), rgb);
    fill_rect(image, (x0, y1 - thickness, x1, y1), rgb);
    fill_rect(image, (x0, y0, x0 + thickness, y1), rgb);
    fill_rect(image, (x1 - thickness, y0, x1, y1), rgb);
}

/// Pixel size of `text` at font `scale`.
pub fn text_size(text: &str, scale: usize) -> (usize, usize) {
    let n = text.chars().count();
    ((n * (GLYPH_W + 1)).saturating_sub(1) * scale, GLYPH_H * scale)
}

pub fn draw_text(image: &mut Image, text: &str, (x, y): (isize, isize), scale: usize, rgb: [f32; 3]) {
    let s = scale as isize;
    for (i, c) in text.chars().enumerate() {
        let gx = x + (i * (GLYPH_W + 1)) as isize * s;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - col)) != 0 {
                    let (px, py) = (gx + col as isize * s, y + row as isize * s);
                    fill_rect(image, (px, py, px + s, py + s), rgb);
                }
            }
        }
    }
}

/// `"<class> <score> | <anomaly|benign> <score>"`.
pub fn caption(d: &ScoredDetection) -> String {
    format!(
        "{} {:.2} | {} {:.2}",
        d.detection.object_class.name(),
        d.detection.score,
        d.anomaly,
        d.anomaly_score
    )
}

/// Enlarges the scene by `scale` and draws every detection on it.
pub fn annotate(image: &Image, detections: &[ScoredDetection], scale: usize) -> Image {
    let scale = scale.max(1);
    let mut out = upscale(image, scale);
    let font = (scale / 2).max(1);
    let f = scale as f64;
    for d in detections {
        let b = d.detection.bbox;
        let rect = (
            (b.x_min * f).floor() as isize,
            (b.y_min * f).floor() as isize,
            (b.x_max * f).ceil() as isize,
            (b.y_max * f).ceil() as isize,
        );
        let colour = class_colour(d.detection.object_class);
        draw_box(&mut out, rect, font as isize + 1, colour);
        let text = caption(d);
        let (tw, th) = text_size(&text, font);
        let pad = font as isize;
        let strip_h = th as isize + 2 * pad;
        // Above the box when it fits, otherwise just inside its top edge.
        let top = if rect.1 - strip_h >= 0 { rect.1 - strip_h } else { rect.1 };
        let left = rect.0.min(out.width() as isize - tw as isize - 2 * pad).max(0);
        fill_rect(&mut out, (left, top, left + tw as isize + 2 * pad, top + strip_h), colour);
        draw_text(&mut out, &text, (left + pad, top + pad), font, [1.0; 3]);
    }
    out
}
