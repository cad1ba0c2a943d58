//! Draws detection boxes with a small class/score tag on an RGB image.

use image::{Rgb, RgbImage};

use crate::dataset::ClassCatalog;
use crate::detect::Detection;

/// Outline thickness in pixels, drawn inside the box.
pub const LINE_WIDTH: u32 = 2;
/// Height of the label tag: 5-pixel glyphs with one pixel of padding above and below.
pub const TAG_HEIGHT: u32 = 7;
/// Horizontal advance per glyph (3 pixels plus 1 spacing).
pub const GLYPH_ADVANCE: u32 = 4;

const PALETTE: [[u8; 3]; 9] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

pub fn class_color(class_id: usize) -> [u8; 3] {
    PALETTE[class_id % PALETTE.len()]
}

/// Rows of a 3x5 glyph, most significant of the three bits on the left.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_lowercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'a' => [2, 5, 7, 5, 5],
        'b' => [6, 5, 6, 5, 6],
        'c' => [3, 4, 4, 4, 3],
        'd' => [6, 5, 5, 5, 6],
        'e' => [7, 4, 6, 4, 7],
        'f' => [7, 4, 6, 4, 4],
        'g' => [3, 4, 5, 5, 3],
        'h' => [5, 5, 7, 5, 5],
        'i' => [7, 2, 2, 2, 7],
        'j' => [1, 1, 1, 5, 2],
        'k' => [5, 5, 6, 5, 5],
        'l' => [4, 4, 4, 4, 7],
        'm' => [5, 7, 7, 5, 5],
        'n' => [6, 5, 5, 5, 5],
        'o' => [2, 5, 5, 5, 2],
        'p' => [6, 5, 6, 4, 4],
        'q' => [2, 5, 5, 6, 3],
        'r' => [6, 5, 6, 5, 5],
        's' => [3, 4, 2, 1, 6],
        't' => [7, 2, 2, 2, 2],
        'u' => [5, 5, 5, 5, 7],
        'v' => [5, 5, 5, 5, 2],
        'w' => [5, 5, 7, 7, 5],
        'x' => [5, 5, 2, 5, 5],
        'y' => [5, 5, 2, 2, 2],
        'z' => [7, 1, 2, 4, 7],
        '_' => [0, 0, 0, 0, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        ' ' => [0; 5],
        _ => [7, 1, 2, 0, 2],
    }
}

/// Tag text, e.g. `nut 0.87`.
pub fn label_text(det: &Detection, catalog: &ClassCatalog) -> String {
    let name = catalog.name(det.class_id).map(str::to_string).unwrap_or_else(|| format!("class{}", det.class_id));
    format!("{name} {:.2}", det.score)
}

/// Width of the tag holding `text`.
pub fn tag_width(text: &str) -> u32 {
    GLYPH_ADVANCE * text.chars().count() as u32 + 1
}

/// Integer pixel rectangle `[x0, x1) x [y0, y1)` covered by a box, clipped to the image.
pub fn pixel_rect(det: &Detection, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
    let b = det.bbox.clip(width as f64, height as f64);
    let x0 = b.x_min.floor().max(0.0) as u32;
    let y0 = b.y_min.floor().max(0.0) as u32;
    let x1 = (b.x_max.ceil() as u32).min(width);
    let y1 = (b.y_max.ceil() as u32).min(height);
    (x1 > x0 && y1 > y0).then_some((x0, y0, x1, y1))
}

/// Top row of the tag: above the box when there is room, else just inside its top edge.
pub fn tag_top(box_y0: u32) -> u32 {
    box_y0.checked_sub(TAG_HEIGHT).unwrap_or(box_y0)
}

/// Returns a copy of `img` with every detection drawn. Boxes are clipped to the image.
pub fn draw_detections(img: &RgbImage, detections: &[Detection], catalog: &ClassCatalog) -> RgbImage {
    let mut out = img.clone();
    let (w, h) = out.dimensions();
    for det in detections {
        let Some((x0, y0, x1, y1)) = pixel_rect(det, w, h) else {
            continue;
        };
        let color = Rgb(class_color(det.class_id));
        for y in y0..y1 {
            for x in x0..x1 {
                let edge = x - x0 < LINE_WIDTH || x1 - 1 - x < LINE_WIDTH || y - y0 < LINE_WIDTH || y1 - 1 - y < LINE_WIDTH;
                if edge {
                    out.put_pixel(x, y, color);
                }
            }
        }
        let text = label_text(det, catalog);
        let ty = tag_top(y0);
        let tx1 = (x0 + tag_width(&text)).min(w);
        let ty1 = (ty + TAG_HEIGHT).min(h);
        for y in ty..ty1 {
            for x in x0..tx1 {
                out.put_pixel(x, y, color);
            }
        }
        let [r, g, b] = color.0;
        let luma = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
        let ink = if luma > 128.0 { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) };
        for (i, ch) in text.chars().enumerate() {
            let gx = x0 + 1 + GLYPH_ADVANCE * i as u32;
            for (row, bits) in glyph(ch).iter().enumerate() {
                for col in 0..3u32 {
                    if bits & (4 >> col) != 0 {
                        let (px, py) = (gx + col, ty + 1 + row as u32);
                        if px < tx1 && py < ty1 {
                            out.put_pixel(px, py, ink);
                        }
                    }
                }
            }
        }
    }
    out
}
