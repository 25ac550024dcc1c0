//! Qualitative comparison mosaics: labeled `GT | INPUT | OUTPUT` panels.
//!
//! Layout: a 12-pixel header strip carries the column labels; below it one
//! row per sample. With pad = 2 the canvas is
//! `(3*W + 4*pad)` x `(header + rows*H + (rows+1)*pad)` pixels.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::ImageTensor;

pub(crate) const GRID_PAD: usize = 2;
pub(crate) const GRID_HEADER: usize = 12;

/// 5x7 glyphs for the header labels, one row byte per scanline.
fn glyph(ch: char) -> Option<[u8; 7]> {
    Some(match ch {
        'G' => [
            0b01110, 0b10001, 0b10000, 0b10110, 0b10001, 0b10001, 0b01110,
        ],
        'T' => [
            0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100,
        ],
        'I' => [
            0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b11111,
        ],
        'N' => [
            0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001, 0b10001,
        ],
        'P' => [
            0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000,
        ],
        'U' => [
            0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110,
        ],
        'O' => [
            0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110,
        ],
        _ => return None,
    })
}

fn draw_text(canvas: &mut ImageBuffer<Rgb<u8>, Vec<u8>>, x0: usize, y0: usize, text: &str) {
    let mut x = x0;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (dy, bits) in rows.iter().enumerate() {
                for dx in 0..5 {
                    if bits & (1 << (4 - dx)) != 0 {
                        let (px, py) = ((x + dx) as u32, (y0 + dy) as u32);
                        if px < canvas.width() && py < canvas.height() {
                            canvas.put_pixel(px, py, Rgb([20, 20, 20]));
                        }
                    }
                }
            }
        }
        x += 6;
    }
}

fn blit(canvas: &mut ImageBuffer<Rgb<u8>, Vec<u8>>, img: &ImageTensor, x0: usize, y0: usize) {
    let (h, w, c) = img.dims();
    for y in 0..h {
        for x in 0..w {
            let px =
                |ch: usize| (img.get(y, x, ch.min(c - 1)).clamp(0.0, 1.0) * 255.0).round() as u8;
            canvas.put_pixel((x0 + x) as u32, (y0 + y) as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
}

/// Expected canvas size for a sample count and image shape.
pub fn grid_dimensions(rows: usize, height: usize, width: usize) -> (usize, usize) {
    (
        3 * width + 4 * GRID_PAD,
        GRID_HEADER + rows * height + (rows + 1) * GRID_PAD,
    )
}

/// Writes a labeled mosaic with one row per sample and columns
/// `GT | INPUT | OUTPUT`. Rejects empty input and mismatched lists.
pub fn emit_grid(pairs: &[PairedSample], outputs: &[ImageTensor], path: &Path) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Config("emit_grid needs at least one sample".into()));
    }
    if pairs.len() != outputs.len() {
        return Err(Error::Config(format!(
            "emit_grid: {} samples but {} outputs",
            pairs.len(),
            outputs.len()
        )));
    }
    let (h, w, _) = pairs[0].clean.dims();
    for (pair, out) in pairs.iter().zip(outputs) {
        if pair.clean.dims() != (pairs[0].clean.dims()) || out.dims() != pairs[0].clean.dims() {
            return Err(Error::shape(
                "emit_grid",
                format!("{:?}", pairs[0].clean.dims()),
                format!("{:?} for sample {}", out.dims(), pair.sample_id),
            ));
        }
    }
    let (cw, chh) = grid_dimensions(pairs.len(), h, w);
    let mut canvas = ImageBuffer::from_pixel(cw as u32, chh as u32, Rgb([235, 235, 235]));

    for (col, label) in ["GT", "INPUT", "OUTPUT"].iter().enumerate() {
        let x0 = GRID_PAD + col * (w + GRID_PAD) + w / 2 - label.len() * 3;
        draw_text(&mut canvas, x0, 2, label);
    }
    for (row, (pair, out)) in pairs.iter().zip(outputs).enumerate() {
        let y0 = GRID_HEADER + GRID_PAD + row * (h + GRID_PAD);
        blit(&mut canvas, &pair.clean, GRID_PAD, y0);
        blit(&mut canvas, &pair.degraded, 2 * GRID_PAD + w, y0);
        blit(&mut canvas, out, 3 * GRID_PAD + 2 * w, y0);
    }
    canvas.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}
