//! Image grids: tiles separated by 2px white gutters under a label strip.
//!
//! For `rows × cols` tiles of side `R` the PNG is
//! `(cols·R + (cols+1)·2)` wide and `(LABEL_STRIP + rows·R + (rows+1)·2)` tall.
//! Column labels are drawn in a 3×5 pixel font at the top of each column.

use std::path::Path;

use image::{Rgb, RgbImage};
use pti_core::ImageTensor;

use crate::error::{HarnessError, Result};

pub const SEPARATOR: u32 = 2;
pub const LABEL_STRIP: u32 = 9;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([0, 0, 0]);

/// 3×5 glyphs, one 3-bit row per entry, top row first.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'J' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'K' => [0b101, 0b101, 0b110, 0b101, 0b101],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'Q' => [0b010, 0b101, 0b101, 0b110, 0b011],
        'R' => [0b110, 0b101, 0b110, 0b101, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'Z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        '3' => [0b110, 0b001, 0b010, 0b001, 0b110],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b110, 0b001, 0b110],
        '6' => [0b011, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b110],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '_' => [0b000, 0b000, 0b000, 0b000, 0b111],
        '=' => [0b000, 0b111, 0b000, 0b111, 0b000],
        _ => [0; 5],
    }
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, max_width: u32, text: &str) {
    for (i, c) in text.chars().enumerate() {
        let gx = x0 + 4 * i as u32;
        if gx + 3 > x0 + max_width {
            break;
        }
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    img.put_pixel(gx + col, y0 + row as u32, INK);
                }
            }
        }
    }
}

/// Lays out `images[row][col]` with one label per column.
pub fn render_grid(images: &[Vec<ImageTensor>], labels: &[&str]) -> Result<RgbImage> {
    let cols = images.first().map_or(0, Vec::len);
    if images.is_empty() || cols == 0 {
        return Err(HarnessError::Config("grid needs at least one image".into()));
    }
    if images.iter().any(|r| r.len() != cols) {
        return Err(HarnessError::Config("ragged image grid".into()));
    }
    if labels.len() != cols {
        return Err(HarnessError::Config(format!("{} labels for {cols} columns", labels.len())));
    }
    let r = images[0][0].resolution() as u32;
    if images.iter().flatten().any(|im| im.resolution() as u32 != r) {
        return Err(HarnessError::Config("grid images differ in resolution".into()));
    }
    let rows = images.len() as u32;
    let cols = cols as u32;
    let width = cols * r + (cols + 1) * SEPARATOR;
    let height = LABEL_STRIP + rows * r + (rows + 1) * SEPARATOR;
    let mut out = RgbImage::from_pixel(width, height, WHITE);
    for (c, label) in labels.iter().enumerate() {
        let x = SEPARATOR + c as u32 * (r + SEPARATOR);
        draw_text(&mut out, x, 2, r, label);
    }
    for (ri, row) in images.iter().enumerate() {
        for (ci, im) in row.iter().enumerate() {
            let x0 = SEPARATOR + ci as u32 * (r + SEPARATOR);
            let y0 = LABEL_STRIP + SEPARATOR + ri as u32 * (r + SEPARATOR);
            image::imageops::replace(&mut out, &im.to_rgb8(), x0 as i64, y0 as i64);
        }
    }
    Ok(out)
}

pub fn emit_grid(images: &[Vec<ImageTensor>], labels: &[&str], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    render_grid(images, labels)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(r: usize, v: f32) -> ImageTensor {
        let pixels = (0..r * r * 3).map(|i| ((i % 7) as f32 / 7.0 + v).fract()).collect();
        ImageTensor::new(r, pixels).unwrap()
    }

    #[test]
    fn single_tile_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let im = tile(64, 0.1);
        emit_grid(&[vec![im.clone()]], &["x"], &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        let crop = image::imageops::crop_imm(&back, SEPARATOR, LABEL_STRIP + SEPARATOR, 64, 64).to_image();
        assert_eq!(crop, im.to_rgb8());
    }

    #[test]
    fn dimensions_follow_the_layout() {
        let rows = vec![vec![tile(64, 0.0), tile(64, 0.2), tile(64, 0.4)]; 2];
        let g = render_grid(&rows, &["orig", "w+", "pti"]).unwrap();
        assert_eq!(g.width(), 3 * 64 + 4 * 2);
        assert_eq!(g.height(), 2 * 64 + 3 * 2 + LABEL_STRIP);
    }

    #[test]
    fn output_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![vec![tile(32, 0.3), tile(32, 0.6)]];
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        emit_grid(&rows, &["A", "B"], &a).unwrap();
        emit_grid(&rows, &["A", "B"], &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn ragged_input_is_rejected() {
        let rows = vec![vec![tile(32, 0.0), tile(32, 0.0)], vec![tile(32, 0.0)]];
        assert!(render_grid(&rows, &["a", "b"]).is_err());
        assert!(render_grid(&[], &[]).is_err());
    }
}
