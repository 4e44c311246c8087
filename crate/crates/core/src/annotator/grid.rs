//! Tiling a window's frames into one stamped image.

use serde::{Deserialize, Serialize};

use super::AnnotatorError;
use crate::env::RgbImage;

const GUTTER: usize = 2;
const BACKGROUND: [u8; 3] = [96, 96, 96];
const STAMP_BG: [u8; 3] = [0, 0, 0];
const STAMP_FG: [u8; 3] = [255, 255, 0];

/// 3x5 bitmap digits, one row per byte (low 3 bits, MSB = left pixel).
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridLayout {
    pub columns: usize,
    pub max_rows: usize,
}

impl Default for GridLayout {
    fn default() -> Self {
        GridLayout { columns: 3, max_rows: 3 }
    }
}

impl GridLayout {
    pub fn capacity(&self) -> usize {
        self.columns * self.max_rows
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridImage {
    pub image: RgbImage,
    pub rows: usize,
    pub cols: usize,
    pub index_labels: Vec<usize>,
}

/// Stamps `n` in the bottom-right corner of a tile at `(x0, y0)`.
fn stamp(img: &mut RgbImage, x0: usize, y0: usize, tile_w: usize, tile_h: usize, n: usize) {
    let digits: Vec<usize> = n.to_string().bytes().map(|b| (b - b'0') as usize).collect();
    let scale = (tile_w / 64).max(1);
    let text_w = (digits.len() * 4 - 1) * scale;
    let text_h = 5 * scale;
    let bx = x0 + tile_w - text_w - 2 * scale;
    let by = y0 + tile_h - text_h - 2 * scale;
    img.fill_rect(bx - scale, by - scale, text_w + 2 * scale, text_h + 2 * scale, STAMP_BG);
    for (k, &d) in digits.iter().enumerate() {
        let dx = bx + k * 4 * scale;
        for (row, bits) in DIGITS[d].iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    img.fill_rect(dx + col * scale, by + row * scale, scale, scale, STAMP_FG);
                }
            }
        }
    }
}

/// Tiles frames row-major, `layout.columns` per row, each stamped with its
/// 0-based temporal index. All frames must share one size.
pub fn compose_tiles(tiles: &[RgbImage], layout: &GridLayout) -> Result<GridImage, AnnotatorError> {
    if tiles.is_empty() {
        return Err(AnnotatorError::Layout("no frames to compose".into()));
    }
    if tiles.len() > layout.capacity() {
        return Err(AnnotatorError::Layout(format!(
            "{} frames exceed the {}x{} grid",
            tiles.len(),
            layout.max_rows,
            layout.columns
        )));
    }
    let (tw, th) = (tiles[0].width, tiles[0].height);
    if tiles.iter().any(|t| t.width != tw || t.height != th) {
        return Err(AnnotatorError::Layout("frames differ in size".into()));
    }
    let cols = layout.columns.min(tiles.len());
    let rows = tiles.len().div_ceil(layout.columns);
    let width = cols * tw + (cols + 1) * GUTTER;
    let height = rows * th + (rows + 1) * GUTTER;
    let mut image = RgbImage::new(width, height, BACKGROUND);
    for (i, tile) in tiles.iter().enumerate() {
        let x = GUTTER + (i % layout.columns) * (tw + GUTTER);
        let y = GUTTER + (i / layout.columns) * (th + GUTTER);
        image.blit(tile, x, y);
        stamp(&mut image, x, y, tw, th, i);
    }
    Ok(GridImage { image, rows, cols, index_labels: (0..tiles.len()).collect() })
}
