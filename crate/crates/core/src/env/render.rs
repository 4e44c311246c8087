//! Pixel rendering of symbolic states.
//!
//! Each cell is drawn at a base resolution of 8x8 and scaled by
//! `cell_px / 8`. Inside a cell the 7x7 interior has three layers: the outer
//! ring marks the agent, the second ring a receptacle (or a door frame) and
//! the 3x3 center the object glyph. Pixel row 0 doubles as a status strip
//! showing sub-task progress and the held object.

use std::io::Write;
use std::path::Path;

use super::{Color, GridState, ObjectKind, Pos, ReceptacleKind};

const BASE: usize = 8;

const FLOOR: [u8; 3] = [0, 0, 0];
const GRID: [u8; 3] = [40, 40, 40];
const AGENT: [u8; 3] = [255, 255, 255];
const TABLE: [u8; 3] = [140, 90, 40];
const BIN: [u8; 3] = [140, 140, 140];
const PROGRESS: [u8; 3] = [0, 200, 0];

fn color_rgb(c: Color) -> [u8; 3] {
    match c {
        Color::Red => [220, 40, 40],
        Color::Green => [40, 200, 60],
        Color::Blue => [50, 90, 230],
        Color::Yellow => [230, 210, 40],
    }
}

fn glyph(kind: ObjectKind, open: bool) -> [u8; 9] {
    match kind {
        ObjectKind::Key => [0, 1, 0, 0, 1, 0, 0, 1, 1],
        ObjectKind::Ball => [0, 1, 0, 1, 1, 1, 0, 1, 0],
        ObjectKind::Box => [1, 1, 1, 1, 0, 1, 1, 1, 1],
        ObjectKind::Door if open => [1, 0, 1, 0, 0, 0, 1, 0, 1],
        ObjectKind::Door => [1; 9],
    }
}

/// Row-major RGB8 image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&fill);
        }
        RgbImage { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.data[i..i + 3].copy_from_slice(&rgb);
        }
    }

    pub fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, rgb: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, rgb);
            }
        }
    }

    /// Copies `src` with its top-left corner at `(x, y)`.
    pub fn blit(&mut self, src: &RgbImage, x: usize, y: usize) {
        for sy in 0..src.height {
            for sx in 0..src.width {
                self.set(x + sx, y + sy, src.get(sx, sy));
            }
        }
    }

    /// Nearest-neighbour upscaling by an integer factor.
    pub fn scaled(&self, factor: usize) -> RgbImage {
        if factor <= 1 {
            return self.clone();
        }
        let mut out = RgbImage::new(self.width * factor, self.height * factor, FLOOR);
        for y in 0..out.height {
            for x in 0..out.width {
                out.set(x, y, self.get(x / factor, y / factor));
            }
        }
        out
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().expect("in-memory PNG header");
            writer.write_image_data(&self.data).expect("in-memory PNG data");
        }
        buf
    }

    pub fn save_png(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_png())
    }
}

fn ring(img: &mut RgbImage, ox: usize, oy: usize, inset: usize, rgb: [u8; 3]) {
    let lo = 1 + inset;
    let hi = BASE - 1 - inset;
    for i in lo..=hi {
        img.set(ox + i, oy + lo, rgb);
        img.set(ox + i, oy + hi, rgb);
        img.set(ox + lo, oy + i, rgb);
        img.set(ox + hi, oy + i, rgb);
    }
}

/// Renders a state at `cell_px` pixels per cell (a multiple of 8).
pub fn render(state: &GridState, cell_px: u32) -> RgbImage {
    let (w, h) = (state.width as usize, state.height as usize);
    let mut img = RgbImage::new(w * BASE, h * BASE, FLOOR);
    for cy in 0..h {
        for cx in 0..w {
            let (ox, oy) = (cx * BASE, cy * BASE);
            for i in 0..BASE {
                img.set(ox + i, oy, GRID);
                img.set(ox, oy + i, GRID);
            }
            let p = Pos::new(cx as i32, cy as i32);
            if state.agent == p {
                ring(&mut img, ox, oy, 0, AGENT);
            }
            if let Some(r) = state.receptacle_at(p) {
                let rgb = match r.kind {
                    ReceptacleKind::Table => TABLE,
                    ReceptacleKind::Bin => BIN,
                };
                ring(&mut img, ox, oy, 1, rgb);
            }
            if let Some(o) = state.object_at(p) {
                let rgb = color_rgb(o.color);
                if o.kind == ObjectKind::Door {
                    ring(&mut img, ox, oy, 1, rgb);
                }
                let g = glyph(o.kind, o.open);
                for (i, &on) in g.iter().enumerate() {
                    if on == 1 {
                        img.set(ox + 3 + i % 3, oy + 3 + i / 3, rgb);
                    }
                }
            }
        }
    }

    // status strip
    for k in 0..state.completed as usize {
        img.set(2 + 2 * k, 0, PROGRESS);
    }
    // progress record as 7 bits of (closest + 1) down the left edge
    if let Some(d) = state.closest {
        for bit in 0..7 {
            if (d + 1) >> bit & 1 == 1 {
                img.set(0, 2 + 2 * bit, PROGRESS);
            }
        }
    }
    if let Some(o) = state.inventory.and_then(|id| state.object(id)) {
        let rgb = color_rgb(o.color);
        for x in 16..19 {
            img.set(x, 0, rgb);
        }
        let kind_slot = ObjectKind::ALL.iter().position(|&k| k == o.kind).unwrap_or(0);
        img.set(20 + kind_slot, 0, AGENT);
    }

    img.scaled(cell_px as usize / BASE)
}
