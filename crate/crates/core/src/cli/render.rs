//! Binary PPM (P6) image grids for CAM and attack dumps.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, rgb: vec![0; width * height * 3] }
    }

    pub fn put(&mut self, y: usize, x: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Blue → green → red ramp over `[0, 1]`.
pub fn heat(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (2.0 * v - 1.0).max(0.0);
    let b = (1.0 - 2.0 * v).max(0.0);
    [byte(r), byte(1.0 - r - b), byte(b)]
}

/// Red for positive, blue for negative, black at zero; `v` in `[-1, 1]`.
pub fn diverging(v: f64) -> [u8; 3] {
    [byte(v), 0, byte(-v)]
}

/// Grayscale `h×w` frame, each pixel drawn as a `scale×scale` block.
pub fn gray(frame: &[f32], h: usize, w: usize, scale: usize) -> Image {
    colored(h, w, scale, |y, x| {
        let g = byte(frame[y * w + x] as f64);
        [g, g, g]
    })
}

/// Any per-pixel colouring of an `h×w` grid, upsampled by `scale`.
pub fn colored(h: usize, w: usize, scale: usize, color: impl Fn(usize, usize) -> [u8; 3]) -> Image {
    let mut img = Image::new(w * scale, h * scale);
    for y in 0..h * scale {
        for x in 0..w * scale {
            img.put(y, x, color(y / scale, x / scale));
        }
    }
    img
}

/// Blends a `mh×mw` map in `[0, 1]` over an `h×w` frame. The map is
/// upsampled to frame resolution by nearest neighbour.
pub fn overlay(frame: &[f32], h: usize, w: usize, map: &[f64], mh: usize, mw: usize, alpha: f64, scale: usize) -> Image {
    colored(h, w, scale, |y, x| {
        let m = map[(y * mh / h) * mw + x * mw / w];
        let g = frame[y * w + x] as f64;
        let c = heat(m);
        let mut out = [0u8; 3];
        for k in 0..3 {
            out[k] = byte((1.0 - alpha) * g + alpha * c[k] as f64 / 255.0);
        }
        out
    })
}

/// Tiles equally sized images row by row with `pad` white pixels between.
pub fn grid(rows: &[Vec<Image>], pad: usize) -> Result<Image> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::Domain("empty image grid".into()))?;
    let (tw, th) = (first.width, first.height);
    if rows.iter().flatten().any(|t| t.width != tw || t.height != th) {
        return Err(Error::Shape("grid tiles differ in size".into()));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * tw + (cols + 1) * pad;
    let height = rows.len() * th + (rows.len() + 1) * pad;
    let mut img = Image { width, height, rgb: vec![255; width * height * 3] };
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let (oy, ox) = (pad + r * (th + pad), pad + c * (tw + pad));
            for y in 0..th {
                for x in 0..tw {
                    img.put(oy + y, ox + x, tile.get(y, x));
                }
            }
        }
    }
    Ok(img)
}
