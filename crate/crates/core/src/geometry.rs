//! Pixel boxes and the pixel <-> feature-grid mapping.
//!
//! Grid cell `(h, w)` covers the pixel rectangle `[w*sw, (w+1)*sw) x [h*sh, (h+1)*sh)`
//! with `sw = image_width / W` and `sh = image_height / H`. A cell belongs to a box
//! when its center lies inside the box.

use serde::{Deserialize, Serialize};

use crate::error::{CsrError, Result};

/// Axis-aligned pixel box, inclusive on `(x1, y1)` and exclusive on `(x2, y2)`.
/// Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct PixelBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl From<[u32; 4]> for PixelBox {
    fn from([x1, y1, x2, y2]: [u32; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<PixelBox> for [u32; 4] {
    fn from(b: PixelBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl PixelBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Checks `x1 < x2 <= width` and `y1 < y2 <= height`.
    pub fn validate(&self, image: ImageSize) -> std::result::Result<(), String> {
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(format!("degenerate box [{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2));
        }
        if self.x2 > image.width || self.y2 > image.height {
            return Err(format!(
                "box [{}, {}, {}, {}] exceeds image {}x{}",
                self.x1, self.y1, self.x2, self.y2, image.width, image.height
            ));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 as f64 && x < self.x2 as f64 && y >= self.y1 as f64 && y < self.y2 as f64
    }
}

/// Image size in pixels, serialized as `[width, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl From<[u32; 2]> for ImageSize {
    fn from([width, height]: [u32; 2]) -> Self {
        Self { width, height }
    }
}

impl From<ImageSize> for [u32; 2] {
    fn from(s: ImageSize) -> Self {
        [s.width, s.height]
    }
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }
}

/// Maps between a `H x W` feature grid and the pixel frame of its image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub grid_height: usize,
    pub grid_width: usize,
    pub image: ImageSize,
}

impl GridGeometry {
    pub fn new(grid_height: usize, grid_width: usize, image: ImageSize) -> Result<Self> {
        if grid_height == 0 || grid_width == 0 || image.width == 0 || image.height == 0 {
            return Err(CsrError::Domain(format!(
                "degenerate geometry: grid {grid_height}x{grid_width}, image {}x{}",
                image.width, image.height
            )));
        }
        Ok(Self { grid_height, grid_width, image })
    }

    fn cell_size(&self) -> (f64, f64) {
        (self.image.width as f64 / self.grid_width as f64, self.image.height as f64 / self.grid_height as f64)
    }

    /// Pixel coordinates `(x, y)` of the center of cell `(h, w)`.
    pub fn cell_center(&self, h: usize, w: usize) -> (f64, f64) {
        let (sw, sh) = self.cell_size();
        ((w as f64 + 0.5) * sw, (h as f64 + 0.5) * sh)
    }

    pub fn cell_in_box(&self, h: usize, w: usize, b: &PixelBox) -> bool {
        let (x, y) = self.cell_center(h, w);
        b.contains(x, y)
    }

    /// Pixel box covering the cell block `rows [h0, h0+bh) x cols [w0, w0+bw)`.
    pub fn block_box(&self, h0: usize, w0: usize, bh: usize, bw: usize) -> PixelBox {
        let (sw, sh) = self.cell_size();
        PixelBox {
            x1: (w0 as f64 * sw).floor() as u32,
            y1: (h0 as f64 * sh).floor() as u32,
            x2: ((w0 + bw) as f64 * sw).ceil() as u32,
            y2: ((h0 + bh) as f64 * sh).ceil() as u32,
        }
    }
}
