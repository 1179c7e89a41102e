//! Binary front-view silhouettes and their pooled pyramid descriptor.

use super::NeuralError;
use crate::mesh::{Mesh, Vec3};

pub const SILHOUETTE_SIZE: usize = 64;
/// Cells per side at each pyramid scale.
pub const PYRAMID_CELLS: [usize; 3] = [8, 4, 2];
pub const DESCRIPTOR_DIM: usize = 8 * 8 + 4 * 4 + 2 * 2;
/// Per-node image input: one local cell per scale plus the global descriptor.
pub const IMAGE_FEATURE_DIM: usize = PYRAMID_CELLS.len() + DESCRIPTOR_DIM;

/// Orthographic view window in x and y.
const WINDOW: (f64, f64) = (-0.5, 0.5);

#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteDescriptor {
    size: usize,
    raster: Vec<u8>,
    pyramid: Vec<f64>,
}

fn to_pixel(p: &Vec3, size: usize) -> (f64, f64) {
    let span = WINDOW.1 - WINDOW.0;
    ((p.x - WINDOW.0) / span * size as f64, (WINDOW.1 - p.y) / span * size as f64)
}

impl SilhouetteDescriptor {
    /// Projects along -z onto the view window; a pixel is set when its
    /// centre lies inside (or on the edge of) some projected triangle.
    pub fn rasterize(mesh: &Mesh, size: usize) -> Result<Self, NeuralError> {
        check_size(size)?;
        let mut raster = vec![0u8; size * size];
        for f in 0..mesh.face_count() {
            let [a, b, c] = mesh.triangle(f).map(|p| to_pixel(&p, size));
            let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
            if area == 0.0 {
                continue;
            }
            let lo_x = a.0.min(b.0).min(c.0).floor().max(0.0) as usize;
            let hi_x = (a.0.max(b.0).max(c.0).ceil().max(0.0) as usize).min(size);
            let lo_y = a.1.min(b.1).min(c.1).floor().max(0.0) as usize;
            let hi_y = (a.1.max(b.1).max(c.1).ceil().max(0.0) as usize).min(size);
            let edge = |p: (f64, f64), q: (f64, f64), x: f64, y: f64| ((q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0)) * area.signum();
            for j in lo_y..hi_y {
                for i in lo_x..hi_x {
                    let (x, y) = (i as f64 + 0.5, j as f64 + 0.5);
                    if edge(a, b, x, y) >= 0.0 && edge(b, c, x, y) >= 0.0 && edge(c, a, x, y) >= 0.0 {
                        raster[j * size + i] = 1;
                    }
                }
            }
        }
        Self::from_raster(size, raster)
    }

    pub fn from_raster(size: usize, raster: Vec<u8>) -> Result<Self, NeuralError> {
        check_size(size)?;
        if raster.len() != size * size || raster.iter().any(|&v| v > 1) {
            return Err(NeuralError::Shape(format!("raster of {} values for size {size}", raster.len())));
        }
        let mut pyramid = Vec::with_capacity(DESCRIPTOR_DIM);
        for cells in PYRAMID_CELLS {
            let w = size / cells;
            for cy in 0..cells {
                for cx in 0..cells {
                    let mut on = 0usize;
                    for j in cy * w..(cy + 1) * w {
                        on += raster[j * size + cx * w..j * size + (cx + 1) * w].iter().map(|&v| v as usize).sum::<usize>();
                    }
                    pyramid.push(on as f64 / (w * w) as f64);
                }
            }
        }
        Ok(Self { size, raster, pyramid })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn raster(&self) -> &[u8] {
        &self.raster
    }

    /// The flattened 8x8, 4x4 and 2x2 cell means.
    pub fn pyramid(&self) -> &[f64] {
        &self.pyramid
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.raster.iter().map(|&v| v as f64).sum::<f64>() / self.raster.len() as f64
    }

    /// Pyramid values of the cells a point projects into, one per scale;
    /// points outside the window are clamped to the border cells.
    pub fn cell_features(&self, p: &Vec3) -> [f64; 3] {
        let (u, v) = to_pixel(p, self.size);
        let (u, v) = (u / self.size as f64, v / self.size as f64);
        let mut offset = 0;
        let mut out = [0.0; 3];
        for (k, cells) in PYRAMID_CELLS.into_iter().enumerate() {
            let cx = ((u * cells as f64).floor().max(0.0) as usize).min(cells - 1);
            let cy = ((v * cells as f64).floor().max(0.0) as usize).min(cells - 1);
            out[k] = self.pyramid[offset + cy * cells + cx];
            offset += cells * cells;
        }
        out
    }

    /// [`Self::cell_features`] followed by the whole pyramid.
    pub fn image_feature(&self, p: &Vec3) -> Vec<f64> {
        let mut out = self.cell_features(p).to_vec();
        out.extend_from_slice(&self.pyramid);
        out
    }

    /// Binary PGM, set pixels white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.raster.iter().map(|&v| v * 255));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, NeuralError> {
        let bad = |m: &str| NeuralError::Shape(format!("pgm: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?.to_string());
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary graymap"));
        }
        let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
        if w != h {
            return Err(bad("raster is not square"));
        }
        let data = bytes.get(pos + 1..pos + 1 + w * h).ok_or_else(|| bad("truncated data"))?;
        Self::from_raster(w, data.iter().map(|&v| u8::from(v >= 128)).collect())
    }
}

fn check_size(size: usize) -> Result<(), NeuralError> {
    if size == 0 || !size.is_multiple_of(PYRAMID_CELLS[0]) {
        return Err(NeuralError::Shape(format!("raster size {size} must be a positive multiple of {}", PYRAMID_CELLS[0])));
    }
    Ok(())
}
