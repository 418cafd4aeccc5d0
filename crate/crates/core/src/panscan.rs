//! Pan & Scan: split an image into equal crops, resize them to the encoder
//! resolution, and average-pool patch embeddings to a fixed token count.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Matrix;

pub const TARGET_SIDE: usize = 896;
pub const DEFAULT_MAX_CROPS: usize = 4;
pub const ASPECT_THRESHOLD: f64 = 1.2;
/// Side of the pooled token grid (16 × 16 = 256 vectors).
pub const POOLED_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanScanConfig {
    pub target: usize,
    pub max_crops: usize,
    pub aspect_threshold: f64,
    pub enabled: bool,
}

impl Default for PanScanConfig {
    fn default() -> Self {
        PanScanConfig {
            target: TARGET_SIDE,
            max_crops: DEFAULT_MAX_CROPS,
            aspect_threshold: ASPECT_THRESHOLD,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn intersects(&self, o: &Rect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropPlan {
    pub image_w: usize,
    pub image_h: usize,
    /// Crop counts along x and y.
    pub grid: (usize, usize),
    /// Row-major crops.
    pub crops: Vec<Rect>,
    pub applied: bool,
}

/// Splits `n` into `parts` sizes that differ by at most one, larger first.
fn partition(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let (base, extra) = (n / parts, n % parts);
    let mut at = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let start = at;
            at += len;
            (start, len)
        })
        .collect()
}

fn grid_for(w: usize, h: usize, side: usize) -> (usize, usize) {
    (w.div_ceil(side), h.div_ceil(side))
}

/// Plans the crops for a `w × h` image.
///
/// Images that are close to square and no larger than the target keep a
/// single full-image crop. Otherwise the crop side starts at the target and
/// grows until the grid fits in `max_crops`; both axes are then partitioned
/// into near-equal integer spans.
pub fn plan_crops(w: usize, h: usize, cfg: &PanScanConfig) -> Result<CropPlan> {
    if w == 0 || h == 0 || cfg.max_crops == 0 || cfg.target == 0 {
        return shape_err(format!(
            "plan_crops: {w}x{h} image, target {}, max_crops {}",
            cfg.target, cfg.max_crops
        ));
    }
    let (long, short) = (w.max(h), w.min(h));
    let aspect = long as f64 / short as f64;
    if !cfg.enabled || (aspect <= cfg.aspect_threshold && long <= cfg.target) {
        return Ok(CropPlan {
            image_w: w,
            image_h: h,
            grid: (1, 1),
            crops: vec![Rect { x: 0, y: 0, w, h }],
            applied: false,
        });
    }
    let fits = |side: usize| {
        let (nx, ny) = grid_for(w, h, side);
        nx * ny <= cfg.max_crops
    };
    // The crop count is non-increasing in the side, and side = long gives 1.
    let (mut lo, mut hi) = (cfg.target.min(long), long);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let (nx, ny) = grid_for(w, h, lo);
    let xs = partition(w, nx);
    let ys = partition(h, ny);
    let mut crops = Vec::with_capacity(nx * ny);
    for &(y, ch) in &ys {
        for &(x, cw) in &xs {
            crops.push(Rect { x, y, w: cw, h: ch });
        }
    }
    Ok(CropPlan {
        image_w: w,
        image_h: h,
        grid: (nx, ny),
        crops,
        applied: true,
    })
}

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return shape_err(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            ));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RgbImage { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, r: &Rect) -> Result<RgbImage> {
        if r.x + r.w > self.width || r.y + r.h > self.height {
            return shape_err(format!(
                "crop {r:?} outside {}x{} image",
                self.width, self.height
            ));
        }
        Ok(RgbImage::from_fn(r.w, r.h, |x, y| self.pixel(r.x + x, r.y + y)))
    }
}

/// Source coordinate and blend weight for output index `i`, half-pixel centers.
fn sample_axis(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize. Same-size input is returned unchanged.
pub fn resize_bilinear(img: &RgbImage, tw: usize, th: usize) -> RgbImage {
    if (img.width, img.height) == (tw, th) {
        return img.clone();
    }
    let cols: Vec<_> = (0..tw).map(|x| sample_axis(x, img.width, tw)).collect();
    let rows: Vec<_> = (0..th).map(|y| sample_axis(y, img.height, th)).collect();
    RgbImage::from_fn(tw, th, |x, y| {
        let (x0, x1, fx) = cols[x];
        let (y0, y1, fy) = rows[y];
        let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
            let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
            out[ch] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
        }
        out
    })
}

/// Cuts every planned crop and resizes it to `target × target`.
pub fn extract_and_resize(img: &RgbImage, plan: &CropPlan, target: usize) -> Result<Vec<RgbImage>> {
    if (img.width, img.height) != (plan.image_w, plan.image_h) {
        return shape_err(format!(
            "image is {}x{}, plan is for {}x{}",
            img.width, img.height, plan.image_w, plan.image_h
        ));
    }
    plan.crops
        .iter()
        .map(|r| Ok(resize_bilinear(&img.crop(r)?, target, target)))
        .collect()
}

/// Average-pools a `g × g` grid of embeddings (rows in row-major grid order)
/// down to `out × out` by non-overlapping `(g/out) × (g/out)` blocks.
pub fn pool_embeddings(grid: &Matrix, out: usize) -> Result<Matrix> {
    let g = (grid.rows() as f64).sqrt().round() as usize;
    if g * g != grid.rows() {
        return shape_err(format!("{} embeddings do not form a square grid", grid.rows()));
    }
    if out == 0 || g % out != 0 {
        return shape_err(format!("grid side {g} is not divisible by {out}"));
    }
    let b = g / out;
    let n = (b * b) as f64;
    let mut pooled = Matrix::zeros(out * out, grid.cols());
    for i in 0..g {
        for j in 0..g {
            let dst = pooled.row_mut((i / b) * out + j / b);
            for (d, &s) in dst.iter_mut().zip(grid.row(i * g + j)) {
                *d += s;
            }
        }
    }
    Ok(pooled.map(|x| x / n))
}
