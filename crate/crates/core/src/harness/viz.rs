//! Scan-path visualization written as binary Portable PixMap (P6) files.

use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{DeformRecord, Model};
use crate::scan_order::ScanOrder;
use crate::tensor::Tensor;

/// Output pixels per input pixel in the points overlay.
pub const OVERLAY_SCALE: usize = 8;
/// Output pixels per token side in the order maps.
pub const ORDER_CELL: usize = 32;

pub const POINTS_FILE: &str = "points.ppm";
pub const ORDER_RASTER_FILE: &str = "order_raster.ppm";
pub const ORDER_DEFORMABLE_FILE: &str = "order_deformable.ppm";

const REFERENCE_COLOR: [u8; 3] = [40, 110, 255];
const DEFORMED_COLOR: [u8; 3] = [255, 40, 40];
const SEGMENT_COLOR: [u8; 3] = [255, 255, 255];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub rgb: Vec<u8>,
}

impl Ppm {
    pub fn new(width: usize, height: usize) -> Self {
        Ppm {
            width,
            height,
            rgb: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Writes a pixel; coordinates outside the image are ignored.
    pub fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.rgb[i..i + 3].copy_from_slice(&color);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    /// Parses a P6 file with maximum value 255. `#` comments are allowed in
    /// the header.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format {
                    offset: pos as u64,
                    reason: "truncated PPM header".into(),
                });
            }
            fields.push((
                start,
                String::from_utf8_lossy(&bytes[start..pos]).into_owned(),
            ));
        }
        if fields[0].1 != "P6" {
            return Err(Error::Format {
                offset: 0,
                reason: format!("expected P6 magic, got {:?}", fields[0].1),
            });
        }
        let num = |k: usize| -> Result<usize> {
            fields[k].1.parse().map_err(|_| Error::Format {
                offset: fields[k].0 as u64,
                reason: format!("bad PPM header field {:?}", fields[k].1),
            })
        };
        let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
        if maxval != 255 {
            return Err(Error::Format {
                offset: fields[3].0 as u64,
                reason: format!("only 8-bit PPM is supported, got maximum {maxval}"),
            });
        }
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                reason: format!("truncated PPM pixels: need {need} bytes after offset {pos}"),
            });
        }
        Ok(Ppm {
            width,
            height,
            rgb: bytes[pos..pos + need].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// `[H, W, 3]` image with values in [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.height, self.width, 3], |i| {
            f64::from(self.rgb[i]) / 255.0
        })
    }

    /// Values are clamped to [0, 1] and rounded to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 3 || t.shape()[2] != 3 {
            return Err(Error::input(format!(
                "expected an [H, W, 3] image, got {:?}",
                t.shape()
            )));
        }
        Ok(Ppm {
            width: t.shape()[1],
            height: t.shape()[0],
            rgb: t
                .data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        })
    }
}

/// Yellow at rank 0 to green at rank `n − 1`, linear in the red channel.
pub fn rank_color(rank: usize, n: usize) -> [u8; 3] {
    let r = if n <= 1 {
        255.0
    } else {
        (255.0 * (1.0 - rank as f64 / (n - 1) as f64)).round()
    };
    [r as u8, 255, 0]
}

/// Per-token rank map of an `h × w` scan order.
pub fn order_map(order: &ScanOrder, h: usize, w: usize) -> Result<Ppm> {
    if order.len() != h * w {
        return Err(Error::input(format!(
            "order of {} tokens does not tile {h}x{w}",
            order.len()
        )));
    }
    let mut img = Ppm::new(w * ORDER_CELL, h * ORDER_CELL);
    for (token, &rank) in order.inverse().iter().enumerate() {
        let color = rank_color(rank, order.len());
        let (ty, tx) = (token / w, token % w);
        for y in 0..ORDER_CELL {
            for x in 0..ORDER_CELL {
                img.put(
                    (tx * ORDER_CELL + x) as i64,
                    (ty * ORDER_CELL + y) as i64,
                    color,
                );
            }
        }
    }
    Ok(img)
}

fn dot(img: &mut Ppm, x: f64, y: f64, color: [u8; 3]) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -1..=1 {
        for dx in -1..=1 {
            img.put(cx + dx, cy + dy, color);
        }
    }
}

fn segment(img: &mut Ppm, from: (f64, f64), to: (f64, f64), color: [u8; 3]) {
    let steps = (to.0 - from.0).abs().max((to.1 - from.1).abs()).ceil() as usize;
    for k in 0..=steps {
        let t = if steps == 0 {
            0.0
        } else {
            k as f64 / steps as f64
        };
        let x = from.0 + t * (to.0 - from.0);
        let y = from.1 + t * (to.1 - from.1);
        img.put(x.round() as i64, y.round() as i64, color);
    }
}

/// Overlay pixel position of a normalized feature-map coordinate.
fn overlay_position(coord: f64, extent: usize, image_extent: usize) -> f64 {
    let stride = image_extent as f64 / extent as f64;
    let u = if extent == 1 {
        0.0
    } else {
        (coord + 1.0) * 0.5 * (extent - 1) as f64
    };
    (u + 0.5) * stride * OVERLAY_SCALE as f64
}

/// Upscaled image with each token's reference point, its deformed point and
/// the segment joining them. `delta_p` is `[h, w, 2]` in normalized units, or
/// `None` for zero offsets.
pub fn points_overlay(image: &Tensor, h: usize, w: usize, delta_p: Option<&Tensor>) -> Result<Ppm> {
    let base = Ppm::from_tensor(image)?;
    let mut img = Ppm::new(base.width * OVERLAY_SCALE, base.height * OVERLAY_SCALE);
    for y in 0..img.height {
        for x in 0..img.width {
            img.put(
                x as i64,
                y as i64,
                base.get(x / OVERLAY_SCALE, y / OVERLAY_SCALE),
            );
        }
    }
    if let Some(dp) = delta_p {
        dp.expect_shape("points overlay offsets", &[h, w, 2])?;
    }
    let grid = crate::deform::make_reference_grid(h, w)?.p;
    let mut points = Vec::with_capacity(h * w);
    for (k, p) in grid.data().chunks_exact(2).enumerate() {
        let d = delta_p.map_or([0.0, 0.0], |dp| [dp.data()[2 * k], dp.data()[2 * k + 1]]);
        let reference = (
            overlay_position(p[0], w, base.width),
            overlay_position(p[1], h, base.height),
        );
        let moved = (
            overlay_position((p[0] + d[0]).clamp(-1.0, 1.0), w, base.width),
            overlay_position((p[1] + d[1]).clamp(-1.0, 1.0), h, base.height),
        );
        segment(&mut img, reference, moved, SEGMENT_COLOR);
        points.push((reference, moved));
    }
    for &(reference, _) in &points {
        dot(&mut img, reference.0, reference.1, REFERENCE_COLOR);
    }
    for &(_, moved) in &points {
        dot(&mut img, moved.0, moved.1, DEFORMED_COLOR);
    }
    Ok(img)
}

pub struct ScanViews {
    pub points: Ppm,
    pub order_raster: Ppm,
    pub order_deformable: Ppm,
    pub deformable_order: ScanOrder,
}

/// Views of the first block's deformable scan at the first stage.
pub fn scan_views(model: &Model, image: &Tensor) -> Result<ScanViews> {
    let mut tape = Tape::new();
    let b = model.store().bind_frozen(&mut tape);
    let img = tape.constant(image.clone());
    let trace = model.forward(&mut tape, &b, img)?;
    let DeformRecord {
        height,
        width,
        order,
        delta_p,
        ..
    } = trace
        .deform
        .into_iter()
        .find(|r| r.stage == 0 && r.block == 0)
        .ok_or_else(|| {
            Error::config("scan visualization needs a model with a deformable branch")
        })?;
    let dp = delta_p.map(|v| tape.value(v).clone());
    Ok(ScanViews {
        points: points_overlay(image, height, width, dp.as_ref())?,
        order_raster: order_map(&ScanOrder::identity(height * width), height, width)?,
        order_deformable: order_map(&order, height, width)?,
        deformable_order: order,
    })
}

/// Writes the three views into `out_dir` and returns their paths.
pub fn scan_viz(model: &Model, image: &Tensor, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let expected = [model.config().image_size, model.config().image_size, 3];
    if image.shape() != expected {
        return Err(Error::input(format!(
            "image shape {:?} does not match the model input {expected:?}",
            image.shape()
        )));
    }
    let views = scan_views(model, image)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    for (name, img) in [
        (POINTS_FILE, &views.points),
        (ORDER_RASTER_FILE, &views.order_raster),
        (ORDER_DEFORMABLE_FILE, &views.order_deformable),
    ] {
        let path = out_dir.join(name);
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
